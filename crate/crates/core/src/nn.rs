//! The fixed layer set and sequential network evaluation with reverse-mode
//! gradients.
//!
//! A [`Net`] is a chain of [`LayerSpec`]s over a main activation plus an
//! optional auxiliary input (the latent vector). `SpatialReplicate` turns the
//! auxiliary `[n, d]` vector into a `[n, d, h, w]` map matching the main
//! activation, and `Concat` merges it into the channel axis; everything else
//! transforms the main path.
//!
//! Forward is pure. Batch-norm running statistics are updated only through an
//! explicit [`Net::apply_bn_updates`] call with the cache of a train-mode
//! forward pass.

use crate::params::{GradStore, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One layer of the fixed set. Parameter-bearing layers carry the name used
/// to key their tensors in the [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    FullyConnected { name: String, in_features: usize, out_features: usize },
    Conv2d { name: String, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm { name: String, channels: usize },
    Gelu,
    LeakyRelu { slope: f64 },
    Sigmoid,
    NearestUpsample { factor: usize },
    SpatialReplicate,
    Concat,
}

impl LayerSpec {
    pub fn fc(name: &str, in_features: usize, out_features: usize) -> Self {
        LayerSpec::FullyConnected { name: name.into(), in_features, out_features }
    }

    pub fn conv(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d { name: name.into(), in_ch, out_ch, kernel, stride, padding }
    }

    pub fn batch_norm(name: &str, channels: usize) -> Self {
        LayerSpec::BatchNorm { name: name.into(), channels }
    }

    pub fn leaky_relu() -> Self {
        LayerSpec::LeakyRelu { slope: LEAKY_SLOPE }
    }

    fn describe(&self) -> String {
        match self {
            LayerSpec::FullyConnected { name, .. } => format!("fully-connected '{name}'"),
            LayerSpec::Conv2d { name, .. } => format!("conv2d '{name}'"),
            LayerSpec::BatchNorm { name, .. } => format!("batch-norm '{name}'"),
            LayerSpec::Gelu => "gelu".into(),
            LayerSpec::LeakyRelu { .. } => "leaky-relu".into(),
            LayerSpec::Sigmoid => "sigmoid".into(),
            LayerSpec::NearestUpsample { .. } => "nearest-upsample".into(),
            LayerSpec::SpatialReplicate => "spatial-replicate".into(),
            LayerSpec::Concat => "concat".into(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv2d { kernel, stride, .. } => {
                if !matches!(kernel, 3 | 4) {
                    return Err(Error::Config(format!("{}: kernel size must be 3 or 4", self.describe())));
                }
                if !matches!(stride, 1 | 2) {
                    return Err(Error::Config(format!("{}: stride must be 1 or 2", self.describe())));
                }
                Ok(())
            }
            LayerSpec::NearestUpsample { factor } if *factor == 0 => {
                Err(Error::Config("nearest-upsample: factor must be positive".into()))
            }
            LayerSpec::LeakyRelu { slope } if !slope.is_finite() => {
                Err(Error::Config("leaky-relu: slope must be finite".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Default negative slope; the paper's adversarial-segmentation lineage uses 0.2.
pub const LEAKY_SLOPE: f64 = 0.2;

// ─── forward cache ───────────────────────────────────────────────────────

enum Trace {
    Fc { input: Tensor },
    Conv { input: Tensor },
    BatchNorm { xhat: Tensor, inv_std: Vec<f64> },
    Gelu { input: Tensor },
    LeakyRelu { input: Tensor },
    Sigmoid { output: Tensor },
    Upsample { in_shape: Vec<usize> },
    SpatialReplicate { side_shape: Vec<usize> },
    Concat { c_front: usize },
}

/// Batch statistics recorded by a train-mode batch-norm forward.
struct BnBatchStats {
    name: String,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Everything a backward pass needs from the paired forward pass.
pub struct FwdCache {
    mode: Mode,
    traces: Vec<Trace>,
    bn_stats: Vec<BnBatchStats>,
    input_shape: Vec<usize>,
    aux_shape: Option<Vec<usize>>,
}

impl FwdCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct NetGrads {
    pub params: GradStore,
    pub input: Tensor,
    pub aux: Option<Tensor>,
}

/// Which gradients the backward pass must produce. Skipping unneeded ones
/// (e.g. parameter gradients inside a Langevin step) saves the matching GEMMs.
#[derive(Clone, Copy, Debug)]
pub struct GradWants {
    pub params: bool,
    pub input: bool,
    pub aux: bool,
}

impl GradWants {
    pub const ALL: GradWants = GradWants { params: true, input: true, aux: true };
    pub const AUX_ONLY: GradWants = GradWants { params: false, input: false, aux: true };
    pub const PARAMS_ONLY: GradWants = GradWants { params: true, input: false, aux: false };
    pub const INPUT_ONLY: GradWants = GradWants { params: false, input: true, aux: false };
}

// ─── net ─────────────────────────────────────────────────────────────────

/// A sequential chain over the fixed layer set.
#[derive(Clone, Debug, PartialEq)]
pub struct Net {
    layers: Vec<LayerSpec>,
}

impl Net {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        for l in &layers {
            l.validate()?;
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::BatchNorm { .. }))
    }

    /// Create all parameters this net needs. Weights and biases are drawn
    /// from N(0, 0.01); batch-norm scale starts at 1, shift at 0, running
    /// stats at (0, 1).
    pub fn init_params(&self, seed: u64, component: &str) -> ParamStore {
        let mut ps = ParamStore::new();
        for l in &self.layers {
            match l {
                LayerSpec::FullyConnected { name, in_features, out_features } => {
                    ps.init_gaussian(&format!("{name}.w"), &[*out_features, *in_features], seed, component);
                    ps.init_gaussian(&format!("{name}.b"), &[*out_features], seed, component);
                }
                LayerSpec::Conv2d { name, in_ch, out_ch, kernel, .. } => {
                    ps.init_gaussian(&format!("{name}.w"), &[*out_ch, *in_ch, *kernel, *kernel], seed, component);
                    ps.init_gaussian(&format!("{name}.b"), &[*out_ch], seed, component);
                }
                LayerSpec::BatchNorm { name, channels } => {
                    ps.init_const(&format!("{name}.gamma"), &[*channels], 1.0, true);
                    ps.init_const(&format!("{name}.beta"), &[*channels], 0.0, true);
                    ps.init_const(&format!("{name}.running_mean"), &[*channels], 0.0, false);
                    ps.init_const(&format!("{name}.running_var"), &[*channels], 1.0, false);
                }
                _ => {}
            }
        }
        ps
    }

    /// Output shape from static composition of the layer specs.
    pub fn out_shape(&self, input: &[usize], aux: Option<&[usize]>) -> Result<Vec<usize>> {
        let mut main = input.to_vec();
        let mut side = aux.map(|s| s.to_vec());
        for (idx, l) in self.layers.iter().enumerate() {
            main = match l {
                LayerSpec::FullyConnected { in_features, out_features, .. } => {
                    if main.len() != 2 || main[1] != *in_features {
                        return Err(shape_err(idx, l, &main, &format!("expects [n, {in_features}]")));
                    }
                    vec![main[0], *out_features]
                }
                LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, .. } => {
                    if main.len() != 4 || main[1] != *in_ch {
                        return Err(shape_err(idx, l, &main, &format!("expects [n, {in_ch}, h, w]")));
                    }
                    let oh = conv_out(main[2], *kernel, *stride, *padding, idx, l)?;
                    let ow = conv_out(main[3], *kernel, *stride, *padding, idx, l)?;
                    vec![main[0], *out_ch, oh, ow]
                }
                LayerSpec::BatchNorm { channels, .. } => {
                    if main.len() < 2 || main[1] != *channels {
                        return Err(shape_err(idx, l, &main, &format!("expects channel dim {channels}")));
                    }
                    main
                }
                LayerSpec::Gelu | LayerSpec::LeakyRelu { .. } | LayerSpec::Sigmoid => main,
                LayerSpec::NearestUpsample { factor } => {
                    if main.len() != 4 {
                        return Err(shape_err(idx, l, &main, "expects [n, c, h, w]"));
                    }
                    vec![main[0], main[1], main[2] * factor, main[3] * factor]
                }
                LayerSpec::SpatialReplicate => {
                    let s = side
                        .as_ref()
                        .ok_or_else(|| layer_err(idx, l, "no auxiliary input to replicate"))?;
                    if s.len() != 2 || main.len() != 4 || s[0] != main[0] {
                        return Err(shape_err(idx, l, s, "expects aux [n, d] with 4-d main"));
                    }
                    side = Some(vec![s[0], s[1], main[2], main[3]]);
                    main
                }
                LayerSpec::Concat => {
                    let s = side.take().ok_or_else(|| layer_err(idx, l, "no auxiliary input to concatenate"))?;
                    if s.len() != main.len() || s[0] != main[0] || s[2..] != main[2..] {
                        return Err(shape_err(idx, l, &s, &format!("cannot concat onto {main:?}")));
                    }
                    let mut out = main.clone();
                    out[1] += s[1];
                    out
                }
            };
        }
        Ok(main)
    }

    pub fn forward(&self, params: &ParamStore, input: &Tensor, aux: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_cached(params, input, aux, mode)?.0)
    }

    pub fn forward_cached(
        &self,
        params: &ParamStore,
        input: &Tensor,
        aux: Option<&Tensor>,
        mode: Mode,
    ) -> Result<(Tensor, FwdCache)> {
        let mut cache = FwdCache {
            mode,
            traces: Vec::with_capacity(self.layers.len()),
            bn_stats: Vec::new(),
            input_shape: input.shape.clone(),
            aux_shape: aux.map(|a| a.shape.clone()),
        };
        let mut main = input.clone();
        let mut side = aux.cloned();
        for (idx, l) in self.layers.iter().enumerate() {
            main = self.forward_layer(idx, l, params, main, &mut side, mode, &mut cache)?;
        }
        main.check_finite("forward output")?;
        Ok((main, cache))
    }

    fn forward_layer(
        &self,
        idx: usize,
        l: &LayerSpec,
        params: &ParamStore,
        main: Tensor,
        side: &mut Option<Tensor>,
        mode: Mode,
        cache: &mut FwdCache,
    ) -> Result<Tensor> {
        match l {
            LayerSpec::FullyConnected { name, in_features, out_features } => {
                if main.shape.len() != 2 || main.shape[1] != *in_features {
                    return Err(shape_err(idx, l, &main.shape, &format!("expects [n, {in_features}]")));
                }
                let out = fc_forward(&main, params.get(&format!("{name}.w"))?, params.get(&format!("{name}.b"))?, *out_features);
                cache.traces.push(Trace::Fc { input: main });
                Ok(out)
            }
            LayerSpec::Conv2d { name, in_ch, out_ch, kernel, stride, padding } => {
                if main.shape.len() != 4 || main.shape[1] != *in_ch {
                    return Err(shape_err(idx, l, &main.shape, &format!("expects [n, {in_ch}, h, w]")));
                }
                conv_out(main.shape[2], *kernel, *stride, *padding, idx, l)?;
                conv_out(main.shape[3], *kernel, *stride, *padding, idx, l)?;
                let out = conv_forward(
                    &main,
                    params.get(&format!("{name}.w"))?,
                    params.get(&format!("{name}.b"))?,
                    *out_ch,
                    *kernel,
                    *stride,
                    *padding,
                );
                cache.traces.push(Trace::Conv { input: main });
                Ok(out)
            }
            LayerSpec::BatchNorm { name, channels } => {
                if main.shape.len() < 2 || main.shape[1] != *channels {
                    return Err(shape_err(idx, l, &main.shape, &format!("expects channel dim {channels}")));
                }
                let gamma = params.get(&format!("{name}.gamma"))?;
                let beta = params.get(&format!("{name}.beta"))?;
                let per_channel = main.len() / channels;
                if mode == Mode::Train {
                    if per_channel < 2 {
                        return Err(layer_err(idx, l, "train mode needs at least 2 values per channel (batch size >= 2)"));
                    }
                    let (mean, var) = bn_batch_stats(&main, *channels);
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let (out, xhat) = bn_normalize(&main, &mean, &inv_std, gamma, beta);
                    cache.bn_stats.push(BnBatchStats { name: name.clone(), mean, var });
                    cache.traces.push(Trace::BatchNorm { xhat, inv_std });
                    Ok(out)
                } else {
                    let rm = params.get(&format!("{name}.running_mean"))?;
                    let rv = params.get(&format!("{name}.running_var"))?;
                    let inv_std: Vec<f64> = rv.data.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let (out, xhat) = bn_normalize(&main, &rm.data, &inv_std, gamma, beta);
                    cache.traces.push(Trace::BatchNorm { xhat, inv_std });
                    Ok(out)
                }
            }
            LayerSpec::Gelu => {
                let out = main.map(gelu);
                cache.traces.push(Trace::Gelu { input: main });
                Ok(out)
            }
            LayerSpec::LeakyRelu { slope } => {
                let s = *slope;
                let out = main.map(|x| if x >= 0.0 { x } else { s * x });
                cache.traces.push(Trace::LeakyRelu { input: main });
                Ok(out)
            }
            LayerSpec::Sigmoid => {
                let out = main.map(sigmoid);
                cache.traces.push(Trace::Sigmoid { output: out.clone() });
                Ok(out)
            }
            LayerSpec::NearestUpsample { factor } => {
                if main.shape.len() != 4 {
                    return Err(shape_err(idx, l, &main.shape, "expects [n, c, h, w]"));
                }
                let out = upsample_forward(&main, *factor);
                cache.traces.push(Trace::Upsample { in_shape: main.shape.clone() });
                Ok(out)
            }
            LayerSpec::SpatialReplicate => {
                let s = side.take().ok_or_else(|| layer_err(idx, l, "no auxiliary input to replicate"))?;
                if s.shape.len() != 2 || main.shape.len() != 4 || s.shape[0] != main.shape[0] {
                    return Err(shape_err(idx, l, &s.shape, "expects aux [n, d] with 4-d main"));
                }
                let (h, w) = (main.shape[2], main.shape[3]);
                let mut rep = Tensor::zeros(&[s.shape[0], s.shape[1], h, w]);
                for n in 0..s.shape[0] {
                    for j in 0..s.shape[1] {
                        let v = s.data[n * s.shape[1] + j];
                        let base = (n * s.shape[1] + j) * h * w;
                        rep.data[base..base + h * w].fill(v);
                    }
                }
                cache.traces.push(Trace::SpatialReplicate { side_shape: s.shape.clone() });
                *side = Some(rep);
                Ok(main)
            }
            LayerSpec::Concat => {
                let s = side.take().ok_or_else(|| layer_err(idx, l, "no auxiliary input to concatenate"))?;
                let c_front = main.shape[1];
                let out = main.concat_channels(&s).map_err(|e| layer_err(idx, l, &e.to_string()))?;
                cache.traces.push(Trace::Concat { c_front });
                Ok(out)
            }
        }
    }

    /// Reverse-mode gradients of `<upstream, output>` for the forward pass
    /// recorded in `cache`. `mode` must match the cached pass.
    pub fn backward(
        &self,
        params: &ParamStore,
        cache: &FwdCache,
        upstream: &Tensor,
        mode: Mode,
        wants: GradWants,
    ) -> Result<NetGrads> {
        if mode != cache.mode {
            return Err(Error::Config(format!(
                "backward mode {:?} does not match forward mode {:?}",
                mode, cache.mode
            )));
        }
        upstream.check_finite("backward upstream")?;

        let mut grads = GradStore::zeros_like(params);
        let mut grad_main = upstream.clone();
        let mut grad_side: Option<Tensor> = None;
        let mut aux_grad: Option<Tensor> = None;

        for (idx, l) in self.layers.iter().enumerate().rev() {
            let trace = &cache.traces[idx];
            // Nothing left to produce below this point?
            if !wants.params && !wants.input && (aux_grad.is_some() || !wants.aux) {
                break;
            }
            match (l, trace) {
                (LayerSpec::FullyConnected { name, .. }, Trace::Fc { input }) => {
                    let w = params.get(&format!("{name}.w"))?;
                    if wants.params {
                        fc_backward_params(input, &grad_main, &mut grads, name);
                    }
                    grad_main = fc_backward_input(&grad_main, w, input.shape[1]);
                }
                (LayerSpec::Conv2d { name, out_ch, kernel, stride, padding, .. }, Trace::Conv { input }) => {
                    let w = params.get(&format!("{name}.w"))?;
                    grad_main = conv_backward(
                        input, w, &grad_main, *out_ch, *kernel, *stride, *padding,
                        if wants.params { Some((&mut grads, name.as_str())) } else { None },
                    );
                }
                (LayerSpec::BatchNorm { name, channels }, Trace::BatchNorm { xhat, inv_std }) => {
                    let gamma = params.get(&format!("{name}.gamma"))?;
                    grad_main = bn_backward(
                        &grad_main, xhat, inv_std, gamma, *channels, cache.mode,
                        if wants.params { Some((&mut grads, name.as_str())) } else { None },
                    );
                }
                (LayerSpec::Gelu, Trace::Gelu { input }) => {
                    for (g, &x) in grad_main.data.iter_mut().zip(input.data.iter()) {
                        *g *= gelu_grad(x);
                    }
                }
                (LayerSpec::LeakyRelu { slope }, Trace::LeakyRelu { input }) => {
                    for (g, &x) in grad_main.data.iter_mut().zip(input.data.iter()) {
                        if x < 0.0 {
                            *g *= slope;
                        }
                    }
                }
                (LayerSpec::Sigmoid, Trace::Sigmoid { output }) => {
                    for (g, &y) in grad_main.data.iter_mut().zip(output.data.iter()) {
                        *g *= y * (1.0 - y);
                    }
                }
                (LayerSpec::NearestUpsample { factor }, Trace::Upsample { in_shape }) => {
                    grad_main = upsample_backward(&grad_main, in_shape, *factor);
                }
                (LayerSpec::Concat, Trace::Concat { c_front }) => {
                    let (front, back) = grad_main.split_channels(*c_front)?;
                    grad_main = front;
                    grad_side = Some(back);
                }
                (LayerSpec::SpatialReplicate, Trace::SpatialReplicate { side_shape }) => {
                    let rep_grad = grad_side.take().ok_or_else(|| {
                        layer_err(idx, l, "replicated branch was never consumed by a concat layer")
                    })?;
                    let (n, d) = (side_shape[0], side_shape[1]);
                    let hw: usize = rep_grad.shape[2..].iter().product();
                    let mut g = Tensor::zeros(&[n, d]);
                    for i in 0..n {
                        for j in 0..d {
                            let base = (i * d + j) * hw;
                            g.data[i * d + j] = rep_grad.data[base..base + hw].iter().sum();
                        }
                    }
                    aux_grad = Some(g);
                }
                _ => unreachable!("trace/layer mismatch"),
            }
        }

        // A raw (un-replicated) aux consumed directly by Concat.
        if aux_grad.is_none() && wants.aux {
            if let Some(gs) = grad_side.take() {
                aux_grad = Some(gs);
            }
        }
        if let Some(a) = &aux_grad {
            if let Some(shape) = &cache.aux_shape {
                if &a.shape != shape {
                    return Err(Error::ShapeMismatch {
                        context: "aux gradient".into(),
                        detail: format!("{:?} vs {:?}", a.shape, shape),
                    });
                }
            }
        }

        let input_grad = if wants.input {
            if grad_main.shape != cache.input_shape {
                return Err(Error::ShapeMismatch {
                    context: "input gradient".into(),
                    detail: format!("{:?} vs {:?}", grad_main.shape, cache.input_shape),
                });
            }
            grad_main
        } else {
            Tensor::zeros(&cache.input_shape)
        };

        Ok(NetGrads { params: grads, input: input_grad, aux: aux_grad })
    }

    /// Forward + backward in one call.
    pub fn value_and_grad(
        &self,
        params: &ParamStore,
        input: &Tensor,
        aux: Option<&Tensor>,
        mode: Mode,
        upstream: &Tensor,
        wants: GradWants,
    ) -> Result<(Tensor, NetGrads)> {
        let (out, cache) = self.forward_cached(params, input, aux, mode)?;
        if upstream.shape != out.shape {
            return Err(Error::ShapeMismatch {
                context: "value_and_grad upstream".into(),
                detail: format!("{:?} vs output {:?}", upstream.shape, out.shape),
            });
        }
        let grads = self.backward(params, &cache, upstream, mode, wants)?;
        Ok((out, grads))
    }

    /// Fold the batch statistics recorded by a train-mode forward pass into
    /// the running mean/variance buffers (momentum 0.1).
    pub fn apply_bn_updates(&self, params: &mut ParamStore, cache: &FwdCache) -> Result<()> {
        for stats in &cache.bn_stats {
            let rm = params.get_mut(&format!("{}.running_mean", stats.name))?;
            for (r, &m) in rm.data.iter_mut().zip(stats.mean.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = params.get_mut(&format!("{}.running_var", stats.name))?;
            for (r, &v) in rv.data.iter_mut().zip(stats.var.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
        Ok(())
    }
}

fn layer_err(idx: usize, l: &LayerSpec, msg: &str) -> Error {
    Error::Config(format!("layer {idx} ({}): {msg}", l.describe()))
}

fn shape_err(idx: usize, l: &LayerSpec, got: &[usize], msg: &str) -> Error {
    Error::ShapeMismatch {
        context: format!("layer {idx} ({})", l.describe()),
        detail: format!("got {got:?}; {msg}"),
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize, idx: usize, l: &LayerSpec) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(shape_err(idx, l, &[size], "spatial extent smaller than kernel"));
    }
    Ok((padded - kernel) / stride + 1)
}

// ─── scalar activations ──────────────────────────────────────────────────

/// Exact Gaussian-CDF GELU: x * Phi(x).
pub fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ─── gemm-backed primitives ──────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize, k: usize, n: usize, alpha: f64,
    a: &[f64], rsa: isize, csa: isize,
    b: &[f64], rsb: isize, csb: isize,
    beta: f64, c: &mut [f64], rsc: isize, csc: isize,
) {
    unsafe {
        matrixmultiply::dgemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
    }
}

fn fc_forward(x: &Tensor, w: &Tensor, b: &Tensor, out_features: usize) -> Tensor {
    let (n, i) = (x.shape[0], x.shape[1]);
    let o = out_features;
    let mut out = Tensor::zeros(&[n, o]);
    // out = x * W^T
    gemm(n, i, o, 1.0, &x.data, i as isize, 1, &w.data, 1, i as isize, 0.0, &mut out.data, o as isize, 1);
    for row in 0..n {
        for (v, bv) in out.data[row * o..(row + 1) * o].iter_mut().zip(b.data.iter()) {
            *v += bv;
        }
    }
    out
}

fn fc_backward_params(input: &Tensor, upstream: &Tensor, grads: &mut GradStore, name: &str) {
    let (n, i) = (input.shape[0], input.shape[1]);
    let o = upstream.shape[1];
    let dw = grads.get_mut(&format!("{name}.w")).expect("fc weight grad slot");
    // dW += upstream^T * input
    gemm(o, n, i, 1.0, &upstream.data, 1, o as isize, &input.data, i as isize, 1, 1.0, &mut dw.data, i as isize, 1);
    let db = grads.get_mut(&format!("{name}.b")).expect("fc bias grad slot");
    for row in 0..n {
        for (g, &u) in db.data.iter_mut().zip(upstream.data[row * o..(row + 1) * o].iter()) {
            *g += u;
        }
    }
}

fn fc_backward_input(upstream: &Tensor, w: &Tensor, in_features: usize) -> Tensor {
    let (n, o) = (upstream.shape[0], upstream.shape[1]);
    let i = in_features;
    let mut dx = Tensor::zeros(&[n, i]);
    // dx = upstream * W
    gemm(n, o, i, 1.0, &upstream.data, o as isize, 1, &w.data, i as isize, 1, 0.0, &mut dx.data, i as isize, 1);
    dx
}

/// Gather conv patches of one sample into `col[[oh*ow, c*k*k]]`.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, kernel: usize, stride: usize, padding: usize, oh: usize, ow: usize, col: &mut [f64]) {
    let kk = kernel * kernel;
    col.fill(0.0);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * c * kk;
            let iy0 = (oy * stride) as isize - padding as isize;
            let ix0 = (ox * stride) as isize - padding as isize;
            for ic in 0..c {
                let chan = &x[ic * h * w..(ic + 1) * h * w];
                let dst = row + ic * kk;
                for ky in 0..kernel {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[dst + ky * kernel + kx] = chan[iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column buffer back into an input-shaped gradient.
#[allow(clippy::too_many_arguments)]
fn col2im(col: &[f64], c: usize, h: usize, w: usize, kernel: usize, stride: usize, padding: usize, oh: usize, ow: usize, dx: &mut [f64]) {
    let kk = kernel * kernel;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * c * kk;
            let iy0 = (oy * stride) as isize - padding as isize;
            let ix0 = (ox * stride) as isize - padding as isize;
            for ic in 0..c {
                let chan = &mut dx[ic * h * w..(ic + 1) * h * w];
                let src = row + ic * kk;
                for ky in 0..kernel {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        chan[iy as usize * w + ix as usize] += col[src + ky * kernel + kx];
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Tensor {
    let (n, c, h, wid) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (wid + 2 * padding - kernel) / stride + 1;
    let l = oh * ow;
    let k = c * kernel * kernel;
    let mut out = Tensor::zeros(&[n, out_ch, oh, ow]);
    let mut col = vec![0.0; l * k];
    for s in 0..n {
        im2col(x.row(s), c, h, wid, kernel, stride, padding, oh, ow, &mut col);
        let out_s = out.row_mut(s);
        // out_s[oc, L] = W[oc, K] * col^T[K, L]
        gemm(out_ch, k, l, 1.0, &w.data, k as isize, 1, &col, 1, k as isize, 0.0, out_s, l as isize, 1);
        for oc in 0..out_ch {
            let bv = b.data[oc];
            for v in &mut out_s[oc * l..(oc + 1) * l] {
                *v += bv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    upstream: &Tensor,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    param_grads: Option<(&mut GradStore, &str)>,
) -> Tensor {
    let (n, c, h, wid) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (upstream.shape[2], upstream.shape[3]);
    let l = oh * ow;
    let k = c * kernel * kernel;
    let mut dx = Tensor::zeros(&x.shape);
    let mut col = vec![0.0; l * k];
    let mut dcol = vec![0.0; l * k];

    let wants_params = param_grads.is_some();
    let mut dw_local = vec![0.0; if wants_params { out_ch * k } else { 0 }];
    let mut db_local = vec![0.0; if wants_params { out_ch } else { 0 }];

    for s in 0..n {
        let up_s = upstream.row(s);
        if wants_params {
            im2col(x.row(s), c, h, wid, kernel, stride, padding, oh, ow, &mut col);
            // dW[oc, K] += up_s[oc, L] * col[L, K]
            gemm(out_ch, l, k, 1.0, up_s, l as isize, 1, &col, k as isize, 1, 1.0, &mut dw_local, k as isize, 1);
            for oc in 0..out_ch {
                db_local[oc] += up_s[oc * l..(oc + 1) * l].iter().sum::<f64>();
            }
        }
        // dcol[L, K] = up_s^T[L, oc] * W[oc, K]
        gemm(l, out_ch, k, 1.0, up_s, 1, l as isize, &w.data, k as isize, 1, 0.0, &mut dcol, k as isize, 1);
        col2im(&dcol, c, h, wid, kernel, stride, padding, oh, ow, dx.row_mut(s));
    }
    if let Some((grads, name)) = param_grads {
        let dw = grads.get_mut(&format!("{name}.w")).expect("conv weight grad slot");
        for (g, v) in dw.data.iter_mut().zip(dw_local.iter()) {
            *g += v;
        }
        let db = grads.get_mut(&format!("{name}.b")).expect("conv bias grad slot");
        for (g, v) in db.data.iter_mut().zip(db_local.iter()) {
            *g += v;
        }
    }
    dx
}

// ─── batch norm ──────────────────────────────────────────────────────────

/// Per-channel iteration helper: visits (channel, slice offset, run length).
fn for_each_channel_run(shape: &[usize], channels: usize, mut f: impl FnMut(usize, usize, usize)) {
    let n = shape[0];
    let inner: usize = shape[2..].iter().product::<usize>().max(1);
    for s in 0..n {
        for ch in 0..channels {
            f(ch, (s * channels + ch) * inner, inner);
        }
    }
}

fn bn_batch_stats(x: &Tensor, channels: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; channels];
    let mut count = vec![0usize; channels];
    for_each_channel_run(&x.shape, channels, |ch, off, len| {
        mean[ch] += x.data[off..off + len].iter().sum::<f64>();
        count[ch] += len;
    });
    for (m, &c) in mean.iter_mut().zip(count.iter()) {
        *m /= c as f64;
    }
    let mut var = vec![0.0; channels];
    for_each_channel_run(&x.shape, channels, |ch, off, len| {
        let m = mean[ch];
        var[ch] += x.data[off..off + len].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    });
    for (v, &c) in var.iter_mut().zip(count.iter()) {
        *v /= c as f64;
    }
    (mean, var)
}

fn bn_normalize(x: &Tensor, mean: &[f64], inv_std: &[f64], gamma: &Tensor, beta: &Tensor) -> (Tensor, Tensor) {
    let channels = gamma.data.len();
    let mut xhat = Tensor::zeros(&x.shape);
    let mut out = Tensor::zeros(&x.shape);
    for_each_channel_run(&x.shape, channels, |ch, off, len| {
        let (m, is, g, b) = (mean[ch], inv_std[ch], gamma.data[ch], beta.data[ch]);
        for i in off..off + len {
            let h = (x.data[i] - m) * is;
            xhat.data[i] = h;
            out.data[i] = g * h + b;
        }
    });
    (out, xhat)
}

fn bn_backward(
    upstream: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    channels: usize,
    mode: Mode,
    param_grads: Option<(&mut GradStore, &str)>,
) -> Tensor {
    let mut sum_u = vec![0.0; channels];
    let mut sum_ux = vec![0.0; channels];
    let mut count = vec![0usize; channels];
    for_each_channel_run(&upstream.shape, channels, |ch, off, len| {
        for i in off..off + len {
            sum_u[ch] += upstream.data[i];
            sum_ux[ch] += upstream.data[i] * xhat.data[i];
        }
        count[ch] += len;
    });
    if let Some((grads, name)) = param_grads {
        let dg = grads.get_mut(&format!("{name}.gamma")).expect("bn gamma grad slot");
        for (g, &s) in dg.data.iter_mut().zip(sum_ux.iter()) {
            *g += s;
        }
        let db = grads.get_mut(&format!("{name}.beta")).expect("bn beta grad slot");
        for (g, &s) in db.data.iter_mut().zip(sum_u.iter()) {
            *g += s;
        }
    }
    let mut dx = Tensor::zeros(&upstream.shape);
    match mode {
        Mode::Train => {
            for_each_channel_run(&upstream.shape, channels, |ch, off, len| {
                let m = count[ch] as f64;
                let gs = gamma.data[ch] * inv_std[ch];
                let mu = sum_u[ch] / m;
                let mux = sum_ux[ch] / m;
                for i in off..off + len {
                    dx.data[i] = gs * (upstream.data[i] - mu - xhat.data[i] * mux);
                }
            });
        }
        Mode::Eval => {
            for_each_channel_run(&upstream.shape, channels, |ch, off, len| {
                let gs = gamma.data[ch] * inv_std[ch];
                for i in off..off + len {
                    dx.data[i] = gs * upstream.data[i];
                }
            });
        }
    }
    dx
}

// ─── upsample ────────────────────────────────────────────────────────────

fn upsample_forward(x: &Tensor, factor: usize) -> Tensor {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let iy = oy / factor;
            for ox in 0..ow {
                dst[oy * ow + ox] = src[iy * w + ox / factor];
            }
        }
    }
    out
}

fn upsample_backward(upstream: &Tensor, in_shape: &[usize], factor: usize) -> Tensor {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = Tensor::zeros(in_shape);
    for plane in 0..n * c {
        let src = &upstream.data[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx.data[plane * h * w..(plane + 1) * w * h];
        for oy in 0..oh {
            let iy = oy / factor;
            for ox in 0..ow {
                dst[iy * w + ox / factor] += src[oy * ow + ox];
            }
        }
    }
    dx
}
