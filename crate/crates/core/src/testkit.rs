//! Verification utilities shared by the unit and acceptance suites: a
//! finite-difference harness over whole nets, and a linear latent map whose
//! posterior is known in closed form.

use crate::generator::LatentConditionedMap;
use crate::nn::{GradWants, Mode, Net};
use crate::oracles::finite_diff_gradient;
use crate::params::ParamStore;
use crate::rng::{Purpose, Stream};
use crate::tensor::Tensor;
use crate::Result;

/// Worst-case deviations between analytic and central-difference gradients,
/// bucketed by the magnitude of the analytic entry: entries above `1e-8` in
/// magnitude are compared relatively, the rest absolutely.
#[derive(Clone, Copy, Debug, Default)]
pub struct FdDeviation {
    pub max_rel: f64,
    pub max_abs: f64,
    pub entries: usize,
}

impl FdDeviation {
    pub fn merge(&mut self, other: FdDeviation) {
        self.max_rel = self.max_rel.max(other.max_rel);
        self.max_abs = self.max_abs.max(other.max_abs);
        self.entries += other.entries;
    }

    pub fn within(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel <= rel_tol && self.max_abs <= abs_tol
    }
}

pub fn compare_grads(analytic: &[f64], fd: &[f64]) -> FdDeviation {
    assert_eq!(analytic.len(), fd.len());
    let mut dev = FdDeviation { entries: analytic.len(), ..Default::default() };
    for (&a, &f) in analytic.iter().zip(fd.iter()) {
        let diff = (a - f).abs();
        if a.abs() > 1e-8 {
            dev.max_rel = dev.max_rel.max(diff / a.abs());
        } else {
            dev.max_abs = dev.max_abs.max(diff);
        }
    }
    dev
}

/// Step sizes tried per coordinate: the oracle default first, then larger and
/// smaller steps for coordinates whose first-try deviation sits inside the
/// central-difference noise floor.
pub const FD_STEPS: [f64; 4] = [1e-5, 1e-4, 3e-6, 1e-3];

/// Compare an analytic gradient against central differences, re-evaluating
/// noisy coordinates at alternative step sizes. An entry counts at its best
/// step; this removes 64-bit round-off flakiness near the magnitude cutoff
/// without loosening the tolerances.
pub fn fd_compare_adaptive(
    f: &mut dyn FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
) -> Result<FdDeviation> {
    assert_eq!(point.len(), analytic.len());
    let fd = finite_diff_gradient(f, point, FD_STEPS[0])?;
    let mut dev = FdDeviation { entries: analytic.len(), ..Default::default() };
    let mut x = point.to_vec();
    for i in 0..analytic.len() {
        let a = analytic[i];
        let mut best = (a - fd[i]).abs();
        if entry_fails(a, best) {
            for &h in &FD_STEPS[1..] {
                let orig = x[i];
                x[i] = orig + h;
                let fp = f(&x);
                x[i] = orig - h;
                let fm = f(&x);
                x[i] = orig;
                if !fp.is_finite() || !fm.is_finite() {
                    continue;
                }
                best = best.min((a - (fp - fm) / (2.0 * h)).abs());
                if !entry_fails(a, best) {
                    break;
                }
            }
        }
        if a.abs() > 1e-8 {
            dev.max_rel = dev.max_rel.max(best / a.abs());
        } else {
            dev.max_abs = dev.max_abs.max(best);
        }
    }
    Ok(dev)
}

fn entry_fails(analytic: f64, diff: f64) -> bool {
    if analytic.abs() > 1e-8 {
        diff / analytic.abs() > 1e-4
    } else {
        diff > 1e-8
    }
}

/// Finite-difference check of every parameter gradient of
/// `<upstream, net(params, input, aux)>`.
pub fn fd_check_params(
    net: &Net,
    params: &ParamStore,
    input: &Tensor,
    aux: Option<&Tensor>,
    mode: Mode,
    upstream: &Tensor,
    _h: f64,
) -> Result<FdDeviation> {
    let (_, grads) = net.value_and_grad(params, input, aux, mode, upstream, GradWants::PARAMS_ONLY)?;
    let analytic = grads.params.to_flat();
    let point = params.to_flat();
    let mut scratch = params.clone();
    fd_compare_adaptive(
        &mut |flat: &[f64]| {
            scratch.load_flat(flat).expect("flat length");
            let out = net.forward(&scratch, input, aux, mode).expect("forward");
            out.dot(upstream)
        },
        &point,
        &analytic,
    )
}

/// Finite-difference check of the input (and, when present, latent) gradient.
pub fn fd_check_inputs(
    net: &Net,
    params: &ParamStore,
    input: &Tensor,
    aux: Option<&Tensor>,
    mode: Mode,
    upstream: &Tensor,
    _h: f64,
) -> Result<FdDeviation> {
    let (_, grads) = net.value_and_grad(params, input, aux, mode, upstream, GradWants::ALL)?;
    let mut dev = FdDeviation::default();

    dev.merge(fd_compare_adaptive(
        &mut |flat: &[f64]| {
            let x = Tensor::new(input.shape.clone(), flat.to_vec());
            net.forward(params, &x, aux, mode).expect("forward").dot(upstream)
        },
        &input.data,
        &grads.input.data,
    )?);

    if let (Some(a), Some(ag)) = (aux, grads.aux.as_ref()) {
        dev.merge(fd_compare_adaptive(
            &mut |flat: &[f64]| {
                let z = Tensor::new(a.shape.clone(), flat.to_vec());
                net.forward(params, input, Some(&z), mode).expect("forward").dot(upstream)
            },
            &a.data,
            &ag.data,
        )?);
    }
    Ok(dev)
}

pub fn random_tensor(shape: &[usize], scale: f64, stream: &mut Stream) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in &mut t.data {
        *v = scale * stream.normal();
    }
    t
}

/// A latent map `T(x, z) = W z + b` that ignores its image input. Its exact
/// posterior is the linear-Gaussian closed form in `oracles`, which makes it
/// the reference workload for the posterior sampler.
#[derive(Clone, Debug)]
pub struct LinearLatentMap {
    /// Row-major [out_dim, latent_dim].
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub out_dim: usize,
    pub latent_dim: usize,
}

impl LinearLatentMap {
    pub fn new(w: Vec<f64>, b: Vec<f64>, out_dim: usize, latent_dim: usize) -> Self {
        assert_eq!(w.len(), out_dim * latent_dim);
        assert_eq!(b.len(), out_dim);
        Self { w, b, out_dim, latent_dim }
    }

    pub fn random(out_dim: usize, latent_dim: usize, stream: &mut Stream) -> Self {
        let w = (0..out_dim * latent_dim).map(|_| stream.normal()).collect();
        let b = (0..out_dim).map(|_| 0.3 * stream.normal()).collect();
        Self { w, b, out_dim, latent_dim }
    }

    /// Rows of W as slices, for the oracle call.
    pub fn w_rows(&self) -> Vec<Vec<f64>> {
        self.w.chunks(self.latent_dim).map(|r| r.to_vec()).collect()
    }
}

impl LatentConditionedMap for LinearLatentMap {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn apply(&self, _x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let n = z.shape[0];
        let mut out = Tensor::zeros(&[n, self.out_dim]);
        for s in 0..n {
            let zs = z.row(s);
            let os = out.row_mut(s);
            for (o, (row, bias)) in os.iter_mut().zip(self.w.chunks(self.latent_dim).zip(self.b.iter())) {
                *o = bias + row.iter().zip(zs.iter()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok(out)
    }

    fn apply_with_latent_grad(
        &self,
        x: &Tensor,
        z: &Tensor,
        upstream: &dyn Fn(&Tensor) -> Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let out = self.apply(x, z)?;
        let u = upstream(&out);
        let n = z.shape[0];
        let mut dz = Tensor::zeros(&[n, self.latent_dim]);
        for s in 0..n {
            let us = u.row(s);
            let ds = dz.row_mut(s);
            for (row, &uv) in self.w.chunks(self.latent_dim).zip(us.iter()) {
                for (d, &wv) in ds.iter_mut().zip(row.iter()) {
                    *d += uv * wv;
                }
            }
        }
        Ok((out, dz))
    }
}

/// Per-dimension mean and variance over the rows of a `[n, d]` tensor,
/// with the population divisor `n`.
pub fn column_moments(samples: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (samples.shape[0], samples.shape[1]);
    let mut mean = vec![0.0; d];
    for s in 0..n {
        for (m, &v) in mean.iter_mut().zip(samples.row(s).iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for s in 0..n {
        for j in 0..d {
            let dv = samples.data[s * d + j] - mean[j];
            var[j] += dv * dv;
        }
    }
    for v in &mut var {
        *v /= n as f64;
    }
    (mean, var)
}

/// Deterministic standard-normal tensor for tests.
pub fn normal_tensor(shape: &[usize], seed: u64, tag: u64) -> Tensor {
    let mut s = Stream::new(seed, Purpose::Test, tag, 0, 0);
    random_tensor(shape, 1.0, &mut s)
}
