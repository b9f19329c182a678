//! Gaussian inference networks, reparameterization, closed-form KL, and the
//! warm-started Langevin couplings.
//!
//! Both the prior net (image input) and the posterior net (image/annotation
//! concat) share one architecture: five 4x4 stride-2 conv blocks with
//! batch-norm and LeakyReLU, global average pooling, and two fully-connected
//! heads emitting the mean and the log standard deviation of the latent.

use crate::ebm_prior::{EnergyPrior, LangevinConfig};
use crate::generator::{posterior_langevin, LatentConditionedMap};
use crate::nn::{FwdCache, GradWants, LayerSpec, Mode, Net};
use crate::params::{GradStore, ParamStore};
use crate::rng::LangevinNoise;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Mean and log standard deviation of a diagonal Gaussian over latents,
/// one row per batch entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatentStats {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl GaussianLatentStats {
    pub fn batch(&self) -> usize {
        self.mu.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.mu.shape[1]
    }

    pub fn sigma(&self) -> Tensor {
        self.log_sigma.map(f64::exp)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct InferenceNetConfig {
    pub in_channels: usize,
    /// Base channel width C; the conv stack runs C, 2C, 4C, 8C, 8C.
    pub base_channels: usize,
    pub latent_dim: usize,
}

impl InferenceNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.latent_dim == 0 {
            return Err(Error::Config("inference net: dimensions must be positive".into()));
        }
        Ok(())
    }
}

fn trunk_net(cfg: &InferenceNetConfig) -> Net {
    let c = cfg.base_channels;
    Net::new(vec![
        LayerSpec::conv("conv1", cfg.in_channels, c, 4, 2, 1),
        LayerSpec::batch_norm("bn1", c),
        LayerSpec::leaky_relu(),
        LayerSpec::conv("conv2", c, 2 * c, 4, 2, 1),
        LayerSpec::batch_norm("bn2", 2 * c),
        LayerSpec::leaky_relu(),
        LayerSpec::conv("conv3", 2 * c, 4 * c, 4, 2, 1),
        LayerSpec::batch_norm("bn3", 4 * c),
        LayerSpec::leaky_relu(),
        LayerSpec::conv("conv4", 4 * c, 8 * c, 4, 2, 1),
        LayerSpec::batch_norm("bn4", 8 * c),
        LayerSpec::leaky_relu(),
        LayerSpec::conv("conv5", 8 * c, 8 * c, 4, 2, 1),
        LayerSpec::batch_norm("bn5", 8 * c),
        LayerSpec::leaky_relu(),
    ])
    .expect("static inference trunk")
}

fn head_net(name: &str, in_features: usize, latent_dim: usize) -> Net {
    Net::new(vec![LayerSpec::fc(name, in_features, latent_dim)]).expect("static head")
}

/// Everything the stats backward pass needs from `infer_cached`.
pub struct InferCache {
    trunk: FwdCache,
    mu: FwdCache,
    sig: FwdCache,
    feature_shape: Vec<usize>,
    mode: Mode,
}

pub struct InferenceNet {
    pub cfg: InferenceNetConfig,
    trunk: Net,
    mu_head: Net,
    sig_head: Net,
    pub params: ParamStore,
}

impl InferenceNet {
    pub fn new(cfg: InferenceNetConfig, seed: u64, component: &str) -> Result<Self> {
        cfg.validate()?;
        let trunk = trunk_net(&cfg);
        let feat = 8 * cfg.base_channels;
        let mu_head = head_net("mu", feat, cfg.latent_dim);
        let sig_head = head_net("log_sigma", feat, cfg.latent_dim);
        let mut params = trunk.init_params(seed, component);
        for (name, p) in mu_head.init_params(seed, component).iter() {
            params.insert(name, p.value.clone(), p.trainable);
        }
        for (name, p) in sig_head.init_params(seed, component).iter() {
            params.insert(name, p.value.clone(), p.trainable);
        }
        Ok(Self { cfg, trunk, mu_head, sig_head, params })
    }

    pub fn from_params(cfg: InferenceNetConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let trunk = trunk_net(&cfg);
        let feat = 8 * cfg.base_channels;
        Ok(Self {
            cfg,
            trunk,
            mu_head: head_net("mu", feat, cfg.latent_dim),
            sig_head: head_net("log_sigma", feat, cfg.latent_dim),
            params,
        })
    }

    pub fn infer(&self, input: &Tensor, mode: Mode) -> Result<GaussianLatentStats> {
        Ok(self.infer_cached(input, mode)?.0)
    }

    /// Conv trunk, global average pool, two heads.
    pub fn infer_cached(&self, input: &Tensor, mode: Mode) -> Result<(GaussianLatentStats, InferCache)> {
        if input.shape.len() != 4 || input.shape[1] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                context: "inference net input".into(),
                detail: format!("got {:?}, expected [n, {}, h, w]", input.shape, self.cfg.in_channels),
            });
        }
        let (features, trunk_cache) = self.trunk.forward_cached(&self.params, input, None, mode)?;
        let pooled = global_average_pool(&features);
        let (mu, mu_cache) = self.mu_head.forward_cached(&self.params, &pooled, None, mode)?;
        let (log_sigma, sig_cache) = self.sig_head.forward_cached(&self.params, &pooled, None, mode)?;
        let cache = InferCache {
            trunk: trunk_cache,
            mu: mu_cache,
            sig: sig_cache,
            feature_shape: features.shape.clone(),
            mode,
        };
        Ok((GaussianLatentStats { mu, log_sigma }, cache))
    }

    /// Gradients of all net parameters given upstream gradients on the two
    /// heads' outputs.
    pub fn backward(&self, cache: &InferCache, d_mu: &Tensor, d_log_sigma: &Tensor) -> Result<GradStore> {
        let mu_grads = self.mu_head.backward(&self.params, &cache.mu, d_mu, cache.mode, GradWants::ALL)?;
        let sig_grads =
            self.sig_head.backward(&self.params, &cache.sig, d_log_sigma, cache.mode, GradWants::ALL)?;
        let mut pooled_grad = mu_grads.input;
        pooled_grad.add_scaled(&sig_grads.input, 1.0);
        let feature_grad = global_average_pool_backward(&pooled_grad, &cache.feature_shape);
        let trunk_grads =
            self.trunk.backward(&self.params, &cache.trunk, &feature_grad, cache.mode, GradWants::PARAMS_ONLY)?;
        let mut grads = trunk_grads.params;
        grads.add_scaled(&mu_grads.params, 1.0);
        grads.add_scaled(&sig_grads.params, 1.0);
        Ok(grads)
    }

    pub fn apply_bn_updates(&mut self, cache: &InferCache) -> Result<()> {
        let trunk = self.trunk.clone();
        trunk.apply_bn_updates(&mut self.params, &cache.trunk)
    }
}

fn global_average_pool(features: &Tensor) -> Tensor {
    let (n, c) = (features.shape[0], features.shape[1]);
    let hw: usize = features.shape[2..].iter().product();
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n * c {
        out.data[i] = features.data[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
    }
    out
}

fn global_average_pool_backward(upstream: &Tensor, feature_shape: &[usize]) -> Tensor {
    let hw: usize = feature_shape[2..].iter().product();
    let mut grad = Tensor::zeros(feature_shape);
    for (i, &u) in upstream.data.iter().enumerate() {
        grad.data[i * hw..(i + 1) * hw].fill(u / hw as f64);
    }
    grad
}

/// `z = mu + eps * sigma`, elementwise.
pub fn reparameterize(stats: &GaussianLatentStats, eps: &Tensor) -> Tensor {
    assert_eq!(stats.mu.shape, eps.shape, "reparameterize shape mismatch");
    let mut z = stats.mu.clone();
    for ((zv, &e), &ls) in z.data.iter_mut().zip(eps.data.iter()).zip(stats.log_sigma.data.iter()) {
        *zv += e * ls.exp();
    }
    z
}

/// Chain rule through [`reparameterize`]: given `dL/dz`, returns
/// `(dL/dmu, dL/dlog_sigma)`.
pub fn reparameterize_backward(stats: &GaussianLatentStats, eps: &Tensor, dz: &Tensor) -> (Tensor, Tensor) {
    let d_mu = dz.clone();
    let mut d_log_sigma = Tensor::zeros(&stats.log_sigma.shape);
    for i in 0..dz.data.len() {
        d_log_sigma.data[i] = dz.data[i] * eps.data[i] * stats.log_sigma.data[i].exp();
    }
    (d_mu, d_log_sigma)
}

/// Closed-form KL(q || p) between diagonal Gaussians, summed over latent
/// dimensions and averaged over the batch.
pub fn kl_diag_gaussians(q: &GaussianLatentStats, p: &GaussianLatentStats) -> f64 {
    let n = q.batch();
    let mut acc = 0.0;
    for i in 0..q.mu.data.len() {
        let (mq, lq) = (q.mu.data[i], q.log_sigma.data[i]);
        let (mp, lp) = (p.mu.data[i], p.log_sigma.data[i]);
        let vq = (2.0 * lq).exp();
        let vp = (2.0 * lp).exp();
        acc += lp - lq + (vq + (mq - mp) * (mq - mp)) / (2.0 * vp) - 0.5;
    }
    acc / n as f64
}

/// Gradients of [`kl_diag_gaussians`] in all four stat tensors.
pub struct KlGrads {
    pub d_mu_q: Tensor,
    pub d_log_sigma_q: Tensor,
    pub d_mu_p: Tensor,
    pub d_log_sigma_p: Tensor,
}

pub fn kl_diag_gaussians_grad(q: &GaussianLatentStats, p: &GaussianLatentStats) -> KlGrads {
    let n = q.batch() as f64;
    let mut g = KlGrads {
        d_mu_q: Tensor::zeros(&q.mu.shape),
        d_log_sigma_q: Tensor::zeros(&q.mu.shape),
        d_mu_p: Tensor::zeros(&q.mu.shape),
        d_log_sigma_p: Tensor::zeros(&q.mu.shape),
    };
    for i in 0..q.mu.data.len() {
        let (mq, lq) = (q.mu.data[i], q.log_sigma.data[i]);
        let (mp, lp) = (p.mu.data[i], p.log_sigma.data[i]);
        let vq = (2.0 * lq).exp();
        let vp = (2.0 * lp).exp();
        let dm = (mq - mp) / vp;
        g.d_mu_q.data[i] = dm / n;
        g.d_mu_p.data[i] = -dm / n;
        g.d_log_sigma_q.data[i] = (vq / vp - 1.0) / n;
        g.d_log_sigma_p.data[i] = (1.0 - (vq + (mq - mp) * (mq - mp)) / vp) / n;
    }
    g
}

/// Prior Langevin warm-started from the prior net: the chain starts at the
/// reparameterized sample instead of the Gaussian reference.
pub fn warm_prior_langevin(
    energy: &EnergyPrior,
    prior_net: &InferenceNet,
    x: &Tensor,
    eps: &Tensor,
    cfg: &LangevinConfig,
    noise: &dyn LangevinNoise,
    mode: Mode,
) -> Result<Tensor> {
    let stats = prior_net.infer(x, mode)?;
    let z0 = reparameterize(&stats, eps);
    energy.prior_langevin(cfg, &z0, noise)
}

/// Posterior Langevin warm-started from the posterior net.
#[allow(clippy::too_many_arguments)]
pub fn warm_posterior_langevin<G: LatentConditionedMap + ?Sized>(
    gen: &G,
    energy: &EnergyPrior,
    post_net: &InferenceNet,
    x: &Tensor,
    y: &Tensor,
    eps: &Tensor,
    cfg: &LangevinConfig,
    noise: &dyn LangevinNoise,
    sigma_eps: f64,
    mode: Mode,
) -> Result<Tensor> {
    let joint = x.concat_channels(y)?;
    let stats = post_net.infer(&joint, mode)?;
    let z0 = reparameterize(&stats, eps);
    posterior_langevin(gen, energy, x, y, cfg, &z0, noise, sigma_eps)
}
