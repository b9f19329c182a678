//! The conditional saliency generator and its posterior Langevin sampler.
//!
//! The generator encodes the image with three stride-2 conv blocks, injects
//! the latent vector at the coarsest level (spatial replication + channel
//! concat + one conv), and decodes back to a one-channel map through three
//! upsample-conv blocks with a closing sigmoid. A deterministic baseline with
//! the injection channels removed serves as the point-estimate comparison.

use crate::ebm_prior::{EnergyPrior, LangevinConfig};
use crate::nn::{GradWants, LayerSpec, Mode, Net};
use crate::params::{GradStore, ParamStore};
use crate::rng::LangevinNoise;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub latent_dim: usize,
    /// Encoder channel widths; decoder mirrors them.
    pub enc_channels: [usize; 3],
    /// Observation noise std of the Gaussian likelihood.
    pub sigma_eps: f64,
}

impl GeneratorConfig {
    pub fn new(in_channels: usize, latent_dim: usize) -> Self {
        Self { in_channels, latent_dim, enc_channels: [16, 32, 64], sigma_eps: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 1 | 3 | 4) {
            return Err(Error::Config(format!(
                "generator: in_channels must be 1, 3 or 4, got {}",
                self.in_channels
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("generator: latent_dim must be positive".into()));
        }
        if self.sigma_eps <= 0.0 {
            return Err(Error::Config("generator: sigma_eps must be positive".into()));
        }
        Ok(())
    }
}

fn generator_net(cfg: &GeneratorConfig, with_latent: bool) -> Net {
    let [c1, c2, c3] = cfg.enc_channels;
    let mut layers = vec![
        LayerSpec::conv("enc1", cfg.in_channels, c1, 3, 2, 1),
        LayerSpec::leaky_relu(),
        LayerSpec::conv("enc2", c1, c2, 3, 2, 1),
        LayerSpec::leaky_relu(),
        LayerSpec::conv("enc3", c2, c3, 3, 2, 1),
        LayerSpec::leaky_relu(),
    ];
    let inject_in = if with_latent {
        layers.push(LayerSpec::SpatialReplicate);
        layers.push(LayerSpec::Concat);
        c3 + cfg.latent_dim
    } else {
        c3
    };
    layers.push(LayerSpec::conv("inject", inject_in, c3, 3, 1, 1));
    layers.extend(vec![
        LayerSpec::NearestUpsample { factor: 2 },
        LayerSpec::conv("dec1", c3, c2, 3, 1, 1),
        LayerSpec::leaky_relu(),
        LayerSpec::NearestUpsample { factor: 2 },
        LayerSpec::conv("dec2", c2, c1, 3, 1, 1),
        LayerSpec::leaky_relu(),
        LayerSpec::NearestUpsample { factor: 2 },
        LayerSpec::conv("dec3", c1, 1, 3, 1, 1),
        LayerSpec::leaky_relu(),
        LayerSpec::Sigmoid,
    ]);
    Net::new(layers).expect("static generator net")
}

/// Anything that maps `(image, latent)` to an output and can push gradients
/// back to the latent. The posterior sampler is generic over this so the
/// closed-form linear workload in `testkit` can stand in for the real net.
pub trait LatentConditionedMap {
    fn latent_dim(&self) -> usize;

    fn apply(&self, x: &Tensor, z: &Tensor) -> Result<Tensor>;

    /// Returns `(T(x, z), ∇_z <u, T(x, z)>)` where `u = upstream(T(x, z))` is
    /// treated as a constant coefficient.
    fn apply_with_latent_grad(
        &self,
        x: &Tensor,
        z: &Tensor,
        upstream: &dyn Fn(&Tensor) -> Tensor,
    ) -> Result<(Tensor, Tensor)>;
}

/// The image-conditioned stochastic generator.
pub struct SaliencyGenerator {
    pub cfg: GeneratorConfig,
    net: Net,
    pub params: ParamStore,
}

impl SaliencyGenerator {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let net = generator_net(&cfg, true);
        let params = net.init_params(seed, "gen");
        Ok(Self { cfg, net, params })
    }

    pub fn from_params(cfg: GeneratorConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, net: generator_net(&cfg, true), params })
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    fn check_inputs(&self, x: &Tensor, z: &Tensor) -> Result<()> {
        if x.shape.len() != 4 || x.shape[1] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                context: "generator image".into(),
                detail: format!("got {:?}, expected [n, {}, h, w]", x.shape, self.cfg.in_channels),
            });
        }
        if z.shape.len() != 2 || z.shape[1] != self.cfg.latent_dim || z.shape[0] != x.shape[0] {
            return Err(Error::ShapeMismatch {
                context: "generator latent".into(),
                detail: format!("got {:?}, expected [{}, {}]", z.shape, x.shape[0], self.cfg.latent_dim),
            });
        }
        Ok(())
    }

    /// The saliency map `T(x, z)`, every value in (0, 1).
    pub fn predict(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.check_inputs(x, z)?;
        self.net.forward(&self.params, x, Some(z), Mode::Eval)
    }

    /// Ascent gradient of the Gaussian log-likelihood in the generator
    /// parameters, `mean_i (y_i - T(x_i, z_i)) ∇_θ T(x_i, z_i) / sigma_eps^2`,
    /// together with the predictions it was evaluated at.
    pub fn param_grad(&self, x: &Tensor, y: &Tensor, z: &Tensor) -> Result<(GradStore, Tensor)> {
        self.check_inputs(x, z)?;
        let n = x.shape[0];
        if y.shape[0] != n {
            return Err(Error::ShapeMismatch {
                context: "generator target".into(),
                detail: format!("batch {} vs {}", y.shape[0], n),
            });
        }
        let (pred, cache) = self.net.forward_cached(&self.params, x, Some(z), Mode::Eval)?;
        if y.shape != pred.shape {
            return Err(Error::ShapeMismatch {
                context: "generator target".into(),
                detail: format!("{:?} vs prediction {:?}", y.shape, pred.shape),
            });
        }
        let inv = 1.0 / (self.cfg.sigma_eps * self.cfg.sigma_eps * n as f64);
        let mut upstream = y.clone();
        upstream.add_scaled(&pred, -1.0);
        upstream.scale(inv);
        let grads = self.net.backward(&self.params, &cache, &upstream, Mode::Eval, GradWants::PARAMS_ONLY)?;
        Ok((grads.params, pred))
    }
}

impl LatentConditionedMap for SaliencyGenerator {
    fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    fn apply(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.predict(x, z)
    }

    fn apply_with_latent_grad(
        &self,
        x: &Tensor,
        z: &Tensor,
        upstream: &dyn Fn(&Tensor) -> Tensor,
    ) -> Result<(Tensor, Tensor)> {
        self.check_inputs(x, z)?;
        let (pred, cache) = self.net.forward_cached(&self.params, x, Some(z), Mode::Eval)?;
        let u = upstream(&pred);
        let grads = self.net.backward(&self.params, &cache, &u, Mode::Eval, GradWants::AUX_ONLY)?;
        let aux = grads.aux.ok_or_else(|| Error::Config("generator net produced no latent gradient".into()))?;
        Ok((pred, aux))
    }
}

/// Short-run Langevin over the latent posterior: each step follows
/// `-delta * ∇_z [E(z) + ||y - T(x, z)||^2 / (2 sigma_eps^2)]` plus noise.
/// No gradients w.r.t. generator or prior parameters are produced.
pub fn posterior_langevin<G: LatentConditionedMap + ?Sized>(
    gen: &G,
    prior: &EnergyPrior,
    x: &Tensor,
    y: &Tensor,
    cfg: &LangevinConfig,
    init: &Tensor,
    noise: &dyn LangevinNoise,
    sigma_eps: f64,
) -> Result<Tensor> {
    if init.shape.len() != 2 || init.shape[1] != gen.latent_dim() {
        return Err(Error::ShapeMismatch {
            context: "posterior langevin init".into(),
            detail: format!("got {:?}, expected [n, {}]", init.shape, gen.latent_dim()),
        });
    }
    init.check_finite("posterior langevin init")?;
    let (n, d) = (init.shape[0], init.shape[1]);
    let inv = 1.0 / (sigma_eps * sigma_eps);
    let mut z = init.clone();
    let scale = (2.0 * cfg.step_size).sqrt();
    let mut e = vec![0.0; d];
    for t in 0..cfg.steps {
        let energy_grad = prior.energy_latent_grad(&z)?;
        let (_, recon_grad) = gen.apply_with_latent_grad(x, &z, &|pred| {
            let mut u = y.clone();
            u.add_scaled(pred, -1.0);
            u.scale(inv);
            u
        })?;
        for chain in 0..n {
            noise.fill(chain, t, &mut e);
            let zs = &mut z.data[chain * d..(chain + 1) * d];
            let eg = &energy_grad.data[chain * d..(chain + 1) * d];
            let rg = &recon_grad.data[chain * d..(chain + 1) * d];
            for j in 0..d {
                zs[j] += -cfg.step_size * (eg[j] - rg[j]) + scale * e[j];
            }
        }
        if !z.all_finite() {
            return Err(Error::NonFinite { context: "posterior langevin iterate".into(), step: Some(t) });
        }
    }
    Ok(z)
}

/// The deterministic baseline: the same architecture with the injection
/// block's latent channels removed.
pub struct BaselineGenerator {
    pub cfg: GeneratorConfig,
    net: Net,
    pub params: ParamStore,
}

impl BaselineGenerator {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let net = generator_net(&cfg, false);
        let params = net.init_params(seed, "base");
        Ok(Self { cfg, net, params })
    }

    pub fn from_params(cfg: GeneratorConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, net: generator_net(&cfg, false), params })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.net.forward(&self.params, x, None, Mode::Eval)
    }

    /// Ascent gradient of the Gaussian log-likelihood, as in the stochastic
    /// generator but without a latent.
    pub fn param_grad(&self, x: &Tensor, y: &Tensor) -> Result<(GradStore, Tensor)> {
        let n = x.shape[0];
        let (pred, cache) = self.net.forward_cached(&self.params, x, None, Mode::Eval)?;
        if y.shape != pred.shape {
            return Err(Error::ShapeMismatch {
                context: "baseline target".into(),
                detail: format!("{:?} vs prediction {:?}", y.shape, pred.shape),
            });
        }
        let inv = 1.0 / (self.cfg.sigma_eps * self.cfg.sigma_eps * n as f64);
        let mut upstream = y.clone();
        upstream.add_scaled(&pred, -1.0);
        upstream.scale(inv);
        let grads = self.net.backward(&self.params, &cache, &upstream, Mode::Eval, GradWants::PARAMS_ONLY)?;
        Ok((grads.params, pred))
    }
}
