//! The trainable energy-based latent prior.
//!
//! The prior density is an exponential tilting of a Gaussian reference:
//! `p(z) ∝ exp(-U(z) - ||z||^2 / (2 sigma_z^2))`, with `U` a small MLP. The
//! normalizer is intractable and never computed; sampling runs short Langevin
//! chains and learning uses the contrastive gradient between prior and
//! posterior samples.

use crate::nn::{GradWants, LayerSpec, Mode, Net};
use crate::params::{GradStore, ParamStore};
use crate::rng::{LangevinNoise, Purpose, Stream};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Langevin chain settings. The noise stream is supplied separately so tests
/// can inject a zero stream.
#[derive(Clone, Copy, Debug)]
pub struct LangevinConfig {
    pub steps: usize,
    pub step_size: f64,
}

impl LangevinConfig {
    pub fn new(steps: usize, step_size: f64) -> Result<Self> {
        if step_size <= 0.0 || !step_size.is_finite() {
            return Err(Error::Config(format!("langevin step size must be positive, got {step_size}")));
        }
        Ok(Self { steps, step_size })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EnergyPriorConfig {
    pub latent_dim: usize,
    /// Width of the two hidden layers of the tilt MLP.
    pub hidden: usize,
    pub sigma_z: f64,
}

impl Default for EnergyPriorConfig {
    fn default() -> Self {
        Self { latent_dim: 32, hidden: 60, sigma_z: 1.0 }
    }
}

impl EnergyPriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("energy prior: dimensions must be positive".into()));
        }
        if self.sigma_z <= 0.0 {
            return Err(Error::Config("energy prior: sigma_z must be positive".into()));
        }
        Ok(())
    }
}

/// Energy over latents: the tilt MLP plus the Gaussian reference term.
pub struct EnergyPrior {
    pub cfg: EnergyPriorConfig,
    net: Net,
    pub params: ParamStore,
}

fn tilt_net(cfg: &EnergyPriorConfig) -> Net {
    Net::new(vec![
        LayerSpec::fc("fc1", cfg.latent_dim, cfg.hidden),
        LayerSpec::Gelu,
        LayerSpec::fc("fc2", cfg.hidden, cfg.hidden),
        LayerSpec::Gelu,
        LayerSpec::fc("fc3", cfg.hidden, 1),
    ])
    .expect("static energy net")
}

impl EnergyPrior {
    pub fn new(cfg: EnergyPriorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let net = tilt_net(&cfg);
        let params = net.init_params(seed, "ebm");
        Ok(Self { cfg, net, params })
    }

    pub fn from_params(cfg: EnergyPriorConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, net: tilt_net(&cfg), params })
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        if z.shape.len() != 2 || z.shape[1] != self.cfg.latent_dim {
            return Err(Error::ShapeMismatch {
                context: "energy prior latent".into(),
                detail: format!("got {:?}, expected [n, {}]", z.shape, self.cfg.latent_dim),
            });
        }
        Ok(())
    }

    /// Tilt values `U(z)` for a batch, shape `[n, 1]`.
    pub fn tilt(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z)?;
        self.net.forward(&self.params, z, None, Mode::Eval)
    }

    /// Total energy `U(z) + ||z||^2 / (2 sigma_z^2)` per batch row.
    pub fn energy_batch(&self, z: &Tensor) -> Result<Vec<f64>> {
        z.check_finite("energy input")?;
        let u = self.tilt(z)?;
        let half_inv = 0.5 / (self.cfg.sigma_z * self.cfg.sigma_z);
        Ok((0..z.shape[0])
            .map(|i| u.data[i] + half_inv * z.row(i).iter().map(|v| v * v).sum::<f64>())
            .collect())
    }

    /// Energy of a single latent vector.
    pub fn energy(&self, z: &[f64]) -> Result<f64> {
        let t = Tensor::new(vec![1, z.len()], z.to_vec());
        Ok(self.energy_batch(&t)?[0])
    }

    /// `∇_z` of the total energy, one row per batch entry.
    pub fn energy_latent_grad(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z)?;
        let ones = Tensor::full(&[z.shape[0], 1], 1.0);
        let (_, grads) = self.net.value_and_grad(&self.params, z, None, Mode::Eval, &ones, GradWants::INPUT_ONLY)?;
        let mut g = grads.input;
        let inv = 1.0 / (self.cfg.sigma_z * self.cfg.sigma_z);
        g.add_scaled(z, inv);
        Ok(g)
    }

    /// Mean over the batch of `∇_α U(z_i)`.
    pub fn tilt_param_grad(&self, z: &Tensor) -> Result<GradStore> {
        self.check_latent(z)?;
        let n = z.shape[0];
        let upstream = Tensor::full(&[n, 1], 1.0 / n as f64);
        let (_, grads) =
            self.net.value_and_grad(&self.params, z, None, Mode::Eval, &upstream, GradWants::PARAMS_ONLY)?;
        Ok(grads.params)
    }

    /// Short-run Langevin over the prior energy:
    /// `z <- z - delta * grad E(z) + sqrt(2 delta) * e`.
    pub fn prior_langevin(&self, cfg: &LangevinConfig, init: &Tensor, noise: &dyn LangevinNoise) -> Result<Tensor> {
        self.check_latent(init)?;
        init.check_finite("prior langevin init")?;
        let (n, d) = (init.shape[0], init.shape[1]);
        let mut z = init.clone();
        let scale = (2.0 * cfg.step_size).sqrt();
        let mut e = vec![0.0; d];
        for t in 0..cfg.steps {
            let grad = self.energy_latent_grad(&z)?;
            for chain in 0..n {
                noise.fill(chain, t, &mut e);
                let zs = &mut z.data[chain * d..(chain + 1) * d];
                let gs = &grad.data[chain * d..(chain + 1) * d];
                for j in 0..d {
                    zs[j] += -cfg.step_size * gs[j] + scale * e[j];
                }
            }
            if !z.all_finite() {
                return Err(Error::NonFinite { context: "prior langevin iterate".into(), step: Some(t) });
            }
        }
        Ok(z)
    }

    /// Contrastive parameter gradient
    /// `mean ∇_α U(z_prior) - mean ∇_α U(z_posterior)`, the ascent direction
    /// of the data log-likelihood in `α`. The caller owns the sign handed to
    /// the optimizer.
    pub fn param_grad(&self, posterior_samples: &Tensor, prior_samples: &Tensor) -> Result<GradStore> {
        if posterior_samples.shape[0] == 0 || prior_samples.shape[0] == 0 {
            return Err(Error::Config("ebm param grad: empty sample set".into()));
        }
        let mut g = self.tilt_param_grad(prior_samples)?;
        let g_post = self.tilt_param_grad(posterior_samples)?;
        g.add_scaled(&g_post, -1.0);
        Ok(g)
    }
}

/// Draw a cold-start latent batch `z ~ N(0, sigma^2 I)` from the keyed stream.
pub fn gaussian_latents(
    n: usize,
    d: usize,
    sigma: f64,
    seed: u64,
    purpose: Purpose,
    round: u64,
    chain_base: u64,
) -> Tensor {
    let mut z = Tensor::zeros(&[n, d]);
    for chain in 0..n {
        let mut s = Stream::new(seed, purpose, round, chain_base + chain as u64, 0);
        for v in z.row_mut(chain) {
            *v = sigma * s.normal();
        }
    }
    z
}

/// As [`gaussian_latents`], but with one explicit stream id per chain.
pub fn gaussian_latents_for_ids(ids: &[u64], d: usize, sigma: f64, seed: u64, purpose: Purpose, round: u64) -> Tensor {
    let mut z = Tensor::zeros(&[ids.len(), d]);
    for (chain, &id) in ids.iter().enumerate() {
        let mut s = Stream::new(seed, purpose, round, id, 0);
        for v in z.row_mut(chain) {
            *v = sigma * s.normal();
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{GaussianNoise, ZeroNoise};
    use crate::testkit;

    fn zero_tilt_prior(d: usize) -> EnergyPrior {
        let cfg = EnergyPriorConfig { latent_dim: d, hidden: 8, sigma_z: 1.0 };
        let mut p = EnergyPrior::new(cfg, 0).unwrap();
        let names: Vec<String> = p.params.trainable_names();
        for n in names {
            p.params.get_mut(&n).unwrap().data.fill(0.0);
        }
        p
    }

    #[test]
    fn zero_tilt_zero_latent_has_zero_energy() {
        let p = zero_tilt_prior(4);
        assert_eq!(p.energy(&[0.0; 4]).unwrap(), 0.0);
    }

    #[test]
    fn zero_tilt_energy_is_the_quadratic_term() {
        let p = zero_tilt_prior(2);
        // ||z||^2 = 2 -> energy 1 with sigma_z = 1.
        let e = p.energy(&[1.0, 1.0]).unwrap();
        assert!((e - 1.0).abs() < 1e-12);
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        let cfg = EnergyPriorConfig { latent_dim: 5, hidden: 7, sigma_z: 0.8 };
        let p = EnergyPrior::new(cfg, 3).unwrap();
        let z = testkit::normal_tensor(&[1, 5], 10, 0);
        let analytic = p.energy_latent_grad(&z).unwrap();
        let fd = crate::oracles::finite_diff_gradient_default(
            &mut |flat| p.energy(flat).unwrap(),
            z.row(0),
        )
        .unwrap();
        let dev = testkit::compare_grads(&analytic.data, &fd);
        assert!(dev.within(1e-4, 1e-8), "dev {dev:?}");
    }

    #[test]
    fn energy_has_no_hidden_state() {
        let p = EnergyPrior::new(EnergyPriorConfig::default(), 1).unwrap();
        let z = testkit::normal_tensor(&[3, 32], 4, 1);
        let a = p.energy_batch(&z).unwrap();
        let b = p.energy_batch(&z).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = EnergyPrior::new(EnergyPriorConfig::default(), 1).unwrap();
        let z = Tensor::zeros(&[1, 5]);
        assert!(p.energy_batch(&z).is_err());
    }

    #[test]
    fn zero_steps_returns_init_exactly() {
        let p = EnergyPrior::new(EnergyPriorConfig::default(), 2).unwrap();
        let init = testkit::normal_tensor(&[4, 32], 5, 2);
        let cfg = LangevinConfig::new(0, 0.4).unwrap();
        let noise = GaussianNoise { seed: 9, purpose: Purpose::PriorNoise, round: 0, chain_base: 0 };
        let out = p.prior_langevin(&cfg, &init, &noise).unwrap();
        assert_eq!(out, init);
    }

    #[test]
    fn langevin_is_deterministic_per_stream() {
        let p = EnergyPrior::new(EnergyPriorConfig::default(), 2).unwrap();
        let init = testkit::normal_tensor(&[4, 32], 5, 3);
        let cfg = LangevinConfig::new(6, 0.4).unwrap();
        let noise = GaussianNoise { seed: 9, purpose: Purpose::PriorNoise, round: 3, chain_base: 0 };
        let a = p.prior_langevin(&cfg, &init, &noise).unwrap();
        let b = p.prior_langevin(&cfg, &init, &noise).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn zero_noise_step_is_gradient_descent() {
        let p = EnergyPrior::new(EnergyPriorConfig { latent_dim: 6, hidden: 9, sigma_z: 1.3 }, 7).unwrap();
        let init = testkit::normal_tensor(&[2, 6], 6, 4);
        let cfg = LangevinConfig::new(1, 0.25).unwrap();
        let out = p.prior_langevin(&cfg, &init, &ZeroNoise).unwrap();
        let grad = p.energy_latent_grad(&init).unwrap();
        let mut want = init.clone();
        want.add_scaled(&grad, -0.25);
        for (a, b) in out.data.iter().zip(want.data.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_tilt_chain_reaches_discrete_stationary_variance() {
        // Scaled-down version of the sampler-fidelity acceptance run.
        let p = zero_tilt_prior(8);
        let chains = 2000;
        let cfg = LangevinConfig::new(400, 0.1).unwrap();
        let init = gaussian_latents(chains, 8, 1.0, 11, Purpose::PriorInit, 0, 0);
        let noise = GaussianNoise { seed: 11, purpose: Purpose::PriorNoise, round: 0, chain_base: 0 };
        let out = p.prior_langevin(&cfg, &init, &noise).unwrap();
        let (mean, var) = testkit::column_moments(&out);
        let pooled_var = var.iter().sum::<f64>() / var.len() as f64;
        let pooled_mean = mean.iter().sum::<f64>() / mean.len() as f64;
        let target = crate::oracles::discrete_langevin_variance(1.0, 0.1).unwrap();
        assert!((pooled_var - target).abs() / target < 0.05, "var {pooled_var} vs {target}");
        assert!(pooled_mean.abs() < 0.05, "mean {pooled_mean}");
    }

    #[test]
    fn param_grad_of_identical_sets_is_zero() {
        let p = EnergyPrior::new(EnergyPriorConfig { latent_dim: 4, hidden: 6, sigma_z: 1.0 }, 4).unwrap();
        let z = testkit::normal_tensor(&[5, 4], 8, 5);
        let g = p.param_grad(&z, &z).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_grad_is_antisymmetric_under_swap() {
        let p = EnergyPrior::new(EnergyPriorConfig { latent_dim: 4, hidden: 6, sigma_z: 1.0 }, 4).unwrap();
        let a = testkit::normal_tensor(&[5, 4], 8, 6);
        let b = testkit::normal_tensor(&[5, 4], 8, 7);
        let g1 = p.param_grad(&a, &b).unwrap();
        let g2 = p.param_grad(&b, &a).unwrap();
        for (x, y) in g1.to_flat().iter().zip(g2.to_flat().iter()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn param_grad_is_permutation_invariant() {
        let p = EnergyPrior::new(EnergyPriorConfig { latent_dim: 3, hidden: 5, sigma_z: 1.0 }, 5).unwrap();
        let post = testkit::normal_tensor(&[4, 3], 9, 8);
        let prior = testkit::normal_tensor(&[4, 3], 9, 9);
        let mut post_perm = Tensor::zeros(&[4, 3]);
        for (dst, src) in [0usize, 2, 3, 1].iter().enumerate() {
            post_perm.row_mut(dst).copy_from_slice(post.row(*src));
        }
        let g1 = p.param_grad(&post, &prior).unwrap();
        let g2 = p.param_grad(&post_perm, &prior).unwrap();
        for (x, y) in g1.to_flat().iter().zip(g2.to_flat().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_layer_tilt_gradient_matches_hand_calculus() {
        // U(z) = w . z + b: the contrastive gradient for single samples is
        // d/dw = z_prior - z_posterior and d/db = 0.
        let cfg = EnergyPriorConfig { latent_dim: 3, hidden: 1, sigma_z: 1.0 };
        let net = Net::new(vec![LayerSpec::fc("fc", 3, 1)]).unwrap();
        let mut params = ParamStore::new();
        params.insert("fc.w", Tensor::new(vec![1, 3], vec![0.4, -0.7, 1.2]), true);
        params.insert("fc.b", Tensor::new(vec![1], vec![0.3]), true);
        let p = EnergyPrior { cfg, net, params };
        let z_post = Tensor::new(vec![1, 3], vec![0.5, 0.1, -0.2]);
        let z_prior = Tensor::new(vec![1, 3], vec![-1.0, 0.6, 0.9]);
        let g = p.param_grad(&z_post, &z_prior).unwrap();
        let dw = g.get("fc.w").unwrap();
        for j in 0..3 {
            let want = z_prior.data[j] - z_post.data[j];
            assert!((dw.data[j] - want).abs() < 1e-12);
        }
        assert!(g.get("fc.b").unwrap().data[0].abs() < 1e-15);
    }

    #[test]
    fn empty_sample_set_is_an_error() {
        let p = EnergyPrior::new(EnergyPriorConfig { latent_dim: 2, hidden: 4, sigma_z: 1.0 }, 6).unwrap();
        let z = testkit::normal_tensor(&[2, 2], 12, 10);
        let empty = Tensor::zeros(&[0, 2]);
        assert!(p.param_grad(&empty, &z).is_err());
        assert!(p.param_grad(&z, &empty).is_err());
    }
}
