//! Stochastic inference: repeated prior sampling through the generator gives
//! a mean saliency map and a per-pixel variance map serving as uncertainty.

use std::path::Path;

use crate::adversarial::{Discriminator, DiscriminatorConfig};
use crate::amortized::{reparameterize, InferenceNet, InferenceNetConfig};
use crate::checkpoint::{Checkpoint, Dtype};
use crate::ebm_prior::{gaussian_latents, EnergyPrior, EnergyPriorConfig, LangevinConfig};
use crate::generator::{BaselineGenerator, GeneratorConfig, SaliencyGenerator};
use crate::nn::Mode;
use crate::rng::{GaussianNoise, Purpose};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Eabp,
    Egan,
    Evae,
    Base,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Eabp => "eabp",
            ModelKind::Egan => "egan",
            ModelKind::Evae => "evae",
            ModelKind::Base => "base",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "eabp" => Ok(ModelKind::Eabp),
            "egan" => Ok(ModelKind::Egan),
            "evae" => Ok(ModelKind::Evae),
            "base" => Ok(ModelKind::Base),
            other => Err(Error::Config(format!("unknown model kind '{other}'"))),
        }
    }
}

/// A trained model of any of the four kinds, ready for inference and
/// checkpointing.
pub enum TrainedModel {
    Eabp { gen: SaliencyGenerator, energy: EnergyPrior },
    Egan { gen: SaliencyGenerator, energy: EnergyPrior, disc: Discriminator },
    Evae { gen: SaliencyGenerator, energy: EnergyPrior, prior_net: InferenceNet, post_net: InferenceNet },
    Base { gen: BaselineGenerator },
}

/// Settings for [`TrainedModel::predict_with_uncertainty`].
#[derive(Clone, Copy, Debug)]
pub struct PredictConfig {
    /// Number of stochastic draws averaged per image.
    pub iter: usize,
    /// Prior Langevin schedule applied to each draw.
    pub langevin: LangevinConfig,
    pub seed: u64,
    /// Identity offset of the first image in the batch; keeps draws unique
    /// across predict calls over a larger set.
    pub image_base: u64,
    pub keep_draws: bool,
}

/// Mean prediction and per-pixel population variance over the draws.
pub struct PredictionBundle {
    pub mean: Tensor,
    pub variance: Tensor,
    pub draws: Option<Vec<Tensor>>,
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Eabp { .. } => ModelKind::Eabp,
            TrainedModel::Egan { .. } => ModelKind::Egan,
            TrainedModel::Evae { .. } => ModelKind::Evae,
            TrainedModel::Base { .. } => ModelKind::Base,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            TrainedModel::Eabp { gen, .. } | TrainedModel::Egan { gen, .. } | TrainedModel::Evae { gen, .. } => {
                gen.cfg.in_channels
            }
            TrainedModel::Base { gen } => gen.cfg.in_channels,
        }
    }

    /// One latent draw for draw index `t`, shaped `[n, d]`.
    fn sample_latents(&self, x: &Tensor, t: u64, cfg: &PredictConfig) -> Result<Option<Tensor>> {
        let n = x.shape[0];
        match self {
            TrainedModel::Base { .. } => Ok(None),
            TrainedModel::Eabp { gen, energy } | TrainedModel::Egan { gen, energy, .. } => {
                let d = gen.cfg.latent_dim;
                let init = gaussian_latents(n, d, energy.cfg.sigma_z, cfg.seed, Purpose::PredictPrior, t, cfg.image_base);
                let noise =
                    GaussianNoise { seed: cfg.seed, purpose: Purpose::PredictNoise, round: t, chain_base: cfg.image_base };
                Ok(Some(energy.prior_langevin(&cfg.langevin, &init, &noise)?))
            }
            TrainedModel::Evae { gen, energy, prior_net, .. } => {
                let d = gen.cfg.latent_dim;
                let stats = prior_net.infer(x, Mode::Eval)?;
                let eps = gaussian_latents(n, d, 1.0, cfg.seed, Purpose::PredictReparam, t, cfg.image_base);
                let z0 = reparameterize(&stats, &eps);
                let noise =
                    GaussianNoise { seed: cfg.seed, purpose: Purpose::PredictNoise, round: t, chain_base: cfg.image_base };
                Ok(Some(energy.prior_langevin(&cfg.langevin, &z0, &noise)?))
            }
        }
    }

    fn predict_once(&self, x: &Tensor, z: Option<&Tensor>) -> Result<Tensor> {
        match self {
            TrainedModel::Eabp { gen, .. } | TrainedModel::Egan { gen, .. } | TrainedModel::Evae { gen, .. } => {
                gen.predict(x, z.expect("latent draw"))
            }
            TrainedModel::Base { gen } => gen.predict(x),
        }
    }

    /// Repeated stochastic prediction: for each draw, sample the latent from
    /// the (possibly warm-started) prior chain and run the generator; the
    /// bundle carries the mean map and the population variance over draws.
    pub fn predict_with_uncertainty(&self, x: &Tensor, cfg: &PredictConfig) -> Result<PredictionBundle> {
        if cfg.iter == 0 {
            return Err(Error::Config("predict: iter must be at least 1".into()));
        }
        let mut sum: Option<Tensor> = None;
        let mut sum_sq: Option<Tensor> = None;
        let mut draws = if cfg.keep_draws { Some(Vec::with_capacity(cfg.iter)) } else { None };
        for t in 0..cfg.iter {
            let z = self.sample_latents(x, t as u64, cfg)?;
            let pred = self.predict_once(x, z.as_ref())?;
            match (&mut sum, &mut sum_sq) {
                (Some(s), Some(sq)) => {
                    s.add_scaled(&pred, 1.0);
                    for (a, &p) in sq.data.iter_mut().zip(pred.data.iter()) {
                        *a += p * p;
                    }
                }
                _ => {
                    sum = Some(pred.clone());
                    sum_sq = Some(pred.map(|v| v * v));
                }
            }
            if let Some(d) = &mut draws {
                d.push(pred);
            }
        }
        let mut mean = sum.expect("iter >= 1");
        mean.scale(1.0 / cfg.iter as f64);
        let mut variance = sum_sq.expect("iter >= 1");
        variance.scale(1.0 / cfg.iter as f64);
        for (v, &m) in variance.data.iter_mut().zip(mean.data.iter()) {
            *v = (*v - m * m).max(0.0);
        }
        Ok(PredictionBundle { mean, variance, draws })
    }

    // ── checkpointing ────────────────────────────────────────────────────

    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.set_meta_str("model_kind", self.kind().as_str());
        match self {
            TrainedModel::Eabp { gen, energy } => {
                write_gen_meta(&mut ck, &gen.cfg);
                write_energy_meta(&mut ck, &energy.cfg);
                ck.insert_store("gen", &gen.params);
                ck.insert_store("ebm", &energy.params);
            }
            TrainedModel::Egan { gen, energy, disc } => {
                write_gen_meta(&mut ck, &gen.cfg);
                write_energy_meta(&mut ck, &energy.cfg);
                ck.set_meta_u64("disc_base_channels", disc.cfg.base_channels as u64);
                ck.insert_store("gen", &gen.params);
                ck.insert_store("ebm", &energy.params);
                ck.insert_store("disc", &disc.params);
            }
            TrainedModel::Evae { gen, energy, prior_net, post_net } => {
                write_gen_meta(&mut ck, &gen.cfg);
                write_energy_meta(&mut ck, &energy.cfg);
                ck.set_meta_u64("inference_base_channels", prior_net.cfg.base_channels as u64);
                ck.insert_store("gen", &gen.params);
                ck.insert_store("ebm", &energy.params);
                ck.insert_store("prior_net", &prior_net.params);
                ck.insert_store("post_net", &post_net.params);
            }
            TrainedModel::Base { gen } => {
                write_gen_meta(&mut ck, &gen.cfg);
                ck.insert_store("base", &gen.params);
            }
        }
        ck.save(path, dtype)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let kind = ModelKind::parse(ck.meta_str("model_kind")?)?;
        let gen_cfg = read_gen_meta(&ck)?;
        match kind {
            ModelKind::Base => {
                Ok(TrainedModel::Base { gen: BaselineGenerator::from_params(gen_cfg, ck.extract_store("base")?)? })
            }
            ModelKind::Eabp => Ok(TrainedModel::Eabp {
                gen: SaliencyGenerator::from_params(gen_cfg, ck.extract_store("gen")?)?,
                energy: EnergyPrior::from_params(read_energy_meta(&ck)?, ck.extract_store("ebm")?)?,
            }),
            ModelKind::Egan => {
                let disc_cfg = DiscriminatorConfig {
                    in_channels: gen_cfg.in_channels,
                    base_channels: ck.meta_u64("disc_base_channels")? as usize,
                };
                Ok(TrainedModel::Egan {
                    gen: SaliencyGenerator::from_params(gen_cfg, ck.extract_store("gen")?)?,
                    energy: EnergyPrior::from_params(read_energy_meta(&ck)?, ck.extract_store("ebm")?)?,
                    disc: Discriminator::from_params(disc_cfg, ck.extract_store("disc")?)?,
                })
            }
            ModelKind::Evae => {
                let base = ck.meta_u64("inference_base_channels")? as usize;
                let prior_cfg = InferenceNetConfig {
                    in_channels: gen_cfg.in_channels,
                    base_channels: base,
                    latent_dim: gen_cfg.latent_dim,
                };
                let post_cfg = InferenceNetConfig { in_channels: gen_cfg.in_channels + 1, ..prior_cfg };
                Ok(TrainedModel::Evae {
                    gen: SaliencyGenerator::from_params(gen_cfg, ck.extract_store("gen")?)?,
                    energy: EnergyPrior::from_params(read_energy_meta(&ck)?, ck.extract_store("ebm")?)?,
                    prior_net: InferenceNet::from_params(prior_cfg, ck.extract_store("prior_net")?)?,
                    post_net: InferenceNet::from_params(post_cfg, ck.extract_store("post_net")?)?,
                })
            }
        }
    }
}

fn write_gen_meta(ck: &mut Checkpoint, cfg: &GeneratorConfig) {
    ck.set_meta_u64("in_channels", cfg.in_channels as u64);
    ck.set_meta_u64("latent_dim", cfg.latent_dim as u64);
    ck.set_meta_u64("enc1", cfg.enc_channels[0] as u64);
    ck.set_meta_u64("enc2", cfg.enc_channels[1] as u64);
    ck.set_meta_u64("enc3", cfg.enc_channels[2] as u64);
    ck.set_meta_f64("sigma_eps", cfg.sigma_eps);
}

fn read_gen_meta(ck: &Checkpoint) -> Result<GeneratorConfig> {
    Ok(GeneratorConfig {
        in_channels: ck.meta_u64("in_channels")? as usize,
        latent_dim: ck.meta_u64("latent_dim")? as usize,
        enc_channels: [
            ck.meta_u64("enc1")? as usize,
            ck.meta_u64("enc2")? as usize,
            ck.meta_u64("enc3")? as usize,
        ],
        sigma_eps: ck.meta_f64("sigma_eps")?,
    })
}

fn write_energy_meta(ck: &mut Checkpoint, cfg: &EnergyPriorConfig) {
    ck.set_meta_u64("ebm_hidden", cfg.hidden as u64);
    ck.set_meta_f64("sigma_z", cfg.sigma_z);
}

fn read_energy_meta(ck: &Checkpoint) -> Result<EnergyPriorConfig> {
    Ok(EnergyPriorConfig {
        latent_dim: ck.meta_u64("latent_dim")? as usize,
        hidden: ck.meta_u64("ebm_hidden")? as usize,
        sigma_z: ck.meta_f64("sigma_z")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::population_variance;
    use crate::testkit;

    fn small_model(seed: u64) -> TrainedModel {
        let gen_cfg = GeneratorConfig { in_channels: 1, latent_dim: 4, enc_channels: [2, 3, 4], sigma_eps: 1.0 };
        let energy_cfg = EnergyPriorConfig { latent_dim: 4, hidden: 6, sigma_z: 1.0 };
        TrainedModel::Eabp {
            gen: SaliencyGenerator::new(gen_cfg, seed).unwrap(),
            energy: EnergyPrior::new(energy_cfg, seed + 1).unwrap(),
        }
    }

    fn predict_cfg(iter: usize) -> PredictConfig {
        PredictConfig {
            iter,
            langevin: LangevinConfig::new(6, 0.4).unwrap(),
            seed: 5,
            image_base: 0,
            keep_draws: true,
        }
    }

    #[test]
    fn single_draw_has_zero_uncertainty() {
        let m = small_model(1);
        let x = testkit::normal_tensor(&[2, 1, 16, 16], 70, 0).map(|v| 0.5 + 0.1 * v);
        let bundle = m.predict_with_uncertainty(&x, &predict_cfg(1)).unwrap();
        assert!(bundle.variance.data.iter().all(|&v| v == 0.0));
        assert!(bundle.mean.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_draws_is_an_error() {
        let m = small_model(1);
        let x = Tensor::full(&[1, 1, 16, 16], 0.5);
        assert!(m.predict_with_uncertainty(&x, &predict_cfg(0)).is_err());
    }

    #[test]
    fn latent_free_generator_has_zero_uncertainty() {
        let mut m = small_model(2);
        if let TrainedModel::Eabp { gen, .. } = &mut m {
            let c3 = gen.cfg.enc_channels[2];
            let d = gen.cfg.latent_dim;
            let w = gen.params.get_mut("inject.w").unwrap();
            let in_ch = c3 + d;
            for oc in 0..c3 {
                for ic in c3..in_ch {
                    for t in 0..9 {
                        w.data[(oc * in_ch + ic) * 9 + t] = 0.0;
                    }
                }
            }
        }
        let x = testkit::normal_tensor(&[1, 1, 16, 16], 70, 1).map(|v| 0.5 + 0.1 * v);
        let bundle = m.predict_with_uncertainty(&x, &predict_cfg(7)).unwrap();
        assert!(bundle.variance.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn variance_matches_two_pass_computation() {
        let m = small_model(3);
        let x = testkit::normal_tensor(&[1, 1, 16, 16], 70, 2).map(|v| 0.5 + 0.1 * v);
        let bundle = m.predict_with_uncertainty(&x, &predict_cfg(10)).unwrap();
        let draws = bundle.draws.as_ref().unwrap();
        for pix in 0..bundle.variance.len() {
            let series: Vec<f64> = draws.iter().map(|d| d.data[pix]).collect();
            let two_pass = population_variance(&series);
            assert!((bundle.variance.data[pix] - two_pass).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_is_deterministic_per_seed() {
        let m = small_model(4);
        let x = testkit::normal_tensor(&[2, 1, 16, 16], 70, 3).map(|v| 0.5 + 0.1 * v);
        let a = m.predict_with_uncertainty(&x, &predict_cfg(5)).unwrap();
        let b = m.predict_with_uncertainty(&x, &predict_cfg(5)).unwrap();
        assert_eq!(a.mean.data, b.mean.data);
        assert_eq!(a.variance.data, b.variance.data);
        let mut other = predict_cfg(5);
        other.seed = 6;
        let c = m.predict_with_uncertainty(&x, &other).unwrap();
        assert_ne!(a.mean.data, c.mean.data);
    }

    #[test]
    fn baseline_model_ignores_draw_count() {
        let gen_cfg = GeneratorConfig { in_channels: 1, latent_dim: 4, enc_channels: [2, 3, 4], sigma_eps: 1.0 };
        let m = TrainedModel::Base { gen: BaselineGenerator::new(gen_cfg, 9).unwrap() };
        let x = testkit::normal_tensor(&[1, 1, 16, 16], 70, 4).map(|v| 0.5 + 0.1 * v);
        let bundle = m.predict_with_uncertainty(&x, &predict_cfg(4)).unwrap();
        assert!(bundle.variance.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = small_model(5);
        m.save(&path, Dtype::F64).unwrap();
        let loaded = TrainedModel::load(&path).unwrap();
        assert_eq!(loaded.kind(), ModelKind::Eabp);
        let x = testkit::normal_tensor(&[1, 1, 16, 16], 70, 5).map(|v| 0.5 + 0.1 * v);
        let a = m.predict_with_uncertainty(&x, &predict_cfg(3)).unwrap();
        let b = loaded.predict_with_uncertainty(&x, &predict_cfg(3)).unwrap();
        assert_eq!(a.mean.data, b.mean.data);

        // And the file itself reloads bitwise.
        let path2 = dir.path().join("model2.ckpt");
        loaded.save(&path2, Dtype::F64).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
