//! Fully convolutional discriminator and the adversarial loss assembly.
//!
//! The discriminator maps `[map, image]` channel concatenations to a grid of
//! patch logits at 1/8 resolution. Cross-entropies are computed from logits
//! in the log-sum-exp form. Generator and discriminator losses are assembled
//! so that each only ever produces gradients for its own parameter set.

use crate::generator::SaliencyGenerator;
use crate::nn::{sigmoid, FwdCache, GradWants, LayerSpec, Mode, Net};
use crate::params::{GradStore, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorConfig {
    /// Channels of the conditioning image; the net itself consumes
    /// `in_channels + 1` (image plus a one-channel map).
    pub in_channels: usize,
    pub base_channels: usize,
}

impl DiscriminatorConfig {
    pub fn new(in_channels: usize) -> Self {
        Self { in_channels, base_channels: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("discriminator: channel counts must be positive".into()));
        }
        Ok(())
    }
}

fn discriminator_net(cfg: &DiscriminatorConfig) -> Net {
    let c = cfg.base_channels;
    Net::new(vec![
        LayerSpec::conv("conv1", cfg.in_channels + 1, c, 3, 2, 1),
        LayerSpec::batch_norm("bn1", c),
        LayerSpec::leaky_relu(),
        LayerSpec::conv("conv2", c, c, 3, 1, 1),
        LayerSpec::batch_norm("bn2", c),
        LayerSpec::leaky_relu(),
        LayerSpec::conv("conv3", c, c, 3, 2, 1),
        LayerSpec::batch_norm("bn3", c),
        LayerSpec::leaky_relu(),
        LayerSpec::conv("conv4", c, c, 3, 1, 1),
        LayerSpec::batch_norm("bn4", c),
        LayerSpec::leaky_relu(),
        LayerSpec::conv("conv5", c, 1, 3, 2, 1),
    ])
    .expect("static discriminator net")
}

pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    net: Net,
    pub params: ParamStore,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let net = discriminator_net(&cfg);
        let params = net.init_params(seed, "disc");
        Ok(Self { cfg, net, params })
    }

    pub fn from_params(cfg: DiscriminatorConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, net: discriminator_net(&cfg), params })
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    fn assemble_input(&self, x: &Tensor, map: &Tensor) -> Result<Tensor> {
        if map.shape.len() != 4 || map.shape[1] != 1 || map.shape[2..] != x.shape[2..] || map.shape[0] != x.shape[0] {
            return Err(Error::ShapeMismatch {
                context: "discriminator map".into(),
                detail: format!("map {:?} vs image {:?}", map.shape, x.shape),
            });
        }
        map.concat_channels(x)
    }

    /// Raw patch logits for `[map, image]`.
    pub fn logits(&self, x: &Tensor, map: &Tensor, mode: Mode) -> Result<Tensor> {
        let input = self.assemble_input(x, map)?;
        self.net.forward(&self.params, &input, None, mode)
    }

    fn logits_cached(&self, x: &Tensor, map: &Tensor, mode: Mode) -> Result<(Tensor, FwdCache)> {
        let input = self.assemble_input(x, map)?;
        self.net.forward_cached(&self.params, &input, None, mode)
    }

    pub fn apply_bn_updates(&mut self, caches: &[FwdCache]) -> Result<()> {
        let net = self.net.clone();
        for c in caches {
            net.apply_bn_updates(&mut self.params, c)?;
        }
        Ok(())
    }
}

/// Binary cross-entropy from a logit, stable log-sum-exp form.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Pixelwise binary cross-entropy between a prediction in (0, 1) and a
/// target in [0, 1], averaged over all entries.
pub fn bce_mean(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape != target.shape {
        return Err(Error::ShapeMismatch {
            context: "bce".into(),
            detail: format!("{:?} vs {:?}", pred.shape, target.shape),
        });
    }
    let mut acc = 0.0;
    for (&p, &t) in pred.data.iter().zip(target.data.iter()) {
        acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(acc / pred.len() as f64)
}

/// Gradient of [`bce_mean`] in the prediction.
pub fn bce_mean_grad(pred: &Tensor, target: &Tensor) -> Tensor {
    let count = pred.len() as f64;
    let mut grad = Tensor::zeros(&pred.shape);
    for (g, (&p, &t)) in grad.data.iter_mut().zip(pred.data.iter().zip(target.data.iter())) {
        *g = (-t / p + (1.0 - t) / (1.0 - p)) / count;
    }
    grad
}

/// Mean BCE of a logit map against a constant target (0 or 1), plus the
/// gradient w.r.t. the logits.
fn bce_logits_const_target(logits: &Tensor, target: f64) -> (f64, Tensor) {
    let count = logits.len() as f64;
    let mut grad = Tensor::zeros(&logits.shape);
    let mut loss = 0.0;
    for (g, &l) in grad.data.iter_mut().zip(logits.data.iter()) {
        loss += bce_with_logit(l, target);
        *g = (sigmoid(l) - target) / count;
    }
    (loss / count, grad)
}

/// Value and gradients of the adversarial generator objective
/// `L_rec + lambda * L_adv` evaluated at a posterior latent sample.
/// `L_rec` is pixelwise BCE between prediction and annotation; `L_adv`
/// drives the verdict on `[prediction, image]` toward all-ones. Gradients
/// flow only into the generator; the discriminator is a fixed function here.
pub struct GeneratorLoss {
    pub total: f64,
    pub recon: f64,
    pub adversarial: f64,
    pub grads: GradStore,
}

pub fn egan_generator_loss(
    gen: &SaliencyGenerator,
    disc: &Discriminator,
    x: &Tensor,
    y: &Tensor,
    z_post: &Tensor,
    lambda: f64,
) -> Result<GeneratorLoss> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("egan: lambda must be non-negative, got {lambda}")));
    }
    let (pred, gen_cache) = gen.net().forward_cached(&gen.params, x, Some(z_post), Mode::Eval)?;
    if pred.shape != y.shape {
        return Err(Error::ShapeMismatch {
            context: "egan generator loss".into(),
            detail: format!("prediction {:?} vs target {:?}", pred.shape, y.shape),
        });
    }
    let recon = bce_mean(&pred, y)?;
    let mut upstream = bce_mean_grad(&pred, y);

    let mut adversarial = 0.0;
    if lambda > 0.0 {
        let (logits, disc_cache) = disc.logits_cached(x, &pred, Mode::Train)?;
        let (adv, dlogits) = bce_logits_const_target(&logits, 1.0);
        adversarial = adv;
        let disc_grads =
            disc.net().backward(&disc.params, &disc_cache, &dlogits, Mode::Train, GradWants::INPUT_ONLY)?;
        let (map_grad, _) = disc_grads.input.split_channels(1)?;
        upstream.add_scaled(&map_grad, lambda);
    }

    let grads = gen.net().backward(&gen.params, &gen_cache, &upstream, Mode::Eval, GradWants::PARAMS_ONLY)?;
    Ok(GeneratorLoss { total: recon + lambda * adversarial, recon, adversarial, grads: grads.params })
}

/// Value and gradients of the discriminator objective: the prediction/image
/// pair is pushed toward the all-zero verdict, the annotation/image pair
/// toward all-ones. The prediction enters as a constant; no generator
/// gradient exists. The forward caches are returned so a training loop can
/// fold batch statistics into the running buffers.
pub struct DiscriminatorLoss {
    pub total: f64,
    pub grads: GradStore,
    pub caches: Vec<FwdCache>,
}

pub fn egan_discriminator_loss(
    disc: &Discriminator,
    prediction: &Tensor,
    x: &Tensor,
    y: &Tensor,
) -> Result<DiscriminatorLoss> {
    let (fake_logits, fake_cache) = disc.logits_cached(x, prediction, Mode::Train)?;
    let (fake_loss, fake_dl) = bce_logits_const_target(&fake_logits, 0.0);
    let fake_grads = disc.net().backward(&disc.params, &fake_cache, &fake_dl, Mode::Train, GradWants::PARAMS_ONLY)?;

    let (real_logits, real_cache) = disc.logits_cached(x, y, Mode::Train)?;
    let (real_loss, real_dl) = bce_logits_const_target(&real_logits, 1.0);
    let real_grads = disc.net().backward(&disc.params, &real_cache, &real_dl, Mode::Train, GradWants::PARAMS_ONLY)?;

    let mut grads = fake_grads.params;
    grads.add_scaled(&real_grads.params, 1.0);
    Ok(DiscriminatorLoss { total: fake_loss + real_loss, grads, caches: vec![fake_cache, real_cache] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use crate::testkit;

    fn small_disc(seed: u64) -> Discriminator {
        Discriminator::new(DiscriminatorConfig { in_channels: 1, base_channels: 4 }, seed).unwrap()
    }

    fn small_gen(seed: u64) -> SaliencyGenerator {
        SaliencyGenerator::new(
            GeneratorConfig { in_channels: 1, latent_dim: 3, enc_channels: [2, 3, 4], sigma_eps: 1.0 },
            seed,
        )
        .unwrap()
    }

    fn image_batch(n: usize, size: usize, seed_tag: u64) -> Tensor {
        testkit::normal_tensor(&[n, 1, size, size], 40, seed_tag).map(|v| 0.5 + 0.15 * v)
    }

    fn binary_batch(n: usize, size: usize, seed_tag: u64) -> Tensor {
        testkit::normal_tensor(&[n, 1, size, size], 40, seed_tag).map(|v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let mut d = small_disc(1);
        for n in d.params.trainable_names() {
            d.params.get_mut(&n).unwrap().data.fill(0.0);
        }
        let x = image_batch(2, 32, 0);
        let m = Tensor::full(&[2, 1, 32, 32], 0.7);
        let out = d.logits(&x, &m, Mode::Eval).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn verdict_resolution_is_one_eighth() {
        let d = small_disc(2);
        let x = image_batch(2, 32, 1);
        let m = Tensor::full(&[2, 1, 32, 32], 0.5);
        let out = d.logits(&x, &m, Mode::Train).unwrap();
        assert_eq!(out.shape, vec![2, 1, 4, 4]);
        // ceil(h/8) for the padded stride-2 stack
        let x = image_batch(2, 24, 2);
        let m = Tensor::full(&[2, 1, 24, 24], 0.5);
        let out = d.logits(&x, &m, Mode::Train).unwrap();
        assert_eq!(out.shape, vec![2, 1, 3, 3]);
    }

    #[test]
    fn spatial_mismatch_is_an_error() {
        let d = small_disc(2);
        let x = image_batch(2, 32, 1);
        let m = Tensor::full(&[2, 1, 16, 16], 0.5);
        assert!(d.logits(&x, &m, Mode::Eval).is_err());
    }

    #[test]
    fn mean_logit_gradient_matches_finite_differences() {
        let d = small_disc(3);
        let x = image_batch(2, 16, 3);
        let m = image_batch(2, 16, 4);
        let input = m.concat_channels(&x).unwrap();
        let out_shape = d.net().out_shape(&input.shape, None).unwrap();
        let upstream = Tensor::full(&out_shape, 1.0 / out_shape.iter().product::<usize>() as f64);
        let dev =
            testkit::fd_check_params(d.net(), &d.params, &input, None, Mode::Train, &upstream, 1e-5).unwrap();
        assert!(dev.within(1e-4, 1e-8), "dev {dev:?}");
    }

    #[test]
    fn lambda_zero_reduces_to_reconstruction() {
        let gen = small_gen(4);
        let disc = small_disc(5);
        let x = image_batch(2, 16, 5);
        let y = binary_batch(2, 16, 6);
        let z = testkit::normal_tensor(&[2, 3], 41, 1);
        let loss = egan_generator_loss(&gen, &disc, &x, &y, &z, 0.0).unwrap();
        assert_eq!(loss.total, loss.recon);
        let pred = gen.predict(&x, &z).unwrap();
        assert!((loss.recon - bce_mean(&pred, &y).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_bce_decreases_as_prediction_approaches_target() {
        let y = Tensor::full(&[1, 1, 4, 4], 1.0);
        let far = Tensor::full(&[1, 1, 4, 4], 0.4);
        let near = Tensor::full(&[1, 1, 4, 4], 0.8);
        assert!(bce_mean(&near, &y).unwrap() < bce_mean(&far, &y).unwrap());
    }

    #[test]
    fn generator_loss_is_additive_in_its_two_terms() {
        let gen = small_gen(6);
        let disc = small_disc(7);
        let x = image_batch(2, 16, 7);
        let y = binary_batch(2, 16, 8);
        let z = testkit::normal_tensor(&[2, 3], 42, 1);
        let lambda = 0.37;
        let combined = egan_generator_loss(&gen, &disc, &x, &y, &z, lambda).unwrap();
        let base = egan_generator_loss(&gen, &disc, &x, &y, &z, 0.0).unwrap();

        // Loss additivity in lambda: L(0) + lambda * L_adv = L(lambda).
        assert!((combined.total - (base.total + lambda * combined.adversarial)).abs() < 1e-12);

        // Gradient additivity: recon grads plus lambda * adversarial grads.
        let adv_only = {
            let l1 = egan_generator_loss(&gen, &disc, &x, &y, &z, 1.0).unwrap();
            let mut g = l1.grads;
            g.add_scaled(&base.grads, -1.0);
            g
        };
        let mut reassembled = base.grads.clone();
        reassembled.add_scaled(&adv_only, lambda);
        for (a, b) in reassembled.to_flat().iter().zip(combined.grads.to_flat().iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn negative_lambda_is_a_config_error() {
        let gen = small_gen(8);
        let disc = small_disc(9);
        let x = image_batch(2, 16, 9);
        let y = Tensor::full(&[2, 1, 16, 16], 1.0);
        let z = testkit::normal_tensor(&[2, 3], 43, 0);
        assert!(egan_generator_loss(&gen, &disc, &x, &y, &z, -0.1).is_err());
    }

    #[test]
    fn zero_logit_discriminator_loses_two_ln_two_per_position() {
        let mut d = small_disc(10);
        for n in d.params.trainable_names() {
            d.params.get_mut(&n).unwrap().data.fill(0.0);
        }
        let x = image_batch(2, 16, 10);
        let pred = Tensor::full(&[2, 1, 16, 16], 0.3);
        let y = Tensor::full(&[2, 1, 16, 16], 1.0);
        let loss = egan_discriminator_loss(&d, &pred, &x, &y).unwrap();
        assert!((loss.total - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn swapping_prediction_and_truth_swaps_the_two_terms() {
        let d = small_disc(11);
        let x = image_batch(2, 16, 11);
        let a = image_batch(2, 16, 12);
        let b = image_batch(2, 16, 13);
        let l_ab = egan_discriminator_loss(&d, &a, &x, &b).unwrap();
        let l_ba = egan_discriminator_loss(&d, &b, &x, &a).unwrap();
        let term = |map: &Tensor, target: f64| {
            let (v, _) = bce_logits_const_target(&d.logits(&x, map, Mode::Train).unwrap(), target);
            v
        };
        assert!((l_ab.total - (term(&a, 0.0) + term(&b, 1.0))).abs() < 1e-12);
        assert!((l_ba.total - (term(&b, 0.0) + term(&a, 1.0))).abs() < 1e-12);
    }

    #[test]
    fn discriminator_gradient_matches_finite_differences() {
        let d = small_disc(12);
        let x = image_batch(2, 16, 14);
        let pred = image_batch(2, 16, 15);
        let y = binary_batch(2, 16, 16);
        let loss = egan_discriminator_loss(&d, &pred, &x, &y).unwrap();
        let analytic = loss.grads.to_flat();
        let point = d.params.to_flat();
        let mut scratch = d.params.clone();
        let dev = testkit::fd_compare_adaptive(
            &mut |flat| {
                scratch.load_flat(flat).unwrap();
                let probe = Discriminator::from_params(d.cfg, scratch.clone()).unwrap();
                let (fl, _) = bce_logits_const_target(&probe.logits(&x, &pred, Mode::Train).unwrap(), 0.0);
                let (rl, _) = bce_logits_const_target(&probe.logits(&x, &y, Mode::Train).unwrap(), 1.0);
                fl + rl
            },
            &point,
            &analytic,
        )
        .unwrap();
        assert!(dev.within(1e-4, 1e-8), "dev {dev:?}");
    }

    #[test]
    fn gradient_isolation_between_generator_and_discriminator() {
        let gen = small_gen(13);
        let disc = small_disc(14);
        let x = image_batch(2, 16, 17);
        let y = Tensor::full(&[2, 1, 16, 16], 1.0);
        let z = testkit::normal_tensor(&[2, 3], 45, 0);
        let gl = egan_generator_loss(&gen, &disc, &x, &y, &z, 0.1).unwrap();
        for (name, _) in gl.grads.iter() {
            assert!(gen.params.contains(name), "generator loss leaked grad slot {name}");
        }
        let pred = gen.predict(&x, &z).unwrap();
        let dl = egan_discriminator_loss(&disc, &pred, &x, &y).unwrap();
        for (name, _) in dl.grads.iter() {
            assert!(disc.params.contains(name), "discriminator loss leaked grad slot {name}");
        }
    }
}
