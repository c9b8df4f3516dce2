//! Training objectives: the adversarial value, the re-encoding and
//! reconstruction distances, and the composite losses for the four
//! frameworks (GAN, AAE, BiGAN and the flipped-AAE).
//!
//! Discriminator scores are clamped to [1e-7, 1-1e-7] inside the logs so a
//! saturated sigmoid cannot produce -inf. The generator side uses the
//! non-saturating -log D(G(z)) form.

use crate::error::{Error, Result};
use crate::models::{mirror_check, Binding, Mode, Network};
use crate::tensor::{Scalar, Tape, Var};

/// Floor applied inside log terms.
pub const LOG_CLAMP: f64 = 1e-7;

/// Distance used for the re-encoding / reconstruction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossNorm {
    /// Mean Euclidean norm (the objective as written).
    L2,
    /// Mean squared error; smooth at zero. The default.
    L2Sq,
}

/// Scalar losses of one step, split per parameter group.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    /// Discriminator objective value (it maximizes this).
    pub adv_d: f64,
    /// Generator adversarial loss, non-saturating form (it minimizes this).
    pub adv_g: f64,
    /// The distance term: re-encoding (f-AAE/BiGAN diagnostic) or
    /// reconstruction (AAE).
    pub recon_or_reenc: f64,
    /// weight_adv * adv_g + alpha * recon_or_reenc.
    pub total_weighted: f64,
    pub alpha: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        self.adv_d.is_finite()
            && self.adv_g.is_finite()
            && self.recon_or_reenc.is_finite()
            && self.total_weighted.is_finite()
    }
}

/// Graph handles to the loss scalars, for callers that drive backward
/// themselves.
pub struct LossVars {
    pub adv_d: Var,
    pub adv_g: Var,
    pub distance: Var,
}

/// Batch-mean squared latent distance ||z - z_hat||^2 / n, or the unsquared
/// Euclidean norm under [`LossNorm::L2`].
pub fn reencoding_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    z_hat: Var,
    norm: LossNorm,
) -> Result<Var> {
    let sz = tape.shape(z).to_vec();
    let sh = tape.shape(z_hat).to_vec();
    if sz != sh || sz.len() != 2 {
        return Err(Error::Contract(format!(
            "reencoding_loss: latent batches {sz:?} and {sh:?} must match"
        )));
    }
    let diff = tape.sub(z, z_hat)?;
    let sq = tape.square(diff);
    match norm {
        LossNorm::L2Sq => tape.mean_all(sq),
        LossNorm::L2 => {
            // mean over batch of ||z - z_hat||, normalized by n for scale
            // comparability with the squared form
            let per_row = tape.mean_axes(sq, &[1])?;
            let n = sz[1] as f64;
            let row_sums = tape.scale(per_row, n);
            let roots = tape.sqrt_clamped(row_sums, 1e-12);
            let m = tape.mean_all(roots)?;
            Ok(tape.scale(m, 1.0 / n))
        }
    }
}

/// Batch-mean per-element squared error between data batches.
pub fn reconstruction_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(x_hat) {
        return Err(Error::Contract(format!(
            "reconstruction_loss: shapes {:?} and {:?} must match",
            tape.shape(x),
            tape.shape(x_hat)
        )));
    }
    let diff = tape.sub(x, x_hat)?;
    let sq = tape.square(diff);
    tape.mean_all(sq)
}

/// Adversarial values from discriminator scores.
///
/// adv_d = mean log D(real) + mean log(1 - D(fake)), the quantity D
/// maximizes. adv_g = -mean log D(fake), the non-saturating generator loss.
pub fn gan_value<T: Scalar>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<(Var, Var)> {
    if tape.value(d_real).is_empty() || tape.value(d_fake).is_empty() {
        return Err(Error::Contract("gan_value: empty score batch".into()));
    }
    let log_real = tape.log_clamped(d_real, LOG_CLAMP);
    let mean_real = tape.mean_all(log_real)?;
    let onev = tape.leaf(&crate::tensor::Tensor::scalar(T::one()));
    let one_minus = tape.sub(onev, d_fake)?;
    let log_fake = tape.log_clamped(one_minus, LOG_CLAMP);
    let mean_fake = tape.mean_all(log_fake)?;
    let adv_d = tape.add(mean_real, mean_fake)?;
    let log_d_fake = tape.log_clamped(d_fake, LOG_CLAMP);
    let mean_ldf = tape.mean_all(log_d_fake)?;
    let adv_g = tape.neg(mean_ldf);
    Ok((adv_d, adv_g))
}

/// Everything needed to evaluate one composite objective on one tape.
pub struct ObjectiveCtx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub weight_adv: f64,
    pub alpha: f64,
    pub loss_norm: LossNorm,
}

/// Bindings plus networks for the f-AAE triple on one tape.
pub struct BoundTriple<'a, T: Scalar> {
    pub g: &'a mut Network<T>,
    pub e: &'a mut Network<T>,
    pub d: &'a mut Network<T>,
    pub g_bind: &'a Binding,
    pub e_bind: &'a Binding,
    pub d_bind: &'a Binding,
}

/// The flipped-AAE objective on one tape: x_hat = G(z), z_hat = E(x_hat),
/// discriminator scores on x and x_hat.
///
/// The caller chooses which loss scalar to run backward on; the returned
/// report carries all observed values.
pub fn faae_value<T: Scalar>(
    ctx: &mut ObjectiveCtx<'_, T>,
    nets: &mut BoundTriple<'_, T>,
    x_batch: Var,
    z_batch: Var,
    mode: Mode,
) -> Result<(LossReport, LossVars)> {
    if !mirror_check(nets.g, nets.e) {
        return Err(Error::Contract(
            "faae_value: generator and encoder are not mirrors".into(),
        ));
    }
    let tape = &mut *ctx.tape;
    let x_hat = nets.g.forward(tape, nets.g_bind, z_batch, mode)?;
    let z_hat = nets.e.forward(tape, nets.e_bind, x_hat, mode)?;
    let d_real = nets.d.forward(tape, nets.d_bind, x_batch, mode)?;
    let d_fake = nets.d.forward(tape, nets.d_bind, x_hat, mode)?;
    let (adv_d, adv_g) = gan_value(tape, d_real, d_fake)?;
    let distance = reencoding_loss(tape, z_batch, z_hat, ctx.loss_norm)?;
    report(tape, ctx.weight_adv, ctx.alpha, adv_d, adv_g, distance)
}

fn flatten_like<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    let numel: usize = s[1..].iter().product();
    tape.reshape(v, &[s[0], numel])
}

fn report<T: Scalar>(
    tape: &mut Tape<T>,
    weight_adv: f64,
    alpha: f64,
    adv_d: Var,
    adv_g: Var,
    distance: Var,
) -> Result<(LossReport, LossVars)> {
    let rep = LossReport {
        adv_d: tape.value(adv_d)[0].tof(),
        adv_g: tape.value(adv_g)[0].tof(),
        recon_or_reenc: tape.value(distance)[0].tof(),
        total_weighted: weight_adv * tape.value(adv_g)[0].tof()
            + alpha * tape.value(distance)[0].tof(),
        alpha,
    };
    Ok((rep, LossVars { adv_d, adv_g, distance }))
}

/// The AAE baseline objective: z_hat = E(x), x_hat = G(z_hat), latent-space
/// discriminator on prior draws vs encoded codes, plus data-space
/// reconstruction error.
pub fn aae_value<T: Scalar>(
    ctx: &mut ObjectiveCtx<'_, T>,
    g: &mut Network<T>,
    e: &mut Network<T>,
    d_latent: &mut Network<T>,
    binds: (&Binding, &Binding, &Binding),
    x_batch: Var,
    z_batch: Var,
    mode: Mode,
) -> Result<(LossReport, LossVars)> {
    let (g_bind, e_bind, d_bind) = binds;
    let tape = &mut *ctx.tape;
    let z_hat = e.forward(tape, e_bind, x_batch, mode)?;
    let x_hat = g.forward(tape, g_bind, z_hat, mode)?;
    let d_prior = d_latent.forward(tape, d_bind, z_batch, mode)?;
    let d_post = d_latent.forward(tape, d_bind, z_hat, mode)?;
    let (adv_d, adv_g) = gan_value(tape, d_prior, d_post)?;
    let distance = reconstruction_loss(tape, x_batch, x_hat)?;
    report(tape, ctx.weight_adv, ctx.alpha, adv_d, adv_g, distance)
}

/// The BiGAN baseline objective: joint discriminator on (x, E(x)) vs
/// (G(z), z). The re-encoding number in the report is diagnostic only and
/// carries no gradient.
pub fn bigan_value<T: Scalar>(
    ctx: &mut ObjectiveCtx<'_, T>,
    g: &mut Network<T>,
    e: &mut Network<T>,
    d_joint: &mut Network<T>,
    binds: (&Binding, &Binding, &Binding),
    x_batch: Var,
    z_batch: Var,
    mode: Mode,
) -> Result<(LossReport, LossVars)> {
    let (g_bind, e_bind, d_bind) = binds;
    let tape = &mut *ctx.tape;
    let z_hat = e.forward(tape, e_bind, x_batch, mode)?;
    let x_hat = g.forward(tape, g_bind, z_batch, mode)?;
    let x_flat = flatten_like(tape, x_batch)?;
    let x_hat_flat = flatten_like(tape, x_hat)?;
    // real pair: (x, E(x)); fake pair: (G(z), z)
    let real_pair = tape.concat_cols(x_flat, z_hat)?;
    let fake_pair = tape.concat_cols(x_hat_flat, z_batch)?;
    let d_real = d_joint.forward(tape, d_bind, real_pair, mode)?;
    let d_fake = d_joint.forward(tape, d_bind, fake_pair, mode)?;
    let (adv_d, adv_g_gen) = gan_value(tape, d_real, d_fake)?;
    // encoder's non-saturating flip: minimize -log(1 - D(real pair))
    let onev = tape.leaf(&crate::tensor::Tensor::scalar(T::one()));
    let om = tape.sub(onev, d_real)?;
    let log_om = tape.log_clamped(om, LOG_CLAMP);
    let mean_om = tape.mean_all(log_om)?;
    let enc_loss = tape.neg(mean_om);
    let adv_g = tape.add(adv_g_gen, enc_loss)?;
    // diagnostic re-encoding of the generated sample, detached
    let z_reenc = {
        let x_hat_det = tape.detach(x_hat);
        let zr = e.forward(tape, e_bind, x_hat_det, mode)?;
        let zr_det = tape.detach(zr);
        let z_det = tape.detach(z_batch);
        reencoding_loss(tape, z_det, zr_det, ctx.loss_norm)?
    };
    report(tape, ctx.weight_adv, 0.0, adv_d, adv_g, z_reenc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_encoder, build_flat_discriminator, build_generator, ArchKind, ModelSpec};
    use crate::rng::Rng;
    use crate::tensor::{grad_check, Tensor};

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            latent_dim: 2,
            data_shape: vec![3],
            channels: vec![],
            hidden: vec![5],
            arch: ArchKind::Mlp,
            encoder_normalize: true,
        }
    }

    #[test]
    fn reencoding_loss_examples() {
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.leaf(&Tensor::from_f64(vec![1, 2], &[1.0, 0.0]).unwrap());
        let zh = tape.leaf(&Tensor::from_f64(vec![1, 2], &[0.0, 1.0]).unwrap());
        let same = reencoding_loss(&mut tape, z, z, LossNorm::L2Sq).unwrap();
        assert_eq!(tape.value(same)[0], 0.0);
        let l = reencoding_loss(&mut tape, z, zh, LossNorm::L2Sq).unwrap();
        // ||z - zh||^2 / n = 2/2 = 1
        assert!((tape.value(l)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reencoding_gradient_matches_analytic() {
        // gradient w.r.t. z_hat is 2(z_hat - z)/(n * batch)
        let zdat = Tensor::from_f64(vec![2, 3], &[0.1, 0.5, -0.2, 0.9, 0.0, 0.3]).unwrap();
        let zhdat = Tensor::from_f64(vec![2, 3], &[0.0, 0.4, 0.2, -0.5, 0.7, 0.1]).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.leaf(&zdat);
        let zh = tape.leaf(&zhdat);
        let l = reencoding_loss(&mut tape, z, zh, LossNorm::L2Sq).unwrap();
        tape.backward(l).unwrap();
        for i in 0..6 {
            let expect = 2.0 * (zhdat.data[i] - zdat.data[i]) / 6.0;
            assert!((tape.grad(zh)[i] - expect).abs() < 1e-12);
        }
        let err = grad_check(
            |t, zhv| {
                let zv = t.leaf(&zdat);
                reencoding_loss(t, zv, zhv, LossNorm::L2Sq)
            },
            &zhdat,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn reconstruction_loss_examples() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 4]));
        let ones = tape.leaf(&Tensor::full(&[1, 4], 1.0f64));
        let same = reconstruction_loss(&mut tape, x, x).unwrap();
        assert_eq!(tape.value(same)[0], 0.0);
        let l = reconstruction_loss(&mut tape, x, ones).unwrap();
        assert_eq!(tape.value(l)[0], 1.0);
        let l2 = reconstruction_loss(&mut tape, ones, x).unwrap();
        assert_eq!(tape.value(l2)[0], tape.value(l)[0]);
    }

    #[test]
    fn gan_value_constants() {
        let mut tape: Tape<f64> = Tape::new();
        let half = tape.leaf(&Tensor::full(&[4, 1], 0.5f64));
        let (adv_d, adv_g) = gan_value(&mut tape, half, half).unwrap();
        assert!((tape.value(adv_d)[0] + 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((tape.value(adv_g)[0] - std::f64::consts::LN_2).abs() < 1e-9);

        // perfect discriminator under clamping
        let one = tape.leaf(&Tensor::full(&[4, 1], 1.0f64));
        let (adv_d2, _) = gan_value(&mut tape, one, one).unwrap();
        // ln(1) + ln(1 - 1) clamped to ln(1e-7)? no: 1 - d_fake = 0 -> clamp floor
        let expect = 0.0 + (1e-7f64).ln();
        assert!((tape.value(adv_d2)[0] - expect).abs() < 1e-9);

        let empty = tape.leaf(&Tensor::zeros(&[0, 1]));
        assert!(gan_value(&mut tape, empty, empty).is_err());
    }

    #[test]
    fn faae_reduces_to_gan_at_alpha_zero() {
        let mut rng = Rng::new(12);
        let spec = tiny_spec();
        let mut g = build_generator::<f64>(&spec, &mut rng.derive("g")).unwrap();
        let mut e = build_encoder::<f64>(&spec, &mut rng.derive("e")).unwrap();
        let mut d = build_flat_discriminator::<f64>("D", 3, &[5], &mut rng.derive("d")).unwrap();
        let x: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
        let z = crate::data::sample_latent_batch(4, 2, &mut rng).unwrap();
        let run = |alpha: f64, g: &mut Network<f64>, e: &mut Network<f64>, d: &mut Network<f64>| {
            let mut tape = Tape::new();
            let xv = tape.leaf(&Tensor::from_f64(vec![4, 3], &x).unwrap());
            let zv = tape.leaf(&Tensor::from_f64(vec![4, 2], &z).unwrap());
            let g_bind = g.bind(&mut tape);
            let e_bind = e.bind(&mut tape);
            let d_bind = d.bind(&mut tape);
            let mut ctx = ObjectiveCtx { tape: &mut tape, weight_adv: 0.1, alpha, loss_norm: LossNorm::L2Sq };
            let mut nets = BoundTriple {
                g, e, d,
                g_bind: &g_bind, e_bind: &e_bind, d_bind: &d_bind,
            };
            let (rep, _) = faae_value(&mut ctx, &mut nets, xv, zv, Mode::Eval).unwrap();
            rep
        };
        let r0 = run(0.0, &mut g, &mut e, &mut d);
        let r1 = run(1.0, &mut g, &mut e, &mut d);
        assert_eq!(r0.adv_d, r1.adv_d);
        assert_eq!(r0.adv_g, r1.adv_g);
        assert_eq!(r0.total_weighted, 0.1 * r0.adv_g);
    }

    #[test]
    fn faae_composite_grad_check() {
        let mut rng = Rng::new(13);
        let spec = tiny_spec();
        let g = build_generator::<f64>(&spec, &mut rng.derive("g")).unwrap();
        let e = build_encoder::<f64>(&spec, &mut rng.derive("e")).unwrap();
        let d = build_flat_discriminator::<f64>("D", 3, &[5], &mut rng.derive("d")).unwrap();
        let x: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
        let xt = Tensor::from_f64(vec![4, 3], &x).unwrap();
        let z = crate::data::sample_latent_batch(4, 2, &mut rng).unwrap();
        let zt = Tensor::from_f64(vec![4, 2], &z).unwrap();
        // probe the total generator-side loss w.r.t. the z input
        let err = grad_check(
            |t, zv| {
                let mut g = g.clone();
                let mut e = e.clone();
                let mut d = d.clone();
                let xv = t.leaf(&xt);
                let g_bind = g.bind(t);
                let e_bind = e.bind(t);
                let d_bind = d.bind(t);
                let mut ctx = ObjectiveCtx { tape: t, weight_adv: 0.1, alpha: 0.7, loss_norm: LossNorm::L2Sq };
                let mut nets = BoundTriple {
                    g: &mut g, e: &mut e, d: &mut d,
                    g_bind: &g_bind, e_bind: &e_bind, d_bind: &d_bind,
                };
                let (_, vars) = faae_value(&mut ctx, &mut nets, xv, zv, Mode::Eval)?;
                let t = ctx.tape;
                let adv = t.scale(vars.adv_g, 0.1);
                let dist = t.scale(vars.distance, 0.7);
                t.add(adv, dist)
            },
            &zt,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn aae_constant_half_and_inverse_stub() {
        // identity-linear stub pair on 2-D data: G and E single dense identity
        let mut rng = Rng::new(14);
        let spec = ModelSpec {
            latent_dim: 2,
            data_shape: vec![2],
            channels: vec![],
            hidden: vec![],
            arch: ArchKind::Mlp,
            encoder_normalize: false,
        };
        let mut g = build_generator::<f64>(&spec, &mut rng).unwrap();
        let mut e = build_encoder::<f64>(&spec, &mut rng).unwrap();
        // overwrite: G = E = identity
        for net in [&mut g, &mut e] {
            for t in net.param_tensors_mut() {
                if t.shape == vec![2, 2] {
                    t.data = vec![1.0, 0.0, 0.0, 1.0];
                } else {
                    t.data.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let mut d = build_flat_discriminator::<f64>("Dz", 2, &[4], &mut rng).unwrap();
        let mut tape = Tape::new();
        let x: Vec<f64> = (0..8).map(|_| rng.uniform()).collect();
        let xv = tape.leaf(&Tensor::from_f64(vec![4, 2], &x).unwrap());
        let z = crate::data::sample_latent_batch(4, 2, &mut rng).unwrap();
        let zv = tape.leaf(&Tensor::from_f64(vec![4, 2], &z).unwrap());
        let g_bind = g.bind(&mut tape);
        let e_bind = e.bind(&mut tape);
        let d_bind = d.bind(&mut tape);
        let mut ctx = ObjectiveCtx { tape: &mut tape, weight_adv: 0.1, alpha: 1.0, loss_norm: LossNorm::L2Sq };
        let (rep, _) = aae_value(
            &mut ctx,
            &mut g,
            &mut e,
            &mut d,
            (&g_bind, &e_bind, &d_bind),
            xv,
            zv,
            Mode::Eval,
        )
        .unwrap();
        // perfect autoencoder stub: reconstruction exactly 0
        assert_eq!(rep.recon_or_reenc, 0.0);
        assert!(rep.all_finite());
    }

    #[test]
    fn bigan_diagnostic_is_detached() {
        let mut rng = Rng::new(15);
        let spec = tiny_spec();
        let mut g = build_generator::<f64>(&spec, &mut rng.derive("g")).unwrap();
        let mut e = build_encoder::<f64>(&spec, &mut rng.derive("e")).unwrap();
        let mut d = build_flat_discriminator::<f64>("Dj", 5, &[6], &mut rng.derive("d")).unwrap();
        let mut tape = Tape::new();
        let x: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
        let xv = tape.leaf(&Tensor::from_f64(vec![4, 3], &x).unwrap());
        let z = crate::data::sample_latent_batch(4, 2, &mut rng).unwrap();
        let zv = tape.leaf(&Tensor::from_f64(vec![4, 2], &z).unwrap());
        let g_bind = g.bind(&mut tape);
        let e_bind = e.bind(&mut tape);
        let d_bind = d.bind(&mut tape);
        let mut ctx = ObjectiveCtx { tape: &mut tape, weight_adv: 0.1, alpha: 0.0, loss_norm: LossNorm::L2Sq };
        let (rep, vars) = bigan_value(
            &mut ctx,
            &mut g,
            &mut e,
            &mut d,
            (&g_bind, &e_bind, &d_bind),
            xv,
            zv,
            Mode::Eval,
        )
        .unwrap();
        assert!(rep.all_finite());
        // backward on the diagnostic term reaches no parameter
        tape.backward(vars.distance).unwrap();
        for grads in [g_bind.grads(&tape), e_bind.grads(&tape), d_bind.grads(&tape)] {
            for g in grads {
                assert!(g.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn bigan_adversarial_grad_check() {
        let mut rng = Rng::new(16);
        let spec = tiny_spec();
        let g = build_generator::<f64>(&spec, &mut rng.derive("g")).unwrap();
        let e = build_encoder::<f64>(&spec, &mut rng.derive("e")).unwrap();
        let d = build_flat_discriminator::<f64>("Dj", 5, &[6], &mut rng.derive("d")).unwrap();
        let x: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
        let xt = Tensor::from_f64(vec![4, 3], &x).unwrap();
        let z = crate::data::sample_latent_batch(4, 2, &mut rng).unwrap();
        let zt = Tensor::from_f64(vec![4, 2], &z).unwrap();
        let err = grad_check(
            |t, zv| {
                let mut g = g.clone();
                let mut e = e.clone();
                let mut d = d.clone();
                let xv = t.leaf(&xt);
                let g_bind = g.bind(t);
                let e_bind = e.bind(t);
                let d_bind = d.bind(t);
                let mut ctx = ObjectiveCtx { tape: t, weight_adv: 0.1, alpha: 0.0, loss_norm: LossNorm::L2Sq };
                let (_, vars) = bigan_value(
                    &mut ctx,
                    &mut g,
                    &mut e,
                    &mut d,
                    (&g_bind, &e_bind, &d_bind),
                    xv,
                    zv,
                    Mode::Eval,
                )?;
                Ok(vars.adv_g)
            },
            &zt,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
