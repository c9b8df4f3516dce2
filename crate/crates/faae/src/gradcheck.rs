//! Randomized finite-difference verification of every differentiable op and
//! of the composite objectives, run in 64-bit precision.

use crate::data::sample_latent_batch;
use crate::error::{Error, Result};
use crate::layers::DEFAULT_BN_EPS;
use crate::models::{build_discriminator, build_encoder, build_generator, ArchKind, Mode, ModelSpec};
use crate::objectives::{
    faae_value, gan_value, reconstruction_loss, reencoding_loss, LossNorm, ObjectiveCtx,
};
use crate::rng::Rng;
use crate::tensor::{grad_check, Tensor};

/// Default central-difference step and acceptance threshold.
pub const GRADCHECK_EPS: f64 = 1e-4;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Every op kind the suite covers, in report order.
pub const ALL_OPS: &[&str] = &[
    "matmul",
    "conv2d",
    "upsample2d",
    "maxpool2d",
    "batchnorm",
    "leaky_relu",
    "sigmoid",
    "dense",
    "reencoding_loss",
    "reconstruction_loss",
    "gan_value",
    "faae_value",
];

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    Tensor { shape: shape.to_vec(), data }
}

/// Uniform values kept away from a kink at zero.
fn rand_tensor_off_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let mut t = rand_tensor(shape, rng);
    for v in t.data.iter_mut() {
        if v.abs() < 0.05 {
            *v += if *v >= 0.0 { 0.05 } else { -0.05 };
        }
    }
    t
}

/// Pool input resampled until every window's top two values are separated,
/// so the finite-difference step cannot flip the argmax.
fn rand_pool_input(shape: &[usize], window: usize, stride: usize, rng: &mut Rng) -> Tensor<f64> {
    'outer: loop {
        let t = rand_tensor(shape, rng);
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut vals: Vec<f64> = Vec::with_capacity(window * window);
                        for ky in 0..window {
                            for kx in 0..window {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                vals.push(t.data[((bi * c + ci) * h + iy) * w + ix]);
                            }
                        }
                        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                        if vals.len() > 1 && vals[0] - vals[1] < 1e-2 {
                            continue 'outer;
                        }
                    }
                }
            }
        }
        return t;
    }
}

/// Max relative gradient error over `instances` randomized cases of one op.
pub fn check_op(op: &str, instances: usize, eps: f64, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed).derive(op);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let err = match op {
            "matmul" => {
                let m = 1 + rng.below(3);
                let k = 1 + rng.below(3);
                let n = 1 + rng.below(3);
                let x = rand_tensor(&[m, k], &mut rng);
                let b = rand_tensor(&[k, n], &mut rng);
                grad_check(
                    |tape, xv| {
                        let bv = tape.leaf(&b);
                        let y = tape.matmul(xv, bv)?;
                        tape.mean_all(y)
                    },
                    &x,
                    eps,
                )?
            }
            "conv2d" => {
                let cin = 1 + rng.below(2);
                let cout = 1 + rng.below(2);
                let x = rand_tensor(&[2, cin, 4, 4], &mut rng);
                let k = rand_tensor(&[cout, cin, 3, 3], &mut rng);
                let b = rand_tensor(&[cout], &mut rng);
                grad_check(
                    |tape, xv| {
                        let kv = tape.leaf(&k);
                        let bv = tape.leaf(&b);
                        let y = tape.conv2d(xv, kv, bv, 1, 1)?;
                        tape.mean_all(y)
                    },
                    &x,
                    eps,
                )?
            }
            "upsample2d" => {
                let x = rand_tensor(&[2, 2, 3, 3], &mut rng);
                // square so the replicated-gradient sum is exercised
                grad_check(
                    |tape, xv| {
                        let y = tape.upsample2d(xv, 2)?;
                        let y2 = tape.square(y);
                        tape.mean_all(y2)
                    },
                    &x,
                    eps,
                )?
            }
            "maxpool2d" => {
                let x = rand_pool_input(&[2, 2, 4, 4], 2, 2, &mut rng);
                grad_check(
                    |tape, xv| {
                        let y = tape.maxpool2d(xv, 2, 2)?;
                        let y2 = tape.square(y);
                        tape.mean_all(y2)
                    },
                    &x,
                    eps,
                )?
            }
            "batchnorm" => {
                let c = 1 + rng.below(3);
                let x = rand_tensor(&[4, c], &mut rng);
                let gamma = rand_tensor_off_zero(&[c], &mut rng);
                let beta = rand_tensor(&[c], &mut rng);
                grad_check(
                    |tape, xv| {
                        let gv = tape.leaf(&gamma);
                        let bv = tape.leaf(&beta);
                        let (y, _, _) = tape.batchnorm_train(xv, gv, bv, DEFAULT_BN_EPS)?;
                        let y2 = tape.square(y);
                        tape.mean_all(y2)
                    },
                    &x,
                    eps,
                )?
            }
            "leaky_relu" => {
                let x = rand_tensor_off_zero(&[3, 5], &mut rng);
                grad_check(
                    |tape, xv| {
                        let y = tape.leaky_relu(xv, 0.2);
                        let y2 = tape.square(y);
                        tape.mean_all(y2)
                    },
                    &x,
                    eps,
                )?
            }
            "sigmoid" => {
                let x = rand_tensor(&[3, 5], &mut rng);
                grad_check(
                    |tape, xv| {
                        let y = tape.sigmoid(xv);
                        let y2 = tape.square(y);
                        tape.mean_all(y2)
                    },
                    &x,
                    eps,
                )?
            }
            "dense" => {
                let i = 1 + rng.below(4);
                let u = 1 + rng.below(4);
                let x = rand_tensor(&[3, i], &mut rng);
                let w = rand_tensor(&[i, u], &mut rng);
                let b = rand_tensor(&[u], &mut rng);
                grad_check(
                    |tape, xv| {
                        let wv = tape.leaf(&w);
                        let bv = tape.leaf(&b);
                        let h = tape.matmul(xv, wv)?;
                        let y = tape.add_row(h, bv)?;
                        let y2 = tape.square(y);
                        tape.mean_all(y2)
                    },
                    &x,
                    eps,
                )?
            }
            "reencoding_loss" => {
                let n = 1 + rng.below(4);
                let z = rand_tensor(&[3, n], &mut rng);
                let z_hat = rand_tensor(&[3, n], &mut rng);
                let norm = if rng.below(2) == 0 { LossNorm::L2Sq } else { LossNorm::L2 };
                grad_check(
                    |tape, xv| {
                        let zv = tape.leaf(&z);
                        reencoding_loss(tape, zv, xv, norm)
                    },
                    &z_hat,
                    eps,
                )?
            }
            "reconstruction_loss" => {
                let x = rand_tensor(&[3, 4], &mut rng);
                let x_hat = rand_tensor(&[3, 4], &mut rng);
                grad_check(
                    |tape, xv| {
                        let xr = tape.leaf(&x);
                        reconstruction_loss(tape, xr, xv)
                    },
                    &x_hat,
                    eps,
                )?
            }
            "gan_value" => {
                // pre-sigmoid scores; both loss terms summed
                let s_fake = rand_tensor(&[5, 1], &mut rng);
                let s_real = rand_tensor(&[5, 1], &mut rng);
                grad_check(
                    |tape, sv| {
                        let rv = tape.leaf(&s_real);
                        let d_real = tape.sigmoid(rv);
                        let d_fake = tape.sigmoid(sv);
                        let (adv_d, adv_g) = gan_value(tape, d_real, d_fake)?;
                        tape.add(adv_d, adv_g)
                    },
                    &s_fake,
                    eps,
                )?
            }
            "faae_value" => {
                let spec = ModelSpec {
                    latent_dim: 2,
                    data_shape: vec![3],
                    channels: vec![],
                    hidden: vec![4],
                    arch: ArchKind::Mlp,
                    encoder_normalize: false,
                    };
                let mut g = build_generator::<f64>(&spec, &mut rng.derive("g"))?;
                let mut e = build_encoder::<f64>(&spec, &mut rng.derive("e"))?;
                let mut d = build_discriminator::<f64>(&spec, &mut rng.derive("d"))?;
                let x = rand_tensor(&[4, 3], &mut rng);
                let z_flat = sample_latent_batch(4, 2, &mut rng)?;
                let z = Tensor { shape: vec![4, 2], data: z_flat };
                grad_check(
                    |tape, zv| {
                        let xv = tape.leaf(&x);
                        let g_bind = g.bind(tape);
                        let e_bind = e.bind(tape);
                        let d_bind = d.bind(tape);
                        let mut ctx = ObjectiveCtx {
                            tape,
                            weight_adv: 0.1,
                            alpha: 30.0,
                            loss_norm: LossNorm::L2Sq,
                        };
                        let mut nets = crate::objectives::BoundTriple {
                            g: &mut g,
                            e: &mut e,
                            d: &mut d,
                            g_bind: &g_bind,
                            e_bind: &e_bind,
                            d_bind: &d_bind,
                        };
                        let (_, vars) = faae_value(&mut ctx, &mut nets, xv, zv, Mode::Eval)?;
                        // total objective as seen by the generator path
                        let weighted_g = ctx.tape.scale(vars.adv_g, 0.1);
                        let weighted_dist = ctx.tape.scale(vars.distance, 30.0);
                        ctx.tape.add(weighted_g, weighted_dist)
                    },
                    &z,
                    eps,
                )?
            }
            other => {
                return Err(Error::Contract(format!("unknown gradcheck op `{other}`")));
            }
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Runs the suite over the given ops; returns (op, max relative error) pairs.
pub fn run_suite(ops: &[&str], instances: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    ops.iter()
        .map(|op| check_op(op, instances, GRADCHECK_EPS, seed).map(|e| (op.to_string(), e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_short_suite() {
        for (op, err) in run_suite(ALL_OPS, 5, 11).unwrap() {
            assert!(err < GRADCHECK_TOL, "{op}: max relative error {err}");
        }
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(check_op("transmute", 1, 1e-4, 1).is_err());
    }
}
