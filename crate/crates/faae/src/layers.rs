//! Layer specifications and their forward behavior on a tape.
//!
//! A [`LayerSpec`] is pure configuration; output shape is a function of the
//! input shape alone ([`LayerSpec::output_shape`]) and is checked at network
//! build time. Parameterized layers carry their tensors in [`super::models::Layer`].

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Fully connected: [batch, in] -> [batch, units].
    Dense { units: usize },
    /// Same-padded square convolution.
    Conv2d { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Upsample2d { factor: usize },
    MaxPool2d { window: usize, stride: usize },
    BatchNorm { momentum: f64, epsilon: f64 },
    LeakyRelu { slope: f64 },
    Sigmoid,
    Flatten,
    Reshape { shape: Vec<usize> },
    /// Projects each row onto the unit sphere (encoder output).
    NormalizeRows,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv2d { kernel, stride, .. } => {
                if *kernel < 1 || *stride < 1 {
                    return Err(Error::Contract(format!(
                        "conv2d kernel and stride must be >= 1, got {kernel}/{stride}"
                    )));
                }
            }
            LayerSpec::Upsample2d { factor } => {
                if *factor < 1 {
                    return Err(Error::Contract("upsample factor must be >= 1".into()));
                }
            }
            LayerSpec::MaxPool2d { window, stride } => {
                if *window < 1 || *stride < 1 {
                    return Err(Error::Contract("maxpool window and stride must be >= 1".into()));
                }
            }
            LayerSpec::BatchNorm { momentum, epsilon } => {
                if !(0.0..=1.0).contains(momentum) || *epsilon <= 0.0 {
                    return Err(Error::Contract(format!(
                        "batchnorm needs 0 <= momentum <= 1 and epsilon > 0, got {momentum}/{epsilon}"
                    )));
                }
            }
            LayerSpec::LeakyRelu { slope } => {
                if !(0.0..1.0).contains(slope) {
                    return Err(Error::Contract(format!(
                        "leaky_relu slope must be in [0, 1), got {slope}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Output shape (without the batch dimension) for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Dense { units } => {
                if input.len() != 1 {
                    return Err(Error::Dimension(format!(
                        "dense expects a flat input, got {input:?}"
                    )));
                }
                Ok(vec![*units])
            }
            LayerSpec::Conv2d { out_channels, kernel, stride, padding } => {
                if input.len() != 3 {
                    return Err(Error::Dimension(format!(
                        "conv2d expects [c, h, w], got {input:?}"
                    )));
                }
                let (h, w) = (input[1], input[2]);
                if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return Err(Error::Dimension(format!(
                        "conv2d kernel {kernel} larger than padded input {h}x{w} (+{padding})"
                    )));
                }
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                Ok(vec![*out_channels, oh, ow])
            }
            LayerSpec::Upsample2d { factor } => {
                if input.len() != 3 {
                    return Err(Error::Dimension(format!(
                        "upsample2d expects [c, h, w], got {input:?}"
                    )));
                }
                Ok(vec![input[0], input[1] * factor, input[2] * factor])
            }
            LayerSpec::MaxPool2d { window, stride } => {
                if input.len() != 3 {
                    return Err(Error::Dimension(format!(
                        "maxpool2d expects [c, h, w], got {input:?}"
                    )));
                }
                let (h, w) = (input[1], input[2]);
                if *window > h || *window > w {
                    return Err(Error::Dimension(format!(
                        "maxpool window {window} exceeds input {h}x{w}"
                    )));
                }
                Ok(vec![input[0], (h - window) / stride + 1, (w - window) / stride + 1])
            }
            LayerSpec::BatchNorm { .. }
            | LayerSpec::LeakyRelu { .. }
            | LayerSpec::Sigmoid
            | LayerSpec::NormalizeRows => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Reshape { shape } => {
                let have: usize = input.iter().product();
                let want: usize = shape.iter().product();
                if have != want {
                    return Err(Error::Dimension(format!(
                        "reshape {input:?} -> {shape:?}: element counts differ"
                    )));
                }
                Ok(shape.clone())
            }
        }
    }

    /// Number of channels batchnorm-style layers normalize over, given the
    /// layer input shape (without batch).
    pub fn channels(input: &[usize]) -> usize {
        input[0]
    }
}

/// Running statistics for one batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum,
            epsilon,
        }
    }

    /// new = momentum * old + (1 - momentum) * batch
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = T::fromf(self.momentum);
        let om = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = m * *r + om * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = m * *r + om * b;
        }
    }

    /// Frozen affine coefficients for eval mode: y = scale * x + shift.
    pub fn affine(&self, gamma: &[T], beta: &[T]) -> (Vec<T>, Vec<T>) {
        let eps = T::fromf(self.epsilon);
        let mut scale = Vec::with_capacity(gamma.len());
        let mut shift = Vec::with_capacity(gamma.len());
        for c in 0..gamma.len() {
            let s = gamma[c] / (self.var[c] + eps).sqrt();
            scale.push(s);
            shift.push(beta[c] - self.mean[c] * s);
        }
        (scale, shift)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape, Tensor};
    use crate::rng::Rng;

    #[test]
    fn output_shape_matches_forward() {
        // dense
        assert_eq!(LayerSpec::Dense { units: 5 }.output_shape(&[3]).unwrap(), vec![5]);
        // conv same padding keeps spatial size
        let conv = LayerSpec::Conv2d { out_channels: 4, kernel: 3, stride: 1, padding: 1 };
        assert_eq!(conv.output_shape(&[2, 8, 8]).unwrap(), vec![4, 8, 8]);
        // pool halves
        let pool = LayerSpec::MaxPool2d { window: 2, stride: 2 };
        assert_eq!(pool.output_shape(&[4, 8, 8]).unwrap(), vec![4, 4, 4]);
        // upsample doubles
        let up = LayerSpec::Upsample2d { factor: 2 };
        assert_eq!(up.output_shape(&[4, 4, 4]).unwrap(), vec![4, 8, 8]);
        assert_eq!(LayerSpec::Flatten.output_shape(&[4, 8, 8]).unwrap(), vec![256]);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(LayerSpec::LeakyRelu { slope: 1.0 }.validate().is_err());
        assert!(LayerSpec::BatchNorm { momentum: 1.5, epsilon: 1e-5 }.validate().is_err());
        assert!(LayerSpec::Upsample2d { factor: 0 }.validate().is_err());
        let conv = LayerSpec::Conv2d { out_channels: 1, kernel: 9, stride: 1, padding: 0 };
        assert!(conv.output_shape(&[1, 4, 4]).is_err());
    }

    #[test]
    fn dense_forward_examples() {
        let mut tape: Tape<f64> = Tape::new();
        // W = I, b = 0 -> identity
        let x = tape.leaf(&Tensor::from_f64(vec![1, 2], &[0.3, -0.7]).unwrap());
        let w = tape.leaf(&Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(&Tensor::zeros(&[2]));
        let xw = tape.matmul(x, w).unwrap();
        let y = tape.add_row(xw, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        // x=[[1,1]], W=[[1],[1]], b=[1] -> [[3]]
        let x2 = tape.leaf(&Tensor::from_f64(vec![1, 2], &[1.0, 1.0]).unwrap());
        let w2 = tape.leaf(&Tensor::from_f64(vec![2, 1], &[1.0, 1.0]).unwrap());
        let b2 = tape.leaf(&Tensor::from_f64(vec![1], &[1.0]).unwrap());
        let xw2 = tape.matmul(x2, w2).unwrap();
        let y2 = tape.add_row(xw2, b2).unwrap();
        assert_eq!(tape.value(y2), &[3.0]);

        // empty batch passes through
        let x0 = tape.leaf(&Tensor::zeros(&[0, 2]));
        let xw0 = tape.matmul(x0, w).unwrap();
        let y0 = tape.add_row(xw0, b).unwrap();
        assert_eq!(tape.shape(y0), &[0, 2]);
    }

    #[test]
    fn leaky_relu_and_sigmoid_pointwise() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&Tensor::from_f64(vec![4], &[1.0, -1.0, 0.0, 40.0]).unwrap());
        let lr = tape.leaky_relu(x, 0.2);
        let got = tape.value(lr);
        assert_eq!(got[0], 1.0);
        assert!((got[1] + 0.2).abs() < 1e-12);
        assert_eq!(got[2], 0.0);
        let sg = tape.sigmoid(x);
        let s = tape.value(sg);
        assert!((s[2] - 0.5).abs() < 1e-12);
        assert!((s[3] - 1.0).abs() < 1e-12 && s[3] <= 1.0);
        // high-precision oracle for sigmoid(1)
        assert!((s[0] - 0.731_058_578_63).abs() < 1e-10);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(4);
        let data: Vec<f64> = (0..24).map(|_| rng.normal() * 3.0 + 1.0).collect();
        let x = tape.leaf(&Tensor::from_f64(vec![8, 3], &data).unwrap());
        let gamma = tape.leaf(&Tensor::full(&[3], 1.0f64));
        let beta = tape.leaf(&Tensor::zeros(&[3]));
        let (y, _, _) = tape.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..8).map(|r| tape.value(y)[r * 3 + c]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 8.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9, "{mean}");
            assert!((var - 1.0).abs() < 1e-3, "{var}");
        }
    }

    #[test]
    fn batchnorm_gamma_zero_gives_beta() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&Tensor::from_f64(vec![4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
        let gamma = tape.leaf(&Tensor::zeros(&[2]));
        let beta = tape.leaf(&Tensor::from_f64(vec![2], &[0.25, -0.5]).unwrap());
        let (y, _, _) = tape.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
        for r in 0..4 {
            assert_eq!(tape.value(y)[r * 2], 0.25);
            assert_eq!(tape.value(y)[r * 2 + 1], -0.5);
        }
    }

    #[test]
    fn batchnorm_rejects_batch_of_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_f64(vec![1, 2], &[1.0, 2.0]).unwrap());
        let gamma = tape.leaf(&Tensor::full(&[2], 1.0f64));
        let beta = tape.leaf(&Tensor::zeros(&[2]));
        assert!(matches!(
            tape.batchnorm_train(x, gamma, beta, 1e-5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn batchnorm_eval_is_affine() {
        let mut stats: RunningStats<f64> = RunningStats::new(2, 0.99, 1e-5);
        stats.mean = vec![1.0, -1.0];
        stats.var = vec![4.0, 0.25];
        let (scale, shift) = stats.affine(&[2.0, 1.0], &[0.0, 3.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_f64(vec![2, 2], &[1.0, -1.0, 3.0, 0.0]).unwrap());
        let y = tape.channel_affine(x, &scale, &shift).unwrap();
        let v = tape.value(y);
        // (1-1)/2*2+0=0, (-1+1)/0.5*1+3=3
        assert!((v[0] - 0.0).abs() < 1e-4);
        assert!((v[1] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn pooling_shift_invariance() {
        let data = [0.3, 1.7, -0.2, 0.9, 2.2, -1.0, 0.0, 0.5, 1.1];
        let pool = |d: &[f64]| {
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.leaf(&Tensor::from_f64(vec![1, 1, 3, 3], d).unwrap());
            let y = tape.maxpool2d(x, 2, 1).unwrap();
            tape.value(y).to_vec()
        };
        let base = pool(&data);
        let shifted: Vec<f64> = data.iter().map(|v| v + 5.0).collect();
        let moved = pool(&shifted);
        for (a, b) in base.iter().zip(&moved) {
            assert!((a + 5.0 - b).abs() < 1e-12);
        }
        // constant input -> constant output
        let c = pool(&[2.0; 9]);
        assert!(c.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn upsample_mean_preserved() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&Tensor::from_f64(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let up = tape.upsample2d(x, 2).unwrap();
        let mu = tape.mean_all(up).unwrap();
        assert!((tape.value(mu)[0] - 2.5).abs() < 1e-12);
        // factor 1 is identity
        let id = tape.upsample2d(x, 1).unwrap();
        assert_eq!(tape.value(id), tape.value(x));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&Tensor::from_f64(vec![1, 1, 2, 2], &[0.1, 0.2, 0.3, 0.4]).unwrap());
        let k = tape.leaf(&Tensor::from_f64(vec![1, 1, 1, 1], &[1.0]).unwrap());
        let b = tape.leaf(&Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn layer_gradients_pass_grad_check() {
        let mut rng = Rng::new(21);
        // conv2d w.r.t. input
        let x: Vec<f64> = (0..2 * 2 * 4 * 4).map(|_| rng.normal()).collect();
        let kdat: Vec<f64> = (0..3 * 2 * 3 * 3).map(|_| rng.normal()).collect();
        let kt = Tensor::from_f64(vec![3, 2, 3, 3], &kdat).unwrap();
        let xt = Tensor::from_f64(vec![2, 2, 4, 4], &x).unwrap();
        let err = grad_check(
            |t, xv| {
                let k = t.leaf(&kt);
                let b = t.leaf(&Tensor::full(&[3], 0.1f64));
                let y = t.conv2d(xv, k, b, 1, 1)?;
                let s = t.sigmoid(y);
                t.mean_all(s)
            },
            &xt,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "conv grad {err}");

        // batchnorm w.r.t. input
        let bx: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let bxt = Tensor::from_f64(vec![4, 3], &bx).unwrap();
        let err = grad_check(
            |t, xv| {
                let gamma = t.leaf(&Tensor::from_f64(vec![3], &[1.2, 0.7, -0.4]).unwrap());
                let beta = t.leaf(&Tensor::from_f64(vec![3], &[0.1, -0.2, 0.3]).unwrap());
                let (y, _, _) = t.batchnorm_train(xv, gamma, beta, 1e-5)?;
                let s = t.sigmoid(y);
                t.mean_all(s)
            },
            &bxt,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "batchnorm grad {err}");
    }
}
