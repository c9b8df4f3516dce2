//! Network construction: the generator, encoder and discriminator builders,
//! in convolutional form for image data and MLP form for 2-D data.
//!
//! Generator and encoder from one [`ModelSpec`] are mirrors: the encoder's
//! input shape equals the generator's output shape and both share the latent
//! dimension ([`mirror_check`]). Weights are Glorot-uniform from the provided
//! stream, so (spec, seed) determines parameters bit-exactly.

use crate::error::{Error, Result};
use crate::layers::{LayerSpec, RunningStats, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM, DEFAULT_LEAKY_SLOPE};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Conv,
    Mlp,
}

/// Shared shape configuration for one G/E/D triple.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub latent_dim: usize,
    /// [c, h, w] for conv, [d] for mlp.
    pub data_shape: Vec<usize>,
    /// Encoder channel widths per stage (conv kind).
    pub channels: Vec<usize>,
    /// Hidden layer widths (mlp kind).
    pub hidden: Vec<usize>,
    pub arch: ArchKind,
    /// Project encoder output onto the unit sphere.
    pub encoder_normalize: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        match self.arch {
            ArchKind::Mlp => {
                if self.data_shape.len() != 1 {
                    return Err(Error::Config(format!(
                        "mlp arch needs a flat data shape, got {:?}",
                        self.data_shape
                    )));
                }
            }
            ArchKind::Conv => {
                if self.data_shape.len() != 3 {
                    return Err(Error::Config(format!(
                        "conv arch needs [c, h, w] data, got {:?}",
                        self.data_shape
                    )));
                }
                if self.channels.is_empty() {
                    return Err(Error::Config("conv arch needs at least one stage".into()));
                }
                self.seed_spatial()?;
            }
        }
        Ok(())
    }

    /// Spatial size the generator starts from; the data size must be
    /// reachable by doubling once per stage.
    pub fn seed_spatial(&self) -> Result<(usize, usize)> {
        let (h, w) = (self.data_shape[1], self.data_shape[2]);
        let div = 1usize << self.channels.len();
        if h % div != 0 || w % div != 0 || h / div == 0 || w / div == 0 {
            return Err(Error::Config(format!(
                "data size {h}x{w} not reachable by doubling {} times from a positive seed size",
                self.channels.len()
            )));
        }
        Ok((h / div, w / div))
    }
}

/// One instantiated layer: its spec, parameter tensors and, for batchnorm,
/// running statistics.
#[derive(Debug, Clone)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    /// (name, tensor) pairs; order is fixed at build time.
    pub params: Vec<(String, Tensor<T>)>,
    pub stats: Option<RunningStats<T>>,
}

/// An ordered layer composition with named parameters.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub name: String,
    pub layers: Vec<Layer<T>>,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

/// Tape handles for one network's parameters, created once per tape.
pub struct Binding {
    vars: Vec<Vec<Var>>,
}

fn glorot<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::fromf(rng.uniform_in(-limit, limit)))
        .collect();
    Tensor { shape: shape.to_vec(), data }
}

impl<T: Scalar> Network<T> {
    /// Instantiates a layer stack, checking shape flow and allocating
    /// parameters from the stream.
    pub fn build(
        name: &str,
        input_shape: Vec<usize>,
        specs: Vec<LayerSpec>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut shape = input_shape.clone();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            spec.validate()?;
            let out = spec.output_shape(&shape)?;
            let mut params = Vec::new();
            let mut stats = None;
            match &spec {
                LayerSpec::Dense { units } => {
                    let fan_in = shape[0];
                    params.push((
                        format!("{name}.l{i}.W"),
                        glorot(&[fan_in, *units], fan_in, *units, rng),
                    ));
                    params.push((format!("{name}.l{i}.b"), Tensor::zeros(&[*units])));
                }
                LayerSpec::Conv2d { out_channels, kernel, .. } => {
                    let cin = shape[0];
                    let fan_in = cin * kernel * kernel;
                    let fan_out = out_channels * kernel * kernel;
                    params.push((
                        format!("{name}.l{i}.K"),
                        glorot(&[*out_channels, cin, *kernel, *kernel], fan_in, fan_out, rng),
                    ));
                    params.push((format!("{name}.l{i}.b"), Tensor::zeros(&[*out_channels])));
                }
                LayerSpec::BatchNorm { momentum, epsilon } => {
                    let c = shape[0];
                    params.push((format!("{name}.l{i}.gamma"), Tensor::full(&[c], T::one())));
                    params.push((format!("{name}.l{i}.beta"), Tensor::zeros(&[c])));
                    stats = Some(RunningStats::new(c, *momentum, *epsilon));
                }
                _ => {}
            }
            layers.push(Layer { spec, params, stats });
            shape = out;
        }
        let net = Network {
            name: name.to_string(),
            layers,
            input_shape,
            output_shape: shape,
        };
        net.check_unique_names()?;
        Ok(net)
    }

    fn check_unique_names(&self) -> Result<()> {
        let mut names: Vec<&str> = self
            .layers
            .iter()
            .flat_map(|l| l.params.iter().map(|(n, _)| n.as_str()))
            .collect();
        let before = names.len();
        names.sort_unstable();
        names.dedup();
        if names.len() != before {
            return Err(Error::Contract(format!(
                "duplicate parameter names in network {}",
                self.name
            )));
        }
        Ok(())
    }

    /// Registers all parameters as tape leaves. One binding per tape.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        let vars = self
            .layers
            .iter()
            .map(|l| l.params.iter().map(|(_, t)| tape.leaf(t)).collect())
            .collect();
        Binding { vars }
    }

    /// Runs the layer stack on `x` ([batch, ...input_shape]). Train mode
    /// updates batchnorm running statistics as a side effect.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        binding: &Binding,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let got = tape.shape(x).to_vec();
        if got.len() != self.input_shape.len() + 1 || got[1..] != self.input_shape[..] {
            return Err(Error::Dimension(format!(
                "network {}: input {got:?} does not match expected [batch]+{:?}",
                self.name, self.input_shape
            )));
        }
        let batch = got[0];
        let mut h = x;
        for (layer, vars) in self.layers.iter_mut().zip(&binding.vars) {
            h = match &layer.spec {
                LayerSpec::Dense { .. } => {
                    let y = tape.matmul(h, vars[0])?;
                    tape.add_row(y, vars[1])?
                }
                LayerSpec::Conv2d { stride, padding, .. } => {
                    tape.conv2d(h, vars[0], vars[1], *stride, *padding)?
                }
                LayerSpec::Upsample2d { factor } => tape.upsample2d(h, *factor)?,
                LayerSpec::MaxPool2d { window, stride } => tape.maxpool2d(h, *window, *stride)?,
                LayerSpec::BatchNorm { epsilon, .. } => {
                    let stats = layer.stats.as_mut().expect("batchnorm stats");
                    match mode {
                        Mode::Train => {
                            let (y, mean, var) =
                                tape.batchnorm_train(h, vars[0], vars[1], *epsilon)?;
                            stats.update(&mean, &var);
                            y
                        }
                        Mode::Eval => {
                            let gamma = &layer.params[0].1.data;
                            let beta = &layer.params[1].1.data;
                            let (scale, shift) = stats.affine(gamma, beta);
                            tape.channel_affine(h, &scale, &shift)?
                        }
                    }
                }
                LayerSpec::LeakyRelu { slope } => tape.leaky_relu(h, *slope),
                LayerSpec::Sigmoid => tape.sigmoid(h),
                LayerSpec::Flatten => {
                    let numel: usize = tape.shape(h)[1..].iter().product();
                    tape.reshape(h, &[batch, numel])?
                }
                LayerSpec::Reshape { shape } => {
                    let mut s = vec![batch];
                    s.extend_from_slice(shape);
                    tape.reshape(h, &s)?
                }
                LayerSpec::NormalizeRows => tape.normalize_rows(h)?,
            };
        }
        Ok(h)
    }

    /// Flat views of all parameters, in build order.
    pub fn param_tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params.iter().map(|(_, t)| t)).collect()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut().map(|(_, t)| t))
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().map(|(n, _)| n.clone()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.numel()).sum()
    }

    /// Byte-comparable snapshot of all parameter data.
    pub fn param_snapshot(&self) -> Vec<Vec<T>> {
        self.param_tensors().iter().map(|t| t.data.clone()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            name: self.name.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    params: l.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
                    stats: l.stats.as_ref().map(|s| RunningStats {
                        mean: s.mean.iter().map(|&v| U::fromf(v.tof())).collect(),
                        var: s.var.iter().map(|&v| U::fromf(v.tof())).collect(),
                        momentum: s.momentum,
                        epsilon: s.epsilon,
                    }),
                })
                .collect(),
            input_shape: self.input_shape.clone(),
            output_shape: self.output_shape.clone(),
        }
    }
}

impl Binding {
    /// Gradients for every parameter, aligned with `param_tensors` order.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .flat_map(|layer| layer.iter().map(|&v| tape.grad(v).to_vec()))
            .collect()
    }
}

fn lrelu() -> LayerSpec {
    LayerSpec::LeakyRelu { slope: DEFAULT_LEAKY_SLOPE }
}

fn bn() -> LayerSpec {
    LayerSpec::BatchNorm { momentum: DEFAULT_BN_MOMENTUM, epsilon: DEFAULT_BN_EPS }
}

/// Latent code to data sample. Conv kind: dense projection, reshape, then
/// upsample/conv stages ending in a sigmoid image. Mlp kind: dense stack
/// with a linear output for 2-D data.
pub fn build_generator<T: Scalar>(spec: &ModelSpec, rng: &mut Rng) -> Result<Network<T>> {
    spec.validate()?;
    let n = spec.latent_dim;
    match spec.arch {
        ArchKind::Mlp => {
            let mut specs = Vec::new();
            for &hdim in &spec.hidden {
                specs.push(LayerSpec::Dense { units: hdim });
                specs.push(lrelu());
            }
            specs.push(LayerSpec::Dense { units: spec.data_shape[0] });
            Network::build("G", vec![n], specs, rng)
        }
        ArchKind::Conv => {
            let (s0h, s0w) = spec.seed_spatial()?;
            let stages = spec.channels.len();
            let c_seed = *spec.channels.last().unwrap();
            let c_data = spec.data_shape[0];
            let mut specs = vec![
                LayerSpec::Dense { units: c_seed * s0h * s0w },
                LayerSpec::Reshape { shape: vec![c_seed, s0h, s0w] },
            ];
            for j in 0..stages {
                let out_ch = spec.channels[stages.saturating_sub(2 + j).min(stages - 1)];
                specs.push(LayerSpec::Upsample2d { factor: 2 });
                specs.push(LayerSpec::Conv2d {
                    out_channels: out_ch,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                });
                specs.push(bn());
                specs.push(lrelu());
            }
            specs.push(LayerSpec::Conv2d { out_channels: c_data, kernel: 3, stride: 1, padding: 1 });
            specs.push(LayerSpec::Sigmoid);
            Network::build("G", vec![n], specs, rng)
        }
    }
}

/// Mirror of the generator: conv/pool stages down to a dense latent head,
/// optionally projected onto the unit sphere.
pub fn build_encoder<T: Scalar>(spec: &ModelSpec, rng: &mut Rng) -> Result<Network<T>> {
    spec.validate()?;
    let n = spec.latent_dim;
    let mut specs = Vec::new();
    match spec.arch {
        ArchKind::Mlp => {
            for &hdim in spec.hidden.iter().rev() {
                specs.push(LayerSpec::Dense { units: hdim });
                specs.push(lrelu());
            }
            specs.push(LayerSpec::Dense { units: n });
            if spec.encoder_normalize {
                specs.push(LayerSpec::NormalizeRows);
            }
            Network::build("E", spec.data_shape.clone(), specs, rng)
        }
        ArchKind::Conv => {
            for &c in &spec.channels {
                specs.push(LayerSpec::Conv2d { out_channels: c, kernel: 3, stride: 1, padding: 1 });
                specs.push(bn());
                specs.push(lrelu());
                specs.push(LayerSpec::MaxPool2d { window: 2, stride: 2 });
            }
            specs.push(LayerSpec::Flatten);
            specs.push(LayerSpec::Dense { units: n });
            if spec.encoder_normalize {
                specs.push(LayerSpec::NormalizeRows);
            }
            Network::build("E", spec.data_shape.clone(), specs, rng)
        }
    }
}

/// Scores how real a data sample is; one sigmoid scalar per sample.
pub fn build_discriminator<T: Scalar>(spec: &ModelSpec, rng: &mut Rng) -> Result<Network<T>> {
    spec.validate()?;
    let mut specs = Vec::new();
    match spec.arch {
        ArchKind::Mlp => {
            for &hdim in &spec.hidden {
                specs.push(LayerSpec::Dense { units: hdim });
                specs.push(lrelu());
            }
        }
        ArchKind::Conv => {
            for &c in &spec.channels {
                specs.push(LayerSpec::Conv2d { out_channels: c, kernel: 3, stride: 1, padding: 1 });
                specs.push(lrelu());
                specs.push(LayerSpec::MaxPool2d { window: 2, stride: 2 });
            }
            specs.push(LayerSpec::Flatten);
        }
        }
    specs.push(LayerSpec::Dense { units: 1 });
    specs.push(LayerSpec::Sigmoid);
    Network::build("D", spec.data_shape.clone(), specs, rng)
}

/// Discriminator over flat inputs of the given width: the latent-space D of
/// the AAE baseline (width n) and the joint D of BiGAN (width n + d).
pub fn build_flat_discriminator<T: Scalar>(
    name: &str,
    input_dim: usize,
    hidden: &[usize],
    rng: &mut Rng,
) -> Result<Network<T>> {
    let mut specs = Vec::new();
    for &hdim in hidden {
        specs.push(LayerSpec::Dense { units: hdim });
        specs.push(lrelu());
    }
    specs.push(LayerSpec::Dense { units: 1 });
    specs.push(LayerSpec::Sigmoid);
    Network::build(name, vec![input_dim], specs, rng)
}

/// True iff the encoder consumes exactly what the generator produces and
/// returns codes of the generator's latent dimension.
pub fn mirror_check<T: Scalar>(g: &Network<T>, e: &Network<T>) -> bool {
    e.input_shape == g.output_shape && e.output_shape == g.input_shape
}
