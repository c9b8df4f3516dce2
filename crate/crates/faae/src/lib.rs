//! A flipped adversarial autoencoder (f-AAE) toolkit on a self-contained
//! reverse-mode autodiff core, with GAN, AAE and BiGAN baselines.
//!
//! The f-AAE trains a generator G, an encoder E approximating its inverse,
//! and a data-space discriminator D by alternating a re-encoding phase
//! (G and E minimize the latent round-trip error on generated samples) with
//! an adversarial regularization phase (D, then G). Everything is
//! seed-deterministic: one config produces one bit-exact trace and
//! checkpoint.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod ppm;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use eval::{evaluate, generate, morph, morph_grid, reconstruct, MetricReport, MorphWeights};
pub use models::{ArchKind, Mode, ModelSpec, Network};
pub use objectives::{LossNorm, LossReport};
pub use rng::Rng;
pub use tensor::{Tape, Tensor, Var};
pub use trainer::{Objective, TrainConfig, Trainer};
