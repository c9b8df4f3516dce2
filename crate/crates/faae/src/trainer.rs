//! Seed-deterministic training loops: the two-phase flipped-AAE schedule and
//! the GAN / AAE / BiGAN baselines, all driven by Adam with inverse-time
//! learning-rate decay.
//!
//! Every step builds fresh tapes per phase, so which parameters receive
//! gradients is decided purely by which updates are applied: the re-encoding
//! phase touches generator and encoder, the regularization phase first the
//! discriminator, then the generator with the discriminator frozen.

use crate::data::{
    epoch_batches, load_image_dir, make_gauss8, make_rings2d, make_sprites, sample_latent_batch,
    Dataset, DatasetKind,
};
use crate::error::{Error, Result};
use crate::models::{
    build_discriminator, build_encoder, build_flat_discriminator, build_generator, ArchKind, Mode,
    ModelSpec, Network,
};
use crate::objectives::{
    gan_value, reconstruction_loss, reencoding_loss, LossNorm, LossReport, LOG_CLAMP,
};
use crate::optim::{adam_update, decayed_lr, AdamState};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Faae,
    Aae,
    Gan,
    Bigan,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Faae => "faae",
            Objective::Aae => "aae",
            Objective::Gan => "gan",
            Objective::Bigan => "bigan",
        }
    }
}

/// Which dataset the run trains on and how to synthesize or load it.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub count: usize,
    pub radius: f64,
    pub sigma: f64,
    pub size: usize,
    pub path: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::Gauss8,
            count: 4096,
            radius: 2.0,
            sigma: 0.1,
            size: 16,
            path: None,
        }
    }
}

/// All hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub latent_dim: usize,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    /// (start_epoch, alpha) pairs; strictly increasing epochs, first at 0.
    pub alpha_schedule: Vec<(u64, f64)>,
    pub weight_adv: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_e: f64,
    pub decay: f64,
    pub encoder_normalize: bool,
    pub loss_norm: LossNorm,
    pub dataset: DatasetSpec,
    pub arch: ArchKind,
    pub channels: Vec<usize>,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Faae,
            latent_dim: 2,
            batch_size: 64,
            epochs: 50,
            seed: 1,
            alpha_schedule: vec![(0, 100.0)],
            weight_adv: 0.1,
            lr_g: 3e-4,
            lr_d: 1e-3,
            lr_e: 3e-4,
            decay: 1e-4,
            encoder_normalize: true,
            loss_norm: LossNorm::L2Sq,
            dataset: DatasetSpec::default(),
            arch: ArchKind::Mlp,
            channels: vec![16, 32],
            hidden: vec![128, 128],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_g <= 0.0 || self.lr_d <= 0.0 || self.lr_e <= 0.0 {
            return Err(Error::Config("all learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.alpha_schedule.is_empty() || self.alpha_schedule[0].0 != 0 {
            return Err(Error::Config(
                "alpha_schedule must start at epoch 0".into(),
            ));
        }
        for w in self.alpha_schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config(
                    "alpha_schedule epochs must be strictly increasing".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn alpha_at(&self, epoch: u64) -> f64 {
        self.alpha_schedule
            .iter()
            .take_while(|(e, _)| *e <= epoch)
            .last()
            .map(|&(_, a)| a)
            .unwrap_or(0.0)
    }

    pub fn model_spec(&self, data_shape: &[usize]) -> ModelSpec {
        ModelSpec {
            latent_dim: self.latent_dim,
            data_shape: data_shape.to_vec(),
            channels: self.channels.clone(),
            hidden: self.hidden.clone(),
            arch: self.arch,
            encoder_normalize: self.encoder_normalize,
        }
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        let mut rng = Rng::new(self.seed).derive("data");
        match self.dataset.kind {
            DatasetKind::Gauss8 => {
                make_gauss8(self.dataset.count, self.dataset.radius, self.dataset.sigma, &mut rng)
            }
            DatasetKind::Rings2d => {
                make_rings2d(self.dataset.count, self.dataset.radius, self.dataset.sigma, &mut rng)
            }
            DatasetKind::Sprites => make_sprites(self.dataset.count, self.dataset.size, &mut rng),
            DatasetKind::ImageDir => {
                let path = self.dataset.path.as_ref().ok_or_else(|| {
                    Error::Config("image_dir dataset needs a path".into())
                })?;
                load_image_dir(path, None)
            }
        }
    }
}

/// One CSV metrics row.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub step: u64,
    pub epoch: u64,
    pub report: LossReport,
    pub lr_g_t: f64,
    pub lr_d_t: f64,
}

impl TraceRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.report.adv_d,
            self.report.adv_g,
            self.report.recon_or_reenc,
            self.report.alpha,
            self.lr_g_t,
            self.lr_d_t
        )
    }

    pub const CSV_HEADER: &'static str = "step,epoch,adv_d,adv_g,distance,alpha,lr_g_t,lr_d_t";
}

/// Live training state: the three networks, their optimizer states, and the
/// run stream.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub dataset: Dataset,
    pub g: Network<f32>,
    pub e: Network<f32>,
    pub d: Network<f32>,
    pub st_g: AdamState<f32>,
    pub st_e: AdamState<f32>,
    pub st_d: AdamState<f32>,
    pub rng: Rng,
    pub step: u64,
    pub alpha: f64,
}

fn flat_hidden(cfg: &TrainConfig) -> Vec<usize> {
    if cfg.hidden.is_empty() { vec![64, 64] } else { cfg.hidden.clone() }
}

/// Builds the generator/encoder/discriminator triple for a config and data
/// shape, each from its own derived parameter stream.
pub fn build_networks(
    cfg: &TrainConfig,
    data_shape: &[usize],
) -> Result<(Network<f32>, Network<f32>, Network<f32>)> {
    let spec = cfg.model_spec(data_shape);
    spec.validate()?;
    let base = Rng::new(cfg.seed);
    let g: Network<f32> = build_generator(&spec, &mut base.derive("G"))?;
    let e: Network<f32> = build_encoder(&spec, &mut base.derive("E"))?;
    let data_dim: usize = data_shape.iter().product();
    let d: Network<f32> = match cfg.objective {
        Objective::Faae | Objective::Gan => build_discriminator(&spec, &mut base.derive("D"))?,
        Objective::Aae => build_flat_discriminator(
            "D",
            cfg.latent_dim,
            &flat_hidden(cfg),
            &mut base.derive("D"),
        )?,
        Objective::Bigan => build_flat_discriminator(
            "D",
            data_dim + cfg.latent_dim,
            &flat_hidden(cfg),
            &mut base.derive("D"),
        )?,
    };
    Ok((g, e, d))
}

impl Trainer {
    /// Builds networks and optimizer states from the config seed. Fails on
    /// any dataset/model mismatch before a step runs.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = cfg.build_dataset()?;
        let (g, e, d) = build_networks(&cfg, &dataset.sample_shape)?;
        let st_g = AdamState::for_params(&g.param_tensors());
        let st_e = AdamState::for_params(&e.param_tensors());
        let st_d = AdamState::for_params(&d.param_tensors());
        let alpha = cfg.alpha_at(0);
        let cfg_seed = cfg.seed;
        Ok(Trainer {
            cfg,
            dataset,
            g,
            e,
            d,
            st_g,
            st_e,
            st_d,
            rng: Rng::new(cfg_seed).derive("train"),
            step: 0,
            alpha,
        })
    }

    fn lr_g_t(&self) -> f64 {
        decayed_lr(self.cfg.lr_g, self.cfg.decay, self.step)
    }

    fn lr_e_t(&self) -> f64 {
        decayed_lr(self.cfg.lr_e, self.cfg.decay, self.step)
    }

    fn lr_d_t(&self) -> f64 {
        decayed_lr(self.cfg.lr_d, self.cfg.decay, self.step)
    }

    fn batch_tensors(&self, x: &[f64], z: &[f64], batch: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut x_shape = vec![batch];
        x_shape.extend_from_slice(&self.dataset.sample_shape);
        let xt = Tensor::from_f64(x_shape, x)?;
        let zt = Tensor::from_f64(vec![batch, self.cfg.latent_dim], z)?;
        Ok((xt, zt))
    }

    /// Flipped-AAE step: re-encoding phase (theta, phi on alpha * reenc),
    /// then regularization (w on -adv_d, then theta on weight_adv * adv_g).
    pub fn faae_step(&mut self, x: &[f64], z: &[f64], batch: usize) -> Result<LossReport> {
        let (xt, zt) = self.batch_tensors(x, z, batch)?;
        let phase = |e: Result<LossReport>, name: &str, step: u64| {
            e.map_err(|err| {
                Error::Numerical(format!("step {step}, {name} phase: {err}"))
            })
        };

        // (1) re-encoding phase; with alpha = 0 it is a true no-op on
        // parameters and optimizer state, so the remaining schedule matches
        // a pure-GAN step bit for bit — the loss is still reported
        let reenc = if self.alpha == 0.0 {
            let mut tape: Tape<f32> = Tape::new();
            let zv = tape.leaf(&zt);
            let g_bind = self.g.bind(&mut tape);
            let e_bind = self.e.bind(&mut tape);
            let x_hat = self.g.forward(&mut tape, &g_bind, zv, Mode::Eval)?;
            let z_hat = self.e.forward(&mut tape, &e_bind, x_hat, Mode::Eval)?;
            let dist = reencoding_loss(&mut tape, zv, z_hat, self.cfg.loss_norm)?;
            tape.value(dist)[0] as f64
        } else {
            let mut tape: Tape<f32> = Tape::new();
            let zv = tape.leaf(&zt);
            let g_bind = self.g.bind(&mut tape);
            let e_bind = self.e.bind(&mut tape);
            let x_hat = self.g.forward(&mut tape, &g_bind, zv, Mode::Train)?;
            let z_hat = self.e.forward(&mut tape, &e_bind, x_hat, Mode::Train)?;
            let dist = reencoding_loss(&mut tape, zv, z_hat, self.cfg.loss_norm)?;
            let loss = tape.scale(dist, self.alpha);
            tape.backward(loss)?;
            let val = tape.value(dist)[0] as f64;
            let gg = g_bind.grads(&tape);
            let ge = e_bind.grads(&tape);
            let lr_g = self.lr_g_t();
            let lr_e = self.lr_e_t();
            let names_g = self.g.param_names();
            adam_update(&mut self.g.param_tensors_mut(), &gg, &names_g, &mut self.st_g, lr_g)?;
            let names_e = self.e.param_names();
            adam_update(&mut self.e.param_tensors_mut(), &ge, &names_e, &mut self.st_e, lr_e)?;
            val
        };
        if !reenc.is_finite() {
            return phase(
                Err(Error::Numerical(format!("re-encoding loss {reenc}"))),
                "re-encoding",
                self.step,
            );
        }

        // (2) regularization phase
        let (adv_d, adv_g) = self.adversarial_updates(&xt, &zt)?;
        let report = LossReport {
            adv_d,
            adv_g,
            recon_or_reenc: reenc,
            total_weighted: self.cfg.weight_adv * adv_g + self.alpha * reenc,
            alpha: self.alpha,
        };
        if !report.all_finite() {
            return phase(
                Err(Error::Numerical("non-finite loss".into())),
                "regularization",
                self.step,
            );
        }
        Ok(report)
    }

    /// D update on -adv_d, then G update on weight_adv * adv_g; fresh
    /// forward passes each, matching the listing order of the schedule.
    fn adversarial_updates(&mut self, xt: &Tensor<f32>, zt: &Tensor<f32>) -> Result<(f64, f64)> {
        // D sub-step
        let adv_d = {
            let mut tape: Tape<f32> = Tape::new();
            let xv = tape.leaf(xt);
            let zv = tape.leaf(zt);
            let g_bind = self.g.bind(&mut tape);
            let d_bind = self.d.bind(&mut tape);
            let x_hat = self.g.forward(&mut tape, &g_bind, zv, Mode::Train)?;
            let d_real = self.d.forward(&mut tape, &d_bind, xv, Mode::Train)?;
            let d_fake = self.d.forward(&mut tape, &d_bind, x_hat, Mode::Train)?;
            let (adv_d, _) = gan_value(&mut tape, d_real, d_fake)?;
            let loss = tape.neg(adv_d);
            tape.backward(loss)?;
            let gd = d_bind.grads(&tape);
            let lr = self.lr_d_t();
            let names = self.d.param_names();
            adam_update(&mut self.d.param_tensors_mut(), &gd, &names, &mut self.st_d, lr)?;
            tape.value(adv_d)[0] as f64
        };
        // G sub-step, discriminator frozen
        let adv_g = {
            let mut tape: Tape<f32> = Tape::new();
            let zv = tape.leaf(zt);
            let g_bind = self.g.bind(&mut tape);
            let d_bind = self.d.bind(&mut tape);
            let x_hat = self.g.forward(&mut tape, &g_bind, zv, Mode::Train)?;
            let d_fake = self.d.forward(&mut tape, &d_bind, x_hat, Mode::Train)?;
            let log_fake = tape.log_clamped(d_fake, LOG_CLAMP);
            let mean = tape.mean_all(log_fake)?;
            let adv_g = tape.neg(mean);
            let loss = tape.scale(adv_g, self.cfg.weight_adv);
            tape.backward(loss)?;
            let gg = g_bind.grads(&tape);
            let lr = self.lr_g_t();
            let names = self.g.param_names();
            adam_update(&mut self.g.param_tensors_mut(), &gg, &names, &mut self.st_g, lr)?;
            tape.value(adv_g)[0] as f64
        };
        Ok((adv_d, adv_g))
    }

    /// Pure-GAN step: the regularization phase alone.
    pub fn gan_step(&mut self, x: &[f64], z: &[f64], batch: usize) -> Result<LossReport> {
        let (xt, zt) = self.batch_tensors(x, z, batch)?;
        let (adv_d, adv_g) = self.adversarial_updates(&xt, &zt)?;
        Ok(LossReport {
            adv_d,
            adv_g,
            recon_or_reenc: 0.0,
            total_weighted: self.cfg.weight_adv * adv_g,
            alpha: self.alpha,
        })
    }

    /// AAE baseline step under the same three-application harness:
    /// reconstruction phase (theta, phi), then latent-D update, then the
    /// encoder's adversarial update.
    pub fn aae_step(&mut self, x: &[f64], z: &[f64], batch: usize) -> Result<LossReport> {
        let (xt, zt) = self.batch_tensors(x, z, batch)?;
        // (1) reconstruction phase
        let recon = {
            let mut tape: Tape<f32> = Tape::new();
            let xv = tape.leaf(&xt);
            let g_bind = self.g.bind(&mut tape);
            let e_bind = self.e.bind(&mut tape);
            let z_hat = self.e.forward(&mut tape, &e_bind, xv, Mode::Train)?;
            let x_hat = self.g.forward(&mut tape, &g_bind, z_hat, Mode::Train)?;
            let dist = reconstruction_loss(&mut tape, xv, x_hat)?;
            let loss = tape.scale(dist, self.alpha);
            tape.backward(loss)?;
            let gg = g_bind.grads(&tape);
            let ge = e_bind.grads(&tape);
            let lr_g = self.lr_g_t();
            let lr_e = self.lr_e_t();
            let names_g = self.g.param_names();
            adam_update(&mut self.g.param_tensors_mut(), &gg, &names_g, &mut self.st_g, lr_g)?;
            let names_e = self.e.param_names();
            adam_update(&mut self.e.param_tensors_mut(), &ge, &names_e, &mut self.st_e, lr_e)?;
            tape.value(dist)[0] as f64
        };
        // (2a) latent discriminator update
        let adv_d = {
            let mut tape: Tape<f32> = Tape::new();
            let xv = tape.leaf(&xt);
            let zv = tape.leaf(&zt);
            let e_bind = self.e.bind(&mut tape);
            let d_bind = self.d.bind(&mut tape);
            let z_hat = self.e.forward(&mut tape, &e_bind, xv, Mode::Train)?;
            let d_prior = self.d.forward(&mut tape, &d_bind, zv, Mode::Train)?;
            let d_post = self.d.forward(&mut tape, &d_bind, z_hat, Mode::Train)?;
            let (adv_d, _) = gan_value(&mut tape, d_prior, d_post)?;
            let loss = tape.neg(adv_d);
            tape.backward(loss)?;
            let gd = d_bind.grads(&tape);
            let lr = self.lr_d_t();
            let names = self.d.param_names();
            adam_update(&mut self.d.param_tensors_mut(), &gd, &names, &mut self.st_d, lr)?;
            tape.value(adv_d)[0] as f64
        };
        // (2b) encoder confuses the latent discriminator
        let adv_g = {
            let mut tape: Tape<f32> = Tape::new();
            let xv = tape.leaf(&xt);
            let e_bind = self.e.bind(&mut tape);
            let d_bind = self.d.bind(&mut tape);
            let z_hat = self.e.forward(&mut tape, &e_bind, xv, Mode::Train)?;
            let d_post = self.d.forward(&mut tape, &d_bind, z_hat, Mode::Train)?;
            let log_post = tape.log_clamped(d_post, LOG_CLAMP);
            let mean = tape.mean_all(log_post)?;
            let adv_g = tape.neg(mean);
            let loss = tape.scale(adv_g, self.cfg.weight_adv);
            tape.backward(loss)?;
            let ge = e_bind.grads(&tape);
            let lr = self.lr_e_t();
            let names = self.e.param_names();
            adam_update(&mut self.e.param_tensors_mut(), &ge, &names, &mut self.st_e, lr)?;
            tape.value(adv_g)[0] as f64
        };
        let report = LossReport {
            adv_d,
            adv_g,
            recon_or_reenc: recon,
            total_weighted: self.cfg.weight_adv * adv_g + self.alpha * recon,
            alpha: self.alpha,
        };
        if !report.all_finite() {
            return Err(Error::Numerical(format!("step {}: non-finite AAE loss", self.step)));
        }
        Ok(report)
    }

    /// BiGAN baseline step: joint-discriminator update, then the combined
    /// generator/encoder non-saturating update; re-encoding is reported as a
    /// gradient-free diagnostic.
    pub fn bigan_step(&mut self, x: &[f64], z: &[f64], batch: usize) -> Result<LossReport> {
        let (xt, zt) = self.batch_tensors(x, z, batch)?;
        let joint = |tape: &mut Tape<f32>,
                     g: &mut Network<f32>,
                     e: &mut Network<f32>,
                     d: &mut Network<f32>,
                     binds: (&crate::models::Binding, &crate::models::Binding, &crate::models::Binding),
                     xt: &Tensor<f32>,
                     zt: &Tensor<f32>| -> Result<(crate::tensor::Var, crate::tensor::Var)> {
            let (g_bind, e_bind, d_bind) = binds;
            let xv = tape.leaf(xt);
            let zv = tape.leaf(zt);
            let z_hat = e.forward(tape, e_bind, xv, Mode::Train)?;
            let x_hat = g.forward(tape, g_bind, zv, Mode::Train)?;
            let xs = tape.shape(xv).to_vec();
            let flat: usize = xs[1..].iter().product();
            let x_flat = tape.reshape(xv, &[xs[0], flat])?;
            let x_hat_flat = tape.reshape(x_hat, &[xs[0], flat])?;
            let real_pair = tape.concat_cols(x_flat, z_hat)?;
            let fake_pair = tape.concat_cols(x_hat_flat, zv)?;
            let d_real = d.forward(tape, d_bind, real_pair, Mode::Train)?;
            let d_fake = d.forward(tape, d_bind, fake_pair, Mode::Train)?;
            Ok((d_real, d_fake))
        };

        // (a) discriminator update
        let adv_d = {
            let mut tape: Tape<f32> = Tape::new();
            let g_bind = self.g.bind(&mut tape);
            let e_bind = self.e.bind(&mut tape);
            let d_bind = self.d.bind(&mut tape);
            let (d_real, d_fake) = joint(
                &mut tape,
                &mut self.g,
                &mut self.e,
                &mut self.d,
                (&g_bind, &e_bind, &d_bind),
                &xt,
                &zt,
            )?;
            let (adv_d, _) = gan_value(&mut tape, d_real, d_fake)?;
            let loss = tape.neg(adv_d);
            tape.backward(loss)?;
            let gd = d_bind.grads(&tape);
            let lr = self.lr_d_t();
            let names = self.d.param_names();
            adam_update(&mut self.d.param_tensors_mut(), &gd, &names, &mut self.st_d, lr)?;
            tape.value(adv_d)[0] as f64
        };
        // (b) generator + encoder non-saturating update
        let adv_g = {
            let mut tape: Tape<f32> = Tape::new();
            let g_bind = self.g.bind(&mut tape);
            let e_bind = self.e.bind(&mut tape);
            let d_bind = self.d.bind(&mut tape);
            let (d_real, d_fake) = joint(
                &mut tape,
                &mut self.g,
                &mut self.e,
                &mut self.d,
                (&g_bind, &e_bind, &d_bind),
                &xt,
                &zt,
            )?;
            let log_fake = tape.log_clamped(d_fake, LOG_CLAMP);
            let mean_fake = tape.mean_all(log_fake)?;
            let gen_loss = tape.neg(mean_fake);
            let onev = tape.leaf(&Tensor::scalar(1.0f32));
            let om = tape.sub(onev, d_real)?;
            let log_om = tape.log_clamped(om, LOG_CLAMP);
            let mean_om = tape.mean_all(log_om)?;
            let enc_loss = tape.neg(mean_om);
            let adv_g = tape.add(gen_loss, enc_loss)?;
            let loss = tape.scale(adv_g, self.cfg.weight_adv);
            tape.backward(loss)?;
            let gg = g_bind.grads(&tape);
            let ge = e_bind.grads(&tape);
            let lr_g = self.lr_g_t();
            let lr_e = self.lr_e_t();
            let names_g = self.g.param_names();
            adam_update(&mut self.g.param_tensors_mut(), &gg, &names_g, &mut self.st_g, lr_g)?;
            let names_e = self.e.param_names();
            adam_update(&mut self.e.param_tensors_mut(), &ge, &names_e, &mut self.st_e, lr_e)?;
            tape.value(adv_g)[0] as f64
        };
        // diagnostic re-encoding, no gradients involved
        let reenc = {
            let mut tape: Tape<f32> = Tape::new();
            let zt2 = zt.clone();
            let zv = tape.leaf(&zt2);
            let g_bind = self.g.bind(&mut tape);
            let e_bind = self.e.bind(&mut tape);
            let x_hat = self.g.forward(&mut tape, &g_bind, zv, Mode::Eval)?;
            let z_hat = self.e.forward(&mut tape, &e_bind, x_hat, Mode::Eval)?;
            let dist = reencoding_loss(&mut tape, zv, z_hat, self.cfg.loss_norm)?;
            tape.value(dist)[0] as f64
        };
        let report = LossReport {
            adv_d,
            adv_g,
            recon_or_reenc: reenc,
            total_weighted: self.cfg.weight_adv * adv_g,
            alpha: self.alpha,
        };
        if !report.all_finite() {
            return Err(Error::Numerical(format!("step {}: non-finite BiGAN loss", self.step)));
        }
        Ok(report)
    }

    /// Dispatches one step of the configured objective.
    pub fn objective_step(&mut self, x: &[f64], z: &[f64], batch: usize) -> Result<LossReport> {
        match self.cfg.objective {
            Objective::Faae => self.faae_step(x, z, batch),
            Objective::Gan => self.gan_step(x, z, batch),
            Objective::Aae => self.aae_step(x, z, batch),
            Objective::Bigan => self.bigan_step(x, z, batch),
        }
    }

    /// Runs the full epoch schedule, returning the per-step metrics trace.
    pub fn run(&mut self) -> Result<Vec<TraceRow>> {
        let mut trace = Vec::new();
        for epoch in 0..self.cfg.epochs {
            self.alpha = self.cfg.alpha_at(epoch);
            let batches = epoch_batches(self.dataset.len(), self.cfg.batch_size, &mut self.rng);
            for indices in batches {
                let x = self.dataset.gather(&indices);
                let z = sample_latent_batch(indices.len(), self.cfg.latent_dim, &mut self.rng)?;
                let lr_g_t = self.lr_g_t();
                let lr_d_t = self.lr_d_t();
                let report = self.objective_step(&x, &z, indices.len())?;
                trace.push(TraceRow { step: self.step, epoch, report, lr_g_t, lr_d_t });
                self.step += 1;
            }
        }
        Ok(trace)
    }
}

/// Formats a full metrics CSV, header included.
pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from(TraceRow::CSV_HEADER);
    out.push('\n');
    for row in trace {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    out
}
