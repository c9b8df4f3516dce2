//! Command-line front end: training, reconstruction, generation, morphing,
//! metrics, and the gradient verification suite.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/IO error, 3 numerical
//! failure.

use clap::{Parser, Subcommand};
use faae::checkpoint::Checkpoint;
use faae::config::parse_config;
use faae::data::load_image_dir;
use faae::error::Error;
use faae::eval::{evaluate, generate, morph_grid, reconstruct};
use faae::gradcheck::{run_suite, ALL_OPS, GRADCHECK_TOL};
use faae::ppm::{read_ppm, write_panel, write_ppm, Image};
use faae::rng::Rng;
use faae::tensor::Tensor;
use faae::trainer::{trace_to_csv, Trainer};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "faae", version, about = "flipped adversarial autoencoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a config file; writes metrics.csv and model.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Reconstruct every PPM image in a directory through E then G.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, name = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample images (or CSV rows for 2D models) from the generator.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bilinear latent morph between four corner images, written as a panel.
    Morph {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 4)]
        corners: Vec<PathBuf>,
        #[arg(long)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics sweep over the configured (or overridden) dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient verification per op kind.
    Gradcheck {
        /// Comma-separated list; default checks every op.
        #[arg(long)]
        ops: Option<String>,
    },
}

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Io(_) | Error::Checkpoint(_) | Error::Dimension(_) | Error::Domain(_)
        | Error::Contract(_) => 2,
        Error::Numerical(_) | Error::Degenerate(_) => 3,
    }
}

fn tensor_images(t: &Tensor<f32>, sample_shape: &[usize]) -> Result<Vec<Image>, Error> {
    if sample_shape.len() != 3 || sample_shape[0] != 3 {
        return Err(Error::Contract(format!(
            "expected [3, h, w] image samples, model produces {sample_shape:?}"
        )));
    }
    let (h, w) = (sample_shape[1], sample_shape[2]);
    let per = 3 * h * w;
    let count = t.data.len() / per;
    (0..count)
        .map(|i| {
            let chw: Vec<f64> = t.data[i * per..(i + 1) * per]
                .iter()
                .map(|v| (*v as f64).clamp(0.0, 1.0))
                .collect();
            Image::from_chw(3, h, w, &chw)
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Cmd::Train { config, out } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| Error::Io(format!("reading {}: {e}", config.display())))?;
            let cfg = parse_config(&text)?;
            let mut trainer = Trainer::new(cfg)?;
            let trace = trainer.run()?;
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::Io(format!("creating {}: {e}", out.display())))?;
            let csv = trace_to_csv(&trace);
            std::fs::write(out.join("metrics.csv"), csv)
                .map_err(|e| Error::Io(format!("writing metrics.csv: {e}")))?;
            Checkpoint::from_trainer(&trainer).save(&out.join("model.ckpt"))?;
            if let Some(last) = trace.last() {
                eprintln!(
                    "trained {} steps; final adv_d {:.4} adv_g {:.4} distance {:.6}",
                    trace.len(),
                    last.report.adv_d,
                    last.report.adv_g,
                    last.report.recon_or_reenc
                );
            }
            Ok(())
        }
        Cmd::Reconstruct { ckpt, input, out } => {
            let mut ck = Checkpoint::load(&ckpt)?;
            let ds = load_image_dir(&input, Some(&ck.g.output_shape))?;
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::Io(format!("creating {}: {e}", out.display())))?;
            let indices: Vec<usize> = (0..ds.len()).collect();
            let flat = ds.gather(&indices);
            let mut shape = vec![ds.len()];
            shape.extend_from_slice(&ds.sample_shape);
            let xt = Tensor::from_f64(shape, &flat)?;
            let x_hat = reconstruct(&mut ck.e, &mut ck.g, &xt)?;
            for (i, im) in tensor_images(&x_hat, &ds.sample_shape)?.iter().enumerate() {
                write_ppm(&out.join(format!("recon_{i:04}.ppm")), im)?;
            }
            Ok(())
        }
        Cmd::Generate { ckpt, count, out } => {
            let mut ck = Checkpoint::load(&ckpt)?;
            let mut rng = Rng::new(ck.cfg.seed).derive("generate");
            let samples = generate(&mut ck.g, count, &mut rng)?;
            if ck.g.output_shape.len() == 3 && ck.g.output_shape[0] == 3 {
                std::fs::create_dir_all(&out)
                    .map_err(|e| Error::Io(format!("creating {}: {e}", out.display())))?;
                let images = tensor_images(&samples, &ck.g.output_shape)?;
                for (i, im) in images.iter().enumerate() {
                    write_ppm(&out.join(format!("gen_{i:04}.ppm")), im)?;
                }
                if !images.is_empty() {
                    let cols = (images.len() as f64).sqrt().ceil() as usize;
                    let rows = images.len().div_ceil(cols);
                    write_panel(&out.join("panel.ppm"), &images, rows, cols, 2)?;
                }
            } else {
                let dim: usize = ck.g.output_shape.iter().product();
                let mut csv = String::new();
                for row in samples.data.chunks(dim) {
                    let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                    csv.push_str(&line.join(","));
                    csv.push('\n');
                }
                if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent)
                        .map_err(|e| Error::Io(format!("creating {}: {e}", parent.display())))?;
                }
                std::fs::write(&out, csv)
                    .map_err(|e| Error::Io(format!("writing {}: {e}", out.display())))?;
            }
            Ok(())
        }
        Cmd::Morph { ckpt, corners, grid, out } => {
            if grid < 2 {
                return Err(Error::Config(format!("--grid must be >= 2, got {grid}")));
            }
            if corners.len() != 4 {
                return Err(Error::Config(format!(
                    "--corners needs exactly 4 images, got {}",
                    corners.len()
                )));
            }
            let mut ck = Checkpoint::load(&ckpt)?;
            let shape = ck.g.output_shape.clone();
            if shape.len() != 3 || shape[0] != 3 {
                return Err(Error::Contract(format!(
                    "morph needs an image model, generator produces {shape:?}"
                )));
            }
            let (h, w) = (shape[1], shape[2]);
            let mut flat = Vec::with_capacity(4 * 3 * h * w);
            for p in &corners {
                let im = read_ppm(p)?;
                if im.height != h || im.width != w {
                    return Err(Error::Dimension(format!(
                        "{}: {}x{} does not match model {}x{}",
                        p.display(),
                        im.height,
                        im.width,
                        h,
                        w
                    )));
                }
                flat.extend(im.to_chw());
            }
            let xt = Tensor::from_f64(vec![4, 3, h, w], &flat)?;
            let cells = morph_grid(&mut ck.e, &mut ck.g, &xt, grid)?;
            let images = tensor_images(&cells, &shape)?;
            write_panel(&out, &images, grid, grid, 2)?;
            Ok(())
        }
        Cmd::Eval { ckpt, dataset, out } => {
            let mut ck = Checkpoint::load(&ckpt)?;
            if let Some(kind) = dataset {
                ck.cfg.dataset.kind = match kind.as_str() {
                    "gauss8" => faae::data::DatasetKind::Gauss8,
                    "rings2d" => faae::data::DatasetKind::Rings2d,
                    "sprites" => faae::data::DatasetKind::Sprites,
                    "image_dir" => faae::data::DatasetKind::ImageDir,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown dataset `{other}`, expected gauss8|rings2d|sprites|image_dir"
                        )))
                    }
                };
            }
            let ds = ck.cfg.build_dataset()?;
            let mut rng = Rng::new(ck.cfg.seed).derive("eval");
            let count = ds.len().min(1000);
            let report = evaluate(
                &mut ck.e,
                &mut ck.g,
                Some(&mut ck.d),
                &ds,
                count,
                &mut rng,
            )?;
            let csv = format!(
                "{}\n{}\n",
                faae::eval::MetricReport::CSV_HEADER,
                report.to_csv()
            );
            std::fs::write(&out, csv)
                .map_err(|e| Error::Io(format!("writing {}: {e}", out.display())))?;
            println!("{report:?}");
            Ok(())
        }
        Cmd::Gradcheck { ops } => {
            let requested: Vec<String> = match &ops {
                Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
                None => ALL_OPS.iter().map(|s| s.to_string()).collect(),
            };
            for op in &requested {
                if !ALL_OPS.contains(&op.as_str()) {
                    return Err(Error::Config(format!(
                        "unknown op `{op}`; available: {}",
                        ALL_OPS.join(",")
                    )));
                }
            }
            let refs: Vec<&str> = requested.iter().map(|s| s.as_str()).collect();
            let results = run_suite(&refs, 100, 2024)?;
            let mut worst_name = String::new();
            let mut worst = 0.0f64;
            for (op, err) in &results {
                println!("{op}: max relative error {err:.3e}");
                if *err > worst {
                    worst = *err;
                    worst_name = op.clone();
                }
            }
            if worst >= GRADCHECK_TOL {
                return Err(Error::Numerical(format!(
                    "gradient check failed: {worst_name} max relative error {worst:.3e}"
                )));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, everything else is usage
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_for(&err))
        }
    }
}
