//! Text configuration files: one `key = value` per line, `#` comments, every
//! key defaulted. Parsing is total — a file either yields a complete
//! [`TrainConfig`] or one error naming the offending line and key.

use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::models::ArchKind;
use crate::objectives::LossNorm;
use crate::trainer::{Objective, TrainConfig};
use std::path::PathBuf;

/// Every recognized key, in canonical serialization order.
pub const CONFIG_KEYS: &[&str] = &[
    "objective",
    "latent_dim",
    "batch_size",
    "epochs",
    "seed",
    "alpha_schedule",
    "weight_adv",
    "lr_g",
    "lr_d",
    "lr_e",
    "decay",
    "encoder_normalize",
    "loss_norm",
    "dataset",
    "dataset_count",
    "dataset_radius",
    "dataset_sigma",
    "dataset_size",
    "dataset_path",
    "arch",
    "channels",
    "hidden",
];

fn bad(line: usize, key: &str, what: &str) -> Error {
    Error::Config(format!("line {line}, key `{key}`: {what}"))
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| bad(line, key, &format!("cannot parse `{v}`")))
}

fn parse_list(line: usize, key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(vec![]);
    }
    v.split(',')
        .map(|p| parse_num::<usize>(line, key, p.trim()))
        .collect()
}

fn parse_schedule(line: usize, key: &str, v: &str) -> Result<Vec<(u64, f64)>> {
    v.split(',')
        .map(|pair| {
            let (e, a) = pair
                .split_once(':')
                .ok_or_else(|| bad(line, key, "expected epoch:alpha pairs"))?;
            Ok((
                parse_num::<u64>(line, key, e.trim())?,
                parse_num::<f64>(line, key, a.trim())?,
            ))
        })
        .collect()
}

/// Parses config text over the defaults; rejects unknown keys.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {lineno}: expected `key = value`")))?;
        let key = key.trim();
        let v = value.trim();
        match key {
            "objective" => {
                cfg.objective = match v {
                    "faae" => Objective::Faae,
                    "aae" => Objective::Aae,
                    "gan" => Objective::Gan,
                    "bigan" => Objective::Bigan,
                    _ => return Err(bad(lineno, key, "expected faae|aae|gan|bigan")),
                }
            }
            "latent_dim" => cfg.latent_dim = parse_num(lineno, key, v)?,
            "batch_size" => cfg.batch_size = parse_num(lineno, key, v)?,
            "epochs" => cfg.epochs = parse_num(lineno, key, v)?,
            "seed" => cfg.seed = parse_num(lineno, key, v)?,
            "alpha_schedule" => cfg.alpha_schedule = parse_schedule(lineno, key, v)?,
            "weight_adv" => cfg.weight_adv = parse_num(lineno, key, v)?,
            "lr_g" => cfg.lr_g = parse_num(lineno, key, v)?,
            "lr_d" => cfg.lr_d = parse_num(lineno, key, v)?,
            "lr_e" => cfg.lr_e = parse_num(lineno, key, v)?,
            "decay" => cfg.decay = parse_num(lineno, key, v)?,
            "encoder_normalize" => {
                cfg.encoder_normalize = match v {
                    "true" => true,
                    "false" => false,
                    _ => return Err(bad(lineno, key, "expected true|false")),
                }
            }
            "loss_norm" => {
                cfg.loss_norm = match v {
                    "l2" => LossNorm::L2,
                    "l2sq" => LossNorm::L2Sq,
                    _ => return Err(bad(lineno, key, "expected l2|l2sq")),
                }
            }
            "dataset" => {
                cfg.dataset.kind = match v {
                    "gauss8" => DatasetKind::Gauss8,
                    "rings2d" => DatasetKind::Rings2d,
                    "sprites" => DatasetKind::Sprites,
                    "image_dir" => DatasetKind::ImageDir,
                    _ => return Err(bad(lineno, key, "expected gauss8|rings2d|sprites|image_dir")),
                }
            }
            "dataset_count" => cfg.dataset.count = parse_num(lineno, key, v)?,
            "dataset_radius" => cfg.dataset.radius = parse_num(lineno, key, v)?,
            "dataset_sigma" => cfg.dataset.sigma = parse_num(lineno, key, v)?,
            "dataset_size" => cfg.dataset.size = parse_num(lineno, key, v)?,
            "dataset_path" => {
                cfg.dataset.path = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
            }
            "arch" => {
                cfg.arch = match v {
                    "mlp" => ArchKind::Mlp,
                    "conv" => ArchKind::Conv,
                    _ => return Err(bad(lineno, key, "expected mlp|conv")),
                }
            }
            "channels" => cfg.channels = parse_list(lineno, key, v)?,
            "hidden" => cfg.hidden = parse_list(lineno, key, v)?,
            _ => return Err(bad(lineno, key, "unknown key")),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fmt_list(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Canonical text form: every key, fixed order, parseable by [`parse_config`].
pub fn config_to_text(cfg: &TrainConfig) -> String {
    let schedule = cfg
        .alpha_schedule
        .iter()
        .map(|(e, a)| format!("{e}:{a}"))
        .collect::<Vec<_>>()
        .join(",");
    let kind = match cfg.dataset.kind {
        DatasetKind::Gauss8 => "gauss8",
        DatasetKind::Rings2d => "rings2d",
        DatasetKind::Sprites => "sprites",
        DatasetKind::ImageDir => "image_dir",
    };
    let arch = match cfg.arch {
        ArchKind::Mlp => "mlp",
        ArchKind::Conv => "conv",
    };
    let loss_norm = match cfg.loss_norm {
        LossNorm::L2 => "l2",
        LossNorm::L2Sq => "l2sq",
    };
    let path = cfg
        .dataset
        .path
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default();
    format!(
        "objective = {}\nlatent_dim = {}\nbatch_size = {}\nepochs = {}\nseed = {}\n\
         alpha_schedule = {}\nweight_adv = {}\nlr_g = {}\nlr_d = {}\nlr_e = {}\ndecay = {}\n\
         encoder_normalize = {}\nloss_norm = {}\ndataset = {}\ndataset_count = {}\n\
         dataset_radius = {}\ndataset_sigma = {}\ndataset_size = {}\ndataset_path = {}\n\
         arch = {}\nchannels = {}\nhidden = {}\n",
        cfg.objective.name(),
        cfg.latent_dim,
        cfg.batch_size,
        cfg.epochs,
        cfg.seed,
        schedule,
        cfg.weight_adv,
        cfg.lr_g,
        cfg.lr_d,
        cfg.lr_e,
        cfg.decay,
        cfg.encoder_normalize,
        loss_norm,
        kind,
        cfg.dataset.count,
        cfg.dataset.radius,
        cfg.dataset.sigma,
        cfg.dataset.size,
        path,
        arch,
        fmt_list(&cfg.channels),
        fmt_list(&cfg.hidden),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = TrainConfig::default();
        cfg.objective = Objective::Bigan;
        cfg.alpha_schedule = vec![(0, 30.0), (200, 100.0)];
        cfg.lr_g = 0.0003;
        cfg.hidden = vec![];
        cfg.channels = vec![32, 64];
        cfg.dataset.kind = DatasetKind::Sprites;
        cfg.dataset.path = Some(PathBuf::from("/tmp/imgs"));
        let parsed = parse_config(&config_to_text(&cfg)).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_key_names_line_and_key() {
        let err = parse_config("seed = 3\nbogus = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = parse_config("# a comment\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn bad_values_are_rejected_with_location() {
        for text in [
            "epochs = many",
            "objective = wgan",
            "alpha_schedule = 0-30",
            "encoder_normalize = yes",
            "no_equals_here",
        ] {
            let err = parse_config(text).unwrap_err();
            assert!(err.to_string().contains("line 1"), "{text}: {err}");
        }
    }

    #[test]
    fn invalid_parsed_config_fails_validation() {
        assert!(parse_config("lr_g = 0").is_err());
        assert!(parse_config("alpha_schedule = 5:30").is_err());
    }
}
