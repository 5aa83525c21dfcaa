//! `key=value` configuration files and command-line overrides.
//!
//! Blank lines and lines starting with `#` are ignored. Unset optional keys
//! are written as `auto`.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::plus::{GateStat, ThresholdRule};
use crate::trainer::TrainConfig;

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

/// Applies a single `key=value` assignment.
pub fn set(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let value = value.trim();
    match key.trim() {
        "method" => cfg.method = value.parse()?,
        "epochs" => cfg.epochs = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "lr" => cfg.lr = parse(key, value)?,
        "weight_decay" => cfg.weight_decay = parse(key, value)?,
        "lr_u" => cfg.lr_u = parse_opt(key, value)?,
        "lr_v" => cfg.lr_v = parse_opt(key, value)?,
        "lr_m" => cfg.lr_m = parse(key, value)?,
        "lr_gamma" => cfg.lr_gamma = parse_opt(key, value)?,
        "beta_init" => cfg.beta_init = parse(key, value)?,
        "ema_window" => cfg.ema_window = parse_opt(key, value)?,
        "warmup" => cfg.warmup = parse_opt(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "hidden" => {
            cfg.hidden = value
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| parse(key, s.trim()))
                .collect::<Result<_>>()?
        }
        "noise_init_scale" => cfg.noise_init_scale = parse(key, value)?,
        "use_collab" => cfg.use_collab = parse(key, value)?,
        "use_confidence" => cfg.use_confidence = parse(key, value)?,
        "force_unit_weights" => cfg.force_unit_weights = parse(key, value)?,
        "selection_threshold" => cfg.selection_threshold = parse(key, value)?,
        "track_selection" => cfg.track_selection = parse(key, value)?,
        "record_trajectory" => cfg.record_trajectory = parse(key, value)?,
        "dump_gradients" => cfg.dump_gradients = parse(key, value)?,
        "alpha_max" => cfg.alpha_max = parse(key, value)?,
        "use_consistency" => cfg.use_consistency = parse(key, value)?,
        "use_mixup" => cfg.use_mixup = parse(key, value)?,
        "use_correction" => cfg.use_correction = parse(key, value)?,
        "mix_alpha" => cfg.mix_alpha = parse(key, value)?,
        "weak_jitter" => cfg.weak_jitter = parse(key, value)?,
        "strong_jitter" => cfg.strong_jitter = parse(key, value)?,
        "mask_prob" => cfg.mask_prob = parse(key, value)?,
        "correction_eps" => cfg.correction_eps = parse(key, value)?,
        "correction_momentum" => cfg.correction_momentum = parse(key, value)?,
        "threshold_rule" => {
            cfg.threshold_rule = match value {
                "cap" => ThresholdRule::Cap,
                "floor" => ThresholdRule::Floor,
                _ => return Err(Error::Config(format!("threshold_rule must be cap or floor, got {value:?}"))),
            }
        }
        "gate_stat" => {
            cfg.gate_stat = match value {
                "max" => GateStat::Max,
                "min" => GateStat::Min,
                _ => return Err(Error::Config(format!("gate_stat must be max or min, got {value:?}"))),
            }
        }
        other => return Err(Error::Config(format!("unknown key {other:?}"))),
    }
    Ok(())
}

/// Applies an override of the form `key=value`.
pub fn apply_override(cfg: &mut TrainConfig, assignment: &str) -> Result<()> {
    let (k, v) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
    set(cfg, k, v)
}

/// Parses a config file on top of the defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        apply_override(&mut cfg, line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
    }
    Ok(cfg)
}

/// Serializes every field; `parse_config(&to_config_string(c)) == c`.
pub fn to_config_string(cfg: &TrainConfig) -> String {
    let hidden: Vec<String> = cfg.hidden.iter().map(usize::to_string).collect();
    let rule = match cfg.threshold_rule {
        ThresholdRule::Cap => "cap",
        ThresholdRule::Floor => "floor",
    };
    let gate = match cfg.gate_stat {
        GateStat::Max => "max",
        GateStat::Min => "min",
    };
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k}={v}");
    };
    kv("method", cfg.method.to_string());
    kv("epochs", cfg.epochs.to_string());
    kv("batch_size", cfg.batch_size.to_string());
    kv("lr", cfg.lr.to_string());
    kv("weight_decay", cfg.weight_decay.to_string());
    kv("lr_u", opt(&cfg.lr_u));
    kv("lr_v", opt(&cfg.lr_v));
    kv("lr_m", cfg.lr_m.to_string());
    kv("lr_gamma", opt(&cfg.lr_gamma));
    kv("beta_init", cfg.beta_init.to_string());
    kv("ema_window", opt(&cfg.ema_window));
    kv("warmup", opt(&cfg.warmup));
    kv("seed", cfg.seed.to_string());
    kv("hidden", hidden.join(","));
    kv("noise_init_scale", cfg.noise_init_scale.to_string());
    kv("use_collab", cfg.use_collab.to_string());
    kv("use_confidence", cfg.use_confidence.to_string());
    kv("force_unit_weights", cfg.force_unit_weights.to_string());
    kv("selection_threshold", cfg.selection_threshold.to_string());
    kv("track_selection", cfg.track_selection.to_string());
    kv("record_trajectory", cfg.record_trajectory.to_string());
    kv("dump_gradients", cfg.dump_gradients.to_string());
    kv("alpha_max", cfg.alpha_max.to_string());
    kv("use_consistency", cfg.use_consistency.to_string());
    kv("use_mixup", cfg.use_mixup.to_string());
    kv("use_correction", cfg.use_correction.to_string());
    kv("mix_alpha", cfg.mix_alpha.to_string());
    kv("weak_jitter", cfg.weak_jitter.to_string());
    kv("strong_jitter", cfg.strong_jitter.to_string());
    kv("mask_prob", cfg.mask_prob.to_string());
    kv("correction_eps", cfg.correction_eps.to_string());
    kv("correction_momentum", cfg.correction_momentum.to_string());
    kv("threshold_rule", rule.to_string());
    kv("gate_stat", gate.to_string());
    s
}

impl FromStr for TrainConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_config(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Method;

    #[test]
    fn round_trip() {
        let mut cfg = TrainConfig {
            method: Method::CsrPlus,
            lr_u: Some(0.3),
            warmup: Some(4),
            hidden: vec![8, 16, 4],
            threshold_rule: ThresholdRule::Floor,
            gate_stat: GateStat::Min,
            ..TrainConfig::default()
        };
        cfg.lr = 0.1 + 0.2;
        assert_eq!(parse_config(&to_config_string(&cfg)).unwrap(), cfg);
        let d = TrainConfig::default();
        assert_eq!(parse_config(&to_config_string(&d)).unwrap(), d);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = parse_config("# note\n\nepochs=5\nmethod=sop\n").unwrap();
        assert_eq!((cfg.epochs, cfg.method), (5, Method::Sop));
        assert!(matches!(parse_config("epochs=5\nbogus=1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(parse_config("lr=abc").is_err());
        assert!(parse_config("method=foo").is_err());
        let mut c = TrainConfig::default();
        assert!(apply_override(&mut c, "no-equals").is_err());
        apply_override(&mut c, "lr_v=auto").unwrap();
        assert_eq!(c.lr_v, None);
    }
}
