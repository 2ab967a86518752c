//! Training configuration, presets and layered loading.
//!
//! Configs are TOML with strictly known keys (a typo in a key is an error,
//! not a silently ignored setting). A config is assembled in three layers:
//! preset defaults, then an optional file, then `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GadError, Result};
use crate::networks::ArchitectureSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Adam,
    Rmsprop,
}

/// Per-stage optimization plan. The style table gets its own learning rate;
/// every network in the stage shares `lr_others`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub lr_style: f64,
    pub lr_others: f64,
    pub optimizer: OptimKind,
    pub batch_size: usize,
    pub iterations: u64,
}

/// Which classifier stage 1 trains adversarially: the convolutional network
/// on generated images, or the ablation's MLP on sampled content codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Classifier {
    Conv,
    MlpCode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub arch: ArchitectureSpec,
    pub lambda_c1: f64,
    pub lambda_e_kl: f64,
    pub lambda_s_kl: f64,
    pub lambda_d: f64,
    pub lambda_c2: f64,
    pub lambda_cont: f64,
    pub stage1: StagePlan,
    pub c2_pretrain: StagePlan,
    pub stage2: StagePlan,
    pub seed: u64,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    pub stage1_classifier: Stage1Classifier,
    /// When false, stage 2 trains C2 on real samples only (no fake-sample
    /// unlikelihood term).
    pub c2_adversarial: bool,
}

impl TrainingConfig {
    /// Full-scale preset: the published weighting and training table.
    pub fn paper() -> Self {
        TrainingConfig {
            arch: ArchitectureSpec::paper(),
            lambda_c1: 0.2,
            lambda_e_kl: 1e-4,
            lambda_s_kl: 2e-5,
            lambda_d: 1.0,
            lambda_c2: 1.0,
            lambda_cont: 0.05,
            stage1: StagePlan {
                lr_style: 0.005,
                lr_others: 5e-5,
                optimizer: OptimKind::Adam,
                batch_size: 8,
                iterations: 400_000,
            },
            c2_pretrain: StagePlan {
                lr_style: 0.0,
                lr_others: 1e-4,
                optimizer: OptimKind::Adam,
                batch_size: 16,
                iterations: 200_000,
            },
            stage2: StagePlan {
                lr_style: 0.01,
                lr_others: 2e-5,
                optimizer: OptimKind::Rmsprop,
                batch_size: 8,
                iterations: 400_000,
            },
            seed: 1,
            log_interval: 100,
            checkpoint_interval: 10_000,
            stage1_classifier: Stage1Classifier::Conv,
            c2_adversarial: true,
        }
    }

    /// Desk-scale preset: 32x32 synthetic data with ten styles, iteration
    /// counts sized for a workstation. Loss weights are unchanged from the
    /// full-scale preset.
    pub fn desk() -> Self {
        let mut cfg = Self::paper();
        cfg.arch = ArchitectureSpec::desk(10);
        cfg.stage1.batch_size = 16;
        cfg.stage1.iterations = 20_000;
        cfg.c2_pretrain.iterations = 4_000;
        cfg.stage2.batch_size = 16;
        cfg.stage2.iterations = 20_000;
        cfg.checkpoint_interval = 2_000;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(GadError::Config(format!(
                "unknown preset `{other}` (available: desk, paper)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        for (name, v) in [
            ("lambda_c1", self.lambda_c1),
            ("lambda_e_kl", self.lambda_e_kl),
            ("lambda_s_kl", self.lambda_s_kl),
            ("lambda_d", self.lambda_d),
            ("lambda_c2", self.lambda_c2),
            ("lambda_cont", self.lambda_cont),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(GadError::Config(format!("{name} must be a nonnegative real, got {v}")));
            }
        }
        for (name, plan) in [
            ("stage1", &self.stage1),
            ("c2_pretrain", &self.c2_pretrain),
            ("stage2", &self.stage2),
        ] {
            if plan.batch_size == 0 || plan.iterations == 0 {
                return Err(GadError::Config(format!("{name}: batch_size and iterations must be positive")));
            }
        }
        if self.log_interval == 0 || self.checkpoint_interval == 0 {
            return Err(GadError::Config("log/checkpoint intervals must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Assemble a config from preset, optional file, and `key=value` overrides
/// (applied in that order). Unknown keys anywhere are errors.
pub fn load_config(
    preset: &str,
    file: Option<&Path>,
    overrides: &[String],
) -> Result<TrainingConfig> {
    let base = TrainingConfig::preset(preset)?;
    let mut value: toml::Value =
        toml::Value::try_from(&base).map_err(|e| GadError::Config(e.to_string()))?;

    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| GadError::io(path, e))?;
        let file_value: toml::Value = text
            .parse()
            .map_err(|e| GadError::Config(format!("{}: {e}", path.display())))?;
        merge_toml(&mut value, &file_value);
    }

    for ov in overrides {
        let (key, raw) = ov.split_once('=').ok_or_else(|| {
            GadError::Config(format!("override `{ov}` is not of the form key=value"))
        })?;
        apply_override(&mut value, key.trim(), raw.trim())?;
    }

    let cfg: TrainingConfig = value
        .try_into()
        .map_err(|e| GadError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge_toml(base: &mut toml::Value, overlay: &toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        // unknown key: keep it so deserialization reports it
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn apply_override(value: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parsed: toml::Value = parse_scalar(raw);
    let mut slot = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = slot
            .as_table_mut()
            .ok_or_else(|| GadError::Config(format!("override key `{key}` does not name a setting")))?;
        if i + 1 == parts.len() {
            // inserting a brand-new key is allowed here; deserialization
            // rejects it with the key name if it is not a real setting
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        slot = table
            .get_mut(*part)
            .ok_or_else(|| GadError::Config(format!("override key `{key}`: unknown section `{part}`")))?;
    }
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    // list syntax for stage_channels overrides: "32,64,128"
    if raw.contains(',') {
        if let Ok(ints) = raw
            .split(',')
            .map(|s| s.trim().parse::<i64>())
            .collect::<std::result::Result<Vec<_>, _>>()
        {
            return toml::Value::Array(ints.into_iter().map(toml::Value::Integer).collect());
        }
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The published hyperparameter table, asserted verbatim.
    #[test]
    fn paper_preset_matches_published_table() {
        let cfg = TrainingConfig::paper();
        assert_eq!(cfg.lambda_c1, 0.2);
        assert_eq!(cfg.lambda_e_kl, 1e-4);
        assert_eq!(cfg.lambda_s_kl, 2e-5);
        assert_eq!(cfg.lambda_d, 1.0);
        assert_eq!(cfg.lambda_c2, 1.0);
        assert_eq!(cfg.lambda_cont, 0.05);

        assert_eq!(cfg.stage1.lr_style, 0.005);
        assert_eq!(cfg.stage1.lr_others, 5e-5);
        assert_eq!(cfg.stage1.optimizer, OptimKind::Adam);
        assert_eq!(cfg.stage1.batch_size, 8);
        assert_eq!(cfg.stage1.iterations, 400_000);

        assert_eq!(cfg.c2_pretrain.lr_others, 1e-4);
        assert_eq!(cfg.c2_pretrain.optimizer, OptimKind::Adam);
        assert_eq!(cfg.c2_pretrain.batch_size, 16);
        assert_eq!(cfg.c2_pretrain.iterations, 200_000);

        assert_eq!(cfg.stage2.lr_style, 0.01);
        assert_eq!(cfg.stage2.lr_others, 2e-5);
        assert_eq!(cfg.stage2.optimizer, OptimKind::Rmsprop);
        assert_eq!(cfg.stage2.batch_size, 8);
        assert_eq!(cfg.stage2.iterations, 400_000);

        assert_eq!(cfg.arch.n_artists, 1139);
        assert_eq!(cfg.arch.content_dim + cfg.arch.style_dim, 512);
    }

    #[test]
    fn layered_loading_and_overrides() {
        let dir = tempfile::tempdir().unwrap();

        // empty file + desk preset = desk defaults
        let empty = dir.path().join("empty.toml");
        std::fs::write(&empty, "").unwrap();
        let cfg = load_config("desk", Some(&empty), &[]).unwrap();
        assert_eq!(cfg, TrainingConfig::desk());

        // file values override the preset
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "seed = 9\n[stage1]\niterations = 50\n").unwrap();
        let cfg = load_config("desk", Some(&f), &[]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.stage1.iterations, 50);
        assert_eq!(cfg.stage1.batch_size, 16);

        // overrides land last
        let cfg = load_config("desk", Some(&f), &["lambda_cont=0".into()]).unwrap();
        assert_eq!(cfg.lambda_cont, 0.0);
        let cfg = load_config("desk", None, &["lambda_c1=0".into()]).unwrap();
        assert_eq!(cfg.lambda_c1, 0.0);
        let cfg = load_config("desk", None, &["stage1_classifier=mlp_code".into()]).unwrap();
        assert_eq!(cfg.stage1_classifier, Stage1Classifier::MlpCode);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("typo.toml");
        std::fs::write(&f, "lambda_connt = 0.1\n").unwrap();
        let err = load_config("desk", Some(&f), &[]).unwrap_err();
        assert!(err.to_string().contains("lambda_connt"), "{err}");

        let err = load_config("desk", None, &["stage1.iterationz=5".into()]).unwrap_err();
        assert!(err.to_string().contains("iterationz"), "{err}");

        let err = load_config("desk", None, &["nonsense.key=1".into()]).unwrap_err();
        assert!(err.to_string().contains("nonsense"), "{err}");
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TrainingConfig::desk();
        let text = cfg.to_toml();
        let back: TrainingConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
