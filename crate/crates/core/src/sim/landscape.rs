//! Synthetic reward landscapes over a four-dimensional feature space.
//!
//! Features, each nominally in [0, 1]:
//!
//! | index | name        | mapping                                          |
//! |-------|-------------|--------------------------------------------------|
//! | 0     | `lr`        | `(log10(learning_rate) + 6) / 3`                 |
//! | 1     | `epochs`    | `(epochs - 1) / 4`                               |
//! | 2     | `data_frac` | `extra.train_samples / max_train_samples`        |
//! | 3     | `mix_ratio` | `extra.mix_ratio`                                |
//!
//! Missing `train_samples` or `mix_ratio` read as 0.5. The score is the sum of
//! the radial basis bumps (each weighted by its height), minus `penalty` times the total distance by which
//! the features leave the unit box, plus the plan strategy's bonus, clamped to
//! [0, 1].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{StrategyKind, TrainingConfig};

pub const DIMS: usize = 4;
pub const FEATURE_NAMES: [&str; DIMS] = ["lr", "epochs", "data_frac", "mix_ratio"];
const DEFAULT_FEATURE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("cannot read landscape {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("landscape does not parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid landscape: {0}")]
    Invalid(String),
}

pub type Features = [f64; DIMS];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub height: f64,
    pub center: Features,
    /// Standard deviation of the Gaussian kernel, in feature units.
    pub width: f64,
}

impl Bump {
    pub fn value(&self, x: &Features) -> f64 {
        let d2: f64 = x.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum();
        self.height * (-d2 / (2.0 * self.width * self.width)).exp()
    }
}

fn default_penalty() -> f64 {
    1.0
}

fn default_eval_cases() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Landscape {
    pub landscape_id: String,
    #[serde(default)]
    pub description: String,
    pub bumps: Vec<Bump>,
    #[serde(default = "default_penalty")]
    pub penalty: f64,
    /// Standard deviation of the per-config score noise.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Probability that a configuration crashes.
    #[serde(default)]
    pub failure_prob: f64,
    /// Additive score bonus by strategy slug.
    #[serde(default)]
    pub strategy_bonus: BTreeMap<String, f64>,
    /// Synthetic evaluation examples emitted per configuration.
    #[serde(default = "default_eval_cases")]
    pub eval_cases: usize,
}

impl Landscape {
    pub fn from_toml_str(text: &str) -> Result<Self, LandscapeError> {
        let l: Landscape = toml::from_str(text)?;
        l.validate()?;
        Ok(l)
    }

    pub fn load(path: &Path) -> Result<Self, LandscapeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| LandscapeError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    /// The deceptive landscape shipped in `fixtures/landscapes/deceptive.toml`.
    pub fn deceptive() -> Self {
        Self::from_toml_str(include_str!("../../fixtures/landscapes/deceptive.toml")).expect("bundled landscape is valid")
    }

    pub fn validate(&self) -> Result<(), LandscapeError> {
        let bad = |m: String| Err(LandscapeError::Invalid(m));
        if self.bumps.is_empty() {
            return bad("at least one bump is required".into());
        }
        for (i, b) in self.bumps.iter().enumerate() {
            if !(b.height > 0.0 && b.height <= 1.0) {
                return bad(format!("bump {i}: height must be in (0, 1]"));
            }
            if !(b.width > 0.0) {
                return bad(format!("bump {i}: width must be > 0"));
            }
            if b.center.iter().any(|c| !c.is_finite()) {
                return bad(format!("bump {i}: center must be finite"));
            }
        }
        if !(self.penalty >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("penalty and noise_sigma must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.failure_prob) {
            return bad("failure_prob must be in [0, 1]".into());
        }
        for k in self.strategy_bonus.keys() {
            if StrategyKind::parse_label(k).is_none() {
                return bad(format!("unknown strategy `{k}` in strategy_bonus"));
            }
        }
        Ok(())
    }

    /// Noise-free score in [0, 1].
    pub fn score(&self, x: &Features, strategy: Option<StrategyKind>) -> f64 {
        let bumps: f64 = self.bumps.iter().map(|b| b.value(x)).sum();
        let outside: f64 = x.iter().map(|v| (-v).max(0.0) + (v - 1.0).max(0.0)).sum();
        let bonus = strategy
            .and_then(|s| self.strategy_bonus.iter().find(|(k, _)| StrategyKind::parse_label(k) == Some(s)))
            .map_or(0.0, |(_, b)| *b);
        (bumps - self.penalty * outside + bonus).clamp(0.0, 1.0)
    }
}

/// Feature vector of a configuration.
pub fn features(config: &TrainingConfig, max_train_samples: usize) -> Features {
    let samples = config.train_samples().map_or(DEFAULT_FEATURE, |n| n / max_train_samples.max(1) as f64);
    let mix = config.extra.get("mix_ratio").and_then(|v| v.as_f64()).unwrap_or(DEFAULT_FEATURE);
    [(config.learning_rate.log10() + 6.0) / 3.0, (config.epochs - 1.0) / 4.0, samples, mix]
}

/// Inverse of [`features`] for the training-scheme dimensions.
pub fn learning_rate_of(f: f64) -> f64 {
    10f64.powf(3.0 * f - 6.0)
}

pub fn epochs_of(f: f64) -> f64 {
    1.0 + 4.0 * f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FinetuningType, Scalar};

    fn peak() -> Landscape {
        Landscape::from_toml_str(
            r#"
            landscape_id = "peak"
            [[bumps]]
            height = 1.0
            center = [0.5, 0.5, 0.5, 0.5]
            width = 0.2
            "#,
        )
        .unwrap()
    }

    fn config(lr: f64, epochs: f64) -> TrainingConfig {
        TrainingConfig {
            config_id: "c".into(),
            finetuning_type: FinetuningType::Lora,
            learning_rate: lr,
            epochs,
            per_device_batch: 1,
            grad_accum: 1,
            cutoff_len: 512,
            adapter_rank: None,
            dataset_path: "datasets/base.jsonl".into(),
            base_model_path: "base".into(),
            extra: Default::default(),
        }
    }

    #[test]
    fn optimum_scores_one() {
        let l = peak();
        let c = config(learning_rate_of(0.5), epochs_of(0.5));
        let x = features(&c, 50_000);
        assert!(x.iter().all(|v| (v - 0.5).abs() < 1e-12), "{x:?}");
        assert!((l.score(&x, None) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn features_read_extras() {
        let mut c = config(1e-4, 3.0);
        c.extra.insert("train_samples".into(), Scalar::Int(10_000));
        c.extra.insert("mix_ratio".into(), Scalar::Float(0.25));
        let x = features(&c, 50_000);
        assert!((x[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(x[1], 0.5);
        assert_eq!(x[2], 0.2);
        assert_eq!(x[3], 0.25);
    }

    #[test]
    fn penalty_and_clamp() {
        let l = peak();
        assert_eq!(l.score(&[5.0, 0.5, 0.5, 0.5], None), 0.0);
        let mut l2 = peak();
        l2.strategy_bonus.insert("adjust_training_scheme".into(), 0.5);
        assert_eq!(l2.score(&[0.5; 4], Some(StrategyKind::AdjustTrainingScheme)), 1.0);
    }

    #[test]
    fn shipped_landscape_has_documented_peaks() {
        let l = Landscape::deceptive();
        let (global, local) = (&l.bumps[0], &l.bumps[1]);
        assert!((l.score(&global.center, None) - 0.95).abs() < 0.01);
        assert!((l.score(&local.center, None) - 0.6).abs() < 0.01);
        assert!(global.width > local.width, "the local peak is the sharper one");
    }

    #[test]
    fn rejects_invalid() {
        assert!(Landscape::from_toml_str("landscape_id = \"x\"\nbumps = []").is_err());
        assert!(Landscape::from_toml_str(
            "landscape_id = \"x\"\nfailure_prob = 2.0\n[[bumps]]\nheight = 1.0\ncenter = [0,0,0,0]\nwidth = 1.0"
        )
        .is_err());
    }
}
