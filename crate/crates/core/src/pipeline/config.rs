//! `key = value` training configuration.
//!
//! Recognised keys (all optional, defaults in parentheses):
//!
//! | key | meaning |
//! |-----|---------|
//! | `num_layers` (3), `model_dim` (128), `num_heads` (8), `mlp_hidden_dim` (512), `dest_hidden_dim` (256) | encoder shape |
//! | `obs_len` (8), `pred_len` (12), `num_modes` (20) | horizons and candidate count |
//! | `lr_stage1` (0.001), `lr_stage2` (0.0001), `lr_stage3` (0.0015) | Adam learning rates |
//! | `epochs_stage1` (100), `epochs_stage2` (100), `warmup_epochs` (20), `epochs_stage3` (200) | epochs |
//! | `batch_size` (128) | windows per step |
//! | `lambda_d` (100), `sigma_s` (1), `lambda_kd_traj` (5), `lambda_kd_dest` (0.5) | loss weights |
//! | `seed` (0) | master seed |
//! | `train_files`, `test_files` | comma-separated trajectory files |
//! | `frame_stride` (10), `window_stride` (1) | windowing |
//! | `checkpoint_dir` (`checkpoints`) | where stage checkpoints go |
//! | `log_file` | per-epoch JSON lines; defaults to `<checkpoint_dir>/train_log.jsonl` |
//!
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::EncoderConfig;
use crate::data::WindowOptions;
use crate::objectives::LossWeights;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for {key}")]
    Value {
        line: usize,
        key: String,
        value: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub lr_stage1: f32,
    pub lr_stage2: f32,
    pub lr_stage3: f32,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub warmup_epochs: usize,
    pub epochs_stage3: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
    pub frame_stride: i64,
    pub window_stride: usize,
    pub checkpoint_dir: PathBuf,
    pub log_file: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            lr_stage1: 0.001,
            lr_stage2: 0.0001,
            lr_stage3: 0.0015,
            epochs_stage1: 100,
            epochs_stage2: 100,
            warmup_epochs: 20,
            epochs_stage3: 200,
            batch_size: 128,
            weights: LossWeights::default(),
            seed: 0,
            train_files: Vec::new(),
            test_files: Vec::new(),
            frame_stride: crate::data::DEFAULT_FRAME_STRIDE,
            window_stride: 1,
            checkpoint_dir: PathBuf::from("checkpoints"),
            log_file: None,
        }
    }
}

fn parse<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        line,
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.encoder
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.weights
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, lr) in [
            ("lr_stage1", self.lr_stage1),
            ("lr_stage2", self.lr_stage2),
            ("lr_stage3", self.lr_stage3),
        ] {
            if !(lr > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "{name} must be > 0, got {lr}"
                )));
            }
        }
        if self.warmup_epochs > self.epochs_stage2 {
            return Err(ConfigError::Invalid(format!(
                "warmup_epochs ({}) exceeds epochs_stage2 ({})",
                self.warmup_epochs, self.epochs_stage2
            )));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be > 0".into()));
        }
        if self.frame_stride <= 0 || self.window_stride == 0 {
            return Err(ConfigError::Invalid(
                "frame_stride and window_stride must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Parses `key = value` text. `base` resolves relative paths.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg = TrainConfig::default();
        let resolve = |p: &str| -> PathBuf {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let mut checkpoint_dir_set = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("expected `key = value`, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "num_layers" => cfg.encoder.num_layers = parse(line, key, value)?,
                "model_dim" => cfg.encoder.model_dim = parse(line, key, value)?,
                "num_heads" => cfg.encoder.num_heads = parse(line, key, value)?,
                "mlp_hidden_dim" => cfg.encoder.mlp_hidden_dim = parse(line, key, value)?,
                "dest_hidden_dim" => cfg.encoder.dest_hidden_dim = parse(line, key, value)?,
                "obs_len" => cfg.encoder.obs_len = parse(line, key, value)?,
                "pred_len" => cfg.encoder.pred_len = parse(line, key, value)?,
                "num_modes" => cfg.encoder.num_modes = parse(line, key, value)?,
                "lr_stage1" => cfg.lr_stage1 = parse(line, key, value)?,
                "lr_stage2" => cfg.lr_stage2 = parse(line, key, value)?,
                "lr_stage3" => cfg.lr_stage3 = parse(line, key, value)?,
                "epochs_stage1" => cfg.epochs_stage1 = parse(line, key, value)?,
                "epochs_stage2" => cfg.epochs_stage2 = parse(line, key, value)?,
                "warmup_epochs" => cfg.warmup_epochs = parse(line, key, value)?,
                "epochs_stage3" => cfg.epochs_stage3 = parse(line, key, value)?,
                "batch_size" => cfg.batch_size = parse(line, key, value)?,
                "lambda_d" => cfg.weights.lambda_d = parse(line, key, value)?,
                "sigma_s" => cfg.weights.sigma_s = parse(line, key, value)?,
                "lambda_kd_traj" => cfg.weights.lambda_kd_traj = parse(line, key, value)?,
                "lambda_kd_dest" => cfg.weights.lambda_kd_dest = parse(line, key, value)?,
                "seed" => cfg.seed = parse(line, key, value)?,
                "train_files" | "test_files" => {
                    let files = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(resolve)
                        .collect();
                    if key == "train_files" {
                        cfg.train_files = files;
                    } else {
                        cfg.test_files = files;
                    }
                }
                "frame_stride" => cfg.frame_stride = parse(line, key, value)?,
                "window_stride" => cfg.window_stride = parse(line, key, value)?,
                "checkpoint_dir" => {
                    cfg.checkpoint_dir = resolve(value);
                    checkpoint_dir_set = true;
                }
                "log_file" => cfg.log_file = Some(resolve(value)),
                other => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: other.to_string(),
                    })
                }
            }
        }
        if !checkpoint_dir_set {
            cfg.checkpoint_dir = base.join(&cfg.checkpoint_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn window_options(&self) -> WindowOptions {
        WindowOptions {
            window_len: self.encoder.total_len(),
            frame_stride: self.frame_stride,
            window_stride: self.window_stride,
        }
    }

    pub fn log_path(&self) -> PathBuf {
        self.log_file
            .clone()
            .unwrap_or_else(|| self.checkpoint_dir.join("train_log.jsonl"))
    }

    /// Hex digest over every training-relevant setting. Paths are excluded
    /// so a moved dataset keeps its hash.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.train_files.clear();
        canonical.test_files.clear();
        canonical.checkpoint_dir = PathBuf::new();
        canonical.log_file = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_settings() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.lr_stage1, c.lr_stage2, c.lr_stage3),
            (0.001, 0.0001, 0.0015)
        );
        assert_eq!(c.encoder.model_dim, 128);
        assert_eq!(c.encoder.num_heads, 8);
        assert_eq!(c.encoder.num_layers, 3);
        assert_eq!(c.weights.lambda_d, 100.0);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn parses_keys_and_paths() {
        let text = "# demo\nmodel_dim = 32\nnum_heads=4\nseed = 7 # trailing\ntrain_files = a.txt, /abs/b.txt\nlambda_d = 1\n";
        let c = TrainConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(c.encoder.model_dim, 32);
        assert_eq!(c.seed, 7);
        assert_eq!(
            c.train_files,
            vec![PathBuf::from("/base/a.txt"), PathBuf::from("/abs/b.txt")]
        );
        assert_eq!(c.checkpoint_dir, PathBuf::from("/base/checkpoints"));
        assert_eq!(c.weights.lambda_d, 1.0);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let err = TrainConfig::parse("learning_rate = 1\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 1, .. }));
        let err = TrainConfig::parse("seed = x\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, ConfigError::Value { .. }));
        let err = TrainConfig::parse("warmup_epochs = 5\nepochs_stage2 = 2\n", Path::new("."))
            .unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
        let err = TrainConfig::parse("lr_stage3 = 0\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
        assert!(TrainConfig::parse("just words\n", Path::new(".")).is_err());
    }

    #[test]
    fn hash_tracks_settings_not_paths() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.train_files.push("x.txt".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
