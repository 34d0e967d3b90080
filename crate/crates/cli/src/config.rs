//! Run configuration, read from TOML. Unknown keys anywhere are errors.
//!
//! ```toml
//! out_dir = "runs/default"      # overridden by --out, then RDIFF_OUT
//! workers = 0                   # 0: one per available core
//!
//! [world]
//! ambient_dim = 64
//! latent_dim = 16
//! offsupport_coeff = 5.0
//! offsupport_sign = "penalty"   # or "bonus"
//! sigma = { kind = "identity" } # or { kind = "diagonal", values = [...] }
//!
//! [data]
//! n_unlabeled = 65536
//! n_labeled = 8192
//! label_noise = 0.1
//! lambda = 1.0
//! # nu = 0.125                 # default 1/sqrt(ambient_dim)
//!
//! [schedule]
//! t_end = 10.0
//! t0 = 0.01
//! eta = 0.005
//!
//! [model]
//! variant = "covering"          # or "mlp"
//! hidden = [256, 256]           # mlp only
//!
//! [train]
//! batch_size = 32
//! epochs = 10
//! learning_rate = 3e-4
//!
//! [sweep]
//! targets = [0.0, 1.0, 2.0, 4.0, 8.0, 16.0]
//! seeds = [0, 1, 2, 3, 4]
//! samples = 2048
//! ```

use std::path::{Path, PathBuf};

use rdiff_core::score::{AdamConfig, TimeSampling};
use rdiff_core::{DiffusionSchedule, TrainConfig, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const OUT_ENV: &str = "RDIFF_OUT";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub schedule: DiffusionSchedule,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_unlabeled: usize,
    pub n_labeled: usize,
    /// Standard deviation of the reward noise on the labeled set.
    pub label_noise: f64,
    pub lambda: f64,
    /// Pseudo-label noise; `1/sqrt(D)` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_unlabeled: 65536, n_labeled: 8192, label_noise: 0.1, lambda: 1.0, nu: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Covering,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { variant: Variant::Covering, hidden: vec![256, 256] }
    }
}

/// Training settings; the seed is derived per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub time_sampling: TimeSampling,
    pub validation_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            batch_size: base.batch_size,
            epochs: base.epochs,
            // The core default (8e-5) suits a UNet; the covering head
            // needs a larger one to leave its random init in 10 epochs.
            learning_rate: 3e-4,
            beta1: base.optimizer.beta1,
            beta2: base.optimizer.beta2,
            epsilon: base.optimizer.epsilon,
            time_sampling: base.time_sampling,
            validation_size: base.validation_size,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            optimizer: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            time_sampling: self.time_sampling,
            validation_size: self.validation_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub targets: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Generated points per `(a, seed)` cell.
    pub samples: usize,
    /// Draws from the target law used for the regret decomposition.
    pub reference_samples: usize,
    /// Rows per population in the shift estimate.
    pub shift_rows: usize,
    /// `(t, eps)` draws per example in the shift loss family.
    pub shift_draws: usize,
    pub histogram_bins: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            targets: vec![0.0, 1.0, 2.0, 4.0, 8.0, 16.0],
            seeds: vec![0, 1, 2, 3, 4],
            samples: 2048,
            reference_samples: 8192,
            shift_rows: 2048,
            shift_draws: 8,
            histogram_bins: 50,
        }
    }
}


impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn nu(&self) -> f64 {
        self.data.nu.unwrap_or_else(|| rdiff_core::ridge::default_nu(self.world.ambient_dim))
    }

    /// Checks everything that can be checked before compute starts.
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let w = &self.world;
        if w.latent_dim == 0 || w.latent_dim > w.ambient_dim {
            return bad(format!("need 1 <= latent_dim <= ambient_dim, got {} and {}", w.latent_dim, w.ambient_dim));
        }
        if !(w.offsupport_coeff >= 0.0) {
            return bad("offsupport_coeff must be >= 0".into());
        }
        let d = &self.data;
        if d.n_unlabeled == 0 || d.n_labeled == 0 {
            return bad("dataset sizes must be >= 1".into());
        }
        if !(0.0..1.0).contains(&d.label_noise) {
            return bad(format!("label_noise must be in [0, 1), got {}", d.label_noise));
        }
        if !(d.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", d.lambda));
        }
        if !(self.nu() > 0.0) {
            return bad("nu must be > 0".into());
        }
        self.schedule.validate().map_err(|e| CliError::Config(format!("schedule: {e}")))?;
        if self.model.variant == Variant::Mlp && self.model.hidden.is_empty() {
            return bad("mlp variant needs at least one hidden layer".into());
        }
        self.train
            .to_train_config(0)
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        if self.train.epochs == 0 {
            return bad("train.epochs must be >= 1".into());
        }
        let s = &self.sweep;
        if s.targets.is_empty() || s.targets.iter().any(|a| !a.is_finite()) {
            return bad("sweep.targets must be a nonempty list of finite values".into());
        }
        if s.seeds.is_empty() {
            return bad("sweep.seeds must be nonempty".into());
        }
        let mut seeds = s.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != s.seeds.len() {
            return bad("sweep.seeds contains duplicates".into());
        }
        if s.samples == 0 || s.reference_samples == 0 || s.shift_rows == 0 || s.shift_draws == 0 || s.histogram_bins == 0 {
            return bad("sweep sizes must all be >= 1".into());
        }
        Ok(())
    }

    /// `--out`, then `RDIFF_OUT`, then `out_dir` from the file, then `runs`.
    pub fn resolve_out(&self, cli: Option<&Path>) -> PathBuf {
        cli.map(Path::to_path_buf)
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Small problem that runs end to end in seconds.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.world.ambient_dim = 8;
        cfg.world.latent_dim = 2;
        cfg.data.n_unlabeled = 4096;
        cfg.data.n_labeled = 1024;
        cfg.train.learning_rate = 3e-3;
        cfg.sweep.seeds = vec![0];
        cfg.sweep.samples = 512;
        cfg.sweep.reference_samples = 2048;
        cfg.sweep.shift_rows = 512;
        cfg
    }
}
