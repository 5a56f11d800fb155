//! Flat JSON run configuration merged with command-line overrides.

use std::path::{Path, PathBuf};

use segnmt_core::seg::FusionMode;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const DATA_DIR_ENV: &str = "SEGNMT_DATA_DIR";

/// Every field is optional; unset fields fall back to the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub k_train: Option<usize>,
    pub candidate_pool_n: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub hidden_size: Option<usize>,
    pub embed_dim: Option<usize>,
    pub fusion_mode: Option<FusionMode>,
    pub seed: Option<u64>,
    pub clip_norm: Option<f64>,
    pub baseline: Option<bool>,
    pub jobs: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub cache: Option<PathBuf>,
}

macro_rules! merge_fields {
    ($a:ident, $b:ident, $($f:ident),*) => {
        RunConfig { $($f: $b.$f.or($a.$f)),* }
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Fields set in `over` win.
    pub fn merge(self, over: RunConfig) -> RunConfig {
        let a = self;
        let b = over;
        merge_fields!(
            a, b, k_train, candidate_pool_n, learning_rate, batch_size, max_epochs, patience, hidden_size,
            embed_dim, fusion_mode, seed, clip_norm, baseline, jobs, data_dir, out_dir, cache
        )
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        let hidden = self.hidden_size.unwrap_or(d.hidden_size);
        TrainConfig {
            k_train: self.k_train.unwrap_or(d.k_train),
            candidate_pool_n: self.candidate_pool_n.unwrap_or(d.candidate_pool_n),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            patience: self.patience.unwrap_or(d.patience),
            hidden_size: hidden,
            embed_dim: self.embed_dim.unwrap_or(hidden),
            fusion_mode: self.fusion_mode.unwrap_or(d.fusion_mode),
            seed: self.seed.unwrap_or(d.seed),
            clip_norm: match self.clip_norm {
                Some(c) if c > 0.0 => Some(c),
                Some(_) => None,
                None => d.clip_norm,
            },
            baseline: self.baseline.unwrap_or(d.baseline),
        }
    }

    pub fn jobs(&self) -> usize {
        self.jobs.unwrap_or(1).max(1)
    }
}

/// `explicit`, else `$SEGNMT_DATA_DIR`.
pub fn data_dir(explicit: Option<&Path>) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p.to_path_buf()),
        None => std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Usage(format!("no --data given and {DATA_DIR_ENV} is not set"))),
    }
}

/// Fails with a missing-file error unless `path` exists.
pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing(path.to_path_buf()))
    }
}
