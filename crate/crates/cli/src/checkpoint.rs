//! Checkpoint persistence: the full training state as diff-friendly JSON.
//! Parameters are stored as decimal numbers whose shortest representation
//! restores the exact 64-bit value, so save -> load -> save is byte-stable.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use relmem::nn::{ParamMap, ParamSet};
use relmem::trainer::{RngState, TrainConfig, Trainer};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub step: usize,
    pub best_batch_accuracy: f64,
    pub params: ParamMap,
    pub optimizer: relmem::nn::AdamState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: trainer.config().clone(),
            step: trainer.step_count(),
            best_batch_accuracy: trainer.best_accuracy(),
            params: trainer.params().to_param_map(),
            optimizer: trainer.adam().clone(),
            rng: trainer.rng_state(),
        }
    }

    pub fn to_trainer(&self) -> Result<Trainer> {
        Trainer::from_parts(
            self.config.clone(),
            &self.params,
            self.optimizer.clone(),
            &self.rng,
            self.step,
            self.best_batch_accuracy,
        )
        .context("restoring trainer from checkpoint")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n")
            .with_context(|| format!("writing checkpoint {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading checkpoint {}", path.display()))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).context("parsing checkpoint json")?;
        if ckpt.format_version != FORMAT_VERSION {
            bail!(
                "unsupported checkpoint format_version {} (expected {FORMAT_VERSION})",
                ckpt.format_version
            );
        }
        Ok(ckpt)
    }
}
