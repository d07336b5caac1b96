//! Experiment configuration, presets, and orchestration entry points.

mod pipeline;
mod sweeps;

pub use pipeline::{
    ensure_dataset, ensure_regions, ensure_trained, evaluate_checkpoint, infer_split,
    run_pipeline, PipelineResult,
};
pub use sweeps::{
    run_ablation, sweep, AblationRow, AblationTable, SweepParameter, SweepRow, SweepTable,
};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datasets::BenchmarkConfig;
use crate::detector::ModelConfig;
use crate::error::{ClisError, Result};
use crate::trainer::{AblationSwitches, TrainConfig};

/// Everything one experiment needs: data, model, optimization, switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub benchmark: BenchmarkConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub switches: AblationSwitches,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Desk-scale preset: a 20-category synthetic benchmark and a model
    /// small enough that the full pipeline runs in minutes on a CPU.
    pub fn desk() -> Self {
        let benchmark = BenchmarkConfig::default();
        let model = ModelConfig {
            block_channels: [8, 16, 32, 32],
            pyramid_channels: 32,
            hidden_dim: 96,
            num_classes: benchmark.num_categories,
            ..Default::default()
        };
        let train = TrainConfig::default();
        Self {
            name: "desk".into(),
            benchmark,
            model,
            train,
            switches: AblationSwitches::all_on(),
            seed: 7,
            output_dir: PathBuf::from("runs"),
        }
    }

    /// Full-scale hyperparameters as published: 90k iterations at batch 16
    /// with s=16, t=2, queue 115712, temperature 0.2, loss weights 0.1/0.05,
    /// repeat-factor threshold 0.001 and 448x448 mosaics. Configuration
    /// preset only; running it is a multi-day CPU job.
    pub fn paper_scale() -> Self {
        let benchmark = BenchmarkConfig {
            num_categories: 126,
            detection_images: 100_000,
            weak_multiplier: 10.0,
            val_images: 20_000,
            image_size: 256,
            ..Default::default()
        };
        let model = ModelConfig {
            block_channels: [16, 32, 64, 64],
            pyramid_channels: 64,
            hidden_dim: 256,
            num_classes: benchmark.num_categories,
            ..Default::default()
        };
        let train = TrainConfig {
            iterations: 90_000,
            detection_batch: 16,
            s: 16,
            t: 2,
            queue_capacity: 115_712,
            repeat_factor_threshold: 0.001,
            augment: crate::augment::AugmentConfig {
                mosaic_size: 448,
                ..Default::default()
            },
            ..Default::default()
        };
        Self {
            name: "paper-scale".into(),
            benchmark,
            model,
            train,
            switches: AblationSwitches::all_on(),
            seed: 7,
            output_dir: PathBuf::from("runs"),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-scale" => Ok(Self::paper_scale()),
            other => Err(ClisError::Config(format!(
                "unknown preset `{other}` (expected `desk` or `paper-scale`)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.train.validate()?;
        self.switches.validate()?;
        if self.model.num_classes != self.benchmark.num_categories {
            return Err(ClisError::Config(format!(
                "model num_classes {} != benchmark num_categories {}",
                self.model.num_classes, self.benchmark.num_categories
            )));
        }
        Ok(())
    }

    /// Apply one `key=value` override via its dotted JSON path, e.g.
    /// `train.alpha=0.2` or `switches.use_clr=false`.
    pub fn set_override(&mut self, spec: &str) -> Result<()> {
        let (path, raw) = spec.split_once('=').ok_or_else(|| {
            ClisError::Config(format!("override `{spec}` must look like key=value"))
        })?;
        let mut tree = serde_json::to_value(&*self)?;
        let parts: Vec<&str> = path.split('.').collect();
        let (last, parents) = parts.split_last().expect("split_once guarantees content");
        let parent_ptr = if parents.is_empty() {
            String::new()
        } else {
            format!("/{}", parents.join("/"))
        };
        let parent = tree
            .pointer_mut(&parent_ptr)
            .and_then(|v| v.as_object_mut())
            .ok_or_else(|| ClisError::Config(format!("unknown config key `{path}`")))?;
        if !parent.contains_key(*last) {
            return Err(ClisError::Config(format!("unknown config key `{path}`")));
        }
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        parent.insert(last.to_string(), value);
        *self = serde_json::from_value(tree)?;
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let body = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, body).map_err(|e| ClisError::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let body = std::fs::read(path).map_err(|e| ClisError::io(path, e))?;
        Ok(serde_json::from_slice(&body)?)
    }
}
