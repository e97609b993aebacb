//! Experiment configuration: one JSON document drives every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::ContextNetConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::local::LocalNetConfig;
use crate::maps::MapSelection;
use crate::patch::{EpochPlan, PatchGeometry};
use crate::train::TrainConfig;

/// Lesion-level evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub patches_per_lesion: usize,
    /// Ascending.
    pub fnr_targets: Vec<f64>,
    pub bootstrap_resamples: usize,
    pub confidence_level: f64,
    /// Aggregation training seeds; the ablation reports mean and std over them.
    pub seeds: Vec<u64>,
    /// Map selections such as `embedding+saliency`.
    pub combos: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            patches_per_lesion: 100,
            fnr_targets: vec![0.0, 0.01, 0.02, 0.03, 0.05],
            bootstrap_resamples: 1000,
            confidence_level: 0.95,
            seeds: vec![0, 1, 2],
            combos: MapSelection::TABLE.iter().map(ToString::to_string).collect(),
        }
    }
}

impl EvalConfig {
    pub fn selections(&self) -> Result<Vec<MapSelection>> {
        self.combos.iter().map(|c| c.parse()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; every stream in the pipeline derives from it.
    pub seed: u64,
    pub data: DataConfig,
    pub geometry: PatchGeometry,
    pub local: LocalNetConfig,
    pub context: ContextNetConfig,
    pub train_local: TrainConfig,
    pub train_context: TrainConfig,
    pub train_agg: TrainConfig,
    /// Patches embedded once for aggregation training; epochs resample from it.
    pub agg_pool: EpochPlan,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            geometry: PatchGeometry::default(),
            local: LocalNetConfig::default(),
            context: ContextNetConfig::default(),
            train_local: TrainConfig::local(),
            train_context: TrainConfig::context(),
            train_agg: TrainConfig::agg(),
            agg_pool: EpochPlan {
                counts: [2000, 2000, 3000, 3000],
            },
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// A few dozen small images and one-epoch trainings; for smoke tests.
    pub fn tiny() -> Self {
        let d = Self::default();
        let train = |t: TrainConfig| TrainConfig {
            plan: EpochPlan { counts: [8, 8, 8, 8] },
            batch_size: 8,
            max_epochs: 1,
            trials: 0,
            val_patches: 2,
            images_per_epoch: Some(8),
            ..t
        };
        Self {
            data: DataConfig {
                height: 128,
                width: 96,
                patients: 40,
                lesion_count_probs: vec![0.1, 0.4, 0.5],
                ambiguous_fraction: 0.3,
                ..d.data
            },
            geometry: PatchGeometry {
                min_side: 32,
                max_side: 64,
                patch_size: 16,
                ..d.geometry
            },
            local: LocalNetConfig {
                patch_size: 16,
                widths: vec![4, 8],
            },
            context: ContextNetConfig {
                widths: vec![4, 8],
                grid_factor: 16,
                input_downsample: 4,
                pool_fraction: 0.1,
            },
            train_local: train(d.train_local),
            train_context: train(d.train_context),
            train_agg: train(d.train_agg),
            agg_pool: EpochPlan { counts: [8, 8, 8, 8] },
            eval: EvalConfig {
                patches_per_lesion: 4,
                bootstrap_resamples: 100,
                seeds: vec![0, 1],
                ..d.eval
            },
            ..d
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn hash(&self) -> String {
        crate::train::config_hash(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.data.validate()?;
        self.geometry.validate(self.data.height, self.data.width)?;
        self.local.validate()?;
        self.context.validate()?;
        if self.context.grid_factor != self.data.grid_factor {
            return bad(format!(
                "context grid factor {} differs from the data grid factor {}",
                self.context.grid_factor, self.data.grid_factor
            ));
        }
        if self.local.patch_size != self.geometry.patch_size {
            return bad(format!(
                "local net patch size {} differs from the geometry patch size {}",
                self.local.patch_size, self.geometry.patch_size
            ));
        }
        for (name, t) in [
            ("train_local", &self.train_local),
            ("train_context", &self.train_context),
            ("train_agg", &self.train_agg),
        ] {
            t.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        self.agg_pool.validate()?;
        let e = &self.eval;
        if e.patches_per_lesion == 0 {
            return bad("patches per lesion must be positive".into());
        }
        if e.fnr_targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("FNR targets must lie in [0,1]".into());
        }
        if e.fnr_targets.windows(2).any(|w| w[0] >= w[1]) {
            return bad("FNR targets must be strictly ascending".into());
        }
        if e.bootstrap_resamples < 100 {
            return bad("at least 100 bootstrap resamples are required".into());
        }
        if !(e.confidence_level > 0.0 && e.confidence_level < 1.0) {
            return bad("confidence level must lie in (0,1)".into());
        }
        if e.seeds.is_empty() {
            return bad("at least one aggregation seed is required".into());
        }
        let mut seen = e.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != e.seeds.len() {
            return bad("aggregation seeds must be distinct".into());
        }
        e.selections()?;
        Ok(())
    }
}
