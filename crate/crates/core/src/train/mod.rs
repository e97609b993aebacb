//! Training protocol: weighted cross-entropy with Adam, validation by
//! lesion-level AUC after every epoch, early stopping, and a log-uniform
//! learning-rate search.

mod cache;
mod runners;

pub use cache::{train_agg_inputs, AggCache, CacheKey, CACHE_INDEX};
pub use runners::{AggRunner, ContextRunner, LocalRunner};

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::error::{Error, Result};
use crate::patch::EpochPlan;
use crate::rng::{derive_seed, keys, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Context,
    Local,
    Agg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub plan: EpochPlan,
    pub patience: usize,
    pub max_epochs: usize,
    /// Log-uniform search range for the learning rate.
    pub lr_bounds: [f64; 2],
    /// Random-search trials; 0 trains once at `learning_rate`.
    pub trials: usize,
    /// Windows per validation lesion.
    pub val_patches: usize,
    /// Context net only: images drawn per epoch (`None` = all).
    pub images_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::local()
    }
}

impl TrainConfig {
    pub fn local() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 25,
            plan: EpochPlan::PROTOCOL,
            patience: 10,
            max_epochs: 100,
            lr_bounds: [1e-6, 1e-4],
            trials: 10,
            val_patches: 100,
            images_per_epoch: None,
        }
    }

    pub fn agg() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 100,
            lr_bounds: [1e-5, 1e-3],
            ..Self::local()
        }
    }

    pub fn context() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 10,
            lr_bounds: [1e-4, 1e-2],
            ..Self::local()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.val_patches == 0 {
            return bad("batch size, max epochs and validation patches must be positive");
        }
        let [lo, hi] = self.lr_bounds;
        if !(lo > 0.0 && hi >= lo) {
            return bad("learning-rate bounds must satisfy 0 < low <= high");
        }
        self.plan.validate()
    }
}

/// Strict-improvement early stopping on a maximized metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Record an epoch's metric; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    /// Extra diagnostic (image-level AUC for the context net).
    pub diagnostic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub target: Target,
    pub learning_rate: f64,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub stop_reason: StopReason,
    pub error: Option<String>,
    pub wall_seconds: f64,
}

/// One trainable model bound to its data.
pub trait EpochRunner {
    fn target(&self) -> Target;
    /// Train for one epoch (1-based) and return the mean training loss.
    fn train_epoch(&mut self, epoch: usize) -> Result<f64>;
    /// Validation AUC plus an optional diagnostic.
    fn validate(&mut self) -> Result<(f64, Option<f64>)>;
    fn checkpoint(&self, meta: TrainingMeta) -> Checkpoint;
}

pub struct FitOutcome {
    /// Weights from the best validation epoch; `None` if no epoch completed.
    pub checkpoint: Option<Checkpoint>,
    pub report: TrainReport,
}

/// Epoch loop with early stopping. Errors stop the loop and are recorded in
/// the report instead of being returned.
pub fn fit(
    runner: &mut dyn EpochRunner,
    patience: usize,
    max_epochs: usize,
    learning_rate: f64,
    seed: u64,
    config_hash: &str,
) -> FitOutcome {
    let start = Instant::now();
    let mut stopper = EarlyStopping::new(patience);
    let mut best = None;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut error = None;
    for epoch in 1..=max_epochs {
        let step = runner.train_epoch(epoch).and_then(|loss| {
            let (auc, diag) = runner.validate()?;
            Ok((loss, auc, diag))
        });
        let (loss, auc, diagnostic) = match step {
            Ok(v) => v,
            Err(e) => {
                stop_reason = StopReason::Error;
                error = Some(e.to_string());
                break;
            }
        };
        epochs.push(EpochLog {
            epoch,
            train_loss: loss,
            val_auc: auc,
            diagnostic,
        });
        if stopper.observe(epoch, auc) {
            best = Some(runner.checkpoint(TrainingMeta {
                epoch,
                best_val_auc: Some(auc),
                seed,
                config_hash: config_hash.to_string(),
            }));
        }
        if stopper.should_stop() {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    FitOutcome {
        checkpoint: best,
        report: TrainReport {
            target: runner.target(),
            learning_rate,
            seed,
            config_hash: config_hash.to_string(),
            epochs,
            best_epoch: stopper.best_epoch,
            best_val_auc: stopper.best,
            stop_reason,
            error,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    }
}

/// Log-uniform draw in `[lo, hi]`.
pub fn draw_learning_rate(bounds: [f64; 2], master_seed: u64, trial: usize) -> f64 {
    let [lo, hi] = bounds;
    if hi <= lo {
        return lo;
    }
    let u: f64 = stream(master_seed, &[keys::SEARCH, trial as u64]).random();
    (lo.ln() + u * (hi.ln() - lo.ln())).exp()
}

pub fn trial_seed(master_seed: u64, trial: usize) -> u64 {
    derive_seed(master_seed, &[keys::TRIAL, trial as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub best_val_auc: Option<f64>,
    pub error: Option<String>,
}

pub struct SearchOutcome {
    pub best_trial: usize,
    pub best: FitOutcome,
    pub trials: Vec<TrialSummary>,
}

/// Run `trials` trainings with log-uniform learning rates and keep the one
/// with the highest validation AUC (lowest trial index on ties).
pub fn random_search(
    bounds: [f64; 2],
    trials: usize,
    master_seed: u64,
    mut train: impl FnMut(usize, f64, u64) -> Result<FitOutcome>,
) -> Result<SearchOutcome> {
    if trials == 0 {
        return Err(Error::Config("random search needs at least one trial".into()));
    }
    let mut best: Option<(usize, FitOutcome)> = None;
    let mut summaries = Vec::new();
    let mut errors = Vec::new();
    for trial in 0..trials {
        let lr = draw_learning_rate(bounds, master_seed, trial);
        let seed = trial_seed(master_seed, trial);
        let outcome = train(trial, lr, seed);
        let (auc, err) = match &outcome {
            Ok(o) if o.checkpoint.is_some() => (o.report.best_val_auc, o.report.error.clone()),
            Ok(o) => (None, o.report.error.clone().or(Some("no epoch completed".into()))),
            Err(e) => (None, Some(e.to_string())),
        };
        summaries.push(TrialSummary {
            trial,
            learning_rate: lr,
            seed,
            best_val_auc: auc,
            error: err.clone(),
        });
        match (outcome, auc) {
            (Ok(o), Some(a)) => {
                if best.as_ref().is_none_or(|(_, b)| a > b.report.best_val_auc.unwrap_or(f64::NEG_INFINITY)) {
                    best = Some((trial, o));
                }
            }
            _ => errors.push(format!("trial {trial}: {}", err.unwrap_or_default())),
        }
    }
    let (best_trial, best) = best.ok_or_else(|| Error::SearchFailed {
        trials,
        errors: errors.join("; "),
    })?;
    Ok(SearchOutcome {
        best_trial,
        best,
        trials: summaries,
    })
}

/// SHA-256 of a value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("serializable")))
}
