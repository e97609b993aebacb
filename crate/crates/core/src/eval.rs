//! Lesion-level metrics: AUC, TNR at a fixed FNR, bootstrap intervals,
//! TNR-FNR curves and the map-combination ablation table.

use std::io::Write;
use std::path::Path;

use glcn_tensor::softmax_row;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::MapSelection;
use crate::rng::{keys, stream};

/// One scored lesion. `label` is 1 for malignant, 0 for benign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub lesion_id: u64,
    pub image_id: u64,
    pub label: u8,
    pub score: f64,
}

fn class_counts(records: &[PredictionRecord]) -> Result<(usize, usize)> {
    let p = records.iter().filter(|r| r.label == 1).count();
    let n = records.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::InvalidInput(format!(
            "metric needs both classes; got {p} malignant and {n} benign records"
        )));
    }
    if records.iter().any(|r| r.label > 1 || !r.score.is_finite()) {
        return Err(Error::InvalidInput("records need labels in {0,1} and finite scores".into()));
    }
    Ok((p, n))
}

/// Mann-Whitney AUC via mid-ranks: ties between classes count one half.
pub fn auc(records: &[PredictionRecord]) -> Result<f64> {
    let (p, n) = class_counts(records)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].score.total_cmp(&records[b].score));
    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && records[order[j + 1]].score == records[order[i]].score {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        pos_rank_sum += mid * order[i..=j].iter().filter(|&&k| records[k].label == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (p as f64, n as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// A threshold choice and its performance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub fnr_target: f64,
    pub achieved_fnr: f64,
    pub tnr: f64,
    /// Records scoring strictly below this are called benign; `None` means every record is.
    pub threshold: Option<f64>,
    pub ci: Option<[f64; 2]>,
}

/// Largest `k` with `k / total <= target`.
fn allowed_misses(target: f64, total: usize) -> usize {
    let t = total as f64;
    let mut k = ((target * t).floor().max(0.0) as usize).min(total);
    while k < total && (k + 1) as f64 / t <= target {
        k += 1;
    }
    while k > 0 && k as f64 / t > target {
        k -= 1;
    }
    k
}

/// Highest threshold whose miss rate on malignant records stays within `fnr_target`.
pub fn tnr_at_fnr(records: &[PredictionRecord], fnr_target: f64) -> Result<OperatingPoint> {
    let (p, n) = class_counts(records)?;
    if !(0.0..=1.0).contains(&fnr_target) {
        return Err(Error::InvalidInput(format!("FNR target {fnr_target} outside [0,1]")));
    }
    let mut pos: Vec<f64> = records.iter().filter(|r| r.label == 1).map(|r| r.score).collect();
    pos.sort_by(f64::total_cmp);
    let k = allowed_misses(fnr_target, p);
    let threshold = pos.get(k).copied();
    let below = |label: u8| {
        records
            .iter()
            .filter(|r| r.label == label && threshold.is_none_or(|t| r.score < t))
            .count()
    };
    Ok(OperatingPoint {
        fnr_target,
        achieved_fnr: below(1) as f64 / p as f64,
        tnr: below(0) as f64 / n as f64,
        threshold,
        ci: None,
    })
}

/// Quantile with linear interpolation between order statistics (type 7).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (h - lo as f64)
}

const BOOTSTRAP_REDRAWS: usize = 100;

/// Percentile bootstrap over lesions. Resamples missing a class are redrawn.
pub fn bootstrap_ci(
    records: &[PredictionRecord],
    statistic: impl Fn(&[PredictionRecord]) -> Result<f64>,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<[f64; 2]> {
    if resamples < 100 {
        return Err(Error::InvalidInput(format!("bootstrap needs >= 100 resamples, got {resamples}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("confidence level {level} outside (0,1)")));
    }
    class_counts(records)?;
    let mut rng = stream(seed, &[keys::BOOTSTRAP]);
    let mut stats = Vec::with_capacity(resamples);
    let mut sample = Vec::with_capacity(records.len());
    for _ in 0..resamples {
        let mut drawn = false;
        for _ in 0..BOOTSTRAP_REDRAWS {
            sample.clear();
            sample.extend((0..records.len()).map(|_| records[rng.random_range(0..records.len())]));
            let pos = sample.iter().filter(|r| r.label == 1).count();
            if pos > 0 && pos < sample.len() {
                drawn = true;
                break;
            }
        }
        if !drawn {
            return Err(Error::InvalidInput(format!(
                "bootstrap could not draw a two-class resample in {BOOTSTRAP_REDRAWS} attempts"
            )));
        }
        stats.push(statistic(&sample)?);
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok([quantile(&stats, alpha), quantile(&stats, 1.0 - alpha)])
}

/// Operating points at each target, with bootstrap intervals on the TNR.
pub fn operating_points(
    records: &[PredictionRecord],
    targets: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<Vec<OperatingPoint>> {
    targets
        .iter()
        .map(|&t| {
            let mut op = tnr_at_fnr(records, t)?;
            op.ci = Some(bootstrap_ci(records, |s| Ok(tnr_at_fnr(s, t)?.tnr), resamples, level, seed)?);
            Ok(op)
        })
        .collect()
}

/// TNR-FNR curve sampled at the given FNR targets.
pub fn tnr_fnr_curve(records: &[PredictionRecord], targets: &[f64]) -> Result<Vec<OperatingPoint>> {
    targets.iter().map(|&t| tnr_at_fnr(records, t)).collect()
}

/// Malignant share of the malignant+benign softmax mass, averaged over patches.
pub fn lesion_score(patch_logits: &[[f64; 4]]) -> Result<f64> {
    if patch_logits.is_empty() {
        return Err(Error::InvalidInput("lesion score needs at least one patch".into()));
    }
    let mut total = 0.0;
    for z in patch_logits {
        let probs = softmax_row(z);
        total += probs[0] / (probs[0] + probs[1]);
    }
    Ok(total / patch_logits.len() as f64)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row of the map-combination table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub combo: String,
    pub description: String,
    pub channels: usize,
    /// Per-seed AUCs, `None` where the seed's checkpoint was missing.
    pub seed_aucs: Vec<Option<f64>>,
    pub mean: Option<f64>,
    /// Sample standard deviation across seeds.
    pub std: Option<f64>,
}

impl AblationRow {
    pub fn new(selection: MapSelection, seed_aucs: Vec<Option<f64>>) -> Self {
        let present: Vec<f64> = seed_aucs.iter().flatten().copied().collect();
        let (mean, std) = if present.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&present);
            (Some(m), Some(s))
        };
        Self {
            combo: selection.to_string(),
            description: selection.describe(),
            channels: selection.channels(),
            seed_aucs,
            mean,
            std,
        }
    }

    pub fn is_absent(&self) -> bool {
        self.mean.is_none()
    }
}

pub const RECORDS_HEADER: &str = "lesion_id,image_id,label,score";

/// Delimited text, scores with 17 significant digits.
pub fn write_records(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{RECORDS_HEADER}").expect("write to vec");
    for r in records {
        writeln!(out, "{},{},{},{:.16e}", r.lesion_id, r.image_id, r.label, r.score).expect("write to vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(RECORDS_HEADER) {
        return Err(Error::format("records", format!("{} lacks the header line", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::format("records", format!("line {}: bad {what}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad("field count"));
            }
            Ok(PredictionRecord {
                lesion_id: f[0].parse().map_err(|_| bad("lesion id"))?,
                image_id: f[1].parse().map_err(|_| bad("image id"))?,
                label: f[2].parse().map_err(|_| bad("label"))?,
                score: f[3].parse().map_err(|_| bad("score"))?,
            })
        })
        .collect()
}
