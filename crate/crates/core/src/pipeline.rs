//! Experiment commands over a work directory.
//!
//! Layout under the work directory:
//!
//! ```text
//! config.json                         effective experiment config
//! data/                               manifest.json, images/
//! models/context.ckpt, local.ckpt     upstream networks (+ .report.json)
//! models/agg/<combo>/seed<k>.ckpt     aggregation networks
//! cache/                              precomputed aggregation inputs
//! eval/<combo>/seed<k>/               records.csv, report.json
//! ablation/                           table.json, table.txt
//! curve/<combo>-seed<k>.csv           TNR-FNR curves
//! ```
//!
//! Every command writes `<command>.run.json` next to its outputs, naming the
//! config hash, the seed and the hash of every input and output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agg::{AggNet, AggNetConfig};
use crate::checkpoint::{sha256_hex, Checkpoint, CheckpointError};
use crate::config::ExperimentConfig;
use crate::context::ContextNet;
use crate::data::{generate_dataset, load_dataset, AnnotatedImage, Dataset, Manifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::{auc, operating_points, read_records, tnr_fnr_curve, write_records, AblationRow, OperatingPoint, PredictionRecord};
use crate::local::LocalNet;
use crate::maps::MapSelection;
use crate::rng::{derive_seed, keys};
use crate::scoring::{context_lesion_score, EvalSet};
use crate::train::{
    config_hash, fit, random_search, train_agg_inputs, AggRunner, CacheKey, ContextRunner, EpochRunner, FitOutcome,
    LocalRunner, TrainConfig, TrainReport, TrialSummary,
};

/// Seeds for each stage, all derived from the master seed.
pub mod seeds {
    use super::*;

    pub fn context(master: u64) -> u64 {
        derive_seed(master, &[keys::INIT, 1])
    }

    pub fn local(master: u64) -> u64 {
        derive_seed(master, &[keys::INIT, 2])
    }

    pub fn agg(master: u64, seed: u64) -> u64 {
        derive_seed(master, &[keys::INIT, 3, seed])
    }

    pub fn pool(master: u64) -> u64 {
        derive_seed(master, &[keys::AGG_POOL])
    }

    pub fn val_windows(master: u64) -> u64 {
        derive_seed(master, &[keys::LESION_EVAL, 1])
    }

    pub fn test_windows(master: u64) -> u64 {
        derive_seed(master, &[keys::LESION_EVAL, 2])
    }

    pub fn bootstrap(master: u64) -> u64 {
        derive_seed(master, &[keys::BOOTSTRAP])
    }
}

/// Paths inside a work directory.
#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn context_ckpt(&self) -> PathBuf {
        self.models().join("context.ckpt")
    }

    pub fn local_ckpt(&self) -> PathBuf {
        self.models().join("local.ckpt")
    }

    pub fn agg_ckpt(&self, sel: MapSelection, seed: u64) -> PathBuf {
        self.models().join("agg").join(sel.to_string()).join(format!("seed{seed}.ckpt"))
    }

    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }

    pub fn eval_dir(&self, sel: MapSelection, seed: u64) -> PathBuf {
        self.root.join("eval").join(sel.to_string()).join(format!("seed{seed}"))
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }

    pub fn curve_file(&self, sel: MapSelection, seed: u64) -> PathBuf {
        self.root.join("curve").join(format!("{sel}-seed{seed}.csv"))
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Relative to the work directory.
    pub path: String,
    pub sha256: String,
}

/// Inputs and outputs of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub combo: Option<String>,
    pub agg_seed: Option<u64>,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::format("run manifest", e))
    }
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    Ok(sha256_hex(&bytes))
}

fn artifact(wd: &Workdir, path: &Path) -> Result<ArtifactRef> {
    Ok(ArtifactRef {
        path: wd.relative(path),
        sha256: hash_file(path)?,
    })
}

struct RunSpec<'a> {
    command: &'a str,
    combo: Option<MapSelection>,
    agg_seed: Option<u64>,
    inputs: &'a [PathBuf],
    outputs: &'a [PathBuf],
}

fn write_run_manifest(wd: &Workdir, cfg: &ExperimentConfig, dir: &Path, spec: RunSpec<'_>) -> Result<PathBuf> {
    let manifest = RunManifest {
        command: spec.command.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        combo: spec.combo.map(|s| s.to_string()),
        agg_seed: spec.agg_seed,
        inputs: spec.inputs.iter().map(|p| artifact(wd, p)).collect::<Result<_>>()?,
        outputs: spec.outputs.iter().map(|p| artifact(wd, p)).collect::<Result<_>>()?,
        config: cfg.clone(),
    };
    let name = match (spec.combo, spec.agg_seed) {
        (Some(c), Some(k)) if spec.command == "train-agg" => format!("{}-{c}-seed{k}.run.json", spec.command),
        _ => format!("{}.run.json", spec.command),
    };
    let path = dir.join(name);
    write_json(&path, &manifest)?;
    Ok(path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(Checkpoint::load(path)?)
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    ck.save(path).map_err(|e| match e {
        CheckpointError::Io { path, source } => Error::Io {
            path: path.into(),
            source,
        },
        other => other.into(),
    })
}

/// Load the dataset and check it was generated from `cfg.data`.
pub fn load_data(cfg: &ExperimentConfig, wd: &Workdir) -> Result<(Manifest, Dataset)> {
    let (manifest, ds) = load_dataset(&wd.data())?;
    if manifest.config != cfg.data {
        return Err(Error::Config(
            "dataset was generated with a different data config; rerun gen-data".into(),
        ));
    }
    if manifest.seed != cfg.seed {
        return Err(Error::Config(format!(
            "dataset was generated with seed {}, config says {}; rerun gen-data",
            manifest.seed, cfg.seed
        )));
    }
    Ok((manifest, ds))
}

/// Write `config.json` and generate the dataset.
pub fn gen_data(cfg: &ExperimentConfig, wd: &Workdir, overwrite: bool) -> Result<Manifest> {
    cfg.validate()?;
    // the stored config is replaced only once the new dataset is in place
    let manifest = generate_dataset(&cfg.data, cfg.seed, &wd.data(), overwrite)?;
    cfg.save(&wd.config())?;
    write_run_manifest(
        wd,
        cfg,
        &wd.data(),
        RunSpec {
            command: "gen-data",
            combo: None,
            agg_seed: None,
            inputs: &[wd.config()],
            outputs: &[wd.data().join(MANIFEST_FILE)],
        },
    )?;
    Ok(manifest)
}

/// Report of one training command, including the search trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub report: TrainReport,
    pub best_trial: Option<usize>,
    pub trials: Vec<TrialSummary>,
}

/// Train once at the configured rate, or run the random search. The report
/// is written even when training fails.
fn train_with<'a>(
    tc: &TrainConfig,
    master: u64,
    hash: &str,
    report_path: &Path,
    mut make: impl FnMut(f64, u64) -> Result<Box<dyn EpochRunner + 'a>>,
) -> Result<(Checkpoint, TrainingLog)> {
    let (outcome, best_trial, trials) = if tc.trials == 0 {
        let mut runner = make(tc.learning_rate, master)?;
        let o = fit(runner.as_mut(), tc.patience, tc.max_epochs, tc.learning_rate, master, hash);
        (o, None, Vec::new())
    } else {
        let s = random_search(tc.lr_bounds, tc.trials, master, |_, lr, seed| {
            let mut runner = make(lr, seed)?;
            Ok(fit(runner.as_mut(), tc.patience, tc.max_epochs, lr, seed, hash))
        })?;
        (s.best, Some(s.best_trial), s.trials)
    };
    let FitOutcome { checkpoint, report } = outcome;
    let log = TrainingLog {
        report,
        best_trial,
        trials,
    };
    write_json(report_path, &log)?;
    match (checkpoint, &log.report.error) {
        (Some(ck), None) => Ok((ck, log)),
        (Some(ck), Some(_)) if best_trial.is_some() => Ok((ck, log)),
        (_, err) => Err(Error::Training(
            err.clone().unwrap_or_else(|| "no epoch completed".into()),
        )),
    }
}

fn data_manifest_hash(wd: &Workdir) -> Result<String> {
    hash_file(&wd.data().join(MANIFEST_FILE))
}

pub fn train_context(cfg: &ExperimentConfig, wd: &Workdir) -> Result<TrainingLog> {
    cfg.validate()?;
    let (_, ds) = load_data(cfg, wd)?;
    let tc = &cfg.train_context;
    let path = wd.context_ckpt();
    let (ck, log) = train_with(
        tc,
        seeds::context(cfg.seed),
        &cfg.hash(),
        &wd.models().join("context.report.json"),
        |lr, seed| {
            let net = ContextNet::new(cfg.context.clone(), seed)?;
            Ok(Box::new(ContextRunner::new(
                net,
                lr,
                &ds.train,
                &ds.val,
                tc.batch_size,
                tc.images_per_epoch,
                seed,
            )?))
        },
    )?;
    save_checkpoint(&ck, &path)?;
    write_run_manifest(
        wd,
        cfg,
        &wd.models(),
        RunSpec {
            command: "train-context",
            combo: None,
            agg_seed: None,
            inputs: &[wd.data().join(MANIFEST_FILE)],
            outputs: &[path],
        },
    )?;
    Ok(log)
}

pub fn train_local(cfg: &ExperimentConfig, wd: &Workdir) -> Result<TrainingLog> {
    cfg.validate()?;
    let (_, ds) = load_data(cfg, wd)?;
    let tc = &cfg.train_local;
    let path = wd.local_ckpt();
    let (ck, log) = train_with(
        tc,
        seeds::local(cfg.seed),
        &cfg.hash(),
        &wd.models().join("local.report.json"),
        |lr, seed| {
            let net = LocalNet::new(cfg.local.clone(), seed)?;
            Ok(Box::new(LocalRunner::new(
                net,
                lr,
                &ds.train,
                &ds.val,
                tc.plan,
                cfg.geometry.clone(),
                tc.batch_size,
                tc.val_patches,
                seed,
                seeds::val_windows(cfg.seed),
            )?))
        },
    )?;
    save_checkpoint(&ck, &path)?;
    write_run_manifest(
        wd,
        cfg,
        &wd.models(),
        RunSpec {
            command: "train-local",
            combo: None,
            agg_seed: None,
            inputs: &[wd.data().join(MANIFEST_FILE)],
            outputs: &[path],
        },
    )?;
    Ok(log)
}

/// The frozen upstream networks, checked against the config.
pub struct Upstream {
    pub local: LocalNet<f32>,
    pub context: ContextNet<f32>,
    pub local_hash: String,
    pub context_hash: String,
}

pub fn load_upstream(cfg: &ExperimentConfig, wd: &Workdir) -> Result<Upstream> {
    let lck = load_checkpoint(&wd.local_ckpt())?;
    let cck = load_checkpoint(&wd.context_ckpt())?;
    let local = LocalNet::from_checkpoint(&lck)?;
    let context = ContextNet::from_checkpoint(&cck)?;
    if local.config != cfg.local {
        return Err(Error::Config("local checkpoint was trained with a different network config".into()));
    }
    if context.config != cfg.context {
        return Err(Error::Config("context checkpoint was trained with a different network config".into()));
    }
    Ok(Upstream {
        local,
        context,
        local_hash: lck.hash(),
        context_hash: cck.hash(),
    })
}

/// Train one aggregation network per (selection, seed). The upstream
/// networks are only read.
pub fn train_agg(
    cfg: &ExperimentConfig,
    wd: &Workdir,
    selections: &[MapSelection],
    agg_seeds: &[u64],
) -> Result<Vec<TrainingLog>> {
    cfg.validate()?;
    let up = load_upstream(cfg, wd)?;
    let (_, ds) = load_data(cfg, wd)?;
    let key = CacheKey {
        local_hash: up.local_hash.clone(),
        context_hash: up.context_hash.clone(),
        pool_hash: config_hash(&(&cfg.agg_pool, &cfg.geometry, seeds::pool(cfg.seed))),
        dataset_hash: data_manifest_hash(wd)?,
    };
    let (cache, _) = train_agg_inputs(
        &ds.train,
        &up.local,
        Some(&up.context),
        &cfg.agg_pool,
        &cfg.geometry,
        cfg.data.grid_factor,
        seeds::pool(cfg.seed),
        key,
        &wd.cache(),
    )?;
    let tc = &cfg.train_agg;
    let val = EvalSet::build(
        &ds.val,
        &up.local,
        Some(&up.context),
        &cfg.geometry,
        cfg.data.grid_factor,
        tc.val_patches,
        seeds::val_windows(cfg.seed),
    )?;
    let mut logs = Vec::new();
    for &sel in selections {
        for &k in agg_seeds {
            let path = wd.agg_ckpt(sel, k);
            let report = path.with_extension("report.json");
            let (ck, log) = train_with(tc, seeds::agg(cfg.seed, k), &cfg.hash(), &report, |lr, seed| {
                let net = AggNet::new(AggNetConfig { selection: sel }, seed);
                Ok(Box::new(AggRunner::new(net, lr, &cache, &val, tc.plan, tc.batch_size, seed)?))
            })?;
            save_checkpoint(&ck, &path)?;
            write_run_manifest(
                wd,
                cfg,
                path.parent().expect("agg checkpoint has a parent"),
                RunSpec {
                    command: "train-agg",
                    combo: Some(sel),
                    agg_seed: Some(k),
                    inputs: &[wd.data().join(MANIFEST_FILE), wd.local_ckpt(), wd.context_ckpt()],
                    outputs: std::slice::from_ref(&path),
                },
            )?;
            logs.push(log);
        }
    }
    Ok(logs)
}

/// Metrics for one aggregation checkpoint on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub combo: String,
    pub description: String,
    pub seed: u64,
    pub lesions: usize,
    pub malignant: usize,
    pub benign: usize,
    pub patches_per_lesion: usize,
    pub auc: f64,
    pub operating_points: Vec<OperatingPoint>,
}

/// The test-split windows, embeddings and saliency maps shared by every evaluation.
pub fn test_set(cfg: &ExperimentConfig, ds: &Dataset, up: &Upstream) -> Result<EvalSet> {
    EvalSet::build(
        &ds.test,
        &up.local,
        Some(&up.context),
        &cfg.geometry,
        cfg.data.grid_factor,
        cfg.eval.patches_per_lesion,
        seeds::test_windows(cfg.seed),
    )
}

fn evaluate_one(
    cfg: &ExperimentConfig,
    wd: &Workdir,
    test: &EvalSet,
    sel: MapSelection,
    k: u64,
) -> Result<EvalReport> {
    let ck_path = wd.agg_ckpt(sel, k);
    let agg = AggNet::from_checkpoint(&load_checkpoint(&ck_path)?)?;
    if agg.config.selection != sel {
        return Err(Error::Config(format!(
            "{} holds a {} network",
            ck_path.display(),
            agg.config.selection
        )));
    }
    let records = test.score(&agg)?;
    let e = &cfg.eval;
    let ops = operating_points(
        &records,
        &e.fnr_targets,
        e.bootstrap_resamples,
        e.confidence_level,
        seeds::bootstrap(cfg.seed),
    )?;
    let malignant = records.iter().filter(|r| r.label == 1).count();
    let report = EvalReport {
        combo: sel.to_string(),
        description: sel.describe(),
        seed: k,
        lesions: records.len(),
        malignant,
        benign: records.len() - malignant,
        patches_per_lesion: e.patches_per_lesion,
        auc: auc(&records)?,
        operating_points: ops,
    };
    let dir = wd.eval_dir(sel, k);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_records(&dir.join("records.csv"), &records)?;
    write_json(&dir.join("report.json"), &report)?;
    std::fs::write(dir.join("report.txt"), report_table(&report)).map_err(|e| Error::io(&dir, e))?;
    write_run_manifest(
        wd,
        cfg,
        &dir,
        RunSpec {
            command: "evaluate",
            combo: Some(sel),
            agg_seed: Some(k),
            inputs: &[wd.data().join(MANIFEST_FILE), wd.local_ckpt(), wd.context_ckpt(), ck_path],
            outputs: &[dir.join("records.csv"), dir.join("report.json")],
        },
    )?;
    Ok(report)
}

/// Operating-point table: FNR target, achieved FNR, TNR and its interval.
pub fn report_table(r: &EvalReport) -> String {
    let mut s = format!(
        "{} (seed {}): AUC {:.3} on {} lesions ({} malignant, {} benign)\n",
        r.description, r.seed, r.auc, r.lesions, r.malignant, r.benign
    );
    s.push_str("FNR target  achieved FNR  TNR    95% CI\n");
    for op in &r.operating_points {
        let ci = op.ci.map_or("-".to_string(), |[a, b]| format!("[{a:.3}, {b:.3}]"));
        let _ = writeln!(s, "{:<10.3}  {:<12.3}  {:.3}  {ci}", op.fnr_target, op.achieved_fnr, op.tnr);
    }
    s
}

/// Evaluate each (selection, seed) pair; every checkpoint must exist.
pub fn evaluate(cfg: &ExperimentConfig, wd: &Workdir, pairs: &[(MapSelection, u64)]) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    for &(sel, k) in pairs {
        let p = wd.agg_ckpt(sel, k);
        if !p.exists() {
            return Err(Error::MissingArtifact(p));
        }
    }
    let up = load_upstream(cfg, wd)?;
    let (_, ds) = load_data(cfg, wd)?;
    let test = test_set(cfg, &ds, &up)?;
    pairs.iter().map(|&(sel, k)| evaluate_one(cfg, wd, &test, sel, k)).collect()
}

/// Re-run the evaluation described by an `evaluate.run.json`.
pub fn replay_evaluation(wd: &Workdir, manifest: &Path) -> Result<EvalReport> {
    let m = RunManifest::load(manifest)?;
    if m.command != "evaluate" {
        return Err(Error::Config(format!("{} is not an evaluation manifest", manifest.display())));
    }
    let (Some(combo), Some(k)) = (&m.combo, m.agg_seed) else {
        return Err(Error::format("run manifest", "evaluation manifest lacks combo or seed"));
    };
    let sel: MapSelection = combo.parse()?;
    for input in &m.inputs {
        let found = hash_file(&wd.root.join(&input.path))?;
        if found != input.sha256 {
            return Err(Error::Config(format!("input {} changed since the recorded run", input.path)));
        }
    }
    Ok(evaluate(&m.config, wd, &[(sel, k)])?.remove(0))
}

/// The map-combination table plus single-model reference scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// f_loc's own 4-class head, averaged over the same test windows.
    pub local_head_auc: f64,
    /// Saliency maps alone, averaged over each lesion's mask.
    pub context_only_auc: f64,
}

impl AblationTable {
    pub fn row(&self, sel: MapSelection) -> Option<&AblationRow> {
        let key = sel.to_string();
        self.rows.iter().find(|r| r.combo == key)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("Input maps                                                    M   AUC (mean +- std over seeds)\n");
        for r in &self.rows {
            let v = match (r.mean, r.std) {
                (Some(m), Some(sd)) => format!("{m:.3} +- {sd:.3}"),
                _ => "absent".into(),
            };
            let _ = writeln!(s, "{:<60}  {:<2}  {v}", r.description, r.channels);
        }
        let _ = writeln!(s, "reference: local head AUC {:.3}", self.local_head_auc);
        let _ = writeln!(s, "reference: context-only AUC {:.3}", self.context_only_auc);
        s
    }
}

fn context_only_records(images: &[AnnotatedImage], test: &EvalSet) -> Vec<PredictionRecord> {
    let biopsied: Vec<&AnnotatedImage> = images.iter().filter(|im| !im.lesions.is_empty()).collect();
    let mut out = Vec::new();
    for (slot, image) in biopsied.iter().enumerate() {
        for (k, l) in image.lesions.iter().enumerate() {
            out.push(PredictionRecord {
                lesion_id: l.id,
                image_id: image.image.id,
                label: l.label.as_u8(),
                score: context_lesion_score(&test.saliency[slot], image, k),
            });
        }
    }
    out
}

/// Evaluate every configured combo and seed that has a checkpoint; the rest
/// are marked absent.
pub fn ablate(cfg: &ExperimentConfig, wd: &Workdir) -> Result<AblationTable> {
    cfg.validate()?;
    let up = load_upstream(cfg, wd)?;
    let (_, ds) = load_data(cfg, wd)?;
    let test = test_set(cfg, &ds, &up)?;
    let mut rows = Vec::new();
    let mut inputs = vec![wd.local_ckpt(), wd.context_ckpt()];
    for sel in cfg.eval.selections()? {
        let mut aucs = Vec::new();
        for &k in &cfg.eval.seeds {
            if wd.agg_ckpt(sel, k).exists() {
                aucs.push(Some(evaluate_one(cfg, wd, &test, sel, k)?.auc));
                inputs.push(wd.agg_ckpt(sel, k));
            } else {
                aucs.push(None);
            }
        }
        rows.push(AblationRow::new(sel, aucs));
    }
    let table = AblationTable {
        seeds: cfg.eval.seeds.clone(),
        rows,
        local_head_auc: auc(&test.score_local()?)?,
        context_only_auc: auc(&context_only_records(&ds.test, &test))?,
    };
    let dir = wd.ablation();
    write_json(&dir.join("table.json"), &table)?;
    std::fs::write(dir.join("table.txt"), table.to_text()).map_err(|e| Error::io(&dir, e))?;
    write_run_manifest(
        wd,
        cfg,
        &dir,
        RunSpec {
            command: "ablate",
            combo: None,
            agg_seed: None,
            inputs: &inputs,
            outputs: &[dir.join("table.json")],
        },
    )?;
    Ok(table)
}

/// FNR targets 0, 0.01, ..., 1.
pub fn curve_targets() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// TNR-FNR curve from stored evaluation records.
pub fn curve(cfg: &ExperimentConfig, wd: &Workdir, sel: MapSelection, k: u64) -> Result<Vec<OperatingPoint>> {
    let records_path = wd.eval_dir(sel, k).join("records.csv");
    let records = read_records(&records_path)?;
    let points = tnr_fnr_curve(&records, &curve_targets())?;
    let path = wd.curve_file(sel, k);
    ensure_parent(&path)?;
    let mut s = String::from("fnr_target,achieved_fnr,tnr,threshold\n");
    for p in &points {
        let t = p.threshold.map_or("inf".to_string(), |t| format!("{t:.16e}"));
        let _ = writeln!(s, "{:.2},{:.16e},{:.16e},{t}", p.fnr_target, p.achieved_fnr, p.tnr);
    }
    std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
    write_run_manifest(
        wd,
        cfg,
        &wd.root.join("curve"),
        RunSpec {
            command: &format!("curve-{sel}-seed{k}"),
            combo: Some(sel),
            agg_seed: Some(k),
            inputs: &[records_path],
            outputs: std::slice::from_ref(&path),
        },
    )?;
    Ok(points)
}
