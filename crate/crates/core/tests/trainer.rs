use glcn_core::agg::{AggNet, AggNetConfig};
use glcn_core::checkpoint::{Checkpoint, TrainingMeta};
use glcn_core::context::{ContextNet, ContextNetConfig};
use glcn_core::data::{generate_in_memory, DataConfig, Dataset};
use glcn_core::error::Result;
use glcn_core::local::{LocalNet, LocalNetConfig};
use glcn_core::maps::MapSelection;
use glcn_core::patch::{EpochPlan, PatchGeometry};
use glcn_core::train::{
    draw_learning_rate, fit, random_search, train_agg_inputs, AggCache, CacheKey, ContextRunner, EpochRunner,
    FitOutcome, LocalRunner, StopReason, Target, TrainConfig,
};
use glcn_core::Error;
use glcn_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Replays a fixed validation AUC sequence.
struct Scripted {
    aucs: Vec<f64>,
    fail_at: Option<usize>,
    epoch: usize,
}

impl Scripted {
    fn new(aucs: Vec<f64>) -> Self {
        Self {
            aucs,
            fail_at: None,
            epoch: 0,
        }
    }
}

impl EpochRunner for Scripted {
    fn target(&self) -> Target {
        Target::Agg
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
        if self.fail_at == Some(epoch) {
            return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
        }
        self.epoch = epoch;
        Ok(1.0 / epoch as f64)
    }

    fn validate(&mut self) -> Result<(f64, Option<f64>)> {
        Ok((self.aucs[self.epoch - 1], None))
    }

    fn checkpoint(&self, meta: TrainingMeta) -> Checkpoint {
        AggNet::<f32>::new(AggNetConfig { selection: MapSelection::INDICATOR }, 0).to_checkpoint(meta)
    }
}

#[test]
fn default_protocol_settings() {
    let (l, a, c) = (TrainConfig::local(), TrainConfig::agg(), TrainConfig::context());
    assert_eq!((l.patience, a.patience, c.patience), (10, 10, 10));
    assert_eq!((l.batch_size, a.batch_size), (25, 100));
    assert_eq!(l.lr_bounds, [1e-6, 1e-4]);
    assert_eq!(a.lr_bounds, [1e-5, 1e-3]);
    assert_eq!(l.plan, EpochPlan::PROTOCOL);
}

#[test]
fn patience_stops_ten_epochs_after_the_best() {
    let mut aucs = vec![0.6];
    aucs.extend([0.5, 0.6, 0.55, 0.6, 0.3, 0.59, 0.6, 0.1, 0.6, 0.6]);
    aucs.extend([0.9; 5]);
    let out = fit(&mut Scripted::new(aucs), 10, 100, 1e-4, 0, "h");
    assert_eq!(out.report.epochs.len(), 11);
    assert_eq!(out.report.best_epoch, 1);
    assert_eq!(out.report.stop_reason, StopReason::Patience);
    assert_eq!(out.checkpoint.unwrap().meta.training.epoch, 1);
}

#[test]
fn kept_checkpoint_is_the_best_epoch() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let aucs: Vec<f64> = (0..30).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
        let out = fit(&mut Scripted::new(aucs.clone()), 4, 30, 1e-4, 0, "h");
        let seen = &aucs[..out.report.epochs.len()];
        let max = seen.iter().copied().fold(f64::MIN, f64::max);
        let ck = out.checkpoint.unwrap();
        assert_eq!(ck.meta.training.best_val_auc, Some(max));
        assert_eq!(out.report.best_val_auc, Some(max));
        // first epoch reaching the maximum; later ties do not replace it
        assert_eq!(ck.meta.training.epoch, seen.iter().position(|&a| a == max).unwrap() + 1);
    }
}

#[test]
fn max_epochs_bounds_the_run() {
    let out = fit(&mut Scripted::new((0..10).map(|e| e as f64 / 10.0).collect()), 10, 6, 1e-4, 0, "h");
    assert_eq!(out.report.epochs.len(), 6);
    assert_eq!(out.report.stop_reason, StopReason::MaxEpochs);
}

#[test]
fn failing_epoch_aborts_with_a_report() {
    let mut r = Scripted::new(vec![0.5, 0.7, 0.8, 0.9]);
    r.fail_at = Some(3);
    let out = fit(&mut r, 10, 100, 1e-4, 0, "h");
    assert_eq!(out.report.stop_reason, StopReason::Error);
    assert_eq!(out.report.epochs.len(), 2);
    assert!(out.report.error.unwrap().contains("non-finite"));
    assert_eq!(out.checkpoint.unwrap().meta.training.epoch, 2);
}

#[test]
fn learning_rates_are_log_uniform() {
    for bounds in [[1e-6, 1e-4], [1e-5, 1e-3]] {
        let n = 10_000;
        let mut low_decade = 0;
        for t in 0..n {
            let lr = draw_learning_rate(bounds, 17, t);
            assert!(lr >= bounds[0] && lr <= bounds[1]);
            low_decade += usize::from(lr < bounds[0] * 10.0);
        }
        let share = low_decade as f64 / n as f64;
        assert!((share - 0.5).abs() <= 0.03, "share {share}");
    }
    assert_eq!(draw_learning_rate([1e-4, 1e-4], 1, 0), 1e-4);
}

fn scripted_trial(trial: usize, lr: f64, seed: u64) -> Result<FitOutcome> {
    let auc = 0.5 + (lr.ln() + seed as f64 % 7.0).sin().abs() * 0.4;
    let mut r = Scripted::new(vec![auc; 3]);
    if trial == 2 {
        r.fail_at = Some(1);
    }
    Ok(fit(&mut r, 10, 3, lr, seed, "h"))
}

#[test]
fn search_picks_the_best_trial_reproducibly() {
    let a = random_search([1e-6, 1e-4], 6, 5, scripted_trial).unwrap();
    let b = random_search([1e-6, 1e-4], 6, 5, scripted_trial).unwrap();
    assert_eq!(a.best_trial, b.best_trial);
    assert_eq!(a.trials, b.trials);
    assert_eq!(a.trials.len(), 6);
    assert!(a.trials[2].error.is_some());
    let best = a.trials.iter().filter_map(|t| t.best_val_auc).fold(f64::MIN, f64::max);
    assert_eq!(a.best.report.best_val_auc, Some(best));

    let one = random_search([1e-6, 1e-4], 1, 5, scripted_trial).unwrap();
    assert_eq!(one.best_trial, 0);
    assert_eq!(one.best.report.learning_rate, draw_learning_rate([1e-6, 1e-4], 5, 0));
    assert!(random_search([1e-6, 1e-4], 0, 5, scripted_trial).is_err());
}

#[test]
fn search_with_only_failures_reports_all() {
    let err = random_search([1e-6, 1e-4], 3, 1, |_, _, _| Err(Error::Training("boom".into()))).err().unwrap();
    match err {
        Error::SearchFailed { trials, errors } => {
            assert_eq!(trials, 3);
            assert_eq!(errors.matches("boom").count(), 3);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn unit_weights_give_plain_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z: Vec<f64> = (0..32).map(|_| rng.random_range(-4.0..4.0)).collect();
    let labels = [0, 1, 2, 3, 0, 1, 2, 3];
    let mut g = Graph::<f64>::new();
    let v = g.input(Tensor::new(vec![8, 4], z.clone()).unwrap());
    let l = g.weighted_cross_entropy(v, &labels, &[1.0; 4]).unwrap();
    let plain: f64 = z
        .chunks(4)
        .zip(labels)
        .map(|(row, y)| {
            let m = row.iter().copied().fold(f64::MIN, f64::max);
            let lse = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
            lse - row[y]
        })
        .sum::<f64>()
        / 8.0;
    assert_eq!(g.value(l).data()[0], plain);
}

fn data(ambiguous_fraction: f64, patients: usize) -> Dataset {
    let cfg = DataConfig {
        height: 128,
        width: 128,
        patients,
        ambiguous_fraction,
        lesion_count_probs: vec![0.2, 0.4, 0.4],
        ..DataConfig::default()
    };
    generate_in_memory(&cfg, 1).unwrap()
}

fn geometry() -> PatchGeometry {
    PatchGeometry {
        min_side: 24,
        max_side: 48,
        patch_size: 16,
        ..PatchGeometry::default()
    }
}

fn local_net(seed: u64) -> LocalNet<f32> {
    LocalNet::new(
        LocalNetConfig {
            patch_size: 16,
            widths: vec![8, 16],
        },
        seed,
    )
    .unwrap()
}

#[test]
fn same_seed_gives_identical_loss_traces() {
    let ds = data(0.3, 30);
    let run = || {
        let plan = EpochPlan { counts: [10, 10, 10, 10] };
        let mut r = LocalRunner::new(local_net(3), 1e-3, &ds.train, &ds.val, plan, geometry(), 8, 2, 5, 6).unwrap();
        fit(&mut r, 10, 3, 1e-3, 5, "h").report.epochs
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let ctx = || {
        let cfg = ContextNetConfig {
            widths: vec![4, 8],
            grid_factor: 16,
            input_downsample: 4,
            pool_fraction: 0.1,
        };
        let mut r = ContextRunner::new(ContextNet::new(cfg, 2).unwrap(), 1e-3, &ds.train, &ds.val, 4, Some(12), 9).unwrap();
        (r.train_epoch(1).unwrap(), r.train_epoch(2).unwrap())
    };
    assert_eq!(ctx(), ctx());
}

#[test]
fn patch_classifier_separates_unambiguous_lesions() {
    let ds = data(0.0, 150);
    let plan = EpochPlan {
        counts: [100, 100, 100, 100],
    };
    let mut r = LocalRunner::new(local_net(3), 1e-3, &ds.train, &ds.val, plan, geometry(), 25, 8, 5, 6).unwrap();
    let out = fit(&mut r, 20, 20, 1e-3, 5, "h");
    let e = &out.report.epochs;
    assert_eq!(e.len(), 20, "{:?}", out.report.error);
    assert!(e[19].train_loss < 0.75 * e[0].train_loss, "{} vs {}", e[19].train_loss, e[0].train_loss);
    assert!(out.report.best_val_auc.unwrap() > 0.9, "{:?}", out.report.best_val_auc);
}

fn key(local: &Checkpoint) -> CacheKey {
    CacheKey {
        local_hash: local.hash(),
        context_hash: "none".into(),
        pool_hash: "pool".into(),
        dataset_hash: "data".into(),
    }
}

#[test]
fn cached_inputs_match_recomputation() {
    let ds = data(0.3, 20);
    let local = local_net(4);
    let mut warm = Graph::new();
    let x = warm.input(Tensor::full(vec![4, 16, 16, 1], 0.3f32));
    let mut local = local;
    {
        let o = local.forward(&mut warm, x, glcn_core::nn::Mode::Train).unwrap();
        let _ = o;
    }
    glcn_core::nn::Module::absorb_batch_stats(&mut local, &warm);
    let ck = local.to_checkpoint(TrainingMeta::default());
    let plan = EpochPlan { counts: [6, 6, 6, 6] };
    let dir = tempfile::tempdir().unwrap();
    let g = geometry();

    let (first, hit) = train_agg_inputs(&ds.train, &local, None, &plan, &g, 16, 7, key(&ck), dir.path()).unwrap();
    assert!(!hit);
    let (second, hit) = train_agg_inputs(&ds.train, &local, None, &plan, &g, 16, 7, key(&ck), dir.path()).unwrap();
    assert!(hit);
    let fresh = AggCache::build(&ds.train, &local, None, &plan, &g, 16, 7, key(&ck)).unwrap();
    assert_eq!(first, fresh);
    for p in 0..fresh.len() {
        let a = second.input(p, MapSelection::ALL).unwrap();
        let b = fresh.input(p, MapSelection::ALL).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    let payload: usize = second.to_checkpoint().tensors.iter().map(|t| t.data.len() * 4).sum();
    assert_eq!(payload, AggCache::predicted_bytes(24, second.saliency.len(), second.grid));

    let other = local_net(5).to_checkpoint(TrainingMeta::default());
    assert_ne!(key(&other).file_name(), key(&ck).file_name());
    let mut changed = local.clone();
    changed.head.bias.value = Tensor::full(vec![4], 0.5);
    let changed_key = key(&changed.to_checkpoint(TrainingMeta::default()));
    let (_, hit) = train_agg_inputs(&ds.train, &changed, None, &plan, &g, 16, 7, changed_key, dir.path()).unwrap();
    assert!(!hit);

    // a damaged cache file is rebuilt rather than trusted
    let file = dir.path().join(key(&ck).file_name());
    let mut bytes = std::fs::read(&file).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&file, bytes).unwrap();
    let (rebuilt, hit) = train_agg_inputs(&ds.train, &local, None, &plan, &g, 16, 7, key(&ck), dir.path()).unwrap();
    assert!(!hit);
    assert_eq!(rebuilt, fresh);
}
