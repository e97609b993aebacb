use glcn_core::eval::{
    auc, bootstrap_ci, lesion_score, read_records, tnr_at_fnr, tnr_fnr_curve, write_records, AblationRow,
    PredictionRecord,
};
use glcn_core::maps::MapSelection;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn records(scores: &[f64], labels: &[u8]) -> Vec<PredictionRecord> {
    scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&score, &label))| PredictionRecord {
            lesion_id: i as u64,
            image_id: i as u64 / 2,
            label,
            score,
        })
        .collect()
}

fn pairwise_auc(r: &[PredictionRecord]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for p in r.iter().filter(|r| r.label == 1) {
        for n in r.iter().filter(|r| r.label == 0) {
            pairs += 1.0;
            if p.score > n.score {
                wins += 1.0;
            } else if p.score == n.score {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Best TNR over every candidate threshold whose miss rate stays within the target.
fn enumerated_tnr(r: &[PredictionRecord], target: f64) -> f64 {
    let p = r.iter().filter(|r| r.label == 1).count() as f64;
    let n = r.len() as f64 - p;
    let mut candidates: Vec<f64> = r.iter().map(|r| r.score).collect();
    candidates.push(f64::INFINITY);
    candidates
        .into_iter()
        .filter(|&t| r.iter().filter(|r| r.label == 1 && r.score < t).count() as f64 / p <= target)
        .map(|t| r.iter().filter(|r| r.label == 0 && r.score < t).count() as f64 / n)
        .fold(0.0, f64::max)
}

fn random_records(rng: &mut ChaCha8Rng, n: usize) -> Vec<PredictionRecord> {
    let levels = rng.random_range(2..=n.max(2));
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    labels[0] = 1;
    labels[1] = 0;
    let scores: Vec<f64> = labels
        .iter()
        .map(|&l| (rng.random_range(0..levels) as f64 + l as f64 * 0.5) / levels as f64)
        .map(|s: f64| s.min(1.0))
        .collect();
    records(&scores, &labels)
}

#[test]
fn auc_examples() {
    assert_eq!(auc(&records(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0])).unwrap(), 1.0);
    assert_eq!(auc(&records(&[0.1, 0.2, 0.3, 0.4], &[0, 1, 0, 1])).unwrap(), 0.75);
    assert_eq!(auc(&records(&[0.5; 6], &[0, 1, 0, 1, 1, 0])).unwrap(), 0.5);
}

#[test]
fn auc_rejects_one_class() {
    assert!(auc(&records(&[0.1, 0.2], &[1, 1])).is_err());
    assert!(auc(&[]).is_err());
}

#[test]
fn auc_matches_pairwise_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..300 {
        let n = rng.random_range(2..=200);
        let r = random_records(&mut rng, n);
        assert!((auc(&r).unwrap() - pairwise_auc(&r)).abs() <= 1e-12);
    }
}

#[test]
fn lesion_score_examples() {
    // softmax mass 0.3 malignant, 0.1 benign, 0.6 elsewhere
    let z = [0.3f64.ln(), 0.1f64.ln(), 0.4f64.ln(), 0.2f64.ln()];
    let s = lesion_score(&[z; 7]).unwrap();
    assert!((s - 0.75).abs() < 1e-12);
    let single = [1.0, -1.0, 0.5, 2.0];
    let e = (1.0f64).exp() / ((1.0f64).exp() + (-1.0f64).exp());
    assert!((lesion_score(&[single]).unwrap() - e).abs() < 1e-12);
    assert!(lesion_score(&[]).is_err());
}

#[test]
fn lesion_score_is_permutation_invariant_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let mut logits: Vec<[f64; 4]> = (0..100)
            .map(|_| std::array::from_fn(|_| rng.random_range(-30.0..30.0)))
            .collect();
        let a = lesion_score(&logits).unwrap();
        logits.reverse();
        logits.swap(3, 40);
        let b = lesion_score(&logits).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&a));
    }
    assert!(lesion_score(&[[1e4, -1e4, 0.0, 0.0]]).unwrap().is_finite());
}

#[test]
fn tnr_examples() {
    let sep = records(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]);
    assert_eq!(tnr_at_fnr(&sep, 0.0).unwrap().tnr, 1.0);

    let r = records(&[0.9, 0.2, 0.8, 0.1], &[1, 1, 0, 0]);
    let op = tnr_at_fnr(&r, 0.0).unwrap();
    assert_eq!(op.threshold, Some(0.2));
    assert_eq!(op.tnr, 0.5);
    assert_eq!(op.achieved_fnr, 0.0);
    // one positive may be missed, so every score below 0.9 is avoided
    let op = tnr_at_fnr(&r, 0.5).unwrap();
    assert_eq!(op.threshold, Some(0.9));
    assert_eq!(op.achieved_fnr, 0.5);
    assert_eq!(op.tnr, enumerated_tnr(&r, 0.5));
}

#[test]
fn ties_at_the_threshold_are_not_avoided() {
    let r = records(&[0.5, 0.5, 0.5, 0.1], &[1, 0, 0, 0]);
    let op = tnr_at_fnr(&r, 0.0).unwrap();
    assert_eq!(op.threshold, Some(0.5));
    assert!((op.tnr - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn full_miss_allowance_avoids_everything() {
    let r = records(&[0.9, 0.2, 0.8, 0.1], &[1, 1, 0, 0]);
    let op = tnr_at_fnr(&r, 1.0).unwrap();
    assert_eq!(op.threshold, None);
    assert_eq!(op.tnr, 1.0);
}

#[test]
fn tnr_matches_threshold_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let n = rng.random_range(2..=50);
        let r = random_records(&mut rng, n);
        for &t in &[0.0, 0.01, 0.02, 0.03, 0.05, 0.1, 0.25, 0.5, 0.9, 1.0] {
            let op = tnr_at_fnr(&r, t).unwrap();
            assert_eq!(op.tnr, enumerated_tnr(&r, t), "target {t}");
            assert!(op.achieved_fnr <= t);
        }
    }
}

#[test]
fn curve_is_nondecreasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let targets: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let r = random_records(&mut rng, n);
        let curve = tnr_fnr_curve(&r, &targets).unwrap();
        assert!(curve.windows(2).all(|w| w[1].tnr >= w[0].tnr));
        assert!(tnr_at_fnr(&r, 0.05).unwrap().tnr >= tnr_at_fnr(&r, 0.01).unwrap().tnr);
    }
}

proptest! {
    #[test]
    fn metrics_ignore_increasing_transforms(
        scores in prop::collection::vec(0.0f64..1.0, 4..60),
        labels in prop::collection::vec(0u8..2, 4..60),
    ) {
        let n = scores.len().min(labels.len());
        let mut labels = labels[..n].to_vec();
        labels[0] = 1;
        labels[1] = 0;
        let r = records(&scores[..n], &labels);
        let t: Vec<PredictionRecord> = r
            .iter()
            .map(|x| PredictionRecord { score: (3.0 * x.score).exp() / 10.0 + 0.1, ..*x })
            .collect();
        prop_assert_eq!(auc(&r).unwrap(), auc(&t).unwrap());
        for target in [0.0, 0.02, 0.05, 0.3] {
            prop_assert_eq!(tnr_at_fnr(&r, target).unwrap().tnr, tnr_at_fnr(&t, target).unwrap().tnr);
        }
    }
}

fn synthetic_set(n: usize, seed: u64) -> Vec<PredictionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = u8::from(i % 3 == 0);
            let score: f64 = (rng.random::<f64>() * 0.7 + 0.3 * label as f64).min(1.0);
            PredictionRecord {
                lesion_id: i as u64,
                image_id: i as u64,
                label,
                score,
            }
        })
        .collect()
}

#[test]
fn bootstrap_of_a_constant_is_a_point() {
    let r = synthetic_set(50, 1);
    assert_eq!(bootstrap_ci(&r, |_| Ok(0.42), 200, 0.95, 9).unwrap(), [0.42, 0.42]);
}

#[test]
fn bootstrap_tnr_interval_is_stable_and_bounded() {
    let r = synthetic_set(600, 2);
    let stat = |s: &[PredictionRecord]| Ok(tnr_at_fnr(s, 0.05)?.tnr);
    let a = bootstrap_ci(&r, stat, 1000, 0.95, 3).unwrap();
    let b = bootstrap_ci(&r, stat, 2000, 0.95, 3).unwrap();
    for ci in [a, b] {
        assert!(0.0 <= ci[0] && ci[0] <= ci[1] && ci[1] <= 1.0);
    }
    assert!((a[0] - b[0]).abs() < 0.02 && (a[1] - b[1]).abs() < 0.02, "{a:?} vs {b:?}");
    assert_eq!(a, bootstrap_ci(&r, stat, 1000, 0.95, 3).unwrap());
}

#[test]
fn bootstrap_validates_its_settings() {
    let r = synthetic_set(50, 1);
    assert!(bootstrap_ci(&r, |_| Ok(0.0), 99, 0.95, 0).is_err());
    assert!(bootstrap_ci(&r, |_| Ok(0.0), 100, 1.0, 0).is_err());
}

#[test]
fn records_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let r: Vec<PredictionRecord> = (0..500)
        .map(|i| PredictionRecord {
            lesion_id: i * 16 + 3,
            image_id: i,
            label: (i % 2) as u8,
            score: rng.random(),
        })
        .collect();
    write_records(&path, &r).unwrap();
    let back = read_records(&path).unwrap();
    assert_eq!(back, r);
    assert_eq!(auc(&back).unwrap().to_bits(), auc(&r).unwrap().to_bits());
}

#[test]
fn ablation_row_summarizes_present_seeds() {
    let row = AblationRow::new(MapSelection::EMBEDDING_SALIENCY, vec![Some(0.8), None, Some(0.9)]);
    assert_eq!(row.channels, 34);
    assert_eq!(row.description, "embedding maps + saliency maps");
    assert!((row.mean.unwrap() - 0.85).abs() < 1e-12);
    assert!((row.std.unwrap() - 0.005f64.sqrt()).abs() < 1e-12);
    assert!(AblationRow::new(MapSelection::INDICATOR, vec![None, None]).is_absent());
}
