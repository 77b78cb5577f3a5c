use cubescore::analysis::ols::{self, fit, GOLD, LONG_TRAINING};
use cubescore::analysis::{
    association_table, check_complete, confusion_matrix, missing_cells, ols_fit, ols_fits, run_grid, threshold_for_accuracy,
    top_confident_errors, triage_curve, AnalysisError, ExperimentRecord, GridSpec,
};
use cubescore::augment::AugmentArm;
use cubescore::nn::{argmax, Architecture, OptimizerKind};
use cubescore::score::Score;
use cubescore::synth::{generate_dataset, DatasetConfig};
use rand::Rng;

mod common;
use common::{normal_equations, oracle_order, planted_records, prefix_scan, random_design, random_probs, random_truth, rng};

#[test]
fn ols_matches_normal_equations() {
    let mut r = rng(1);
    for case in 0..100 {
        let (x, n, p, y) = random_design(&mut r);
        let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
        let got = fit(&x, n, &names, &y, 0.95).unwrap();
        let want = normal_equations(&x, n, p, &y);
        for j in 0..p {
            let c = &got.coefficients[j];
            assert!((c.estimate - want.beta[j]).abs() < 1e-8, "case {case} coef {j}: {} vs {}", c.estimate, want.beta[j]);
            assert!((c.std_error - want.std_errors[j]).abs() < 1e-8, "case {case} se {j}");
        }
        assert!((got.residual_variance - want.sigma2).abs() < 1e-8);
    }
}

#[test]
fn planted_gold_effect_is_recovered() {
    for seed in 0..5 {
        let records = planted_records(seed, 0.095, 0.01);
        assert_eq!(records.len(), 108);
        let pooled = ols_fit(&records, true).unwrap();
        let g = pooled.get(GOLD).unwrap();
        assert!((g.estimate - 0.095).abs() <= 0.01, "seed {seed}: {}", g.estimate);
        assert!(g.ci_low < 0.095 && 0.095 < g.ci_high || (g.estimate - 0.095).abs() < 3.0 * g.std_error);
        assert!(pooled.reference.iter().any(|s| s.contains("interviewer")));
        assert!(pooled.reference.iter().any(|s| s.contains("none")));
        assert!(pooled.reference.iter().any(|s| s.contains("10 epochs")));
        let fits = ols_fits(&records).unwrap();
        assert_eq!(fits.len(), 4);
        for f in &fits[..3] {
            assert!((f.get(GOLD).unwrap().estimate - 0.095).abs() <= 0.02);
        }
    }
}

#[test]
fn noiseless_records_give_exact_coefficients() {
    let records = planted_records(0, 0.095, 0.0);
    let f = ols_fit(&records, true).unwrap();
    assert!((f.get(GOLD).unwrap().estimate - 0.095).abs() < 1e-12);
    assert!((f.get(LONG_TRAINING).unwrap().estimate - 0.005).abs() < 1e-12);
    assert!((f.get(&ols::augment_term(AugmentArm::Transform)).unwrap().estimate - 0.015).abs() < 1e-12);
    assert!((f.get(&ols::arch_term(Architecture::DwblockMini)).unwrap().estimate - 0.04).abs() < 1e-12);
    assert!(f.residual_variance < 1e-24);
}

#[test]
fn full_coverage_equals_confusion_accuracy() {
    let mut r = rng(2);
    for _ in 0..200 {
        let n = r.random_range(1..300);
        let probs = random_probs(&mut r, n);
        let truth = random_truth(&mut r, n);
        let pred: Vec<Score> = probs.iter().map(|p| Score::ALL[argmax(p)]).collect();
        let curve = triage_curve(&probs, &truth).unwrap();
        let m = confusion_matrix(&pred, &truth).unwrap();
        assert_eq!(*curve.cumulative_accuracy.last().unwrap(), m.accuracy());
        assert_eq!(curve.overall_accuracy(), m.accuracy());
        for c in 0..3 {
            let row: usize = m.counts[c].iter().sum();
            let want = (row > 0).then(|| m.counts[c][c] as f64 / row as f64);
            assert_eq!(*curve.per_class[c].last().unwrap(), want);
        }
        assert!(curve.confidence.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn prefix_accuracies_match_recomputation() {
    let mut r = rng(3);
    for _ in 0..20 {
        let n = 200;
        let probs = random_probs(&mut r, n);
        let truth = random_truth(&mut r, n);
        let curve = triage_curve(&probs, &truth).unwrap();
        let order = oracle_order(&probs);
        assert_eq!(curve.order, order);
        for k in 1..=n {
            let hits = order[..k].iter().filter(|&&i| argmax(&probs[i]) == truth[i].index()).count();
            assert_eq!(curve.cumulative_accuracy[k - 1], hits as f64 / k as f64);
            for c in 0..3 {
                let members: Vec<usize> = order[..k].iter().cloned().filter(|&i| truth[i].index() == c).collect();
                let want = (!members.is_empty())
                    .then(|| members.iter().filter(|&&i| argmax(&probs[i]) == c).count() as f64 / members.len() as f64);
                assert_eq!(curve.per_class[c][k - 1], want);
            }
        }
    }
}

#[test]
fn threshold_is_the_largest_qualifying_prefix() {
    let mut r = rng(4);
    for _ in 0..1000 {
        let n = r.random_range(1..60);
        let probs = random_probs(&mut r, n);
        let truth = random_truth(&mut r, n);
        let target = r.random_range(0.05..=1.0);
        let curve = triage_curve(&probs, &truth).unwrap();
        let got = threshold_for_accuracy(&curve, target).unwrap();
        let order = oracle_order(&probs);
        let best = prefix_scan(&probs, &truth, target);
        assert_eq!(got.count, best);
        assert_eq!(got.coverage, best as f64 / n as f64);
        if best > 0 {
            let last = order[best - 1];
            assert_eq!(got.confidence, Some(probs[last][argmax(&probs[last])]));
        } else {
            assert_eq!(got.confidence, None);
        }
    }
}

#[test]
fn top_errors_match_filter_then_sort() {
    let mut r = rng(5);
    for _ in 0..300 {
        let n = r.random_range(1..80);
        let probs = random_probs(&mut r, n);
        let truth = random_truth(&mut r, n);
        let ids: Vec<u64> = (0..n as u64).map(|i| 1000 + i).collect();
        let k = r.random_range(1..10);
        let mut want: Vec<(u64, f64)> =
            (0..n).filter(|&i| argmax(&probs[i]) != truth[i].index()).map(|i| (ids[i], probs[i][argmax(&probs[i])])).collect();
        want.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let got = match top_confident_errors(&ids, &probs, &truth, k) {
            Ok(v) => {
                assert!(want.len() >= k);
                v
            }
            Err(AnalysisError::FewerThanK { requested, found }) => {
                assert_eq!(requested, k);
                assert!(want.len() < k);
                found
            }
            Err(e) => panic!("{e}"),
        };
        want.truncate(k);
        assert_eq!(got.iter().map(|e| (e.id, e.confidence)).collect::<Vec<_>>(), want);
    }
}

#[test]
fn association_recovers_simulated_rates() {
    let mut r = rng(6);
    let rates = [2.52, 2.09, 5.61];
    let n = 50_000;
    let scores: Vec<Score> = (0..n).map(|i| Score::ALL[i % 3]).collect();
    let flags: Vec<bool> = scores.iter().map(|s| r.random_bool(rates[s.index()] / 100.0)).collect();
    let table = association_table(&scores, &flags).unwrap();
    for c in 0..3 {
        assert!((table[c].unwrap() - rates[c]).abs() <= 0.5, "class {c}: {:?}", table[c]);
    }
    let none = association_table(&scores, &vec![false; n]).unwrap();
    assert_eq!(none, [Some(0.0); 3]);
}

#[test]
fn row_percentages_sum_to_one_hundred() {
    let mut r = rng(7);
    for _ in 0..500 {
        let n = r.random_range(1..400);
        let pred = random_truth(&mut r, n);
        let truth = random_truth(&mut r, n);
        let m = confusion_matrix(&pred, &truth).unwrap();
        for row in m.row_percentages().iter().flatten() {
            let rounded: f64 = row.iter().map(|v| (v * 10.0).round() / 10.0).sum();
            assert!((row.iter().sum::<f64>() - 100.0).abs() < 1e-9);
            assert!((rounded - 100.0).abs() <= 0.15 + 1e-9);
        }
    }
}

#[test]
fn grid_resume_recomputes_only_missing_cells() {
    let data = generate_dataset(&DatasetConfig { n: 48, input_size: 16, seed: 2, ..Default::default() }).unwrap();
    let mut spec = GridSpec::desk(vec![Architecture::BaselineMini], vec![1]);
    spec.epoch_arms = [1, 2];
    spec.input_size = 16;
    spec.batch_size = 16;
    spec.optimizer = OptimizerKind::adam(2e-3);
    let first = run_grid(&data, &spec, &[], 2, |_| {}).unwrap();
    assert_eq!(first.records.len(), 12);
    assert_eq!(first.computed, 12);
    check_complete(&spec, &first.records).unwrap();

    let mut kept = first.records.clone();
    for i in [10, 7, 5, 2, 0] {
        kept.remove(i);
    }
    assert_eq!(missing_cells(&spec, &kept).len(), 5);
    match check_complete(&spec, &kept) {
        Err(AnalysisError::PartialGrid { missing }) => assert_eq!(missing.len(), 5),
        other => panic!("expected a partial grid, got {other:?}"),
    }
    let seen = std::sync::atomic::AtomicUsize::new(0);
    let second = run_grid(&data, &spec, &kept, 1, |_| {
        seen.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
    })
    .unwrap();
    assert_eq!(second.computed, 5);
    assert_eq!(seen.into_inner(), 5);
    let strip = |v: &[ExperimentRecord]| v.iter().map(|r| serde_json::to_string(r).unwrap()).collect::<Vec<_>>();
    assert_eq!(strip(&second.records), strip(&first.records));
}
