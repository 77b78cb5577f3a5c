//! Oracles, simulators and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use cubescore::analysis::{ExperimentRecord, GridSpec};
use cubescore::augment::AugmentArm;
use cubescore::cli::is_timing_file;
use cubescore::nn::{argmax, softmax_cross_entropy, Architecture, Model, Shape, Tensor4};
use cubescore::score::Score;
use cubescore::service::{Service, ServiceConfig, ServiceError, Status, Store};
use cubescore::train::{hex_digest, LabelSource};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(r: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u: f64 = r.random_range(f64::EPSILON..1.0);
    let v: f64 = r.random();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

pub fn random_probs(r: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            // coarse values so ties in confidence actually occur
            let w: [f64; 3] = std::array::from_fn(|_| r.random_range(1..8) as f64);
            let s: f64 = w.iter().sum();
            w.map(|v| v / s)
        })
        .collect()
}

pub fn random_truth(r: &mut ChaCha8Rng, n: usize) -> Vec<Score> {
    (0..n).map(|_| Score::ALL[r.random_range(0..3)]).collect()
}

/// Row-major design with an intercept column and a mix of binary and
/// continuous regressors.
pub fn random_design(r: &mut ChaCha8Rng) -> (Vec<f64>, usize, usize, Vec<f64>) {
    let n = r.random_range(12..80);
    let p = r.random_range(2..8);
    let mut x = Vec::with_capacity(n * p);
    for _ in 0..n {
        x.push(1.0);
        for _ in 1..p {
            x.push(if r.random_bool(0.5) { gauss(r) } else { r.random_range(0..2) as f64 });
        }
    }
    let y = (0..n).map(|_| gauss(r)).collect();
    (x, n, p, y)
}

pub struct NormalEquations {
    pub beta: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub sigma2: f64,
}

/// β = (XᵀX)⁻¹Xᵀy by explicit inversion.
pub fn normal_equations(x: &[f64], n: usize, p: usize, y: &[f64]) -> NormalEquations {
    let xm = DMatrix::from_row_slice(n, p, x);
    let yv = DVector::from_column_slice(y);
    let xtx_inv = (xm.transpose() * &xm).try_inverse().expect("full rank design");
    let beta = &xtx_inv * xm.transpose() * &yv;
    let resid = &yv - &xm * &beta;
    let sigma2 = resid.norm_squared() / (n - p) as f64;
    NormalEquations {
        beta: beta.iter().cloned().collect(),
        std_errors: (0..p).map(|j| (sigma2 * xtx_inv[(j, j)]).sqrt()).collect(),
        sigma2,
    }
}

/// Desk-grid records with additive planted effects plus Gaussian noise.
pub fn planted_records(seed: u64, gold_effect: f64, sigma: f64) -> Vec<ExperimentRecord> {
    let mut r = rng(seed);
    let spec = GridSpec::desk(Architecture::ALL.to_vec(), vec![1, 2, 3]);
    spec.cells()
        .into_iter()
        .map(|c| {
            let arch = match c.arch {
                Architecture::BaselineMini => 0.0,
                Architecture::DeepMini => 0.02,
                Architecture::DwblockMini => 0.04,
            };
            let aug = match c.augment {
                AugmentArm::None => 0.0,
                AugmentArm::Transform => 0.015,
                AugmentArm::TransformResize => 0.01,
            };
            let gold = if c.label_source == LabelSource::Gold { gold_effect } else { 0.0 };
            let long = if c.epochs == spec.epoch_arms[1] { 0.005 } else { 0.0 };
            ExperimentRecord {
                arch: c.arch,
                label_source: c.label_source,
                epochs: c.epochs,
                augment: c.augment,
                seed: c.seed,
                val_accuracy: 0.70 + gold + long + aug + arch + sigma * gauss(&mut r),
                acc_correct: None,
                acc_partially_correct: None,
                acc_incorrect: None,
                runtime_seconds: 0.0,
            }
        })
        .collect()
}

/// Descending confidence, ties by index.
pub fn oracle_order(probs: &[[f64; 3]]) -> Vec<usize> {
    let conf: Vec<f64> = probs.iter().map(|p| p.iter().cloned().fold(f64::MIN, f64::max)).collect();
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| conf[b].partial_cmp(&conf[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// Largest prefix of the confidence order whose accuracy reaches `target`,
/// found by recounting every prefix.
pub fn prefix_scan(probs: &[[f64; 3]], truth: &[Score], target: f64) -> usize {
    let order = oracle_order(probs);
    let mut best = 0;
    for k in 1..=order.len() {
        let hits = order[..k].iter().filter(|&&i| argmax(&probs[i]) == truth[i].index()).count();
        if hits as f64 / k as f64 >= target {
            best = k;
        }
    }
    best
}

/// Class probabilities of a noisy classifier whose confidence tracks its
/// correctness.
pub fn simulated_prediction(gold: Score, r: &mut ChaCha8Rng) -> [f64; 3] {
    let skill: f64 = r.random_range(0.0..1.0);
    let right = r.random_bool((0.5 + 0.55 * skill).min(1.0));
    let top = if right { gold.index() } else { (gold.index() + r.random_range(1..3)) % 3 };
    let peak = 0.34 + 0.65 * skill * r.random_range(0.7..1.0);
    let rest = 1.0 - peak;
    let split: f64 = r.random_range(0.0..1.0);
    let mut p = [0.0; 3];
    p[top] = peak;
    p[(top + 1) % 3] = rest * split;
    p[(top + 2) % 3] = rest * (1.0 - split);
    p
}

pub struct CheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters whose ±eps passes crossed a ReLU or max-pool switch.
    pub kinked: usize,
}

fn loss_and_pattern(model: &Model, x: &Tensor4, labels: &[Score]) -> (f64, u64) {
    let (logits, cache) = model.forward(x, None).unwrap();
    (softmax_cross_entropy(&logits, labels).0, cache.activation_pattern())
}

/// Samples parameters without replacement until `want` of them have a
/// kink-free central difference, and reports the worst relative error.
pub fn gradient_check(model: &mut Model, x: &Tensor4, labels: &[Score], want: usize, eps: f64, seed: u64) -> CheckReport {
    let (logits, cache) = model.forward(x, None).unwrap();
    let base_pattern = cache.activation_pattern();
    let (_, dlogits) = softmax_cross_entropy(&logits, labels);
    let analytic = model.backward(cache, &dlogits).unwrap().params;
    let n = model.num_params();
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng(seed);
    let mut report = CheckReport { max_relative_error: 0.0, checked: 0, kinked: 0 };
    for k in 0..n {
        if report.checked == want {
            break;
        }
        let j = r.random_range(k..n);
        order.swap(k, j);
        let i = order[k];
        let orig = model.params()[i];
        model.params_mut()[i] = orig + eps;
        let (up, p_up) = loss_and_pattern(model, x, labels);
        model.params_mut()[i] = orig - eps;
        let (down, p_down) = loss_and_pattern(model, x, labels);
        model.params_mut()[i] = orig;
        if p_up != base_pattern || p_down != base_pattern {
            report.kinked += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
        report.max_relative_error = report.max_relative_error.max(rel);
        report.checked += 1;
    }
    report
}

pub fn random_batch(shape: Shape, n: usize, seed: u64) -> (Tensor4, Vec<Score>) {
    let mut r = rng(seed);
    let data = (0..n * shape.len()).map(|_| r.random::<f64>()).collect();
    let labels = (0..n).map(|i| Score::ALL[i % 3]).collect();
    (Tensor4::from_vec(n, shape, data), labels)
}

pub fn logical_clock(svc: Service) -> Service {
    let t = Arc::new(AtomicU64::new(0));
    svc.with_clock(move || t.fetch_add(1, Ordering::SeqCst))
}

fn allowed(from: Option<Status>, to: Status) -> bool {
    matches!(
        (from, to),
        (None, Status::AutoScored)
            | (None, Status::PendingReview)
            | (Some(Status::PendingReview), Status::UnderArbitration)
            | (Some(Status::PendingReview), Status::Finalized)
            | (Some(Status::UnderArbitration), Status::Finalized)
    )
}

/// Transition invariants of `store`, and what it must have kept from
/// `before`.
pub fn check_invariants(store: &Store, before: &Store) -> Result<(), String> {
    macro_rules! ensure {
        ($cond:expr, $($msg:tt)+) => {
            if !$cond {
                return Err(format!($($msg)+));
            }
        };
    }
    for (id, d) in &store.drawings {
        let terminal = matches!(d.status, Status::Finalized | Status::AutoScored);
        ensure!(terminal == d.final_score.is_some(), "drawing {id}: final score and status disagree");
        if d.status == Status::AutoScored {
            ensure!(d.confidence >= d.threshold && !d.empty_drawing, "drawing {id} auto-scored below threshold");
            ensure!(d.final_score == Some(d.model_score) && d.votes.is_empty(), "drawing {id} auto-scored inconsistently");
        } else {
            ensure!(d.confidence < d.threshold || d.empty_drawing, "drawing {id} skipped auto-scoring");
        }
        let mut ids: Vec<&str> = d.votes.iter().map(|v| v.scorer_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ensure!(ids.len() == d.votes.len(), "duplicate scorer on drawing {id}");
        ensure!(d.votes.len() <= 3 && d.votes.iter().all(|v| v.blinded), "drawing {id} votes");
        if d.status == Status::UnderArbitration {
            ensure!(d.votes.len() == 3, "drawing {id} in arbitration with {} votes", d.votes.len());
        }
        for a in &d.audit {
            ensure!(allowed(a.from, a.to), "drawing {id}: {:?} -> {:?}", a.from, a.to);
        }
        ensure!(d.audit.last().map(|a| a.to) == Some(d.status), "drawing {id} audit tail");
        if let Some(old) = before.drawings.get(id) {
            ensure!(d.audit.starts_with(&old.audit), "audit rewritten on {id}");
            ensure!(d.votes.starts_with(&old.votes), "votes rewritten on {id}");
            if matches!(old.status, Status::Finalized | Status::AutoScored) {
                ensure!(d.final_score == old.final_score && d.status == old.status, "final score of {id} changed");
            }
        }
    }
    for c in store.cases.values() {
        let d = &store.drawings[&c.drawing_id];
        ensure!(c.votes.windows(2).any(|w| w[0].score != w[1].score), "case {} opened on unanimous votes", c.id);
        match c.decision {
            Some(s) => ensure!(
                d.status == Status::Finalized && d.final_score == Some(s) && c.decider_ids.len() >= 2,
                "case {} resolved inconsistently",
                c.id
            ),
            None => ensure!(d.status == Status::UnderArbitration, "open case {} on settled drawing", c.id),
        }
    }
    Ok(())
}

pub struct SessionReport {
    pub accepted: usize,
    pub rejected: usize,
    pub violations: Vec<String>,
    pub replay_identical: bool,
    pub reopen_identical: bool,
    pub stats: cubescore::service::Stats,
}

/// Random submit, vote and resolve calls against a logged service until
/// `events` of them succeed. Invariants are checked after every call.
pub fn random_session(seed: u64, events: usize, data_dir: &Path) -> SessionReport {
    let config = ServiceConfig { data_dir: Some(data_dir.to_path_buf()), ..Default::default() };
    let mut svc = logical_clock(Service::open(config.clone(), None).unwrap());
    let mut r = rng(seed);
    let scorers: Vec<String> = (0..5).map(|i| format!("scorer-{i}")).collect();
    let (mut accepted, mut rejected, mut attempts) = (0, 0, 0);
    let mut violations = Vec::new();
    while accepted < events {
        attempts += 1;
        let before = svc.store().clone();
        let before_events = svc.events().len();
        let n = svc.store().drawings.len() as u64;
        let result: Result<(), ServiceError> = match r.random_range(0..10) {
            0..=2 => {
                let w: [f64; 3] = std::array::from_fn(|_| r.random_range(0.01..1.0));
                let s: f64 = w.iter().sum();
                let threshold = [0.5, 0.8, 0.9, 1.0][r.random_range(0..4)];
                let gold = r.random_bool(0.5).then(|| Score::ALL[r.random_range(0..3)]);
                svc.submit_prediction(format!("t{attempts}"), w.map(|v| v / s), r.random_bool(0.05), Some(threshold), gold).map(|_| ())
            }
            3..=7 => {
                let id = r.random_range(0..n + 2);
                let scorer = &scorers[r.random_range(0..scorers.len())];
                svc.add_vote(id, scorer, Score::ALL[r.random_range(0..3)]).map(|_| ())
            }
            _ => {
                let open: Vec<u64> = svc.store().open_cases().map(|c| c.id).collect();
                let case = if !open.is_empty() && r.random_bool(0.8) {
                    open[r.random_range(0..open.len())]
                } else {
                    r.random_range(0..svc.store().cases.len() as u64 + 2)
                };
                let deciders = scorers[..r.random_range(1..4)].to_vec();
                svc.resolve_arbitration(case, Score::ALL[r.random_range(0..3)], &deciders).map(|_| ())
            }
        };
        match result {
            Ok(()) => {
                accepted += 1;
                if let Err(v) = check_invariants(svc.store(), &before) {
                    violations.push(v);
                }
            }
            Err(_) => {
                rejected += 1;
                if svc.store() != &before || svc.events().len() != before_events {
                    violations.push(format!("failed call {attempts} changed state"));
                }
            }
        }
    }
    let original = svc.snapshot_json();
    let replayed = Store::replay(svc.events()).map(|s| serde_json::to_string_pretty(&s).unwrap());
    let replay_identical = replayed.is_ok_and(|s| s == original);
    let stats = svc.stats();
    drop(svc);
    let reopen_identical = Service::open(config, None).map(|s| s.snapshot_json() == original).unwrap_or(false);
    SessionReport { accepted, rejected, violations, replay_identical, reopen_identical, stats }
}

pub fn cli_in(cwd: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cubescore")).current_dir(cwd).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

/// Relative path to content hash for every file under `root`, leaving out
/// wall-clock timing files.
pub fn hashes(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !is_timing_file(p.file_name().unwrap().to_str().unwrap()) {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), hex_digest(&fs::read(&p).unwrap()));
            }
        }
    }
    out
}

/// Every CLI command that writes files, at toy size, with paths relative
/// to `root`.
pub fn cli_pipeline(root: &Path, seed: &str) -> Result<(), String> {
    let preds = "train/val_predictions.csv";
    let small =
        ["--set", "dataset.input_size=16", "--set", "dataset.n=60", "--set", "grid.input_size=16", "--set", "grid.epoch_arms=[1, 2]"];
    cli_in(root, &["generate", "--n", "90", "--input-size", "16", "--seed", seed, "--out", "data"])?;
    cli_in(
        root,
        &[
            "train",
            "--data",
            "data",
            "--out",
            "train",
            "--arch",
            "baseline-mini",
            "--epochs",
            "2",
            "--seed",
            seed,
            "--set",
            "train.input_size=16",
        ],
    )?;
    cli_in(root, &["triage", "--predictions", preds, "--out", "triage", "--target", "0.9"])?;
    cli_in(root, &["analyze", "confusion", "--predictions", preds, "--out", "confusion"])?;
    cli_in(root, &["analyze", "errors", "--predictions", preds, "--data", "data", "--out", "errors"])?;
    cli_in(root, &["analyze", "channel", "--data", "data", "--out", "channel"])?;
    cli_in(root, &[&["grid", "--out", "grid", "--archs", "baseline-mini", "--seeds", "1", "--seed", seed][..], &small].concat())?;
    cli_in(root, &["analyze", "ols", "--records", "grid/records.csv", "--out", "ols"])?;
    Ok(())
}
