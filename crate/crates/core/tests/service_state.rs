use std::collections::BTreeMap;

use cubescore::analysis::{threshold_for_accuracy, triage_curve};
use cubescore::nn::argmax;
use cubescore::rng::{self, Purpose};
use cubescore::score::Score;
use cubescore::service::Service;
use cubescore::service::{ServiceError, Status};
use cubescore::synth::{apply_label_noise, class_sequence, NoiseChannel, DEFAULT_SHARES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{logical_clock, random_session, simulated_prediction};

#[test]
fn random_interleavings_keep_invariants_and_replay_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let r = random_session(2024, 10_000, dir.path());
    assert_eq!(r.violations, Vec::<String>::new());
    assert_eq!(r.accepted, 10_000);
    assert!(r.rejected > 0);
    assert!(r.stats.queue.finalized > 0 && r.stats.queue.auto_scored > 0 && r.stats.arbitration_cases > 0);
    assert!(r.replay_identical, "replay differs from the live store");
    assert!(r.reopen_identical, "reopened log differs from the live store");
}

#[test]
fn duplicate_votes_and_closed_cases_are_refused() {
    let mut svc = logical_clock(Service::in_memory(None));
    let d = svc.submit_prediction("a".into(), [0.5, 0.3, 0.2], false, Some(0.9), None).unwrap();
    assert_eq!(d.status, Status::PendingReview);
    svc.add_vote(d.id, "s1", Score::Correct).unwrap();
    let snap = svc.snapshot_json();
    assert!(matches!(svc.add_vote(d.id, "s1", Score::Incorrect), Err(ServiceError::DuplicateVote { .. })));
    assert_eq!(svc.snapshot_json(), snap);
    svc.add_vote(d.id, "s2", Score::PartiallyCorrect).unwrap();
    let rec = svc.add_vote(d.id, "s3", Score::PartiallyCorrect).unwrap();
    assert_eq!(rec.status, Status::UnderArbitration);
    assert!(matches!(svc.add_vote(d.id, "s4", Score::Correct), Err(ServiceError::WrongState { .. })));
    let case = svc.store().open_cases().next().unwrap().id;
    assert!(matches!(svc.resolve_arbitration(case, Score::Correct, &["solo".into()]), Err(ServiceError::BadRequest(_))));
    let done = svc.resolve_arbitration(case, Score::PartiallyCorrect, &["s1".into(), "lead".into()]).unwrap();
    assert_eq!((done.status, done.final_score), (Status::Finalized, Some(Score::PartiallyCorrect)));
    assert!(matches!(svc.resolve_arbitration(case, Score::Correct, &["a".into(), "b".into()]), Err(ServiceError::CaseClosed(_))));
    // the two matching votes agree with each other, the third does not
    let agreement = svc.stats().pairwise_agreement.unwrap();
    assert!((agreement - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn simulated_interviewer_votes_arbitrate_about_half() {
    let n = 1776;
    let channel = NoiseChannel::interviewer_default();
    let golds = class_sequence(n, &DEFAULT_SHARES, 7);
    let mut svc = logical_clock(Service::in_memory(None));
    for (i, &g) in golds.iter().enumerate() {
        let d = svc.submit_prediction(format!("d{i}"), [0.4, 0.3, 0.3], false, Some(1.0), Some(g)).unwrap();
        let mut noise = rng::stream(7, Purpose::Noise, i as u64);
        for s in 0..3 {
            let vote = apply_label_noise(g, &channel, &mut noise);
            svc.add_vote(d.id, &format!("scorer-{s}"), vote).unwrap();
        }
    }
    let stats = svc.stats();
    let rate = stats.arbitration_rate.unwrap();
    let paper = 905.0 / 1776.0;
    assert!((rate - paper).abs() <= 0.15, "arbitration rate {rate}");
    // three scorers from the same channel: unanimity probability per class
    let m = channel.matrix();
    let unanimous: f64 = (0..3).map(|g| DEFAULT_SHARES[g] * m[g].iter().map(|p| p.powi(3)).sum::<f64>()).sum();
    assert!((rate - (1.0 - unanimous)).abs() < 0.04, "rate {rate} vs expected {}", 1.0 - unanimous);
}

#[test]
fn realized_auto_accuracy_matches_the_curve() {
    let mut r = ChaCha8Rng::seed_from_u64(77);
    let golds = class_sequence(8000, &DEFAULT_SHARES, 3);
    let (val, prod) = golds.split_at(3000);
    let val_probs: Vec<[f64; 3]> = val.iter().map(|&g| simulated_prediction(g, &mut r)).collect();
    let curve = triage_curve(&val_probs, val).unwrap();
    for target in [0.9, 0.95] {
        let choice = threshold_for_accuracy(&curve, target).unwrap();
        let t = choice.confidence.unwrap();
        let predicted = curve.accuracy_at(t).unwrap();
        let mut svc = logical_clock(Service::in_memory(None));
        let mut rr = ChaCha8Rng::seed_from_u64(78);
        for (i, &g) in prod.iter().enumerate() {
            let p = simulated_prediction(g, &mut rr);
            let rec = svc.submit_prediction(format!("p{i}"), p, false, Some(t), Some(g)).unwrap();
            assert_eq!(rec.status == Status::AutoScored, p[argmax(&p)] >= t);
        }
        let stats = svc.stats();
        assert!(stats.auto_scored_with_gold >= 1000);
        let realized = stats.auto_score_accuracy.unwrap();
        assert!((realized - predicted).abs() <= 0.03, "target {target}: realized {realized} vs curve {predicted}");
        let coverage = stats.auto_score_coverage.unwrap();
        assert!((coverage - choice.coverage).abs() <= 0.05, "coverage {coverage} vs {}", choice.coverage);
    }
}

#[test]
fn threshold_bounds() {
    let mut svc = Service::in_memory(None);
    assert!(svc.submit_prediction("x".into(), [1.0, 0.0, 0.0], false, Some(1.0 + 1e-9), None).is_err());
    let at_one = svc.submit_prediction("x".into(), [1.0, 0.0, 0.0], false, Some(1.0), None).unwrap();
    assert_eq!(at_one.status, Status::AutoScored);
    let below = svc.submit_prediction("y".into(), [0.999, 0.001, 0.0], false, Some(1.0), None).unwrap();
    assert_eq!(below.status, Status::PendingReview);
    let hi = svc.submit_prediction("z".into(), [0.99, 0.005, 0.005], false, Some(0.9), None).unwrap();
    assert_eq!(hi.status, Status::AutoScored);
    let lo = svc.submit_prediction("w".into(), [0.51, 0.29, 0.2], false, Some(0.9), None).unwrap();
    assert!(lo.status == Status::PendingReview && lo.votes.is_empty());
    let counts: BTreeMap<Status, usize> = svc.store().drawings.values().fold(BTreeMap::new(), |mut m, d| {
        *m.entry(d.status).or_default() += 1;
        m
    });
    assert_eq!(counts.values().sum::<usize>(), 4);
}
