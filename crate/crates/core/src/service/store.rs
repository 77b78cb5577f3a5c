//! Event-sourced drawing store and the review state machine.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ServiceError;
use crate::score::Score;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    AutoScored,
    PendingReview,
    UnderArbitration,
    Finalized,
}

impl Status {
    pub const ALL: [Status; 4] = [Status::AutoScored, Status::PendingReview, Status::UnderArbitration, Status::Finalized];

    pub fn as_str(self) -> &'static str {
        match self {
            Status::AutoScored => "auto_scored",
            Status::PendingReview => "pending_review",
            Status::UnderArbitration => "under_arbitration",
            Status::Finalized => "finalized",
        }
    }
}

pub const VOTES_REQUIRED: usize = 3;
pub const MIN_DECIDERS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerVote {
    pub scorer_id: String,
    pub score: Score,
    pub timestamp: u64,
    pub blinded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub timestamp: u64,
    pub from: Option<Status>,
    pub to: Status,
    pub actors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawingRecord {
    pub id: u64,
    /// SHA-256 of the stored tensor file.
    pub tensor_ref: String,
    pub model_score: Score,
    pub confidence: f64,
    pub threshold: f64,
    pub status: Status,
    pub final_score: Option<Score>,
    pub votes: Vec<ScorerVote>,
    pub audit: Vec<AuditEntry>,
    pub empty_drawing: bool,
    /// Known true label in synthetic mode.
    pub gold: Option<Score>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitrationCase {
    pub id: u64,
    pub drawing_id: u64,
    pub votes: Vec<ScorerVote>,
    pub decision: Option<Score>,
    pub decider_ids: Vec<String>,
}

impl ArbitrationCase {
    pub fn is_open(&self) -> bool {
        self.decision.is_none()
    }

    /// Score with two or more of the votes, if any.
    pub fn majority(&self) -> Option<Score> {
        Score::ALL.into_iter().find(|s| self.votes.iter().filter(|v| v.score == *s).count() * 2 > self.votes.len())
    }
}

/// Everything that changes the store. The log of these is the source of
/// truth; the store is a fold over it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Submitted {
        id: u64,
        tensor_ref: String,
        model_score: Score,
        confidence: f64,
        threshold: f64,
        empty_drawing: bool,
        gold: Option<Score>,
        at: u64,
    },
    Voted {
        id: u64,
        scorer_id: String,
        score: Score,
        at: u64,
    },
    Resolved {
        case_id: u64,
        decision: Score,
        decider_ids: Vec<String>,
        at: u64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Store {
    pub drawings: BTreeMap<u64, DrawingRecord>,
    pub cases: BTreeMap<u64, ArbitrationCase>,
    next_id: u64,
    next_case: u64,
}

impl Store {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Rebuilds a store from its event log.
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a Event>) -> Result<Store, ServiceError> {
        let mut s = Store::new();
        for e in events {
            s.apply(e)?;
        }
        Ok(s)
    }

    /// Validates and applies one event. A rejected event leaves the store
    /// untouched.
    pub fn apply(&mut self, event: &Event) -> Result<(), ServiceError> {
        match event {
            Event::Submitted { id, tensor_ref, model_score, confidence, threshold, empty_drawing, gold, at } => {
                if *id != self.next_id {
                    return Err(ServiceError::InvalidEvent(format!("expected drawing id {}, got {id}", self.next_id)));
                }
                check_threshold(*threshold)?;
                if !(0.0..=1.0).contains(confidence) {
                    return Err(ServiceError::InvalidEvent(format!("confidence {confidence} outside [0, 1]")));
                }
                let auto = !empty_drawing && *confidence >= *threshold;
                let status = if auto { Status::AutoScored } else { Status::PendingReview };
                self.drawings.insert(
                    *id,
                    DrawingRecord {
                        id: *id,
                        tensor_ref: tensor_ref.clone(),
                        model_score: *model_score,
                        confidence: *confidence,
                        threshold: *threshold,
                        status,
                        final_score: auto.then_some(*model_score),
                        votes: Vec::new(),
                        audit: vec![AuditEntry { timestamp: *at, from: None, to: status, actors: vec!["model".into()] }],
                        empty_drawing: *empty_drawing,
                        gold: *gold,
                    },
                );
                self.next_id += 1;
            }
            Event::Voted { id, scorer_id, score, at } => {
                let rec = self.drawings.get_mut(id).ok_or(ServiceError::NotFound(format!("drawing {id}")))?;
                if scorer_id.trim().is_empty() {
                    return Err(ServiceError::BadRequest("scorer id must not be empty".into()));
                }
                if rec.status != Status::PendingReview {
                    return Err(ServiceError::WrongState { id: *id, status: rec.status });
                }
                if rec.votes.iter().any(|v| v.scorer_id == *scorer_id) {
                    return Err(ServiceError::DuplicateVote { id: *id, scorer_id: scorer_id.clone() });
                }
                rec.votes.push(ScorerVote { scorer_id: scorer_id.clone(), score: *score, timestamp: *at, blinded: true });
                if rec.votes.len() == VOTES_REQUIRED {
                    let first = rec.votes[0].score;
                    let actors = rec.votes.iter().map(|v| v.scorer_id.clone()).collect();
                    if rec.votes.iter().all(|v| v.score == first) {
                        rec.status = Status::Finalized;
                        rec.final_score = Some(first);
                        rec.audit.push(AuditEntry { timestamp: *at, from: Some(Status::PendingReview), to: Status::Finalized, actors });
                    } else {
                        rec.status = Status::UnderArbitration;
                        rec.audit.push(AuditEntry {
                            timestamp: *at,
                            from: Some(Status::PendingReview),
                            to: Status::UnderArbitration,
                            actors,
                        });
                        let case = ArbitrationCase {
                            id: self.next_case,
                            drawing_id: *id,
                            votes: rec.votes.clone(),
                            decision: None,
                            decider_ids: Vec::new(),
                        };
                        self.cases.insert(self.next_case, case);
                        self.next_case += 1;
                    }
                }
            }
            Event::Resolved { case_id, decision, decider_ids, at } => {
                let case = self.cases.get_mut(case_id).ok_or(ServiceError::NotFound(format!("arbitration case {case_id}")))?;
                if !case.is_open() {
                    return Err(ServiceError::CaseClosed(*case_id));
                }
                let distinct: BTreeSet<&str> = decider_ids.iter().map(|d| d.trim()).filter(|d| !d.is_empty()).collect();
                if distinct.len() < MIN_DECIDERS || distinct.len() != decider_ids.len() {
                    return Err(ServiceError::BadRequest(format!("need at least {MIN_DECIDERS} distinct decider ids")));
                }
                let rec = self.drawings.get_mut(&case.drawing_id).expect("case refers to a stored drawing");
                case.decision = Some(*decision);
                case.decider_ids = decider_ids.clone();
                rec.status = Status::Finalized;
                rec.final_score = Some(*decision);
                rec.audit.push(AuditEntry {
                    timestamp: *at,
                    from: Some(Status::UnderArbitration),
                    to: Status::Finalized,
                    actors: decider_ids.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn open_cases(&self) -> impl Iterator<Item = &ArbitrationCase> {
        self.cases.values().filter(|c| c.is_open())
    }

    pub fn with_status(&self, status: Status) -> impl Iterator<Item = &DrawingRecord> {
        self.drawings.values().filter(move |d| d.status == status)
    }

    pub fn stats(&self) -> Stats {
        let total = self.drawings.len();
        let count = |s| self.with_status(s).count();
        let queue = QueueDepths {
            auto_scored: count(Status::AutoScored),
            pending_review: count(Status::PendingReview),
            under_arbitration: count(Status::UnderArbitration),
            finalized: count(Status::Finalized),
        };
        let reviewed = self.drawings.values().filter(|d| d.votes.len() == VOTES_REQUIRED).count();
        let (mut agree, mut pairs) = (0usize, 0usize);
        for d in self.with_status(Status::Finalized) {
            for i in 0..d.votes.len() {
                for j in i + 1..d.votes.len() {
                    pairs += 1;
                    agree += (d.votes[i].score == d.votes[j].score) as usize;
                }
            }
        }
        let auto_with_gold: Vec<&DrawingRecord> = self.with_status(Status::AutoScored).filter(|d| d.gold.is_some()).collect();
        let auto_hits = auto_with_gold.iter().filter(|d| d.gold == d.final_score).count();
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        Stats {
            total,
            auto_score_coverage: ratio(queue.auto_scored, total),
            queue,
            arbitration_cases: self.cases.len(),
            open_arbitration_cases: self.open_cases().count(),
            reviewed,
            arbitration_rate: ratio(self.cases.len(), reviewed),
            pairwise_agreement: ratio(agree, pairs),
            auto_scored_with_gold: auto_with_gold.len(),
            auto_score_accuracy: ratio(auto_hits, auto_with_gold.len()),
        }
    }
}

pub fn check_threshold(t: f64) -> Result<(), ServiceError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(ServiceError::BadRequest(format!("threshold {t} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueDepths {
    pub auto_scored: usize,
    pub pending_review: usize,
    pub under_arbitration: usize,
    pub finalized: usize,
}

/// Service metrics; ratios with an empty denominator are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub total: usize,
    pub auto_score_coverage: Option<f64>,
    pub queue: QueueDepths,
    pub arbitration_cases: usize,
    pub open_arbitration_cases: usize,
    /// Drawings that received all three votes.
    pub reviewed: usize,
    pub arbitration_rate: Option<f64>,
    pub pairwise_agreement: Option<f64>,
    pub auto_scored_with_gold: usize,
    pub auto_score_accuracy: Option<f64>,
}
