//! Confidence-triage scoring service.
//!
//! Drawings the model is confident about are scored automatically; the
//! rest wait for three blinded human votes, and any disagreement opens an
//! arbitration case. State is a fold over an append-only event log.

pub mod http;
pub mod store;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::TriageCurve;
use crate::image::{self, CropConfig, GrayTensor, ImageError};
use crate::nn::{argmax, Model, Tensor4};
use crate::score::Score;
use crate::train::hex_digest;

pub use store::{ArbitrationCase, AuditEntry, DrawingRecord, Event, QueueDepths, ScorerVote, Stats, Status, Store};

pub const SCHEMA_VERSION: u32 = 1;
pub const EVENT_LOG_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("drawing {id} is {}, not pending review", status.as_str())]
    WrongState { id: u64, status: Status },
    #[error("scorer {scorer_id} already voted on drawing {id}")]
    DuplicateVote { id: u64, scorer_id: String },
    #[error("arbitration case {0} is already closed")]
    CaseClosed(u64),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("no model checkpoint is loaded")]
    ModelUnavailable,
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("event log: {0}")]
    Log(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    /// Stable machine-readable code used in HTTP error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::WrongState { .. } => "wrong_state",
            ServiceError::DuplicateVote { .. } => "duplicate_vote",
            ServiceError::CaseClosed(_) => "case_closed",
            ServiceError::BadRequest(_) | ServiceError::InvalidEvent(_) => "bad_request",
            ServiceError::ModelUnavailable => "model_unavailable",
            ServiceError::Image(_) => "invalid_image",
            ServiceError::Log(_) | ServiceError::Io(_) => "internal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub threshold: f64,
    pub crop: CropConfig,
    /// Event log, snapshot and tensors live here; `None` keeps everything
    /// in memory.
    pub data_dir: Option<PathBuf>,
    /// Show the model's score to arbitration deciders.
    pub reveal_model_score_in_arbitration: bool,
    /// Directory served under `/ui/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            threshold: 0.9,
            crop: CropConfig::default(),
            data_dir: None,
            reveal_model_score_in_arbitration: false,
            static_dir: None,
        }
    }
}

type Clock = Box<dyn Fn() -> u64 + Send + Sync>;

fn wall_clock_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

pub struct Service {
    config: ServiceConfig,
    store: Store,
    events: Vec<Event>,
    log: Option<fs::File>,
    tensors: BTreeMap<String, GrayTensor>,
    model: Option<Model>,
    curve: Option<TriageCurve>,
    clock: Clock,
}

impl Service {
    /// Opens a service, replaying the event log in `config.data_dir` if one
    /// exists.
    pub fn open(config: ServiceConfig, model: Option<Model>) -> Result<Self, ServiceError> {
        store::check_threshold(config.threshold)?;
        let mut events = Vec::new();
        let mut log = None;
        if let Some(dir) = &config.data_dir {
            fs::create_dir_all(dir.join("tensors"))?;
            let path = dir.join(EVENT_LOG_FILE);
            if path.exists() {
                events = read_event_log(&path)?;
            }
            log = Some(fs::OpenOptions::new().create(true).append(true).open(&path)?);
        }
        let store = Store::replay(&events)?;
        Ok(Service { config, store, events, log, tensors: BTreeMap::new(), model, curve: None, clock: Box::new(wall_clock_ms) })
    }

    pub fn in_memory(model: Option<Model>) -> Self {
        Self::open(ServiceConfig::default(), model).expect("default config is valid")
    }

    /// Replaces the wall clock, e.g. with a logical counter in tests.
    pub fn with_clock(mut self, clock: impl Fn() -> u64 + Send + Sync + 'static) -> Self {
        self.clock = Box::new(clock);
        self
    }

    pub fn with_curve(mut self, curve: TriageCurve) -> Self {
        self.curve = Some(curve);
        self
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn curve(&self) -> Option<&TriageCurve> {
        self.curve.as_ref()
    }

    pub fn model(&self) -> Option<&Model> {
        self.model.as_ref()
    }

    pub fn drawing(&self, id: u64) -> Result<&DrawingRecord, ServiceError> {
        self.store.drawings.get(&id).ok_or(ServiceError::NotFound(format!("drawing {id}")))
    }

    fn commit(&mut self, event: Event) -> Result<(), ServiceError> {
        self.store.apply(&event)?;
        if let Some(f) = &mut self.log {
            let mut line = serde_json::to_string(&event).map_err(|e| ServiceError::Log(e.to_string()))?;
            line.push('\n');
            if let Err(e) = f.write_all(line.as_bytes()).and_then(|_| f.flush()) {
                self.store = Store::replay(&self.events)?;
                return Err(e.into());
            }
        }
        self.events.push(event);
        Ok(())
    }

    fn store_tensor(&mut self, tensor: GrayTensor) -> Result<String, ServiceError> {
        let bytes = tensor.to_binary();
        let key = hex_digest(&bytes);
        if let Some(dir) = &self.config.data_dir {
            let path = dir.join("tensors").join(format!("{key}.bin"));
            if !path.exists() {
                fs::write(path, &bytes)?;
            }
        }
        self.tensors.insert(key.clone(), tensor);
        Ok(key)
    }

    pub fn tensor(&self, tensor_ref: &str) -> Option<GrayTensor> {
        if let Some(t) = self.tensors.get(tensor_ref) {
            return Some(t.clone());
        }
        let dir = self.config.data_dir.as_ref()?;
        let bytes = fs::read(dir.join("tensors").join(format!("{tensor_ref}.bin"))).ok()?;
        GrayTensor::read_binary(&bytes[..]).ok()
    }

    fn predict(&self, tensor: &GrayTensor) -> Result<[f64; 3], ServiceError> {
        let model = self.model.as_ref().ok_or(ServiceError::ModelUnavailable)?;
        let shape = model.input_shape();
        if (tensor.height(), tensor.width()) != (shape.h, shape.w) {
            return Err(ServiceError::BadRequest(format!(
                "tensor is {}x{}, model expects {}x{}",
                tensor.height(),
                tensor.width(),
                shape.h,
                shape.w
            )));
        }
        let x = Tensor4::from_grays([tensor]);
        let probs = model.predict_proba(&x).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        Ok(probs[0])
    }

    /// Decodes and preprocesses a scan, scores it, and routes it by
    /// confidence. Blank scans always go to review.
    pub fn submit_image(&mut self, bytes: &[u8], threshold: Option<f64>, gold: Option<Score>) -> Result<DrawingRecord, ServiceError> {
        let model = self.model.as_ref().ok_or(ServiceError::ModelUnavailable)?;
        let shape = model.input_shape();
        let pre = image::preprocess_bytes(bytes, &self.config.crop, shape.h, shape.w)?;
        self.submit_scored(pre.tensor, pre.empty, threshold, gold)
    }

    /// Scores an already preprocessed tensor.
    pub fn submit_tensor(
        &mut self,
        tensor: GrayTensor,
        threshold: Option<f64>,
        gold: Option<Score>,
    ) -> Result<DrawingRecord, ServiceError> {
        let empty = tensor.ink_mass() == 0.0;
        self.submit_scored(tensor, empty, threshold, gold)
    }

    fn submit_scored(
        &mut self,
        tensor: GrayTensor,
        empty: bool,
        threshold: Option<f64>,
        gold: Option<Score>,
    ) -> Result<DrawingRecord, ServiceError> {
        let probs = self.predict(&tensor)?;
        let tensor_ref = self.store_tensor(tensor)?;
        self.submit_prediction(tensor_ref, probs, empty, threshold, gold)
    }

    /// Records a drawing with externally computed class probabilities.
    pub fn submit_prediction(
        &mut self,
        tensor_ref: String,
        probs: [f64; 3],
        empty_drawing: bool,
        threshold: Option<f64>,
        gold: Option<Score>,
    ) -> Result<DrawingRecord, ServiceError> {
        let threshold = threshold.unwrap_or(self.config.threshold);
        store::check_threshold(threshold)?;
        let k = argmax(&probs);
        let id = self.store.next_id();
        let event = Event::Submitted {
            id,
            tensor_ref,
            model_score: Score::from_index(k).expect("three classes"),
            confidence: probs[k].clamp(0.0, 1.0),
            threshold,
            empty_drawing,
            gold,
            at: (self.clock)(),
        };
        self.commit(event)?;
        Ok(self.store.drawings[&id].clone())
    }

    pub fn add_vote(&mut self, id: u64, scorer_id: &str, score: Score) -> Result<DrawingRecord, ServiceError> {
        self.commit(Event::Voted { id, scorer_id: scorer_id.to_string(), score, at: (self.clock)() })?;
        Ok(self.store.drawings[&id].clone())
    }

    pub fn resolve_arbitration(&mut self, case_id: u64, decision: Score, decider_ids: &[String]) -> Result<DrawingRecord, ServiceError> {
        self.commit(Event::Resolved { case_id, decision, decider_ids: decider_ids.to_vec(), at: (self.clock)() })?;
        let drawing = self.store.cases[&case_id].drawing_id;
        Ok(self.store.drawings[&drawing].clone())
    }

    pub fn stats(&self) -> Stats {
        self.store.stats()
    }

    /// Canonical JSON of the derived state.
    pub fn snapshot_json(&self) -> String {
        serde_json::to_string_pretty(&self.store).expect("store serializes")
    }

    pub fn write_snapshot(&self) -> Result<Option<PathBuf>, ServiceError> {
        let Some(dir) = &self.config.data_dir else { return Ok(None) };
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.snapshot_json())?;
        Ok(Some(path))
    }
}

/// Reads an event log; a torn final line from an interrupted append is
/// dropped.
pub fn read_event_log(path: &Path) -> Result<Vec<Event>, ServiceError> {
    let lines: Vec<String> = BufReader::new(fs::File::open(path)?).lines().collect::<Result<_, _>>()?;
    let mut events = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => events.push(e),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(ServiceError::Log(format!("line {}: {e}", i + 1))),
        }
    }
    Ok(events)
}
