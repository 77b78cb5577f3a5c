//! Splitting, the training loop and single-model evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{augment_batch, AugmentPolicy};
use crate::nn::{
    self, argmax, softmax_cross_entropy, Architecture, LrSchedule, Model, ModelConfig, NnError, Optimizer, OptimizerKind, Tensor4,
};
use crate::rng::{self, Purpose};
use crate::score::Score;
use crate::synth::LabeledDrawing;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    DivergenceDetected { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Which labels the model is trained on. Validation always uses gold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Gold,
    Interviewer,
}

impl LabelSource {
    pub const ALL: [LabelSource; 2] = [LabelSource::Gold, LabelSource::Interviewer];

    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::Gold => "gold",
            LabelSource::Interviewer => "interviewer",
        }
    }

    pub fn label(self, d: &LabeledDrawing) -> Score {
        match self {
            LabelSource::Gold => d.gold,
            LabelSource::Interviewer => d.interviewer,
        }
    }
}

impl std::fmt::Display for LabelSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LabelSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        LabelSource::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown label source '{s}' (expected gold or interviewer)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_fraction: 0.75, stratified: true, seed: 0 }
    }
}

/// Indices into the dataset, each list ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Seeded split. Stratified splits allocate `round(n * fraction)` training
/// slots across gold classes by largest remainder.
pub fn split(gold: &[Score], spec: &SplitSpec) -> Result<Split, TrainError> {
    if gold.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(TrainError::InvalidConfig(format!("train fraction {} outside [0, 1]", spec.train_fraction)));
    }
    let total_train = (gold.len() as f64 * spec.train_fraction).round() as usize;
    let groups: Vec<Vec<usize>> = if spec.stratified {
        Score::ALL.iter().map(|&s| (0..gold.len()).filter(|&i| gold[i] == s).collect()).collect()
    } else {
        vec![(0..gold.len()).collect()]
    };
    let exact: Vec<f64> = groups.iter().map(|g| g.len() as f64 * spec.train_fraction).collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = total_train.saturating_sub(take.iter().sum());
    for &g in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if take[g] < groups[g].len() {
            take[g] += 1;
            missing -= 1;
        }
    }
    let mut train = Vec::with_capacity(total_train);
    let mut val = Vec::with_capacity(gold.len() - total_train);
    for (g, (members, k)) in groups.into_iter().zip(take).enumerate() {
        let mut members = members;
        members.shuffle(&mut rng::stream(spec.seed, Purpose::Split, g as u64));
        train.extend_from_slice(&members[..k]);
        val.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(Split { train, val })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub input_size: usize,
    pub label_source: LabelSource,
    pub epochs: usize,
    pub augment: AugmentPolicy,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Architecture::DwblockMini,
            input_size: 64,
            label_source: LabelSource::Gold,
            epochs: 30,
            augment: AugmentPolicy::transform(),
            batch_size: 64,
            optimizer: OptimizerKind::adam(2e-3),
            schedule: LrSchedule::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.arch, self.input_size, self.seed)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be positive".into()));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return Err(TrainError::InvalidConfig(format!("input size {} is not a multiple of 16", self.input_size)));
        }
        if self.optimizer.base_lr() <= 0.0 || !self.optimizer.base_lr().is_finite() {
            return Err(TrainError::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Metrics of one model on one labelled slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the slice.
    pub per_class_accuracy: [Option<f64>; 3],
    /// Rows are truth, columns are predictions.
    pub confusion: [[usize; 3]; 3],
    pub probabilities: Vec<[f64; 3]>,
    pub predictions: Vec<Score>,
}

/// Scores `x` against `truth` in eval mode.
pub fn evaluate(model: &Model, x: &Tensor4, truth: &[Score]) -> Result<Evaluation, TrainError> {
    if truth.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    assert_eq!(x.n, truth.len(), "one label per sample");
    let probabilities = model.predict_proba(x)?;
    let predictions: Vec<Score> = probabilities.iter().map(|p| Score::from_index(argmax(p)).expect("three classes")).collect();
    Ok(evaluation_from(probabilities, predictions, truth))
}

pub(crate) fn evaluation_from(probabilities: Vec<[f64; 3]>, predictions: Vec<Score>, truth: &[Score]) -> Evaluation {
    let mut confusion = [[0usize; 3]; 3];
    for (t, p) in truth.iter().zip(&predictions) {
        confusion[t.index()][p.index()] += 1;
    }
    let correct: usize = (0..3).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = std::array::from_fn(|c| {
        let row: usize = confusion[c].iter().sum();
        (row > 0).then(|| confusion[c][c] as f64 / row as f64)
    });
    Evaluation { accuracy: correct as f64 / truth.len() as f64, per_class_accuracy, confusion, probabilities, predictions }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: TrainConfig,
    pub train_loss: Vec<f64>,
    /// Gold validation accuracy after each epoch; empty without a
    /// validation slice.
    pub val_accuracy_by_epoch: Vec<f64>,
    pub train_accuracy: f64,
    pub validation: Option<Evaluation>,
    pub checkpoint_sha256: String,
    /// Wall-clock time; left out of the serialized record.
    #[serde(skip)]
    pub seconds: f64,
}

impl RunResult {
    pub fn val_accuracy(&self) -> Option<f64> {
        self.validation.as_ref().map(|e| e.accuracy)
    }
}

pub struct TrainedModel {
    pub model: Model,
    pub result: RunResult,
}

impl TrainedModel {
    pub fn checkpoint(&self) -> Vec<u8> {
        nn::write_checkpoint(&self.model, &self.result.config.model_config())
    }
}

/// Training and validation tensors with their labels.
pub struct Prepared {
    pub train_x: Tensor4,
    pub train_y: Vec<Score>,
    pub val_x: Tensor4,
    pub val_gold: Vec<Score>,
}

impl Prepared {
    pub fn new(data: &[LabeledDrawing], split: &Split, source: LabelSource) -> Self {
        let pick = |idx: &[usize]| Tensor4::from_grays(idx.iter().map(|&i| &data[i].tensor));
        Prepared {
            train_x: pick(&split.train),
            train_y: split.train.iter().map(|&i| source.label(&data[i])).collect(),
            val_x: pick(&split.val),
            val_gold: split.val.iter().map(|&i| data[i].gold).collect(),
        }
    }
}

/// Splits, trains on the configured label source and evaluates on gold.
pub fn train(data: &[LabeledDrawing], split: &Split, cfg: &TrainConfig) -> Result<TrainedModel, TrainError> {
    if data.is_empty() || split.train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    train_prepared(&Prepared::new(data, split, cfg.label_source), cfg)
}

pub fn train_prepared(p: &Prepared, cfg: &TrainConfig) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    if p.train_y.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let started = Instant::now();
    let mut model = cfg.model_config().build()?;
    let mut opt = Optimizer::new(cfg.optimizer, model.num_params());
    let n = p.train_y.len();
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut val_accuracy_by_epoch = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        opt.set_lr_multiplier(cfg.schedule.multiplier(epoch, cfg.epochs));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, Purpose::Shuffle, epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = p.train_x.select(batch);
            let x = augment_batch(&x, &cfg.augment, &mut rng::stream(cfg.seed, Purpose::Augment, step as u64));
            let y: Vec<Score> = batch.iter().map(|&i| p.train_y[i]).collect();
            let mut drop_rng = rng::stream(cfg.seed, Purpose::Dropout, step as u64);
            let (logits, cache) = model.forward(&x, Some(&mut drop_rng))?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &y);
            if !loss.is_finite() {
                return Err(TrainError::DivergenceDetected { epoch, step, loss });
            }
            let grads = model.backward(cache, &dlogits)?;
            opt.step(model.params_mut(), &grads.params);
            if !model.params().iter().all(|v| v.is_finite()) {
                return Err(TrainError::DivergenceDetected { epoch, step, loss: f64::NAN });
            }
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }
        train_loss.push(epoch_loss / n as f64);
        if !p.val_gold.is_empty() {
            val_accuracy_by_epoch.push(evaluate(&model, &p.val_x, &p.val_gold)?.accuracy);
        }
    }
    let train_accuracy = evaluate(&model, &p.train_x, &p.train_y)?.accuracy;
    let validation = if p.val_gold.is_empty() { None } else { Some(evaluate(&model, &p.val_x, &p.val_gold)?) };
    let ckpt = nn::write_checkpoint(&model, &cfg.model_config());
    let checkpoint_sha256 = hex_digest(&ckpt);
    let result = RunResult {
        config: cfg.clone(),
        train_loss,
        val_accuracy_by_epoch,
        train_accuracy,
        validation,
        checkpoint_sha256,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainedModel { model, result })
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_split_sizes() {
        let gold = crate::synth::class_sequence(1776, &crate::synth::DEFAULT_SHARES, 1);
        let s = split(&gold, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len()), (1332, 444));
        for class in Score::ALL {
            let total = gold.iter().filter(|&&g| g == class).count() as f64;
            let in_train = s.train.iter().filter(|&&i| gold[i] == class).count() as f64;
            assert!((in_train - 0.75 * total).abs() <= 1.0);
        }
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1776).collect::<Vec<_>>());
    }

    #[test]
    fn small_stratified_split_and_determinism() {
        let gold = [Score::Correct, Score::Correct, Score::PartiallyCorrect, Score::Incorrect];
        let spec = SplitSpec { seed: 9, ..Default::default() };
        let s = split(&gold, &spec).unwrap();
        assert_eq!(s.train.len(), 3);
        assert_eq!(split(&gold, &spec).unwrap(), s);
        assert!(split(&[], &spec).is_err());
    }

    #[test]
    fn evaluation_identities() {
        let truth = [Score::Correct, Score::Correct, Score::PartiallyCorrect, Score::Incorrect, Score::Incorrect];
        let pred = [Score::Correct, Score::Incorrect, Score::PartiallyCorrect, Score::Incorrect, Score::Correct];
        let e = evaluation_from(vec![[1.0 / 3.0; 3]; 5], pred.to_vec(), &truth);
        assert!((e.accuracy - 0.6).abs() < 1e-15);
        let weighted: f64 = [2.0, 1.0, 2.0].iter().zip(e.per_class_accuracy).map(|(w, a)| w * a.unwrap() / 5.0).sum();
        assert!((weighted - e.accuracy).abs() < 1e-15);
        let perfect = evaluation_from(vec![[1.0 / 3.0; 3]; 5], truth.to_vec(), &truth);
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(perfect.confusion, [[2, 0, 0], [0, 1, 0], [0, 0, 2]]);
    }

    #[test]
    fn constant_predictor_scores_the_majority_share() {
        let truth = crate::synth::class_sequence(10_000, &crate::synth::DEFAULT_SHARES, 3);
        let e = evaluation_from(vec![[1.0, 0.0, 0.0]; truth.len()], vec![Score::Correct; truth.len()], &truth);
        assert!((e.accuracy - 0.6165).abs() < 1e-12);
        assert_eq!(e.per_class_accuracy[1], Some(0.0));
    }
}
