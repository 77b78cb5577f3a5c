//! Confusion matrices, confidence-ordered triage curves and error reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::nn::argmax;
use crate::score::Score;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Rows are truth, columns are predictions.
    pub counts: [[usize; 3]; 3],
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        (0..3).map(|c| self.counts[c][c]).sum::<usize>() as f64 / self.total() as f64
    }

    /// Row-normalised percentages; empty rows are `None`.
    pub fn row_percentages(&self) -> [Option<[f64; 3]>; 3] {
        std::array::from_fn(|r| {
            let row: usize = self.counts[r].iter().sum();
            (row > 0).then(|| std::array::from_fn(|c| 100.0 * self.counts[r][c] as f64 / row as f64))
        })
    }

    /// Table with `pct% (count)` cells.
    pub fn display(&self) -> String {
        let pct = self.row_percentages();
        let mut s = format!("{:<20}", "truth \\ predicted");
        for c in Score::ALL {
            s += &format!("{:>20}", c.as_str());
        }
        s.push('\n');
        for t in Score::ALL {
            s += &format!("{:<20}", t.as_str());
            for c in 0..3 {
                let cell = match pct[t.index()] {
                    Some(p) => format!("{:.1}% ({})", p[c], self.counts[t.index()][c]),
                    None => format!("- ({})", self.counts[t.index()][c]),
                };
                s += &format!("{cell:>20}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion_matrix(pred: &[Score], truth: &[Score]) -> Result<ConfusionMatrix, AnalysisError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(AnalysisError::InvalidInput(format!("need equal non-empty lengths, got {} and {}", pred.len(), truth.len())));
    }
    let mut counts = [[0; 3]; 3];
    for (p, t) in pred.iter().zip(truth) {
        counts[t.index()][p.index()] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Prefix statistics over samples sorted by descending confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageCurve {
    /// Sample indices in confidence order.
    pub order: Vec<usize>,
    pub confidence: Vec<f64>,
    pub correct: Vec<bool>,
    /// Entry `k` covers the first `k + 1` samples.
    pub cumulative_accuracy: Vec<f64>,
    /// Accuracy among prefix samples whose true class is the given class.
    pub per_class: [Vec<Option<f64>>; 3],
}

impl TriageCurve {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn coverage(&self, k: usize) -> f64 {
        k as f64 / self.len() as f64
    }

    pub fn overall_accuracy(&self) -> f64 {
        self.cumulative_accuracy.last().copied().unwrap_or(f64::NAN)
    }

    /// Number of samples auto-scored at `threshold` (confidence ≥ threshold).
    pub fn count_at(&self, threshold: f64) -> usize {
        self.confidence.partition_point(|&c| c >= threshold)
    }

    /// Predicted accuracy of the samples at or above `threshold`.
    pub fn accuracy_at(&self, threshold: f64) -> Option<f64> {
        let k = self.count_at(threshold);
        (k > 0).then(|| self.cumulative_accuracy[k - 1])
    }
}

/// Builds the curve from per-sample class probabilities. Ties in confidence
/// keep the original order.
pub fn triage_curve(probabilities: &[[f64; 3]], truth: &[Score]) -> Result<TriageCurve, AnalysisError> {
    if probabilities.len() != truth.len() || truth.is_empty() {
        return Err(AnalysisError::InvalidInput("probabilities and truth need equal non-empty lengths".into()));
    }
    if let Some(i) = probabilities.iter().position(|p| (p.iter().sum::<f64>() - 1.0).abs() > 1e-6) {
        return Err(AnalysisError::InvalidInput(format!("probability row {i} does not sum to 1")));
    }
    let conf: Vec<f64> = probabilities.iter().map(|p| p[argmax(p)]).collect();
    let mut order: Vec<usize> = (0..truth.len()).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]));
    let mut correct = Vec::with_capacity(order.len());
    let mut cumulative_accuracy = Vec::with_capacity(order.len());
    let mut per_class: [Vec<Option<f64>>; 3] = Default::default();
    let mut hits = 0usize;
    let mut class_seen = [0usize; 3];
    let mut class_hits = [0usize; 3];
    for (k, &i) in order.iter().enumerate() {
        let ok = argmax(&probabilities[i]) == truth[i].index();
        let t = truth[i].index();
        hits += ok as usize;
        class_seen[t] += 1;
        class_hits[t] += ok as usize;
        correct.push(ok);
        cumulative_accuracy.push(hits as f64 / (k + 1) as f64);
        for c in 0..3 {
            per_class[c].push((class_seen[c] > 0).then(|| class_hits[c] as f64 / class_seen[c] as f64));
        }
    }
    let confidence = order.iter().map(|&i| conf[i]).collect();
    Ok(TriageCurve { order, confidence, correct, cumulative_accuracy, per_class })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    /// Samples in the chosen prefix.
    pub count: usize,
    pub coverage: f64,
    /// Confidence of the last included sample; `None` when nothing
    /// qualifies.
    pub confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

/// The largest prefix whose cumulative accuracy reaches `target`.
pub fn threshold_for_accuracy(curve: &TriageCurve, target: f64) -> Result<ThresholdChoice, AnalysisError> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(AnalysisError::InvalidInput(format!("target accuracy {target} outside (0, 1]")));
    }
    let k = curve.cumulative_accuracy.iter().rposition(|&a| a >= target).map_or(0, |i| i + 1);
    Ok(ThresholdChoice {
        count: k,
        coverage: curve.coverage(k),
        confidence: (k > 0).then(|| curve.confidence[k - 1]),
        accuracy: (k > 0).then(|| curve.cumulative_accuracy[k - 1]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidentError {
    pub id: u64,
    pub truth: Score,
    pub predicted: Score,
    pub confidence: f64,
}

/// The `k` most confident misclassifications, most confident first.
pub fn top_confident_errors(
    ids: &[u64],
    probabilities: &[[f64; 3]],
    truth: &[Score],
    k: usize,
) -> Result<Vec<ConfidentError>, AnalysisError> {
    if k == 0 || ids.len() != truth.len() || probabilities.len() != truth.len() {
        return Err(AnalysisError::InvalidInput("k must be positive and inputs of equal length".into()));
    }
    let mut errors: Vec<ConfidentError> = (0..truth.len())
        .filter_map(|i| {
            let p = argmax(&probabilities[i]);
            (p != truth[i].index()).then(|| ConfidentError {
                id: ids[i],
                truth: truth[i],
                predicted: Score::from_index(p).expect("three classes"),
                confidence: probabilities[i][p],
            })
        })
        .collect();
    errors.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    if errors.len() < k {
        return Err(AnalysisError::FewerThanK { requested: k, found: errors });
    }
    errors.truncate(k);
    Ok(errors)
}

/// Percentage of flagged members per class; `None` for empty classes.
pub fn association_table(scores: &[Score], flags: &[bool]) -> Result<[Option<f64>; 3], AnalysisError> {
    if scores.len() != flags.len() {
        return Err(AnalysisError::InvalidInput("scores and flags differ in length".into()));
    }
    let mut size = [0usize; 3];
    let mut flagged = [0usize; 3];
    for (s, &f) in scores.iter().zip(flags) {
        size[s.index()] += 1;
        flagged[s.index()] += f as usize;
    }
    Ok(std::array::from_fn(|c| (size[c] > 0).then(|| 100.0 * flagged[c] as f64 / size[c] as f64)))
}

/// One scored sample as written by `train` and read by `triage` and
/// `analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: u64,
    pub truth: Score,
    pub predicted: Score,
    pub confidence: f64,
    pub p_correct: f64,
    pub p_partially_correct: f64,
    pub p_incorrect: f64,
}

impl PredictionRow {
    pub fn new(id: u64, truth: Score, probabilities: [f64; 3]) -> Self {
        let c = argmax(&probabilities);
        PredictionRow {
            id,
            truth,
            predicted: Score::from_index(c).expect("three classes"),
            confidence: probabilities[c],
            p_correct: probabilities[0],
            p_partially_correct: probabilities[1],
            p_incorrect: probabilities[2],
        }
    }

    pub fn probabilities(&self) -> [f64; 3] {
        [self.p_correct, self.p_partially_correct, self.p_incorrect]
    }
}

pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRow>, AnalysisError> {
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize().map(|r| r.map_err(AnalysisError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use Score::*;

    #[test]
    fn two_sample_confusion() {
        let m = confusion_matrix(&[PartiallyCorrect, PartiallyCorrect], &[Correct, PartiallyCorrect]).unwrap();
        assert_eq!(m.counts, [[0, 1, 0], [0, 1, 0], [0, 0, 0]]);
        assert_eq!(m.row_percentages()[2], None);
        assert!(confusion_matrix(&[], &[]).is_err());
    }

    #[test]
    fn perfect_classifier_curve_is_flat() {
        let probs = [[0.9, 0.05, 0.05], [0.1, 0.8, 0.1], [0.2, 0.2, 0.6]];
        let c = triage_curve(&probs, &[Correct, PartiallyCorrect, Incorrect]).unwrap();
        assert!(c.cumulative_accuracy.iter().all(|&a| a == 1.0));
        assert_eq!(c.order, vec![0, 1, 2]);
        let t = threshold_for_accuracy(&c, 1.0).unwrap();
        assert_eq!((t.coverage, t.confidence), (1.0, Some(0.6)));
    }

    #[test]
    fn wrong_first_sample_gives_zero_coverage() {
        let probs = [[0.9, 0.05, 0.05], [0.1, 0.8, 0.1]];
        let c = triage_curve(&probs, &[Incorrect, PartiallyCorrect]).unwrap();
        let t = threshold_for_accuracy(&c, 1.0).unwrap();
        assert_eq!((t.count, t.confidence), (0, None));
        assert_eq!(threshold_for_accuracy(&c, 0.5).unwrap().coverage, 1.0);
    }

    #[test]
    fn confident_errors_hand_case() {
        let probs = [[0.9, 0.05, 0.05], [0.2, 0.7, 0.1], [0.1, 0.1, 0.8]];
        let e = top_confident_errors(&[10, 11, 12], &probs, &[Incorrect, PartiallyCorrect, Incorrect], 1).unwrap();
        assert_eq!(e, vec![ConfidentError { id: 10, truth: Incorrect, predicted: Correct, confidence: 0.9 }]);
        match top_confident_errors(&[10, 11, 12], &probs, &[Correct, PartiallyCorrect, Incorrect], 2) {
            Err(AnalysisError::FewerThanK { found, .. }) => assert!(found.is_empty()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn association_arithmetic() {
        let mut scores = vec![Incorrect; 40];
        let mut flags = vec![false; 40];
        flags[3] = true;
        flags[17] = true;
        scores.push(Correct);
        flags.push(false);
        let t = association_table(&scores, &flags).unwrap();
        assert_eq!(t, [Some(0.0), None, Some(5.0)]);
    }
}
