use super::tensor::{Shape, Tensor4};
use super::NUM_CLASSES;
use crate::score::Score;

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> [f64; NUM_CLASSES] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; NUM_CLASSES];
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    for o in &mut out {
        *o /= total;
    }
    out
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy over the batch and its gradient
/// `(softmax - onehot) / n` with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[Score]) -> (f64, Tensor4) {
    assert_eq!(logits.n, labels.len(), "one label per logit row");
    assert_eq!(logits.shape, Shape::new(NUM_CLASSES, 1, 1));
    let n = logits.n as f64;
    let mut grad = Tensor4::zeros(logits.n, logits.shape);
    let mut loss = 0.0;
    for (i, label) in labels.iter().enumerate() {
        let row = logits.sample(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - row[label.index()];
        let p = softmax(row);
        for (c, g) in grad.sample_mut(i).iter_mut().enumerate() {
            let onehot = if c == label.index() { 1.0 } else { 0.0 };
            *g = (p[c] - onehot) / n;
        }
    }
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn logits(rows: &[[f64; 3]]) -> Tensor4 {
        Tensor4::from_vec(rows.len(), Shape::new(3, 1, 1), rows.iter().flatten().copied().collect())
    }

    #[test]
    fn uniform_logits_give_ln3() {
        let (loss, _) = softmax_cross_entropy(&logits(&[[0.0, 0.0, 0.0]]), &[Score::Incorrect]);
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!((loss - 1.0986).abs() < 1e-4);
        let p = softmax(&[0.0, 0.0, 0.0]);
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn large_logits_are_stable() {
        let (loss, grad) = softmax_cross_entropy(&logits(&[[1000.0, 0.0, 0.0]]), &[Score::Correct]);
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(grad.is_finite());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<[f64; 3]> =
            (0..5).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
        let labels: Vec<Score> = (0..5).map(|i| Score::ALL[i % 3]).collect();
        let base = logits(&rows);
        let (_, grad) = softmax_cross_entropy(&base, &labels);
        let eps = 1e-5;
        for k in 0..base.data.len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus.data[k] += eps;
            minus.data[k] -= eps;
            let fd = (softmax_cross_entropy(&plus, &labels).0 - softmax_cross_entropy(&minus, &labels).0) / (2.0 * eps);
            let rel = (fd - grad.data[k]).abs() / fd.abs().max(grad.data[k].abs()).max(1e-12);
            assert!(rel < 1e-6, "k={k}: fd={fd} analytic={}", grad.data[k]);
        }
    }

    #[test]
    fn argmax_preserved_by_softmax() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let row = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let p = softmax(&row);
            assert_eq!(argmax(&p), argmax(&row));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
