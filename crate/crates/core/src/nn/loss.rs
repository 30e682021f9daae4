use ndarray::Array2;

use super::Float;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Float>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: F = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean cross-entropy of `logits` against class indices and its gradient
/// with respect to the logits.
///
/// With class weights the mean is weighted: `Σ wᵢ·lᵢ / Σ wᵢ`.
pub fn softmax_cross_entropy<F: Float>(
    logits: &Array2<F>,
    targets: &[usize],
    class_weights: Option<&[f64]>,
) -> (F, Array2<F>) {
    assert_eq!(logits.nrows(), targets.len(), "one target per logits row");
    let probs = softmax_rows(logits);
    let weight = |t: usize| class_weights.map_or(1.0, |w| w[t]);
    let total: f64 = targets.iter().map(|&t| weight(t)).sum();
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        let w = weight(t) / total;
        loss -= w * probs[[i, t]].as_f64().max(f64::MIN_POSITIVE).ln();
        grad[[i, t]] -= F::one();
        grad.row_mut(i).mapv_inplace(|g| g * F::cast(w));
    }
    (F::cast(loss), grad)
}
