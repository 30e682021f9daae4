//! Macro F1 by direct counting.
#![allow(dead_code)]

/// Per-class precision and recall by direct counting, each with 0/0 = 0,
/// then F1 = 2PR / (P + R) with 0/0 = 0, averaged over all four classes.
pub fn oracle_macro_f1(y_true: &[usize], y_pred: &[usize]) -> f64 {
    let mut total = 0.0;
    for c in 0..4 {
        let mut tp = 0.0;
        let mut predicted = 0.0;
        let mut actual = 0.0;
        for (t, p) in y_true.iter().zip(y_pred) {
            if *p == c {
                predicted += 1.0;
            }
            if *t == c {
                actual += 1.0;
            }
            if *p == c && *t == c {
                tp += 1.0;
            }
        }
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += f1;
    }
    100.0 * total / 4.0
}
