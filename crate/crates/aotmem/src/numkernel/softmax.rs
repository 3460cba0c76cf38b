//! Numerically stable softmax and log-softmax.

/// Softmax with max-subtraction. Finite input gives positive outputs that
/// sum to 1; invariant to adding a constant to every coordinate.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    debug_assert!(!v.is_empty());
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// log(softmax(v)), computed without forming intermediate exponentials of
/// large arguments.
pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    debug_assert!(!v.is_empty());
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|&x| x - lse).collect()
}

/// In-place softmax over a slice; returns nothing, used in hot loops.
pub fn softmax_inplace(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}
