//! Small numeric helpers shared by the network and the normalization code.

/// Numerically stable softmax of `logits`, written into `out`.
///
/// The maximum is subtracted before exponentiation so large inputs cannot
/// overflow.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// `ln(sum(exp(x)))` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine of the angle between two flattened vectors, clamped to `[-1, 1]`.
///
/// Returns `None` when either vector has a squared norm of zero. The
/// denominator is `sqrt(|a|^2 |b|^2)` so that `cos(a, a)` is exactly one.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a);
    let nb = dot(b, b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}
