//! Numerically stable log-domain primitives.
//!
//! All inference in this crate runs in log space so that forbidden states
//! (cost +inf, probability 0) stay exact zeros and long horizons cannot
//! underflow.

/// log(exp(a) + exp(b)) without overflow; `-inf` behaves as an exact zero.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// log Σ exp(v) over a slice; empty input and all-`-inf` input give `-inf`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        debug_assert!(!v.is_nan(), "NaN in logsumexp input");
        if v > hi {
            hi = v;
        }
    }
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut acc = 0.0;
    for &v in values {
        acc += (v - hi).exp();
    }
    hi + acc.ln()
}

/// Normalize a log-domain vector in place so the entries exponentiate to a
/// distribution; returns the log normalizer. All-`-inf` input is left alone
/// and reported as `-inf`.
pub fn log_normalize(values: &mut [f64]) -> f64 {
    let z = logsumexp(values);
    if z != f64::NEG_INFINITY {
        for v in values.iter_mut() {
            *v -= z;
        }
    }
    z
}

/// Deterministic fixed-order pairwise summation. Used for Monte Carlo
/// reductions so results are identical across thread counts.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}
