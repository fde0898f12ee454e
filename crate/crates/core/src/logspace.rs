//! Log-domain accumulation helpers.

/// `ln(Σ exp(x_i))`, shifted by the maximum. Returns `-inf` for an empty input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `ln(exp(a) + exp(b))`.
pub fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(ρ / (1 − ρ))`, the log of a geometric tail `Σ_{k≥1} ρ^k`. Infinite for
/// `ρ ≥ 1`.
pub fn log_geometric_tail(ratio: f64) -> f64 {
    if ratio >= 1.0 {
        f64::INFINITY
    } else if ratio <= 0.0 {
        f64::NEG_INFINITY
    } else {
        ratio.ln() - (-ratio).ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_naive_sum() {
        let xs = [0.1f64.ln(), 0.2f64.ln(), 0.7f64.ln()];
        assert!((log_sum_exp(&xs)).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn lse_survives_underflow() {
        // exp(-1000) underflows to zero, the shifted sum does not.
        let xs = [-1000.0, -1000.0];
        assert!((log_sum_exp(&xs) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_add(-1000.0, -1000.0) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn geometric_tail() {
        assert!((log_geometric_tail(0.5) - 0.0).abs() < 1e-15);
        assert_eq!(log_geometric_tail(1.0), f64::INFINITY);
    }
}
