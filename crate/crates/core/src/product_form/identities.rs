//! Identities satisfied by the product form, exposed as residuals so they can be
//! checked numerically. Every residual is relative and computed in log space.

use crate::logspace::log_sum_exp;
use crate::model::{NSystemParams, OneSidedState};

use super::{ln_alternative_form_weight, ln_f_known, ln_g_total, ln_weight_one_sided};

/// `|exp(x − y) − 1|`, accurate for `x ≈ y`.
fn rel_gap(ln_x: f64, ln_y: f64) -> f64 {
    (ln_x - ln_y).exp_m1().abs()
}

/// Relative gap in the partial balance at `(m, 0)`: flow into `(m, 0)` from
/// every `(m−k, k)` whose unrevealed supplies all turn out inflexible, against
/// the flow out of `(m, 0)` through its revealed inflexible head
/// (`μ2 + mθs`). Defined for `m ≥ 1`.
pub fn partial_balance_residual(params: &NSystemParams, m: usize) -> f64 {
    assert!(m >= 1, "partial balance is stated for m >= 1");
    let q = 1.0 - params.gamma_s();
    let inflow: Vec<f64> = (1..=m)
        .map(|k| {
            ln_weight_one_sided(params, OneSidedState::new(m - k, k))
                + params.mu1.ln()
                + k as f64 * q.ln()
        })
        .collect();
    let outflow = ln_weight_one_sided(params, OneSidedState::new(m, 0))
        + (params.mu2 + params.theta_s * m as f64).ln();
    rel_gap(log_sum_exp(&inflow), outflow)
}

/// Relative gap in `Σ_{k=1..m} f(m−k)(1−γs)^k = f(m)(a + m·b)`, the recursion
/// that pins down `f`. Defined for `m ≥ 1`.
pub fn f_summation_residual(params: &NSystemParams, m: usize) -> f64 {
    assert!(m >= 1, "the f recursion is stated for m >= 1");
    let a = params.mu2 / params.mu1;
    let b = params.theta_s / params.mu1;
    let q = 1.0 - params.gamma_s();
    let lhs: Vec<f64> = (1..=m)
        .map(|k| ln_f_known(params, m - k) + k as f64 * q.ln())
        .collect();
    let rhs = ln_f_known(params, m) + (a + m as f64 * b).ln();
    rel_gap(log_sum_exp(&lhs), rhs)
}

/// `g(1)` solved from the balance equation of the empty state, given `f(1)`:
/// `(λ1+λ2) / ((θs + μ1γs + μ2) + (1−γs)(μ2+θs)/(a+b))`.
pub fn g_one_from_empty_balance(params: &NSystemParams) -> f64 {
    let a = params.mu2 / params.mu1;
    let b = params.theta_s / params.mu1;
    let gs = params.gamma_s();
    let th = params.theta_s;
    params.supply_rate()
        / ((th + params.mu1 * gs + params.mu2) + (1.0 - gs) * (params.mu2 + th) / (a + b))
}

/// Relative gap between `g(m)` and the value the second-order recursion
/// produces from `g(m−1)` and `g(m−2)`:
///
/// ```text
/// g(m) = [g(m−1)(μ1+μ2+λ1+λ2+(m−1)θs) − g(m−2)(λ1+λ2)]
///        / [(mθs + μ1γs + μ2) + (1−γs)(μ2+θs)/(a+b)]
/// ```
///
/// Both sides are scaled by `g(m−2)` so deep recursions do not underflow.
/// Defined for `m ≥ 2`.
pub fn g_recursion_residual(params: &NSystemParams, m: usize) -> f64 {
    assert!(m >= 2, "the g recursion is stated for m >= 2");
    let a = params.mu2 / params.mu1;
    let b = params.theta_s / params.mu1;
    let gs = params.gamma_s();
    let th = params.theta_s;
    let lam = params.supply_rate();
    let base = ln_g_total(params, m - 2);
    let r1 = (ln_g_total(params, m - 1) - base).exp();
    let r2 = (ln_g_total(params, m) - base).exp();
    let num = r1 * (params.demand_rate() + lam + (m - 1) as f64 * th) - lam;
    let den = (m as f64 * th + params.mu1 * gs + params.mu2) + (1.0 - gs) * (params.mu2 + th) / (a + b);
    ((num / den) / r2 - 1.0).abs()
}

/// Relative gap between the two algebraic forms of the one-sided weight.
pub fn forms_relative_gap(params: &NSystemParams, state: OneSidedState) -> f64 {
    rel_gap(
        ln_weight_one_sided(params, state),
        ln_alternative_form_weight(params, state),
    )
}
