//! Closed-form stationary weights of the N-system and their normalization.
//!
//! One-sided system: for `m ≥ 1`
//!
//! ```text
//! π(m,n)/B = μ1/(μ1+μ2+mθs) · Π_{i=1..m} λ2/(μ2+iθs) · Π_{i=1..n} (λ1+λ2)/(μ1+μ2+mθs+iθs)
//! ```
//!
//! and `π(0,n)/B = Π_{i=1..n} (λ1+λ2)/(μ1+μ2+iθs)`, where `B = π(0,0)`. The
//! weights factor as `f(m)·g(m+n)`: `f` depends on the revealed inflexible
//! prefix only and `g` is the solution of a birth-death chain on the total
//! queue length.
//!
//! The two-sided system reuses the same shape on the supply side, its mirror
//! image on the demand side, and a pair of independent M/M/1+M factors while
//! incompatible agents wait on both sides.
//!
//! All weights are accumulated as sums of logarithms; normalization works on
//! the log weights with a max shift.

mod balance;
mod identities;

pub use balance::{
    global_balance_residual, one_sided_balance_residual, two_sided_balance_residual,
};
pub use identities::{
    f_summation_residual, forms_relative_gap, g_one_from_empty_balance, g_recursion_residual,
    partial_balance_residual,
};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::logspace::{log_add, log_geometric_tail, log_sum_exp};
use crate::model::{
    stability_check, NSystemParams, OneSidedState, StationaryDistribution, SystemDistribution,
    SystemKind, Truncation, TwoSidedState,
};

/// Normalization tolerance used when callers do not pick one.
pub const DEFAULT_TOLERANCE: f64 = 1e-10;

/// Largest tolerance [`normalize`] accepts.
pub const MAX_TOLERANCE: f64 = 1e-3;

/// Hard cap on the number of states adaptive truncation may visit.
pub const MAX_TRUNCATED_STATES: usize = 4_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProductFormError {
    #[error(
        "normalizer diverges; stability conditions violated \
         (without reneging need lambda1+lambda2 < mu1+mu2 and lambda2 < mu2)"
    )]
    Divergent,
    #[error("the no-reneging closed form requires theta_s = 0")]
    RenegingPresent,
    #[error("the two-sided system requires theta_s > 0 and theta_d > 0")]
    TwoSidedNeedsReneging,
    #[error("tolerance {0} outside (0, 1e-3]")]
    BadTolerance(f64),
    #[error("truncation exceeded {0} states before the tail bound met the tolerance")]
    TruncationLimit(usize),
}

fn check_one_sided(params: &NSystemParams) -> Result<(), ProductFormError> {
    if params.theta_s == 0.0 && !stability_check(params) {
        return Err(ProductFormError::Divergent);
    }
    Ok(())
}

fn check_two_sided(params: &NSystemParams) -> Result<(), ProductFormError> {
    if params.theta_s > 0.0 && params.theta_d > 0.0 {
        Ok(())
    } else {
        Err(ProductFormError::TwoSidedNeedsReneging)
    }
}

/// `ln g(k) = Σ_{i=1..k} ln((λ1+λ2)/(μ1+μ2+iθs))`.
pub fn ln_g_total(params: &NSystemParams, k: usize) -> f64 {
    let (lam, mu, th) = (params.supply_rate(), params.demand_rate(), params.theta_s);
    (1..=k).map(|i| (lam / (mu + i as f64 * th)).ln()).sum()
}

/// Birth-death factor `g(k)` of the total queue length; `g(0) = 1`.
pub fn g_total(params: &NSystemParams, k: usize) -> f64 {
    ln_g_total(params, k).exp()
}

/// `ln f(m)` in terms of `a = μ2/μ1` and `b = θs/μ1`.
pub fn ln_f_known(params: &NSystemParams, m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let a = params.mu2 / params.mu1;
    let b = params.theta_s / params.mu1;
    let q = 1.0 - params.gamma_s();
    let mut acc = m as f64 * q.ln() - (a + b).ln();
    for i in 2..=m {
        let i = i as f64;
        acc += (1.0 + a + (i - 1.0) * b).ln() - (a + i * b).ln();
    }
    acc
}

/// Factor `f(m)` of the revealed inflexible prefix; `f(0) = 1`.
pub fn f_known(params: &NSystemParams, m: usize) -> f64 {
    ln_f_known(params, m).exp()
}

/// Tabulated `f(0..=max_m)` and `g(0..=max_k)` together with `a = μ2/μ1` and
/// `b = θs/μ1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FGDecomposition {
    pub f_values: Vec<f64>,
    pub g_values: Vec<f64>,
    pub a: f64,
    pub b: f64,
}

impl FGDecomposition {
    pub fn new(params: &NSystemParams, max_m: usize, max_k: usize) -> Self {
        Self {
            f_values: (0..=max_m).map(|m| f_known(params, m)).collect(),
            g_values: (0..=max_k).map(|k| g_total(params, k)).collect(),
            a: params.mu2 / params.mu1,
            b: params.theta_s / params.mu1,
        }
    }

    /// `f(m)·g(m+n)`, or `None` outside the tabulated range.
    pub fn weight(&self, state: OneSidedState) -> Option<f64> {
        Some(self.f_values.get(state.m)? * self.g_values.get(state.total())?)
    }
}

/// Log of the one-sided weight `π(m,n)/π(0,0)`, without checking that the
/// weights are summable.
pub fn ln_weight_one_sided(params: &NSystemParams, state: OneSidedState) -> f64 {
    let (lam, mu, th) = (params.supply_rate(), params.demand_rate(), params.theta_s);
    let OneSidedState { m, n } = state;
    if m == 0 {
        return (1..=n).map(|i| (lam / (mu + i as f64 * th)).ln()).sum();
    }
    let shift = mu + m as f64 * th;
    let mut acc = (params.mu1 / shift).ln();
    acc += (1..=m)
        .map(|i| (params.lambda2 / (params.mu2 + i as f64 * th)).ln())
        .sum::<f64>();
    acc += (1..=n)
        .map(|i| (lam / (shift + i as f64 * th)).ln())
        .sum::<f64>();
    acc
}

/// One-sided stationary weight relative to the empty state.
pub fn unnormalized_weight_one_sided(
    params: &NSystemParams,
    state: OneSidedState,
) -> Result<f64, ProductFormError> {
    check_one_sided(params)?;
    Ok(ln_weight_one_sided(params, state).exp())
}

/// The same weight written as `f(m)·g(m+n)` with `f` expanded in the rates:
/// `Π_{i=1..m+n} (λ1+λ2)/(μ1+μ2+iθs) · Π_{i=1..m} (μ1+μ2·[i>1]+(i−1)θs)(1−γs)/(μ2+iθs)`.
pub fn alternative_form_weight(
    params: &NSystemParams,
    state: OneSidedState,
) -> Result<f64, ProductFormError> {
    check_one_sided(params)?;
    Ok(ln_alternative_form_weight(params, state).exp())
}

pub(crate) fn ln_alternative_form_weight(params: &NSystemParams, state: OneSidedState) -> f64 {
    let th = params.theta_s;
    let q = 1.0 - params.gamma_s();
    let mut acc = ln_g_total(params, state.total());
    for i in 1..=state.m {
        let head = if i > 1 { params.mu2 } else { 0.0 };
        let num = params.mu1 + head + (i as f64 - 1.0) * th;
        acc += num.ln() + q.ln() - (params.mu2 + i as f64 * th).ln();
    }
    acc
}

/// Closed-form `π(0,0)` of the system without reneging:
/// `(μ1+μ2−λ1−λ2)(μ2−λ2) / ((μ1+μ2−λ2)μ2)`.
pub fn no_reneging_normalizer(params: &NSystemParams) -> Result<f64, ProductFormError> {
    if params.theta_s != 0.0 {
        return Err(ProductFormError::RenegingPresent);
    }
    check_one_sided(params)?;
    let (lam, mu) = (params.supply_rate(), params.demand_rate());
    Ok((mu - lam) * (params.mu2 - params.lambda2) / ((mu - params.lambda2) * params.mu2))
}

/// Exact stationary probability of the system without reneging: geometric in
/// both coordinates with ratios `λ2/μ2` and `(λ1+λ2)/(μ1+μ2)`.
pub fn no_reneging_distribution(
    params: &NSystemParams,
    state: OneSidedState,
) -> Result<f64, ProductFormError> {
    let b = no_reneging_normalizer(params)?;
    let (lam, mu) = (params.supply_rate(), params.demand_rate());
    let tail = (lam / mu).powf(state.n as f64);
    Ok(if state.m == 0 {
        tail * b
    } else {
        params.mu1 / mu * (params.lambda2 / params.mu2).powf(state.m as f64) * tail * b
    })
}

/// Log weight of the demand-side queue: `m` revealed type-1 demands ahead of
/// `n` unrevealed ones.
fn ln_weight_right(params: &NSystemParams, m: usize, n: usize) -> f64 {
    let (lam, mu, th) = (params.supply_rate(), params.demand_rate(), params.theta_d);
    if m == 0 {
        return (1..=n).map(|i| (mu / (lam + i as f64 * th)).ln()).sum();
    }
    let shift = lam + m as f64 * th;
    let mut acc = (params.lambda2 / shift).ln();
    acc += (1..=m)
        .map(|i| (params.mu1 / (params.lambda1 + i as f64 * th)).ln())
        .sum::<f64>();
    acc += (1..=n).map(|i| (mu / (shift + i as f64 * th)).ln()).sum::<f64>();
    acc
}

fn ln_cross_supply(params: &NSystemParams, i: usize) -> f64 {
    (1..=i)
        .map(|k| (params.lambda2 / (params.mu2 + k as f64 * params.theta_s)).ln())
        .sum()
}

fn ln_cross_demand(params: &NSystemParams, j: usize) -> f64 {
    (1..=j)
        .map(|k| (params.mu1 / (params.lambda1 + k as f64 * params.theta_d)).ln())
        .sum()
}

/// Log of the two-sided weight relative to the empty state.
pub fn ln_weight_two_sided(params: &NSystemParams, state: TwoSidedState) -> f64 {
    match state {
        TwoSidedState::Empty => 0.0,
        TwoSidedState::Left(q) => {
            ln_weight_one_sided(params, OneSidedState::new(q.known(), q.unknown()))
        }
        TwoSidedState::Right(q) => ln_weight_right(params, q.known(), q.unknown()),
        TwoSidedState::Both(c) => {
            ln_cross_supply(params, c.supply()) + ln_cross_demand(params, c.demand())
        }
    }
}

/// Two-sided stationary weight relative to the empty state.
pub fn unnormalized_weight_two_sided(
    params: &NSystemParams,
    state: TwoSidedState,
) -> Result<f64, ProductFormError> {
    check_two_sided(params)?;
    Ok(ln_weight_two_sided(params, state).exp())
}

fn check_tolerance(tol: f64) -> Result<(), ProductFormError> {
    if tol > 0.0 && tol <= MAX_TOLERANCE {
        Ok(())
    } else {
        Err(ProductFormError::BadTolerance(tol))
    }
}

/// Log weights on a box together with certified log bounds on the omitted
/// mass along each axis.
#[derive(Debug)]
struct GridEval {
    /// `log_w[m][n]`.
    log_w: Vec<Vec<f64>>,
    ln_included: f64,
    /// Bound on `Σ_{m ≤ M, n > N}`.
    ln_n_tail: f64,
    /// Bound on `Σ_{m > M}` over all `n`.
    ln_m_tail: f64,
}

/// Evaluates a queue of the one-sided shape on `[0, max_m] × [0, max_n]`.
///
/// `weight` gives the log weights; `(arrival, service, reneging)` are the
/// total arrival rate, total service rate and per-agent reneging rate of the
/// queue, and `(head_arrival, head_service)` the rates driving the revealed
/// prefix.
fn eval_side_grid(
    max_m: usize,
    max_n: usize,
    weight: impl Fn(usize, usize) -> f64,
    (arrival, service, reneging): (f64, f64, f64),
    (head_arrival, head_service): (f64, f64),
    skip_origin: bool,
) -> GridEval {
    let log_w: Vec<Vec<f64>> = (0..=max_m)
        .map(|m| (0..=max_n).map(|n| weight(m, n)).collect())
        .collect();
    let mut row_in = Vec::with_capacity(max_m + 1);
    let mut row_tail = Vec::with_capacity(max_m + 1);
    for (m, row) in log_w.iter().enumerate() {
        let start = usize::from(skip_origin && m == 0);
        row_in.push(log_sum_exp(&row[start..]));
        // Successive ratios along n decrease, so the n-tail is dominated by a
        // geometric series with the first omitted ratio.
        let ratio = arrival / (service + (m + max_n + 1) as f64 * reneging);
        row_tail.push(row[max_n] + log_geometric_tail(ratio));
    }
    let ln_included = log_sum_exp(&row_in);
    let ln_n_tail = log_sum_exp(&row_tail);
    // Whole rows shrink at least by this factor when m grows past max_m.
    let ratio = head_arrival / (head_service + (max_m + 1) as f64 * reneging);
    let ln_m_tail = log_add(row_in[max_m], row_tail[max_m]) + log_geometric_tail(ratio);
    GridEval {
        log_w,
        ln_included,
        ln_n_tail,
        ln_m_tail,
    }
}

/// Incremental log weights of the one-sided shape: `head(m)` is the log weight
/// of `(m, 0)`, and moving from `n − 1` to `n` multiplies by
/// `arrival / (service + (m + n)·reneging)` whenever `m ≥ 1`, or by
/// `arrival / (service + n·reneging)` on the `m = 0` row.
fn side_log_weights(
    max_m: usize,
    max_n: usize,
    head: impl Fn(usize) -> f64,
    arrival: f64,
    service: f64,
    reneging: f64,
) -> impl Fn(usize, usize) -> f64 {
    let table: Vec<Vec<f64>> = (0..=max_m)
        .map(|m| {
            let mut row = Vec::with_capacity(max_n + 1);
            let mut acc = head(m);
            row.push(acc);
            for n in 1..=max_n {
                acc += (arrival / (service + (m + n) as f64 * reneging)).ln();
                row.push(acc);
            }
            row
        })
        .collect();
    move |m, n| table[m][n]
}

fn left_grid(params: &NSystemParams, max_m: usize, max_n: usize, skip_origin: bool) -> GridEval {
    let (lam, mu, th) = (params.supply_rate(), params.demand_rate(), params.theta_s);
    let mut prefix = vec![0.0; max_m + 1];
    for m in 1..=max_m {
        prefix[m] = prefix[m - 1] + (params.lambda2 / (params.mu2 + m as f64 * th)).ln();
    }
    let head = |m: usize| {
        if m == 0 {
            0.0
        } else {
            (params.mu1 / (mu + m as f64 * th)).ln() + prefix[m]
        }
    };
    eval_side_grid(
        max_m,
        max_n,
        side_log_weights(max_m, max_n, head, lam, mu, th),
        (lam, mu, th),
        (params.lambda2, params.mu2),
        skip_origin,
    )
}

fn right_grid(params: &NSystemParams, max_m: usize, max_n: usize) -> GridEval {
    let (lam, mu, th) = (params.supply_rate(), params.demand_rate(), params.theta_d);
    let mut prefix = vec![0.0; max_m + 1];
    for m in 1..=max_m {
        prefix[m] = prefix[m - 1] + (params.mu1 / (params.lambda1 + m as f64 * th)).ln();
    }
    let head = |m: usize| {
        if m == 0 {
            0.0
        } else {
            (params.lambda2 / (lam + m as f64 * th)).ln() + prefix[m]
        }
    };
    eval_side_grid(
        max_m,
        max_n,
        side_log_weights(max_m, max_n, head, mu, lam, th),
        (mu, lam, th),
        (params.mu1, params.lambda1),
        true,
    )
}

fn grow(x: usize) -> usize {
    x + (x / 2).max(4)
}

/// Product-form distribution of the one-sided system on a fixed box,
/// renormalized over the box. `tail_mass_bound` is the certified bound for
/// that box; `tolerance` records the same value.
pub fn one_sided_on_box(
    params: &NSystemParams,
    max_m: usize,
    max_n: usize,
) -> Result<StationaryDistribution<OneSidedState>, ProductFormError> {
    check_one_sided(params)?;
    let grid = left_grid(params, max_m, max_n, false);
    let tail = (log_add(grid.ln_n_tail, grid.ln_m_tail) - grid.ln_included).exp();
    Ok(one_sided_from_grid(params, &grid, tail, tail))
}

fn one_sided_from_grid(
    params: &NSystemParams,
    grid: &GridEval,
    tail: f64,
    tolerance: f64,
) -> StationaryDistribution<OneSidedState> {
    let mut probs = BTreeMap::new();
    for (m, row) in grid.log_w.iter().enumerate() {
        for (n, lw) in row.iter().enumerate() {
            probs.insert(OneSidedState::new(m, n), (lw - grid.ln_included).exp());
        }
    }
    let max_m = grid.log_w.len() - 1;
    let max_n = grid.log_w[0].len() - 1;
    StationaryDistribution::new(
        *params,
        Truncation::one_sided(max_m, max_n),
        tail,
        tolerance,
        probs,
    )
}

/// Normalized one-sided product form. The box grows until the certified
/// omitted mass is below `tol` times the included weight.
pub fn normalize_one_sided(
    params: &NSystemParams,
    tol: f64,
) -> Result<StationaryDistribution<OneSidedState>, ProductFormError> {
    check_tolerance(tol)?;
    check_one_sided(params)?;
    let share = (tol / 2.0).ln();
    let (mut max_m, mut max_n) = (8usize, 8usize);
    loop {
        let grid = left_grid(params, max_m, max_n, false);
        let ln_tail = log_add(grid.ln_n_tail, grid.ln_m_tail);
        if ln_tail - grid.ln_included < tol.ln() {
            let tail = (ln_tail - grid.ln_included).exp();
            return Ok(one_sided_from_grid(params, &grid, tail, tol));
        }
        if grid.ln_n_tail - grid.ln_included >= share {
            max_n = grow(max_n);
        }
        if grid.ln_m_tail - grid.ln_included >= share {
            max_m = grow(max_m);
        }
        if (max_m + 1) * (max_n + 1) > MAX_TRUNCATED_STATES {
            return Err(ProductFormError::TruncationLimit(MAX_TRUNCATED_STATES));
        }
    }
}

struct TwoSidedEval {
    left: GridEval,
    right: GridEval,
    ln_supply: Vec<f64>,
    ln_demand: Vec<f64>,
    ln_included: f64,
    /// Omitted-mass bounds attributable to growing (m, n, i, j).
    ln_tails: [f64; 4],
}

fn eval_two_sided(params: &NSystemParams, t: Truncation) -> TwoSidedEval {
    let max_i = t.max_i.unwrap_or(t.max_m);
    let max_j = t.max_j.unwrap_or(t.max_n);
    let left = left_grid(params, t.max_m, t.max_n, true);
    let right = right_grid(params, t.max_m, t.max_n);
    let ln_supply: Vec<f64> = (1..=max_i).map(|i| ln_cross_supply(params, i)).collect();
    let ln_demand: Vec<f64> = (1..=max_j).map(|j| ln_cross_demand(params, j)).collect();
    let a_in = log_sum_exp(&ln_supply);
    let c_in = log_sum_exp(&ln_demand);
    let a_tail = ln_supply[max_i - 1]
        + log_geometric_tail(params.lambda2 / (params.mu2 + (max_i + 1) as f64 * params.theta_s));
    let c_tail = ln_demand[max_j - 1]
        + log_geometric_tail(params.mu1 / (params.lambda1 + (max_j + 1) as f64 * params.theta_d));
    let ln_included = log_sum_exp(&[0.0, left.ln_included, right.ln_included, a_in + c_in]);
    // (A_in + A_tail)(C_in + C_tail) − A_in·C_in, split by the axis to grow.
    let i_tail = a_tail + log_add(c_in, c_tail);
    let j_tail = a_in + c_tail;
    let ln_tails = [
        log_add(left.ln_m_tail, right.ln_m_tail),
        log_add(left.ln_n_tail, right.ln_n_tail),
        i_tail,
        j_tail,
    ];
    TwoSidedEval {
        left,
        right,
        ln_supply,
        ln_demand,
        ln_included,
        ln_tails,
    }
}

fn two_sided_from_eval(
    params: &NSystemParams,
    t: Truncation,
    ev: &TwoSidedEval,
    tail: f64,
    tolerance: f64,
) -> StationaryDistribution<TwoSidedState> {
    let z = ev.ln_included;
    let mut probs = BTreeMap::new();
    probs.insert(TwoSidedState::Empty, (-z).exp());
    for (m, row) in ev.left.log_w.iter().enumerate() {
        for (n, lw) in row.iter().enumerate() {
            if m + n > 0 {
                probs.insert(TwoSidedState::left_or_empty(m, n), (lw - z).exp());
            }
        }
    }
    for (m, row) in ev.right.log_w.iter().enumerate() {
        for (n, lw) in row.iter().enumerate() {
            if m + n > 0 {
                probs.insert(TwoSidedState::right_or_empty(m, n), (lw - z).exp());
            }
        }
    }
    for (i, la) in ev.ln_supply.iter().enumerate() {
        for (j, lc) in ev.ln_demand.iter().enumerate() {
            let s = TwoSidedState::both(i + 1, j + 1).expect("indices start at one");
            probs.insert(s, (la + lc - z).exp());
        }
    }
    StationaryDistribution::new(*params, t, tail, tolerance, probs)
}

/// Two-sided product form on a fixed box, renormalized over the box.
pub fn two_sided_on_box(
    params: &NSystemParams,
    truncation: Truncation,
) -> Result<StationaryDistribution<TwoSidedState>, ProductFormError> {
    check_two_sided(params)?;
    let t = Truncation::two_sided(
        truncation.max_m.max(1),
        truncation.max_n.max(1),
        truncation.max_i.unwrap_or(truncation.max_m).max(1),
        truncation.max_j.unwrap_or(truncation.max_n).max(1),
    );
    let ev = eval_two_sided(params, t);
    let tail = (log_sum_exp(&ev.ln_tails) - ev.ln_included).exp();
    Ok(two_sided_from_eval(params, t, &ev, tail, tail))
}

/// Normalized two-sided product form with adaptive truncation.
pub fn normalize_two_sided(
    params: &NSystemParams,
    tol: f64,
) -> Result<StationaryDistribution<TwoSidedState>, ProductFormError> {
    check_tolerance(tol)?;
    check_two_sided(params)?;
    let share = (tol / 4.0).ln();
    let mut bounds = [8usize; 4];
    loop {
        let t = Truncation::two_sided(bounds[0], bounds[1], bounds[2], bounds[3]);
        let ev = eval_two_sided(params, t);
        let ln_tail = log_sum_exp(&ev.ln_tails);
        if ln_tail - ev.ln_included < tol.ln() {
            let tail = (ln_tail - ev.ln_included).exp();
            return Ok(two_sided_from_eval(params, t, &ev, tail, tol));
        }
        for (b, lt) in bounds.iter_mut().zip(ev.ln_tails) {
            if lt - ev.ln_included >= share {
                *b = grow(*b);
            }
        }
        let states = 2 * (bounds[0] + 1) * (bounds[1] + 1) + bounds[2] * bounds[3];
        if states > MAX_TRUNCATED_STATES {
            return Err(ProductFormError::TruncationLimit(MAX_TRUNCATED_STATES));
        }
    }
}

/// Normalized product form of either system.
pub fn normalize(
    params: &NSystemParams,
    system: SystemKind,
    tol: f64,
) -> Result<SystemDistribution, ProductFormError> {
    Ok(match system {
        SystemKind::OneSided => normalize_one_sided(params, tol)?.into(),
        SystemKind::TwoSided => normalize_two_sided(params, tol)?.into(),
    })
}

/// Product form of either system on a fixed box.
pub fn on_box(
    params: &NSystemParams,
    system: SystemKind,
    truncation: Truncation,
) -> Result<SystemDistribution, ProductFormError> {
    Ok(match system {
        SystemKind::OneSided => {
            one_sided_on_box(params, truncation.max_m, truncation.max_n)?.into()
        }
        SystemKind::TwoSided => two_sided_on_box(params, truncation)?.into(),
    })
}

#[cfg(test)]
mod tests;
