//! Global balance equations of both systems, written out term by term.
//!
//! These are evaluated independently of the generator in `oracle`, so they can
//! check product-form and oracle distributions alike. Only interior states are
//! checked: every referenced state and every outgoing transition must lie
//! inside the truncation box.

use crate::model::{
    NSystemParams, OneSidedState, StationaryDistribution, SystemDistribution, Truncation,
    TwoSidedState,
};

/// Probabilities below this are skipped; they sit near the subnormal range
/// where relative residuals lose meaning.
const NEGLIGIBLE: f64 = 1e-250;

/// `|outflow − inflow| / outflow`, or `None` when the state is negligible.
fn relative(out: f64, inflow: f64) -> Option<f64> {
    (out > NEGLIGIBLE).then(|| (out - inflow).abs() / out)
}

fn one_sided_interior(t: &Truncation, s: OneSidedState) -> bool {
    s.total() < t.max_m.min(t.max_n)
}

/// Outflow and inflow of probability at `(m, n)`; `None` if a referenced state
/// is outside the box.
fn one_sided_flows(
    p: &NSystemParams,
    pi: &impl Fn(usize, usize) -> Option<f64>,
    m: usize,
    n: usize,
) -> Option<(f64, f64)> {
    let lam = p.supply_rate();
    let mu = p.demand_rate();
    let th = p.theta_s;
    let gs = p.gamma_s();
    let q = 1.0 - gs;
    let (mf, nf) = (m as f64, n as f64);
    let here = pi(m, n)?;
    let scan_success = |shift: usize| -> Option<f64> {
        // Σ_{k=0..m} π(m−k, shift+k) μ1 γs (1−γs)^k
        let mut acc = 0.0;
        for k in 0..=m {
            acc += pi(m - k, shift + k)? * p.mu1 * gs * q.powi(k as i32);
        }
        Some(acc)
    };
    match (m, n) {
        (0, 0) => {
            let out = here * lam;
            let inflow = pi(0, 1)? * (th + p.mu1 * gs + p.mu2) + pi(1, 0)? * (p.mu2 + th);
            Some((out, inflow))
        }
        (0, _) => {
            let out = here * (mu + lam + nf * th);
            let inflow = pi(0, n + 1)? * ((nf + 1.0) * th + p.mu1 * gs + p.mu2)
                + pi(1, n)? * (p.mu2 + th)
                + pi(0, n - 1)? * lam;
            Some((out, inflow))
        }
        (_, 0) => {
            let out = here * (p.mu2 + lam + mf * th);
            let mut scan_fail = 0.0;
            for k in 1..=m {
                scan_fail += pi(m - k, k)? * p.mu1 * q.powi(k as i32);
            }
            let inflow = pi(m, 1)? * th
                + pi(m + 1, 0)? * (p.mu2 + (mf + 1.0) * th)
                + scan_success(1)?
                + scan_fail;
            Some((out, inflow))
        }
        _ => {
            let out = here * (mu + lam + (mf + nf) * th);
            let inflow = pi(m, n + 1)? * (nf + 1.0) * th
                + pi(m + 1, n)? * (p.mu2 + (mf + 1.0) * th)
                + pi(m, n - 1)? * lam
                + scan_success(n + 1)?;
            Some((out, inflow))
        }
    }
}

/// Maximum relative balance residual over interior states of a one-sided
/// distribution, optionally restricted to `m, n ≤ within`.
pub fn one_sided_balance_residual(
    dist: &StationaryDistribution<OneSidedState>,
    within: Option<usize>,
) -> f64 {
    let p = dist.params;
    let t = dist.truncation;
    let pi = |m: usize, n: usize| {
        let s = OneSidedState::new(m, n);
        dist.contains(&s).then(|| dist.get(&s))
    };
    let limit = within.unwrap_or(usize::MAX);
    dist.iter()
        .map(|(s, _)| *s)
        .filter(|s| one_sided_interior(&t, *s) && s.m <= limit && s.n <= limit)
        .filter_map(|s| one_sided_flows(&p, &pi, s.m, s.n))
        .filter_map(|(out, inflow)| relative(out, inflow))
        .fold(0.0, f64::max)
}

fn two_sided_interior(t: &Truncation, s: TwoSidedState) -> bool {
    let side = t.max_m.min(t.max_n);
    let max_i = t.max_i.unwrap_or(t.max_m);
    let max_j = t.max_j.unwrap_or(t.max_n);
    match s {
        TwoSidedState::Empty => side >= 1,
        TwoSidedState::Left(q) => q.total() < side && q.total() < max_i && max_j >= 2,
        TwoSidedState::Right(q) => q.total() < side && q.total() < max_j && max_i >= 2,
        TwoSidedState::Both(c) => {
            c.supply() < max_i && c.demand() < max_j && c.supply() < side && c.demand() < side
        }
    }
}

struct TwoSidedLookup<'a>(&'a StationaryDistribution<TwoSidedState>);

impl TwoSidedLookup<'_> {
    fn get(&self, s: TwoSidedState) -> Option<f64> {
        self.0.contains(&s).then(|| self.0.get(&s))
    }

    fn left(&self, m: usize, n: usize) -> Option<f64> {
        self.get(TwoSidedState::left_or_empty(m, n))
    }

    fn right(&self, m: usize, n: usize) -> Option<f64> {
        self.get(TwoSidedState::right_or_empty(m, n))
    }

    fn both(&self, i: usize, j: usize) -> Option<f64> {
        self.get(TwoSidedState::both(i, j).ok()?)
    }
}

fn two_sided_flows(p: &NSystemParams, d: &TwoSidedLookup, s: TwoSidedState) -> Option<(f64, f64)> {
    let lam = p.supply_rate();
    let mu = p.demand_rate();
    let (ts, td) = (p.theta_s, p.theta_d);
    let (gs, gd) = (p.gamma_s(), p.gamma_d());
    let here = d.get(s)?;
    match s {
        TwoSidedState::Empty => {
            let out = here * (lam + mu);
            let inflow = d.left(0, 1)? * (ts + p.mu1 * gs + p.mu2)
                + d.left(1, 0)? * (p.mu2 + ts)
                + d.right(1, 0)? * (td + p.lambda1)
                + d.right(0, 1)? * (td + p.lambda1 + p.lambda2 * gd);
            Some((out, inflow))
        }
        TwoSidedState::Left(q) => {
            let (m, n) = (q.known(), q.unknown());
            let (mf, nf) = (m as f64, n as f64);
            let out = here * (mu + lam + (mf + nf) * ts);
            let scan = |shift: usize| -> Option<f64> {
                let mut acc = 0.0;
                for k in 0..=m {
                    acc += d.left(m - k, shift + k)? * p.mu1 * gs * (1.0 - gs).powi(k as i32);
                }
                Some(acc)
            };
            let inflow = if m == 0 {
                d.left(0, n + 1)? * ((nf + 1.0) * ts + p.mu1 * gs + p.mu2)
                    + d.left(1, n)? * (p.mu2 + ts)
                    + d.left(0, n - 1)? * lam
            } else if n == 0 {
                d.left(m, 1)? * ts
                    + d.left(m + 1, 0)? * (p.mu2 + (mf + 1.0) * ts)
                    + d.both(m, 1)? * (p.lambda1 + td)
                    + scan(1)?
            } else {
                d.left(m, n + 1)? * (nf + 1.0) * ts
                    + d.left(m + 1, n)? * (p.mu2 + (mf + 1.0) * ts)
                    + d.left(m, n - 1)? * lam
                    + scan(n + 1)?
            };
            Some((out, inflow))
        }
        TwoSidedState::Right(q) => {
            let (m, n) = (q.known(), q.unknown());
            let (mf, nf) = (m as f64, n as f64);
            let out = here * (mu + lam + (mf + nf) * td);
            let scan = |shift: usize| -> Option<f64> {
                let mut acc = 0.0;
                for k in 0..=m {
                    acc += d.right(m - k, shift + k)? * p.lambda2 * gd * (1.0 - gd).powi(k as i32);
                }
                Some(acc)
            };
            let inflow = if m == 0 {
                d.right(0, n + 1)? * ((nf + 1.0) * td + p.lambda2 * gd + p.lambda1)
                    + d.right(1, n)? * (p.lambda1 + td)
                    + d.right(0, n - 1)? * mu
            } else if n == 0 {
                // The both-queues state that empties its supply side into (m, 0)
                // holds one inflexible supply and m type-1 demands.
                d.right(m, 1)? * td
                    + d.right(m + 1, 0)? * (p.lambda1 + (mf + 1.0) * td)
                    + d.both(1, m)? * (p.mu2 + ts)
                    + scan(1)?
            } else {
                d.right(m, n + 1)? * (nf + 1.0) * td
                    + d.right(m + 1, n)? * (p.lambda1 + (mf + 1.0) * td)
                    + d.right(m, n - 1)? * mu
                    + scan(n + 1)?
            };
            Some((out, inflow))
        }
        TwoSidedState::Both(c) => {
            let (i, j) = (c.supply(), c.demand());
            let (fi, fj) = (i as f64, j as f64);
            let out = here * (fi * ts + fj * td + mu + lam);
            let mut inflow = d.both(i + 1, j)? * ((fi + 1.0) * ts + p.mu2)
                + d.both(i, j + 1)? * ((fj + 1.0) * td + p.lambda1);
            if i == 1 && j == 1 {
                inflow += d.right(1, 0)? * p.lambda2
                    + d.right(0, 1)? * p.lambda2 * (1.0 - gd)
                    + d.left(1, 0)? * p.mu1
                    + d.left(0, 1)? * p.mu1 * (1.0 - gs);
            } else if i == 1 {
                inflow += d.both(1, j - 1)? * p.mu1;
                for k in 0..=j {
                    inflow += d.right(j - k, k)? * p.lambda2 * (1.0 - gd).powi(k as i32);
                }
            } else if j == 1 {
                inflow += d.both(i - 1, 1)? * p.lambda2;
                for k in 0..=i {
                    inflow += d.left(i - k, k)? * p.mu1 * (1.0 - gs).powi(k as i32);
                }
            } else {
                inflow += d.both(i - 1, j)? * p.lambda2 + d.both(i, j - 1)? * p.mu1;
            }
            Some((out, inflow))
        }
    }
}

/// Maximum relative balance residual over interior states of a two-sided
/// distribution, optionally restricted to states whose coordinates are all
/// `≤ within`.
pub fn two_sided_balance_residual(
    dist: &StationaryDistribution<TwoSidedState>,
    within: Option<usize>,
) -> f64 {
    let p = dist.params;
    let t = dist.truncation;
    let lookup = TwoSidedLookup(dist);
    let limit = within.unwrap_or(usize::MAX);
    let small = |s: &TwoSidedState| match s {
        TwoSidedState::Empty => true,
        TwoSidedState::Left(q) | TwoSidedState::Right(q) => {
            q.known() <= limit && q.unknown() <= limit
        }
        TwoSidedState::Both(c) => c.supply() <= limit && c.demand() <= limit,
    };
    dist.iter()
        .map(|(s, _)| *s)
        .filter(|s| two_sided_interior(&t, *s) && small(s))
        .filter_map(|s| two_sided_flows(&p, &lookup, s))
        .filter_map(|(out, inflow)| relative(out, inflow))
        .fold(0.0, f64::max)
}

/// Maximum relative residual of the global balance equations over the
/// interior of `dist`.
pub fn global_balance_residual(dist: &SystemDistribution) -> f64 {
    match dist {
        SystemDistribution::OneSided(d) => one_sided_balance_residual(d, None),
        SystemDistribution::TwoSided(d) => two_sided_balance_residual(d, None),
    }
}
