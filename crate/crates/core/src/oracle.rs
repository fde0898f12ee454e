//! Numerical ground truth: the truncated CTMC generator of each system, built
//! straight from its transition rules, and a stationary solver for it.
//!
//! Transitions that would leave the truncation box are dropped, so the
//! truncated chain is solved exactly and its error against the infinite chain
//! is governed by the mass the product form puts outside the box.

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::fmt_f64;
use crate::model::{
    ChainState, NSystemParams, OneSidedState, StationaryDistribution, SystemDistribution,
    SystemKind, Truncation, TwoSidedState,
};

/// Above this many states `SolveMethod::Auto` switches from direct
/// elimination to power iteration.
pub const DIRECT_STATE_LIMIT: usize = 40_000;

pub const DEFAULT_SOLVER_TOLERANCE: f64 = 1e-12;

pub const DEFAULT_MAX_ITERATIONS: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("every truncation bound must be at least 2")]
    BoundsTooSmall,
    #[error("truncated generator is not irreducible: {0} states unreachable")]
    NotIrreducible(usize),
    #[error("power iteration did not converge within {0} iterations")]
    NoConvergence(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMethod {
    /// Direct elimination up to [`DIRECT_STATE_LIMIT`] states, power iteration
    /// above.
    #[default]
    Auto,
    Direct,
    Power,
}

/// Rate matrix of a chain restricted to a finite box, stored row-compressed.
#[derive(Debug, Clone)]
pub struct TruncatedGenerator<S> {
    pub params: NSystemParams,
    pub truncation: Truncation,
    states: Vec<S>,
    index: BTreeMap<S, usize>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    rates: Vec<f64>,
    exit_rates: Vec<f64>,
}

impl<S: ChainState> TruncatedGenerator<S> {
    fn from_rules(
        params: NSystemParams,
        truncation: Truncation,
        mut states: Vec<S>,
        rules: impl Fn(S, &mut dyn FnMut(S, f64)),
    ) -> Self {
        states.sort();
        states.dedup();
        let index: BTreeMap<S, usize> = states.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        let mut row_ptr = Vec::with_capacity(states.len() + 1);
        let mut cols = Vec::new();
        let mut rates = Vec::new();
        let mut exit_rates = Vec::with_capacity(states.len());
        row_ptr.push(0);
        for (from, s) in states.iter().enumerate() {
            let mut row: BTreeMap<usize, f64> = BTreeMap::new();
            rules(*s, &mut |target, rate| {
                if rate <= 0.0 {
                    return;
                }
                if let Some(&to) = index.get(&target) {
                    if to != from {
                        *row.entry(to).or_insert(0.0) += rate;
                    }
                }
            });
            exit_rates.push(row.values().sum());
            for (to, rate) in row {
                cols.push(to);
                rates.push(rate);
            }
            row_ptr.push(cols.len());
        }
        Self {
            params,
            truncation,
            states,
            index,
            row_ptr,
            cols,
            rates,
            exit_rates,
        }
    }

    pub fn states(&self) -> &[S] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, state: &S) -> Option<usize> {
        self.index.get(state).copied()
    }

    pub fn exit_rate(&self, i: usize) -> f64 {
        self.exit_rates[i]
    }

    pub fn exit_rates(&self) -> &[f64] {
        &self.exit_rates
    }

    /// Outgoing `(target index, rate)` pairs of state `i`.
    pub fn outgoing(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()]
            .iter()
            .copied()
            .zip(self.rates[range].iter().copied())
    }

    /// Outgoing transitions of `state` keyed by target state.
    pub fn transitions_from(&self, state: &S) -> BTreeMap<S, f64> {
        self.index_of(state)
            .map(|i| self.outgoing(i).map(|(j, r)| (self.states[j], r)).collect())
            .unwrap_or_default()
    }

    /// All `(from, to, rate)` triples.
    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.len()).flat_map(move |i| self.outgoing(i).map(move |(j, r)| (i, j, r)))
    }

    fn reachable(&self, start: usize, reverse: bool) -> Vec<bool> {
        let mut adj = vec![Vec::new(); self.len()];
        for (i, j, _) in self.triples() {
            if reverse {
                adj[j].push(i);
            } else {
                adj[i].push(j);
            }
        }
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen
    }

    /// Every state reaches the empty state and is reached from it.
    pub fn check_irreducible(&self) -> Result<(), OracleError> {
        let start = self.index_of(&S::empty()).ok_or(OracleError::NotIrreducible(self.len()))?;
        let fwd = self.reachable(start, false);
        let bwd = self.reachable(start, true);
        let missing = fwd.iter().zip(&bwd).filter(|(a, b)| !(**a && **b)).count();
        if missing > 0 {
            return Err(OracleError::NotIrreducible(missing));
        }
        Ok(())
    }

    /// `‖πQ‖∞ / ‖π‖∞` for a vector indexed like [`Self::states`].
    pub fn residual(&self, pi: &[f64]) -> f64 {
        let mut flow: Vec<f64> = pi
            .iter()
            .zip(&self.exit_rates)
            .map(|(p, e)| -p * e)
            .collect();
        for (i, j, r) in self.triples() {
            flow[j] += pi[i] * r;
        }
        let num = flow.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let den = pi.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        num / den
    }

    /// Residual of a distribution over the same states (missing states count
    /// as zero).
    pub fn residual_of(&self, dist: &StationaryDistribution<S>) -> f64 {
        let pi: Vec<f64> = self.states.iter().map(|s| dist.get(s)).collect();
        self.residual(&pi)
    }

    /// Writes the rate triples as `from,to,rate` CSV.
    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "from,to,rate")?;
        for (i, j, r) in self.triples() {
            writeln!(w, "{i},{j},{}", fmt_f64(r))?;
        }
        Ok(())
    }

    /// Sidecar header mapping CSV indices to states.
    pub fn header_json(&self) -> serde_json::Value {
        serde_json::json!({
            "system": S::SYSTEM,
            "params": self.params,
            "truncation": self.truncation,
            "states": self.states.iter().map(|s| s.to_json()).collect::<Vec<_>>(),
        })
    }
}

fn check_bounds(bounds: &[usize]) -> Result<(), OracleError> {
    if bounds.iter().any(|&b| b < 2) {
        return Err(OracleError::BoundsTooSmall);
    }
    Ok(())
}

/// Transitions of the one-sided chain out of `(m, n)`.
fn one_sided_rules(p: &NSystemParams, s: OneSidedState, emit: &mut dyn FnMut(OneSidedState, f64)) {
    let OneSidedState { m, n } = s;
    let gs = p.gamma_s();
    let q = 1.0 - gs;
    emit(OneSidedState::new(m, n + 1), p.supply_rate());
    if n >= 1 {
        emit(OneSidedState::new(m, n - 1), n as f64 * p.theta_s);
    }
    if m >= 1 {
        emit(OneSidedState::new(m - 1, n), m as f64 * p.theta_s);
        emit(OneSidedState::new(m - 1, n), p.mu2);
    } else if n >= 1 {
        emit(OneSidedState::new(m, n - 1), p.mu2);
    }
    // A type-1 demand inspects unknown supplies oldest first: k inflexible ones
    // join the revealed prefix before a flexible one is matched.
    for k in 0..n {
        emit(
            OneSidedState::new(m + k, n - k - 1),
            p.mu1 * gs * q.powi(k as i32),
        );
    }
    // All n unknowns inflexible: they are revealed and the demand is lost.
    if n >= 1 {
        emit(OneSidedState::new(m + n, 0), p.mu1 * q.powi(n as i32));
    }
}

/// Truncated generator of the one-sided system on `[0, max_m] × [0, max_n]`.
pub fn build_generator_one_sided(
    params: &NSystemParams,
    max_m: usize,
    max_n: usize,
) -> Result<TruncatedGenerator<OneSidedState>, OracleError> {
    check_bounds(&[max_m, max_n])?;
    let states = (0..=max_m)
        .flat_map(|m| (0..=max_n).map(move |n| OneSidedState::new(m, n)))
        .collect();
    let p = *params;
    Ok(TruncatedGenerator::from_rules(
        p,
        Truncation::one_sided(max_m, max_n),
        states,
        |s, emit| one_sided_rules(&p, s, emit),
    ))
}

fn two_sided_rules(p: &NSystemParams, s: TwoSidedState, emit: &mut dyn FnMut(TwoSidedState, f64)) {
    let left = TwoSidedState::left_or_empty;
    let right = TwoSidedState::right_or_empty;
    let both = |i: usize, j: usize| TwoSidedState::both(i, j).expect("non-zero by construction");
    match s {
        TwoSidedState::Empty => {
            emit(left(0, 1), p.supply_rate());
            emit(right(0, 1), p.demand_rate());
        }
        TwoSidedState::Left(q) => {
            let (m, n) = (q.known(), q.unknown());
            let gs = p.gamma_s();
            let fail = 1.0 - gs;
            emit(left(m, n + 1), p.supply_rate());
            if n >= 1 {
                emit(left(m, n - 1), n as f64 * p.theta_s);
            }
            if m >= 1 {
                emit(left(m - 1, n), m as f64 * p.theta_s);
                emit(left(m - 1, n), p.mu2);
            } else {
                emit(left(0, n - 1), p.mu2);
            }
            for k in 0..n {
                emit(left(m + k, n - k - 1), p.mu1 * gs * fail.powi(k as i32));
            }
            // No flexible supply anywhere: the type-1 demand waits.
            emit(both(m + n, 1), p.mu1 * fail.powi(n as i32));
        }
        TwoSidedState::Right(q) => {
            let (m, n) = (q.known(), q.unknown());
            let gd = p.gamma_d();
            let fail = 1.0 - gd;
            emit(right(m, n + 1), p.demand_rate());
            if n >= 1 {
                emit(right(m, n - 1), n as f64 * p.theta_d);
            }
            if m >= 1 {
                emit(right(m - 1, n), m as f64 * p.theta_d);
                emit(right(m - 1, n), p.lambda1);
            } else {
                emit(right(0, n - 1), p.lambda1);
            }
            // An inflexible supply looks for the oldest type-2 demand.
            for k in 0..n {
                emit(right(m + k, n - k - 1), p.lambda2 * gd * fail.powi(k as i32));
            }
            emit(both(1, m + n), p.lambda2 * fail.powi(n as i32));
        }
        TwoSidedState::Both(c) => {
            let (i, j) = (c.supply(), c.demand());
            emit(both(i + 1, j), p.lambda2);
            emit(both(i, j + 1), p.mu1);
            let supply_down = p.mu2 + i as f64 * p.theta_s;
            if i > 1 {
                emit(both(i - 1, j), supply_down);
            } else {
                emit(right(j, 0), supply_down);
            }
            let demand_down = p.lambda1 + j as f64 * p.theta_d;
            if j > 1 {
                emit(both(i, j - 1), demand_down);
            } else {
                emit(left(i, 0), demand_down);
            }
        }
    }
}

/// Truncated generator of the two-sided system. Left and right queues use
/// `max_m × max_n`; the both-queues regime uses `max_i × max_j`.
pub fn build_generator_two_sided(
    params: &NSystemParams,
    truncation: Truncation,
) -> Result<TruncatedGenerator<TwoSidedState>, OracleError> {
    let max_i = truncation.max_i.unwrap_or(truncation.max_m);
    let max_j = truncation.max_j.unwrap_or(truncation.max_n);
    let (max_m, max_n) = (truncation.max_m, truncation.max_n);
    check_bounds(&[max_m, max_n, max_i, max_j])?;
    let mut states = vec![TwoSidedState::Empty];
    for m in 0..=max_m {
        for n in 0..=max_n {
            if m + n > 0 {
                states.push(TwoSidedState::left_or_empty(m, n));
                states.push(TwoSidedState::right_or_empty(m, n));
            }
        }
    }
    for i in 1..=max_i {
        for j in 1..=max_j {
            states.push(TwoSidedState::both(i, j).expect("indices start at one"));
        }
    }
    let p = *params;
    Ok(TruncatedGenerator::from_rules(
        p,
        Truncation::two_sided(max_m, max_n, max_i, max_j),
        states,
        |s, emit| two_sided_rules(&p, s, emit),
    ))
}

/// Generator of either system on a box.
pub fn build_generator(
    params: &NSystemParams,
    system: SystemKind,
    truncation: Truncation,
) -> Result<AnyGenerator, OracleError> {
    Ok(match system {
        SystemKind::OneSided => AnyGenerator::OneSided(build_generator_one_sided(
            params,
            truncation.max_m,
            truncation.max_n,
        )?),
        SystemKind::TwoSided => {
            AnyGenerator::TwoSided(build_generator_two_sided(params, truncation)?)
        }
    })
}

#[derive(Debug, Clone)]
pub enum AnyGenerator {
    OneSided(TruncatedGenerator<OneSidedState>),
    TwoSided(TruncatedGenerator<TwoSidedState>),
}

impl AnyGenerator {
    pub fn len(&self) -> usize {
        match self {
            AnyGenerator::OneSided(g) => g.len(),
            AnyGenerator::TwoSided(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn solve(&self, options: &SolverOptions) -> Result<SystemDistribution, OracleError> {
        Ok(match self {
            AnyGenerator::OneSided(g) => solve_stationary_with(g, options)?.into(),
            AnyGenerator::TwoSided(g) => solve_stationary_with(g, options)?.into(),
        })
    }

    pub fn residual_of(&self, dist: &SystemDistribution) -> Option<f64> {
        match (self, dist) {
            (AnyGenerator::OneSided(g), SystemDistribution::OneSided(d)) => Some(g.residual_of(d)),
            (AnyGenerator::TwoSided(g), SystemDistribution::TwoSided(d)) => Some(g.residual_of(d)),
            _ => None,
        }
    }

    pub fn write_csv(&self, w: impl Write) -> io::Result<()> {
        match self {
            AnyGenerator::OneSided(g) => g.write_csv(w),
            AnyGenerator::TwoSided(g) => g.write_csv(w),
        }
    }

    pub fn header_json(&self) -> serde_json::Value {
        match self {
            AnyGenerator::OneSided(g) => g.header_json(),
            AnyGenerator::TwoSided(g) => g.header_json(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub method: SolveMethod,
    pub tol: f64,
    pub max_iterations: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: SolveMethod::Auto,
            tol: DEFAULT_SOLVER_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

/// Stationary distribution of a truncated generator.
pub fn solve_stationary<S: ChainState>(
    gen: &TruncatedGenerator<S>,
    method: SolveMethod,
    tol: f64,
) -> Result<StationaryDistribution<S>, OracleError> {
    solve_stationary_with(
        gen,
        &SolverOptions {
            method,
            tol,
            ..SolverOptions::default()
        },
    )
}

pub fn solve_stationary_with<S: ChainState>(
    gen: &TruncatedGenerator<S>,
    options: &SolverOptions,
) -> Result<StationaryDistribution<S>, OracleError> {
    gen.check_irreducible()?;
    let direct = match options.method {
        SolveMethod::Direct => true,
        SolveMethod::Power => false,
        SolveMethod::Auto => gen.len() <= DIRECT_STATE_LIMIT,
    };
    let pi = if direct {
        banded_gth(gen)?
    } else {
        power_iteration(gen, options.tol, options.max_iterations)?
    };
    let probs = gen.states.iter().copied().zip(pi).collect();
    // The truncated chain lives on its box, so there is no mass outside it.
    Ok(StationaryDistribution::new(
        gen.params,
        gen.truncation,
        0.0,
        options.tol,
        probs,
    ))
}

/// Grassmann–Taksar–Heyman state reduction on a band ordering.
///
/// States are ordered by [`ChainState::level`]. Every transition moves at most
/// one level, so the rate matrix is banded in that order and eliminating a
/// state only fills entries inside the band. The reduction never subtracts,
/// which keeps tiny tail probabilities accurate to relative precision.
fn banded_gth<S: ChainState>(gen: &TruncatedGenerator<S>) -> Result<Vec<f64>, OracleError> {
    let n = gen.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (gen.states[i].level(), gen.states[i]));
    let mut pos = vec![0usize; n];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    let bw = gen
        .triples()
        .map(|(i, j, _)| pos[i].abs_diff(pos[j]))
        .max()
        .unwrap_or(0);
    let width = 2 * bw + 1;
    let mut band = vec![0.0f64; n * width];
    let at = |i: usize, j: usize| i * width + (j + bw - i);
    for (i, j, r) in gen.triples() {
        band[at(pos[i], pos[j])] = r;
    }
    for k in (1..n).rev() {
        let lo = k.saturating_sub(bw);
        let s: f64 = (lo..k).map(|j| band[at(k, j)]).sum();
        if s <= 0.0 {
            return Err(OracleError::NotIrreducible(1));
        }
        for i in lo..k {
            band[at(i, k)] /= s;
        }
        for i in lo..k {
            let aik = band[at(i, k)];
            if aik == 0.0 {
                continue;
            }
            for j in lo..k {
                if j != i {
                    let akj = band[at(k, j)];
                    band[at(i, j)] += aik * akj;
                }
            }
        }
    }
    let mut x = vec![0.0f64; n];
    x[0] = 1.0;
    for k in 1..n {
        let lo = k.saturating_sub(bw);
        x[k] = (lo..k).map(|i| x[i] * band[at(i, k)]).sum();
    }
    let total: f64 = x.iter().sum();
    Ok((0..n).map(|i| x[pos[i]] / total).collect())
}

/// Power iteration on the uniformized chain `P = I + Q/Λ` with
/// `Λ = 1.01 · max exit rate`, stopped when successive iterates differ by
/// less than `tol` in max norm.
fn power_iteration<S: ChainState>(
    gen: &TruncatedGenerator<S>,
    tol: f64,
    max_iterations: u64,
) -> Result<Vec<f64>, OracleError> {
    let n = gen.len();
    let lambda = 1.01 * gen.exit_rates.iter().fold(0.0f64, |m, x| m.max(*x));
    let stay: Vec<f64> = gen.exit_rates.iter().map(|e| 1.0 - e / lambda).collect();
    let mut x = vec![1.0 / n as f64; n];
    let mut y = vec![0.0; n];
    for _ in 0..max_iterations {
        for (yi, (xi, si)) in y.iter_mut().zip(x.iter().zip(&stay)) {
            *yi = xi * si;
        }
        for (i, j, r) in gen.triples() {
            y[j] += x[i] * r / lambda;
        }
        let total: f64 = y.iter().sum();
        let mut diff = 0.0f64;
        for (yi, xi) in y.iter_mut().zip(&x) {
            *yi /= total;
            diff = diff.max((*yi - xi).abs());
        }
        std::mem::swap(&mut x, &mut y);
        if diff < tol {
            return Ok(x);
        }
    }
    Err(OracleError::NoConvergence(max_iterations))
}
