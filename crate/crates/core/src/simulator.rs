//! Seeded simulation of the matching system, either as the parsimonious Markov
//! chain (revealed/unrevealed counts) or as the physical system of typed agents
//! waiting in FCFS queues with individual patience clocks.
//!
//! Randomness comes from xoshiro256++ seeded with `seed_from_u64(seed)`;
//! replication `r` uses that generator advanced by `r` jumps of 2^128 steps.
//! Exponential variates use the inverse CDF.

use std::collections::BTreeMap;

use rand::Rng;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::model::{
    stability_check, tv_maps, ChainState, NSystemParams, OneSidedState, SystemDistribution,
    SystemKind, TwoSidedState,
};

pub const DEFAULT_WARMUP_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("horizon must be positive")]
    BadHorizon,
    #[error("warmup fraction {0} outside [0, 1)")]
    BadWarmup(f64),
    #[error("replication count must be at least 1")]
    NoReplications,
    #[error("one-sided simulation without reneging needs lambda1+lambda2 < mu1+mu2 and lambda2 < mu2")]
    Unstable,
    #[error("the two-sided system needs theta_s > 0 and theta_d > 0")]
    TwoSidedNeedsReneging,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Horizon {
    /// Stop after this many events.
    Events(u64),
    /// Stop at this simulated time.
    Time(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    #[default]
    Parsimonious,
    Physical,
}

impl std::fmt::Display for SimMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SimMode::Parsimonious => "parsimonious",
            SimMode::Physical => "physical",
        })
    }
}

impl std::str::FromStr for SimMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "parsimonious" => Ok(SimMode::Parsimonious),
            "physical" => Ok(SimMode::Physical),
            other => Err(format!("unknown mode {other:?} (expected parsimonious or physical)")),
        }
    }
}

/// Warmup ends at simulated time `warmup_fraction · t` under a time horizon,
/// and at the time of event `⌊warmup_fraction · n⌋` under an event horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub system: SystemKind,
    pub mode: SimMode,
    pub horizon: Horizon,
    pub seed: u64,
    pub warmup_fraction: f64,
}

impl SimConfig {
    pub fn new(system: SystemKind, mode: SimMode, horizon: Horizon, seed: u64) -> Self {
        Self {
            system,
            mode,
            horizon,
            seed,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
        }
    }

    pub fn validate(&self, params: &NSystemParams) -> Result<(), SimError> {
        match self.horizon {
            Horizon::Events(0) => return Err(SimError::BadHorizon),
            Horizon::Time(t) if !(t > 0.0 && t.is_finite()) => return Err(SimError::BadHorizon),
            _ => {}
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(SimError::BadWarmup(self.warmup_fraction));
        }
        match self.system {
            SystemKind::OneSided if params.theta_s == 0.0 && !stability_check(params) => {
                Err(SimError::Unstable)
            }
            SystemKind::TwoSided if params.theta_s <= 0.0 || params.theta_d <= 0.0 => {
                Err(SimError::TwoSidedNeedsReneging)
            }
            _ => Ok(()),
        }
    }
}

/// Matches by (supply type, demand type). Inflexible supply never serves
/// type-1 demand, so that combination has no counter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub flexible_type1: u64,
    pub flexible_type2: u64,
    pub inflexible_type2: u64,
}

impl MatchCounts {
    pub fn total(&self) -> u64 {
        self.flexible_type1 + self.flexible_type2 + self.inflexible_type2
    }

    fn record(&mut self, flexible: bool, type1: bool) {
        match (flexible, type1) {
            (true, true) => self.flexible_type1 += 1,
            (true, false) => self.flexible_type2 += 1,
            (false, false) => self.inflexible_type2 += 1,
            (false, true) => unreachable!("inflexible supply cannot serve type-1 demand"),
        }
    }

    fn add(&mut self, o: &MatchCounts) {
        self.flexible_type1 += o.flexible_type1;
        self.flexible_type2 += o.flexible_type2;
        self.inflexible_type2 += o.inflexible_type2;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTally {
    pub supply_arrivals: u64,
    pub demand_arrivals: u64,
    pub matches: MatchCounts,
    pub supply_abandonments: u64,
    pub demand_abandonments: u64,
    /// Demand that left at once because nothing compatible was waiting.
    pub demand_lost: u64,
}

impl EventTally {
    fn add(&mut self, o: &EventTally) {
        self.supply_arrivals += o.supply_arrivals;
        self.demand_arrivals += o.demand_arrivals;
        self.matches.add(&o.matches);
        self.supply_abandonments += o.supply_abandonments;
        self.demand_abandonments += o.demand_abandonments;
        self.demand_lost += o.demand_lost;
    }
}

/// Time spent in a state after warmup and the number of times it was left.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StateStats {
    pub time: f64,
    pub departures: u64,
}

/// Aggregate key of the physical simulation: agents waiting on each side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Counts {
    pub supply: usize,
    pub demand: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Occupancy {
    OneSided(BTreeMap<OneSidedState, StateStats>),
    TwoSided(BTreeMap<TwoSidedState, StateStats>),
    Counts(BTreeMap<Counts, StateStats>),
}

fn fractions<K: Ord + Copy>(map: &BTreeMap<K, StateStats>) -> BTreeMap<K, f64> {
    let total: f64 = map.values().map(|s| s.time).sum();
    map.iter().map(|(k, s)| (*k, s.time / total)).collect()
}

fn lump<S: ChainState>(map: &BTreeMap<S, f64>) -> BTreeMap<Counts, f64> {
    let mut out = BTreeMap::new();
    for (s, p) in map {
        let key = Counts {
            supply: s.supply_count(),
            demand: s.demand_count(),
        };
        *out.entry(key).or_insert(0.0) += p;
    }
    out
}

/// Distribution of `(supply count, demand count)` under a stationary
/// distribution.
pub fn count_distribution(dist: &SystemDistribution) -> BTreeMap<Counts, f64> {
    match dist {
        SystemDistribution::OneSided(d) => {
            lump(&d.iter().map(|(s, p)| (*s, p)).collect::<BTreeMap<_, _>>())
        }
        SystemDistribution::TwoSided(d) => {
            lump(&d.iter().map(|(s, p)| (*s, p)).collect::<BTreeMap<_, _>>())
        }
    }
}

impl Occupancy {
    pub fn len(&self) -> usize {
        match self {
            Occupancy::OneSided(m) => m.len(),
            Occupancy::TwoSided(m) => m.len(),
            Occupancy::Counts(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Time-weighted fraction in each count pair.
    pub fn count_fractions(&self) -> BTreeMap<Counts, f64> {
        match self {
            Occupancy::OneSided(m) => lump(&fractions(m)),
            Occupancy::TwoSided(m) => lump(&fractions(m)),
            Occupancy::Counts(m) => fractions(m),
        }
    }

    /// Fraction of time with nothing waiting.
    pub fn empty_fraction(&self) -> f64 {
        self.count_fractions()
            .get(&Counts {
                supply: 0,
                demand: 0,
            })
            .copied()
            .unwrap_or(0.0)
    }

    /// Total variation to `dist` on full states when both are parsimonious
    /// states of the same system, otherwise on count pairs.
    pub fn total_variation(&self, dist: &SystemDistribution) -> f64 {
        let full = |d: &SystemDistribution| match (self, d) {
            (Occupancy::OneSided(m), SystemDistribution::OneSided(d)) => {
                Some(tv_maps(&fractions(m), &d.iter().map(|(s, p)| (*s, p)).collect()))
            }
            (Occupancy::TwoSided(m), SystemDistribution::TwoSided(d)) => {
                Some(tv_maps(&fractions(m), &d.iter().map(|(s, p)| (*s, p)).collect()))
            }
            _ => None,
        };
        full(dist).unwrap_or_else(|| tv_maps(&self.count_fractions(), &count_distribution(dist)))
    }

    fn to_json_value(&self) -> Value {
        fn rows<K: Ord + Copy>(
            map: &BTreeMap<K, StateStats>,
            key: impl Fn(&K) -> Value,
        ) -> Vec<Value> {
            let fr = fractions(map);
            map.iter()
                .map(|(k, s)| json!({"state": key(k), "fraction": fr[k], "departures": s.departures}))
                .collect()
        }
        Value::Array(match self {
            Occupancy::OneSided(m) => rows(m, |s| s.to_json()),
            Occupancy::TwoSided(m) => rows(m, |s| s.to_json()),
            Occupancy::Counts(m) => rows(m, |c| json!([c.supply, c.demand])),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSummary {
    pub params: NSystemParams,
    pub config: SimConfig,
    pub replication: u64,
    /// Post-warmup occupancy with per-state departure counts.
    pub occupancy: Occupancy,
    /// Tallies over the whole run.
    pub events: EventTally,
    /// Tallies of events after warmup.
    pub measured: EventTally,
    pub supply_in_system: usize,
    pub demand_in_system: usize,
    pub event_count: u64,
    /// Simulated time at the end of the run.
    pub elapsed: f64,
    /// Length of the post-warmup window.
    pub measured_time: f64,
}

impl SimulationSummary {
    pub fn supply_flow_balanced(&self) -> bool {
        let e = &self.events;
        e.supply_arrivals
            == e.matches.total() + e.supply_abandonments + self.supply_in_system as u64
    }

    pub fn demand_flow_balanced(&self) -> bool {
        let e = &self.events;
        e.demand_arrivals
            == e.matches.total()
                + e.demand_abandonments
                + e.demand_lost
                + self.demand_in_system as u64
    }

    /// Post-warmup rate of a tallied quantity.
    pub fn rate(&self, f: impl Fn(&EventTally) -> u64) -> f64 {
        f(&self.measured) as f64 / self.measured_time
    }

    /// `(state, visit time, departures / time)` for parsimonious runs, most
    /// visited first.
    pub fn empirical_exit_rates(&self) -> Vec<(Value, f64, f64)> {
        fn collect<K: ChainState>(m: &BTreeMap<K, StateStats>) -> Vec<(Value, f64, f64)> {
            m.iter()
                .map(|(k, s)| (k.to_json(), s.time, s.departures as f64 / s.time))
                .collect()
        }
        let mut rows = match &self.occupancy {
            Occupancy::OneSided(m) => collect(m),
            Occupancy::TwoSided(m) => collect(m),
            Occupancy::Counts(_) => Vec::new(),
        };
        rows.sort_by(|a, b| b.1.total_cmp(&a.1));
        rows
    }

    pub fn to_json_value(&self) -> Value {
        json!({
            "system": self.config.system,
            "mode": self.config.mode,
            "seed": self.config.seed,
            "replication": self.replication,
            "horizon": self.config.horizon,
            "warmup_fraction": self.config.warmup_fraction,
            "params": self.params,
            "event_count": self.event_count,
            "elapsed": self.elapsed,
            "measured_time": self.measured_time,
            "events": self.events,
            "measured": self.measured,
            "supply_in_system": self.supply_in_system,
            "demand_in_system": self.demand_in_system,
            "occupancy": self.occupancy.to_json_value(),
        })
    }
}

/// Random stream of replication `r`.
pub fn stream(seed: u64, r: u64) -> Xoshiro256PlusPlus {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    for _ in 0..r {
        rng.jump();
    }
    rng
}

fn exp_sample(rng: &mut impl Rng, rate: f64) -> f64 {
    let u: f64 = rng.gen();
    -(-u).ln_1p() / rate
}

fn bernoulli(rng: &mut impl Rng, p: f64) -> bool {
    rng.gen::<f64>() < p
}

/// Picks the index of the first cumulative weight exceeding `u · total`.
fn pick(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // Rounding can leave u marginally above the last weight.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

trait Engine {
    type Key: Ord + Copy;
    fn key(&self) -> Self::Key;
    /// Time of the next event after `now`.
    fn next_event(&mut self, now: f64, rng: &mut Xoshiro256PlusPlus) -> f64;
    /// Applies the event scheduled by the last `next_event`.
    fn fire(&mut self, rng: &mut Xoshiro256PlusPlus, tally: &mut EventTally);
    fn in_system(&self) -> (usize, usize);
}

struct RunOutput<K> {
    stats: BTreeMap<K, StateStats>,
    events: EventTally,
    measured: EventTally,
    event_count: u64,
    elapsed: f64,
    measured_time: f64,
    in_system: (usize, usize),
}

fn drive<E: Engine>(mut engine: E, cfg: &SimConfig, rng: &mut Xoshiro256PlusPlus) -> RunOutput<E::Key> {
    let mut stats: BTreeMap<E::Key, StateStats> = BTreeMap::new();
    let mut events = EventTally::default();
    let mut measured = EventTally::default();
    let (mut warm, warm_event) = match cfg.horizon {
        Horizon::Time(t) => (Some(cfg.warmup_fraction * t), None),
        Horizon::Events(n) => {
            let w = (cfg.warmup_fraction * n as f64).floor() as u64;
            if w == 0 {
                (Some(0.0), None)
            } else {
                (None, Some(w))
            }
        }
    };
    let mut now = 0.0;
    let mut count = 0u64;
    let accrue = |stats: &mut BTreeMap<E::Key, StateStats>, key, from: f64, to: f64, warm: Option<f64>| {
        if let Some(w) = warm {
            let a = from.max(w);
            if to > a {
                stats.entry(key).or_default().time += to - a;
            }
        }
    };
    loop {
        let key = engine.key();
        let t = engine.next_event(now, rng);
        if let Horizon::Time(end) = cfg.horizon {
            if t > end {
                accrue(&mut stats, key, now, end, warm);
                now = end;
                break;
            }
        }
        accrue(&mut stats, key, now, t, warm);
        now = t;
        let mut delta = EventTally::default();
        engine.fire(rng, &mut delta);
        count += 1;
        events.add(&delta);
        if warm.is_some_and(|w| now >= w) {
            measured.add(&delta);
            if engine.key() != key {
                stats.entry(key).or_default().departures += 1;
            }
        }
        if warm_event == Some(count) {
            warm = Some(now);
        }
        if let Horizon::Events(n) = cfg.horizon {
            if count >= n {
                break;
            }
        }
    }
    let measured_time = now - warm.unwrap_or(now);
    RunOutput {
        stats,
        events,
        measured,
        event_count: count,
        elapsed: now,
        measured_time,
        in_system: engine.in_system(),
    }
}

/// Parsimonious one-sided chain. Every event class fires at its full rate,
/// including demand that finds nothing to do; a type-1 demand scans the
/// unrevealed supplies with independent Bernoulli(γs) trials.
struct OneSidedChain {
    p: NSystemParams,
    s: OneSidedState,
}

impl Engine for OneSidedChain {
    type Key = OneSidedState;

    fn key(&self) -> OneSidedState {
        self.s
    }

    fn next_event(&mut self, now: f64, rng: &mut Xoshiro256PlusPlus) -> f64 {
        let rate = self.p.supply_rate() + self.p.demand_rate() + self.s.total() as f64 * self.p.theta_s;
        now + exp_sample(rng, rate)
    }

    fn fire(&mut self, rng: &mut Xoshiro256PlusPlus, t: &mut EventTally) {
        let p = &self.p;
        let OneSidedState { m, n } = self.s;
        let w = [
            p.supply_rate(),
            p.mu2,
            p.mu1,
            (m + n) as f64 * p.theta_s,
        ];
        match pick(rng, &w) {
            0 => {
                t.supply_arrivals += 1;
                self.s.n += 1;
            }
            1 => {
                t.demand_arrivals += 1;
                if m >= 1 {
                    self.s.m -= 1;
                    t.matches.record(false, false);
                } else if n >= 1 {
                    self.s.n -= 1;
                    t.matches.record(bernoulli(rng, p.gamma_s()), false);
                } else {
                    t.demand_lost += 1;
                }
            }
            2 => {
                t.demand_arrivals += 1;
                match scan(rng, n, p.gamma_s()) {
                    Some(k) => {
                        self.s = OneSidedState::new(m + k, n - k - 1);
                        t.matches.record(true, true);
                    }
                    None => {
                        self.s = OneSidedState::new(m + n, 0);
                        t.demand_lost += 1;
                    }
                }
            }
            _ => {
                t.supply_abandonments += 1;
                if rng.gen_range(0..m + n) < m {
                    self.s.m -= 1;
                } else {
                    self.s.n -= 1;
                }
            }
        }
    }

    fn in_system(&self) -> (usize, usize) {
        (self.s.total(), 0)
    }
}

/// Number of failures before the first success among `n` Bernoulli(p)
/// trials, or `None` if all fail.
fn scan(rng: &mut impl Rng, n: usize, p: f64) -> Option<usize> {
    (0..n).find(|_| bernoulli(rng, p))
}

/// Parsimonious two-sided chain.
struct TwoSidedChain {
    p: NSystemParams,
    s: TwoSidedState,
}

impl TwoSidedChain {
    fn left(m: usize, n: usize) -> TwoSidedState {
        TwoSidedState::left_or_empty(m, n)
    }

    fn right(m: usize, n: usize) -> TwoSidedState {
        TwoSidedState::right_or_empty(m, n)
    }

    fn both(i: usize, j: usize) -> TwoSidedState {
        match (i, j) {
            (0, j) => Self::right(j, 0),
            (i, 0) => Self::left(i, 0),
            (i, j) => TwoSidedState::both(i, j).expect("both positive"),
        }
    }
}

impl Engine for TwoSidedChain {
    type Key = TwoSidedState;

    fn key(&self) -> TwoSidedState {
        self.s
    }

    fn next_event(&mut self, now: f64, rng: &mut Xoshiro256PlusPlus) -> f64 {
        let p = &self.p;
        let reneging = match self.s {
            TwoSidedState::Empty => 0.0,
            TwoSidedState::Left(q) => q.total() as f64 * p.theta_s,
            TwoSidedState::Right(q) => q.total() as f64 * p.theta_d,
            TwoSidedState::Both(c) => c.supply() as f64 * p.theta_s + c.demand() as f64 * p.theta_d,
        };
        now + exp_sample(rng, p.supply_rate() + p.demand_rate() + reneging)
    }

    fn fire(&mut self, rng: &mut Xoshiro256PlusPlus, t: &mut EventTally) {
        let p = self.p;
        match self.s {
            TwoSidedState::Empty => {
                if pick(rng, &[p.supply_rate(), p.demand_rate()]) == 0 {
                    t.supply_arrivals += 1;
                    self.s = Self::left(0, 1);
                } else {
                    t.demand_arrivals += 1;
                    self.s = Self::right(0, 1);
                }
            }
            TwoSidedState::Left(q) => {
                let (m, n) = (q.known(), q.unknown());
                let w = [p.supply_rate(), p.mu2, p.mu1, (m + n) as f64 * p.theta_s];
                match pick(rng, &w) {
                    0 => {
                        t.supply_arrivals += 1;
                        self.s = Self::left(m, n + 1);
                    }
                    1 => {
                        t.demand_arrivals += 1;
                        if m >= 1 {
                            t.matches.record(false, false);
                            self.s = Self::left(m - 1, n);
                        } else {
                            t.matches.record(bernoulli(rng, p.gamma_s()), false);
                            self.s = Self::left(0, n - 1);
                        }
                    }
                    2 => {
                        t.demand_arrivals += 1;
                        match scan(rng, n, p.gamma_s()) {
                            Some(k) => {
                                t.matches.record(true, true);
                                self.s = Self::left(m + k, n - k - 1);
                            }
                            None => self.s = Self::both(m + n, 1),
                        }
                    }
                    _ => {
                        t.supply_abandonments += 1;
                        self.s = if rng.gen_range(0..m + n) < m {
                            Self::left(m - 1, n)
                        } else {
                            Self::left(m, n - 1)
                        };
                    }
                }
            }
            TwoSidedState::Right(q) => {
                let (m, n) = (q.known(), q.unknown());
                let w = [p.demand_rate(), p.lambda1, p.lambda2, (m + n) as f64 * p.theta_d];
                match pick(rng, &w) {
                    0 => {
                        t.demand_arrivals += 1;
                        self.s = Self::right(m, n + 1);
                    }
                    1 => {
                        t.supply_arrivals += 1;
                        if m >= 1 {
                            t.matches.record(true, true);
                            self.s = Self::right(m - 1, n);
                        } else {
                            t.matches.record(true, !bernoulli(rng, p.gamma_d()));
                            self.s = Self::right(0, n - 1);
                        }
                    }
                    2 => {
                        t.supply_arrivals += 1;
                        match scan(rng, n, p.gamma_d()) {
                            Some(k) => {
                                t.matches.record(false, false);
                                self.s = Self::right(m + k, n - k - 1);
                            }
                            None => self.s = Self::both(1, m + n),
                        }
                    }
                    _ => {
                        t.demand_abandonments += 1;
                        self.s = if rng.gen_range(0..m + n) < m {
                            Self::right(m - 1, n)
                        } else {
                            Self::right(m, n - 1)
                        };
                    }
                }
            }
            TwoSidedState::Both(c) => {
                let (i, j) = (c.supply(), c.demand());
                let w = [
                    p.lambda2,
                    p.mu1,
                    p.mu2,
                    p.lambda1,
                    i as f64 * p.theta_s,
                    j as f64 * p.theta_d,
                ];
                self.s = match pick(rng, &w) {
                    0 => {
                        t.supply_arrivals += 1;
                        Self::both(i + 1, j)
                    }
                    1 => {
                        t.demand_arrivals += 1;
                        Self::both(i, j + 1)
                    }
                    2 => {
                        t.demand_arrivals += 1;
                        t.matches.record(false, false);
                        Self::both(i - 1, j)
                    }
                    3 => {
                        t.supply_arrivals += 1;
                        t.matches.record(true, true);
                        Self::both(i, j - 1)
                    }
                    4 => {
                        t.supply_abandonments += 1;
                        Self::both(i - 1, j)
                    }
                    _ => {
                        t.demand_abandonments += 1;
                        Self::both(i, j - 1)
                    }
                };
            }
        }
    }

    fn in_system(&self) -> (usize, usize) {
        (self.s.supply_count(), self.s.demand_count())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Queue {
    Flexible,
    Inflexible,
    Type1,
    Type2,
}

#[derive(Debug, Clone, Copy)]
enum Pending {
    Arrival,
    Deadline,
}

/// Physical system: typed agents in FCFS queues, each with an exponential
/// patience deadline drawn on arrival.
struct Physical {
    p: NSystemParams,
    two_sided: bool,
    seq: u64,
    now: f64,
    /// Per queue: arrival sequence number → deadline.
    queues: BTreeMap<Queue, BTreeMap<u64, f64>>,
    deadlines: BTreeMap<(u64, u64), Queue>,
    pending: Pending,
}

impl Physical {
    fn new(p: NSystemParams, two_sided: bool) -> Self {
        let queues = [Queue::Flexible, Queue::Inflexible, Queue::Type1, Queue::Type2]
            .into_iter()
            .map(|q| (q, BTreeMap::new()))
            .collect();
        Self {
            p,
            two_sided,
            seq: 0,
            now: 0.0,
            queues,
            deadlines: BTreeMap::new(),
            pending: Pending::Arrival,
        }
    }

    fn len(&self, q: Queue) -> usize {
        self.queues[&q].len()
    }

    fn oldest(&self, q: Queue) -> Option<u64> {
        self.queues[&q].keys().next().copied()
    }

    fn take(&mut self, q: Queue, seq: u64) {
        let deadline = self.queues.get_mut(&q).and_then(|m| m.remove(&seq)).expect("queued agent");
        if deadline.is_finite() {
            self.deadlines.remove(&(deadline.to_bits(), seq));
        }
    }

    fn take_oldest_of(&mut self, candidates: &[Queue]) -> Option<Queue> {
        let (q, seq) = candidates
            .iter()
            .filter_map(|q| self.oldest(*q).map(|s| (*q, s)))
            .min_by_key(|(_, s)| *s)?;
        self.take(q, seq);
        Some(q)
    }

    fn enqueue(&mut self, q: Queue, rng: &mut Xoshiro256PlusPlus) {
        let theta = match q {
            Queue::Flexible | Queue::Inflexible => self.p.theta_s,
            Queue::Type1 | Queue::Type2 => self.p.theta_d,
        };
        let deadline = if theta > 0.0 {
            self.now + exp_sample(rng, theta)
        } else {
            f64::INFINITY
        };
        self.seq += 1;
        self.queues.get_mut(&q).expect("queue exists").insert(self.seq, deadline);
        if deadline.is_finite() {
            self.deadlines.insert((deadline.to_bits(), self.seq), q);
        }
    }

    fn check_invariants(&self) {
        let flex = self.len(Queue::Flexible);
        let inflex = self.len(Queue::Inflexible);
        let d1 = self.len(Queue::Type1);
        let d2 = self.len(Queue::Type2);
        assert!(
            !(flex > 0 && d1 + d2 > 0) && !(inflex > 0 && d2 > 0),
            "compatible pair left waiting"
        );
        if flex + inflex > 0 && d1 + d2 > 0 {
            assert!(flex == 0 && d2 == 0, "both sides waiting with a matchable agent");
        }
    }
}

impl Engine for Physical {
    type Key = Counts;

    fn key(&self) -> Counts {
        let (supply, demand) = self.in_system();
        Counts { supply, demand }
    }

    fn next_event(&mut self, now: f64, rng: &mut Xoshiro256PlusPlus) -> f64 {
        // Resampling the arrival clock after every event is exact by
        // memorylessness.
        let arrival = now + exp_sample(rng, self.p.supply_rate() + self.p.demand_rate());
        let deadline = self
            .deadlines
            .keys()
            .next()
            .map(|(bits, _)| f64::from_bits(*bits));
        let t = match deadline {
            Some(d) if d <= arrival => {
                self.pending = Pending::Deadline;
                d
            }
            _ => {
                self.pending = Pending::Arrival;
                arrival
            }
        };
        self.now = t;
        t
    }

    fn fire(&mut self, rng: &mut Xoshiro256PlusPlus, t: &mut EventTally) {
        let p = self.p;
        match self.pending {
            Pending::Deadline => {
                let ((_, seq), q) = self.deadlines.pop_first().expect("scheduled deadline");
                self.queues.get_mut(&q).expect("queue exists").remove(&seq);
                match q {
                    Queue::Flexible | Queue::Inflexible => t.supply_abandonments += 1,
                    Queue::Type1 | Queue::Type2 => t.demand_abandonments += 1,
                }
            }
            Pending::Arrival => {
                let w = [p.lambda1, p.lambda2, p.mu1, p.mu2];
                match pick(rng, &w) {
                    0 => {
                        t.supply_arrivals += 1;
                        match self.take_oldest_of(&[Queue::Type1, Queue::Type2]) {
                            Some(q) => t.matches.record(true, q == Queue::Type1),
                            None => self.enqueue(Queue::Flexible, rng),
                        }
                    }
                    1 => {
                        t.supply_arrivals += 1;
                        match self.take_oldest_of(&[Queue::Type2]) {
                            Some(_) => t.matches.record(false, false),
                            None => self.enqueue(Queue::Inflexible, rng),
                        }
                    }
                    2 => {
                        t.demand_arrivals += 1;
                        match self.take_oldest_of(&[Queue::Flexible]) {
                            Some(_) => t.matches.record(true, true),
                            None if self.two_sided => self.enqueue(Queue::Type1, rng),
                            None => t.demand_lost += 1,
                        }
                    }
                    _ => {
                        t.demand_arrivals += 1;
                        match self.take_oldest_of(&[Queue::Flexible, Queue::Inflexible]) {
                            Some(q) => t.matches.record(q == Queue::Flexible, false),
                            None if self.two_sided => self.enqueue(Queue::Type2, rng),
                            None => t.demand_lost += 1,
                        }
                    }
                }
            }
        }
        self.check_invariants();
    }

    fn in_system(&self) -> (usize, usize) {
        (
            self.len(Queue::Flexible) + self.len(Queue::Inflexible),
            self.len(Queue::Type1) + self.len(Queue::Type2),
        )
    }
}

fn summarize<K>(
    params: &NSystemParams,
    cfg: &SimConfig,
    replication: u64,
    out: RunOutput<K>,
    wrap: impl FnOnce(BTreeMap<K, StateStats>) -> Occupancy,
) -> SimulationSummary {
    SimulationSummary {
        params: *params,
        config: *cfg,
        replication,
        occupancy: wrap(out.stats),
        events: out.events,
        measured: out.measured,
        supply_in_system: out.in_system.0,
        demand_in_system: out.in_system.1,
        event_count: out.event_count,
        elapsed: out.elapsed,
        measured_time: out.measured_time,
    }
}

fn run_one(
    params: &NSystemParams,
    cfg: &SimConfig,
    replication: u64,
) -> SimulationSummary {
    let mut rng = stream(cfg.seed, replication);
    let p = *params;
    match (cfg.mode, cfg.system) {
        (SimMode::Parsimonious, SystemKind::OneSided) => {
            let out = drive(OneSidedChain { p, s: OneSidedState::EMPTY }, cfg, &mut rng);
            summarize(params, cfg, replication, out, Occupancy::OneSided)
        }
        (SimMode::Parsimonious, SystemKind::TwoSided) => {
            let out = drive(TwoSidedChain { p, s: TwoSidedState::Empty }, cfg, &mut rng);
            summarize(params, cfg, replication, out, Occupancy::TwoSided)
        }
        (SimMode::Physical, system) => {
            let engine = Physical::new(p, system == SystemKind::TwoSided);
            let out = drive(engine, cfg, &mut rng);
            summarize(params, cfg, replication, out, Occupancy::Counts)
        }
    }
}

/// Simulates the parsimonious chain of `cfg.system`.
pub fn simulate_parsimonious(
    params: &NSystemParams,
    cfg: &SimConfig,
) -> Result<SimulationSummary, SimError> {
    let cfg = SimConfig {
        mode: SimMode::Parsimonious,
        ..*cfg
    };
    cfg.validate(params)?;
    Ok(run_one(params, &cfg, 0))
}

/// Simulates the physical system of `cfg.system`.
pub fn simulate_physical(
    params: &NSystemParams,
    cfg: &SimConfig,
) -> Result<SimulationSummary, SimError> {
    let cfg = SimConfig {
        mode: SimMode::Physical,
        ..*cfg
    };
    cfg.validate(params)?;
    Ok(run_one(params, &cfg, 0))
}

pub fn simulate(params: &NSystemParams, cfg: &SimConfig) -> Result<SimulationSummary, SimError> {
    cfg.validate(params)?;
    Ok(run_one(params, cfg, 0))
}

/// Independent replications on separate streams of the same seed, run in
/// parallel. Replication 0 is identical to [`simulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Replications {
    pub runs: Vec<SimulationSummary>,
}

impl Replications {
    /// Mean and standard error across replications.
    pub fn mean_se(&self, f: impl Fn(&SimulationSummary) -> f64) -> (f64, f64) {
        let xs: Vec<f64> = self.runs.iter().map(f).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return (mean, f64::NAN);
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    /// Average count-pair occupancy across replications.
    pub fn pooled_count_fractions(&self) -> BTreeMap<Counts, f64> {
        let mut out = BTreeMap::new();
        let n = self.runs.len() as f64;
        for r in &self.runs {
            for (k, v) in r.occupancy.count_fractions() {
                *out.entry(k).or_insert(0.0) += v / n;
            }
        }
        out
    }
}

pub fn replicate(
    params: &NSystemParams,
    cfg: &SimConfig,
    replications: u64,
) -> Result<Replications, SimError> {
    if replications == 0 {
        return Err(SimError::NoReplications);
    }
    cfg.validate(params)?;
    let runs = (0..replications)
        .into_par_iter()
        .map(|r| run_one(params, cfg, r))
        .collect();
    Ok(Replications { runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::product_form::{normalize_one_sided, normalize_two_sided};

    fn reference() -> NSystemParams {
        NSystemParams::new(1.0, 1.0, 2.0, 2.0, 1.0, 1.0).unwrap()
    }

    fn cfg(system: SystemKind, mode: SimMode, events: u64, seed: u64) -> SimConfig {
        SimConfig::new(system, mode, Horizon::Events(events), seed)
    }

    #[test]
    fn config_validation() {
        let p = reference();
        let mut c = cfg(SystemKind::OneSided, SimMode::Parsimonious, 0, 1);
        assert_eq!(c.validate(&p), Err(SimError::BadHorizon));
        c.horizon = Horizon::Time(-1.0);
        assert_eq!(c.validate(&p), Err(SimError::BadHorizon));
        c.horizon = Horizon::Events(10);
        c.warmup_fraction = 1.0;
        assert_eq!(c.validate(&p), Err(SimError::BadWarmup(1.0)));
        let c = cfg(SystemKind::TwoSided, SimMode::Physical, 10, 1);
        let no_demand_reneging = NSystemParams::new(1.0, 1.0, 2.0, 2.0, 1.0, 0.0).unwrap();
        assert_eq!(c.validate(&no_demand_reneging), Err(SimError::TwoSidedNeedsReneging));
        assert_eq!(replicate(&p, &c, 0), Err(SimError::NoReplications));
    }

    #[test]
    fn same_seed_same_run() {
        let p = reference();
        for system in [SystemKind::OneSided, SystemKind::TwoSided] {
            for mode in [SimMode::Parsimonious, SimMode::Physical] {
                let c = cfg(system, mode, 20_000, 7);
                let a = simulate(&p, &c).unwrap();
                let b = simulate(&p, &c).unwrap();
                assert_eq!(a, b);
                let other = simulate(&p, &SimConfig { seed: 8, ..c }).unwrap();
                assert_ne!(a, other);
            }
        }
    }

    #[test]
    fn flows_conserve() {
        let p = NSystemParams::new(2.0, 0.5, 1.0, 3.0, 0.3, 0.5).unwrap();
        for system in [SystemKind::OneSided, SystemKind::TwoSided] {
            for mode in [SimMode::Parsimonious, SimMode::Physical] {
                let s = simulate(&p, &cfg(system, mode, 50_000, 3)).unwrap();
                assert!(s.supply_flow_balanced(), "{system} {mode}");
                assert!(s.demand_flow_balanced(), "{system} {mode}");
                let total: f64 = s.occupancy.count_fractions().values().sum();
                assert!((total - 1.0).abs() < 1e-9);
                assert_eq!(s.event_count, 50_000);
            }
        }
    }

    #[test]
    fn one_sided_modes_never_queue_demand() {
        let s = simulate(&reference(), &cfg(SystemKind::OneSided, SimMode::Physical, 20_000, 1)).unwrap();
        assert!(s.occupancy.count_fractions().keys().all(|c| c.demand == 0));
        assert_eq!(s.events.demand_abandonments, 0);
        assert_eq!(s.events.matches.flexible_type1 + s.events.matches.flexible_type2 + s.events.matches.inflexible_type2, s.events.matches.total());
    }

    #[test]
    fn time_horizon_and_warmup() {
        let mut c = cfg(SystemKind::OneSided, SimMode::Parsimonious, 1, 5);
        c.horizon = Horizon::Time(1000.0);
        let s = simulate(&reference(), &c).unwrap();
        assert_eq!(s.elapsed, 1000.0);
        assert!((s.measured_time - 800.0).abs() < 1e-9);
        let total_time: f64 = match &s.occupancy {
            Occupancy::OneSided(m) => m.values().map(|x| x.time).sum(),
            _ => unreachable!(),
        };
        assert!((total_time - 800.0).abs() < 1e-6);
    }

    #[test]
    fn replications_use_distinct_streams() {
        let c = cfg(SystemKind::OneSided, SimMode::Parsimonious, 10_000, 11);
        let reps = replicate(&reference(), &c, 3).unwrap();
        assert_eq!(reps.runs[0], simulate(&reference(), &c).unwrap());
        assert_ne!(reps.runs[0].events, reps.runs[1].events);
        let (mean, se) = reps.mean_se(|s| s.occupancy.empty_fraction());
        assert!(mean > 0.0 && se > 0.0);
    }

    #[test]
    fn short_runs_land_near_the_product_form() {
        let p = reference();
        let pf = normalize_one_sided(&p, 1e-10).unwrap().into();
        let s = simulate(&p, &cfg(SystemKind::OneSided, SimMode::Parsimonious, 400_000, 2)).unwrap();
        assert!(s.occupancy.total_variation(&pf) < 0.03);
        let s = simulate(&p, &cfg(SystemKind::OneSided, SimMode::Physical, 400_000, 2)).unwrap();
        assert!(s.occupancy.total_variation(&pf) < 0.03);
        let pf2 = normalize_two_sided(&p, 1e-10).unwrap().into();
        let s = simulate(&p, &cfg(SystemKind::TwoSided, SimMode::Physical, 400_000, 2)).unwrap();
        assert!(s.occupancy.total_variation(&pf2) < 0.03);
    }

    #[test]
    fn scan_is_geometric() {
        let mut rng = stream(9, 0);
        let n = 200_000;
        let hits = (0..n).filter(|_| scan(&mut rng, 3, 0.5) == Some(0)).count();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.005);
    }
}
