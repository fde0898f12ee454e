//! Parameters and state types of the N-system matching queue.
//!
//! Supply comes in two types: flexible (type 1, serves both demand types) and
//! inflexible (type 2, serves type-2 demand only). Demand of type 1 can only be
//! served by flexible supply; type-2 demand takes any supply.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("{0} must be non-negative")]
    Negative(&'static str),
    #[error("{0} must be finite")]
    NotFinite(&'static str),
    #[error("missing parameter {0}")]
    Missing(&'static str),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
}

/// Arrival and reneging rates of the N-system.
///
/// `lambda*` are supply arrival rates (1 = flexible, 2 = inflexible), `mu*` are
/// demand arrival rates (1 = served by flexible supply only, 2 = served by
/// either), `theta_s` / `theta_d` are per-agent abandonment rates of waiting
/// supply and demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NSystemParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub theta_s: f64,
    pub theta_d: f64,
}

impl NSystemParams {
    /// Builds and validates a parameter set.
    pub fn new(
        lambda1: f64,
        lambda2: f64,
        mu1: f64,
        mu2: f64,
        theta_s: f64,
        theta_d: f64,
    ) -> Result<Self, ModelError> {
        validate(Self {
            lambda1,
            lambda2,
            mu1,
            mu2,
            theta_s,
            theta_d,
        })
    }

    /// Probability that an arriving supply unit is flexible.
    pub fn gamma_s(&self) -> f64 {
        self.lambda1 / (self.lambda1 + self.lambda2)
    }

    /// Probability that an arriving demand unit is of type 2.
    pub fn gamma_d(&self) -> f64 {
        self.mu2 / (self.mu1 + self.mu2)
    }

    pub fn supply_rate(&self) -> f64 {
        self.lambda1 + self.lambda2
    }

    pub fn demand_rate(&self) -> f64 {
        self.mu1 + self.mu2
    }

    /// Same parameters with a different supply reneging rate.
    pub fn with_theta_s(self, theta_s: f64) -> Self {
        Self { theta_s, ..self }
    }

    /// The mirror-image system in which demand plays the role of supply.
    ///
    /// Type-2 demand (served by anything) maps onto flexible supply and type-1
    /// demand onto inflexible supply, so the right-hand queue of a two-sided
    /// system behaves like the left-hand queue of its mirror.
    pub fn mirrored(&self) -> Self {
        Self {
            lambda1: self.mu2,
            lambda2: self.mu1,
            mu1: self.lambda2,
            mu2: self.lambda1,
            theta_s: self.theta_d,
            theta_d: self.theta_s,
        }
    }

    pub(crate) fn fields(&self) -> [(&'static str, f64); 6] {
        [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("mu1", self.mu1),
            ("mu2", self.mu2),
            ("theta_s", self.theta_s),
            ("theta_d", self.theta_d),
        ]
    }
}

/// Checks every rate invariant and hands the parameters back unchanged.
pub fn validate(params: NSystemParams) -> Result<NSystemParams, ModelError> {
    for (i, (name, value)) in params.fields().into_iter().enumerate() {
        if !value.is_finite() {
            return Err(ModelError::NotFinite(name));
        }
        if i < 4 && value <= 0.0 {
            return Err(ModelError::NotPositive(name));
        }
        if value < 0.0 {
            return Err(ModelError::Negative(name));
        }
    }
    Ok(params)
}

/// Ergodicity conditions of the system without reneging:
/// `lambda1 + lambda2 < mu1 + mu2` and `lambda2 < mu2`.
///
/// Reported regardless of `theta_s`; any positive reneging rate stabilizes the
/// chain on its own.
pub fn stability_check(params: &NSystemParams) -> bool {
    params.supply_rate() < params.demand_rate() && params.lambda2 < params.mu2
}

/// Parameter values collected from a config file or command-line flags, any of
/// which may be absent.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PartialParams {
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub mu1: Option<f64>,
    pub mu2: Option<f64>,
    pub theta_s: Option<f64>,
    pub theta_d: Option<f64>,
}

impl PartialParams {
    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn from_config_str(text: &str) -> Result<Self, ModelError> {
        let mut out = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ModelError::Config {
                line,
                message: format!("expected key=value, got {content:?}"),
            })?;
            let key = key.trim();
            let value: f64 = value.trim().parse().map_err(|_| ModelError::Config {
                line,
                message: format!("{key}: cannot parse {:?} as a number", value.trim()),
            })?;
            let slot = match key {
                "lambda1" => &mut out.lambda1,
                "lambda2" => &mut out.lambda2,
                "mu1" => &mut out.mu1,
                "mu2" => &mut out.mu2,
                "theta_s" => &mut out.theta_s,
                "theta_d" => &mut out.theta_d,
                other => {
                    return Err(ModelError::Config {
                        line,
                        message: format!("unknown key {other:?}"),
                    })
                }
            };
            *slot = Some(value);
        }
        Ok(out)
    }

    /// Fields set in `self` win over those in `base`.
    pub fn over(self, base: PartialParams) -> PartialParams {
        PartialParams {
            lambda1: self.lambda1.or(base.lambda1),
            lambda2: self.lambda2.or(base.lambda2),
            mu1: self.mu1.or(base.mu1),
            mu2: self.mu2.or(base.mu2),
            theta_s: self.theta_s.or(base.theta_s),
            theta_d: self.theta_d.or(base.theta_d),
        }
    }

    /// Arrival rates are required; reneging rates default to zero.
    pub fn resolve(self) -> Result<NSystemParams, ModelError> {
        validate(NSystemParams {
            lambda1: self.lambda1.ok_or(ModelError::Missing("lambda1"))?,
            lambda2: self.lambda2.ok_or(ModelError::Missing("lambda2"))?,
            mu1: self.mu1.ok_or(ModelError::Missing("mu1"))?,
            mu2: self.mu2.ok_or(ModelError::Missing("mu2"))?,
            theta_s: self.theta_s.unwrap_or(0.0),
            theta_d: self.theta_d.unwrap_or(0.0),
        })
    }
}

impl From<NSystemParams> for PartialParams {
    fn from(p: NSystemParams) -> Self {
        PartialParams {
            lambda1: Some(p.lambda1),
            lambda2: Some(p.lambda2),
            mu1: Some(p.mu1),
            mu2: Some(p.mu2),
            theta_s: Some(p.theta_s),
            theta_d: Some(p.theta_d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    OneSided,
    TwoSided,
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SystemKind::OneSided => "one-sided",
            SystemKind::TwoSided => "two-sided",
        })
    }
}

impl FromStr for SystemKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "one-sided" => Ok(SystemKind::OneSided),
            "two-sided" => Ok(SystemKind::TwoSided),
            other => Err(format!("unknown system {other:?}")),
        }
    }
}

/// One-sided state: `m` revealed inflexible supplies at the head of the queue
/// followed by `n` supplies whose type has not been inspected yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OneSidedState {
    pub m: usize,
    pub n: usize,
}

impl OneSidedState {
    pub const EMPTY: OneSidedState = OneSidedState { m: 0, n: 0 };

    pub fn new(m: usize, n: usize) -> Self {
        Self { m, n }
    }

    pub fn total(&self) -> usize {
        self.m + self.n
    }
}

/// A non-empty queue on one side, in the same known/unknown split as
/// [`OneSidedState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SideQueue {
    known: usize,
    unknown: usize,
}

impl SideQueue {
    pub fn new(known: usize, unknown: usize) -> Result<Self, ModelError> {
        if known + unknown == 0 {
            return Err(ModelError::InvalidState(
                "a side queue must hold at least one agent".into(),
            ));
        }
        Ok(Self { known, unknown })
    }

    pub fn known(&self) -> usize {
        self.known
    }

    pub fn unknown(&self) -> usize {
        self.unknown
    }

    pub fn total(&self) -> usize {
        self.known + self.unknown
    }
}

/// Inflexible supply waiting on the left while type-1 demand waits on the right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CrossQueue {
    supply: usize,
    demand: usize,
}

impl CrossQueue {
    pub fn new(supply: usize, demand: usize) -> Result<Self, ModelError> {
        if supply == 0 || demand == 0 {
            return Err(ModelError::InvalidState(
                "both queues must be non-empty".into(),
            ));
        }
        Ok(Self { supply, demand })
    }

    pub fn supply(&self) -> usize {
        self.supply
    }

    pub fn demand(&self) -> usize {
        self.demand
    }
}

/// State of the two-sided system, partitioned by which side holds agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TwoSidedState {
    Empty,
    /// Supply waiting, no demand.
    Left(SideQueue),
    /// Demand waiting, no supply. `known` counts revealed type-1 demand.
    Right(SideQueue),
    Both(CrossQueue),
}

impl TwoSidedState {
    pub fn left(m: usize, n: usize) -> Result<Self, ModelError> {
        SideQueue::new(m, n).map(TwoSidedState::Left)
    }

    pub fn right(m: usize, n: usize) -> Result<Self, ModelError> {
        SideQueue::new(m, n).map(TwoSidedState::Right)
    }

    pub fn both(i: usize, j: usize) -> Result<Self, ModelError> {
        CrossQueue::new(i, j).map(TwoSidedState::Both)
    }

    /// Left queue, or `Empty` when `m + n == 0`.
    pub(crate) fn left_or_empty(m: usize, n: usize) -> Self {
        SideQueue::new(m, n).map_or(TwoSidedState::Empty, TwoSidedState::Left)
    }

    pub(crate) fn right_or_empty(m: usize, n: usize) -> Self {
        SideQueue::new(m, n).map_or(TwoSidedState::Empty, TwoSidedState::Right)
    }

    pub fn supply_count(&self) -> usize {
        match self {
            TwoSidedState::Empty | TwoSidedState::Right(_) => 0,
            TwoSidedState::Left(q) => q.total(),
            TwoSidedState::Both(c) => c.supply(),
        }
    }

    pub fn demand_count(&self) -> usize {
        match self {
            TwoSidedState::Empty | TwoSidedState::Left(_) => 0,
            TwoSidedState::Right(q) => q.total(),
            TwoSidedState::Both(c) => c.demand(),
        }
    }
}

/// Behaviour shared by the one- and two-sided state spaces.
pub trait ChainState: Copy + Ord + fmt::Debug + Send + Sync {
    const SYSTEM: SystemKind;

    fn empty() -> Self;

    /// Coordinate such that every transition of the chain changes it by at most
    /// one. Used to order states for banded elimination.
    fn level(&self) -> i64;

    fn supply_count(&self) -> usize;

    fn demand_count(&self) -> usize;

    /// JSON array form, e.g. `[m, n]` or `["left", m, n]`.
    fn to_json(&self) -> serde_json::Value;

    /// Columns used in CSV output.
    fn csv_header() -> &'static str;

    fn csv_fields(&self) -> String;
}

impl ChainState for OneSidedState {
    const SYSTEM: SystemKind = SystemKind::OneSided;

    fn empty() -> Self {
        OneSidedState::EMPTY
    }

    fn level(&self) -> i64 {
        self.total() as i64
    }

    fn supply_count(&self) -> usize {
        self.total()
    }

    fn demand_count(&self) -> usize {
        0
    }

    fn to_json(&self) -> serde_json::Value {
        serde_json::json!([self.m, self.n])
    }

    fn csv_header() -> &'static str {
        "m,n"
    }

    fn csv_fields(&self) -> String {
        format!("{},{}", self.m, self.n)
    }
}

impl ChainState for TwoSidedState {
    const SYSTEM: SystemKind = SystemKind::TwoSided;

    fn empty() -> Self {
        TwoSidedState::Empty
    }

    fn level(&self) -> i64 {
        match self {
            TwoSidedState::Empty => 0,
            TwoSidedState::Left(q) => q.total() as i64,
            TwoSidedState::Right(q) => -(q.total() as i64),
            TwoSidedState::Both(c) => c.supply() as i64 - c.demand() as i64,
        }
    }

    fn supply_count(&self) -> usize {
        TwoSidedState::supply_count(self)
    }

    fn demand_count(&self) -> usize {
        TwoSidedState::demand_count(self)
    }

    fn to_json(&self) -> serde_json::Value {
        match self {
            TwoSidedState::Empty => serde_json::json!(["empty"]),
            TwoSidedState::Left(q) => serde_json::json!(["left", q.known(), q.unknown()]),
            TwoSidedState::Right(q) => serde_json::json!(["right", q.known(), q.unknown()]),
            TwoSidedState::Both(c) => serde_json::json!(["both", c.supply(), c.demand()]),
        }
    }

    fn csv_header() -> &'static str {
        "regime,a,b"
    }

    fn csv_fields(&self) -> String {
        match self {
            TwoSidedState::Empty => "empty,0,0".to_string(),
            TwoSidedState::Left(q) => format!("left,{},{}", q.known(), q.unknown()),
            TwoSidedState::Right(q) => format!("right,{},{}", q.known(), q.unknown()),
            TwoSidedState::Both(c) => format!("both,{},{}", c.supply(), c.demand()),
        }
    }
}

/// Box bounds of a truncated state space. `max_i` / `max_j` bound the
/// both-queues regime and are only set for the two-sided system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub max_m: usize,
    pub max_n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_i: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_j: Option<usize>,
}

impl Truncation {
    pub fn one_sided(max_m: usize, max_n: usize) -> Self {
        Self {
            max_m,
            max_n,
            max_i: None,
            max_j: None,
        }
    }

    pub fn two_sided(max_m: usize, max_n: usize, max_i: usize, max_j: usize) -> Self {
        Self {
            max_m,
            max_n,
            max_i: Some(max_i),
            max_j: Some(max_j),
        }
    }

    /// The same bound on every coordinate.
    pub fn uniform(system: SystemKind, bound: usize) -> Self {
        match system {
            SystemKind::OneSided => Self::one_sided(bound, bound),
            SystemKind::TwoSided => Self::two_sided(bound, bound, bound, bound),
        }
    }
}

/// Probabilities over a truncated state space.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution<S> {
    pub params: NSystemParams,
    pub truncation: Truncation,
    /// Probability of the empty state.
    pub normalizer: f64,
    /// Upper bound on the probability mass outside the truncation box.
    pub tail_mass_bound: f64,
    /// Tolerance the distribution was computed to.
    pub tolerance: f64,
    probabilities: BTreeMap<S, f64>,
}

impl<S: ChainState> StationaryDistribution<S> {
    pub fn new(
        params: NSystemParams,
        truncation: Truncation,
        tail_mass_bound: f64,
        tolerance: f64,
        probabilities: BTreeMap<S, f64>,
    ) -> Self {
        let normalizer = probabilities.get(&S::empty()).copied().unwrap_or(0.0);
        Self {
            params,
            truncation,
            normalizer,
            tail_mass_bound,
            tolerance,
            probabilities,
        }
    }

    pub fn system(&self) -> SystemKind {
        S::SYSTEM
    }

    /// Probability of `state`; zero outside the truncation.
    pub fn get(&self, state: &S) -> f64 {
        self.probabilities.get(state).copied().unwrap_or(0.0)
    }

    pub fn contains(&self, state: &S) -> bool {
        self.probabilities.contains_key(state)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&S, f64)> + '_ {
        self.probabilities.iter().map(|(s, p)| (s, *p))
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.probabilities.values().sum()
    }

    /// Overwrites one probability without renormalizing. Meant for
    /// sensitivity checks of the balance residuals.
    pub fn set(&mut self, state: S, p: f64) {
        if state == S::empty() {
            self.normalizer = p;
        }
        self.probabilities.insert(state, p);
    }

    /// Distribution of an aggregate, e.g. the total supply count.
    pub fn lump<K: Ord>(&self, key: impl Fn(&S) -> K) -> BTreeMap<K, f64> {
        let mut out = BTreeMap::new();
        for (s, p) in self.iter() {
            *out.entry(key(s)).or_insert(0.0) += p;
        }
        out
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let states: Vec<serde_json::Value> = self
            .iter()
            .map(|(s, p)| serde_json::json!({ "state": s.to_json(), "p": p }))
            .collect();
        serde_json::json!({
            "system": S::SYSTEM,
            "params": self.params,
            "truncation": self.truncation,
            "normalizer": self.normalizer,
            "tail_mass_bound": self.tail_mass_bound,
            "tolerance": self.tolerance,
            "states": states,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},p\n", S::csv_header());
        for (s, p) in self.iter() {
            out.push_str(&format!("{},{}\n", s.csv_fields(), crate::io::fmt_f64(p)));
        }
        out
    }
}

/// A stationary distribution of either system.
#[derive(Debug, Clone, PartialEq)]
pub enum SystemDistribution {
    OneSided(StationaryDistribution<OneSidedState>),
    TwoSided(StationaryDistribution<TwoSidedState>),
}

impl SystemDistribution {
    pub fn system(&self) -> SystemKind {
        match self {
            SystemDistribution::OneSided(_) => SystemKind::OneSided,
            SystemDistribution::TwoSided(_) => SystemKind::TwoSided,
        }
    }

    pub fn params(&self) -> &NSystemParams {
        match self {
            SystemDistribution::OneSided(d) => &d.params,
            SystemDistribution::TwoSided(d) => &d.params,
        }
    }

    pub fn truncation(&self) -> Truncation {
        match self {
            SystemDistribution::OneSided(d) => d.truncation,
            SystemDistribution::TwoSided(d) => d.truncation,
        }
    }

    pub fn normalizer(&self) -> f64 {
        match self {
            SystemDistribution::OneSided(d) => d.normalizer,
            SystemDistribution::TwoSided(d) => d.normalizer,
        }
    }

    pub fn tail_mass_bound(&self) -> f64 {
        match self {
            SystemDistribution::OneSided(d) => d.tail_mass_bound,
            SystemDistribution::TwoSided(d) => d.tail_mass_bound,
        }
    }

    pub fn tolerance(&self) -> f64 {
        match self {
            SystemDistribution::OneSided(d) => d.tolerance,
            SystemDistribution::TwoSided(d) => d.tolerance,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SystemDistribution::OneSided(d) => d.len(),
            SystemDistribution::TwoSided(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Distribution of the total number of waiting supply units.
    pub fn supply_count_distribution(&self) -> BTreeMap<usize, f64> {
        match self {
            SystemDistribution::OneSided(d) => d.lump(|s| s.supply_count()),
            SystemDistribution::TwoSided(d) => d.lump(|s| s.supply_count()),
        }
    }

    /// Total variation to `other`; `None` when the systems differ.
    pub fn total_variation(&self, other: &SystemDistribution) -> Option<f64> {
        match (self, other) {
            (SystemDistribution::OneSided(a), SystemDistribution::OneSided(b)) => {
                Some(total_variation(a, b))
            }
            (SystemDistribution::TwoSided(a), SystemDistribution::TwoSided(b)) => {
                Some(total_variation(a, b))
            }
            _ => None,
        }
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        match self {
            SystemDistribution::OneSided(d) => d.to_json_value(),
            SystemDistribution::TwoSided(d) => d.to_json_value(),
        }
    }

    pub fn to_csv(&self) -> String {
        match self {
            SystemDistribution::OneSided(d) => d.to_csv(),
            SystemDistribution::TwoSided(d) => d.to_csv(),
        }
    }
}

impl From<StationaryDistribution<OneSidedState>> for SystemDistribution {
    fn from(d: StationaryDistribution<OneSidedState>) -> Self {
        SystemDistribution::OneSided(d)
    }
}

impl From<StationaryDistribution<TwoSidedState>> for SystemDistribution {
    fn from(d: StationaryDistribution<TwoSidedState>) -> Self {
        SystemDistribution::TwoSided(d)
    }
}

/// Total variation distance `½ Σ |p1 − p2|`, with states missing from either
/// side counted as probability zero.
pub fn total_variation<S: ChainState>(
    d1: &StationaryDistribution<S>,
    d2: &StationaryDistribution<S>,
) -> f64 {
    tv_maps(&d1.probabilities, &d2.probabilities)
}

pub(crate) fn tv_maps<K: Ord>(a: &BTreeMap<K, f64>, b: &BTreeMap<K, f64>) -> f64 {
    let mut sum = 0.0;
    for (k, p) in a {
        sum += (p - b.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, q) in b {
        if !a.contains_key(k) {
            sum += q.abs();
        }
    }
    0.5 * sum
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> NSystemParams {
        NSystemParams {
            lambda1: 1.0,
            lambda2: 1.0,
            mu1: 2.0,
            mu2: 2.0,
            theta_s: 1.0,
            theta_d: 1.0,
        }
    }

    #[test]
    fn accepts_reference_params() {
        assert_eq!(validate(reference()), Ok(reference()));
    }

    #[test]
    fn rejects_zero_arrival_rate() {
        let p = NSystemParams {
            lambda1: 0.0,
            ..reference()
        };
        let err = validate(p).unwrap_err();
        assert_eq!(err.to_string(), "lambda1 must be positive");
    }

    #[test]
    fn rejects_negative_reneging() {
        let p = NSystemParams {
            theta_s: -0.5,
            ..reference()
        };
        assert_eq!(
            validate(p).unwrap_err().to_string(),
            "theta_s must be non-negative"
        );
    }

    #[test]
    fn rejects_non_finite() {
        let p = NSystemParams {
            mu2: f64::INFINITY,
            ..reference()
        };
        assert_eq!(validate(p), Err(ModelError::NotFinite("mu2")));
        let p = NSystemParams {
            theta_d: f64::NAN,
            ..reference()
        };
        assert_eq!(validate(p), Err(ModelError::NotFinite("theta_d")));
    }

    #[test]
    fn stability_conditions() {
        let base = reference();
        assert!(stability_check(&base));
        let p = NSystemParams {
            lambda2: 3.0,
            ..base
        };
        assert!(!stability_check(&p));
        let p = NSystemParams {
            lambda1: 3.0,
            ..base
        };
        assert!(!stability_check(&p));
    }

    #[test]
    fn mirror_is_an_involution() {
        let p = NSystemParams {
            lambda1: 2.0,
            lambda2: 0.5,
            mu1: 1.0,
            mu2: 3.0,
            theta_s: 0.3,
            theta_d: 0.7,
        };
        assert_eq!(p.mirrored().mirrored(), p);
        assert_eq!(p.mirrored().gamma_s(), p.gamma_d());
    }

    #[test]
    fn side_queue_rejects_empty() {
        assert!(TwoSidedState::left(0, 0).is_err());
        assert!(TwoSidedState::right(0, 0).is_err());
        assert!(TwoSidedState::both(0, 3).is_err());
        assert!(TwoSidedState::both(2, 0).is_err());
        assert!(TwoSidedState::left(0, 1).is_ok());
        assert!(TwoSidedState::both(1, 1).is_ok());
        assert_eq!(TwoSidedState::left_or_empty(0, 0), TwoSidedState::Empty);
    }

    #[test]
    fn config_parsing_and_flag_precedence() {
        let text = "# reference set\nlambda1 = 1\nlambda2=1\nmu1 = 2 # type-1 demand\nmu2=2\ntheta_s=1\n";
        let file = PartialParams::from_config_str(text).unwrap();
        let flags = PartialParams {
            theta_s: Some(0.25),
            ..Default::default()
        };
        let p = flags.over(file).resolve().unwrap();
        assert_eq!(p.theta_s, 0.25);
        assert_eq!(p.mu1, 2.0);
        assert_eq!(p.theta_d, 0.0);
    }

    #[test]
    fn config_errors_name_the_line() {
        let err = PartialParams::from_config_str("lambda1=1\nbogus=2\n").unwrap_err();
        assert!(matches!(err, ModelError::Config { line: 2, .. }));
        let err = PartialParams::from_config_str("lambda1 1\n").unwrap_err();
        assert!(matches!(err, ModelError::Config { line: 1, .. }));
        let err = PartialParams::default().resolve().unwrap_err();
        assert_eq!(err, ModelError::Missing("lambda1"));
    }

    #[test]
    fn tv_of_point_masses() {
        let p = reference();
        let t = Truncation::one_sided(2, 2);
        let a = StationaryDistribution::new(
            p,
            t,
            0.0,
            0.0,
            BTreeMap::from([(OneSidedState::new(0, 0), 1.0)]),
        );
        let b = StationaryDistribution::new(
            p,
            t,
            0.0,
            0.0,
            BTreeMap::from([(OneSidedState::new(1, 0), 1.0)]),
        );
        assert_eq!(total_variation(&a, &a), 0.0);
        assert_eq!(total_variation(&a, &b), 1.0);
        assert_eq!(a.normalizer, 1.0);
        assert_eq!(b.normalizer, 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gamma_complements(l1 in 1e-3f64..1e3, l2 in 1e-3f64..1e3) {
                let p = NSystemParams { lambda1: l1, lambda2: l2, ..reference() };
                let g = p.gamma_s() + l2 / (l1 + l2);
                prop_assert!((g - 1.0).abs() <= f64::EPSILON);
                prop_assert!(p.gamma_s() > 0.0 && p.gamma_s() < 1.0);
            }
        }
    }
}
