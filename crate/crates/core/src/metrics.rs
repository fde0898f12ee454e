//! Steady-state performance measures derived from a stationary distribution,
//! and sweeps over the share of flexible supply.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::io::fmt_f64;
use crate::model::{ModelError, NSystemParams, SystemDistribution, SystemKind, TwoSidedState};
use crate::product_form::{normalize, ProductFormError};

/// Distributions whose omitted mass may exceed this are rejected.
pub const MAX_TAIL_MASS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("distribution omits up to {0} probability mass; at most 1e-6 is accepted")]
    ExcessTail(f64),
    #[error("flexible share {0} outside (0, 1)")]
    BadShare(f64),
    #[error("total supply rate must be positive and finite")]
    BadTotal,
    #[error(transparent)]
    ProductForm(#[from] ProductFormError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Fields that only make sense for one system are `None` for the other.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub system: SystemKind,
    pub params: NSystemParams,
    pub tolerance: f64,
    pub tail_mass_bound: f64,
    pub p_empty: f64,
    pub mean_supply: f64,
    pub mean_demand: Option<f64>,
    pub abandonment_rate_supply: f64,
    pub abandonment_rate_demand: Option<f64>,
    pub match_throughput: f64,
    pub loss_prob_type1_demand: Option<f64>,
    pub loss_prob_type2_demand: Option<f64>,
}

impl MetricsReport {
    /// `|λ1+λ2 − throughput − supply abandonment| / (λ1+λ2)`.
    pub fn supply_balance_residual(&self) -> f64 {
        let lam = self.params.supply_rate();
        (lam - self.match_throughput - self.abandonment_rate_supply).abs() / lam
    }

    /// Demand-side analogue; demand is either matched, lost or abandons.
    pub fn demand_balance_residual(&self) -> f64 {
        let p = &self.params;
        let mu = p.demand_rate();
        let lost = match (self.loss_prob_type1_demand, self.loss_prob_type2_demand) {
            (Some(l1), Some(l2)) => p.mu1 * l1 + p.mu2 * l2,
            _ => 0.0,
        };
        let abandoned = self.abandonment_rate_demand.unwrap_or(0.0);
        (mu - self.match_throughput - lost - abandoned).abs() / mu
    }

    /// Named numeric fields in a fixed order; `None` where not defined.
    pub fn fields(&self) -> [(&'static str, Option<f64>); 8] {
        [
            ("p_empty", Some(self.p_empty)),
            ("mean_supply", Some(self.mean_supply)),
            ("mean_demand", self.mean_demand),
            ("abandonment_rate_supply", Some(self.abandonment_rate_supply)),
            ("abandonment_rate_demand", self.abandonment_rate_demand),
            ("match_throughput", Some(self.match_throughput)),
            ("loss_prob_type1_demand", self.loss_prob_type1_demand),
            ("loss_prob_type2_demand", self.loss_prob_type2_demand),
        ]
    }

    /// Largest absolute difference over the fields both reports define.
    pub fn max_field_gap(&self, other: &MetricsReport) -> f64 {
        self.fields()
            .iter()
            .zip(other.fields())
            .filter_map(|((_, a), (_, b))| Some((a.as_ref()? - b?).abs()))
            .fold(0.0, f64::max)
    }
}

pub fn compute_metrics(dist: &SystemDistribution) -> Result<MetricsReport, MetricsError> {
    let tail = dist.tail_mass_bound();
    if !(tail < MAX_TAIL_MASS) {
        return Err(MetricsError::ExcessTail(tail));
    }
    let p = *dist.params();
    let mut report = MetricsReport {
        system: dist.system(),
        params: p,
        tolerance: dist.tolerance(),
        tail_mass_bound: tail,
        p_empty: 0.0,
        mean_supply: 0.0,
        mean_demand: None,
        abandonment_rate_supply: 0.0,
        abandonment_rate_demand: None,
        match_throughput: 0.0,
        loss_prob_type1_demand: None,
        loss_prob_type2_demand: None,
    };
    match dist {
        SystemDistribution::OneSided(d) => {
            let fail = 1.0 - p.gamma_s();
            let mut mean = 0.0;
            let mut loss1 = 0.0;
            for (s, pi) in d.iter() {
                mean += s.total() as f64 * pi;
                loss1 += pi * fail.powi(s.n as i32);
            }
            let loss2 = d.get(&crate::model::OneSidedState::EMPTY);
            report.p_empty = loss2;
            report.mean_supply = mean;
            report.abandonment_rate_supply = p.theta_s * mean;
            report.loss_prob_type1_demand = Some(loss1);
            report.loss_prob_type2_demand = Some(loss2);
            // Counted from the demand side so the supply balance stays a
            // genuine check.
            report.match_throughput = p.mu1 * (1.0 - loss1) + p.mu2 * (1.0 - loss2);
        }
        SystemDistribution::TwoSided(d) => {
            let (fail_s, fail_d) = (1.0 - p.gamma_s(), 1.0 - p.gamma_d());
            let (mut supply, mut demand) = (0.0, 0.0);
            let (mut supply_waiting, mut demand_waiting) = (0.0, 0.0);
            let (mut scan_s, mut scan_d) = (0.0, 0.0);
            for (s, pi) in d.iter() {
                supply += s.supply_count() as f64 * pi;
                demand += s.demand_count() as f64 * pi;
                match s {
                    TwoSidedState::Empty => report.p_empty = pi,
                    TwoSidedState::Left(q) => {
                        supply_waiting += pi;
                        scan_s += pi * (1.0 - fail_s.powi(q.unknown() as i32));
                    }
                    TwoSidedState::Right(q) => {
                        demand_waiting += pi;
                        scan_d += pi * (1.0 - fail_d.powi(q.unknown() as i32));
                    }
                    TwoSidedState::Both(_) => {
                        supply_waiting += pi;
                        demand_waiting += pi;
                    }
                }
            }
            report.mean_supply = supply;
            report.mean_demand = Some(demand);
            report.abandonment_rate_supply = p.theta_s * supply;
            report.abandonment_rate_demand = Some(p.theta_d * demand);
            // Every match is triggered by exactly one arrival: flexible supply
            // or type-2 demand whenever the other side waits, the other two
            // types only when their scan succeeds.
            report.match_throughput = p.lambda1 * demand_waiting
                + p.lambda2 * scan_d
                + p.mu2 * supply_waiting
                + p.mu1 * scan_s;
        }
    }
    Ok(report)
}

/// One row of a flexibility sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub metrics: MetricsReport,
}

pub const SWEEP_CSV_HEADER: &str = "gamma,lambda1,lambda2,p_empty,mean_supply,mean_demand,\
abandonment_rate_supply,abandonment_rate_demand,match_throughput,\
loss_prob_type1_demand,loss_prob_type2_demand,tol";

/// Recomputes the product form and its metrics with `λ1 = γ·total` and
/// `λ2 = (1−γ)·total` for each `γ` in the grid. Rows are computed in
/// parallel and returned in grid order.
pub fn sweep_flexibility(
    base: &NSystemParams,
    system: SystemKind,
    gamma_grid: &[f64],
    total_supply_rate: f64,
    tol: f64,
) -> Result<Vec<SweepRow>, MetricsError> {
    if !(total_supply_rate > 0.0 && total_supply_rate.is_finite()) {
        return Err(MetricsError::BadTotal);
    }
    if let Some(g) = gamma_grid.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
        return Err(MetricsError::BadShare(*g));
    }
    gamma_grid
        .par_iter()
        .map(|&gamma| {
            let p = NSystemParams::new(
                gamma * total_supply_rate,
                (1.0 - gamma) * total_supply_rate,
                base.mu1,
                base.mu2,
                base.theta_s,
                base.theta_d,
            )?;
            let dist = normalize(&p, system, tol)?;
            Ok(SweepRow {
                gamma,
                metrics: compute_metrics(&dist)?,
            })
        })
        .collect()
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for row in rows {
        let m = &row.metrics;
        let mut cells = vec![
            fmt_f64(row.gamma),
            fmt_f64(m.params.lambda1),
            fmt_f64(m.params.lambda2),
        ];
        cells.extend(m.fields().iter().map(|(_, v)| v.map(fmt_f64).unwrap_or_default()));
        cells.push(fmt_f64(m.tolerance));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{build_generator_one_sided, solve_stationary, SolveMethod};
    use crate::product_form::{normalize_one_sided, normalize_two_sided};

    fn reference() -> NSystemParams {
        NSystemParams::new(1.0, 1.0, 2.0, 2.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn no_reneging_loss_of_type2_is_the_normalizer() {
        let p = reference().with_theta_s(0.0);
        let m = compute_metrics(&normalize_one_sided(&p, 1e-10).unwrap().into()).unwrap();
        assert!((m.loss_prob_type2_demand.unwrap() - 1.0 / 3.0).abs() < 1e-10);
        assert_eq!(m.abandonment_rate_supply, 0.0);
        assert!(m.supply_balance_residual() < 1e-9);
    }

    #[test]
    fn flow_balance_both_systems() {
        for p in [reference(), NSystemParams::new(2.0, 0.5, 1.0, 3.0, 0.3, 0.5).unwrap()] {
            let one = compute_metrics(&normalize_one_sided(&p, 1e-10).unwrap().into()).unwrap();
            assert!(one.supply_balance_residual() < 1e-6);
            assert!(one.demand_balance_residual() < 1e-12);
            let two = compute_metrics(&normalize_two_sided(&p, 1e-10).unwrap().into()).unwrap();
            assert!(two.supply_balance_residual() < 1e-6, "{two:?}");
            assert!(two.demand_balance_residual() < 1e-6, "{two:?}");
        }
    }

    #[test]
    fn heavy_reneging_empties_the_queue() {
        let at = |theta: f64| {
            let p = reference().with_theta_s(theta);
            compute_metrics(&normalize_one_sided(&p, 1e-10).unwrap().into()).unwrap()
        };
        let (a, b) = (at(1e2), at(1e3));
        assert!(b.p_empty > a.p_empty && b.p_empty > 0.99);
        assert!(b.mean_supply < a.mean_supply && b.mean_supply < 0.01);
    }

    #[test]
    fn oracle_and_formula_agree() {
        let p = reference();
        let pf = normalize_one_sided(&p, 1e-12).unwrap();
        let t = pf.truncation;
        let g = build_generator_one_sided(&p, t.max_m, t.max_n).unwrap();
        let or = solve_stationary(&g, SolveMethod::Direct, 1e-12).unwrap();
        let a = compute_metrics(&pf.into()).unwrap();
        let b = compute_metrics(&or.into()).unwrap();
        assert!(a.max_field_gap(&b) < 1e-6);
    }

    #[test]
    fn rejects_loose_distributions() {
        let d = crate::product_form::one_sided_on_box(&reference(), 3, 3).unwrap();
        assert!(matches!(
            compute_metrics(&d.into()),
            Err(MetricsError::ExcessTail(_))
        ));
    }

    #[test]
    fn sweep_rows() {
        let p = reference();
        let rows = sweep_flexibility(&p, SystemKind::OneSided, &[0.5], 2.0, 1e-10).unwrap();
        let direct = compute_metrics(&normalize_one_sided(&p, 1e-10).unwrap().into()).unwrap();
        assert_eq!(rows[0].metrics, direct);
        let grid: Vec<f64> = (1..20).map(|k| k as f64 / 20.0).collect();
        let rows = sweep_flexibility(&p, SystemKind::OneSided, &grid, 2.0, 1e-10).unwrap();
        for w in rows.windows(2) {
            assert!(
                w[1].metrics.loss_prob_type1_demand <= w[0].metrics.loss_prob_type1_demand,
                "type-1 loss rose between {} and {}",
                w[0].gamma,
                w[1].gamma
            );
        }
        let csv = sweep_to_csv(&rows);
        assert!(csv.starts_with(SWEEP_CSV_HEADER));
        assert_eq!(csv.lines().count(), grid.len() + 1);
        assert!(matches!(
            sweep_flexibility(&p, SystemKind::OneSided, &[1.0], 2.0, 1e-10),
            Err(MetricsError::BadShare(_))
        ));
    }
}
