//! The `nmatch` command line.
//!
//! Exit status: 0 on success, 1 when a computation fails or a validation check
//! does not pass, 2 for bad arguments, parameters or config files. Errors are
//! reported on stderr as `{"error": ..., "kind": ...}`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::io::{fmt_f64, to_json_string};
use crate::metrics::{compute_metrics, sweep_flexibility, sweep_to_csv};
use crate::model::{
    stability_check, NSystemParams, OneSidedState, PartialParams, SystemDistribution,
    SystemKind, Truncation, TwoSidedState,
};
use crate::oracle::{build_generator, SolveMethod, SolverOptions, DEFAULT_SOLVER_TOLERANCE};
use crate::product_form::{self as pf, DEFAULT_TOLERANCE};
use crate::simulator::{replicate, Horizon, SimConfig, SimMode, DEFAULT_WARMUP_FRACTION};

#[derive(Debug, Parser)]
#[command(name = "nmatch", version, about = "Stationary analysis of N-system matching queues")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Product-form stationary distribution.
    Exact(ExactArgs),
    /// Stationary distribution of the truncated generator, compared with the
    /// product form on the same box.
    Oracle(OracleArgs),
    /// Seeded simulation, compared with the product form.
    Simulate(SimulateArgs),
    /// Performance measures of the product form.
    Metrics(CommonArgs),
    /// Metrics over a grid of flexible-supply shares.
    Sweep(SweepArgs),
    /// Checks the product form against its identities and balance equations.
    Validate(CommonArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub mu1: Option<f64>,
    #[arg(long)]
    pub mu2: Option<f64>,
    #[arg(long)]
    pub theta_s: Option<f64>,
    #[arg(long)]
    pub theta_d: Option<f64>,
    /// `key = value` parameter file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "one-sided")]
    pub system: SystemKind,
    /// Normalization tolerance on omitted probability mass.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Args)]
pub struct BoxArgs {
    #[arg(long)]
    pub max_m: Option<usize>,
    #[arg(long)]
    pub max_n: Option<usize>,
    #[arg(long)]
    pub max_i: Option<usize>,
    #[arg(long)]
    pub max_j: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ExactArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Fixed box instead of adaptive truncation.
    #[command(flatten)]
    pub bounds: BoxArgs,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Box of the truncated chain; defaults to the adaptive product-form box.
    #[command(flatten)]
    pub bounds: BoxArgs,
    #[arg(long, value_enum, default_value = "auto")]
    pub method: MethodArg,
    /// Convergence tolerance of power iteration.
    #[arg(long, default_value_t = DEFAULT_SOLVER_TOLERANCE)]
    pub solver_tol: f64,
    /// Writes the rate triples to this CSV path and a state index next to it
    /// (same path with a `.json` extension).
    #[arg(long)]
    pub dump_generator: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Auto,
    Direct,
    Power,
}

impl From<MethodArg> for SolveMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Auto => SolveMethod::Auto,
            MethodArg::Direct => SolveMethod::Direct,
            MethodArg::Power => SolveMethod::Power,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1_000_000, conflicts_with = "horizon_time")]
    pub horizon_events: u64,
    #[arg(long)]
    pub horizon_time: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_WARMUP_FRACTION)]
    pub warmup: f64,
    #[arg(long, default_value = "parsimonious")]
    pub mode: SimMode,
    #[arg(long, default_value_t = 1)]
    pub replications: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated flexible shares in (0, 1).
    #[arg(long, value_delimiter = ',', required = true)]
    pub gammas: Vec<f64>,
    /// Total supply rate held fixed; defaults to lambda1 + lambda2.
    #[arg(long)]
    pub total_supply: Option<f64>,
}

/// Failure with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    fn usage(message: impl ToString) -> Self {
        Failure {
            code: 2,
            kind: "usage",
            message: message.to_string(),
        }
    }

    fn parameter(message: impl ToString) -> Self {
        Failure {
            code: 2,
            kind: "parameter",
            message: message.to_string(),
        }
    }

    fn compute(message: impl ToString) -> Self {
        Failure {
            code: 1,
            kind: "compute",
            message: message.to_string(),
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let failure = Failure::usage(e.to_string().trim_end());
            report(stderr, &failure);
            return failure.code;
        }
    };
    match execute(&cli.command, stdout) {
        Ok(code) => code,
        Err(failure) => {
            report(stderr, &failure);
            failure.code
        }
    }
}

fn report(stderr: &mut dyn Write, f: &Failure) {
    let _ = write!(
        stderr,
        "{}",
        to_json_string(&json!({"error": f.message, "kind": f.kind}))
    );
}

fn params_of(c: &CommonArgs) -> Result<NSystemParams, Failure> {
    let base = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::parameter(format!("{}: {e}", path.display())))?;
            PartialParams::from_config_str(&text).map_err(Failure::parameter)?
        }
        None => PartialParams::default(),
    };
    let flags = PartialParams {
        lambda1: c.lambda1,
        lambda2: c.lambda2,
        mu1: c.mu1,
        mu2: c.mu2,
        theta_s: c.theta_s,
        theta_d: c.theta_d,
    };
    flags.over(base).resolve().map_err(Failure::parameter)
}

fn check_tol(tol: f64) -> Result<(), Failure> {
    if tol > 0.0 && tol <= pf::MAX_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::parameter(format!("--tol {tol} outside (0, 1e-3]")))
    }
}

fn emit(c: &CommonArgs, stdout: &mut dyn Write, text: &str) -> Result<(), Failure> {
    match &c.out {
        Some(path) => fs::write(path, text)
            .map_err(|e| Failure::compute(format!("{}: {e}", path.display()))),
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|e| Failure::compute(e.to_string())),
    }
}

fn format_of(c: &CommonArgs, default: Format, allowed: &[Format], cmd: &str) -> Result<Format, Failure> {
    let f = c.format.unwrap_or(default);
    if allowed.contains(&f) {
        Ok(f)
    } else {
        Err(Failure::usage(format!("{cmd} does not support --format {f:?}").to_lowercase()))
    }
}

fn box_of(system: SystemKind, b: &BoxArgs) -> Option<Truncation> {
    let (m, n) = match (b.max_m, b.max_n) {
        (None, None) => return None,
        (m, n) => (m.or(n)?, n.or(m)?),
    };
    Some(match system {
        SystemKind::OneSided => Truncation::one_sided(m, n),
        SystemKind::TwoSided => Truncation::two_sided(m, n, b.max_i.unwrap_or(m), b.max_j.unwrap_or(n)),
    })
}

fn distribution_csv(d: &SystemDistribution) -> String {
    format!(
        "# system={} tol={} tail_mass_bound={}\n{}",
        d.system(),
        fmt_f64(d.tolerance()),
        fmt_f64(d.tail_mass_bound()),
        d.to_csv()
    )
}

fn product_form(
    params: &NSystemParams,
    system: SystemKind,
    tol: f64,
    bounds: Option<Truncation>,
) -> Result<SystemDistribution, Failure> {
    match bounds {
        Some(t) => pf::on_box(params, system, t),
        None => pf::normalize(params, system, tol),
    }
    .map_err(Failure::compute)
}

fn execute(cmd: &Command, stdout: &mut dyn Write) -> Result<i32, Failure> {
    match cmd {
        Command::Exact(a) => {
            let c = &a.common;
            let format = format_of(c, Format::Json, &[Format::Json, Format::Csv], "exact")?;
            let params = params_of(c)?;
            check_tol(c.tol)?;
            let dist = product_form(&params, c.system, c.tol, box_of(c.system, &a.bounds))?;
            let text = match format {
                Format::Csv => distribution_csv(&dist),
                _ => to_json_string(&dist.to_json_value()),
            };
            emit(c, stdout, &text)?;
        }
        Command::Oracle(a) => {
            let c = &a.common;
            let format = format_of(c, Format::Json, &[Format::Json, Format::Csv], "oracle")?;
            let params = params_of(c)?;
            check_tol(c.tol)?;
            let reference = product_form(&params, c.system, c.tol, box_of(c.system, &a.bounds))?;
            let truncation = reference.truncation();
            let gen = build_generator(&params, c.system, truncation).map_err(Failure::parameter)?;
            if let Some(path) = &a.dump_generator {
                let mut buf = Vec::new();
                gen.write_csv(&mut buf).map_err(Failure::compute)?;
                fs::write(path, buf).map_err(Failure::compute)?;
                fs::write(path.with_extension("json"), to_json_string(&gen.header_json()))
                    .map_err(Failure::compute)?;
            }
            let options = SolverOptions {
                method: a.method.into(),
                tol: a.solver_tol,
                ..SolverOptions::default()
            };
            let dist = gen.solve(&options).map_err(Failure::compute)?;
            let tv = dist.total_variation(&reference).expect("same system");
            let residual = gen.residual_of(&dist).expect("same system");
            let text = match format {
                Format::Csv => format!(
                    "# tv_to_product_form={} residual={}\n{}",
                    fmt_f64(tv),
                    fmt_f64(residual),
                    distribution_csv(&dist)
                ),
                _ => to_json_string(&json!({
                    "tol": c.tol,
                    "solver_tol": a.solver_tol,
                    "states": gen.len(),
                    "residual": residual,
                    "tv_to_product_form": tv,
                    "product_form_tail_mass_bound": reference.tail_mass_bound(),
                    "distribution": dist.to_json_value(),
                })),
            };
            emit(c, stdout, &text)?;
        }
        Command::Simulate(a) => {
            let c = &a.common;
            format_of(c, Format::Json, &[Format::Json], "simulate")?;
            let params = params_of(c)?;
            check_tol(c.tol)?;
            let horizon = match a.horizon_time {
                Some(t) => Horizon::Time(t),
                None => Horizon::Events(a.horizon_events),
            };
            let cfg = SimConfig {
                system: c.system,
                mode: a.mode,
                horizon,
                seed: a.seed,
                warmup_fraction: a.warmup,
            };
            let reps = replicate(&params, &cfg, a.replications).map_err(Failure::parameter)?;
            let reference = pf::normalize(&params, c.system, c.tol).map_err(Failure::compute)?;
            let tvs: Vec<f64> = reps
                .runs
                .iter()
                .map(|r| r.occupancy.total_variation(&reference))
                .collect();
            let (p_empty, p_empty_se) = reps.mean_se(|r| r.occupancy.empty_fraction());
            let text = to_json_string(&json!({
                "tol": c.tol,
                "replications": a.replications,
                "tv_to_product_form": tvs,
                "p_empty": {"mean": p_empty, "se": p_empty_se, "product_form": reference.normalizer()},
                "runs": reps.runs.iter().map(|r| r.to_json_value()).collect::<Vec<_>>(),
            }));
            emit(c, stdout, &text)?;
        }
        Command::Metrics(c) => {
            let format = format_of(c, Format::Json, &[Format::Json, Format::Csv], "metrics")?;
            let params = params_of(c)?;
            check_tol(c.tol)?;
            let dist = pf::normalize(&params, c.system, c.tol).map_err(Failure::compute)?;
            let m = compute_metrics(&dist).map_err(Failure::compute)?;
            let text = match format {
                Format::Csv => {
                    let mut out = String::from("field,value\n");
                    for (k, v) in m.fields() {
                        out.push_str(&format!("{k},{}\n", v.map(fmt_f64).unwrap_or_default()));
                    }
                    out.push_str(&format!("tol,{}\n", fmt_f64(m.tolerance)));
                    out
                }
                _ => to_json_string(&m),
            };
            emit(c, stdout, &text)?;
        }
        Command::Sweep(a) => {
            let c = &a.common;
            let format = format_of(c, Format::Csv, &[Format::Json, Format::Csv], "sweep")?;
            let params = params_of(c)?;
            check_tol(c.tol)?;
            let total = a.total_supply.unwrap_or(params.supply_rate());
            let rows = sweep_flexibility(&params, c.system, &a.gammas, total, c.tol)
                .map_err(|e| match e {
                    crate::metrics::MetricsError::BadShare(_)
                    | crate::metrics::MetricsError::BadTotal
                    | crate::metrics::MetricsError::Model(_) => Failure::parameter(e),
                    other => Failure::compute(other),
                })?;
            let text = match format {
                Format::Json => to_json_string(&json!({"tol": c.tol, "rows": rows})),
                _ => sweep_to_csv(&rows),
            };
            emit(c, stdout, &text)?;
        }
        Command::Validate(c) => {
            let format = format_of(c, Format::Text, &[Format::Text, Format::Json], "validate")?;
            let params = params_of(c)?;
            check_tol(c.tol)?;
            let checks = validation_suite(&params, c.system, c.tol).map_err(Failure::compute)?;
            let all = checks.iter().all(|k| k.passed != Some(false));
            let text = match format {
                Format::Json => to_json_string(&json!({
                    "system": c.system,
                    "tol": c.tol,
                    "passed": all,
                    "checks": checks,
                })),
                _ => {
                    let mut out = String::new();
                    for k in &checks {
                        out.push_str(&k.line());
                        out.push('\n');
                    }
                    out.push_str(&format!("tol {}\n", fmt_f64(c.tol)));
                    out
                }
            };
            emit(c, stdout, &text)?;
            return Ok(if all { 0 } else { 1 });
        }
    }
    Ok(0)
}

/// Outcome of one validation check. `passed` is `None` when the check does
/// not apply to the parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub residual: f64,
    pub threshold: f64,
    pub passed: Option<bool>,
}

impl Check {
    fn new(name: &'static str, residual: f64, threshold: f64) -> Self {
        Check {
            name,
            residual,
            threshold,
            passed: Some(residual < threshold),
        }
    }

    fn skipped(name: &'static str) -> Self {
        Check {
            name,
            residual: f64::NAN,
            threshold: f64::NAN,
            passed: None,
        }
    }

    pub fn line(&self) -> String {
        match self.passed {
            None => format!("SKIP {} (not applicable)", self.name),
            Some(ok) => format!(
                "{} {} residual={} threshold={}",
                if ok { "PASS" } else { "FAIL" },
                self.name,
                fmt_f64(self.residual),
                fmt_f64(self.threshold)
            ),
        }
    }
}

fn max_over(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(0.0, f64::max)
}

/// Identity, balance and oracle checks of the product form for `params`.
pub fn validation_suite(
    params: &NSystemParams,
    system: SystemKind,
    tol: f64,
) -> Result<Vec<Check>, String> {
    let mut checks = Vec::new();
    let dist = pf::normalize(params, system, tol).map_err(|e| e.to_string())?;
    match &dist {
        SystemDistribution::OneSided(d) => {
            checks.push(Check::new(
                "partial_balance m<=50",
                max_over((1..=50).map(|m| pf::partial_balance_residual(params, m))),
                1e-10,
            ));
            checks.push(Check::new(
                "f_summation m<=100",
                max_over((1..=100).map(|m| pf::f_summation_residual(params, m))),
                1e-10,
            ));
            let g1 = pf::g_one_from_empty_balance(params);
            checks.push(Check::new(
                "g1_from_empty_balance",
                (g1 / pf::g_total(params, 1) - 1.0).abs(),
                1e-12,
            ));
            checks.push(Check::new(
                "g_recursion m<=100",
                max_over((2..=100).map(|m| pf::g_recursion_residual(params, m))),
                1e-10,
            ));
            checks.push(Check::new(
                "forms_equivalent m,n<=30",
                max_over((0..=30).flat_map(|m| {
                    (0..=30).map(move |n| pf::forms_relative_gap(params, OneSidedState::new(m, n)))
                })),
                1e-12,
            ));
            checks.push(Check::new(
                "global_balance",
                pf::one_sided_balance_residual(d, Some(30)),
                1e-10,
            ));
            let zero = params.with_theta_s(0.0);
            if stability_check(&zero) {
                let b = pf::no_reneging_normalizer(&zero).map_err(|e| e.to_string())?;
                let gap = max_over((0..=50).flat_map(|m| (0..=50).map(move |n| (m, n))).map(
                    |(m, n)| {
                        let s = OneSidedState::new(m, n);
                        let w = pf::ln_weight_one_sided(&zero, s).exp() * b;
                        let exact = pf::no_reneging_distribution(&zero, s).unwrap_or(f64::NAN);
                        (w / exact - 1.0).abs()
                    },
                ));
                checks.push(Check::new("no_reneging_reduction m,n<=50", gap, 1e-12));
            } else {
                checks.push(Check::skipped("no_reneging_reduction m,n<=50"));
            }
        }
        SystemDistribution::TwoSided(d) => {
            checks.push(Check::new(
                "global_balance",
                pf::two_sided_balance_residual(d, Some(20)),
                1e-10,
            ));
            let mirror = params.mirrored();
            let gap = max_over((0..=20).flat_map(|m| (0..=20).map(move |n| (m, n))).filter(|(m, n)| m + n > 0).map(
                |(m, n)| {
                    let r = pf::ln_weight_two_sided(params, TwoSidedState::right_or_empty(m, n));
                    let l = pf::ln_weight_two_sided(&mirror, TwoSidedState::left_or_empty(m, n));
                    (r - l).exp_m1().abs()
                },
            ));
            checks.push(Check::new("mirror_symmetry m,n<=20", gap, 1e-12));
        }
    }
    let gen = build_generator(params, system, dist.truncation()).map_err(|e| e.to_string())?;
    let oracle = gen.solve(&SolverOptions::default()).map_err(|e| e.to_string())?;
    checks.push(Check::new(
        "oracle_total_variation",
        oracle.total_variation(&dist).expect("same system"),
        1e-8,
    ));
    let metrics = compute_metrics(&dist).map_err(|e| e.to_string())?;
    checks.push(Check::new(
        "supply_flow_balance",
        metrics.supply_balance_residual(),
        1e-6,
    ));
    Ok(checks)
}

/// Reads a file produced by `--dump-generator` back as `(from, to, rate)`.
pub fn read_generator_csv(path: &Path) -> std::io::Result<Vec<(usize, usize, f64)>> {
    let text = fs::read_to_string(path)?;
    let bad = |l: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, l.to_string());
    text.lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',');
            let mut next = || it.next().ok_or_else(|| bad(l));
            let from = next()?.parse().map_err(|_| bad(l))?;
            let to = next()?.parse().map_err(|_| bad(l))?;
            let rate = next()?.parse().map_err(|_| bad(l))?;
            Ok((from, to, rate))
        })
        .collect()
}
