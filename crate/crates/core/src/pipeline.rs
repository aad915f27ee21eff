//! End-to-end scenario runs and the verification suites behind the CLI.
//!
//! Everything here is deterministic in the seed: reports carry no timings and
//! all reductions happen in a fixed order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::adjoint::{solve_adjoint_analytic, solve_adjoint_lsmc, AdjointMethod, AdjointPair, LsmcOptions};
use crate::empirical::{ks_uniformity, SampleSet};
use crate::error::{Error, Result};
use crate::functional::{evaluate_objective, ObjectiveValue};
use crate::principle::{duality_check, gateaux_fd, mp_residual, GateauxReport, MpOptions, Verdict};
use crate::scenarios::{build_scenario, evaluate_intro_objectives, stake_model, Scenario, ScenarioConfig, ScenarioId};
use crate::sde::{brownian_increments, simulate_state, simulate_variational, ControlSpec, ModelSpec, PathEnsemble};

pub const EPS_LADDER: [f64; 3] = [0.1, 0.05, 0.025];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// floor on the residual tolerance
    pub mp_min: f64,
    /// residual tolerance in pooled std errors
    pub mp_se_multiple: f64,
    pub duality_se_multiple: f64,
    pub gateaux_se_multiple: f64,
    /// relative slack on the Gateaux gap
    pub gateaux_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            mp_min: 1e-2,
            mp_se_multiple: 5.0,
            duality_se_multiple: 3.0,
            gateaux_se_multiple: 3.0,
            gateaux_rel: 5e-3,
        }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mp_min,
            self.mp_se_multiple,
            self.duality_se_multiple,
            self.gateaux_se_multiple,
            self.gateaux_rel,
        ];
        if all.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::config("tolerances must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjointChoice {
    #[default]
    Analytic,
    Lsmc,
}

impl FromStr for AdjointChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(Self::Analytic),
            "lsmc" => Ok(Self::Lsmc),
            _ => Err(Error::config(format!("unknown adjoint method '{s}'"))),
        }
    }
}

/// Perturbation direction for the Gateaux and duality checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Direction {
    Constant(f64),
    /// a multiple of the scenario's own control
    Scaled(f64),
}

impl Direction {
    pub const CHECKED: [Direction; 2] = [Direction::Constant(0.1), Direction::Scaled(0.5)];

    pub fn control(&self, ens: &PathEnsemble) -> ControlSpec {
        match *self {
            Direction::Constant(v) => ControlSpec::constant(v),
            Direction::Scaled(c) => ControlSpec::pathwise(ens.u.map(|u| c * u)),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Constant(v) => write!(f, "{v}"),
            Direction::Scaled(c) => write!(f, "{c}*u"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpSummary {
    pub rms: f64,
    pub pooled_std_error: f64,
    pub tolerance: f64,
    pub excluded_fraction: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateauxSummary {
    pub direction: String,
    /// whether the scenario control is the claimed optimum
    pub at_optimum: bool,
    #[serde(flatten)]
    pub report: GateauxReport,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualitySummary {
    pub direction: String,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub std_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub lambda: f64,
    pub relative_error: f64,
    pub pit_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Consistent,
    Violated,
    /// evaluation-only scenarios carry no optimality claim
    NotApplicable,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Consistent => "consistent",
            Outcome::Violated => "violated",
            Outcome::NotApplicable => "not_applicable",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: ScenarioId,
    pub n_paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub objective: ObjectiveValue,
    pub adjoint: Option<AdjointMethod>,
    pub residual: Option<MpSummary>,
    pub gateaux: Option<GateauxSummary>,
    pub duality: Vec<DualitySummary>,
    pub budget: Option<BudgetSummary>,
    pub verdict: Outcome,
}

impl ScenarioReport {
    pub fn max_duality_gap(&self) -> Option<f64> {
        self.duality.iter().map(|d| d.gap).reduce(f64::max)
    }
}

fn solve_adjoint(sc: &Scenario, choice: AdjointChoice) -> Result<AdjointPair> {
    match choice {
        AdjointChoice::Analytic => solve_adjoint_analytic(sc.analytic, &sc.ensemble, &sc.model),
        AdjointChoice::Lsmc => solve_adjoint_lsmc(&sc.ensemble, &sc.model, &sc.pref, &sc.objective, &LsmcOptions::default()),
    }
}

fn at_optimum(cfg: &ScenarioConfig) -> bool {
    match cfg.id {
        ScenarioId::JzMarket => true,
        ScenarioId::ClosedForm => cfg.control_scale == 1.0,
        _ => false,
    }
}

fn summarize_residual(sc: &Scenario, adj: &AdjointPair, tol: &Tolerances) -> Result<MpSummary> {
    let opts = MpOptions {
        ties: sc.ties,
        min_tolerance: tol.mp_min,
        se_multiple: tol.mp_se_multiple,
    };
    let r = mp_residual(&sc.ensemble, adj, &sc.model, &sc.pref, &sc.objective, &opts)?;
    Ok(MpSummary {
        rms: r.overall_rms,
        pooled_std_error: r.pooled_std_error,
        tolerance: r.tolerance,
        excluded_fraction: r.excluded_fraction,
        verdict: r.verdict,
    })
}

fn gateaux_passes(r: &GateauxReport, optimum: bool, tol: &Tolerances) -> bool {
    let k = tol.gateaux_se_multiple;
    let gap_ok = r.abs_gap <= (k * r.gap_std_error).max(tol.gateaux_rel * r.analytic.abs());
    if optimum {
        gap_ok
            && r.analytic.abs() <= k * r.analytic_std_error
            && r.extrapolated.abs() <= k * r.extrapolated_std_error
    } else {
        gap_ok
    }
}

fn summarize_gateaux(
    ens: &PathEnsemble,
    model: &ModelSpec,
    sc: &Scenario,
    direction: Direction,
    optimum: bool,
    tol: &Tolerances,
) -> Result<GateauxSummary> {
    let report = gateaux_fd(ens, model, &sc.pref, &sc.objective, &direction.control(ens), &EPS_LADDER)?;
    Ok(GateauxSummary {
        direction: direction.to_string(),
        at_optimum: optimum,
        pass: gateaux_passes(&report, optimum, tol),
        report,
    })
}

fn summarize_duality(sc: &Scenario, adj: &AdjointPair, direction: Direction, tol: &Tolerances) -> Result<DualitySummary> {
    let v = direction.control(&sc.ensemble);
    let zens = simulate_variational(&sc.ensemble, &sc.model, &v)?;
    let r = duality_check(&zens, adj, &sc.model, &sc.pref, &sc.objective, &v, sc.ties)?;
    Ok(DualitySummary {
        direction: direction.to_string(),
        lhs: r.lhs,
        rhs: r.rhs,
        gap: r.gap,
        std_error: r.std_error,
        pass: r.within(tol.duality_se_multiple),
    })
}

/// simulate → adjoint → residual → Gateaux → duality for a checked scenario;
/// the objective alone for an evaluation-only one.
pub fn run_scenario(cfg: &ScenarioConfig, adjoint: AdjointChoice, tol: &Tolerances) -> Result<ScenarioReport> {
    tol.validate()?;
    cfg.validate()?;
    let mut report = ScenarioReport {
        scenario: cfg.id,
        n_paths: cfg.n_paths,
        steps: cfg.steps,
        seed: cfg.seed,
        config: cfg.clone(),
        objective: ObjectiveValue::new(0.0, 0.0, 0.0, 0.0),
        adjoint: None,
        residual: None,
        gateaux: None,
        duality: Vec::new(),
        budget: None,
        verdict: Outcome::NotApplicable,
    };
    if !cfg.id.is_checked() {
        let dw = std::sync::Arc::new(brownian_increments(&cfg.grid()?, cfg.n_paths, cfg.seed));
        report.objective = evaluate_intro_objectives(cfg, dw)?;
        return Ok(report);
    }
    let sc = build_scenario(cfg)?;
    report.objective = evaluate_objective(&sc.ensemble, &sc.pref, &sc.objective)?;
    report.budget = sc.jz.as_ref().map(|j| BudgetSummary {
        lambda: j.budget.lambda,
        relative_error: j.budget.relative_error,
        pit_gap: j.pit_gap,
    });
    let adj = solve_adjoint(&sc, adjoint)?;
    report.adjoint = Some(adj.method);
    let residual = summarize_residual(&sc, &adj, tol)?;
    let gateaux = summarize_gateaux(&sc.ensemble, &sc.model, &sc, Direction::Constant(0.1), at_optimum(cfg), tol)?;
    let duality = Direction::CHECKED
        .iter()
        .map(|d| summarize_duality(&sc, &adj, *d, tol))
        .collect::<Result<Vec<_>>>()?;
    let ok = residual.verdict == Verdict::Consistent && gateaux.pass && duality.iter().all(|d| d.pass);
    report.verdict = if ok { Outcome::Consistent } else { Outcome::Violated };
    report.residual = Some(residual);
    report.gateaux = Some(gateaux);
    report.duality = duality;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    All,
    Pit,
    Duality,
    Gateaux,
    Residual,
}

impl Suite {
    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::All => "all",
            Suite::Pit => "pit",
            Suite::Duality => "duality",
            Suite::Gateaux => "gateaux",
            Suite::Residual => "residual",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Suite::All, Suite::Pit, Suite::Duality, Suite::Gateaux, Suite::Residual]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config(format!("unknown suite '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub suite: String,
    pub scenario: String,
    pub check: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl SuiteRow {
    fn new(suite: Suite, scenario: &str, check: impl Into<String>, value: f64, threshold: f64, pass: bool) -> Self {
        Self {
            suite: suite.name().into(),
            scenario: scenario.into(),
            check: check.into(),
            value,
            threshold,
            pass,
        }
    }

    fn below(suite: Suite, scenario: &str, check: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::new(suite, scenario, check, value, threshold, value <= threshold)
    }
}

/// KS threshold for uniformity at sample size n (1% level plus one atom).
pub fn ks_threshold(n: usize) -> f64 {
    1.63 / (n as f64).sqrt() + 1.0 / n as f64
}

/// Law of ln X_T for a linear-in-x model under a constant control and
/// time-homogeneous coefficients: N(ln x0 + (β − s²/2)T, s²T).
pub fn constant_control_log_law(model: &ModelSpec, u: f64, x0: f64, horizon: f64) -> Option<(f64, f64)> {
    match model {
        ModelSpec::LinearInX { drift, vol } => {
            let beta = drift.c0 + drift.c1 * u;
            let s = vol.c0 + vol.c1 * u;
            Some(((x0.ln() + (beta - 0.5 * s * s) * horizon), s.abs() * horizon.sqrt()))
        }
        _ => None,
    }
}

fn pit_rows(sc: &Scenario, rows: &mut Vec<SuiteRow>) -> Result<()> {
    let name = sc.config.id.name();
    let ens = &sc.ensemble;
    let xt = ens.x.row(ens.grid.steps).to_vec();
    let n = xt.len();
    let samples = SampleSet::new(xt.clone())?;
    let ks = ks_uniformity(&samples.self_pit())?;
    rows.push(SuiteRow::below(Suite::Pit, name, "ks_self_pit_terminal", ks, ks_threshold(n)));
    if sc.config.id == ScenarioId::ZeroControl {
        let (m, s) = constant_control_log_law(&sc.model, sc.config.control, sc.config.x0, ens.grid.horizon)
            .ok_or_else(|| Error::config("GBM law needs a linear-in-x model"))?;
        let law = Normal::new(m, s).map_err(|e| Error::numerical(e.to_string()))?;
        let u: Vec<f64> = xt.iter().map(|x| law.cdf(x.ln())).collect();
        rows.push(SuiteRow::below(Suite::Pit, name, "ks_law_pit_terminal", ks_uniformity(&u)?, ks_threshold(n)));
    }
    if let Some(j) = &sc.jz {
        rows.push(SuiteRow::below(Suite::Pit, name, "ks_kernel_antimonotone", j.pit_gap, ks_threshold(n).max(0.01)));
    }
    Ok(())
}

fn residual_rows(sc: &Scenario, adj: &AdjointPair, tol: &Tolerances, rows: &mut Vec<SuiteRow>) -> Result<()> {
    let name = sc.config.id.name();
    let expect = if at_optimum(&sc.config) { Verdict::Consistent } else { Verdict::Violated };
    let r = summarize_residual(sc, adj, tol)?;
    let check = format!("mp_rms_expect_{}", if expect == Verdict::Consistent { "consistent" } else { "violated" });
    rows.push(SuiteRow::new(Suite::Residual, name, check, r.rms, r.tolerance, r.verdict == expect));
    if sc.config.id == ScenarioId::JzMarket {
        let drift = crate::principle::drift_residual(&sc.ensemble, adj, &sc.model)?;
        let worst = drift.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        rows.push(SuiteRow::below(Suite::Residual, name, "max_drift_identity", worst, 1e-12));
    }
    Ok(())
}

fn duality_rows(sc: &Scenario, adj: &AdjointPair, tol: &Tolerances, rows: &mut Vec<SuiteRow>) -> Result<()> {
    for d in Direction::CHECKED {
        let s = summarize_duality(sc, adj, d, tol)?;
        rows.push(SuiteRow::new(
            Suite::Duality,
            sc.config.id.name(),
            format!("gap_v={}", s.direction),
            s.gap,
            tol.duality_se_multiple * s.std_error,
            s.pass,
        ));
    }
    Ok(())
}

fn gateaux_rows(sc: &Scenario, tol: &Tolerances, rows: &mut Vec<SuiteRow>) -> Result<()> {
    let name = sc.config.id.name();
    let k = tol.gateaux_se_multiple;
    if at_optimum(&sc.config) {
        let g = summarize_gateaux(&sc.ensemble, &sc.model, sc, Direction::Constant(0.1), true, tol)?.report;
        rows.push(SuiteRow::below(Suite::Gateaux, name, "analytic_at_optimum", g.analytic.abs(), k * g.analytic_std_error));
        rows.push(SuiteRow::below(Suite::Gateaux, name, "fd_at_optimum", g.extrapolated.abs(), k * g.extrapolated_std_error));
    }
    if sc.config.id == ScenarioId::ClosedForm {
        let g = gateaux_off_optimum(sc, 0.5, Direction::Constant(0.1))?;
        let bound = (k * g.gap_std_error).max(tol.gateaux_rel * g.analytic.abs());
        rows.push(SuiteRow::below(Suite::Gateaux, name, "fd_gap_constant_control", g.abs_gap, bound));
    }
    Ok(())
}

/// Gateaux report in the stake model under the constant control `c`, with
/// the closed-form scenario's preferences and objective.
pub fn gateaux_off_optimum(sc: &Scenario, c: f64, direction: Direction) -> Result<GateauxReport> {
    let cfg = &sc.config;
    let model = stake_model();
    let ens = simulate_state(&model, &ControlSpec::constant(c), &cfg.grid()?, cfg.n_paths, cfg.x0, cfg.seed)?;
    gateaux_fd(&ens, &model, &sc.pref, &sc.objective, &direction.control(&ens), &EPS_LADDER)
}

/// Runs a suite over the checked presets with the given seed (and optionally
/// a path count other than the preset's).
pub fn run_suite(suite: Suite, seed: u64, n_paths: Option<usize>, tol: &Tolerances) -> Result<Vec<SuiteRow>> {
    tol.validate()?;
    let mut rows = Vec::new();
    for id in ScenarioId::CHECKED {
        let cfg = ScenarioConfig {
            seed,
            n_paths: n_paths.unwrap_or(ScenarioConfig::preset(id).n_paths),
            ..ScenarioConfig::preset(id)
        };
        let sc = build_scenario(&cfg)?;
        if suite.includes(Suite::Pit) {
            pit_rows(&sc, &mut rows)?;
        }
        if suite.includes(Suite::Residual) || suite.includes(Suite::Duality) {
            let adj = solve_adjoint_analytic(sc.analytic, &sc.ensemble, &sc.model)?;
            if suite.includes(Suite::Residual) {
                residual_rows(&sc, &adj, tol, &mut rows)?;
            }
            if suite.includes(Suite::Duality) {
                duality_rows(&sc, &adj, tol, &mut rows)?;
            }
        }
        if suite.includes(Suite::Gateaux) {
            gateaux_rows(&sc, tol, &mut rows)?;
        }
    }
    Ok(rows)
}
