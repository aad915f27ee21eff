//! Named scenarios: the three worked examples with closed-form adjoints and
//! two evaluation-only objectives (consumption, gambling).

mod closed_form;
mod intro;
mod jz;

pub use closed_form::{
    closed_form_optimal, closed_form_state_and_control, undistorted_state_and_control, ClosedFormParams,
    ClosedFormPaths,
};
pub use intro::evaluate_intro_objectives;
pub use jz::{jz_terminal_wealth, solve_budget_lambda, BudgetSolution, JzSolution, KernelLaw};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adjoint::AnalyticExample;
use crate::error::{Error, Result};
use crate::functional::{ControlTransform, ObjectiveSpec, RunningReward, TiePolicy};
use crate::preference::{DistortionFn, PreferenceSpec, UtilityFn};
use crate::sde::{
    brownian_increments, simulate_with_increments, AffineRate, ControlSpec, ModelSpec, PathEnsemble, TimeGrid,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioId {
    JzMarket,
    ZeroControl,
    ClosedForm,
    ConsumptionEval,
    GamblingEval,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 5] = [
        ScenarioId::JzMarket,
        ScenarioId::ZeroControl,
        ScenarioId::ClosedForm,
        ScenarioId::ConsumptionEval,
        ScenarioId::GamblingEval,
    ];

    /// The scenarios with an adjoint and an optimality check.
    pub const CHECKED: [ScenarioId; 3] = [ScenarioId::JzMarket, ScenarioId::ZeroControl, ScenarioId::ClosedForm];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioId::JzMarket => "jz_market",
            ScenarioId::ZeroControl => "zero_control",
            ScenarioId::ClosedForm => "closed_form",
            ScenarioId::ConsumptionEval => "consumption_eval",
            ScenarioId::GamblingEval => "gambling_eval",
        }
    }

    pub fn is_checked(self) -> bool {
        Self::CHECKED.contains(&self)
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::config(format!("unknown scenario '{s}'")))
    }
}

/// Lopes distortion parameters ν p^(a+1) + (1−ν)[1 − (1−p)^(b+1)].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LopesParams {
    pub nu: f64,
    pub a: f64,
    pub b: f64,
}

impl LopesParams {
    pub fn build(&self) -> Result<DistortionFn> {
        DistortionFn::lopes(self.nu, self.a, self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub id: ScenarioId,
    pub x0: f64,
    pub r: f64,
    /// stock appreciation rate
    pub b: f64,
    pub sigma: f64,
    pub theta: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub steps: usize,
    pub seed: u64,
    /// exponent of the running utilities
    pub alpha: f64,
    /// exponent of the terminal utility
    pub gamma: f64,
    /// distortion: w for jz_market and the intro objectives, ϖ± otherwise
    pub distortion: LopesParams,
    /// closed_form stops at (1 − horizon_cut)·T
    pub horizon_cut: f64,
    /// constant control (zero_control, intro objectives: portfolio weight)
    pub control: f64,
    /// multiplier on the closed-form candidate control
    pub control_scale: f64,
    /// consumption or wager per unit of wealth
    pub rate: f64,
    /// gambling win multiplier k₊ and its probability
    pub k_plus: f64,
    pub win_prob: f64,
}

impl ScenarioConfig {
    pub fn preset(id: ScenarioId) -> Self {
        let base = ScenarioConfig {
            id,
            x0: 1.0,
            r: 0.02,
            b: 0.06,
            sigma: 0.2,
            theta: 0.2,
            horizon: 1.0,
            n_paths: 100_000,
            steps: 200,
            seed: 42,
            alpha: 0.5,
            gamma: 0.5,
            distortion: LopesParams { nu: 0.3, a: 1.0, b: 0.5 },
            horizon_cut: 0.05,
            control: 0.0,
            control_scale: 1.0,
            rate: 0.0,
            k_plus: 8.0,
            win_prob: 0.1,
        };
        match id {
            ScenarioId::JzMarket => base,
            ScenarioId::ZeroControl => ScenarioConfig { control: 0.5, ..base },
            ScenarioId::ClosedForm => ScenarioConfig {
                distortion: LopesParams { nu: 0.0, a: 1.0, b: 0.0 },
                ..base
            },
            ScenarioId::ConsumptionEval => ScenarioConfig { control: 0.5, rate: 0.05, ..base },
            ScenarioId::GamblingEval => ScenarioConfig { control: 0.5, rate: 0.02, ..base },
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        match self.id {
            ScenarioId::ClosedForm => TimeGrid::new(self.horizon * (1.0 - self.horizon_cut), self.steps),
            _ => TimeGrid::new(self.horizon, self.steps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 100 {
            return Err(Error::config(format!("n_paths must be at least 100, got {}", self.n_paths)));
        }
        if self.steps < 10 {
            return Err(Error::config(format!("steps must be at least 10, got {}", self.steps)));
        }
        if !(self.x0 > 0.0) {
            return Err(Error::config("x0 must be positive"));
        }
        self.grid()?;
        self.distortion.build()?;
        match self.id {
            ScenarioId::JzMarket => {
                if (self.sigma * self.theta - (self.b - self.r)).abs() > 1e-12 {
                    return Err(Error::config(format!(
                        "market is not complete: σθ = {} but b − r = {}",
                        self.sigma * self.theta,
                        self.b - self.r
                    )));
                }
                if !(self.sigma > 0.0) {
                    return Err(Error::config("volatility must be positive"));
                }
                UtilityFn::power(self.gamma)?;
            }
            ScenarioId::ClosedForm => {
                self.closed_form_params()?;
                if !(self.horizon_cut > 0.0 && self.horizon_cut < 1.0) {
                    return Err(Error::config("horizon_cut must lie in (0, 1)"));
                }
                if !(self.control_scale > 0.0) {
                    return Err(Error::config("control_scale must be positive"));
                }
            }
            ScenarioId::ConsumptionEval | ScenarioId::GamblingEval => {
                if self.rate < 0.0 {
                    return Err(Error::domain(format!("negative consumption/wager rate {}", self.rate)));
                }
                if !(0.0..=1.0).contains(&self.win_prob) {
                    return Err(Error::config("win_prob must lie in [0, 1]"));
                }
            }
            ScenarioId::ZeroControl => {}
        }
        Ok(())
    }

    pub fn closed_form_params(&self) -> Result<ClosedFormParams> {
        let p = ClosedFormParams {
            alpha: self.alpha,
            nu: self.distortion.nu,
            a: self.distortion.a,
            beta: self.distortion.b,
            horizon: self.horizon,
        };
        p.check()?;
        Ok(p)
    }

    /// Wealth equation dX = X(r + (b − r)u)dt + Xσu dW.
    pub fn market_model(&self) -> ModelSpec {
        ModelSpec::linear(AffineRate::new(self.r, self.b - self.r), AffineRate::new(0.0, self.sigma))
    }
}

/// dX = −u X dt + X dW, used by the zero-control and closed-form examples.
pub fn stake_model() -> ModelSpec {
    ModelSpec::linear(AffineRate::new(0.0, -1.0), AffineRate::new(1.0, 0.0))
}

/// A checked scenario ready for the adjoint and optimality checks.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub model: ModelSpec,
    pub pref: PreferenceSpec,
    pub objective: ObjectiveSpec,
    pub ensemble: PathEnsemble,
    pub analytic: AnalyticExample,
    /// tie handling for the residual check
    pub ties: TiePolicy,
    pub jz: Option<JzSolution>,
}

pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let dw = Arc::new(brownian_increments(&grid, cfg.n_paths, cfg.seed));
    match cfg.id {
        ScenarioId::JzMarket => {
            let pref = PreferenceSpec {
                zeta_plus: UtilityFn::zero(),
                zeta_minus: UtilityFn::zero(),
                terminal_l: UtilityFn::power(cfg.gamma)?,
                varpi_plus: DistortionFn::Identity,
                varpi_minus: DistortionFn::Identity,
                terminal_w: cfg.distortion.build()?,
            };
            let sol = jz::solve(cfg, &grid, dw, &pref)?;
            Ok(Scenario {
                config: cfg.clone(),
                model: cfg.market_model(),
                pref,
                objective: ObjectiveSpec::default(),
                ensemble: sol.ensemble.clone(),
                analytic: AnalyticExample::JzMarket {
                    lambda: sol.budget.lambda,
                    r: cfg.r,
                    theta: cfg.theta,
                },
                ties: TiePolicy::Midpoint,
                jz: Some(sol),
            })
        }
        ScenarioId::ZeroControl => {
            let w = cfg.distortion.build()?;
            let pref = PreferenceSpec {
                zeta_plus: UtilityFn::power(cfg.alpha)?,
                zeta_minus: UtilityFn::power(cfg.alpha)?,
                terminal_l: UtilityFn::zero(),
                varpi_plus: w.clone(),
                varpi_minus: w,
                terminal_w: DistortionFn::Identity,
            };
            let model = stake_model();
            let ensemble = simulate_with_increments(&model, &ControlSpec::constant(cfg.control), &grid, cfg.x0, dw, cfg.seed)?;
            Ok(Scenario {
                config: cfg.clone(),
                model,
                pref,
                objective: ObjectiveSpec::default(),
                ensemble,
                analytic: AnalyticExample::ZeroControl,
                ties: TiePolicy::DeterministicLimit,
                jz: None,
            })
        }
        ScenarioId::ClosedForm => {
            let params = cfg.closed_form_params()?;
            let pref = PreferenceSpec {
                zeta_plus: UtilityFn::power(cfg.alpha)?,
                zeta_minus: UtilityFn::power(cfg.alpha)?,
                // bonus for stopping short of T: keeps p_t = T − t on the truncated grid
                terminal_l: UtilityFn::linear(cfg.horizon - grid.horizon)?,
                varpi_plus: cfg.distortion.build()?,
                varpi_minus: DistortionFn::Identity,
                terminal_w: DistortionFn::Identity,
            };
            let paths = closed_form_state_and_control(&dw, &grid, cfg.x0, &params)?;
            let u = paths.control.map(|v| v * cfg.control_scale);
            let ensemble = PathEnsemble::from_parts(grid, cfg.seed, dw, paths.state, u)?;
            Ok(Scenario {
                config: cfg.clone(),
                model: stake_model(),
                pref,
                objective: ObjectiveSpec {
                    transform: ControlTransform::UTimesX,
                    extra_f: Some(RunningReward::LinearInState { coef: 1.0 }),
                },
                ensemble,
                analytic: AnalyticExample::ClosedForm { horizon: cfg.horizon },
                ties: TiePolicy::DeterministicLimit,
                jz: None,
            })
        }
        ScenarioId::ConsumptionEval | ScenarioId::GamblingEval => Err(Error::config(format!(
            "scenario {} is evaluation-only; use evaluate_intro_objectives",
            cfg.id
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for id in ScenarioId::ALL {
            assert_eq!(id.name().parse::<ScenarioId>().unwrap(), id);
        }
        assert!("nope".parse::<ScenarioId>().is_err());
    }

    #[test]
    fn incomplete_market_is_rejected() {
        let mut cfg = ScenarioConfig::preset(ScenarioId::JzMarket);
        cfg.b = 0.08;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn small_runs_are_rejected() {
        let mut cfg = ScenarioConfig::preset(ScenarioId::ZeroControl);
        cfg.n_paths = 50;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.n_paths = 100;
        cfg.steps = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn closed_form_grid_is_truncated() {
        let cfg = ScenarioConfig::preset(ScenarioId::ClosedForm);
        let g = cfg.grid().unwrap();
        assert!((g.horizon - 0.95).abs() < 1e-15);
    }
}
