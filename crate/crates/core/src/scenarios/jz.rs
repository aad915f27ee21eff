//! Complete market with a distorted terminal objective: optimal terminal
//! wealth as a decreasing function of the pricing kernel, the budget
//! multiplier λ, and the replicating wealth/portfolio on the grid.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::empirical::SampleSet;
use crate::error::{Error, Result};
use crate::preference::{DistortionFn, PreferenceSpec, UtilityFn};
use crate::sde::{simulate_pricing_kernel, PathEnsemble, PathField, TimeGrid};
use crate::stats::mean;

use super::ScenarioConfig;

/// Law of ρ_T = exp(−(r + θ²/2)T − θW_T).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelLaw {
    pub r: f64,
    pub theta: f64,
    pub horizon: f64,
}

impl KernelLaw {
    pub fn mean_log(&self) -> f64 {
        -(self.r + 0.5 * self.theta * self.theta) * self.horizon
    }

    pub fn sd_log(&self) -> f64 {
        self.theta.abs() * self.horizon.sqrt()
    }

    pub fn cdf(&self, rho: f64) -> f64 {
        if !(rho > 0.0) {
            return 0.0;
        }
        let (m, s) = (self.mean_log(), self.sd_log());
        if s == 0.0 {
            // point mass at e^m; compare in log space to absorb rounding
            return if rho.ln() >= m - 1e-12 { 1.0 } else { 0.0 };
        }
        Normal::new(m, s).expect("positive sd").cdf(rho.ln())
    }
}

/// X̄_T = (l′)⁻¹(λρ_T / w′(F_ρ(ρ_T))) pathwise.
pub fn jz_terminal_wealth(
    rho_t: &[f64],
    lambda: f64,
    l: &UtilityFn,
    w: &DistortionFn,
    law: &KernelLaw,
) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::domain(format!("budget multiplier must be positive, got {lambda}")));
    }
    rho_t.iter().map(|&r| terminal_map(r, lambda, l, w, law)).collect()
}

fn terminal_map(rho: f64, lambda: f64, l: &UtilityFn, w: &DistortionFn, law: &KernelLaw) -> Result<f64> {
    l.inverse_marginal(lambda * rho / w.derivative(law.cdf(rho))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSolution {
    pub lambda: f64,
    /// |E[ρ_T X̄_T] − x0| / x0 at the returned λ
    pub relative_error: f64,
    pub iterations: usize,
    pub bracket: (f64, f64),
}

/// Bisection on log λ over [1e−8, 1e8] for E[ρ_T X̄_T] = x0, the expectation
/// being the sample mean over `rho_t`.
pub fn solve_budget_lambda(
    rho_t: &[f64],
    x0: f64,
    l: &UtilityFn,
    w: &DistortionFn,
    law: &KernelLaw,
) -> Result<BudgetSolution> {
    if !(x0 > 0.0) {
        return Err(Error::domain("initial wealth must be positive"));
    }
    let budget = |lambda: f64| -> Result<f64> {
        let x = jz_terminal_wealth(rho_t, lambda, l, w, law)?;
        let terms: Vec<f64> = x.iter().zip(rho_t).map(|(a, b)| a * b).collect();
        Ok(mean(&terms))
    };
    let (mut lo, mut hi) = (1e-8_f64.ln(), 1e8_f64.ln());
    let (b_lo, b_hi) = (budget(lo.exp())?, budget(hi.exp())?);
    if !(b_lo >= x0 && b_hi <= x0) {
        return Err(Error::numerical(format!(
            "no budget bracket in [1e-8, 1e8]: E[ρX] ranges over [{b_hi:.3e}, {b_lo:.3e}] for x0 = {x0}"
        )));
    }
    let mut iterations = 0;
    let mut mid = 0.5 * (lo + hi);
    let mut err = f64::INFINITY;
    while iterations < 200 {
        mid = 0.5 * (lo + hi);
        let b = budget(mid.exp())?;
        err = (b - x0).abs() / x0;
        iterations += 1;
        if err <= 1e-12 || hi - lo <= 1e-15 {
            break;
        }
        if b > x0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if err > 1e-4 {
        return Err(Error::numerical(format!("budget bisection stalled at relative error {err:.3e}")));
    }
    Ok(BudgetSolution {
        lambda: mid.exp(),
        relative_error: err,
        iterations,
        bracket: (1e-8, 1e8),
    })
}

#[derive(Debug, Clone)]
pub struct JzSolution {
    /// optimal wealth and portfolio with ρ attached
    pub ensemble: PathEnsemble,
    pub budget: BudgetSolution,
    pub law: KernelLaw,
    /// max over paths of |F_ρ(ρ_T) − (1 − F̂(X̄_T))|
    pub pit_gap: f64,
}

const QUAD_NODES: usize = 321;
const QUAD_HALF_WIDTH: f64 = 8.0;
const TABLE_NODES: usize = 401;

fn lerp_table(ys: &[f64], vals: &[f64], y: f64) -> f64 {
    let h = ys[1] - ys[0];
    let pos = ((y - ys[0]) / h).clamp(0.0, (ys.len() - 1) as f64);
    let j = (pos.floor() as usize).min(ys.len() - 2);
    let f = pos - j as f64;
    vals[j] * (1.0 - f) + vals[j + 1] * f
}

pub(super) fn solve(
    cfg: &ScenarioConfig,
    grid: &TimeGrid,
    dw: Arc<PathField>,
    pref: &PreferenceSpec,
) -> Result<JzSolution> {
    let (l, w) = (&pref.terminal_l, &pref.terminal_w);
    let law = KernelLaw {
        r: cfg.r,
        theta: cfg.theta,
        horizon: cfg.horizon,
    };
    let rho = simulate_pricing_kernel(grid, cfg.r, cfg.theta, &dw);
    let steps = grid.steps;
    let budget = solve_budget_lambda(rho.row(steps), cfg.x0, l, w, &law)?;
    let lambda = budget.lambda;
    let big_g = |y: f64| terminal_map(y.exp(), lambda, l, w, &law);

    // Gaussian quadrature nodes on [−8, 8], trapezoid weights normalized to 1
    let dz = 2.0 * QUAD_HALF_WIDTH / (QUAD_NODES - 1) as f64;
    let zs: Vec<f64> = (0..QUAD_NODES).map(|m| -QUAD_HALF_WIDTH + m as f64 * dz).collect();
    let mut ws: Vec<f64> = zs.iter().map(|z| (-0.5 * z * z).exp()).collect();
    let total: f64 = ws.iter().sum();
    ws.iter_mut().for_each(|v| *v /= total);

    let n = dw.n_paths();
    let drift = -(cfg.r + 0.5 * cfg.theta * cfg.theta);
    let rows = (0..grid.points())
        .into_par_iter()
        .map(|k| -> Result<(Vec<f64>, Vec<f64>)> {
            let logs: Vec<f64> = rho.row(k).iter().map(|v| v.ln()).collect();
            if k == steps {
                let h = 1e-5;
                return logs
                    .iter()
                    .map(|&y| {
                        let g = big_g(y)?;
                        let gy = (big_g(y + h)? - big_g(y - h)?) / (2.0 * h);
                        Ok((g, -cfg.theta * gy / (cfg.sigma * g)))
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(|v| v.into_iter().unzip());
            }
            let tau = grid.horizon - grid.t(k);
            let s = cfg.theta.abs() * tau.sqrt();
            let lo = logs.iter().fold(f64::INFINITY, |m, v| m.min(*v)) - 0.05;
            let hi = logs.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)) + 0.05;
            let ys: Vec<f64> = (0..TABLE_NODES)
                .map(|j| lo + (hi - lo) * j as f64 / (TABLE_NODES - 1) as f64)
                .collect();
            // g(y) = E[ρ_T X̄_T | ρ_t = e^y] / e^y
            let g = ys
                .iter()
                .map(|&y| {
                    zs.iter().zip(&ws).try_fold(0.0, |acc, (&z, &wt)| {
                        let d = drift * tau + s * z;
                        Ok(acc + wt * d.exp() * big_g(y + d)?)
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            let hy = ys[1] - ys[0];
            let gy: Vec<f64> = (0..TABLE_NODES)
                .map(|j| {
                    let (a, b) = (j.saturating_sub(1), (j + 1).min(TABLE_NODES - 1));
                    (g[b] - g[a]) / ((b - a) as f64 * hy)
                })
                .collect();
            Ok(logs
                .iter()
                .map(|&y| {
                    let x = lerp_table(&ys, &g, y);
                    (x, -cfg.theta * lerp_table(&ys, &gy, y) / (cfg.sigma * x))
                })
                .unzip())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut x = PathField::zeros(grid.points(), n);
    let mut u = PathField::zeros(grid.points(), n);
    for (k, (xr, ur)) in rows.into_iter().enumerate() {
        x.row_mut(k).copy_from_slice(&xr);
        u.row_mut(k).copy_from_slice(&ur);
    }

    let xt = SampleSet::new(x.row(steps).to_vec())?;
    let pit_gap = rho
        .row(steps)
        .iter()
        .zip(xt.self_pit())
        .fold(0.0_f64, |m, (&r, f)| m.max((law.cdf(r) - (1.0 - f)).abs()));

    let mut ensemble = PathEnsemble::from_parts(*grid, cfg.seed, dw, x, u)?;
    ensemble.rho = Some(Arc::new(rho));
    Ok(JzSolution {
        ensemble,
        budget,
        law,
        pit_gap,
    })
}
