//! The adjoint pair (p, q): closed forms for the worked examples and a
//! least-squares Monte Carlo backward induction for Markov controls.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::{running_slice, terminal_weights, ObjectiveSpec, TiePolicy};
use crate::preference::PreferenceSpec;
use crate::sde::{AffineRate, ModelSpec, PathEnsemble, PathField};
use crate::stats::mean_and_se;

/// Largest admissible condition number of the regression Gram matrix.
pub const MAX_GRAM_CONDITION: f64 = 1e12;
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjointMethod {
    Analytic,
    Lsmc,
}

#[derive(Debug, Clone)]
pub struct AdjointPair {
    pub p: Arc<PathField>,
    pub q: Arc<PathField>,
    pub method: AdjointMethod,
    pub basis_degree: Option<usize>,
    /// Worst Gram condition number met during the regressions.
    pub max_condition: Option<f64>,
}

impl AdjointPair {
    pub fn check_aligned(&self, ens: &PathEnsemble) -> Result<()> {
        let rows = ens.grid.points();
        for f in [&self.p, &self.q] {
            if f.n_rows() != rows || f.n_paths() != ens.n_paths {
                return Err(Error::data(format!(
                    "adjoint is {}x{} but the ensemble is {}x{}",
                    f.n_rows(),
                    f.n_paths(),
                    rows,
                    ens.n_paths
                )));
            }
        }
        Ok(())
    }
}

/// p_T = l′(X_T)·w′(1 − F̂(X_T)) with the midpoint-rank ECDF of the terminal cross-section.
pub fn terminal_condition(ens: &PathEnsemble, pref: &PreferenceSpec) -> Result<Vec<f64>> {
    let xt = ens.x.row(ens.grid.steps);
    if let Some(v) = xt.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::domain(format!("terminal state {v} is not positive")));
    }
    let w = terminal_weights(xt, &pref.terminal_w);
    xt.iter()
        .zip(w)
        .map(|(&x, w)| Ok(pref.terminal_l.marginal(x)? * w))
        .collect()
}

/// Worked examples with a closed-form adjoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "example", rename_all = "snake_case")]
pub enum AnalyticExample {
    /// Complete market: p = λρ, q = −λρθ.
    JzMarket { lambda: f64, r: f64, theta: f64 },
    /// No terminal term and a control-only running reward: p = q = 0.
    ZeroControl,
    /// Stake model with unit running reward in x: p = T − t, q = 0, where
    /// `horizon` is the nominal horizon (the grid may stop short of it).
    ClosedForm { horizon: f64 },
}

fn stake_model(model: &ModelSpec) -> bool {
    matches!(model, ModelSpec::LinearInX { drift, vol }
        if *drift == AffineRate::new(0.0, -1.0) && *vol == AffineRate::new(1.0, 0.0))
}

pub fn solve_adjoint_analytic(
    example: AnalyticExample,
    ens: &PathEnsemble,
    model: &ModelSpec,
) -> Result<AdjointPair> {
    let rows = ens.grid.points();
    let n = ens.n_paths;
    let (p, q) = match example {
        AnalyticExample::JzMarket { lambda, r, theta } => {
            let ModelSpec::LinearInX { drift, vol } = model else {
                return Err(Error::config("market example needs a linear-in-x model"));
            };
            if drift.c0 != r || vol.c0 != 0.0 {
                return Err(Error::config("model is not the complete-market wealth equation"));
            }
            let rho = ens
                .rho
                .as_ref()
                .ok_or_else(|| Error::config("market example needs the pricing kernel on the ensemble"))?;
            (rho.map(|v| lambda * v), rho.map(|v| -lambda * theta * v))
        }
        AnalyticExample::ZeroControl => {
            if !model.zero_at_zero() {
                return Err(Error::config("zero-control example needs b(t,u,0) = σ(t,u,0) = 0"));
            }
            (PathField::zeros(rows, n), PathField::zeros(rows, n))
        }
        AnalyticExample::ClosedForm { horizon } => {
            if !stake_model(model) {
                return Err(Error::config("closed-form example needs b = −u·x, σ = x"));
            }
            if horizon < ens.grid.horizon {
                return Err(Error::config("nominal horizon is shorter than the grid"));
            }
            let mut p = PathField::zeros(rows, n);
            for k in 0..rows {
                let v = horizon - ens.grid.t(k);
                p.row_mut(k).fill(v);
            }
            (p, PathField::zeros(rows, n))
        }
    };
    Ok(AdjointPair {
        p: Arc::new(p),
        q: Arc::new(q),
        method: AdjointMethod::Analytic,
        basis_degree: None,
        max_condition: None,
    })
}

/// Least-squares projection onto polynomials in standardized log X.
struct Regressor {
    z: Vec<f64>,
    degree: usize,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    condition: f64,
}

impl Regressor {
    fn new(x: &[f64], degree: usize) -> Result<Self> {
        let logs: Vec<f64> = x.iter().map(|v| v.ln()).collect();
        let (m, se) = mean_and_se(&logs);
        let sd = se * (logs.len() as f64).sqrt();
        // a state that is (numerically) the same on every path carries no information
        let degree = if sd <= 1e-12 * (1.0 + m.abs()) { 0 } else { degree };
        let z: Vec<f64> = if degree == 0 {
            vec![0.0; logs.len()]
        } else {
            logs.iter().map(|l| (l - m) / sd).collect()
        };
        let d = degree + 1;
        let partial: Vec<Vec<f64>> = z
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = vec![0.0; d * d];
                let mut pw = vec![0.0; 2 * d - 1];
                for &zi in chunk {
                    pw[0] = 1.0;
                    for j in 1..pw.len() {
                        pw[j] = pw[j - 1] * zi;
                    }
                    for a in 0..d {
                        for b in 0..d {
                            g[a * d + b] += pw[a + b];
                        }
                    }
                }
                g
            })
            .collect();
        let mut gram = DMatrix::<f64>::zeros(d, d);
        for g in &partial {
            for a in 0..d {
                for b in 0..d {
                    gram[(a, b)] += g[a * d + b];
                }
            }
        }
        let eig = gram.clone().symmetric_eigen();
        let hi = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let lo = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if condition > MAX_GRAM_CONDITION {
            return Err(Error::numerical(format!(
                "rank-deficient regression: Gram condition number {condition:.3e} (degree {degree})"
            )));
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::numerical("regression Gram matrix is not positive definite"))?;
        Ok(Self {
            z,
            degree,
            chol,
            condition,
        })
    }

    fn fit(&self, y: &[f64]) -> Vec<f64> {
        let d = self.degree + 1;
        let partial: Vec<Vec<f64>> = self
            .z
            .par_chunks(CHUNK)
            .zip(y.par_chunks(CHUNK))
            .map(|(zc, yc)| {
                let mut r = vec![0.0; d];
                for (&zi, &yi) in zc.iter().zip(yc) {
                    let mut pw = 1.0;
                    for rj in r.iter_mut() {
                        *rj += pw * yi;
                        pw *= zi;
                    }
                }
                r
            })
            .collect();
        let mut rhs = DVector::<f64>::zeros(d);
        for r in &partial {
            for j in 0..d {
                rhs[j] += r[j];
            }
        }
        let c = self.chol.solve(&rhs);
        self.z
            .iter()
            .map(|&zi| {
                // Horner
                let mut v = 0.0;
                for j in (0..d).rev() {
                    v = v * zi + c[j];
                }
                v
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsmcOptions {
    pub basis_degree: usize,
    /// Tie handling for the running-reward source term.
    pub ties: TiePolicy,
}

impl Default for LsmcOptions {
    fn default() -> Self {
        Self {
            basis_degree: 3,
            ties: TiePolicy::Midpoint,
        }
    }
}

/// Backward induction for
/// dp = −(b_x p + σ_x q + ∂_x R) dt + q dW,  p_T = l′(X_T)w′(1 − F̂(X_T)),
/// where R is the running integrand of the objective.
///
/// q_i regresses (p_{i+1} − Ê[p_{i+1} | X_i])·ΔW_i/Δt (the centring is a control
/// variate: it leaves the conditional expectation unchanged), and the drift is
/// taken implicitly in p:
/// p_i = Ê[(p_{i+1} + (σ_x q_i + ∂_x R)Δt) / (1 − b_x Δt) | X_i].
pub fn solve_adjoint_lsmc(
    ens: &PathEnsemble,
    model: &ModelSpec,
    pref: &PreferenceSpec,
    spec: &ObjectiveSpec,
    opts: &LsmcOptions,
) -> Result<AdjointPair> {
    let n = ens.n_paths;
    let deg = opts.basis_degree;
    if n < 10 * (deg + 1) {
        return Err(Error::config(format!(
            "LSMC with degree {deg} needs at least {} paths, got {n}",
            10 * (deg + 1)
        )));
    }
    let steps = ens.grid.steps;
    let dt = ens.grid.dt();
    let rows = ens.grid.points();
    let mut p = PathField::zeros(rows, n);
    let mut q = PathField::zeros(rows, n);
    p.row_mut(steps).copy_from_slice(&terminal_condition(ens, pref)?);
    let mut worst: f64 = 0.0;

    for i in (0..steps).rev() {
        let t = ens.grid.t(i);
        let (xi, ui, dwi) = (ens.x.row(i), ens.u.row(i), ens.dw.row(i));
        let reg = Regressor::new(xi, deg)?;
        worst = worst.max(reg.condition);
        let src = running_slice(ui, xi, pref, spec, opts.ties)?.dx;

        let next = p.row(i + 1).to_vec();
        let level = reg.fit(&next);
        let centred: Vec<f64> = next
            .iter()
            .zip(&level)
            .zip(dwi)
            .map(|((a, m), w)| (a - m) * w / dt)
            .collect();
        let qi = reg.fit(&centred);
        let target: Vec<f64> = (0..n)
            .map(|j| {
                let c = model.coefficients(t, ui[j], xi[j]);
                (next[j] + (c.sigma_x * qi[j] + src[j]) * dt) / (1.0 - c.b_x * dt)
            })
            .collect();
        let pi = reg.fit(&target);
        p.row_mut(i).copy_from_slice(&pi);
        q.row_mut(i).copy_from_slice(&qi);
    }
    // q at the terminal point is never used; carry the last fitted value
    if steps > 0 {
        let last = q.row(steps - 1).to_vec();
        q.row_mut(steps).copy_from_slice(&last);
    }
    Ok(AdjointPair {
        p: Arc::new(p),
        q: Arc::new(q),
        method: AdjointMethod::Lsmc,
        basis_degree: Some(deg),
        max_condition: Some(worst),
    })
}

/// Per-step (mean, std error) of p_{i+1} − p_i + (b_x p_i + σ_x q_i)Δt − q_iΔW_i,
/// the discrete martingale increment of an adjoint without running source.
pub fn martingale_increments(
    ens: &PathEnsemble,
    model: &ModelSpec,
    pair: &AdjointPair,
) -> Result<Vec<(f64, f64)>> {
    pair.check_aligned(ens)?;
    let dt = ens.grid.dt();
    Ok((0..ens.grid.steps)
        .map(|i| {
            let t = ens.grid.t(i);
            let (p0, p1, qi) = (pair.p.row(i), pair.p.row(i + 1), pair.q.row(i));
            let (xi, ui, dwi) = (ens.x.row(i), ens.u.row(i), ens.dw.row(i));
            let r: Vec<f64> = (0..ens.n_paths)
                .map(|j| {
                    let c = model.coefficients(t, ui[j], xi[j]);
                    p1[j] - p0[j] + (c.b_x * p0[j] + c.sigma_x * qi[j]) * dt - qi[j] * dwi[j]
                })
                .collect();
            mean_and_se(&r)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::ControlTransform;
    use crate::preference::{DistortionFn, UtilityFn};
    use crate::sde::{simulate_pricing_kernel, simulate_state, ControlSpec, TimeGrid};

    fn pref_with(l: UtilityFn, w: DistortionFn) -> PreferenceSpec {
        PreferenceSpec {
            zeta_plus: UtilityFn::power(0.5).unwrap(),
            zeta_minus: UtilityFn::power(0.5).unwrap(),
            terminal_l: l,
            varpi_plus: DistortionFn::Identity,
            varpi_minus: DistortionFn::Identity,
            terminal_w: w,
        }
    }

    fn stake() -> ModelSpec {
        ModelSpec::linear(AffineRate::new(0.0, -1.0), AffineRate::new(1.0, 0.0))
    }

    #[test]
    fn identity_distortion_terminal_is_marginal_utility() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let ens = simulate_state(&stake(), &ControlSpec::constant(0.2), &g, 500, 1.0, 1).unwrap();
        let l = UtilityFn::power(0.5).unwrap();
        let pt = terminal_condition(&ens, &pref_with(l.clone(), DistortionFn::Identity)).unwrap();
        for (p, x) in pt.iter().zip(ens.x.row(10)) {
            assert_eq!(*p, l.marginal(*x).unwrap());
        }
    }

    #[test]
    fn constant_terminal_state_uses_midpoint_rank() {
        // σ ≡ 0, b ≡ 0: every path stays at x0
        let m = ModelSpec::linear(AffineRate::new(0.0, 0.0), AffineRate::new(0.0, 0.0));
        let g = TimeGrid::new(1.0, 4).unwrap();
        let n = 50;
        let ens = simulate_state(&m, &ControlSpec::constant(0.0), &g, n, 2.0, 1).unwrap();
        let w = DistortionFn::lopes(0.4, 1.0, 2.0).unwrap();
        let l = UtilityFn::power(0.5).unwrap();
        let pt = terminal_condition(&ens, &pref_with(l.clone(), w.clone())).unwrap();
        let expected = l.marginal(2.0).unwrap() * w.derivative(0.5 / n as f64).unwrap();
        assert!(pt.iter().all(|p| (p - expected).abs() < 1e-15));
    }

    #[test]
    fn closed_form_adjoint_values() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let ens = simulate_state(&stake(), &ControlSpec::constant(0.3), &g, 20, 1.0, 2).unwrap();
        let pair = solve_adjoint_analytic(AnalyticExample::ClosedForm { horizon: 1.0 }, &ens, &stake()).unwrap();
        assert!(pair.p.row(2).iter().all(|p| *p == 0.75));
        assert!(pair.q.data().iter().all(|q| *q == 0.0));
        let wrong = ModelSpec::linear(AffineRate::new(0.1, 0.0), AffineRate::new(0.2, 0.0));
        assert!(matches!(
            solve_adjoint_analytic(AnalyticExample::ClosedForm { horizon: 1.0 }, &ens, &wrong),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn market_adjoint_without_risk_premium() {
        let r = 0.03;
        let m = ModelSpec::linear(AffineRate::new(r, 0.0), AffineRate::new(0.0, 0.2));
        let g = TimeGrid::new(1.0, 10).unwrap();
        let mut ens = simulate_state(&m, &ControlSpec::constant(0.5), &g, 30, 1.0, 4).unwrap();
        let ex = AnalyticExample::JzMarket { lambda: 2.0, r, theta: 0.0 };
        assert!(matches!(solve_adjoint_analytic(ex, &ens, &m), Err(Error::Config(_))));
        ens.rho = Some(Arc::new(simulate_pricing_kernel(&g, r, 0.0, &ens.dw)));
        let pair = solve_adjoint_analytic(ex, &ens, &m).unwrap();
        for k in 0..=10 {
            let exact = 2.0 * (-r * g.t(k)).exp();
            assert!(pair.p.row(k).iter().all(|p| (p - exact).abs() < 1e-14));
        }
        assert!(pair.q.data().iter().all(|q| *q == 0.0));
    }

    #[test]
    fn zero_terminal_data_gives_zero_lsmc_adjoint() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let ens = simulate_state(&stake(), &ControlSpec::constant(0.5), &g, 2000, 1.0, 8).unwrap();
        let pref = pref_with(UtilityFn::zero(), DistortionFn::Identity);
        let spec = ObjectiveSpec { transform: ControlTransform::RawU, extra_f: None };
        let pair = solve_adjoint_lsmc(&ens, &stake(), &pref, &spec, &LsmcOptions::default()).unwrap();
        assert!(pair.p.data().iter().all(|v| v.abs() <= 1e-10));
        assert!(pair.q.data().iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn lsmc_needs_enough_paths() {
        let g = TimeGrid::new(1.0, 5).unwrap();
        let ens = simulate_state(&stake(), &ControlSpec::constant(0.5), &g, 30, 1.0, 8).unwrap();
        let pref = pref_with(UtilityFn::zero(), DistortionFn::Identity);
        let r = solve_adjoint_lsmc(&ens, &stake(), &pref, &ObjectiveSpec::default(), &LsmcOptions::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn lsmc_is_invariant_to_rescaling_the_state() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let m = ModelSpec::linear(AffineRate::new(0.05, 0.0), AffineRate::new(0.3, 0.0));
        let a = simulate_state(&m, &ControlSpec::constant(0.0), &g, 3000, 1.0, 5).unwrap();
        let b = simulate_state(&m, &ControlSpec::constant(0.0), &g, 3000, 7.0, 5).unwrap();
        // l = x^{1/2}: p scales by 7^{-1/2}
        let pref = pref_with(UtilityFn::monomial(0.5).unwrap(), DistortionFn::Identity);
        let spec = ObjectiveSpec::default();
        let pa = solve_adjoint_lsmc(&a, &m, &pref, &spec, &LsmcOptions::default()).unwrap();
        let pb = solve_adjoint_lsmc(&b, &m, &pref, &spec, &LsmcOptions::default()).unwrap();
        let s = 7.0_f64.sqrt();
        for (x, y) in pa.p.data().iter().zip(pb.p.data()) {
            assert!((x - s * y).abs() < 1e-9 * x.abs().max(1.0));
        }
    }
}
