//! Checks of the first-order optimality condition on a candidate control:
//! the pathwise Hamiltonian residual, the Gateaux derivative against finite
//! differences, and the duality between the adjoint and the variational state.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{terminal_condition, AdjointPair};
use crate::error::{Error, Result};
use crate::functional::{for_each_slice, pathwise_objective, running_slice, ObjectiveSpec, TiePolicy};
use crate::preference::PreferenceSpec;
use crate::sde::{simulate_perturbation, simulate_variational, ControlSpec, ModelSpec, PathEnsemble, PathField};
use crate::stats::{mean_and_se, trapezoid_weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Consistent,
    Violated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeResidual {
    pub t: f64,
    pub mean: f64,
    pub rms: f64,
    pub max_abs: f64,
    /// paths with ū ≠ 0 at this time
    pub included: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpReport {
    pub per_time: Vec<TimeResidual>,
    pub overall_rms: f64,
    pub pooled_std_error: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
    /// share of (time, path) points with ū = 0, where the condition says nothing
    pub excluded_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpOptions {
    pub ties: TiePolicy,
    pub min_tolerance: f64,
    pub se_multiple: f64,
}

impl Default for MpOptions {
    fn default() -> Self {
        Self {
            ties: TiePolicy::DeterministicLimit,
            min_tolerance: 1e-2,
            se_multiple: 5.0,
        }
    }
}

/// p·b_u + q·σ_u on every path and grid point.
pub fn drift_residual(ens: &PathEnsemble, adj: &AdjointPair, model: &ModelSpec) -> Result<PathField> {
    adj.check_aligned(ens)?;
    let rows = (0..ens.grid.points())
        .map(|k| {
            let t = ens.grid.t(k);
            let (x, u, p, q) = (ens.x.row(k), ens.u.row(k), adj.p.row(k), adj.q.row(k));
            (0..ens.n_paths)
                .map(|i| {
                    let c = model.coefficients(t, u[i], x[i]);
                    p[i] * c.b_u + q[i] * c.sigma_u
                })
                .collect()
        })
        .collect();
    PathField::from_rows(rows)
}

/// Residual of p·b_u + q·σ_u + ∂_u(running integrand) on {ū ≠ 0}, for grid
/// times before the horizon.
pub fn mp_residual(
    ens: &PathEnsemble,
    adj: &AdjointPair,
    model: &ModelSpec,
    pref: &PreferenceSpec,
    spec: &ObjectiveSpec,
    opts: &MpOptions,
) -> Result<MpReport> {
    let drift = drift_residual(ens, adj, model)?;
    let per_time = (0..ens.grid.steps)
        .into_par_iter()
        .map(|k| {
            let u = ens.u.row(k);
            let s = running_slice(u, ens.x.row(k), pref, spec, opts.ties)?;
            let r: Vec<f64> = (0..ens.n_paths)
                .filter(|&i| u[i] != 0.0)
                .map(|i| drift.get(k, i) + s.du[i])
                .collect();
            let (mean, se) = mean_and_se(&r);
            let ss: f64 = r.iter().map(|v| v * v).sum();
            let max_abs = r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let rms = if r.is_empty() { 0.0 } else { (ss / r.len() as f64).sqrt() };
            Ok((
                TimeResidual {
                    t: ens.grid.t(k),
                    mean,
                    rms,
                    max_abs,
                    included: r.len(),
                },
                ss,
                se,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let total = ens.grid.steps * ens.n_paths;
    let included: usize = per_time.iter().map(|(t, _, _)| t.included).sum();
    let ss: f64 = per_time.iter().map(|(_, s, _)| s).sum();
    let overall_rms = if included == 0 { 0.0 } else { (ss / included as f64).sqrt() };
    let pooled_std_error = if per_time.is_empty() {
        0.0
    } else {
        (per_time.iter().map(|(_, _, se)| se * se).sum::<f64>() / per_time.len() as f64).sqrt()
    };
    let tolerance = opts.min_tolerance.max(opts.se_multiple * pooled_std_error);
    Ok(MpReport {
        per_time: per_time.into_iter().map(|(t, _, _)| t).collect(),
        overall_rms,
        pooled_std_error,
        tolerance,
        verdict: if overall_rms <= tolerance {
            Verdict::Consistent
        } else {
            Verdict::Violated
        },
        excluded_fraction: if total == 0 {
            0.0
        } else {
            (total - included) as f64 / total as f64
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdEntry {
    pub eps: f64,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateauxReport {
    pub analytic: f64,
    pub analytic_std_error: f64,
    pub finite_diff: Vec<FdEntry>,
    pub extrapolated: f64,
    pub extrapolated_std_error: f64,
    pub abs_gap: f64,
    /// std error of the pathwise difference between extrapolation and analytic value
    pub gap_std_error: f64,
    /// successive finite differences move by no more than the previous step plus 3 std errors
    pub ladder_consistent: bool,
}

impl GateauxReport {
    pub fn gap_within(&self, rel: f64) -> bool {
        self.abs_gap <= (3.0 * self.gap_std_error).max(rel * self.analytic.abs())
    }
}

fn check_ladder(eps: &[f64]) -> Result<()> {
    if eps.is_empty() {
        return Err(Error::config("empty ε ladder"));
    }
    if eps.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
        return Err(Error::config("ε values must lie in (0, 1)"));
    }
    if eps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::config("ε ladder must be strictly decreasing"));
    }
    Ok(())
}

fn check_sign_compatible(u: &PathField, v: &PathField) -> Result<()> {
    for (j, (&a, &b)) in u.data().iter().zip(v.data()).enumerate() {
        if b != 0.0 && (a == 0.0 || a.signum() != b.signum()) {
            return Err(Error::config(format!(
                "direction {b} does not share the sign of the base control {a} (flat index {j})"
            )));
        }
    }
    Ok(())
}

/// Directional derivative of the objective at the ensemble's control along `direction`.
///
/// The analytic side is E Σ_k τ_k(∂_u R·v + ∂_x R·Z) + E[p_T Z_T], with Z the
/// variational state. Finite differences perturb the control to ū + εv and
/// the state to X̄ + D^ε on the same increments.
pub fn gateaux_fd(
    ens: &PathEnsemble,
    model: &ModelSpec,
    pref: &PreferenceSpec,
    spec: &ObjectiveSpec,
    direction: &ControlSpec,
    eps_ladder: &[f64],
) -> Result<GateauxReport> {
    check_ladder(eps_ladder)?;
    let v = direction.evaluate_on(&ens.grid, &ens.x)?;
    check_sign_compatible(&ens.u, &v)?;
    let ties = TiePolicy::Midpoint;
    let n = ens.n_paths;

    let zens = simulate_variational(ens, model, direction)?;
    let z = zens.z.as_ref().expect("variational state");
    let tw = trapezoid_weights(ens.grid.points(), ens.grid.dt());
    let pt = terminal_condition(ens, pref)?;
    let mut analytic = vec![0.0; n];
    for_each_slice(ens, pref, spec, ties, |k, s| {
        let (vk, zk) = (v.row(k), z.row(k));
        for i in 0..n {
            analytic[i] += tw[k] * (s.du[i] * vk[i] + s.dx[i] * zk[i]);
        }
    })?;
    let zt = z.row(ens.grid.steps);
    for i in 0..n {
        analytic[i] += pt[i] * zt[i];
    }
    drop(zens);

    let base = pathwise_objective(ens, pref, spec, ties)?;
    let mut diffs: Vec<Vec<f64>> = Vec::with_capacity(eps_ladder.len());
    for &eps in eps_ladder {
        let pert = simulate_perturbation(ens, model, direction, eps)?;
        let j = pathwise_objective(&pert, pref, spec, ties)?;
        diffs.push(j.iter().zip(&base).map(|(a, b)| (a - b) / eps).collect());
    }
    let finite_diff: Vec<FdEntry> = eps_ladder
        .iter()
        .zip(&diffs)
        .map(|(&eps, d)| {
            let (value, std_error) = mean_and_se(d);
            FdEntry { eps, value, std_error }
        })
        .collect();

    let m = diffs.len();
    let extrap: Vec<f64> = if m >= 2 {
        // Richardson for an O(ε) error: (r·D(ε₂) − D(ε₁)) / (r − 1), r = ε₁/ε₂
        let r = eps_ladder[m - 2] / eps_ladder[m - 1];
        diffs[m - 1]
            .iter()
            .zip(&diffs[m - 2])
            .map(|(a, b)| (r * a - b) / (r - 1.0))
            .collect()
    } else {
        diffs[0].clone()
    };
    let (extrapolated, extrapolated_std_error) = mean_and_se(&extrap);
    let (analytic_mean, analytic_std_error) = mean_and_se(&analytic);
    let gap: Vec<f64> = extrap.iter().zip(&analytic).map(|(a, b)| a - b).collect();
    let (gap_mean, gap_std_error) = mean_and_se(&gap);

    let ladder_consistent = (2..m).all(|j| {
        let prev: Vec<f64> = diffs[j - 1].iter().zip(&diffs[j - 2]).map(|(a, b)| a - b).collect();
        let next: Vec<f64> = diffs[j].iter().zip(&diffs[j - 1]).map(|(a, b)| a - b).collect();
        let (dp, _) = mean_and_se(&prev);
        let (dn, se) = mean_and_se(&next);
        dn.abs() <= dp.abs() + 3.0 * se
    });

    Ok(GateauxReport {
        analytic: analytic_mean,
        analytic_std_error,
        finite_diff,
        extrapolated,
        extrapolated_std_error,
        abs_gap: gap_mean.abs(),
        gap_std_error,
        ladder_consistent,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    /// E[p_T Z_T]
    pub lhs: f64,
    /// E Σ_k Δt [v(p b_u + q σ_u) − Z ∂_x R]
    pub rhs: f64,
    pub gap: f64,
    /// std error of the pathwise difference of the two sides
    pub std_error: f64,
}

impl DualityReport {
    pub fn within(&self, k: f64) -> bool {
        self.gap <= k * self.std_error
    }
}

/// Compares both sides of the duality between p and the variational state Z,
/// on the same paths. When the objective has a running reward depending on x,
/// its x-derivative enters the adjoint drift and hence the right-hand side.
/// The time integral uses the trapezoidal rule on the grid; the Euler-stepped Z
/// still leaves an O(Δt) bias that grows with the size of b_x = ∂_x b along ū.
pub fn duality_check(
    ens: &PathEnsemble,
    adj: &AdjointPair,
    model: &ModelSpec,
    pref: &PreferenceSpec,
    spec: &ObjectiveSpec,
    direction: &ControlSpec,
    ties: TiePolicy,
) -> Result<DualityReport> {
    let z = ens
        .z
        .as_ref()
        .ok_or_else(|| Error::data("duality check needs the variational state on the ensemble"))?;
    adj.check_aligned(ens)?;
    let v = direction.evaluate_on(&ens.grid, &ens.x)?;
    let n = ens.n_paths;
    let dt = ens.grid.dt();
    let steps = ens.grid.steps;
    let weights = trapezoid_weights(ens.grid.points(), dt);
    let mut rhs = vec![0.0; n];
    for (k, &wk) in weights.iter().enumerate() {
        let t = ens.grid.t(k);
        let (x, u, p, q, vk, zk) = (ens.x.row(k), ens.u.row(k), adj.p.row(k), adj.q.row(k), v.row(k), z.row(k));
        let src = running_slice(u, x, pref, spec, ties)?.dx;
        for i in 0..n {
            let c = model.coefficients(t, u[i], x[i]);
            rhs[i] += wk * (vk[i] * (p[i] * c.b_u + q[i] * c.sigma_u) - zk[i] * src[i]);
        }
    }
    let (pt, zt) = (adj.p.row(steps), z.row(steps));
    let diff: Vec<f64> = (0..n).map(|i| pt[i] * zt[i] - rhs[i]).collect();
    let lhs: Vec<f64> = (0..n).map(|i| pt[i] * zt[i]).collect();
    let (gap, std_error) = mean_and_se(&diff);
    Ok(DualityReport {
        lhs: mean_and_se(&lhs).0,
        rhs: mean_and_se(&rhs).0,
        gap: gap.abs(),
        std_error,
    })
}
