//! Distorted (rank-dependent) expectations and the prospective functional.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::empirical::SampleSet;
use crate::error::{Error, Result};
use crate::preference::{DistortionFn, PreferenceSpec, UtilityFn};
use crate::sde::PathEnsemble;
use crate::stats::{mean_and_se, pairwise_sum, trapezoid_weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    OrderStat,
    Plugin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChoquetEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
    pub estimator: Estimator,
}

const ORDER_STAT_FOLDS: usize = 20;

fn check_nonnegative(samples: &SampleSet) -> Result<()> {
    match samples.values().iter().find(|v| **v < 0.0) {
        Some(v) => Err(Error::domain(format!("Choquet estimator got negative sample {v}"))),
        None => Ok(()),
    }
}

/// Decumulative order-statistic weights g(1 − (i−1)/n) − g(1 − i/n), i = 1..n.
pub fn order_stat_weights(n: usize, dist: &DistortionFn) -> Vec<f64> {
    let nf = n as f64;
    let levels: Vec<f64> = (0..=n).map(|i| dist.value_unchecked(1.0 - i as f64 / nf)).collect();
    levels.windows(2).map(|w| w[0] - w[1]).collect()
}

fn order_stat_value(sorted: &[f64], util: &UtilityFn, dist: &DistortionFn) -> Result<f64> {
    let weights = order_stat_weights(sorted.len(), dist);
    let terms = sorted
        .iter()
        .zip(&weights)
        .map(|(&x, &w)| Ok(util.value(x)? * w))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&terms))
}

/// Σᵢ util(x₍ᵢ₎)·[g(1−(i−1)/n) − g(1−i/n)] over the ascending order statistics.
/// The standard error comes from 20 contiguous folds of the input order.
pub fn choquet_order_stat(
    samples: &SampleSet,
    util: &UtilityFn,
    dist: &DistortionFn,
) -> Result<ChoquetEstimate> {
    check_nonnegative(samples)?;
    let value = order_stat_value(&samples.sorted_values(), util, dist)?;
    let n = samples.len();
    let folds = ORDER_STAT_FOLDS.min(n);
    let std_error = if folds < 2 {
        0.0
    } else {
        let fold_values = (0..folds)
            .map(|f| {
                let lo = f * n / folds;
                let hi = (f + 1) * n / folds;
                let mut part = samples.values()[lo..hi].to_vec();
                part.sort_by(f64::total_cmp);
                order_stat_value(&part, util, dist)
            })
            .collect::<Result<Vec<f64>>>()?;
        // se of the fold mean; the full-sample estimate has the same spread
        mean_and_se(&fold_values).1
    };
    Ok(ChoquetEstimate {
        value,
        std_error,
        n,
        estimator: Estimator::OrderStat,
    })
}

/// (1/n) Σᵢ util(xᵢ)·g′(1 − F̂(xᵢ)) with the midpoint-rank ECDF.
pub fn choquet_plugin(
    samples: &SampleSet,
    util: &UtilityFn,
    dist: &DistortionFn,
) -> Result<ChoquetEstimate> {
    check_nonnegative(samples)?;
    let pit = samples.self_pit();
    let terms = samples
        .values()
        .iter()
        .zip(&pit)
        .map(|(&x, &f)| Ok(util.value(x)? * dist.derivative_unchecked(1.0 - f)))
        .collect::<Result<Vec<f64>>>()?;
    let (value, std_error) = mean_and_se(&terms);
    Ok(ChoquetEstimate {
        value,
        std_error,
        n: samples.len(),
        estimator: Estimator::Plugin,
    })
}

/// What enters the running utilities: the control itself or the control times the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlTransform {
    #[default]
    RawU,
    UTimesX,
}

impl ControlTransform {
    #[inline]
    pub fn apply(self, u: f64, x: f64) -> f64 {
        match self {
            ControlTransform::RawU => u,
            ControlTransform::UTimesX => u * x,
        }
    }

    /// (∂y/∂u, ∂y/∂x) for y = apply(u, x).
    #[inline]
    pub fn partials(self, u: f64, x: f64) -> (f64, f64) {
        match self {
            ControlTransform::RawU => (1.0, 0.0),
            ControlTransform::UTimesX => (x, u),
        }
    }
}

/// Undistorted running reward f(t, u, x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunningReward {
    /// f = coef · x
    LinearInState { coef: f64 },
}

impl RunningReward {
    #[inline]
    pub fn value(&self, _u: f64, x: f64) -> f64 {
        match self {
            RunningReward::LinearInState { coef } => coef * x,
        }
    }

    /// (∂f/∂u, ∂f/∂x)
    #[inline]
    pub fn partials(&self, _u: f64, _x: f64) -> (f64, f64) {
        match self {
            RunningReward::LinearInState { coef } => (0.0, *coef),
        }
    }
}

/// Shape of the running part of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub transform: ControlTransform,
    pub extra_f: Option<RunningReward>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub running_plus: f64,
    pub running_minus: f64,
    pub terminal: f64,
    pub extra_running: f64,
    pub total: f64,
}

impl ObjectiveValue {
    pub fn new(running_plus: f64, running_minus: f64, terminal: f64, extra_running: f64) -> Self {
        Self {
            running_plus,
            running_minus,
            terminal,
            extra_running,
            total: running_plus - running_minus + terminal + extra_running,
        }
    }
}

/// How 1 − F̂ is formed for a cross-section whose nonzero part is a single value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TiePolicy {
    /// Midpoint ranks throughout; a constant sample sits at 1 − F̂ = 0.5/n.
    Midpoint,
    /// A constant sample is deterministic, so F = 1 and the weight is g′(0).
    DeterministicLimit,
}

/// Distortion weights g′(1 − F̂(y)) for the strictly positive entries of `y`;
/// zero entries get weight 0. Ranks are taken over all entries, so an atom at
/// zero counts in F̂ like any other mass.
pub fn positive_part_weights(y: &[f64], dist: &DistortionFn, ties: TiePolicy) -> Vec<f64> {
    let n = y.len();
    let mut weights = vec![0.0; n];
    let positives: Vec<f64> = y.iter().copied().filter(|v| *v > 0.0).collect();
    if positives.is_empty() {
        return weights;
    }
    let (lo, hi) = positives
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if ties == TiePolicy::DeterministicLimit && hi - lo <= 16.0 * f64::EPSILON * hi {
        let w = dist.derivative_unchecked(0.0);
        for (wi, &v) in weights.iter_mut().zip(y) {
            if v > 0.0 {
                *wi = w;
            }
        }
        return weights;
    }
    if dist.is_identity() {
        for (wi, &v) in weights.iter_mut().zip(y) {
            if v > 0.0 {
                *wi = 1.0;
            }
        }
        return weights;
    }
    let clipped: Vec<f64> = y.iter().map(|v| v.max(0.0)).collect();
    let set = SampleSet::new(clipped).expect("finite cross-section");
    for ((wi, &v), f) in weights.iter_mut().zip(y).zip(set.self_pit()) {
        if v > 0.0 {
            *wi = dist.derivative_unchecked(1.0 - f);
        }
    }
    weights
}

/// Pathwise pieces of the running integrand at one grid time.
#[derive(Debug, Clone, Default)]
pub struct RunningSlice {
    /// ζ₊(y⁺)·w₊
    pub gain: Vec<f64>,
    /// ζ₋(y⁻)·w₋
    pub loss: Vec<f64>,
    /// f(t, u, x), zero when absent
    pub extra: Vec<f64>,
    /// ∂/∂u of gain − loss + f
    pub du: Vec<f64>,
    /// ∂/∂x of gain − loss + f
    pub dx: Vec<f64>,
    /// paths with transformed control exactly zero
    pub zero_count: usize,
}

/// Evaluates the running integrand and its partials across the paths at one time.
/// Utility derivatives are only taken where the transformed control is nonzero.
pub fn running_slice(
    u: &[f64],
    x: &[f64],
    pref: &PreferenceSpec,
    spec: &ObjectiveSpec,
    ties: TiePolicy,
) -> Result<RunningSlice> {
    let n = u.len();
    let y: Vec<f64> = u.iter().zip(x).map(|(&u, &x)| spec.transform.apply(u, x)).collect();
    if y.iter().any(|v| v.is_nan()) {
        return Err(Error::data("NaN in running control samples"));
    }
    let y_minus: Vec<f64> = y.iter().map(|v| (-v).max(0.0)).collect();
    let w_plus = positive_part_weights(&y, &pref.varpi_plus, ties);
    let w_minus = positive_part_weights(&y_minus, &pref.varpi_minus, ties);

    let mut s = RunningSlice {
        gain: vec![0.0; n],
        loss: vec![0.0; n],
        extra: vec![0.0; n],
        du: vec![0.0; n],
        dx: vec![0.0; n],
        zero_count: 0,
    };
    for i in 0..n {
        let (dy_du, dy_dx) = spec.transform.partials(u[i], x[i]);
        let marginal = if y[i] > 0.0 {
            s.gain[i] = pref.zeta_plus.value(y[i])? * w_plus[i];
            pref.zeta_plus.marginal(y[i])? * w_plus[i]
        } else if y[i] < 0.0 {
            s.loss[i] = pref.zeta_minus.value(-y[i])? * w_minus[i];
            // d/dy of −ζ₋(−y) is +ζ₋′(y⁻)
            pref.zeta_minus.marginal(-y[i])? * w_minus[i]
        } else {
            s.zero_count += 1;
            0.0
        };
        s.du[i] = marginal * dy_du;
        s.dx[i] = marginal * dy_dx;
        if let Some(f) = &spec.extra_f {
            s.extra[i] = f.value(u[i], x[i]);
            let (fu, fx) = f.partials(u[i], x[i]);
            s.du[i] += fu;
            s.dx[i] += fx;
        }
    }
    Ok(s)
}

/// g′(1 − F̂(X_T)) for the terminal cross-section.
pub fn terminal_weights(x_terminal: &[f64], dist: &DistortionFn) -> Vec<f64> {
    positive_part_weights(x_terminal, dist, TiePolicy::Midpoint)
}

pub(crate) fn check_states(ens: &PathEnsemble) -> Result<()> {
    for (j, &v) in ens.x.data().iter().enumerate() {
        if v.is_nan() {
            return Err(Error::data(format!("NaN state at flat index {j}")));
        }
        if !(v > 0.0) {
            return Err(Error::domain(format!("nonpositive state {v} at flat index {j}")));
        }
    }
    if ens.u.data().iter().any(|v| v.is_nan()) {
        return Err(Error::data("NaN control in path ensemble"));
    }
    Ok(())
}

/// Per-time cross-sectional means of the running pieces: (gain, loss, extra).
pub(crate) fn running_means(
    ens: &PathEnsemble,
    pref: &PreferenceSpec,
    spec: &ObjectiveSpec,
    ties: TiePolicy,
) -> Result<Vec<(f64, f64, f64)>> {
    (0..ens.grid.points())
        .into_par_iter()
        .map(|k| {
            let s = running_slice(ens.u.row(k), ens.x.row(k), pref, spec, ties)?;
            let n = s.gain.len() as f64;
            Ok((
                pairwise_sum(&s.gain) / n,
                pairwise_sum(&s.loss) / n,
                pairwise_sum(&s.extra) / n,
            ))
        })
        .collect()
}

/// Prospective functional on an ensemble: trapezoidal time integral of the
/// per-time plug-in Choquet values of y⁺ and y⁻, plus the terminal Choquet
/// value of X_T and the undistorted running reward when present.
pub fn evaluate_objective(
    ens: &PathEnsemble,
    pref: &PreferenceSpec,
    spec: &ObjectiveSpec,
) -> Result<ObjectiveValue> {
    check_states(ens)?;
    evaluate_objective_unchecked(ens, pref, spec, TiePolicy::Midpoint)
}

pub(crate) fn evaluate_objective_unchecked(
    ens: &PathEnsemble,
    pref: &PreferenceSpec,
    spec: &ObjectiveSpec,
    ties: TiePolicy,
) -> Result<ObjectiveValue> {
    let means = running_means(ens, pref, spec, ties)?;
    let tw = trapezoid_weights(ens.grid.points(), ens.grid.dt());
    let integrate = |f: fn(&(f64, f64, f64)) -> f64| {
        let terms: Vec<f64> = means.iter().zip(&tw).map(|(m, w)| f(m) * w).collect();
        pairwise_sum(&terms)
    };
    let plus = integrate(|m| m.0);
    let minus = integrate(|m| m.1);
    let extra = integrate(|m| m.2);
    let terminal_set = SampleSet::new(ens.x.row(ens.grid.steps).to_vec())?;
    let terminal = choquet_plugin(&terminal_set, &pref.terminal_l, &pref.terminal_w)?.value;
    Ok(ObjectiveValue::new(plus, minus, terminal, extra))
}

/// Calls `f(k, slice)` for every grid time in increasing k; slices are
/// computed a few times at once so memory stays bounded.
pub(crate) fn for_each_slice(
    ens: &PathEnsemble,
    pref: &PreferenceSpec,
    spec: &ObjectiveSpec,
    ties: TiePolicy,
    mut f: impl FnMut(usize, &RunningSlice),
) -> Result<()> {
    const BATCH: usize = 8;
    let points = ens.grid.points();
    for start in (0..points).step_by(BATCH) {
        let end = (start + BATCH).min(points);
        let slices = (start..end)
            .into_par_iter()
            .map(|k| running_slice(ens.u.row(k), ens.x.row(k), pref, spec, ties))
            .collect::<Result<Vec<_>>>()?;
        for (j, s) in slices.iter().enumerate() {
            f(start + j, s);
        }
    }
    Ok(())
}

/// Per-path contributions whose average is the plug-in objective:
/// Σ_k τ_k (gain − loss + f)_k + l(X_T)·w′(1 − F̂(X_T)).
pub fn pathwise_objective(
    ens: &PathEnsemble,
    pref: &PreferenceSpec,
    spec: &ObjectiveSpec,
    ties: TiePolicy,
) -> Result<Vec<f64>> {
    let n = ens.n_paths;
    let tw = trapezoid_weights(ens.grid.points(), ens.grid.dt());
    let mut acc = vec![0.0; n];
    for_each_slice(ens, pref, spec, ties, |k, s| {
        for i in 0..n {
            acc[i] += tw[k] * (s.gain[i] - s.loss[i] + s.extra[i]);
        }
    })?;
    let xt = ens.x.row(ens.grid.steps);
    let tw = terminal_weights(xt, &pref.terminal_w);
    for i in 0..n {
        acc[i] += pref.terminal_l.value(xt[i])? * tw[i];
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(v: &[f64]) -> SampleSet {
        SampleSet::new(v.to_vec()).unwrap()
    }

    fn sqrt_util() -> UtilityFn {
        UtilityFn::monomial(0.5).unwrap()
    }

    fn square_dist() -> DistortionFn {
        // ν = 1, a = 1 gives p²
        DistortionFn::lopes(1.0, 1.0, 0.0).unwrap()
    }

    #[test]
    fn two_point_oracle() {
        // Oracle: ∫ l′(x) w(1 − F(x)) dx with F the two-point CDF of {1, 4}.
        // On [0,1): F = 0, w = 1; on [1,4): F = 1/2, w = 1/4; above 4: w = 0.
        let oracle = (1.0_f64.sqrt() - 0.0) * 1.0 + (4.0_f64.sqrt() - 1.0) * 0.25;
        let s = set(&[1.0, 4.0]);
        let os = choquet_order_stat(&s, &sqrt_util(), &square_dist()).unwrap();
        let pi = choquet_plugin(&s, &sqrt_util(), &square_dist()).unwrap();
        assert!((oracle - 1.25).abs() < 1e-15);
        assert!((os.value - oracle).abs() < 1e-12);
        assert!((pi.value - oracle).abs() < 1e-12);
    }

    #[test]
    fn identity_distortion_gives_sample_mean() {
        let v = [0.3, 2.0, 7.0, 7.0, 11.5];
        let s = set(&v);
        let u = UtilityFn::power(0.5).unwrap();
        let mean = v.iter().map(|x| u.value(*x).unwrap()).sum::<f64>() / v.len() as f64;
        let os = choquet_order_stat(&s, &u, &DistortionFn::Identity).unwrap();
        let pi = choquet_plugin(&s, &u, &DistortionFn::Identity).unwrap();
        assert!((os.value - mean).abs() < 1e-14);
        assert!((pi.value - mean).abs() < 1e-14);
    }

    #[test]
    fn constant_sample_order_stat_is_exact() {
        let s = set(&[3.0; 17]);
        let u = UtilityFn::power(0.5).unwrap();
        let g = DistortionFn::lopes(0.3, 1.0, 0.5).unwrap();
        let os = choquet_order_stat(&s, &u, &g).unwrap();
        assert!((os.value - u.value(3.0).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn negative_sample_is_rejected() {
        let s = set(&[1.0, -1.0]);
        assert!(matches!(
            choquet_plugin(&s, &sqrt_util(), &square_dist()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn deterministic_limit_uses_top_weight() {
        let g = DistortionFn::lopes(0.2, 1.0, 2.0).unwrap();
        let w = positive_part_weights(&[0.0, 2.0, 2.0, 2.0], &g, TiePolicy::DeterministicLimit);
        assert_eq!(w[0], 0.0);
        assert_eq!(w[1], g.derivative(0.0).unwrap());
        let m = positive_part_weights(&[2.0, 2.0], &g, TiePolicy::Midpoint);
        assert_eq!(m[0], g.derivative(0.25).unwrap());
    }

    proptest! {
        #[test]
        fn weights_telescope(n in 1usize..500, nu in 0.0f64..=1.0, a in 0.0f64..3.0, b in 0.0f64..3.0) {
            let g = DistortionFn::lopes(nu, a, b).unwrap();
            let w = order_stat_weights(n, &g);
            prop_assert!(w.iter().all(|x| *x >= 0.0));
            // exact: the sum telescopes to g(1) − g(0) up to summation rounding
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn comonotone_scaling(v in proptest::collection::vec(0.0f64..100.0, 1..60), k in -4i32..5) {
            let c = 2f64.powi(k);
            let id = UtilityFn::monomial(1.0).unwrap();
            let g = DistortionFn::lopes(0.4, 1.0, 2.0).unwrap();
            let base = choquet_order_stat(&SampleSet::new(v.clone()).unwrap(), &id, &g).unwrap().value;
            let scaled = choquet_order_stat(&SampleSet::new(v.iter().map(|x| c * x).collect()).unwrap(), &id, &g).unwrap().value;
            prop_assert_eq!(scaled, c * base);
        }

        #[test]
        fn order_stat_is_monotone_in_each_sample(v in proptest::collection::vec(0.0f64..100.0, 2..40), i in 0usize..40, bump in 0.0f64..10.0) {
            let i = i % v.len();
            let u = UtilityFn::power(0.5).unwrap();
            let g = DistortionFn::lopes(0.7, 2.0, 0.5).unwrap();
            let before = choquet_order_stat(&SampleSet::new(v.clone()).unwrap(), &u, &g).unwrap().value;
            let mut w = v.clone();
            w[i] += bump;
            let after = choquet_order_stat(&SampleSet::new(w).unwrap(), &u, &g).unwrap().value;
            prop_assert!(after >= before - 1e-12);
        }
    }
}
