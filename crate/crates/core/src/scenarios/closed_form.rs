//! Stake model dX = −uX dt + X dW with running reward (uX)^α/α distorted by a
//! Lopes weighting plus an undistorted X: the optimal exposure is deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sde::{PathField, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormParams {
    pub alpha: f64,
    pub nu: f64,
    /// Lopes exponent on the ν-branch
    pub a: f64,
    pub beta: f64,
    pub horizon: f64,
}

impl ClosedFormParams {
    pub fn check(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.nu) {
            return Err(Error::config(format!("nu must lie in [0,1), got {}", self.nu)));
        }
        if !(self.beta >= 0.0) || !(self.a >= 0.0) {
            return Err(Error::config("Lopes exponents must be nonnegative"));
        }
        // with a = 0 the weight at zero is ν + (1−ν)(β+1), not (1−ν)(β+1)
        if self.nu > 0.0 && self.a == 0.0 {
            return Err(Error::config("closed form needs the Lopes exponent a > 0 when nu > 0"));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::config("horizon must be positive"));
        }
        Ok(())
    }

    /// ϖ′₊(0) = (1 − ν)(β + 1)
    pub fn weight_at_zero(&self) -> f64 {
        (1.0 - self.nu) * (self.beta + 1.0)
    }
}

/// Optimal exposure ū_t X̄_t = ((T − t)/((1 − ν)(β + 1)))^(1/(α − 1)).
pub fn closed_form_optimal(t: f64, params: &ClosedFormParams) -> Result<f64> {
    params.check()?;
    exposure(t, params.horizon, params.weight_at_zero(), params.alpha)
}

fn exposure(t: f64, horizon: f64, k: f64, alpha: f64) -> Result<f64> {
    if !(t < horizon) || t < 0.0 {
        return Err(Error::domain(format!("exposure needs 0 ≤ t < T, got t = {t}")));
    }
    Ok(((horizon - t) / k).powf(1.0 / (alpha - 1.0)))
}

#[derive(Debug, Clone)]
pub struct ClosedFormPaths {
    pub state: PathField,
    pub control: PathField,
    /// ū_t X̄_t on the grid
    pub exposure: Vec<f64>,
}

/// X̄_t = V_t(x0 + ∫₀ᵗ h(s)/V_s ds), V_t = exp(W_t − t/2), ū = h/X̄, with the
/// integral evaluated by the trapezoidal rule on the grid.
pub fn closed_form_state_and_control(
    dw: &PathField,
    grid: &TimeGrid,
    x0: f64,
    params: &ClosedFormParams,
) -> Result<ClosedFormPaths> {
    params.check()?;
    paths_with_weight(dw, grid, x0, params, params.weight_at_zero())
}

/// The same construction without probability distortion (weight 1 at zero).
pub fn undistorted_state_and_control(
    dw: &PathField,
    grid: &TimeGrid,
    x0: f64,
    params: &ClosedFormParams,
) -> Result<ClosedFormPaths> {
    params.check()?;
    paths_with_weight(dw, grid, x0, params, 1.0)
}

fn paths_with_weight(
    dw: &PathField,
    grid: &TimeGrid,
    x0: f64,
    params: &ClosedFormParams,
    k: f64,
) -> Result<ClosedFormPaths> {
    if dw.n_rows() != grid.steps {
        return Err(Error::data("increments do not match the grid"));
    }
    let n = dw.n_paths();
    let h = grid
        .times()
        .iter()
        .map(|&t| exposure(t, params.horizon, k, params.alpha))
        .collect::<Result<Vec<f64>>>()?;
    let dt = grid.dt();
    let mut state = PathField::zeros(grid.points(), n);
    let mut control = PathField::zeros(grid.points(), n);
    let mut w = vec![0.0; n];
    let mut integral = vec![0.0; n];
    let mut prev_ratio = vec![h[0]; n];
    for k in 0..grid.points() {
        let t = grid.t(k);
        if k > 0 {
            for (wi, d) in w.iter_mut().zip(dw.row(k - 1)) {
                *wi += d;
            }
        }
        let xs = state.row_mut(k);
        for i in 0..n {
            let v = (w[i] - 0.5 * t).exp();
            let ratio = h[k] / v;
            if k > 0 {
                integral[i] += 0.5 * dt * (prev_ratio[i] + ratio);
            }
            prev_ratio[i] = ratio;
            xs[i] = v * (x0 + integral[i]);
        }
        let (xr, ur) = (state.row(k).to_vec(), control.row_mut(k));
        for i in 0..n {
            ur[i] = h[k] / xr[i];
        }
    }
    Ok(ClosedFormPaths {
        state,
        control,
        exposure: h,
    })
}
