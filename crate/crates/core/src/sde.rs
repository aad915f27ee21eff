//! Forward simulation of the controlled state, its first-order variation and
//! the pricing kernel, all driven by one stored set of Brownian increments.
//!
//! Paths are generated in blocks of [`BLOCK_PATHS`]; each block draws from its
//! own ChaCha stream keyed by (seed, block index), so results do not depend on
//! how many threads run the blocks.

use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::MonotoneCubic;

pub const BLOCK_PATHS: usize = 2048;
/// Floor applied by the Euler scheme to keep tabulated models positive.
pub const POSITIVITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::config(format!("horizon must be positive, got {horizon}")));
        }
        if steps < 1 {
            return Err(Error::config("time grid needs at least one step"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn points(&self) -> usize {
        self.steps + 1
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.points()).map(|k| self.t(k)).collect()
    }
}

/// Per-path values on a time grid, stored time-major so a cross-section is one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PathField {
    n_paths: usize,
    n_rows: usize,
    data: Vec<f64>,
}

impl PathField {
    pub fn zeros(n_rows: usize, n_paths: usize) -> Self {
        Self {
            n_paths,
            n_rows,
            data: vec![0.0; n_rows * n_paths],
        }
    }

    pub fn filled(n_rows: usize, n_paths: usize, value: f64) -> Self {
        Self {
            n_paths,
            n_rows,
            data: vec![value; n_rows * n_paths],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = rows.len();
        let n_paths = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_paths) {
            return Err(Error::data("ragged rows in path field"));
        }
        Ok(Self {
            n_paths,
            n_rows,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_paths..(k + 1) * self.n_paths]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.n_paths..(k + 1) * self.n_paths]
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.data[k * self.n_paths + i]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            n_paths: self.n_paths,
            n_rows: self.n_rows,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Path i as a vector over rows.
    pub fn path(&self, i: usize) -> Vec<f64> {
        (0..self.n_rows).map(|k| self.get(k, i)).collect()
    }
}

/// Affine rate c0 + c1·u.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineRate {
    pub c0: f64,
    pub c1: f64,
}

impl AffineRate {
    pub fn new(c0: f64, c1: f64) -> Self {
        Self { c0, c1 }
    }

    #[inline]
    pub fn at(&self, u: f64) -> f64 {
        self.c0 + self.c1 * u
    }
}

/// x-dependence of a tabulated coefficient: c(u, x) = base(x) + u·slope(x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabulatedCoefficient {
    pub base: MonotoneCubic,
    pub slope: MonotoneCubic,
}

impl TabulatedCoefficient {
    fn eval(&self, u: f64, x: f64) -> (f64, f64, f64) {
        let (b0, d0, _) = self.base.eval_all(x);
        let (b1, d1, _) = self.slope.eval_all(x);
        // value, ∂x, ∂u
        (b0 + u * b1, d0 + u * d1, b1)
    }
}

/// State coefficients b(t,u,x) and σ(t,u,x) with their first partials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// b = β(u)·x, σ = s(u)·x with affine β and s.
    LinearInX { drift: AffineRate, vol: AffineRate },
    /// b and σ affine in u with monotone-cubic x-dependence; simulated by Euler.
    Tabulated {
        drift: TabulatedCoefficient,
        vol: TabulatedCoefficient,
        zero_at_zero: bool,
    },
}

/// Values of b, σ and their first partials at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Coefficients {
    pub b: f64,
    pub sigma: f64,
    pub b_x: f64,
    pub b_u: f64,
    pub sigma_x: f64,
    pub sigma_u: f64,
}

impl ModelSpec {
    pub fn linear(drift: AffineRate, vol: AffineRate) -> Self {
        ModelSpec::LinearInX { drift, vol }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, ModelSpec::LinearInX { .. })
    }

    pub fn zero_at_zero(&self) -> bool {
        match self {
            ModelSpec::LinearInX { .. } => true,
            ModelSpec::Tabulated { zero_at_zero, .. } => *zero_at_zero,
        }
    }

    #[inline]
    pub fn coefficients(&self, _t: f64, u: f64, x: f64) -> Coefficients {
        match self {
            ModelSpec::LinearInX { drift, vol } => {
                let beta = drift.at(u);
                let s = vol.at(u);
                Coefficients {
                    b: beta * x,
                    sigma: s * x,
                    b_x: beta,
                    b_u: drift.c1 * x,
                    sigma_x: s,
                    sigma_u: vol.c1 * x,
                }
            }
            ModelSpec::Tabulated { drift, vol, .. } => {
                let (b, b_x, b_u) = drift.eval(u, x);
                let (s, s_x, s_u) = vol.eval(u, x);
                Coefficients {
                    b,
                    sigma: s,
                    b_x,
                    b_u,
                    sigma_x: s_x,
                    sigma_u: s_u,
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelCheck {
    pub max_partial_error: f64,
    pub zero_at_zero_ok: bool,
    /// Lipschitz continuity of the partials is only sampled on a finite grid.
    pub heuristic: bool,
}

/// Compares the stated partials with central differences on a (u, x) grid and
/// checks b(t,u,0) = σ(t,u,0) = 0 when the model claims it.
pub fn validate_model(model: &ModelSpec, us: &[f64], xs: &[f64]) -> Result<ModelCheck> {
    let h = 1e-5;
    let mut max_err: f64 = 0.0;
    let mut zero_ok = true;
    for &u in us {
        let at0 = model.coefficients(0.0, u, 0.0);
        if model.zero_at_zero() && (at0.b.abs() > 1e-12 || at0.sigma.abs() > 1e-12) {
            zero_ok = false;
        }
        for &x in xs {
            let c = model.coefficients(0.0, u, x);
            let xp = model.coefficients(0.0, u, x + h);
            let xm = model.coefficients(0.0, u, x - h);
            let up = model.coefficients(0.0, u + h, x);
            let um = model.coefficients(0.0, u - h, x);
            let errs = [
                (xp.b - xm.b) / (2.0 * h) - c.b_x,
                (xp.sigma - xm.sigma) / (2.0 * h) - c.sigma_x,
                (up.b - um.b) / (2.0 * h) - c.b_u,
                (up.sigma - um.sigma) / (2.0 * h) - c.sigma_u,
            ];
            max_err = errs.iter().fold(max_err, |m, e| m.max(e.abs()));
        }
    }
    if max_err > 1e-6 {
        return Err(Error::config(format!(
            "model partials disagree with finite differences by {max_err:.3e}"
        )));
    }
    if !zero_ok {
        return Err(Error::config("model claims b(t,u,0) = σ(t,u,0) = 0 but violates it"));
    }
    Ok(ModelCheck {
        max_partial_error: max_err,
        zero_at_zero_ok: zero_ok,
        heuristic: !model.is_linear(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    pub lo: f64,
    pub hi: f64,
}

impl ControlSet {
    pub fn real_line() -> Self {
        Self {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }

    pub fn contains(&self, u: f64) -> bool {
        u >= self.lo && u <= self.hi
    }
}

/// Markov feedback rules u = g(t_k, x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedbackRule {
    /// u = target[k] / x, i.e. the product u·x follows a prescribed schedule.
    ExposureTarget { target: Vec<f64> },
    /// u = a + b·x
    Affine { a: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlKind {
    Constant(f64),
    /// One value per grid point, shared by all paths.
    Deterministic(Vec<f64>),
    Feedback(FeedbackRule),
    /// An adapted process given pathwise, one value per grid point and path.
    Pathwise(Arc<PathField>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSpec {
    pub kind: ControlKind,
    pub set: ControlSet,
}

impl ControlSpec {
    pub fn constant(u: f64) -> Self {
        Self {
            kind: ControlKind::Constant(u),
            set: ControlSet::real_line(),
        }
    }

    pub fn pathwise(field: PathField) -> Self {
        Self {
            kind: ControlKind::Pathwise(Arc::new(field)),
            set: ControlSet::real_line(),
        }
    }

    pub fn feedback(rule: FeedbackRule) -> Self {
        Self {
            kind: ControlKind::Feedback(rule),
            set: ControlSet::real_line(),
        }
    }

    pub fn within(mut self, set: ControlSet) -> Self {
        self.set = set;
        self
    }

    fn check_shape(&self, grid: &TimeGrid, n_paths: usize) -> Result<()> {
        match &self.kind {
            ControlKind::Deterministic(v) if v.len() != grid.points() => Err(Error::data(format!(
                "deterministic control has {} values for {} grid points",
                v.len(),
                grid.points()
            ))),
            ControlKind::Feedback(FeedbackRule::ExposureTarget { target })
                if target.len() != grid.points() =>
            {
                Err(Error::data("exposure target length differs from the grid"))
            }
            ControlKind::Pathwise(f) if f.n_rows() != grid.points() || f.n_paths() != n_paths => {
                Err(Error::data("pathwise control shape differs from the ensemble"))
            }
            _ => Ok(()),
        }
    }

    /// Control value at grid point k on path i with current state x.
    #[inline]
    pub fn value(&self, k: usize, i: usize, x: f64) -> f64 {
        match &self.kind {
            ControlKind::Constant(u) => *u,
            ControlKind::Deterministic(v) => v[k],
            ControlKind::Feedback(FeedbackRule::ExposureTarget { target }) => target[k] / x,
            ControlKind::Feedback(FeedbackRule::Affine { a, b }) => a + b * x,
            ControlKind::Pathwise(f) => f.get(k, i),
        }
    }

    /// Evaluates the control along existing state paths.
    pub fn evaluate_on(&self, grid: &TimeGrid, x: &PathField) -> Result<PathField> {
        self.check_shape(grid, x.n_paths())?;
        let mut out = PathField::zeros(grid.points(), x.n_paths());
        for k in 0..grid.points() {
            let xs = x.row(k);
            for (i, o) in out.row_mut(k).iter_mut().enumerate() {
                *o = self.value(k, i, xs[i]);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SimDiagnostics {
    pub floor_hits: usize,
}

#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub seed: u64,
    /// Brownian increments, one row per step.
    pub dw: Arc<PathField>,
    pub x: Arc<PathField>,
    pub u: Arc<PathField>,
    pub z: Option<Arc<PathField>>,
    pub rho: Option<Arc<PathField>>,
    pub diagnostics: SimDiagnostics,
}

impl PathEnsemble {
    /// Assembles an ensemble from externally computed paths.
    pub fn from_parts(
        grid: TimeGrid,
        seed: u64,
        dw: Arc<PathField>,
        x: PathField,
        u: PathField,
    ) -> Result<Self> {
        let n = dw.n_paths();
        if dw.n_rows() != grid.steps
            || x.n_rows() != grid.points()
            || u.n_rows() != grid.points()
            || x.n_paths() != n
            || u.n_paths() != n
        {
            return Err(Error::data("path arrays do not match the grid"));
        }
        Ok(Self {
            grid,
            n_paths: n,
            seed,
            dw,
            x: Arc::new(x),
            u: Arc::new(u),
            z: None,
            rho: None,
            diagnostics: SimDiagnostics::default(),
        })
    }

    /// Brownian motion W_{t_k} on every path.
    pub fn brownian(&self) -> PathField {
        let mut w = PathField::zeros(self.grid.points(), self.n_paths);
        for k in 0..self.grid.steps {
            let (prev, next) = w.data.split_at_mut((k + 1) * self.n_paths);
            let prev = &prev[k * self.n_paths..];
            for ((nx, &p), &d) in next[..self.n_paths].iter_mut().zip(prev).zip(self.dw.row(k)) {
                *nx = p + d;
            }
        }
        w
    }
}

/// N(0, dt) increments for every path and step; block b uses stream b of `seed`.
pub fn brownian_increments(grid: &TimeGrid, n_paths: usize, seed: u64) -> PathField {
    let steps = grid.steps;
    let sd = grid.dt().sqrt();
    let n_blocks = n_paths.div_ceil(BLOCK_PATHS);
    // each block fills a path-major scratch buffer; transposed afterwards
    let blocks: Vec<Vec<f64>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let paths = BLOCK_PATHS.min(n_paths - b * BLOCK_PATHS);
            (0..paths * steps)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sd * z
                })
                .collect()
        })
        .collect();
    let mut dw = PathField::zeros(steps, n_paths);
    for (b, block) in blocks.iter().enumerate() {
        let paths = block.len() / steps.max(1);
        for p in 0..paths {
            let i = b * BLOCK_PATHS + p;
            for k in 0..steps {
                dw.data[k * n_paths + i] = block[p * steps + k];
            }
        }
    }
    dw
}

/// Simulates the state under `control`, drawing fresh increments from `seed`.
pub fn simulate_state(
    model: &ModelSpec,
    control: &ControlSpec,
    grid: &TimeGrid,
    n_paths: usize,
    x0: f64,
    seed: u64,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::config("need at least one path"));
    }
    if !(x0 > 0.0) {
        return Err(Error::domain(format!("initial state must be positive, got {x0}")));
    }
    let dw = Arc::new(brownian_increments(grid, n_paths, seed));
    simulate_with_increments(model, control, grid, x0, dw, seed)
}

/// Simulates the state on given increments (common random numbers).
///
/// Linear-in-x models step exactly in log space; tabulated models use Euler
/// with a positivity floor whose hits are counted in the diagnostics.
pub fn simulate_with_increments(
    model: &ModelSpec,
    control: &ControlSpec,
    grid: &TimeGrid,
    x0: f64,
    dw: Arc<PathField>,
    seed: u64,
) -> Result<PathEnsemble> {
    if !(x0 > 0.0) {
        return Err(Error::domain(format!("initial state must be positive, got {x0}")));
    }
    let n = dw.n_paths();
    if dw.n_rows() != grid.steps {
        return Err(Error::data("increments do not match the grid"));
    }
    control.check_shape(grid, n)?;
    let dt = grid.dt();
    let mut x = PathField::filled(grid.points(), n, x0);
    let mut u = PathField::zeros(grid.points(), n);
    let mut floor_hits = 0usize;

    for k in 0..grid.points() {
        let t = grid.t(k);
        let (done, rest) = x.data.split_at_mut((k + 1) * n);
        let xk = &done[k * n..];
        let uk = u.row_mut(k);
        for i in 0..n {
            let v = control.value(k, i, xk[i]);
            if !control.set.contains(v) || v.is_nan() {
                return Err(Error::domain(format!(
                    "control value {v} at t = {t} outside the admissible set [{}, {}]",
                    control.set.lo, control.set.hi
                )));
            }
            uk[i] = v;
        }
        if k == grid.steps {
            break;
        }
        let next = &mut rest[..n];
        let dwk = dw.row(k);
        match model {
            ModelSpec::LinearInX { drift, vol } => {
                for i in 0..n {
                    let beta = drift.at(uk[i]);
                    let s = vol.at(uk[i]);
                    next[i] = xk[i] * ((beta - 0.5 * s * s) * dt + s * dwk[i]).exp();
                }
            }
            ModelSpec::Tabulated { .. } => {
                for i in 0..n {
                    let c = model.coefficients(t, uk[i], xk[i]);
                    let mut v = xk[i] + c.b * dt + c.sigma * dwk[i];
                    if v < POSITIVITY_FLOOR {
                        v = POSITIVITY_FLOOR;
                        floor_hits += 1;
                    }
                    next[i] = v;
                }
            }
        }
    }
    Ok(PathEnsemble {
        grid: *grid,
        n_paths: n,
        seed,
        dw,
        x: Arc::new(x),
        u: Arc::new(u),
        z: None,
        rho: None,
        diagnostics: SimDiagnostics { floor_hits },
    })
}

/// First-order variation Z along the ensemble's (ū, X̄) for direction `v`,
/// Euler-stepped on the ensemble's own increments, Z_0 = 0.
pub fn simulate_variational(
    ens: &PathEnsemble,
    model: &ModelSpec,
    direction: &ControlSpec,
) -> Result<PathEnsemble> {
    let v = direction.evaluate_on(&ens.grid, &ens.x)?;
    let n = ens.n_paths;
    let dt = ens.grid.dt();
    let mut z = PathField::zeros(ens.grid.points(), n);
    for k in 0..ens.grid.steps {
        let t = ens.grid.t(k);
        let (xk, uk, vk, dwk) = (ens.x.row(k), ens.u.row(k), v.row(k), ens.dw.row(k));
        let (done, rest) = z.data.split_at_mut((k + 1) * n);
        let zk = &done[k * n..];
        for i in 0..n {
            let c = model.coefficients(t, uk[i], xk[i]);
            rest[i] = zk[i]
                + (c.b_x * zk[i] + c.b_u * vk[i]) * dt
                + (c.sigma_x * zk[i] + c.sigma_u * vk[i]) * dwk[i];
        }
    }
    let mut out = ens.clone();
    out.z = Some(Arc::new(z));
    Ok(out)
}

/// State under ū + ε·v on the same increments, stepped as X̄ + D with an
/// Euler scheme for the difference D (D_0 = 0). This discretization is the
/// one whose ε-derivative is exactly the Euler variational process.
pub fn simulate_perturbation(
    ens: &PathEnsemble,
    model: &ModelSpec,
    direction: &ControlSpec,
    eps: f64,
) -> Result<PathEnsemble> {
    let v = direction.evaluate_on(&ens.grid, &ens.x)?;
    let n = ens.n_paths;
    let dt = ens.grid.dt();
    let mut d = vec![0.0; n];
    let mut x = PathField::zeros(ens.grid.points(), n);
    let mut u = PathField::zeros(ens.grid.points(), n);
    for k in 0..ens.grid.points() {
        let t = ens.grid.t(k);
        let (xk, uk, vk) = (ens.x.row(k), ens.u.row(k), v.row(k));
        {
            let xr = x.row_mut(k);
            for i in 0..n {
                xr[i] = xk[i] + d[i];
            }
        }
        {
            let ur = u.row_mut(k);
            for i in 0..n {
                ur[i] = uk[i] + eps * vk[i];
            }
        }
        if k == ens.grid.steps {
            break;
        }
        let dwk = ens.dw.row(k);
        for i in 0..n {
            let base = model.coefficients(t, uk[i], xk[i]);
            let pert = model.coefficients(t, uk[i] + eps * vk[i], xk[i] + d[i]);
            d[i] += (pert.b - base.b) * dt + (pert.sigma - base.sigma) * dwk[i];
        }
    }
    PathEnsemble::from_parts(ens.grid, ens.seed, ens.dw.clone(), x, u)
}

/// ρ_{k+1} = ρ_k·exp(−(r + θ²/2)Δt − θΔW_k), ρ_0 = 1.
pub fn simulate_pricing_kernel(grid: &TimeGrid, r: f64, theta: f64, dw: &PathField) -> PathField {
    let n = dw.n_paths();
    let dt = grid.dt();
    let mut rho = PathField::filled(grid.points(), n, 1.0);
    let drift = -(r + 0.5 * theta * theta) * dt;
    for k in 0..grid.steps {
        let (done, rest) = rho.data.split_at_mut((k + 1) * n);
        let prev = &done[k * n..];
        for ((nx, &p), &d) in rest[..n].iter_mut().zip(prev).zip(dw.row(k)) {
            *nx = p * (drift - theta * d).exp();
        }
    }
    rho
}

/// Writes `path_id,t,X,u[,Z][,rho]` rows.
pub fn write_paths_csv<W: Write>(ens: &PathEnsemble, mut out: W) -> std::io::Result<()> {
    let mut header = String::from("path_id,t,X,u");
    if ens.z.is_some() {
        header.push_str(",Z");
    }
    if ens.rho.is_some() {
        header.push_str(",rho");
    }
    writeln!(out, "{header}")?;
    for i in 0..ens.n_paths {
        for k in 0..ens.grid.points() {
            write!(out, "{i},{},{},{}", ens.grid.t(k), ens.x.get(k, i), ens.u.get(k, i))?;
            if let Some(z) = &ens.z {
                write!(out, ",{}", z.get(k, i))?;
            }
            if let Some(r) = &ens.rho {
                write!(out, ",{}", r.get(k, i))?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
