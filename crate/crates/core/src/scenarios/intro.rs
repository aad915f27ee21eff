//! Evaluation-only objectives: investment with consumption, and investment
//! with a two-point lottery wager.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::functional::{evaluate_objective, ControlTransform, ObjectiveSpec, ObjectiveValue};
use crate::preference::{DistortionFn, PreferenceSpec, UtilityFn};
use crate::sde::{
    simulate_with_increments, AffineRate, ControlSpec, ModelSpec, PathEnsemble, PathField, TimeGrid, BLOCK_PATHS,
};

use super::{ScenarioConfig, ScenarioId};

// odds draws use streams far away from the Brownian ones
const ODDS_STREAM_OFFSET: u64 = 1 << 40;

/// Two-point odds per grid point and path: k₊ with probability π, −1 otherwise.
fn draw_odds(grid: &TimeGrid, n: usize, seed: u64, k_plus: f64, pi: f64) -> PathField {
    let rows = grid.points();
    let blocks: Vec<Vec<f64>> = (0..n.div_ceil(BLOCK_PATHS))
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ODDS_STREAM_OFFSET + b as u64);
            let paths = BLOCK_PATHS.min(n - b * BLOCK_PATHS);
            (0..paths * rows)
                .map(|_| if rng.gen_bool(pi) { k_plus } else { -1.0 })
                .collect()
        })
        .collect();
    let mut out = PathField::zeros(rows, n);
    for (b, block) in blocks.iter().enumerate() {
        for p in 0..block.len() / rows {
            for k in 0..rows {
                out.row_mut(k)[b * BLOCK_PATHS + p] = block[p * rows + k];
            }
        }
    }
    out
}

/// Distorted objective of the consumption or gambling problem under constant
/// portfolio weight `cfg.control` and consumption/wager rate `cfg.rate`.
pub fn evaluate_intro_objectives(cfg: &ScenarioConfig, dw: Arc<PathField>) -> Result<ObjectiveValue> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let n = dw.n_paths();
    let c = cfg.rate;
    let w = cfg.distortion.build()?;
    let zeta = UtilityFn::power(cfg.alpha)?;
    let spec = ObjectiveSpec {
        transform: ControlTransform::UTimesX,
        extra_f: None,
    };
    match cfg.id {
        ScenarioId::ConsumptionEval => {
            let model = ModelSpec::linear(
                AffineRate::new(cfg.r - c, cfg.b - cfg.r),
                AffineRate::new(0.0, cfg.sigma),
            );
            let ens = simulate_with_increments(&model, &ControlSpec::constant(cfg.control), &grid, cfg.x0, dw, cfg.seed)?;
            // the running term sees consumption c·X, undistorted
            let consumption = PathField::filled(grid.points(), n, c);
            let aux = PathEnsemble::from_parts(grid, cfg.seed, ens.dw.clone(), (*ens.x).clone(), consumption)?;
            let pref = PreferenceSpec {
                zeta_plus: zeta.clone(),
                zeta_minus: zeta,
                terminal_l: UtilityFn::power(cfg.gamma)?,
                varpi_plus: DistortionFn::Identity,
                varpi_minus: DistortionFn::Identity,
                terminal_w: w,
            };
            evaluate_objective(&aux, &pref, &spec)
        }
        ScenarioId::GamblingEval => {
            let dt = grid.dt();
            if c * dt >= 1.0 {
                return Err(Error::domain(format!("wager rate {c} would ruin wealth within one step")));
            }
            let odds = draw_odds(&grid, n, cfg.seed, cfg.k_plus, cfg.win_prob);
            let (u, s) = (cfg.control, cfg.sigma);
            let growth = (cfg.r + (cfg.b - cfg.r) * u - 0.5 * s * s * u * u) * dt;
            let mut x = PathField::filled(grid.points(), n, cfg.x0);
            for k in 0..grid.steps {
                let prev = x.row(k).to_vec();
                let (dwk, kk) = (dw.row(k), odds.row(k));
                for (i, xi) in x.row_mut(k + 1).iter_mut().enumerate() {
                    *xi = prev[i] * (growth + s * u * dwk[i]).exp() * (1.0 + kk[i] * c * dt);
                }
            }
            // the running term sees K·c·X, split into gain and loss parts
            let stake = odds.map(|k| k * c);
            let ens = PathEnsemble::from_parts(grid, cfg.seed, dw, x, stake)?;
            let pref = PreferenceSpec {
                zeta_plus: zeta.clone(),
                zeta_minus: zeta,
                terminal_l: UtilityFn::power(cfg.gamma)?,
                varpi_plus: w.clone(),
                varpi_minus: w.clone(),
                terminal_w: w,
            };
            evaluate_objective(&ens, &pref, &spec)
        }
        other => Err(Error::config(format!("{other} is not an evaluation-only scenario"))),
    }
}
