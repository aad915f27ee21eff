//! The eight acceptance criteria, run in order at full size. Prints one line per
//! criterion and exits non-zero if any fails.

use std::fs;
use std::process::Command;
use std::time::Instant;

use cpt_smp::adjoint::{solve_adjoint_analytic, solve_adjoint_lsmc, LsmcOptions};
use cpt_smp::empirical::{ks_uniformity, SampleSet};
use cpt_smp::functional::{choquet_order_stat, choquet_plugin};
use cpt_smp::pipeline::{constant_control_log_law, gateaux_off_optimum, ks_threshold, Direction, EPS_LADDER};
use cpt_smp::preference::{DistortionFn, UtilityFn};
use cpt_smp::principle::{drift_residual, duality_check, gateaux_fd, mp_residual, MpOptions, Verdict};
use cpt_smp::scenarios::{build_scenario, closed_form_optimal, Scenario, ScenarioConfig, ScenarioId};
use cpt_smp::sde::{simulate_variational, simulate_with_increments, ControlSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use statrs::distribution::{ContinuousCDF, Normal};

const N: usize = 100_000;

struct Check {
    what: String,
    pass: bool,
}

fn check(pass: bool, what: impl Into<String>) -> Check {
    Check { what: what.into(), pass }
}

type Outcome = Result<Vec<Check>, String>;

fn preset(id: ScenarioId) -> ScenarioConfig {
    ScenarioConfig {
        n_paths: N,
        ..ScenarioConfig::preset(id)
    }
}

fn mp_opts(sc: &Scenario) -> MpOptions {
    MpOptions {
        ties: sc.ties,
        ..MpOptions::default()
    }
}

fn closed_form_reproduction() -> Outcome {
    let start = Instant::now();
    let cfg = ScenarioConfig {
        alpha: 0.5,
        horizon: 1.0,
        x0: 1.0,
        steps: 200,
        ..preset(ScenarioId::ClosedForm)
    };
    let sc = build_scenario(&cfg).map_err(|e| e.to_string())?;
    let adj = solve_adjoint_analytic(sc.analytic, &sc.ensemble, &sc.model).map_err(|e| e.to_string())?;
    let mp = mp_residual(&sc.ensemble, &adj, &sc.model, &sc.pref, &sc.objective, &mp_opts(&sc)).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();

    let ens = &sc.ensemble;
    let mut worst_exposure = 0.0_f64;
    for k in 0..ens.grid.points() {
        let target = (cfg.horizon - ens.grid.t(k)).powi(-2);
        for i in 0..ens.n_paths {
            worst_exposure = worst_exposure.max((ens.u.get(k, i) * ens.x.get(k, i) / target - 1.0).abs());
        }
    }
    // the state equation driven by ū on the same increments
    let sim = simulate_with_increments(
        &sc.model,
        &ControlSpec::pathwise(ens.u.as_ref().clone()),
        &ens.grid,
        cfg.x0,
        ens.dw.clone(),
        cfg.seed,
    )
    .map_err(|e| e.to_string())?;
    let mut worst_state = 0.0_f64;
    for (a, b) in sim.x.data().iter().zip(ens.x.data()) {
        worst_state = worst_state.max((a / b - 1.0).abs());
    }
    let params = cfg.closed_form_params().map_err(|e| e.to_string())?;
    let h0 = closed_form_optimal(0.0, &params).map_err(|e| e.to_string())?;
    Ok(vec![
        check(worst_state <= 1e-3, format!("SDE under ū vs closed-form X̄ max rel err {worst_state:.3e} (≤ 1e-3)")),
        check(
            worst_exposure <= 1e-12 && (h0 - 1.0).abs() <= 1e-12,
            format!("ūX̄ = (T−t)^-2 max rel err {worst_exposure:.1e}"),
        ),
        check(mp.overall_rms <= 1e-2, format!("mp RMS {:.2e} (≤ 1e-2)", mp.overall_rms)),
        check(elapsed <= 60.0, format!("runtime {elapsed:.1} s (≤ 60 s)")),
    ])
}

fn zero_control() -> Outcome {
    let sc = build_scenario(&preset(ScenarioId::ZeroControl)).map_err(|e| e.to_string())?;
    let adj = solve_adjoint_lsmc(&sc.ensemble, &sc.model, &sc.pref, &sc.objective, &LsmcOptions::default())
        .map_err(|e| e.to_string())?;
    let worst = adj.p.data().iter().chain(adj.q.data()).fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut checks = vec![check(worst <= 1e-10, format!("LSMC max |p|,|q| = {worst:.1e}"))];
    drop(sc);
    let mut violated = Vec::new();
    for c in [-1.0, -0.5, -0.1, 0.1, 0.5, 1.0] {
        let sc = build_scenario(&ScenarioConfig {
            control: c,
            ..preset(ScenarioId::ZeroControl)
        })
        .map_err(|e| e.to_string())?;
        let adj = solve_adjoint_analytic(sc.analytic, &sc.ensemble, &sc.model).map_err(|e| e.to_string())?;
        let r = mp_residual(&sc.ensemble, &adj, &sc.model, &sc.pref, &sc.objective, &mp_opts(&sc)).map_err(|e| e.to_string())?;
        violated.push((c, r.verdict == Verdict::Violated));
    }
    let all = violated.iter().all(|(_, v)| *v);
    checks.push(check(all, format!("violated for all of ±0.1, ±0.5, ±1: {all}")));
    Ok(checks)
}

fn market() -> Outcome {
    let sc = build_scenario(&preset(ScenarioId::JzMarket)).map_err(|e| e.to_string())?;
    let jz = sc.jz.as_ref().ok_or("no market solution")?;
    let adj = solve_adjoint_analytic(sc.analytic, &sc.ensemble, &sc.model).map_err(|e| e.to_string())?;
    let drift = drift_residual(&sc.ensemble, &adj, &sc.model).map_err(|e| e.to_string())?;
    let worst = drift.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    Ok(vec![
        check(jz.budget.relative_error <= 1e-3, format!("|E[ρX̄] − 1| = {:.1e}", jz.budget.relative_error)),
        check(worst <= 1e-12, format!("max |p(b−r) + σq| = {worst:.1e}")),
        check(jz.pit_gap <= 0.01, format!("KS(F_ρ(ρ), 1 − F̂(X̄)) = {:.4}", jz.pit_gap)),
    ])
}

fn duality() -> Outcome {
    let mut checks = Vec::new();
    for id in ScenarioId::CHECKED {
        let sc = build_scenario(&preset(id)).map_err(|e| e.to_string())?;
        let adj = solve_adjoint_analytic(sc.analytic, &sc.ensemble, &sc.model).map_err(|e| e.to_string())?;
        for d in Direction::CHECKED {
            let v = d.control(&sc.ensemble);
            let z = simulate_variational(&sc.ensemble, &sc.model, &v).map_err(|e| e.to_string())?;
            let r = duality_check(&z, &adj, &sc.model, &sc.pref, &sc.objective, &v, sc.ties).map_err(|e| e.to_string())?;
            checks.push(check(
                r.within(3.0),
                format!("{id} v={d}: gap {:.2e} vs 3se {:.2e}", r.gap, 3.0 * r.std_error),
            ));
        }
    }
    Ok(checks)
}

fn gateaux() -> Outcome {
    let sc = build_scenario(&preset(ScenarioId::ClosedForm)).map_err(|e| e.to_string())?;
    let off = gateaux_off_optimum(&sc, 0.5, Direction::Constant(0.1)).map_err(|e| e.to_string())?;
    let bound = (3.0 * off.gap_std_error).max(5e-3 * off.analytic.abs());
    let v = Direction::Constant(0.1).control(&sc.ensemble);
    let at = gateaux_fd(&sc.ensemble, &sc.model, &sc.pref, &sc.objective, &v, &EPS_LADDER).map_err(|e| e.to_string())?;
    Ok(vec![
        check(
            off.abs_gap <= bound,
            format!("u=0.5: |FD − analytic| {:.2e} ≤ {bound:.2e} (analytic {:.4})", off.abs_gap, off.analytic),
        ),
        check(
            at.analytic.abs() <= 3.0 * at.analytic_std_error && at.extrapolated.abs() <= 3.0 * at.extrapolated_std_error,
            format!(
                "optimum: analytic {:.1e} (se {:.1e}), FD {:.1e} (se {:.1e})",
                at.analytic, at.analytic_std_error, at.extrapolated, at.extrapolated_std_error
            ),
        ),
    ])
}

fn lognormal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = LogNormal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| d.sample(&mut rng)).collect()
}

fn choquet() -> Outcome {
    let e = |e: cpt_smp::Error| e.to_string();
    let two = SampleSet::new(vec![1.0, 4.0]).map_err(e)?;
    let sqrt = UtilityFn::monomial(0.5).map_err(e)?;
    let square = DistortionFn::lopes(1.0, 1.0, 0.0).map_err(e)?;
    let os = choquet_order_stat(&two, &sqrt, &square).map_err(e)?.value;
    let pi = choquet_plugin(&two, &sqrt, &square).map_err(e)?.value;
    let mut checks = vec![check(
        (os - 1.25).abs() <= 1e-12 && (pi - 1.25).abs() <= 1e-12,
        format!("two-point oracle {os} / {pi}"),
    )];
    let util = UtilityFn::power(0.5).map_err(e)?;
    let dist = DistortionFn::lopes(0.3, 1.0, 0.5).map_err(e)?;
    for (n, seed) in [(1_000, 101), (10_000, 102), (100_000, 103)] {
        let s = SampleSet::new(lognormal(n, seed)).map_err(e)?;
        let a = choquet_order_stat(&s, &util, &dist).map_err(e)?;
        let b = choquet_plugin(&s, &util, &dist).map_err(e)?;
        let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        checks.push(check(
            (a.value - b.value).abs() <= 3.0 * se,
            format!("lognormal n={n}: |Δ| {:.1e} vs 3se {:.1e}", (a.value - b.value).abs(), 3.0 * se),
        ));
        let mean = s.values().iter().map(|x| util.value(*x).unwrap()).sum::<f64>() / n as f64;
        let a = choquet_order_stat(&s, &util, &DistortionFn::Identity).map_err(e)?.value;
        let b = choquet_plugin(&s, &util, &DistortionFn::Identity).map_err(e)?.value;
        checks.push(check(
            (a - mean).abs() <= 1e-12 * mean && (b - mean).abs() <= 1e-12 * mean,
            format!("identity n={n} equals the sample mean"),
        ));
    }
    Ok(checks)
}

fn pit() -> Outcome {
    let cfg = preset(ScenarioId::ZeroControl);
    let sc = build_scenario(&cfg).map_err(|e| e.to_string())?;
    let xt = sc.ensemble.x.row(cfg.steps).to_vec();
    let own = ks_uniformity(&SampleSet::new(xt.clone()).map_err(|e| e.to_string())?.self_pit()).map_err(|e| e.to_string())?;
    let (m, s) = constant_control_log_law(&sc.model, cfg.control, cfg.x0, cfg.horizon).ok_or("no GBM law")?;
    let law = Normal::new(m, s).map_err(|e| e.to_string())?;
    let true_pit: Vec<f64> = xt.iter().map(|x| law.cdf(x.ln())).collect();
    let ks = ks_uniformity(&true_pit).map_err(|e| e.to_string())?;
    let bound = ks_threshold(N);
    Ok(vec![
        check(own <= bound, format!("KS of F̂(X_T) {own:.2e} ≤ {bound:.2e}")),
        check(ks <= bound, format!("KS of F(X_T) under the GBM law {ks:.2e} ≤ {bound:.2e}")),
    ])
}

fn determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("cpt-smp-acceptance-{}", std::process::id()));
    let mut reports = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.join(threads);
        let status = Command::new(env!("CARGO_BIN_EXE_cpt-smp"))
            .args(["--threads", threads, "verify", "--suite", "all", "--seed", "7", "--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        let code = status.status.code();
        if !matches!(code, Some(0) | Some(1)) {
            return Err(format!("verify exited with {code:?}: {}", String::from_utf8_lossy(&status.stderr)));
        }
        reports.push(fs::read(out.join("report.json")).map_err(|e| e.to_string())?);
    }
    let _ = fs::remove_dir_all(&dir);
    Ok(vec![check(
        reports[0] == reports[1],
        format!("report.json byte-identical with 1 and 4 threads ({} bytes)", reports[0].len()),
    )])
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("closed-form reproduction", closed_form_reproduction),
        ("zero-control scenario", zero_control),
        ("complete-market scenario", market),
        ("duality identity", duality),
        ("Gateaux consistency", gateaux),
        ("Choquet estimators", choquet),
        ("PIT uniformity", pit),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (pass, detail) = match run() {
            Ok(checks) => {
                let pass = checks.iter().all(|c| c.pass);
                let detail = checks
                    .iter()
                    .map(|c| format!("{}{}", if c.pass { "" } else { "✗ " }, c.what))
                    .collect::<Vec<_>>()
                    .join("; ");
                (pass, detail)
            }
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!("criterion {} {:<26} {} | {detail}", i + 1, name, if pass { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
