//! Utilities and probability distortions of a CPT preference.
//!
//! A utility maps ℝ⁺ → ℝ⁺ and is used for the gain and loss parts of the
//! running control term and for terminal wealth. A distortion maps
//! [0, 1] → [0, 1] and reweights decumulative probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::MonotoneCubic;

/// Below this the marginal utility of the power family is treated as divergent.
pub const INADA_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtilityFn {
    /// x^γ / γ with γ in (0, 1).
    Power { gamma: f64 },
    /// x^γ with γ in (0, 1]; the un-normalized member of the power family.
    Monomial { gamma: f64 },
    /// Monotone cubic through the knots, extended linearly beyond the last one.
    Tabulated { knots: MonotoneCubic },
}

impl UtilityFn {
    pub fn power(gamma: f64) -> Result<Self> {
        let f = UtilityFn::Power { gamma };
        f.check_params()?;
        Ok(f)
    }

    pub fn monomial(gamma: f64) -> Result<Self> {
        let f = UtilityFn::Monomial { gamma };
        f.check_params()?;
        Ok(f)
    }

    pub fn tabulated(knots: &[(f64, f64)]) -> Result<Self> {
        let f = UtilityFn::Tabulated {
            knots: MonotoneCubic::new(knots)?,
        };
        f.check_params()?;
        Ok(f)
    }

    /// l ≡ 0, used for problems without a terminal term.
    pub fn zero() -> Self {
        UtilityFn::Tabulated {
            knots: MonotoneCubic::new(&[(0.0, 0.0), (1.0, 0.0)]).expect("static knots"),
        }
    }

    /// l(x) = c·x.
    pub fn linear(c: f64) -> Result<Self> {
        Self::tabulated(&[(0.0, 0.0), (1.0, c)])
    }

    pub fn check_params(&self) -> Result<()> {
        match self {
            UtilityFn::Power { gamma } if !(*gamma > 0.0 && *gamma < 1.0) => {
                Err(Error::config(format!("power utility needs gamma in (0,1), got {gamma}")))
            }
            UtilityFn::Monomial { gamma } if !(*gamma > 0.0 && *gamma <= 1.0) => {
                Err(Error::config(format!("monomial utility needs gamma in (0,1], got {gamma}")))
            }
            UtilityFn::Tabulated { knots } if knots.x_min() < 0.0 => {
                Err(Error::config("utility knots must lie in x >= 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_power_family(&self) -> bool {
        !matches!(self, UtilityFn::Tabulated { .. })
    }

    pub fn value(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return Err(Error::domain(format!("utility evaluated at x = {x} < 0")));
        }
        Ok(match self {
            UtilityFn::Power { gamma } => {
                if x == 0.0 {
                    0.0
                } else {
                    x.powf(*gamma) / gamma
                }
            }
            UtilityFn::Monomial { gamma } => {
                if x == 0.0 {
                    0.0
                } else {
                    x.powf(*gamma)
                }
            }
            UtilityFn::Tabulated { knots } => knots.eval(x),
        })
    }

    /// First (`order = 1`) or second (`order = 2`) derivative at x > 0.
    pub fn derivative(&self, x: f64, order: u8) -> Result<f64> {
        if !(x > 0.0) || (self.is_power_family() && x < INADA_FLOOR) {
            return Err(Error::domain(format!(
                "utility derivative requested at x = {x}; marginal utility is singular at 0"
            )));
        }
        let (g, scale) = match self {
            UtilityFn::Power { gamma } => (*gamma, 1.0 / gamma),
            UtilityFn::Monomial { gamma } => (*gamma, 1.0),
            UtilityFn::Tabulated { knots } => {
                let (_, d1, d2) = knots.eval_all(x);
                return match order {
                    1 => Ok(d1),
                    2 => Ok(d2),
                    _ => Err(Error::config(format!("derivative order {order} unsupported"))),
                };
            }
        };
        match order {
            1 => Ok(scale * g * x.powf(g - 1.0)),
            2 => Ok(scale * g * (g - 1.0) * x.powf(g - 2.0)),
            _ => Err(Error::config(format!("derivative order {order} unsupported"))),
        }
    }

    pub fn marginal(&self, x: f64) -> Result<f64> {
        self.derivative(x, 1)
    }

    /// Solves f′(x) = y for x > 0.
    pub fn inverse_marginal(&self, y: f64) -> Result<f64> {
        if !(y > 0.0) || !y.is_finite() {
            return Err(Error::domain(format!("inverse marginal utility needs y > 0, got {y}")));
        }
        match self {
            UtilityFn::Power { gamma } => Ok(y.powf(1.0 / (gamma - 1.0))),
            UtilityFn::Monomial { gamma } => {
                if *gamma == 1.0 {
                    return Err(Error::domain("linear utility has no inverse marginal"));
                }
                Ok((y / gamma).powf(1.0 / (gamma - 1.0)))
            }
            UtilityFn::Tabulated { knots } => {
                // Marginal utility must be strictly decreasing on the bracket.
                let mut lo = knots.x_min().max(f64::MIN_POSITIVE);
                let mut hi = knots.x_max();
                let (flo, fhi) = (knots.deriv(lo) - y, knots.deriv(hi) - y);
                if flo == 0.0 {
                    return Ok(lo);
                }
                if fhi == 0.0 {
                    return Ok(hi);
                }
                if !(flo > 0.0 && fhi < 0.0) {
                    return Err(Error::domain(format!(
                        "y = {y} outside the marginal-utility range of the tabulated utility"
                    )));
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if knots.deriv(mid) > y {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= 1e-15 * hi {
                        break;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistortionFn {
    Identity,
    /// ν·p^(a+1) + (1−ν)·[1 − (1−p)^(b+1)].
    Lopes { nu: f64, a: f64, b: f64 },
    Tabulated { knots: MonotoneCubic },
}

impl DistortionFn {
    pub fn lopes(nu: f64, a: f64, b: f64) -> Result<Self> {
        let g = DistortionFn::Lopes { nu, a, b };
        g.check_params()?;
        Ok(g)
    }

    pub fn tabulated(knots: &[(f64, f64)]) -> Result<Self> {
        let g = DistortionFn::Tabulated {
            knots: MonotoneCubic::new(knots)?,
        };
        g.check_params()?;
        Ok(g)
    }

    pub fn check_params(&self) -> Result<()> {
        match self {
            DistortionFn::Lopes { nu, a, b } => {
                if !(0.0..=1.0).contains(nu) || !(*a >= 0.0) || !(*b >= 0.0) {
                    return Err(Error::config(format!(
                        "lopes distortion needs nu in [0,1], a >= 0, b >= 0; got ({nu}, {a}, {b})"
                    )));
                }
                Ok(())
            }
            DistortionFn::Tabulated { knots } => {
                if knots.x_min() != 0.0 || knots.x_max() != 1.0 {
                    return Err(Error::config("distortion knots must span exactly [0, 1]"));
                }
                Ok(())
            }
            DistortionFn::Identity => Ok(()),
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            DistortionFn::Identity => true,
            // ν = 0, b = 0 and ν = 1, a = 0 both collapse to p.
            DistortionFn::Lopes { nu, a, b } => {
                (*nu == 0.0 && *b == 0.0) || (*nu == 1.0 && *a == 0.0)
            }
            DistortionFn::Tabulated { .. } => false,
        }
    }

    fn check_p(p: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::domain(format!("distortion evaluated at p = {p} outside [0,1]")));
        }
        Ok(())
    }

    pub fn value(&self, p: f64) -> Result<f64> {
        Self::check_p(p)?;
        Ok(self.value_unchecked(p))
    }

    pub fn derivative(&self, p: f64) -> Result<f64> {
        Self::check_p(p)?;
        Ok(self.derivative_unchecked(p))
    }

    /// `deriv = 0` returns the value, `deriv = 1` the first derivative.
    pub fn eval(&self, p: f64, deriv: u8) -> Result<f64> {
        match deriv {
            0 => self.value(p),
            1 => self.derivative(p),
            _ => Err(Error::config(format!("distortion derivative order {deriv} unsupported"))),
        }
    }

    pub(crate) fn value_unchecked(&self, p: f64) -> f64 {
        match self {
            DistortionFn::Identity => p,
            // endpoints hold symbolically; keep them exact in floating point
            DistortionFn::Lopes { .. } if p == 0.0 || p == 1.0 => p,
            DistortionFn::Lopes { nu, a, b } => {
                nu * p.powf(a + 1.0) + (1.0 - nu) * (1.0 - (1.0 - p).powf(b + 1.0))
            }
            DistortionFn::Tabulated { knots } => knots.eval(p),
        }
    }

    pub(crate) fn derivative_unchecked(&self, p: f64) -> f64 {
        match self {
            DistortionFn::Identity => 1.0,
            DistortionFn::Lopes { nu, a, b } => {
                nu * (a + 1.0) * p.powf(*a) + (1.0 - nu) * (b + 1.0) * (1.0 - p).powf(*b)
            }
            DistortionFn::Tabulated { knots } => knots.deriv(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSpec {
    pub zeta_plus: UtilityFn,
    pub zeta_minus: UtilityFn,
    pub terminal_l: UtilityFn,
    pub varpi_plus: DistortionFn,
    pub varpi_minus: DistortionFn,
    pub terminal_w: DistortionFn,
}

impl PreferenceSpec {
    pub fn check_params(&self) -> Result<()> {
        for u in [&self.zeta_plus, &self.zeta_minus, &self.terminal_l] {
            u.check_params()?;
        }
        for d in [&self.varpi_plus, &self.varpi_minus, &self.terminal_w] {
            d.check_params()?;
        }
        Ok(())
    }

    fn utilities(&self) -> [(&'static str, &UtilityFn); 3] {
        [
            ("zeta_plus", &self.zeta_plus),
            ("zeta_minus", &self.zeta_minus),
            ("terminal_l", &self.terminal_l),
        ]
    }

    fn distortions(&self) -> [(&'static str, &DistortionFn); 3] {
        [
            ("varpi_plus", &self.varpi_plus),
            ("varpi_minus", &self.varpi_minus),
            ("terminal_w", &self.terminal_w),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub component: String,
    pub property: String,
    pub at: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub warnings: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, property: &str) -> bool {
        self.violations.iter().any(|v| v.property.contains(property))
    }

    fn flag(&mut self, component: &str, property: &str, at: f64) {
        self.violations.push(Violation {
            component: component.into(),
            property: property.into(),
            at,
        });
    }

    fn warn(&mut self, component: &str, property: &str, at: f64) {
        self.warnings.push(Violation {
            component: component.into(),
            property: property.into(),
            at,
        });
    }
}

/// Utility checks run on [0, UTILITY_GRID_MAX] (or the knot range when wider).
const UTILITY_GRID_MAX: f64 = 10.0;
const DISTORTION_DERIV_CAP: f64 = 1e8;

/// Grid checks of the structural hypotheses on every component of `spec`.
/// Only the first offending grid point per property is reported.
pub fn validate_preference(spec: &PreferenceSpec, grid_size: usize) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = grid_size.max(2);

    for (name, f) in spec.utilities() {
        if let Err(e) = f.check_params() {
            report.flag(name, &format!("parameters: {e}"), f64::NAN);
            continue;
        }
        let x_max = match f {
            UtilityFn::Tabulated { knots } => knots.x_max().max(1e-12),
            _ => UTILITY_GRID_MAX,
        };
        let xs: Vec<f64> = (0..n).map(|i| x_max * i as f64 / (n - 1) as f64).collect();
        let vals: Vec<f64> = xs.iter().map(|&x| f.value(x).unwrap_or(f64::NAN)).collect();
        if vals[0] != 0.0 {
            report.flag(name, "endpoint value(0)≠0", 0.0);
        }
        if let Some(i) = (1..n).find(|&i| !(vals[i] > vals[i - 1])) {
            report.flag(name, "monotonicity", xs[i]);
        }
        let scale = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
        if let Some(i) = (1..n - 1).find(|&i| vals[i + 1] - 2.0 * vals[i] + vals[i - 1] > 1e-12 * scale)
        {
            report.flag(name, "concavity", xs[i]);
        }
        if !f.is_power_family() {
            // Inada cannot hold for a tabulated curve with a finite end slope.
            let x0 = xs[1].min(1e-9);
            report.warn(name, "Inada condition not certified", x0);
        }
    }

    for (name, g) in spec.distortions() {
        if let Err(e) = g.check_params() {
            report.flag(name, &format!("parameters: {e}"), f64::NAN);
            continue;
        }
        if g.value_unchecked(0.0) != 0.0 {
            report.flag(name, "endpoint value(0)≠0", 0.0);
        }
        if g.value_unchecked(1.0) != 1.0 {
            report.flag(name, "endpoint value(1)≠1", 1.0);
        }
        let ps: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let vals: Vec<f64> = ps.iter().map(|&p| g.value_unchecked(p)).collect();
        if let Some(i) = (1..n).find(|&i| !(vals[i] > vals[i - 1])) {
            report.flag(name, "monotonicity", ps[i]);
        }
        if let Some(&p) = ps
            .iter()
            .find(|&&p| !(g.derivative_unchecked(p).abs() <= DISTORTION_DERIV_CAP))
        {
            report.flag(name, "bounded derivative", p);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid_spec() -> PreferenceSpec {
        let u = UtilityFn::power(0.5).unwrap();
        let w = DistortionFn::lopes(0.5, 1.0, 1.0).unwrap();
        PreferenceSpec {
            zeta_plus: u.clone(),
            zeta_minus: u.clone(),
            terminal_l: u,
            varpi_plus: w.clone(),
            varpi_minus: w.clone(),
            terminal_w: w,
        }
    }

    #[test]
    fn power_utility_values() {
        let u = UtilityFn::power(0.5).unwrap();
        assert_eq!(u.value(4.0).unwrap(), 4.0);
        assert_eq!(u.value(0.0).unwrap(), 0.0);
        assert_eq!(UtilityFn::power(0.25).unwrap().value(1.0).unwrap(), 4.0);
        assert!(matches!(u.value(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn power_utility_derivatives() {
        let u = UtilityFn::power(0.5).unwrap();
        assert_eq!(u.derivative(4.0, 1).unwrap(), 0.5);
        assert_eq!(u.derivative(1.0, 2).unwrap(), -0.5);
        assert!(matches!(u.derivative(0.0, 1), Err(Error::Domain(_))));
        assert!(matches!(u.derivative(1e-301, 1), Err(Error::Domain(_))));
        assert!(u.derivative(1e-200, 1).unwrap() > 1e99);
    }

    #[test]
    fn inverse_marginal_examples() {
        let u = UtilityFn::power(0.5).unwrap();
        assert!((u.inverse_marginal(0.5).unwrap() - 4.0).abs() < 4e-12);
        assert_eq!(u.inverse_marginal(1.0).unwrap(), 1.0);
        let v = UtilityFn::power(0.25).unwrap();
        let x = v.inverse_marginal(8.0).unwrap();
        assert!((x - 0.0625).abs() < 1e-12 * 0.0625);
        assert!(matches!(u.inverse_marginal(0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn tabulated_inverse_marginal_inverts_interpolant() {
        let knots: Vec<(f64, f64)> = (0..=40)
            .map(|i| {
                let x = i as f64 * 0.25;
                (x, (1.0 + x).ln())
            })
            .collect();
        let u = UtilityFn::tabulated(&knots).unwrap();
        let x = u.inverse_marginal(0.3).unwrap();
        assert!((u.marginal(x).unwrap() - 0.3).abs() < 1e-10);
    }

    #[test]
    fn lopes_examples() {
        let g = DistortionFn::lopes(0.5, 1.0, 1.0).unwrap();
        assert!((g.eval(0.5, 0).unwrap() - 0.5).abs() < 1e-15);
        assert!((g.eval(0.0, 1).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(DistortionFn::Identity.eval(0.37, 1).unwrap(), 1.0);
        assert!(matches!(g.value(1.5), Err(Error::Domain(_))));
        assert!(DistortionFn::lopes(1.5, 0.0, 0.0).is_err());
    }

    #[test]
    fn lopes_endpoints_are_exact() {
        for &(nu, a, b) in &[(0.3, 0.7, 2.5), (0.1, 0.0, 0.0), (0.99, 3.0, 0.01)] {
            let g = DistortionFn::lopes(nu, a, b).unwrap();
            assert_eq!(g.value(0.0).unwrap(), 0.0);
            assert_eq!(g.value(1.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn lopes_derivative_integrates_to_one() {
        let g = DistortionFn::lopes(0.3, 1.5, 2.0).unwrap();
        let n = 10_000;
        let h = 1.0 / n as f64;
        // composite Simpson on 10⁴ panels
        let mut s = g.derivative(0.0).unwrap() + g.derivative(1.0).unwrap();
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * g.derivative(i as f64 * h).unwrap();
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn lopes_derivative_matches_central_differences() {
        let g = DistortionFn::lopes(0.4, 2.0, 1.5).unwrap();
        let h = 1e-6;
        for i in 1..=100 {
            let p = i as f64 / 101.0;
            let fd = (g.value(p + h).unwrap() - g.value(p - h).unwrap()) / (2.0 * h);
            assert!((fd - g.derivative(p).unwrap()).abs() < 1e-6, "p = {p}");
        }
    }

    #[test]
    fn valid_spec_has_no_violations() {
        let r = validate_preference(&valid_spec(), 200);
        assert!(r.is_valid(), "{:?}", r.violations);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn bad_endpoint_distortion_is_reported() {
        let mut spec = valid_spec();
        spec.terminal_w = DistortionFn::tabulated(&[(0.0, 0.0), (0.5, 0.6), (1.0, 0.9)]).unwrap();
        let r = validate_preference(&spec, 50);
        assert!(r.has("endpoint value(1)≠1"));
    }

    #[test]
    fn decreasing_utility_is_reported() {
        let mut spec = valid_spec();
        spec.zeta_minus = UtilityFn::tabulated(&[(0.0, 0.0), (1.0, 2.0), (2.0, 1.0)]).unwrap();
        let r = validate_preference(&spec, 50);
        assert!(r.has("monotonicity"));
        assert!(r.violations.iter().all(|v| v.component == "zeta_minus"));
        assert!(!r.warnings.is_empty());
    }
}
