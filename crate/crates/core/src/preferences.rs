//! Utility functions with bounded relative risk aversion and their convex
//! conjugates.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// User-supplied utility: `(u, du, d2u)` with declared risk-aversion bounds.
#[derive(Clone)]
pub struct CustomUtility {
    pub u: ScalarFn,
    pub du: ScalarFn,
    pub d2u: ScalarFn,
}

impl fmt::Debug for CustomUtility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomUtility(..)")
    }
}

#[derive(Clone, Debug)]
pub enum UtilityKind {
    /// `x^p / p`
    Power { p: f64 },
    /// `ln x`
    Log,
    /// `Σ x^{p_i} / p_i`
    MixedPower { exponents: Vec<f64> },
    Custom(CustomUtility),
}

/// Constant relative risk aversion, used by the homothetic fast paths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Crra {
    Power(f64),
    Log,
}

/// A utility `U` on `(0, ∞)` with `c1 <= A(x) <= c2`, where
/// `A(x) = -x U''(x) / U'(x)`.
#[derive(Clone, Debug)]
pub struct UtilitySpec {
    pub kind: UtilityKind,
    pub c1: f64,
    pub c2: f64,
}

/// Serializable selection of a built-in utility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtilityChoice {
    Power { p: f64 },
    Log,
    MixedPower { exponents: Vec<f64> },
}

impl UtilityChoice {
    pub fn build(&self) -> Result<UtilitySpec> {
        match self {
            UtilityChoice::Power { p } => UtilitySpec::power(*p),
            UtilityChoice::Log => Ok(UtilitySpec::log()),
            UtilityChoice::MixedPower { exponents } => UtilitySpec::mixed_power(exponents),
        }
    }
}

impl UtilitySpec {
    pub fn power(p: f64) -> Result<Self> {
        if !p.is_finite() || p >= 1.0 || p == 0.0 {
            return Err(invalid("p", format!("power utility needs p < 1, p != 0; got {p}")));
        }
        Ok(Self {
            kind: UtilityKind::Power { p },
            c1: 1.0 - p,
            c2: 1.0 - p,
        })
    }

    pub fn log() -> Self {
        Self {
            kind: UtilityKind::Log,
            c1: 1.0,
            c2: 1.0,
        }
    }

    pub fn mixed_power(exponents: &[f64]) -> Result<Self> {
        if exponents.is_empty() {
            return Err(invalid("exponents", "need at least one exponent"));
        }
        for &p in exponents {
            if !p.is_finite() || p >= 1.0 || p == 0.0 {
                return Err(invalid(
                    "exponents",
                    format!("each exponent needs p < 1, p != 0; got {p}"),
                ));
            }
        }
        let max = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = exponents.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(Self {
            kind: UtilityKind::MixedPower {
                exponents: exponents.to_vec(),
            },
            c1: 1.0 - max,
            c2: 1.0 - min,
        })
    }

    /// Custom utility with declared bounds; call [`UtilitySpec::verify_bounds`]
    /// to check them on a grid.
    pub fn custom(custom: CustomUtility, c1: f64, c2: f64) -> Result<Self> {
        if !(c1 > 0.0 && c2 >= c1 && c2.is_finite()) {
            return Err(invalid("c1/c2", format!("need 0 < c1 <= c2 < ∞, got ({c1}, {c2})")));
        }
        Ok(Self {
            kind: UtilityKind::Custom(custom),
            c1,
            c2,
        })
    }

    pub fn crra(&self) -> Option<Crra> {
        match &self.kind {
            UtilityKind::Power { p } => Some(Crra::Power(*p)),
            UtilityKind::Log => Some(Crra::Log),
            _ => None,
        }
    }

    pub fn u(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        match &self.kind {
            UtilityKind::Power { p } => x.powf(*p) / p,
            UtilityKind::Log => x.ln(),
            UtilityKind::MixedPower { exponents } => {
                exponents.iter().map(|p| x.powf(*p) / p).sum()
            }
            UtilityKind::Custom(c) => (c.u)(x),
        }
    }

    pub fn du(&self, x: f64) -> f64 {
        match &self.kind {
            UtilityKind::Power { p } => x.powf(p - 1.0),
            UtilityKind::Log => 1.0 / x,
            UtilityKind::MixedPower { exponents } => {
                exponents.iter().map(|p| x.powf(p - 1.0)).sum()
            }
            UtilityKind::Custom(c) => (c.du)(x),
        }
    }

    pub fn d2u(&self, x: f64) -> f64 {
        match &self.kind {
            UtilityKind::Power { p } => (p - 1.0) * x.powf(p - 2.0),
            UtilityKind::Log => -1.0 / (x * x),
            UtilityKind::MixedPower { exponents } => {
                exponents.iter().map(|p| (p - 1.0) * x.powf(p - 2.0)).sum()
            }
            UtilityKind::Custom(c) => (c.d2u)(x),
        }
    }

    /// Relative risk aversion `A(x)`.
    pub fn rra(&self, x: f64) -> f64 {
        match &self.kind {
            UtilityKind::Power { p } => 1.0 - p,
            UtilityKind::Log => 1.0,
            _ => -x * self.d2u(x) / self.du(x),
        }
    }

    /// Inverse marginal utility `I(y) = (U')^{-1}(y) = -V'(y)`.
    pub fn inverse_marginal(&self, y: f64) -> f64 {
        match &self.kind {
            UtilityKind::Power { p } => y.powf(1.0 / (p - 1.0)),
            UtilityKind::Log => 1.0 / y,
            _ => self.invert_marginal(y),
        }
    }

    /// Solves `ln U'(e^s) = ln y` by safeguarded Newton. The slope of the
    /// left side is `-A(e^s)`, which lies in `[-c2, -c1]`.
    fn invert_marginal(&self, y: f64) -> f64 {
        let target = y.ln();
        let g = |s: f64| self.du(s.exp()).ln() - target;
        let g0 = g(0.0);
        let (mut lo, mut hi) = if g0 > 0.0 {
            (g0 / self.c2 * 0.5, g0 / self.c1 * 2.0)
        } else {
            (g0 / self.c1 * 2.0, g0 / self.c2 * 0.5)
        };
        // widen until the root is bracketed, in case declared bounds are loose
        for _ in 0..200 {
            if g(lo) >= 0.0 {
                break;
            }
            lo -= 1.0 + lo.abs();
        }
        for _ in 0..200 {
            if g(hi) <= 0.0 {
                break;
            }
            hi += 1.0 + hi.abs();
        }
        let mut s = 0.5 * (lo + hi);
        for _ in 0..200 {
            let x = s.exp();
            let gs = g(s);
            if gs > 0.0 {
                lo = s;
            } else {
                hi = s;
            }
            if gs == 0.0 {
                break;
            }
            let slope = -self.rra(x);
            let mut next = s - gs / slope;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - s).abs() <= 1e-15 * (1.0 + s.abs()) {
                s = next;
                break;
            }
            s = next;
        }
        s.exp()
    }

    /// Convex conjugate `V(y) = sup_x (U(x) - x y)`.
    pub fn v(&self, y: f64) -> f64 {
        match &self.kind {
            UtilityKind::Power { p } => {
                let q = p / (1.0 - p);
                y.powf(-q) / q
            }
            UtilityKind::Log => -y.ln() - 1.0,
            _ => {
                let x = self.inverse_marginal(y);
                self.u(x) - x * y
            }
        }
    }

    pub fn dv(&self, y: f64) -> f64 {
        -self.inverse_marginal(y)
    }

    pub fn d2v(&self, y: f64) -> f64 {
        match &self.kind {
            UtilityKind::Power { p } => {
                let q = p / (1.0 - p);
                (q + 1.0) * y.powf(-q - 2.0)
            }
            UtilityKind::Log => 1.0 / (y * y),
            _ => -1.0 / self.d2u(self.inverse_marginal(y)),
        }
    }

    /// Relative risk tolerance `B(y) = -y V''(y) / V'(y)`.
    pub fn rrt(&self, y: f64) -> f64 {
        match &self.kind {
            UtilityKind::Power { p } => 1.0 / (1.0 - p),
            UtilityKind::Log => 1.0,
            _ => -y * self.d2v(y) / self.dv(y),
        }
    }

    /// Checks strict monotonicity, strict concavity and the declared
    /// risk-aversion bounds on a grid. Returns the points that fail.
    pub fn verify_bounds(&self, grid: &[f64]) -> Vec<f64> {
        let slack = 1e-12;
        grid.iter()
            .cloned()
            .filter(|&x| {
                let a = self.rra(x);
                !(self.du(x) > 0.0
                    && self.d2u(x) < 0.0
                    && a >= self.c1 * (1.0 - slack)
                    && a <= self.c2 * (1.0 + slack))
            })
            .collect()
    }
}

/// Which growth bound a violation refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum GrowthBound {
    /// `U'(zx) <= (z^{-c2} + 1) U'(x)`
    Marginal,
    /// `-V'(zx) <= (z^{-1/c1} + 1) (-V'(x))`
    ConjugateMarginal,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrowthViolation {
    pub z: f64,
    pub x: f64,
    pub bound: GrowthBound,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GrowthReport {
    pub checked: usize,
    pub violations: Vec<GrowthViolation>,
}

impl GrowthReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Evaluates both growth inequalities at every `(z, x)` of the grid.
pub fn check_growth_inequalities(u: &UtilitySpec, grid: &[(f64, f64)]) -> Result<GrowthReport> {
    let mut report = GrowthReport::default();
    for &(z, x) in grid {
        if !(z > 0.0 && x > 0.0) {
            return Err(Error::InvalidParameter {
                name: "grid",
                reason: format!("need z, x > 0, got ({z}, {x})"),
            });
        }
        let checks = [
            (
                GrowthBound::Marginal,
                u.du(z * x),
                (z.powf(-u.c2) + 1.0) * u.du(x),
            ),
            (
                GrowthBound::ConjugateMarginal,
                -u.dv(z * x),
                (z.powf(-1.0 / u.c1) + 1.0) * (-u.dv(x)),
            ),
        ];
        for (bound, lhs, rhs) in checks {
            report.checked += 1;
            if !(lhs <= rhs * (1.0 + 1e-12)) {
                report.violations.push(GrowthViolation {
                    z,
                    x,
                    bound,
                    lhs,
                    rhs,
                });
            }
        }
    }
    Ok(report)
}

/// `n` log-spaced points between `lo` and `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}
