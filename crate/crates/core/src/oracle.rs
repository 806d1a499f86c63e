//! Brute-force ground truth on trees: exact solutions of the perturbed
//! problems, finite differences, and convergence-order fits.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::market::TreeMarket;
use crate::preferences::UtilitySpec;
use crate::sensitivity::SensitivityReport;
use crate::solver::{self, DualSolution, OptimalPair};

/// Base step of the central differences.
pub const FD_STEP: f64 = 1e-4;
/// Residuals below this floor are treated as exact zeros by [`fit_order`].
pub const FIT_FLOOR: f64 = 1e-14;
/// Default probe rays in the `(Δx, δ)` plane.
pub const RAYS: [(f64, f64); 4] = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0)];
/// Default radius of the probe rays.
pub const RAY_RADIUS: f64 = 0.05;

/// Optimal pair of `u(x, delta)` on the perturbed tree.
pub fn brute_solve(m: &TreeMarket, u: &UtilitySpec, x: f64, delta: f64) -> Result<OptimalPair> {
    let returns = m.perturbed_returns(delta)?;
    solver::solve_with_returns(m, u, x, &returns, delta)
}

/// Dual optimum `v(y, delta)` on the perturbed tree.
pub fn brute_dual(m: &TreeMarket, u: &UtilitySpec, y: f64, delta: f64) -> Result<DualSolution> {
    let returns = m.perturbed_returns(delta)?;
    solver::solve_dual(m, u, y, &returns)
}

/// Golden-section maximiser of a unimodal function on `[a, b]`.
pub fn golden_section_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol * (1.0 + a.abs().max(b.abs())) {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Optimal proportion at the root of a one-period tree by golden-section
/// search over the positivity interval.
pub fn one_period_golden(m: &TreeMarket, u: &UtilitySpec, x: f64, returns: &[f64]) -> Result<f64> {
    if m.steps() != 1 {
        return Err(Error::InvalidParameter {
            name: "steps",
            reason: "golden-section cross-check needs a one-period tree".into(),
        });
    }
    let ch: Vec<usize> = m.node(0).children.clone().collect();
    let lo = ch
        .iter()
        .filter(|&&c| returns[c] > 0.0)
        .map(|&c| -1.0 / returns[c])
        .fold(f64::NEG_INFINITY, f64::max);
    let hi = ch
        .iter()
        .filter(|&&c| returns[c] < 0.0)
        .map(|&c| -1.0 / returns[c])
        .fold(f64::INFINITY, f64::min);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Unbounded { node: 0 });
    }
    let width = hi - lo;
    let obj = |pi: f64| -> f64 {
        ch.iter()
            .map(|&c| m.node(c).prob * u.u(x * (1.0 + pi * returns[c])))
            .sum()
    };
    Ok(golden_section_max(obj, lo + 1e-9 * width, hi - 1e-9 * width, 1e-13))
}

/// Least-squares slope of `ln residual` against `ln t`.
///
/// Points with residual below [`FIT_FLOOR`] are exact zeros and are dropped;
/// when fewer than two points remain the fit returns `+∞`.
pub fn fit_order(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::DegenerateFit(format!("need at least 3 points, got {}", points.len())));
    }
    if points.windows(2).any(|w| !(w[1].0 < w[0].0)) || points.iter().any(|p| !(p.0 > 0.0)) {
        return Err(Error::DegenerateFit("t must be positive and decreasing".into()));
    }
    let kept: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, r)| r.abs() >= FIT_FLOOR)
        .map(|(t, r)| (t.ln(), r.abs().ln()))
        .collect();
    if kept.len() < 2 {
        return Ok(f64::INFINITY);
    }
    let n = kept.len() as f64;
    let mx = kept.iter().map(|p| p.0).sum::<f64>() / n;
    let my = kept.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = kept.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = kept.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Central difference with one Richardson refinement.
pub fn richardson_derivative(f: impl Fn(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let d = |h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    let coarse = d(h)?;
    let fine = d(0.5 * h)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// `∂u/∂δ (x, 0)` of the oracle.
pub fn fd_u_delta(m: &TreeMarket, u: &UtilitySpec, x: f64, h: f64) -> Result<f64> {
    richardson_derivative(|d| Ok(brute_solve(m, u, x, d)?.u0), h)
}

/// `∂u/∂x (x, delta)` of the oracle.
pub fn fd_u_x(m: &TreeMarket, u: &UtilitySpec, x: f64, delta: f64, h: f64) -> Result<f64> {
    richardson_derivative(|dx| Ok(brute_solve(m, u, x + dx, delta)?.u0), h)
}

/// `∂²u/∂x∂δ (x, 0)` of the oracle by nested Richardson differences.
pub fn fd_u_x_delta(m: &TreeMarket, u: &UtilitySpec, x: f64, h: f64) -> Result<f64> {
    richardson_derivative(|d| fd_u_x(m, u, x, d, h), h)
}

/// One probe of the second-order expansion.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeRow {
    pub ray: usize,
    pub t: f64,
    pub dx: f64,
    pub delta: f64,
    pub u_oracle: f64,
    pub u_pred: f64,
    pub residual: f64,
}

/// Oracle-vs-expansion residuals along one ray with the fitted order.
#[derive(Clone, Debug, Serialize)]
pub struct RayCheck {
    pub direction: (f64, f64),
    pub rows: Vec<ProbeRow>,
    pub slope: f64,
}

/// Scales `t ∈ {2⁻², …, 2⁻⁶}` used by the order fits.
pub fn default_scales() -> Vec<f64> {
    (2..=6).map(|k| 0.5f64.powi(k)).collect()
}

/// Residuals of the primal expansion along each ray.
pub fn expansion_check(
    m: &TreeMarket,
    u: &UtilitySpec,
    report: &SensitivityReport,
    rays: &[(f64, f64)],
    radius: f64,
    scales: &[f64],
) -> Result<Vec<RayCheck>> {
    let x = report.x;
    let jobs: Vec<(usize, f64)> = (0..rays.len())
        .flat_map(|r| scales.iter().map(move |&t| (r, t)))
        .collect();
    let rows: Vec<ProbeRow> = jobs
        .par_iter()
        .map(|&(r, t)| {
            let (dx, delta) = (rays[r].0 * t * radius, rays[r].1 * t * radius);
            let u_oracle = brute_solve(m, u, x + dx, delta)?.u0;
            let u_pred = report.predict_u(dx, delta);
            Ok(ProbeRow {
                ray: r,
                t,
                dx,
                delta,
                u_oracle,
                u_pred,
                residual: (u_oracle - u_pred).abs(),
            })
        })
        .collect::<Result<_>>()?;
    rays.iter()
        .enumerate()
        .map(|(r, &direction)| {
            let rows: Vec<ProbeRow> = rows.iter().filter(|p| p.ray == r).cloned().collect();
            let pts: Vec<(f64, f64)> = rows.iter().map(|p| (p.t, p.residual)).collect();
            let slope = fit_order(&pts)?;
            Ok(RayCheck { direction, rows, slope })
        })
        .collect()
}

/// Residuals of the dual expansion along each ray in `(Δy, δ)`.
pub fn dual_expansion_check(
    m: &TreeMarket,
    u: &UtilitySpec,
    report: &SensitivityReport,
    rays: &[(f64, f64)],
    radius: f64,
    scales: &[f64],
) -> Result<Vec<RayCheck>> {
    let y = report.y;
    let mut out = Vec::with_capacity(rays.len());
    for (r, &direction) in rays.iter().enumerate() {
        let rows: Vec<ProbeRow> = scales
            .par_iter()
            .map(|&t| {
                let (dy, delta) = (direction.0 * t * radius * y, direction.1 * t * radius);
                let v_oracle = brute_dual(m, u, y + dy, delta)?.value;
                let v_pred = report.predict_v(dy, delta);
                Ok(ProbeRow {
                    ray: r,
                    t,
                    dx: dy,
                    delta,
                    u_oracle: v_oracle,
                    u_pred: v_pred,
                    residual: (v_oracle - v_pred).abs(),
                })
            })
            .collect::<Result<_>>()?;
        let pts: Vec<(f64, f64)> = rows.iter().map(|p| (p.t, p.residual)).collect();
        let slope = fit_order(&pts)?;
        out.push(RayCheck { direction, rows, slope });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensitivity::{analyze, first_order};
    use crate::solver::solve_unperturbed;
    use approx::assert_relative_eq;

    #[test]
    fn synthetic_orders() {
        let ts = default_scales();
        let cubic: Vec<(f64, f64)> = ts.iter().map(|t| (*t, t.powi(3))).collect();
        assert_relative_eq!(fit_order(&cubic).unwrap(), 3.0, epsilon = 1e-12);
        let quad: Vec<(f64, f64)> = ts.iter().map(|t| (*t, 7.0 * t * t)).collect();
        assert_relative_eq!(fit_order(&quad).unwrap(), 2.0, epsilon = 1e-12);
        let zeros: Vec<(f64, f64)> = ts.iter().map(|t| (*t, 0.0)).collect();
        assert_eq!(fit_order(&zeros).unwrap(), f64::INFINITY);
        assert!(fit_order(&cubic[..2]).is_err());
    }

    #[test]
    fn zero_delta_matches_unperturbed_bitwise() {
        let m = TreeMarket::binomial(3, 0.25, 0.2, 2.0, 1.0).unwrap();
        let u = UtilitySpec::mixed_power(&[0.3, 0.7]).unwrap();
        let a = brute_solve(&m, &u, 1.0, 0.0).unwrap();
        let b = solve_unperturbed(&m, &u, 1.0).unwrap();
        assert_eq!(a.xhat_t, b.xhat_t);
        assert_eq!(a.u0, b.u0);
    }

    #[test]
    fn newton_matches_golden_section() {
        let m = TreeMarket::binomial(1, 1.0, 0.1, 2.0, 1.0).unwrap();
        for u in [UtilitySpec::power(0.5).unwrap(), UtilitySpec::mixed_power(&[0.3, 0.7]).unwrap()] {
            for delta in [0.0, 0.01, -0.3] {
                let pair = brute_solve(&m, &u, 1.0, delta).unwrap();
                let g = one_period_golden(&m, &u, 1.0, &pair.returns).unwrap();
                assert!((pair.pi_hat[0] - g).abs() < 1e-6);
                let value = |pi: f64| -> f64 {
                    (1..3).map(|c| 0.5 * u.u(1.0 + pi * pair.returns[c])).sum()
                };
                assert!((value(pair.pi_hat[0]) - value(g)).abs() <= 1e-11);
            }
        }
    }

    #[test]
    fn perturbation_sign_on_martingale_stock() {
        let m = TreeMarket::binomial(1, 1.0, 0.1, 0.0, 1.0).unwrap();
        let u = UtilitySpec::power(0.5).unwrap();
        for delta in [0.05, -0.05] {
            let pair = brute_solve(&m, &u, 1.0, delta).unwrap();
            assert_eq!(pair.pi_hat[0].signum(), delta.signum());
        }
    }

    #[test]
    fn first_order_matches_finite_difference() {
        let m = TreeMarket::binomial(1, 1.0, 0.1, 2.0, 1.0).unwrap();
        let u = UtilitySpec::power(0.5).unwrap();
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        let (f, _) = m.compute_f_g();
        let exact = first_order(&pair, &f);
        let fd = fd_u_delta(&m, &u, 1.0, FD_STEP).unwrap();
        assert_relative_eq!(fd, exact, max_relative = 1e-6);
    }

    #[test]
    fn cross_derivative_matches_hessian() {
        let m = TreeMarket::binomial(4, 0.25, 0.2, 2.0, 1.0).unwrap();
        let u = UtilitySpec::power(0.5).unwrap();
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        let rep = analyze(&m, &u, &pair).unwrap();
        let fd = fd_u_x_delta(&m, &u, 1.0, 1e-2).unwrap();
        assert!((fd - rep.hessian_u[0][1]).abs() < 2e-4, "{fd} vs {}", rep.hessian_u[0][1]);
    }

    #[test]
    fn oracle_conjugacy() {
        let m = TreeMarket::binomial(3, 0.25, 0.2, 2.0, 1.0).unwrap();
        let u = UtilitySpec::mixed_power(&[0.3, 0.7]).unwrap();
        for delta in [0.0, 0.02, -0.02] {
            let pair = brute_solve(&m, &u, 1.0, delta).unwrap();
            let yd = fd_u_x(&m, &u, 1.0, delta, FD_STEP).unwrap();
            assert_relative_eq!(yd, pair.y, max_relative = 1e-6);
            let dual = brute_dual(&m, &u, pair.y, delta).unwrap();
            assert_relative_eq!(pair.u0, dual.value + pair.y, epsilon = 1e-8);
        }
    }
}
