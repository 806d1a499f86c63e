//! Kunita-Watanabe route to the perturbation coefficients.
//!
//! When the risk-tolerance wealth process `R(x,0)` exists, take `R/R₀` as
//! numéraire and `ℝ̃(x,0)` as measure. The claim `P = (A(X̂_T) - 1) x F`
//! splits into its mean, an attainable part `M̃¹` and an orthogonal part
//! `Ñ¹`, and the quadratic problems for `a(d,d)` and `b(d,d)` reduce to this
//! single projection.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::market::{PathFunctional, TreeMarket};
use crate::preferences::UtilitySpec;
use crate::solver::OptimalPair;

#[derive(Clone, Debug, Serialize)]
pub struct KwDecomposition {
    pub p0: f64,
    pub r0: f64,
    pub m_tilde_t: PathFunctional,
    pub n_tilde_t: PathFunctional,
    pub c_a: f64,
    pub c_b: f64,
    /// `max |P_T - p0 + M̃¹_T + Ñ¹_T|`.
    pub reconstruction_residual: f64,
    /// `|E^ℝ̃[M̃¹ Ñ¹]|`.
    pub orthogonality: f64,
    /// `max(|E^ℝ̃[M̃¹]|, |E^ℝ̃[Ñ¹]|)`.
    pub mean_residual: f64,
}

/// Coefficients recovered from the decomposition alone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KwCoefficients {
    pub axx: f64,
    pub axd: f64,
    pub add: f64,
    pub byd: f64,
    pub bdd: f64,
}

/// Decomposes `P_T = (A(X̂_T) - 1) x F` under `ℝ̃(x,0)` with numéraire `R/R₀`.
pub fn kw_decompose(
    pair: &OptimalPair,
    m: &TreeMarket,
    u: &UtilitySpec,
    f: &PathFunctional,
    g: &PathFunctional,
) -> Result<KwDecomposition> {
    let rt = pair.rt_process.as_ref().ok_or(Error::RiskToleranceMissing)?;
    let wt = pair.rtilde_weights.as_ref().ok_or(Error::RiskToleranceMissing)?;
    let r0 = pair.r0.ok_or(Error::RiskToleranceMissing)?;
    let (x, y) = (pair.x, pair.y);
    let a = pair.xhat_t.map(|v| u.rra(v));
    let p_t = a.zip_map(f, |a, f| (a - 1.0) * x * f);

    let cond = m.conditional_expectation(&p_t, wt);
    let masses = m.node_masses(wt);
    let mut attain = vec![0.0; m.len()];
    let mut orth = vec![0.0; m.len()];
    for n in m.internal_nodes() {
        let ch: Vec<usize> = m.node(n).children.clone().collect();
        // proportion of R held in the stock at n, from R_c / R_n = 1 + ρ r_c
        let (num, den) = ch.iter().fold((0.0, 0.0), |(s, q), &c| {
            let r = pair.returns[c];
            let w = masses[c] / masses[n];
            (s + w * (rt[c] / rt[n] - 1.0) * r, q + w * r * r)
        });
        let rho = if den > 0.0 { num / den } else { 0.0 };
        let inc: Vec<f64> = ch
            .iter()
            .map(|&c| {
                let r = pair.returns[c];
                r / (1.0 + rho * r)
            })
            .collect();
        let (sgp, sgg) = ch.iter().zip(&inc).fold((0.0, 0.0), |(s, q), (&c, g)| {
            let w = masses[c] / masses[n];
            (s + w * (cond[c] - cond[n]) * g, q + w * g * g)
        });
        let theta = if sgg > 0.0 { sgp / sgg } else { 0.0 };
        for (&c, g) in ch.iter().zip(&inc) {
            attain[c] = theta * g;
            orth[c] = cond[c] - cond[n] - theta * g;
        }
    }
    let m_nodes = m.path_sum(|c| -attain[c]);
    let n_nodes = m.path_sum(|c| -orth[c]);
    let m_tilde_t = m.leaf_values(&m_nodes);
    let n_tilde_t = m.leaf_values(&n_nodes);
    let p0 = cond[0];

    let rw = &pair.r_weights;
    let c_a = x * x
        * (0..f.len())
            .map(|l| rw[l] * (f[l] * f[l] * (a[l] - 1.0) / a[l] - g[l]))
            .sum::<f64>();
    let c_b = y * y
        * (0..f.len())
            .map(|l| rw[l] * (f[l] * f[l] * (1.0 - a[l]) + g[l]))
            .sum::<f64>();

    let reconstruction_residual = (0..f.len())
        .map(|l| (p_t[l] - p0 + m_tilde_t[l] + n_tilde_t[l]).abs())
        .fold(0.0, f64::max);
    let orthogonality = m_tilde_t.zip_map(&n_tilde_t, |a, b| a * b).expect(wt).abs();
    let mean_residual = m_tilde_t.expect(wt).abs().max(n_tilde_t.expect(wt).abs());
    Ok(KwDecomposition {
        p0,
        r0,
        m_tilde_t,
        n_tilde_t,
        c_a,
        c_b,
        reconstruction_residual,
        orthogonality,
        mean_residual,
    })
}

/// `M¹_T = M̃¹_T R_T / X̂_T` and `N¹_T = (y/x) Ñ¹_T`.
pub fn recover_m1_n1(
    kw: &KwDecomposition,
    pair: &OptimalPair,
    m: &TreeMarket,
) -> Result<(PathFunctional, PathFunctional)> {
    let rt = pair.rt_terminal(m).ok_or(Error::RiskToleranceMissing)?;
    let m1 = PathFunctional::new(
        (0..rt.len())
            .map(|l| kw.m_tilde_t[l] * rt[l] / pair.xhat_t[l])
            .collect(),
    );
    let n1 = kw.n_tilde_t.map(|v| pair.y / pair.x * v);
    Ok((m1, n1))
}

/// `a(x,x)`, `a(x,d)`, `a(d,d)`, `b(y,d)`, `b(d,d)` from the decomposition.
pub fn hessian_from_kw(kw: &KwDecomposition, pair: &OptimalPair) -> Result<KwCoefficients> {
    let wt = pair.rtilde_weights.as_ref().ok_or(Error::RiskToleranceMissing)?;
    let (x, y, r0, p0) = (pair.x, pair.y, kw.r0, kw.p0);
    let en2 = kw.n_tilde_t.map(|v| v * v).expect(wt);
    let em2 = kw.m_tilde_t.map(|v| v * v).expect(wt);
    let axx = x / r0;
    Ok(KwCoefficients {
        axx,
        axd: p0,
        add: r0 / x * (en2 + p0 * p0) + kw.c_a,
        byd: y / x * p0 / axx,
        bdd: r0 / x * (y / x).powi(2) * (em2 + p0 * p0) + kw.c_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::NodeFunction;
    use crate::sensitivity::analyze;
    use crate::solver::solve_unperturbed;
    use approx::assert_relative_eq;

    fn check(m: &TreeMarket, u: &UtilitySpec) {
        let pair = solve_unperturbed(m, u, 1.0).unwrap();
        let rep = analyze(m, u, &pair).unwrap();
        let (f, g) = m.compute_f_g();
        let kw = kw_decompose(&pair, m, u, &f, &g).unwrap();
        assert!(kw.reconstruction_residual < 1e-10);
        assert!(kw.orthogonality < 1e-10);
        assert!(kw.mean_residual < 1e-12);
        let (m1, n1) = recover_m1_n1(&kw, &pair, m).unwrap();
        assert!(m1.max_abs_diff(&rep.m1) < 1e-9, "{}", m1.max_abs_diff(&rep.m1));
        assert!(n1.max_abs_diff(&rep.n1) < 1e-9);
        let c = hessian_from_kw(&kw, &pair).unwrap();
        let d = rep.coefficients;
        for (a, b) in [(c.axx, d.axx), (c.axd, d.axd), (c.add, d.add), (c.byd, d.byd), (c.bdd, d.bdd)] {
            assert!((a - b).abs() < 1e-8, "{c:?} vs {d:?}");
        }
        assert_relative_eq!(kw.r0, pair.x / d.axx, epsilon = 1e-9);
    }

    #[test]
    fn agrees_with_direct_programs() {
        let m = TreeMarket::binomial(4, 0.25, 0.2, 2.0, 1.0).unwrap();
        check(&m, &UtilitySpec::power(0.5).unwrap());
        check(&m, &UtilitySpec::power(-1.0).unwrap());
        check(&m, &UtilitySpec::mixed_power(&[0.3, 0.7]).unwrap());
        let nu = NodeFunction::Affine {
            intercept: 1.0,
            state_slope: 3.0,
            time_slope: -0.5,
        };
        let m = TreeMarket::binomial(2, 0.5, 0.2, 2.0, nu).unwrap();
        check(&m, &UtilitySpec::mixed_power(&[0.3, 0.7]).unwrap());
    }

    #[test]
    fn power_closed_form() {
        let m = TreeMarket::binomial(3, 0.25, 0.2, 2.0, 1.0).unwrap();
        let p = 0.5;
        let u = UtilitySpec::power(p).unwrap();
        let x = 2.0;
        let pair = solve_unperturbed(&m, &u, x).unwrap();
        let (f, g) = m.compute_f_g();
        let kw = kw_decompose(&pair, &m, &u, &f, &g).unwrap();
        assert_relative_eq!(kw.p0, -p * x * f.expect(&pair.r_weights), epsilon = 1e-12);
    }

    #[test]
    fn trivial_claims() {
        let m = TreeMarket::binomial(3, 0.25, 0.2, 2.0, 0.0).unwrap();
        let u = UtilitySpec::mixed_power(&[0.3, 0.7]).unwrap();
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        let (f, g) = m.compute_f_g();
        let kw = kw_decompose(&pair, &m, &u, &f, &g).unwrap();
        assert_eq!(kw.p0, 0.0);
        assert_eq!((kw.c_a, kw.c_b), (0.0, 0.0));
        let c = hessian_from_kw(&kw, &pair).unwrap();
        assert_eq!([c.axd, c.add, c.byd, c.bdd], [0.0; 4]);

        let m = TreeMarket::binomial(3, 0.25, 0.2, 2.0, 1.0).unwrap();
        let u = UtilitySpec::log();
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        let (f, g) = m.compute_f_g();
        let kw = kw_decompose(&pair, &m, &u, &f, &g).unwrap();
        assert!(kw.m_tilde_t.max_abs() < 1e-15 && kw.n_tilde_t.max_abs() < 1e-15);
    }

    #[test]
    fn missing_risk_tolerance_is_typed() {
        let m = TreeMarket::trinomial(2, 0.25, 0.2, 2.0, 1.0).unwrap();
        let u = UtilitySpec::mixed_power(&[0.3, 0.7]).unwrap();
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        let (f, g) = m.compute_f_g();
        assert_eq!(kw_decompose(&pair, &m, &u, &f, &g).unwrap_err(), Error::RiskToleranceMissing);
    }
}
