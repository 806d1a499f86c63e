//! Exact primal and dual solutions of the expected-utility problem on a tree.
//!
//! Homothetic utilities (power, log) are solved by backward induction with a
//! one-dimensional concave maximisation over the proportion at every node.
//! Other utilities are solved by a damped Newton method over the dollar
//! holdings at every internal node; the objective is concave in the holdings
//! because terminal wealth is linear in them.
//!
//! The dual problem is solved over deflators `y Z (1 + N)` where `Z` is the
//! node-wise Esscher deflator and `N` ranges over the directions that keep
//! `Z (1 + N)` a deflator.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::market::{EdgeValues, PathFunctional, TreeMarket};
use crate::preferences::{Crra, UtilitySpec};

/// Tolerance on the first-order condition residual at every node.
pub const FOC_TOL: f64 = 1e-12;
/// Relative tolerance for the risk-tolerance replication test.
pub const REPLICATION_TOL: f64 = 1e-10;

/// Risk-tolerance wealth process `R(x,0)` replicating `-U'(X_T)/U''(X_T)`.
#[derive(Clone, Debug, Serialize)]
pub struct RiskTolerance {
    pub exists: bool,
    /// Node values of `R`; present only when the replication succeeds.
    pub process: Option<Vec<f64>>,
    pub r0: f64,
    /// Largest relative replication error over all nodes.
    pub replication_residual: f64,
}

/// Unperturbed (or perturbed, for the oracle) optimal primal/dual pair.
#[derive(Clone, Debug, Serialize)]
pub struct OptimalPair {
    pub x: f64,
    pub y: f64,
    pub delta: f64,
    pub u0: f64,
    pub v0: f64,
    /// Edge returns of the market that was solved.
    #[serde(skip)]
    pub returns: EdgeValues,
    #[serde(skip)]
    pub probs: PathFunctional,
    pub xhat_nodes: Vec<f64>,
    pub yhat_nodes: Vec<f64>,
    pub xhat_t: PathFunctional,
    pub yhat_t: PathFunctional,
    /// Optimal proportion at every node (zero at leaves).
    pub pi_hat: Vec<f64>,
    pub r_weights: PathFunctional,
    pub foc_residual: f64,
    pub rt_process: Option<Vec<f64>>,
    pub r0: Option<f64>,
    pub rtilde_weights: Option<PathFunctional>,
}

impl OptimalPair {
    pub fn has_risk_tolerance(&self) -> bool {
        self.rt_process.is_some()
    }

    /// Leafwise `R_T(x,0)`.
    pub fn rt_terminal(&self, m: &TreeMarket) -> Option<PathFunctional> {
        self.rt_process.as_ref().map(|r| m.leaf_values(r))
    }
}

/// Solves the unperturbed problem `u(x,0)`.
pub fn solve_unperturbed(m: &TreeMarket, u: &UtilitySpec, x: f64) -> Result<OptimalPair> {
    let returns = m.unperturbed_returns();
    solve_with_returns(m, u, x, &returns, 0.0)
}

/// Solves the primal problem on the tree with the given edge returns.
pub fn solve_with_returns(
    m: &TreeMarket,
    u: &UtilitySpec,
    x: f64,
    returns: &[f64],
    delta: f64,
) -> Result<OptimalPair> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "x",
            reason: format!("initial wealth must be positive, got {x}"),
        });
    }
    check_no_arbitrage(m, returns)?;
    let pi_hat = match u.crra() {
        Some(c) => crra_proportions(m, c, returns)?,
        None => newton_proportions(m, u, x, returns)?,
    };
    let xhat_nodes: Vec<f64> = m
        .path_product(|c| 1.0 + pi_hat[m.node(c).parent.expect("non-root")] * returns[c])
        .into_iter()
        .map(|v| x * v)
        .collect();
    if let Some(n) = xhat_nodes.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::NonConvergence(format!("optimal wealth not positive at node {n}")));
    }
    let probs = m.leaf_probabilities();
    let xhat_t = m.leaf_values(&xhat_nodes);
    let yhat_t = xhat_t.map(|v| u.du(v));
    let y = xhat_t.zip_map(&yhat_t, |a, b| a * b).expect(&probs) / x;
    let u0 = xhat_t.map(|v| u.u(v)).expect(&probs);
    let v0 = yhat_t.map(|v| u.v(v)).expect(&probs);
    let yhat_nodes = m.conditional_expectation(&yhat_t, &probs);
    let r_weights = PathFunctional::new(
        (0..probs.len())
            .map(|l| probs[l] * xhat_t[l] * yhat_t[l] / (x * y))
            .collect(),
    );
    let foc_residual = foc_residual(m, &yhat_t, &probs, returns);
    if foc_residual > 1e3 * FOC_TOL {
        return Err(Error::NonConvergence(format!(
            "first-order condition residual {foc_residual:e}"
        )));
    }
    let mut pair = OptimalPair {
        x,
        y,
        delta,
        u0,
        v0,
        returns: returns.to_vec(),
        probs,
        xhat_nodes,
        yhat_nodes,
        xhat_t,
        yhat_t,
        pi_hat,
        r_weights,
        foc_residual,
        rt_process: None,
        r0: None,
        rtilde_weights: None,
    };
    let rt = risk_tolerance(&pair, m, u);
    if rt.exists {
        pair.r0 = Some(rt.r0);
        let process = rt.process.expect("exists implies process");
        let rt_t = m.leaf_values(&process);
        pair.rtilde_weights = Some(PathFunctional::new(
            (0..pair.probs.len())
                .map(|l| pair.probs[l] * rt_t[l] * pair.yhat_t[l] / (rt.r0 * pair.y))
                .collect(),
        ));
        pair.rt_process = Some(process);
    }
    Ok(pair)
}

fn check_no_arbitrage(m: &TreeMarket, returns: &[f64]) -> Result<()> {
    for n in m.internal_nodes() {
        let ch = m.node(n).children.clone();
        let pos = ch.clone().any(|c| returns[c] > 0.0);
        let neg = ch.clone().any(|c| returns[c] < 0.0);
        if pos != neg {
            return Err(Error::Unbounded { node: n });
        }
    }
    Ok(())
}

fn is_degenerate(m: &TreeMarket, returns: &[f64], n: usize) -> bool {
    m.node(n).children.clone().all(|c| returns[c] == 0.0)
}

/// Largest relative first-order residual `|E[Y_T r 1_subtree]| / E[Y_T |r| 1_subtree]`.
fn foc_residual(m: &TreeMarket, yhat_t: &PathFunctional, probs: &PathFunctional, returns: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for n in m.internal_nodes() {
        if is_degenerate(m, returns, n) {
            continue;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for c in m.node(n).children.clone() {
            let mass: f64 = m.node(c).leaves.clone().map(|l| probs[l] * yhat_t[l]).sum();
            num += mass * returns[c];
            den += mass * returns[c].abs();
        }
        worst = worst.max(num.abs() / den);
    }
    worst
}

/// Backward induction for homothetic utilities. The value at node `n` is
/// `w^p / p * J(n)` (power) or `ln w + K(n)` (log), so the optimal
/// proportion solves `Σ p_c J_c (1 + π r_c)^{p-1} r_c = 0`.
fn crra_proportions(m: &TreeMarket, crra: Crra, returns: &[f64]) -> Result<Vec<f64>> {
    let p = match crra {
        Crra::Power(p) => p,
        Crra::Log => 0.0,
    };
    let mut j = vec![1.0; m.len()];
    let mut pi = vec![0.0; m.len()];
    for n in m.internal_nodes().rev() {
        if is_degenerate(m, returns, n) {
            j[n] = m.node(n).children.clone().map(|c| m.node(c).prob * j[c]).sum();
            continue;
        }
        let children: Vec<(f64, f64)> = m
            .node(n)
            .children
            .clone()
            .map(|c| (m.node(c).prob * j[c], returns[c]))
            .collect();
        let best = maximize_proportion(&children, p, n)?;
        pi[n] = best;
        j[n] = if p == 0.0 {
            1.0
        } else {
            children
                .iter()
                .map(|(w, r)| w * (1.0 + best * r).powf(p))
                .sum()
        };
    }
    Ok(pi)
}

/// Root of the strictly decreasing map `π -> Σ w (1 + π r)^{p-1} r` on the
/// interval where every `1 + π r` is positive.
pub(crate) fn maximize_proportion(children: &[(f64, f64)], p: f64, node: usize) -> Result<f64> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for &(_, r) in children {
        if r > 0.0 {
            lo = lo.max(-1.0 / r);
        } else if r < 0.0 {
            hi = hi.min(-1.0 / r);
        }
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Unbounded { node });
    }
    let h = |pi: f64| -> (f64, f64, f64) {
        let mut val = 0.0;
        let mut der = 0.0;
        let mut scale = 0.0;
        for &(w, r) in children {
            let z = 1.0 + pi * r;
            let t = w * z.powf(p - 1.0) * r;
            val += t;
            scale += t.abs();
            der += (p - 1.0) * w * z.powf(p - 2.0) * r * r;
        }
        (val, der, scale)
    };
    let (mut a, mut b) = (lo, hi);
    let mut pi = 0.0;
    for _ in 0..500 {
        let (val, der, scale) = h(pi);
        if val.abs() <= 0.25 * FOC_TOL * scale {
            return Ok(pi);
        }
        if val > 0.0 {
            a = pi;
        } else {
            b = pi;
        }
        let mut next = pi - val / der;
        if !(next > a && next < b) {
            next = 0.5 * (a + b);
        }
        if (next - pi).abs() <= 1e-16 * (1.0 + pi.abs()) {
            return Ok(next);
        }
        pi = next;
    }
    let (val, _, scale) = h(pi);
    if val.abs() <= FOC_TOL * scale {
        Ok(pi)
    } else {
        Err(Error::NonConvergence(format!(
            "proportion at node {node} did not converge (residual {:e})",
            val.abs() / scale
        )))
    }
}

/// Damped Newton over dollar holdings for non-homothetic utilities.
fn newton_proportions(m: &TreeMarket, u: &UtilitySpec, x: f64, returns: &[f64]) -> Result<Vec<f64>> {
    let vars: Vec<usize> = m
        .internal_nodes()
        .filter(|&n| !is_degenerate(m, returns, n))
        .collect();
    let mut var_index = vec![usize::MAX; m.len()];
    for (i, &n) in vars.iter().enumerate() {
        var_index[n] = i;
    }
    // per leaf: (variable, return) along the path
    let leaves = m.num_leaves();
    let mut paths: Vec<Vec<(usize, f64)>> = Vec::with_capacity(leaves);
    for l in 0..leaves {
        let mut path = Vec::with_capacity(m.steps());
        let mut c = m.leaf_node(l);
        while let Some(p) = m.node(c).parent {
            if var_index[p] != usize::MAX {
                path.push((var_index[p], returns[c]));
            }
            c = p;
        }
        paths.push(path);
    }
    let probs = m.leaf_probabilities();
    let wealth = |h: &[f64]| -> Vec<f64> {
        paths
            .iter()
            .map(|path| x + path.iter().map(|(i, r)| h[*i] * r).sum::<f64>())
            .collect()
    };
    let objective = |w: &[f64]| -> f64 {
        if w.iter().any(|v| !(*v > 0.0)) {
            return f64::NEG_INFINITY;
        }
        w.iter().enumerate().map(|(l, v)| probs[l] * u.u(*v)).sum()
    };
    let k = vars.len();
    let mut h = vec![0.0; k];
    let mut w = wealth(&h);
    let mut obj = objective(&w);
    for iter in 0..200 {
        let mut grad = DVector::<f64>::zeros(k);
        let mut neg_hess = DMatrix::<f64>::zeros(k, k);
        let mut grad_scale = DVector::<f64>::zeros(k);
        for (l, path) in paths.iter().enumerate() {
            let d1 = probs[l] * u.du(w[l]);
            let d2 = -probs[l] * u.d2u(w[l]);
            for &(i, ri) in path {
                grad[i] += d1 * ri;
                grad_scale[i] += d1 * ri.abs();
                for &(j, rj) in path {
                    neg_hess[(i, j)] += d2 * ri * rj;
                }
            }
        }
        let rel = grad
            .iter()
            .zip(grad_scale.iter())
            .fold(0.0_f64, |acc, (g, s)| acc.max(g.abs() / s));
        if rel <= 0.25 * FOC_TOL {
            break;
        }
        let dir = linalg::solve_psd(&neg_hess, &grad);
        let slope = grad.dot(&dir);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = h.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            let tw = wealth(&trial);
            let tobj = objective(&tw);
            if tobj.is_finite() && tobj >= obj + 1e-4 * t * slope - 1e-15 * obj.abs() {
                h = trial;
                w = tw;
                obj = tobj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            if rel <= FOC_TOL {
                break;
            }
            return Err(Error::NonConvergence(format!(
                "line search failed at iteration {iter} (residual {rel:e})"
            )));
        }
        if t == 1.0 && dir.amax() <= 1e-17 * (1.0 + h.iter().fold(0.0_f64, |a, v| a.max(v.abs()))) {
            break;
        }
    }
    // node wealth and proportions
    let mut node_wealth = vec![x; m.len()];
    for c in 1..m.len() {
        let p = m.node(c).parent.expect("non-root");
        let hold = if var_index[p] == usize::MAX { 0.0 } else { h[var_index[p]] };
        node_wealth[c] = node_wealth[p] + hold * returns[c];
    }
    let mut pi = vec![0.0; m.len()];
    for (i, &n) in vars.iter().enumerate() {
        pi[n] = h[i] / node_wealth[n];
    }
    Ok(pi)
}

/// Attempts to replicate `R_T = -U'(X_T)/U''(X_T)`. `R/X̂` must be an
/// `ℝ(x,0)`-martingale driven by the gains increments `r / (1 + π̂ r)`.
pub fn risk_tolerance(pair: &OptimalPair, m: &TreeMarket, u: &UtilitySpec) -> RiskTolerance {
    let ratio = pair.xhat_t.map(|v| 1.0 / u.rra(v));
    let cond = m.conditional_expectation(&ratio, &pair.r_weights);
    let masses = m.node_masses(&pair.r_weights);
    let mut worst: f64 = 0.0;
    for n in m.internal_nodes() {
        let incs: Vec<(f64, f64, f64)> = m
            .node(n)
            .children
            .clone()
            .map(|c| {
                let r = pair.returns[c];
                (masses[c] / masses[n], cond[c] - cond[n], r / (1.0 + pair.pi_hat[n] * r))
            })
            .collect();
        let resid = local_regression_residual(&incs);
        worst = worst.max(resid / cond[n].abs().max(1e-300));
    }
    let r0 = pair.x * cond[0];
    let exists = worst <= REPLICATION_TOL;
    let process = exists.then(|| {
        pair.xhat_nodes
            .iter()
            .zip(&cond)
            .map(|(xh, c)| xh * c)
            .collect()
    });
    RiskTolerance {
        exists,
        process,
        r0,
        replication_residual: worst,
    }
}

/// Max absolute residual of the weighted regression of `target` on `basis`
/// (no intercept) over children `(weight, target, basis)`.
pub(crate) fn local_regression_residual(incs: &[(f64, f64, f64)]) -> f64 {
    let (num, den) = incs
        .iter()
        .fold((0.0, 0.0), |(a, b), (w, t, g)| (a + w * t * g, b + w * g * g));
    let theta = if den > 0.0 { num / den } else { 0.0 };
    incs.iter()
        .fold(0.0_f64, |acc, (_, t, g)| acc.max((t - theta * g).abs()))
}

/// Leaf weights of `ℝ̃(x,0)`.
pub fn measure_r_tilde(pair: &OptimalPair) -> Result<PathFunctional> {
    pair.rtilde_weights.clone().ok_or(Error::RiskToleranceMissing)
}

/// Largest relative violation of the deflator property of `Ŷ`: for every node
/// and every proportion on the boundary of the positivity interval,
/// `E[Ŷ_c (1 + θ r_c) | n] <= Ŷ_n`.
pub fn deflator_violation(pair: &OptimalPair, m: &TreeMarket) -> f64 {
    let probs_node = m.node_probabilities();
    let mut worst: f64 = 0.0;
    for n in m.internal_nodes() {
        let ch = m.node(n).children.clone();
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for c in ch.clone() {
            let r = pair.returns[c];
            if r > 0.0 {
                lo = lo.max(-1.0 / r);
            } else if r < 0.0 {
                hi = hi.min(-1.0 / r);
            }
        }
        for theta in [lo, 0.0, hi] {
            if !theta.is_finite() {
                continue;
            }
            let e: f64 = ch
                .clone()
                .map(|c| probs_node[c] / probs_node[n] * pair.yhat_nodes[c] * (1.0 + theta * pair.returns[c]))
                .sum();
            worst = worst.max((e - pair.yhat_nodes[n]) / pair.yhat_nodes[n]);
        }
    }
    worst
}

/// Largest relative deviation of `X̂Ŷ` from the martingale property under `ℙ`.
pub fn product_martingale_residual(pair: &OptimalPair, m: &TreeMarket) -> f64 {
    let probs_node = m.node_probabilities();
    let prod: Vec<f64> = pair
        .xhat_nodes
        .iter()
        .zip(&pair.yhat_nodes)
        .map(|(a, b)| a * b)
        .collect();
    let mut worst: f64 = 0.0;
    for n in m.internal_nodes() {
        let e: f64 = m
            .node(n)
            .children
            .clone()
            .map(|c| probs_node[c] / probs_node[n] * prod[c])
            .sum();
        worst = worst.max((e - prod[n]).abs() / prod[n].abs());
    }
    worst
}

/// Dual optimum `v(y)` with its terminal deflator.
#[derive(Clone, Debug)]
pub struct DualSolution {
    pub y: f64,
    pub value: f64,
    pub yhat_t: PathFunctional,
}

/// Node-wise Esscher deflator density `Z_T` (leafwise, relative to `ℙ`):
/// the local measure `q_c ∝ p_c exp(-θ r_c)` with `Σ q_c r_c = 0`.
pub fn esscher_density(m: &TreeMarket, returns: &[f64]) -> Result<Vec<f64>> {
    check_no_arbitrage(m, returns)?;
    let mut ratio = vec![1.0; m.len()];
    for n in m.internal_nodes() {
        if is_degenerate(m, returns, n) {
            continue;
        }
        let ch: Vec<usize> = m.node(n).children.clone().collect();
        let scale = ch.iter().fold(0.0_f64, |a, &c| a.max(returns[c].abs()));
        let f = |theta: f64| -> (f64, f64) {
            let mut v = 0.0;
            let mut d = 0.0;
            for &c in &ch {
                let e = m.node(c).prob * (-theta * (returns[c] / scale)).exp();
                v += e * returns[c] / scale;
                d -= e * (returns[c] / scale).powi(2);
            }
            (v, d)
        };
        let mut theta = 0.0;
        let (mut a, mut b) = (-1e3, 1e3);
        for _ in 0..300 {
            let (v, d) = f(theta);
            if v > 0.0 {
                a = theta;
            } else {
                b = theta;
            }
            let mut next = theta - v / d;
            if !(next > a && next < b) {
                next = 0.5 * (a + b);
            }
            if (next - theta).abs() < 1e-15 * (1.0 + theta.abs()) {
                theta = next;
                break;
            }
            theta = next;
        }
        let weights: Vec<f64> = ch
            .iter()
            .map(|&c| (-theta * (returns[c] / scale)).exp())
            .collect();
        let norm: f64 = ch.iter().zip(&weights).map(|(&c, w)| m.node(c).prob * w).sum();
        for (&c, w) in ch.iter().zip(&weights) {
            ratio[c] = w / norm;
        }
    }
    let density = m.path_product(|c| ratio[c]);
    Ok(density)
}

/// Local basis (lifted to leaves) of functions orthogonal to constants and to
/// the node's increments under the local conditional weights. `weights` are
/// leaf masses of the reference measure, `increments[c]` the increment on
/// edge `parent(c) -> c`.
pub(crate) fn local_complement_basis(
    m: &TreeMarket,
    weights: &PathFunctional,
    increments: &[f64],
) -> Vec<PathFunctional> {
    let masses = m.node_masses(weights);
    let mut out = Vec::new();
    for n in m.internal_nodes() {
        let ch: Vec<usize> = m.node(n).children.clone().collect();
        if ch.len() < 2 || masses[n] <= 0.0 {
            continue;
        }
        let w: Vec<f64> = ch.iter().map(|&c| masses[c] / masses[n]).collect();
        let span = vec![vec![1.0; ch.len()], ch.iter().map(|&c| increments[c]).collect()];
        for v in linalg::weighted_complement(&w, &span) {
            let mut vals = vec![0.0; m.num_leaves()];
            for (k, &c) in ch.iter().enumerate() {
                for l in m.node(c).leaves.clone() {
                    vals[l] = v[k];
                }
            }
            out.push(PathFunctional::new(vals));
        }
    }
    out
}

/// Solves `v(y) = inf E[V(Y_T)]` over deflators with initial value `y`.
pub fn solve_dual(m: &TreeMarket, u: &UtilitySpec, y: f64, returns: &[f64]) -> Result<DualSolution> {
    if !(y > 0.0 && y.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "y",
            reason: format!("must be positive, got {y}"),
        });
    }
    let probs = m.leaf_probabilities();
    let z = m.leaf_values(&esscher_density(m, returns)?);
    let q = z.zip_map(&probs, |a, b| a * b);
    let basis = local_complement_basis(m, &q, returns);
    let k = basis.len();
    let deflator = |phi: &[f64]| -> PathFunctional {
        PathFunctional::new(
            (0..z.len())
                .map(|l| y * z[l] * (1.0 + basis.iter().zip(phi).map(|(b, c)| c * b[l]).sum::<f64>()))
                .collect(),
        )
    };
    let objective = |d: &PathFunctional| -> f64 {
        if d.iter().any(|v| !(*v > 0.0)) {
            return f64::INFINITY;
        }
        d.map(|v| u.v(v)).expect(&probs)
    };
    let mut phi = vec![0.0; k];
    let mut d = deflator(&phi);
    let mut obj = objective(&d);
    for _ in 0..200 {
        if k == 0 {
            break;
        }
        let mut grad = DVector::<f64>::zeros(k);
        let mut hess = DMatrix::<f64>::zeros(k, k);
        let mut scale = DVector::<f64>::zeros(k);
        for l in 0..z.len() {
            let yz = y * z[l];
            let g1 = probs[l] * u.dv(d[l]) * yz;
            let g2 = probs[l] * u.d2v(d[l]) * yz * yz;
            for i in 0..k {
                let bi = basis[i][l];
                if bi == 0.0 {
                    continue;
                }
                grad[i] += g1 * bi;
                scale[i] += (g1 * bi).abs();
                for j in 0..k {
                    hess[(i, j)] += g2 * bi * basis[j][l];
                }
            }
        }
        let rel = grad
            .iter()
            .zip(scale.iter())
            .fold(0.0_f64, |a, (g, s)| a.max(g.abs() / s.max(1e-300)));
        if rel <= 0.25 * FOC_TOL {
            break;
        }
        let dir = -linalg::solve_psd(&hess, &grad);
        let slope = grad.dot(&dir);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = phi.iter().zip(dir.iter()).map(|(a, s)| a + t * s).collect();
            let td = deflator(&trial);
            let tobj = objective(&td);
            if tobj.is_finite() && tobj <= obj + 1e-4 * t * slope + 1e-15 * obj.abs() {
                phi = trial;
                d = td;
                obj = tobj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(DualSolution {
        y,
        value: obj,
        yhat_t: d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preferences::UtilitySpec;
    use approx::assert_relative_eq;

    fn standard() -> TreeMarket {
        TreeMarket::binomial(4, 0.25, 0.2, 2.0, 1.0).unwrap()
    }

    #[test]
    fn martingale_stock_means_no_investment() {
        let m = TreeMarket::binomial(3, 0.25, 0.2, 0.0, 1.0).unwrap();
        for u in [
            UtilitySpec::power(0.5).unwrap(),
            UtilitySpec::log(),
            UtilitySpec::mixed_power(&[0.3, 0.7]).unwrap(),
        ] {
            let pair = solve_unperturbed(&m, &u, 1.7).unwrap();
            assert!(pair.pi_hat.iter().all(|p| p.abs() < 1e-12));
            assert!(pair.xhat_t.iter().all(|v| (v - 1.7).abs() < 1e-12));
            assert_relative_eq!(pair.u0, u.u(1.7), epsilon = 1e-12);
        }
    }

    /// Golden-section search on the one-period objective.
    fn golden(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let (mut fc, mut fd) = (f(c), f(d));
        for _ in 0..300 {
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

    #[test]
    fn one_period_matches_golden_section() {
        let m = TreeMarket::binomial(1, 1.0, 0.1, 2.0, 0.0).unwrap();
        for u in [
            UtilitySpec::power(0.5).unwrap(),
            UtilitySpec::log(),
            UtilitySpec::mixed_power(&[0.3, 0.7]).unwrap(),
        ] {
            let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
            let f = |pi: f64| 0.5 * (u.u(1.0 + pi * 0.12) + u.u(1.0 - pi * 0.08));
            let best = golden(f, -1.0 / 0.12 + 1e-9, 1.0 / 0.08 - 1e-9);
            assert!((pair.pi_hat[0] - best).abs() < 1e-6, "{} vs {}", pair.pi_hat[0], best);
            assert!(f(pair.pi_hat[0]) >= f(best) - 1e-15);
        }
    }

    #[test]
    fn log_utility_marginal_is_proportional_to_the_deflator() {
        let m = TreeMarket::binomial(1, 1.0, 0.1, 2.0, 0.0).unwrap();
        let pair = solve_unperturbed(&m, &UtilitySpec::log(), 1.0).unwrap();
        let z = m.leaf_values(&esscher_density(&m, &pair.returns).unwrap());
        let ratio0 = pair.yhat_t[0] / z[0];
        let ratio1 = pair.yhat_t[1] / z[1];
        assert_relative_eq!(ratio0, ratio1, max_relative = 1e-12);
        assert_relative_eq!(ratio0, pair.y, max_relative = 1e-12);
    }

    #[test]
    fn pair_invariants() {
        let m = standard();
        for u in [
            UtilitySpec::power(0.5).unwrap(),
            UtilitySpec::mixed_power(&[0.3, 0.7]).unwrap(),
        ] {
            let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
            assert!(pair.foc_residual <= FOC_TOL);
            let total: f64 = pair.r_weights.iter().sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-14);
            assert!(pair.r_weights.iter().all(|w| *w > 0.0));
            assert_relative_eq!(pair.u0, pair.v0 + pair.x * pair.y, epsilon = 1e-13);
            assert!(product_martingale_residual(&pair, &m) < 1e-12);
            assert!(deflator_violation(&pair, &m) < 1e-10);
            for l in 0..pair.xhat_t.len() {
                assert_relative_eq!(pair.yhat_t[l], u.du(pair.xhat_t[l]), max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn power_homogeneity() {
        let m = standard();
        let u = UtilitySpec::power(0.5).unwrap();
        let one = solve_unperturbed(&m, &u, 1.0).unwrap();
        let three = solve_unperturbed(&m, &u, 3.0).unwrap();
        for l in 0..one.xhat_t.len() {
            assert_relative_eq!(three.xhat_t[l], 3.0 * one.xhat_t[l], max_relative = 1e-13);
        }
    }

    #[test]
    fn newton_agrees_with_crra_path() {
        // a custom power utility goes through the general Newton solver
        use crate::preferences::CustomUtility;
        use std::sync::Arc;
        let custom = CustomUtility {
            u: Arc::new(|x: f64| 2.0 * x.sqrt()),
            du: Arc::new(|x: f64| 1.0 / x.sqrt()),
            d2u: Arc::new(|x: f64| -0.5 * x.powf(-1.5)),
        };
        let cu = UtilitySpec::custom(custom, 0.5, 0.5).unwrap();
        let m = TreeMarket::trinomial(2, 0.25, 0.2, 2.0, 0.0).unwrap();
        let a = solve_unperturbed(&m, &cu, 1.0).unwrap();
        let b = solve_unperturbed(&m, &UtilitySpec::power(0.5).unwrap(), 1.0).unwrap();
        assert!(a.xhat_t.max_abs_diff(&b.xhat_t) < 1e-11);
        assert_relative_eq!(a.u0, b.u0, max_relative = 1e-13);
    }

    #[test]
    fn risk_tolerance_power_and_log() {
        let m = standard();
        let u = UtilitySpec::power(0.5).unwrap();
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        let rt = risk_tolerance(&pair, &m, &u);
        assert!(rt.exists);
        for (r, xh) in rt.process.unwrap().iter().zip(&pair.xhat_nodes) {
            assert_relative_eq!(*r, xh / 0.5, max_relative = 1e-13);
        }
        assert!(measure_r_tilde(&pair).unwrap().max_abs_diff(&pair.r_weights) < 1e-14);

        let l = UtilitySpec::log();
        let lp = solve_unperturbed(&m, &l, 1.0).unwrap();
        let rt = risk_tolerance(&lp, &m, &l);
        assert!(rt.exists);
        assert!(lp.rt_terminal(&m).unwrap().max_abs_diff(&lp.xhat_t) < 1e-13);
    }

    #[test]
    fn risk_tolerance_complete_tree_mixed() {
        let m = TreeMarket::binomial(1, 1.0, 0.1, 2.0, 0.0).unwrap();
        let u = UtilitySpec::mixed_power(&[0.3, 0.7]).unwrap();
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        assert!(pair.has_risk_tolerance());
        let w = measure_r_tilde(&pair).unwrap();
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
        assert!(w.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn risk_tolerance_absent_on_incomplete_mixed() {
        let m = TreeMarket::trinomial(2, 0.25, 0.2, 2.0, 1.0).unwrap();
        let u = UtilitySpec::mixed_power(&[0.3, 0.7]).unwrap();
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        assert!(!pair.has_risk_tolerance());
        assert_eq!(measure_r_tilde(&pair), Err(Error::RiskToleranceMissing));
    }

    #[test]
    fn dual_matches_primal() {
        for m in [standard(), TreeMarket::trinomial(2, 0.25, 0.2, 2.0, 1.0).unwrap()] {
            let u = UtilitySpec::mixed_power(&[0.3, 0.7]).unwrap();
            let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
            let dual = solve_dual(&m, &u, pair.y, &pair.returns).unwrap();
            assert_relative_eq!(dual.value, pair.v0, epsilon = 1e-11);
            assert!(dual.yhat_t.max_abs_diff(&pair.yhat_t) < 1e-9);
        }
    }

    #[test]
    fn arbitrage_tree_is_rejected() {
        // lambda qv exceeds |dM|: both returns positive
        let m = TreeMarket::binomial(1, 1.0, 0.1, 20.0, 0.0).unwrap();
        let err = solve_unperturbed(&m, &UtilitySpec::log(), 1.0).unwrap_err();
        assert!(matches!(err, Error::Unbounded { .. }));
    }
}
