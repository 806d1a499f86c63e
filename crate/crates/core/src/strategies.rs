//! Corrected trading strategies matching the perturbed value function to
//! second order.
//!
//! The correctors `γ⁰`, `γ¹` are the integrands of `M⁰/x` and `M¹/x`
//! against the numéraire-discounted stock; they are added to the base
//! proportion, stopped once the correctors or their predictable quadratic
//! variation reach `x/ε`, and the resulting proportion is traded in the
//! perturbed market.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::market::{PathFunctional, TreeMarket};
use crate::preferences::UtilitySpec;
use crate::sensitivity::SensitivityReport;
use crate::solver::OptimalPair;

pub const EPS_MIN: f64 = 1e-3;
pub const EPS_MAX: f64 = 1.0;
/// Tolerance of the integrand replay.
pub const REPLAY_TOL: f64 = 1e-9;

/// Integrands of a corrector against `M^R` with its node values.
#[derive(Clone, Debug)]
pub struct Corrector {
    /// Integrand at every internal node (zero at leaves).
    pub gamma: Vec<f64>,
    /// `ℝ`-conditional expectation of the target at every node.
    pub values: Vec<f64>,
    /// Predictable quadratic variation under `ℝ` accumulated up to each node.
    pub qv: Vec<f64>,
    /// Largest leafwise replay error of `γ · M^R` against the target.
    pub replay_residual: f64,
}

/// `γ` with `γ · M^R = target` on every path, where the increments of `M^R`
/// are `r / (1 + π̂ r)`.
pub fn derive_corrector(pair: &OptimalPair, m: &TreeMarket, target: &PathFunctional) -> Result<Corrector> {
    let rw = &pair.r_weights;
    let values = m.conditional_expectation(target, rw);
    let masses = m.node_masses(rw);
    let mut gamma = vec![0.0; m.len()];
    let mut step_qv = vec![0.0; m.len()];
    let inc = |c: usize| -> f64 {
        let n = m.node(c).parent.expect("non-root");
        let r = pair.returns[c];
        r / (1.0 + pair.pi_hat[n] * r)
    };
    for n in m.internal_nodes() {
        let (mut sgd, mut sgg, mut sdd) = (0.0, 0.0, 0.0);
        for c in m.node(n).children.clone() {
            let w = masses[c] / masses[n];
            let d = values[c] - values[n];
            let g = inc(c);
            sgd += w * g * d;
            sgg += w * g * g;
            sdd += w * d * d;
        }
        if sgg == 0.0 {
            if sdd.sqrt() > REPLAY_TOL * (1.0 + values[n].abs()) {
                return Err(Error::DegenerateIncrement { node: n });
            }
            continue;
        }
        gamma[n] = sgd / sgg;
        step_qv[n] = sdd;
    }
    let replay = m.path_sum(|c| gamma[m.node(c).parent.expect("non-root")] * inc(c));
    let replay_t = m.leaf_values(&replay);
    let replay_residual = replay_t.max_abs_diff(target);
    let qv = m.path_sum(|c| step_qv[m.node(c).parent.expect("non-root")]);
    Ok(Corrector {
        gamma,
        values,
        qv,
        replay_residual,
    })
}

/// `(γ⁰, γ¹)` reproducing `M⁰/x` and `M¹/x`.
pub fn derive_gammas(pair: &OptimalPair, report: &SensitivityReport, m: &TreeMarket) -> Result<(Corrector, Corrector)> {
    let x = pair.x;
    let g0 = derive_corrector(pair, m, &report.m0.map(|v| v / x))?;
    let g1 = derive_corrector(pair, m, &report.m1.map(|v| v / x))?;
    Ok((g0, g1))
}

/// `ε = (Δx² + δ²)^{1/4}` clamped to `[EPS_MIN, EPS_MAX]`.
pub fn select_epsilon(dx: f64, delta: f64) -> f64 {
    select_epsilon_within(dx, delta, EPS_MIN, EPS_MAX)
}

pub fn select_epsilon_within(dx: f64, delta: f64, lo: f64, hi: f64) -> f64 {
    (dx * dx + delta * delta).powf(0.25).clamp(lo, hi)
}

/// Base proportion plus truncated correctors for given offsets.
#[derive(Clone, Debug)]
pub struct CorrectedStrategy {
    pub x: f64,
    pub dx: f64,
    pub delta: f64,
    pub eps: f64,
    pub pi_hat: Vec<f64>,
    pub gamma0: Vec<f64>,
    pub gamma1: Vec<f64>,
    /// Nodes at or after the stopping time of the first corrector.
    pub stopped0: Vec<bool>,
    pub stopped1: Vec<bool>,
}

impl CorrectedStrategy {
    pub fn new(
        pair: &OptimalPair,
        m: &TreeMarket,
        g0: &Corrector,
        g1: &Corrector,
        dx: f64,
        delta: f64,
        eps: f64,
    ) -> Self {
        let x = pair.x;
        // ⟨M⟩ is in units of M/x here, so compare x·(M/x) and x²·⟨M/x⟩
        let stopped = |c: &Corrector| -> Vec<bool> {
            let level = x / eps;
            let mut out = vec![false; m.len()];
            for n in 0..m.len() {
                let hit = (x * c.values[n]).abs() >= level || x * x * c.qv[n] >= level;
                out[n] = hit || m.node(n).parent.is_some_and(|p| out[p]);
            }
            out
        };
        Self {
            x,
            dx,
            delta,
            eps,
            pi_hat: pair.pi_hat.clone(),
            gamma0: g0.gamma.clone(),
            gamma1: g1.gamma.clone(),
            stopped0: stopped(g0),
            stopped1: stopped(g1),
        }
    }

    /// Proportion held over the step leaving node `n`.
    pub fn proportion(&self, m: &TreeMarket, n: usize) -> f64 {
        let g0 = if self.stopped0[n] { 0.0 } else { self.gamma0[n] };
        let g1 = if self.stopped1[n] { 0.0 } else { self.gamma1[n] };
        self.pi_hat[n] + self.dx * g0 + self.delta * (m.node(n).nu + g1)
    }

    /// Dump rows: node, time, base proportion, correctors, truncation flags.
    pub fn rows(&self, m: &TreeMarket) -> Vec<StrategyRow> {
        m.internal_nodes()
            .map(|n| StrategyRow {
                node: n,
                time: m.times()[m.node(n).level],
                pi_hat: self.pi_hat[n],
                gamma0: self.gamma0[n],
                gamma1: self.gamma1[n],
                truncated0: self.stopped0[n],
                truncated1: self.stopped1[n],
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StrategyRow {
    pub node: usize,
    pub time: f64,
    pub pi_hat: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub truncated0: bool,
    pub truncated1: bool,
}

/// Terminal wealth `(x + Δx) Π (1 + θ ΔS^δ)` of the corrected strategy.
pub fn corrected_wealth(cs: &CorrectedStrategy, m: &TreeMarket) -> Result<PathFunctional> {
    let returns = m.perturbed_returns(cs.delta)?;
    let theta: Vec<f64> = (0..m.len())
        .map(|n| if m.node(n).is_leaf() { 0.0 } else { cs.proportion(m, n) })
        .collect();
    let mut wealth = vec![cs.x + cs.dx; m.len()];
    if !(wealth[0] > 0.0) {
        return Err(Error::PositivityViolation { node: 0 });
    }
    for c in 1..m.len() {
        let p = m.node(c).parent.expect("non-root");
        let factor = 1.0 + theta[p] * returns[c];
        if !(factor > 0.0) {
            return Err(Error::PositivityViolation { node: c });
        }
        wealth[c] = wealth[p] * factor;
    }
    Ok(m.leaf_values(&wealth))
}

/// One row of the deficit table.
#[derive(Clone, Debug, Serialize)]
pub struct DeficitRow {
    pub t: f64,
    pub dx: f64,
    pub delta: f64,
    pub eps: f64,
    pub u_oracle: f64,
    pub u_corrected: f64,
    pub deficit: f64,
}

/// `u(x + Δx, δ) - E[U(X^{Δx,δ,ε})]` with `ε` from [`select_epsilon`].
pub fn deficit(
    m: &TreeMarket,
    u: &UtilitySpec,
    pair: &OptimalPair,
    gammas: &(Corrector, Corrector),
    dx: f64,
    delta: f64,
    u_oracle: f64,
) -> Result<DeficitRow> {
    let eps = select_epsilon(dx, delta);
    let cs = CorrectedStrategy::new(pair, m, &gammas.0, &gammas.1, dx, delta, eps);
    let w = corrected_wealth(&cs, m)?;
    let u_corrected = w.map(|v| u.u(v)).expect(&pair.probs);
    Ok(DeficitRow {
        t: 0.0,
        dx,
        delta,
        eps,
        u_oracle,
        u_corrected,
        deficit: u_oracle - u_corrected,
    })
}
