//! First- and second-order sensitivities of the value functions in the
//! initial wealth and the perturbation size.
//!
//! The second-order coefficients are minima of quadratic problems over two
//! complementary spaces of `ℝ(x,0)`-martingales: `𝓜²`, the gains of
//! zero-cost strategies in units of the numéraire `X̂/x`, and `𝓝²`, its
//! orthogonal complement among zero-mean terminal values. On a tree both are
//! spanned by node-local increments.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::Result;
use crate::linalg;
use crate::market::{PathFunctional, TreeMarket};
use crate::preferences::UtilitySpec;
use crate::solver::{self, OptimalPair};

/// Spanning sets of `𝓜²(x,0)` and `𝓝²(y,0)` as leaf functionals.
#[derive(Clone, Debug)]
pub struct AttainableSpace {
    /// One generator per internal node with a non-degenerate increment;
    /// columns are leaf values.
    pub basis: DMatrix<f64>,
    /// Internal node carrying each generator of `basis`.
    pub basis_nodes: Vec<usize>,
    /// `E^ℝ[b_i b_j]`.
    pub gram: DMatrix<f64>,
    /// Local complement generators, columns are leaf values.
    pub complement: DMatrix<f64>,
    /// Per-edge increments `r / (1 + π̂ r)` of the numéraire-discounted stock.
    pub increments: Vec<f64>,
    /// `1 + dim 𝓜² + dim 𝓝²` equals the number of leaves.
    pub complete_decomposition: bool,
}

impl AttainableSpace {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn complement_dim(&self) -> usize {
        self.complement.ncols()
    }
}

/// Builds the generators of `𝓜²(x,0)` and of its complement `𝓝²(y,0)`.
pub fn build_attainable_space(pair: &OptimalPair, m: &TreeMarket) -> AttainableSpace {
    let mut increments = vec![0.0; m.len()];
    for (c, inc) in increments.iter_mut().enumerate().skip(1) {
        let n = m.node(c).parent.expect("non-root");
        let r = pair.returns[c];
        *inc = r / (1.0 + pair.pi_hat[n] * r);
    }
    let leaves = m.num_leaves();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut basis_nodes = Vec::new();
    for n in m.internal_nodes() {
        if m.node(n).children.clone().all(|c| increments[c] == 0.0) {
            continue;
        }
        let mut col = vec![0.0; leaves];
        for c in m.node(n).children.clone() {
            for l in m.node(c).leaves.clone() {
                col[l] = increments[c];
            }
        }
        cols.push(col);
        basis_nodes.push(n);
    }
    let basis = columns(leaves, &cols);
    let w = &pair.r_weights;
    let gram = weighted_gram(&basis, &basis, w.iter().copied());
    let comp_cols: Vec<Vec<f64>> = solver::local_complement_basis(m, w, &increments)
        .into_iter()
        .map(|f| f.values)
        .collect();
    let complement = columns(leaves, &comp_cols);
    let complete_decomposition = 1 + basis.ncols() + complement.ncols() == leaves;
    AttainableSpace {
        basis,
        basis_nodes,
        gram,
        complement,
        increments,
        complete_decomposition,
    }
}

fn columns(rows: usize, cols: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

/// `Σ_l w_l a_{l i} b_{l j}`.
fn weighted_gram(a: &DMatrix<f64>, b: &DMatrix<f64>, w: impl Iterator<Item = f64>) -> DMatrix<f64> {
    let w: Vec<f64> = w.collect();
    let mut scaled = a.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= w[i];
    }
    scaled.transpose() * b
}

/// Minimiser of `E^ℝ[a M² + 2 h M]` over `M` in the column span of `basis`.
/// Returns the minimiser's leaf values and the relative normal-equation
/// residual.
fn quadratic_min(
    basis: &DMatrix<f64>,
    rw: &PathFunctional,
    a: &PathFunctional,
    h: &PathFunctional,
) -> (PathFunctional, f64) {
    let leaves = rw.len();
    if basis.ncols() == 0 {
        return (PathFunctional::constant(leaves, 0.0), 0.0);
    }
    let k = weighted_gram(basis, basis, (0..leaves).map(|l| rw[l] * a[l]));
    let hv = DVector::from_iterator(leaves, (0..leaves).map(|l| rw[l] * h[l]));
    let v = basis.transpose() * hv;
    let coef = linalg::solve_psd(&k, &(-&v));
    let resid = (&k * &coef + &v).amax();
    let scale = v.amax().max(k.amax() * coef.amax()).max(f64::MIN_POSITIVE);
    let values = basis * coef;
    (PathFunctional::new(values.iter().copied().collect()), resid / scale)
}

/// Relative risk aversion `A(X̂_T)` and tolerance `B(Ŷ_T) = 1/A(X̂_T)` leafwise.
fn risk_profiles(pair: &OptimalPair, u: &UtilitySpec) -> (PathFunctional, PathFunctional) {
    let a = pair.xhat_t.map(|x| u.rra(x));
    let b = a.map(|v| 1.0 / v);
    (a, b)
}

/// `u_δ(x,0) = v_δ(y,0) = x y E^ℝ[F]`.
pub fn first_order(pair: &OptimalPair, f: &PathFunctional) -> f64 {
    pair.x * pair.y * f.expect(&pair.r_weights)
}

/// `a(x,x)` and `M⁰_T`.
pub fn solve_axx(pair: &OptimalPair, u: &UtilitySpec, space: &AttainableSpace) -> (f64, PathFunctional, f64) {
    let (a, _) = risk_profiles(pair, u);
    let (m0, resid) = quadratic_min(&space.basis, &pair.r_weights, &a, &a);
    let value = a.zip_map(&m0, |a, m| a * (1.0 + m).powi(2)).expect(&pair.r_weights);
    (value, m0, resid)
}

/// `a(d,d)` and `M¹_T`.
pub fn solve_add(
    pair: &OptimalPair,
    u: &UtilitySpec,
    space: &AttainableSpace,
    f: &PathFunctional,
    g: &PathFunctional,
) -> (f64, PathFunctional, f64) {
    let (a, _) = risk_profiles(pair, u);
    let x = pair.x;
    let h = a.zip_map(f, |a, f| (a - 1.0) * x * f);
    let (m1, resid) = quadratic_min(&space.basis, &pair.r_weights, &a, &h);
    let value = (0..f.len())
        .map(|l| {
            pair.r_weights[l]
                * (a[l] * (m1[l] + x * f[l]).powi(2)
                    - 2.0 * x * f[l] * m1[l]
                    - x * x * (f[l] * f[l] + g[l]))
        })
        .sum();
    (value, m1, resid)
}

/// `b(y,y)` and `N⁰_T`.
pub fn solve_byy(pair: &OptimalPair, u: &UtilitySpec, space: &AttainableSpace) -> (f64, PathFunctional, f64) {
    let (_, b) = risk_profiles(pair, u);
    let (n0, resid) = quadratic_min(&space.complement, &pair.r_weights, &b, &b);
    let value = b.zip_map(&n0, |b, n| b * (1.0 + n).powi(2)).expect(&pair.r_weights);
    (value, n0, resid)
}

/// `b(d,d)` and `N¹_T`.
pub fn solve_bdd(
    pair: &OptimalPair,
    u: &UtilitySpec,
    space: &AttainableSpace,
    f: &PathFunctional,
    g: &PathFunctional,
) -> (f64, PathFunctional, f64) {
    let (_, b) = risk_profiles(pair, u);
    let y = pair.y;
    let h = b.zip_map(f, |b, f| (1.0 - b) * y * f);
    let (n1, resid) = quadratic_min(&space.complement, &pair.r_weights, &b, &h);
    let value = (0..f.len())
        .map(|l| {
            pair.r_weights[l]
                * (b[l] * (n1[l] - y * f[l]).powi(2) + 2.0 * y * f[l] * n1[l]
                    - y * y * (f[l] * f[l] - g[l]))
        })
        .sum();
    (value, n1, resid)
}

/// `a(x,d) = E^ℝ[A (1 + M⁰)(xF + M¹) - xF (1 + M⁰)]`.
pub fn compute_axd(
    pair: &OptimalPair,
    u: &UtilitySpec,
    m0: &PathFunctional,
    m1: &PathFunctional,
    f: &PathFunctional,
) -> f64 {
    let (a, _) = risk_profiles(pair, u);
    let x = pair.x;
    (0..f.len())
        .map(|l| {
            pair.r_weights[l]
                * (a[l] * (1.0 + m0[l]) * (x * f[l] + m1[l]) - x * f[l] * (1.0 + m0[l]))
        })
        .sum()
}

/// `b(y,d) = E^ℝ[B (1 + N⁰)(N¹ - yF) + yF (1 + N⁰)]`.
pub fn compute_byd(
    pair: &OptimalPair,
    u: &UtilitySpec,
    n0: &PathFunctional,
    n1: &PathFunctional,
    f: &PathFunctional,
) -> f64 {
    let (_, b) = risk_profiles(pair, u);
    let y = pair.y;
    (0..f.len())
        .map(|l| {
            pair.r_weights[l]
                * (b[l] * (1.0 + n0[l]) * (n1[l] - y * f[l]) + y * f[l] * (1.0 + n0[l]))
        })
        .sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Coefficients {
    pub axx: f64,
    pub axd: f64,
    pub add: f64,
    pub byy: f64,
    pub byd: f64,
    pub bdd: f64,
}

/// Residuals of the structural identities linking the primal and dual
/// coefficients.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IdentityResiduals {
    /// `max |A B - I₂|` for the lower-triangular coefficient matrices.
    pub matrix_product: f64,
    /// `|(y/x) a(d,d) + (x/y) b(d,d) - a(x,d) b(y,d)|`.
    pub gap: f64,
    /// `|a(x,x) b(y,y) - 1|`.
    pub axx_byy: f64,
    /// Leafwise pointwise relation between primal and dual correctors.
    pub pointwise_primal: f64,
    pub pointwise_dual: f64,
    /// Worst node-wise martingale defect of the nine product processes.
    pub product_martingales: f64,
    /// `max |E^ℝ[m n]|` over generators of `𝓜²` and `𝓝²`.
    pub orthogonality: f64,
    /// Worst relative normal-equation residual of the four programs.
    pub normal_equations: f64,
}

/// Full second-order description of `u` and `v` around `(x,0)` and `(y,0)`.
#[derive(Clone, Debug, Serialize)]
pub struct SensitivityReport {
    pub x: f64,
    pub y: f64,
    pub u0: f64,
    pub v0: f64,
    pub grad_u: [f64; 2],
    pub grad_v: [f64; 2],
    pub hessian_u: [[f64; 2]; 2],
    pub hessian_v: [[f64; 2]; 2],
    pub coefficients: Coefficients,
    pub residuals: IdentityResiduals,
    pub m0: PathFunctional,
    pub m1: PathFunctional,
    pub n0: PathFunctional,
    pub n1: PathFunctional,
    pub dim_attainable: usize,
    pub dim_complement: usize,
}

impl SensitivityReport {
    /// Second-order prediction of `u(x + dx, delta)`.
    pub fn predict_u(&self, dx: f64, delta: f64) -> f64 {
        quadratic_form(self.u0, self.grad_u, self.hessian_u, dx, delta)
    }

    /// Second-order prediction of `v(y + dy, delta)`.
    pub fn predict_v(&self, dy: f64, delta: f64) -> f64 {
        quadratic_form(self.v0, self.grad_v, self.hessian_v, dy, delta)
    }
}

fn quadratic_form(base: f64, grad: [f64; 2], h: [[f64; 2]; 2], a: f64, b: f64) -> f64 {
    base + a * grad[0] + b * grad[1] + 0.5 * (a * a * h[0][0] + 2.0 * a * b * h[0][1] + b * b * h[1][1])
}

/// `(u_pred, v_pred)` at offsets `(dx, delta)` and `(dx, delta)`.
pub fn predict_expansion(report: &SensitivityReport, u0: f64, v0: f64, dx: f64, delta: f64) -> (f64, f64) {
    (
        quadratic_form(u0, report.grad_u, report.hessian_u, dx, delta),
        quadratic_form(v0, report.grad_v, report.hessian_v, dx, delta),
    )
}

/// Runs every step: space, four programs, cross terms, Hessians, identities.
pub fn analyze(m: &TreeMarket, u: &UtilitySpec, pair: &OptimalPair) -> Result<SensitivityReport> {
    let (f, g) = m.compute_f_g();
    let space = build_attainable_space(pair, m);
    let (axx, m0, r1) = solve_axx(pair, u, &space);
    let (add, m1, r2) = solve_add(pair, u, &space, &f, &g);
    let (byy, n0, r3) = solve_byy(pair, u, &space);
    let (bdd, n1, r4) = solve_bdd(pair, u, &space, &f, &g);
    let axd = compute_axd(pair, u, &m0, &m1, &f);
    let byd = compute_byd(pair, u, &n0, &n1, &f);
    let (x, y) = (pair.x, pair.y);
    let ud = first_order(pair, &f);
    let coefficients = Coefficients {
        axx,
        axd,
        add,
        byy,
        byd,
        bdd,
    };
    let mut report = SensitivityReport {
        x,
        y,
        u0: pair.u0,
        v0: pair.v0,
        grad_u: [y, ud],
        grad_v: [-x, ud],
        hessian_u: [
            [-(y / x) * axx, -(y / x) * axd],
            [-(y / x) * axd, -(y / x) * add],
        ],
        hessian_v: [
            [(x / y) * byy, (x / y) * byd],
            [(x / y) * byd, (x / y) * bdd],
        ],
        coefficients,
        residuals: IdentityResiduals::default(),
        m0,
        m1,
        n0,
        n1,
        dim_attainable: space.dim(),
        dim_complement: space.complement_dim(),
    };
    let mut residuals = verify_identities(&report, pair, m, u, &f);
    residuals.orthogonality = orthogonality(&space, &pair.r_weights);
    residuals.normal_equations = r1.max(r2).max(r3).max(r4);
    report.residuals = residuals;
    Ok(report)
}

fn orthogonality(space: &AttainableSpace, rw: &PathFunctional) -> f64 {
    if space.dim() == 0 || space.complement_dim() == 0 {
        return 0.0;
    }
    weighted_gram(&space.basis, &space.complement, rw.iter().copied()).amax()
}

/// Identity residuals for a computed report.
pub fn verify_identities(
    report: &SensitivityReport,
    pair: &OptimalPair,
    m: &TreeMarket,
    u: &UtilitySpec,
    f: &PathFunctional,
) -> IdentityResiduals {
    let c = report.coefficients;
    let (x, y) = (pair.x, pair.y);
    // [[axx, 0], [axd, -x/y]] * [[byy, 0], [byd, -y/x]]
    let p11 = c.axx * c.byy;
    let p21 = c.axd * c.byy - (x / y) * c.byd;
    let p22 = (x / y) * (y / x);
    let matrix_product = (p11 - 1.0).abs().max(p21.abs()).max((p22 - 1.0).abs());
    let gap = ((y / x) * c.add + (x / y) * c.bdd - c.axd * c.byd).abs();
    let axx_byy = (c.axx * c.byy - 1.0).abs();

    let (m0, m1, n0, n1) = (&report.m0, &report.m1, &report.n0, &report.n1);
    let mut pointwise_primal: f64 = 0.0;
    let mut pointwise_dual: f64 = 0.0;
    for l in 0..f.len() {
        let xh = pair.xhat_t[l];
        let yh = pair.yhat_t[l];
        let lhs0 = u.d2u(xh) * xh * (m0[l] + 1.0);
        let lhs1 = u.d2u(xh) * xh * (m1[l] + x * f[l]);
        let rhs0 = -c.axx * yh * (n0[l] + 1.0);
        let rhs1 = -(c.axd * yh * (n0[l] + 1.0) - (x / y) * yh * (n1[l] - y * f[l]));
        pointwise_primal = pointwise_primal.max((lhs0 - rhs0).abs()).max((lhs1 - rhs1).abs());
        let dlhs0 = u.d2v(yh) * yh * (1.0 + n0[l]);
        let dlhs1 = u.d2v(yh) * yh * (n1[l] - y * f[l]);
        let drhs0 = c.byy * xh * (1.0 + m0[l]);
        let drhs1 = c.byd * xh * (1.0 + m0[l]) - (y / x) * xh * (x * f[l] + m1[l]);
        pointwise_dual = pointwise_dual.max((dlhs0 - drhs0).abs()).max((dlhs1 - drhs1).abs());
    }
    let product_martingales = product_martingale_defect(pair, m, [m0, m1], [n0, n1]);
    IdentityResiduals {
        matrix_product,
        gap,
        axx_byy,
        pointwise_primal,
        pointwise_dual,
        product_martingales,
        orthogonality: 0.0,
        normal_equations: 0.0,
    }
}

/// Worst node-wise defect `|E[Z_c | n] - Z_n| / (X̂_n Ŷ_n)` over the nine
/// products `Z = X̂ a · Ŷ b` with `a ∈ {1, M⁰, M¹}` and `b ∈ {1, N⁰, N¹}`,
/// where the `ℝ`-martingales are extended to nodes by conditional
/// expectation.
fn product_martingale_defect(
    pair: &OptimalPair,
    m: &TreeMarket,
    ms: [&PathFunctional; 2],
    ns: [&PathFunctional; 2],
) -> f64 {
    let rw = &pair.r_weights;
    let one = PathFunctional::constant(rw.len(), 1.0);
    let primal: Vec<Vec<f64>> = [&one, ms[0], ms[1]]
        .iter()
        .map(|f| m.conditional_expectation(f, rw))
        .collect();
    let dual: Vec<Vec<f64>> = [&one, ns[0], ns[1]]
        .iter()
        .map(|f| m.conditional_expectation(f, rw))
        .collect();
    let probs = m.node_probabilities();
    let base: Vec<f64> = pair
        .xhat_nodes
        .iter()
        .zip(&pair.yhat_nodes)
        .map(|(a, b)| a * b)
        .collect();
    let mut worst: f64 = 0.0;
    for a in &primal {
        for b in &dual {
            let z = |n: usize| base[n] * a[n] * b[n];
            for n in m.internal_nodes() {
                let e: f64 = m
                    .node(n)
                    .children
                    .clone()
                    .map(|c| probs[c] / probs[n] * z(c))
                    .sum();
                worst = worst.max((e - z(n)).abs() / base[n]);
            }
        }
    }
    worst
}

/// First-order predictions of the perturbed optimizer, leafwise.
#[derive(Clone, Debug, Serialize)]
pub struct OptimizerPrediction {
    /// `(X̂_T / x)(x + Δx (1 + M⁰) + δ M¹) / L^δ`, or the dual analogue
    /// multiplied by `L^δ`.
    pub multiplicative: PathFunctional,
    /// `X̂_T + Δx X' + δ X^d`, or the dual analogue.
    pub additive: PathFunctional,
}

/// Predicted `X̂_T(x + dx, delta)`.
pub fn predict_optimizer(
    pair: &OptimalPair,
    report: &SensitivityReport,
    dx: f64,
    delta: f64,
    l_delta: &PathFunctional,
    f: &PathFunctional,
) -> OptimizerPrediction {
    let x = pair.x;
    let n = pair.xhat_t.len();
    let mult = (0..n)
        .map(|l| {
            pair.xhat_t[l] / x * (x + dx * (1.0 + report.m0[l]) + delta * report.m1[l]) / l_delta[l]
        })
        .collect();
    let add = (0..n)
        .map(|l| {
            let xp = pair.xhat_t[l] / x * (1.0 + report.m0[l]);
            let xd = pair.xhat_t[l] / x * (report.m1[l] + x * f[l]);
            pair.xhat_t[l] + dx * xp + delta * xd
        })
        .collect();
    OptimizerPrediction {
        multiplicative: PathFunctional::new(mult),
        additive: PathFunctional::new(add),
    }
}

/// Predicted `Ŷ_T(y + dy, delta)`.
pub fn predict_dual_optimizer(
    pair: &OptimalPair,
    report: &SensitivityReport,
    dy: f64,
    delta: f64,
    l_delta: &PathFunctional,
    f: &PathFunctional,
) -> OptimizerPrediction {
    let y = pair.y;
    let n = pair.yhat_t.len();
    let mult = (0..n)
        .map(|l| {
            pair.yhat_t[l] / y * (y + dy * (1.0 + report.n0[l]) + delta * report.n1[l]) * l_delta[l]
        })
        .collect();
    let add = (0..n)
        .map(|l| {
            let yp = pair.yhat_t[l] / y * (1.0 + report.n0[l]);
            let yd = pair.yhat_t[l] / y * (report.n1[l] - y * f[l]);
            pair.yhat_t[l] + dy * yp + delta * yd
        })
        .collect();
    OptimizerPrediction {
        multiplicative: PathFunctional::new(mult),
        additive: PathFunctional::new(add),
    }
}

/// `E^ℝ[ζ(c,0)]` for each `c`.
pub fn integrability_probe(m: &TreeMarket, pair: &OptimalPair, c_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    c_grid
        .iter()
        .map(|&c| Ok((c, m.zeta(c, 0.0)?.expect(&pair.r_weights))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::solve_unperturbed;
    use approx::assert_relative_eq;

    fn standard(nu: f64) -> TreeMarket {
        TreeMarket::binomial(4, 0.25, 0.2, 2.0, nu).unwrap()
    }

    #[test]
    fn dimensions() {
        let u = UtilitySpec::power(0.5).unwrap();
        let one = TreeMarket::binomial(1, 1.0, 0.1, 2.0, 1.0).unwrap();
        let pair = solve_unperturbed(&one, &u, 1.0).unwrap();
        let s = build_attainable_space(&pair, &one);
        assert_eq!((s.dim(), s.complement_dim()), (1, 0));
        let two = TreeMarket::binomial(2, 0.5, 0.2, 2.0, 1.0).unwrap();
        let pair = solve_unperturbed(&two, &u, 1.0).unwrap();
        let s = build_attainable_space(&pair, &two);
        assert_eq!((s.dim(), s.complement_dim()), (3, 0));
        let tri = TreeMarket::trinomial(1, 1.0, 0.2, 2.0, 1.0).unwrap();
        let pair = solve_unperturbed(&tri, &u, 1.0).unwrap();
        let s = build_attainable_space(&pair, &tri);
        assert_eq!((s.dim(), s.complement_dim()), (1, 1));
        assert!(s.complete_decomposition);
        // generators are ℝ-martingale increments
        for j in 0..s.dim() {
            let mean: f64 = (0..3).map(|l| pair.r_weights[l] * s.basis[(l, j)]).sum();
            assert!(mean.abs() < 1e-15);
        }
    }

    #[test]
    fn power_closed_forms() {
        let m = standard(1.0);
        let p = 0.5;
        let u = UtilitySpec::power(p).unwrap();
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        let rep = analyze(&m, &u, &pair).unwrap();
        let (f, _) = m.compute_f_g();
        assert_relative_eq!(rep.coefficients.axx, 1.0 - p, epsilon = 1e-12);
        assert!(rep.m0.max_abs() < 1e-12);
        assert_relative_eq!(rep.coefficients.axd, -p * f.expect(&pair.r_weights), epsilon = 1e-10);
        assert_relative_eq!(rep.coefficients.byy, 1.0 / (1.0 - p), epsilon = 1e-10);
        assert!(rep.n0.max_abs() < 1e-12);
    }

    #[test]
    fn log_utility_has_unit_axx() {
        let m = standard(1.0);
        let u = UtilitySpec::log();
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        let rep = analyze(&m, &u, &pair).unwrap();
        assert_relative_eq!(rep.coefficients.axx, 1.0, epsilon = 1e-12);
        assert!(rep.m0.max_abs() < 1e-12);
    }

    #[test]
    fn zero_direction_kills_delta_column() {
        let m = standard(0.0);
        let u = UtilitySpec::mixed_power(&[0.3, 0.7]).unwrap();
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        let rep = analyze(&m, &u, &pair).unwrap();
        let c = rep.coefficients;
        assert_eq!([c.axd, c.add, c.byd, c.bdd], [0.0; 4]);
        assert_eq!(rep.grad_u[1], 0.0);
        assert!(rep.m1.max_abs() == 0.0 && rep.n1.max_abs() == 0.0);
        assert_eq!(rep.residuals.gap, 0.0);
    }

    #[test]
    fn one_period_axx_matches_scan() {
        let m = TreeMarket::binomial(1, 1.0, 0.1, 2.0, 1.0).unwrap();
        let u = UtilitySpec::mixed_power(&[0.3, 0.7]).unwrap();
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        let space = build_attainable_space(&pair, &m);
        let (axx, _, _) = solve_axx(&pair, &u, &space);
        let a = pair.xhat_t.map(|x| u.rra(x));
        let obj = |c: f64| -> f64 {
            (0..2)
                .map(|l| pair.r_weights[l] * a[l] * (1.0 + c * space.basis[(l, 0)]).powi(2))
                .sum()
        };
        // the objective is a parabola in c; three-point vertex is exact
        let (f0, f1, f2) = (obj(-1.0), obj(0.0), obj(1.0));
        let curv = f0 - 2.0 * f1 + f2;
        let c = (f0 - f2) / (2.0 * curv);
        assert_relative_eq!(axx, obj(c), epsilon = 1e-10);
        let scan = (-2000..=2000)
            .map(|i| obj(i as f64 * 1e-3 * 10.0))
            .fold(f64::INFINITY, f64::min);
        assert!(axx <= scan + 1e-15);
    }

    #[test]
    fn identities_on_incomplete_tree() {
        let m = TreeMarket::trinomial(2, 0.25, 0.2, 2.0, 1.0).unwrap();
        let u = UtilitySpec::mixed_power(&[0.3, 0.7]).unwrap();
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        let rep = analyze(&m, &u, &pair).unwrap();
        let r = &rep.residuals;
        assert!(rep.dim_complement > 0);
        assert!(r.matrix_product < 1e-8, "{r:?}");
        assert!(r.gap < 1e-8, "{r:?}");
        assert!(r.pointwise_primal < 1e-9, "{r:?}");
        assert!(r.pointwise_dual < 1e-9, "{r:?}");
        assert!(r.product_martingales < 1e-10, "{r:?}");
        assert!(r.orthogonality < 1e-12, "{r:?}");
    }

    #[test]
    fn integrability_on_trees() {
        let m = standard(0.0);
        let u = UtilitySpec::power(0.5).unwrap();
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        for (_, v) in integrability_probe(&m, &pair, &[0.0, 1.0, 5.0]).unwrap() {
            assert_relative_eq!(v, 1.0, epsilon = 1e-14);
        }
        let m = standard(1.0);
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        let vals = integrability_probe(&m, &pair, &[0.0, 1.0, 5.0]).unwrap();
        assert!(vals.windows(2).all(|w| w[1].1 >= w[0].1 && w[1].1.is_finite()));
    }

    #[test]
    fn zero_offsets_reproduce_base_values() {
        let m = standard(1.0);
        let u = UtilitySpec::power(0.5).unwrap();
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        let rep = analyze(&m, &u, &pair).unwrap();
        let (up, vp) = predict_expansion(&rep, pair.u0, pair.v0, 0.0, 0.0);
        assert_eq!((up, vp), (pair.u0, pair.v0));
        let (f, _) = m.compute_f_g();
        let ones = PathFunctional::constant(f.len(), 1.0);
        let pred = predict_optimizer(&pair, &rep, 0.0, 0.0, &ones, &f);
        assert!(pred.multiplicative.max_abs_diff(&pair.xhat_t) < 1e-15);
        // pure wealth shift is exact for power utility
        let shifted = solve_unperturbed(&m, &u, 1.3).unwrap();
        let pred = predict_optimizer(&pair, &rep, 0.3, 0.0, &ones, &f);
        assert!(pred.multiplicative.max_abs_diff(&shifted.xhat_t) < 1e-12);
        assert_relative_eq!(rep.predict_u(0.1, 0.0), pair.u0 + 0.1 * pair.y - 0.5 * 0.01 * pair.y * 0.5, epsilon = 1e-14);
    }
}
