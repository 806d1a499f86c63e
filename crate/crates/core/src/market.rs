//! Finite-state markets on non-recombining path trees.
//!
//! A [`TreeMarket`] stores every path explicitly: node `n` has a unique parent,
//! children occupy a contiguous index range, and the leaves below any node form
//! a contiguous range of leaf indices. Recombining lattices (binomial,
//! trinomial) are expanded into path trees at construction, so that
//! path-dependent wealth and optimal strategies can be represented exactly.
//!
//! Returns are expressed per edge. With `r` the unperturbed return on the
//! edge `n -> c`,
//!
//! ```text
//! r = lambda(n) * qv(n) + dM(n -> c)
//! ```
//!
//! and the perturbed market uses `r / (1 - delta * nu(n) * r)`, which makes
//! `X -> X / L^delta` an exact bijection between the two sets of wealth
//! processes with `L^delta = prod (1 - delta * nu * r)`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default cap on the number of nodes of an expanded path tree.
pub const DEFAULT_NODE_CAP: usize = 1_000_000;

const INVARIANT_TOL: f64 = 1e-12;

/// A scalar function of (time, state) used for lambda and nu.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeFunction {
    Constant(f64),
    /// `intercept + state * state_slope + time * time_slope`
    Affine {
        intercept: f64,
        #[serde(default)]
        state_slope: f64,
        #[serde(default)]
        time_slope: f64,
    },
    /// Polynomial in the state, lowest degree first.
    Polynomial(Vec<f64>),
}

impl NodeFunction {
    pub fn eval(&self, time: f64, state: f64) -> f64 {
        match self {
            NodeFunction::Constant(c) => *c,
            NodeFunction::Affine {
                intercept,
                state_slope,
                time_slope,
            } => intercept + state_slope * state + time_slope * time,
            NodeFunction::Polynomial(coeffs) => {
                coeffs.iter().rev().fold(0.0, |acc, c| acc * state + c)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            NodeFunction::Constant(c) => *c == 0.0,
            NodeFunction::Affine {
                intercept,
                state_slope,
                time_slope,
            } => *intercept == 0.0 && *state_slope == 0.0 && *time_slope == 0.0,
            NodeFunction::Polynomial(c) => c.iter().all(|v| *v == 0.0),
        }
    }
}

impl From<f64> for NodeFunction {
    fn from(c: f64) -> Self {
        NodeFunction::Constant(c)
    }
}

/// One scalar per leaf (terminal node) of a tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathFunctional {
    pub values: Vec<f64>,
}

impl PathFunctional {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn constant(len: usize, value: f64) -> Self {
        Self {
            values: vec![value; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.values.iter().map(|v| f(*v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.len(), other.len(), "path functional length mismatch");
        Self::new(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        )
    }

    /// `Σ w_i f_i` for a probability vector `w` over leaves.
    pub fn expect(&self, weights: &PathFunctional) -> f64 {
        assert_eq!(self.len(), weights.len(), "weight length mismatch");
        self.values
            .iter()
            .zip(&weights.values)
            .map(|(v, w)| v * w)
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl std::ops::Index<usize> for PathFunctional {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

/// Per-node values of an edge function: entry `c` is the value on the edge
/// from `parent(c)` to `c`; the root entry is zero.
pub type EdgeValues = Vec<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub level: usize,
    pub state: f64,
    pub parent: Option<usize>,
    pub children: Range<usize>,
    pub leaves: Range<usize>,
    /// Conditional probability of the edge from the parent.
    pub prob: f64,
    /// Martingale increment on the edge from the parent.
    pub dm: f64,
    /// Predictable quadratic-variation increment over the next step.
    pub qv: f64,
    pub lambda: f64,
    pub nu: f64,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// A finite-state filtered market of one risky asset with zero interest rate.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeMarket {
    nodes: Vec<Node>,
    level_start: Vec<usize>,
    times: Vec<f64>,
    first_leaf: usize,
}

/// One branch of a lattice step: conditional probability and martingale
/// increment in units of `sigma * sqrt(dt)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Branch {
    pub prob: f64,
    pub scaled_dm: f64,
}

impl TreeMarket {
    /// Recombining-state binomial market with `dM = ±sigma sqrt(dt)`,
    /// equiprobable, expanded into a path tree.
    pub fn binomial(
        steps: usize,
        dt: f64,
        sigma: f64,
        lambda: impl Into<NodeFunction>,
        nu: impl Into<NodeFunction>,
    ) -> Result<Self> {
        let branches = [
            Branch {
                prob: 0.5,
                scaled_dm: 1.0,
            },
            Branch {
                prob: 0.5,
                scaled_dm: -1.0,
            },
        ];
        Self::lattice(steps, dt, sigma, &branches, &lambda.into(), &nu.into())
    }

    /// Trinomial market with `dM ∈ {+a, 0, -a}`, `a = sigma sqrt(3 dt)`,
    /// probabilities `(1/6, 2/3, 1/6)`. One risky asset on three states makes
    /// this market incomplete.
    pub fn trinomial(
        steps: usize,
        dt: f64,
        sigma: f64,
        lambda: impl Into<NodeFunction>,
        nu: impl Into<NodeFunction>,
    ) -> Result<Self> {
        let a = 3f64.sqrt();
        let branches = [
            Branch {
                prob: 1.0 / 6.0,
                scaled_dm: a,
            },
            Branch {
                prob: 2.0 / 3.0,
                scaled_dm: 0.0,
            },
            Branch {
                prob: 1.0 / 6.0,
                scaled_dm: -a,
            },
        ];
        Self::lattice(steps, dt, sigma, &branches, &lambda.into(), &nu.into())
    }

    /// Generic lattice with the same branch set at every node. The state is
    /// the running value of `M`.
    pub fn lattice(
        steps: usize,
        dt: f64,
        sigma: f64,
        branches: &[Branch],
        lambda: &NodeFunction,
        nu: &NodeFunction,
    ) -> Result<Self> {
        Self::lattice_with_cap(steps, dt, sigma, branches, lambda, nu, DEFAULT_NODE_CAP)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn lattice_with_cap(
        steps: usize,
        dt: f64,
        sigma: f64,
        branches: &[Branch],
        lambda: &NodeFunction,
        nu: &NodeFunction,
        cap: usize,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("steps", "must be at least 1"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("dt", format!("must be positive, got {dt}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid("sigma", format!("must be positive, got {sigma}")));
        }
        if branches.len() < 2 {
            return Err(invalid("branches", "need at least two branches"));
        }
        let total = count_nodes(branches.len(), steps);
        if total > cap {
            return Err(Error::NodeCapExceeded { nodes: total, cap });
        }
        let scale = sigma * dt.sqrt();
        let mut layers: Vec<Vec<Proto>> = vec![vec![Proto {
            state: 0.0,
            prob: 1.0,
            dm: 0.0,
            parent: None,
        }]];
        for level in 0..steps {
            let mut next = Vec::with_capacity(layers[level].len() * branches.len());
            for (i, p) in layers[level].iter().enumerate() {
                for b in branches {
                    let dm = b.scaled_dm * scale;
                    next.push(Proto {
                        state: p.state + dm,
                        prob: b.prob,
                        dm,
                        parent: Some(i),
                    });
                }
            }
            layers.push(next);
        }
        let times = (0..=steps).map(|k| k as f64 * dt).collect();
        Self::assemble(layers, times, |t, s| (lambda.eval(t, s), nu.eval(t, s)), None)
    }

    fn assemble(
        layers: Vec<Vec<Proto>>,
        times: Vec<f64>,
        coeffs: impl Fn(f64, f64) -> (f64, f64),
        qv_override: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let mut level_start = Vec::with_capacity(layers.len() + 1);
        let mut offset = 0;
        for layer in &layers {
            level_start.push(offset);
            offset += layer.len();
        }
        level_start.push(offset);
        let depth = layers.len() - 1;
        let first_leaf = level_start[depth];
        let mut nodes: Vec<Node> = Vec::with_capacity(offset);
        for (level, layer) in layers.iter().enumerate() {
            for p in layer {
                let parent = p.parent.map(|i| level_start[level - 1] + i);
                let (lambda, nu) = coeffs(times[level], p.state);
                nodes.push(Node {
                    level,
                    state: p.state,
                    parent,
                    children: 0..0,
                    leaves: 0..0,
                    prob: p.prob,
                    dm: p.dm,
                    qv: 0.0,
                    lambda,
                    nu,
                });
            }
        }
        // children ranges: children of a node are contiguous because layers are
        // generated parent by parent
        for c in 1..nodes.len() {
            let parent = nodes[c].parent.expect("non-root has parent");
            let r = &mut nodes[parent].children;
            if r.start == r.end {
                *r = c..c + 1;
            } else if r.end == c {
                r.end = c + 1;
            } else {
                return Err(Error::InvalidTree(format!(
                    "children of node {parent} are not contiguous"
                )));
            }
        }
        for n in (0..nodes.len()).rev() {
            if nodes[n].level == depth {
                let l = n - first_leaf;
                nodes[n].leaves = l..l + 1;
            } else if nodes[n].children.is_empty() {
                return Err(Error::InvalidTree(format!(
                    "node {n} at level {} has no children",
                    nodes[n].level
                )));
            } else {
                let ch = nodes[n].children.clone();
                nodes[n].leaves = nodes[ch.start].leaves.start..nodes[ch.end - 1].leaves.end;
            }
        }
        for n in 0..first_leaf {
            let ch = nodes[n].children.clone();
            let qv: f64 = ch.map(|c| nodes[c].prob * nodes[c].dm * nodes[c].dm).sum();
            nodes[n].qv = qv;
        }
        if let Some(qv) = qv_override {
            for (level, row) in qv.iter().enumerate().take(depth) {
                for (i, q) in row.iter().enumerate() {
                    let n = level_start[level] + i;
                    let computed = nodes[n].qv;
                    if (q - computed).abs() > INVARIANT_TOL * computed.abs().max(1.0) {
                        return Err(Error::InvalidTree(format!(
                            "node {n}: qv {q} differs from Σ prob·dM² = {computed}"
                        )));
                    }
                }
            }
        }
        let market = Self {
            nodes,
            level_start,
            times,
            first_leaf,
        };
        market.validate()?;
        Ok(market)
    }

    /// Checks the probability, martingale and compensator invariants at every
    /// internal node, and finiteness of all stored values.
    pub fn validate(&self) -> Result<()> {
        for (n, node) in self.nodes.iter().enumerate() {
            for (name, v) in [
                ("state", node.state),
                ("dm", node.dm),
                ("qv", node.qv),
                ("lambda", node.lambda),
                ("nu", node.nu),
            ] {
                if !v.is_finite() {
                    return Err(Error::InvalidTree(format!("node {n}: {name} is not finite")));
                }
            }
            if node.is_leaf() {
                continue;
            }
            let mut total = 0.0;
            let mut mean = 0.0;
            let mut second = 0.0;
            let mut scale: f64 = 0.0;
            for c in node.children.clone() {
                let child = &self.nodes[c];
                if !(child.prob > 0.0) {
                    return Err(Error::InvalidTree(format!(
                        "edge {n}->{c}: probability {} is not positive",
                        child.prob
                    )));
                }
                total += child.prob;
                mean += child.prob * child.dm;
                second += child.prob * child.dm * child.dm;
                scale = scale.max(child.dm.abs());
            }
            if (total - 1.0).abs() > INVARIANT_TOL {
                return Err(Error::InvalidTree(format!(
                    "node {n}: probabilities sum to {total}"
                )));
            }
            if mean.abs() > INVARIANT_TOL * scale.max(1e-300) && mean.abs() > 1e-300 {
                return Err(Error::InvalidTree(format!(
                    "node {n}: martingale condition violated, E[dM] = {mean:e}"
                )));
            }
            if (second - node.qv).abs() > INVARIANT_TOL * node.qv.max(1e-300) {
                return Err(Error::InvalidTree(format!(
                    "node {n}: qv {} differs from Σ prob·dM² = {second}",
                    node.qv
                )));
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, n: usize) -> &Node {
        &self.nodes[n]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of time steps.
    pub fn steps(&self) -> usize {
        self.level_start.len() - 2
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("at least one level")
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn level(&self, level: usize) -> Range<usize> {
        self.level_start[level]..self.level_start[level + 1]
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.len() - self.first_leaf
    }

    /// Internal (non-terminal) nodes, in index order.
    pub fn internal_nodes(&self) -> Range<usize> {
        0..self.first_leaf
    }

    pub fn leaf_node(&self, leaf: usize) -> usize {
        self.first_leaf + leaf
    }

    /// Unperturbed return on the edge into `c`.
    pub fn edge_return(&self, c: usize) -> f64 {
        match self.nodes[c].parent {
            None => 0.0,
            Some(p) => {
                let parent = &self.nodes[p];
                parent.lambda * parent.qv + self.nodes[c].dm
            }
        }
    }

    pub fn unperturbed_returns(&self) -> EdgeValues {
        (0..self.nodes.len()).map(|c| self.edge_return(c)).collect()
    }

    /// Path probability of each leaf.
    pub fn leaf_probabilities(&self) -> PathFunctional {
        let mut acc = vec![1.0; self.nodes.len()];
        for c in 1..self.nodes.len() {
            let p = self.nodes[c].parent.expect("non-root");
            acc[c] = acc[p] * self.nodes[c].prob;
        }
        PathFunctional::new(acc[self.first_leaf..].to_vec())
    }

    /// Path probability of every node.
    pub fn node_probabilities(&self) -> Vec<f64> {
        let mut acc = vec![1.0; self.nodes.len()];
        for c in 1..self.nodes.len() {
            let p = self.nodes[c].parent.expect("non-root");
            acc[c] = acc[p] * self.nodes[c].prob;
        }
        acc
    }

    /// Accumulates an edge function along every path: `Σ_path g(edge)`.
    pub fn path_sum(&self, edge: impl Fn(usize) -> f64) -> Vec<f64> {
        let mut acc = vec![0.0; self.nodes.len()];
        for c in 1..self.nodes.len() {
            let p = self.nodes[c].parent.expect("non-root");
            acc[c] = acc[p] + edge(c);
        }
        acc
    }

    /// Accumulates a product of edge factors along every path.
    pub fn path_product(&self, edge: impl Fn(usize) -> f64) -> Vec<f64> {
        let mut acc = vec![1.0; self.nodes.len()];
        for c in 1..self.nodes.len() {
            let p = self.nodes[c].parent.expect("non-root");
            acc[c] = acc[p] * edge(c);
        }
        acc
    }

    pub fn leaf_values(&self, per_node: &[f64]) -> PathFunctional {
        PathFunctional::new(per_node[self.first_leaf..].to_vec())
    }

    /// Conditional expectations `E^Q[f | node]` for every node, where `Q` is
    /// given by its leaf weights (need not be normalised).
    pub fn conditional_expectation(&self, f: &PathFunctional, weights: &PathFunctional) -> Vec<f64> {
        let mut mass = vec![0.0; self.nodes.len()];
        let mut sum = vec![0.0; self.nodes.len()];
        for l in 0..self.num_leaves() {
            mass[self.first_leaf + l] = weights[l];
            sum[self.first_leaf + l] = weights[l] * f[l];
        }
        for n in (0..self.first_leaf).rev() {
            let ch = self.nodes[n].children.clone();
            mass[n] = ch.clone().map(|c| mass[c]).sum();
            sum[n] = ch.map(|c| sum[c]).sum();
        }
        sum.iter()
            .zip(&mass)
            .map(|(s, m)| if *m > 0.0 { s / m } else { 0.0 })
            .collect()
    }

    /// Subtree mass of every node under leaf weights.
    pub fn node_masses(&self, weights: &PathFunctional) -> Vec<f64> {
        let mut mass = vec![0.0; self.nodes.len()];
        for l in 0..self.num_leaves() {
            mass[self.first_leaf + l] = weights[l];
        }
        for n in (0..self.first_leaf).rev() {
            mass[n] = self.nodes[n].children.clone().map(|c| mass[c]).sum();
        }
        mass
    }

    pub fn nu_is_zero(&self) -> bool {
        self.internal_nodes()
            .all(|n| self.nodes[n].nu == 0.0 || self.nodes[n].qv == 0.0)
    }

    /// Per-edge return increment of the perturbed market,
    /// `r / (1 - delta * nu * r)`.
    ///
    /// Agrees with `(lambda + delta nu) qv + dM` to first order in `delta`
    /// and turns `X / L^delta` into an admissible wealth process of the
    /// perturbed market for every admissible `X` of the unperturbed one.
    pub fn perturbed_returns(&self, delta: f64) -> Result<EdgeValues> {
        let mut out = vec![0.0; self.nodes.len()];
        for (c, slot) in out.iter_mut().enumerate().skip(1) {
            let p = self.nodes[c].parent.expect("non-root");
            let r = self.edge_return(c);
            let factor = 1.0 - delta * self.nodes[p].nu * r;
            if factor <= 0.0 {
                return Err(Error::NonPositiveExponential {
                    node: c,
                    delta,
                    factor,
                });
            }
            *slot = r / factor;
        }
        Ok(out)
    }

    /// Leafwise `F = Σ nu r` and `G = Σ nu² r²`.
    pub fn compute_f_g(&self) -> (PathFunctional, PathFunctional) {
        let f = self.path_sum(|c| self.parent_nu(c) * self.edge_return(c));
        let g = self.path_sum(|c| {
            let v = self.parent_nu(c) * self.edge_return(c);
            v * v
        });
        (self.leaf_values(&f), self.leaf_values(&g))
    }

    /// Leafwise `L^delta = Π (1 - delta nu r)` along each path.
    pub fn l_delta(&self, delta: f64) -> Result<PathFunctional> {
        for c in 1..self.nodes.len() {
            let factor = 1.0 - delta * self.parent_nu(c) * self.edge_return(c);
            if factor <= 0.0 {
                return Err(Error::NonPositiveExponential {
                    node: c,
                    delta,
                    factor,
                });
            }
        }
        let prod = self.path_product(|c| 1.0 - delta * self.parent_nu(c) * self.edge_return(c));
        Ok(self.leaf_values(&prod))
    }

    /// Open interval of `delta` for which every factor `1 - delta nu r` is
    /// positive.
    pub fn positivity_radius(&self) -> (f64, f64) {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for c in 1..self.nodes.len() {
            let k = self.parent_nu(c) * self.edge_return(c);
            if k > 0.0 {
                hi = hi.min(1.0 / k);
            } else if k < 0.0 {
                lo = lo.max(1.0 / k);
            }
        }
        (lo, hi)
    }

    /// Leafwise `exp(c (|Σ nu ΔS^delta| + Σ nu² qv))`.
    pub fn zeta(&self, c: f64, delta: f64) -> Result<PathFunctional> {
        if !(c >= 0.0) {
            return Err(invalid("c", format!("must be non-negative, got {c}")));
        }
        let returns = self.perturbed_returns(delta)?;
        let stoch = self.path_sum(|n| self.parent_nu(n) * returns[n]);
        let comp = self.path_sum(|n| {
            let p = self.nodes[n].parent.expect("non-root");
            self.nodes[p].nu * self.nodes[p].nu * self.nodes[p].qv
        });
        let vals = (self.first_leaf..self.nodes.len())
            .map(|n| (c * (stoch[n].abs() + comp[n])).exp())
            .collect();
        Ok(PathFunctional::new(vals))
    }

    fn parent_nu(&self, c: usize) -> f64 {
        self.nodes[c]
            .parent
            .map(|p| self.nodes[p].nu)
            .unwrap_or(0.0)
    }

    /// Serializable layer layout of the path tree.
    pub fn to_layout(&self) -> TreeLayout {
        let mut layers = Vec::with_capacity(self.steps() + 1);
        for level in 0..=self.steps() {
            let range = self.level(level);
            let next_start = if level < self.steps() {
                self.level_start[level + 1]
            } else {
                0
            };
            let layer = range
                .map(|n| {
                    let node = &self.nodes[n];
                    LayoutNode {
                        state: node.state,
                        lambda: node.lambda,
                        nu: node.nu,
                        qv: if node.is_leaf() { None } else { Some(node.qv) },
                        children: node
                            .children
                            .clone()
                            .map(|c| LayoutEdge {
                                node: c - next_start,
                                prob: self.nodes[c].prob,
                                dm: self.nodes[c].dm,
                            })
                            .collect(),
                    }
                })
                .collect();
            layers.push(layer);
        }
        TreeLayout {
            times: self.times.clone(),
            layers,
        }
    }

    /// Builds a market from a layer layout. Layouts may be recombining (two
    /// edges pointing at the same node); such layouts are expanded into path
    /// trees, subject to `cap`.
    pub fn from_layout(layout: &TreeLayout, cap: usize) -> Result<Self> {
        let depth = layout
            .layers
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::InvalidTree("layout has no layers".into()))?;
        if depth == 0 {
            return Err(Error::InvalidTree("layout needs at least one step".into()));
        }
        if layout.times.len() != layout.layers.len() {
            return Err(Error::InvalidTree(format!(
                "{} times for {} layers",
                layout.times.len(),
                layout.layers.len()
            )));
        }
        if layout.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidTree("times must be strictly increasing".into()));
        }
        if layout.layers[0].len() != 1 {
            return Err(Error::InvalidTree("first layer must hold a single root".into()));
        }
        for (level, layer) in layout.layers.iter().enumerate().take(depth) {
            let next = layout.layers[level + 1].len();
            for (i, node) in layer.iter().enumerate() {
                if node.children.is_empty() {
                    return Err(Error::InvalidTree(format!(
                        "layer {level} node {i} has no children"
                    )));
                }
                if let Some(e) = node.children.iter().find(|e| e.node >= next) {
                    return Err(Error::InvalidTree(format!(
                        "layer {level} node {i} points at missing node {}",
                        e.node
                    )));
                }
            }
        }
        // expanded node count without allocating the tree
        let mut counts = vec![1usize; layout.layers[depth].len()];
        let mut total = counts.len();
        for level in (0..depth).rev() {
            let mut up = Vec::with_capacity(layout.layers[level].len());
            for node in &layout.layers[level] {
                let sub: usize = node.children.iter().map(|e| counts[e.node]).sum::<usize>() + 1;
                up.push(sub);
            }
            counts = up;
            total = counts[0];
            if total > cap {
                return Err(Error::NodeCapExceeded { nodes: total, cap });
            }
        }
        let _ = total;
        let mut layers: Vec<Vec<Proto>> = vec![vec![Proto {
            state: layout.layers[0][0].state,
            prob: 1.0,
            dm: 0.0,
            parent: None,
        }]];
        let mut source: Vec<Vec<usize>> = vec![vec![0]];
        for level in 0..depth {
            let mut next = Vec::new();
            let mut next_src = Vec::new();
            for (i, &src) in source[level].iter().enumerate() {
                for e in &layout.layers[level][src].children {
                    next.push(Proto {
                        state: layout.layers[level + 1][e.node].state,
                        prob: e.prob,
                        dm: e.dm,
                        parent: Some(i),
                    });
                    next_src.push(e.node);
                }
            }
            layers.push(next);
            source.push(next_src);
        }
        let qv: Vec<Vec<f64>> = (0..depth)
            .map(|level| {
                source[level]
                    .iter()
                    .map(|&s| {
                        let node = &layout.layers[level][s];
                        node.qv.unwrap_or_else(|| {
                            node.children.iter().map(|e| e.prob * e.dm * e.dm).sum()
                        })
                    })
                    .collect()
            })
            .collect();
        // lambda and nu follow the layout node each path node was expanded from
        let coeff_table: Vec<Vec<(f64, f64)>> = source
            .iter()
            .enumerate()
            .map(|(level, srcs)| {
                srcs.iter()
                    .map(|&s| {
                        let n = &layout.layers[level][s];
                        (n.lambda, n.nu)
                    })
                    .collect()
            })
            .collect();
        let mut market = Self::assemble(layers, layout.times.clone(), |_, _| (0.0, 0.0), Some(qv))?;
        for (level, row) in coeff_table.iter().enumerate().take(depth + 1) {
            let start = market.level_start[level];
            for (i, (l, v)) in row.iter().enumerate() {
                market.nodes[start + i].lambda = *l;
                market.nodes[start + i].nu = *v;
            }
        }
        market.validate()?;
        Ok(market)
    }

    /// Same tree with `nu` replaced.
    pub fn with_nu(&self, nu: &NodeFunction) -> Self {
        let mut out = self.clone();
        for node in out.nodes.iter_mut() {
            node.nu = nu.eval(self.times[node.level], node.state);
        }
        out
    }
}

struct Proto {
    state: f64,
    prob: f64,
    dm: f64,
    parent: Option<usize>,
}

fn count_nodes(branching: usize, steps: usize) -> usize {
    let mut total: usize = 0;
    let mut layer: usize = 1;
    for _ in 0..=steps {
        total = total.saturating_add(layer);
        layer = layer.saturating_mul(branching);
    }
    total
}

/// JSON layout: layers of nodes, each node listing its children by index in
/// the next layer together with the edge probability and martingale
/// increment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeLayout {
    pub times: Vec<f64>,
    pub layers: Vec<Vec<LayoutNode>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutNode {
    #[serde(default)]
    pub state: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub nu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qv: Option<f64>,
    #[serde(default)]
    pub children: Vec<LayoutEdge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutEdge {
    pub node: usize,
    pub prob: f64,
    pub dm: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_period(lambda: f64, nu: f64) -> TreeMarket {
        TreeMarket::binomial(1, 1.0, 0.1, lambda, nu).unwrap()
    }

    #[test]
    fn one_period_binomial_shape() {
        let m = one_period(0.0, 0.0);
        assert_eq!(m.len(), 3);
        assert_relative_eq!(m.node(1).dm, 0.1, epsilon = 1e-15);
        assert_relative_eq!(m.node(2).dm, -0.1, epsilon = 1e-15);
        assert_eq!(m.node(1).prob, 0.5);
        assert_relative_eq!(m.node(0).qv, 0.01, epsilon = 1e-15);
    }

    #[test]
    fn qv_is_sigma_squared_dt() {
        let m = TreeMarket::binomial(2, 0.5, 0.2, 0.0, 0.0).unwrap();
        for n in m.internal_nodes() {
            assert_relative_eq!(m.node(n).qv, 0.02, epsilon = 1e-15);
        }
    }

    #[test]
    fn four_step_invariants_by_summation() {
        let m = TreeMarket::binomial(4, 0.25, 0.2, 0.5, 0.0).unwrap();
        assert_eq!(m.internal_nodes().len(), 15);
        for n in m.internal_nodes() {
            let node = m.node(n);
            let p: f64 = node.children.clone().map(|c| m.node(c).prob).sum();
            let mean: f64 = node.children.clone().map(|c| m.node(c).prob * m.node(c).dm).sum();
            let var: f64 = node
                .children
                .clone()
                .map(|c| m.node(c).prob * m.node(c).dm.powi(2))
                .sum();
            assert_relative_eq!(p, 1.0, epsilon = 1e-15);
            assert!(mean.abs() < 1e-15);
            assert_relative_eq!(var, node.qv, epsilon = 1e-15);
        }
    }

    #[test]
    fn rejects_non_positive_inputs() {
        assert!(TreeMarket::binomial(0, 1.0, 0.1, 0.0, 0.0).is_err());
        assert!(TreeMarket::binomial(1, 0.0, 0.1, 0.0, 0.0).is_err());
        assert!(TreeMarket::binomial(1, 1.0, -0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn node_cap_is_enforced() {
        let b = [
            Branch {
                prob: 0.5,
                scaled_dm: 1.0,
            },
            Branch {
                prob: 0.5,
                scaled_dm: -1.0,
            },
        ];
        let err = TreeMarket::lattice_with_cap(
            10,
            0.1,
            0.2,
            &b,
            &NodeFunction::Constant(0.0),
            &NodeFunction::Constant(0.0),
            100,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NodeCapExceeded { .. }));
    }

    #[test]
    fn perturbed_returns_reduce_to_unperturbed() {
        let m = one_period(2.0, 1.0);
        let r0 = m.perturbed_returns(0.0).unwrap();
        assert_eq!(r0, m.unperturbed_returns());
        let m0 = one_period(2.0, 0.0);
        assert_eq!(m0.perturbed_returns(0.7).unwrap(), m0.unperturbed_returns());
    }

    #[test]
    fn perturbed_return_first_order_matches_drift_shift() {
        // (lambda + delta nu) qv + dM = 0.103 to first order in delta
        let m = one_period(0.0, 1.0);
        let r = m.perturbed_returns(0.3).unwrap();
        assert_relative_eq!(r[1], 0.1 / 0.97, epsilon = 1e-15);
        let h = 1e-6;
        let slope = (m.perturbed_returns(h).unwrap()[1] - 0.1) / h;
        assert_relative_eq!(slope, 0.01, epsilon = 1e-7);
    }

    #[test]
    fn f_and_g_single_edge() {
        let m = one_period(0.0, 1.0);
        let (f, g) = m.compute_f_g();
        assert_relative_eq!(f[0], 0.1, epsilon = 1e-15);
        assert_relative_eq!(f[1], -0.1, epsilon = 1e-15);
        assert_relative_eq!(g[0], 0.01, epsilon = 1e-15);
        assert_relative_eq!(g[1], 0.01, epsilon = 1e-15);
        let (f0, g0) = one_period(0.0, 0.0).compute_f_g();
        assert_eq!(f0.max_abs(), 0.0);
        assert_eq!(g0.max_abs(), 0.0);
    }

    #[test]
    fn f_and_g_two_periods() {
        let m = TreeMarket::binomial(2, 1.0, 0.1, 0.0, 1.0).unwrap();
        let (f, g) = m.compute_f_g();
        for l in 0..m.num_leaves() {
            assert_relative_eq!(g[l], 0.02, epsilon = 1e-15);
            assert_relative_eq!(f[l], m.node(m.leaf_node(l)).state, epsilon = 1e-15);
        }
    }

    #[test]
    fn l_delta_values_and_positivity() {
        let m = one_period(0.0, 1.0);
        let l0 = m.l_delta(0.0).unwrap();
        assert!(l0.iter().all(|v| *v == 1.0));
        let l = m.l_delta(0.5).unwrap();
        assert_relative_eq!(l[0], 0.95, epsilon = 1e-15);
        assert_relative_eq!(l[1], 1.05, epsilon = 1e-15);
        assert!(matches!(
            m.l_delta(20.0),
            Err(Error::NonPositiveExponential { .. })
        ));
        let (lo, hi) = m.positivity_radius();
        assert_relative_eq!(hi, 10.0, epsilon = 1e-12);
        assert_relative_eq!(lo, -10.0, epsilon = 1e-12);
    }

    #[test]
    fn zeta_values() {
        let m = one_period(0.0, 1.0);
        let z = m.zeta(1.0, 0.0).unwrap();
        assert_relative_eq!(z[0], 0.11f64.exp(), epsilon = 1e-14);
        assert_relative_eq!(z[1], 0.11f64.exp(), epsilon = 1e-14);
        assert!(m.zeta(0.0, 0.3).unwrap().iter().all(|v| *v == 1.0));
        assert!(one_period(2.0, 0.0)
            .zeta(3.0, 0.2)
            .unwrap()
            .iter()
            .all(|v| *v == 1.0));
        assert!(m.zeta(-1.0, 0.0).is_err());
    }

    /// Wealth with proportion `pi` in the unperturbed market, divided by
    /// `L^delta`, equals wealth with proportion `pi + delta nu` in the
    /// perturbed market; the map is onto because it is invertible per edge.
    #[test]
    fn division_by_l_delta_maps_wealth_sets() {
        for steps in [1, 2] {
            let m = TreeMarket::trinomial(steps, 0.5, 0.3, 1.5, NodeFunction::Affine {
                intercept: 1.0,
                state_slope: 2.0,
                time_slope: 0.0,
            })
            .unwrap();
            let delta = 0.4;
            let r0 = m.unperturbed_returns();
            let rd = m.perturbed_returns(delta).unwrap();
            let l = m.l_delta(delta).unwrap();
            for pi in [-3.0, -1.0, 0.0, 0.5, 2.0] {
                let x0 = m.path_product(|c| 1.0 + pi * r0[c]);
                let xd = m.path_product(|c| {
                    let p = m.node(c).parent.unwrap();
                    1.0 + (pi + delta * m.node(p).nu) * rd[c]
                });
                for leaf in 0..m.num_leaves() {
                    let n = m.leaf_node(leaf);
                    assert_relative_eq!(x0[n] / l[leaf], xd[n], max_relative = 1e-13);
                }
            }
        }
    }

    #[test]
    fn g_vanishes_iff_direction_degenerate() {
        let m = TreeMarket::binomial(3, 0.25, 0.2, 1.0, 0.0).unwrap();
        assert!(m.nu_is_zero());
        let (_, g) = m.compute_f_g();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn layout_round_trip_and_recombining_expansion() {
        let m = TreeMarket::binomial(3, 0.25, 0.2, 2.0, 1.0).unwrap();
        let layout = m.to_layout();
        let json = serde_json::to_string(&layout).unwrap();
        let back: TreeLayout = serde_json::from_str(&json).unwrap();
        let m2 = TreeMarket::from_layout(&back, DEFAULT_NODE_CAP).unwrap();
        assert_eq!(m, m2);

        // recombining two-step binomial written by hand
        let d = 0.1;
        let edge = |node, dm| LayoutEdge { node, prob: 0.5, dm };
        let recomb = TreeLayout {
            times: vec![0.0, 1.0, 2.0],
            layers: vec![
                vec![LayoutNode {
                    state: 0.0,
                    lambda: 1.0,
                    nu: 1.0,
                    qv: Some(d * d),
                    children: vec![edge(0, d), edge(1, -d)],
                }],
                vec![
                    LayoutNode {
                        state: d,
                        lambda: 1.0,
                        nu: 1.0,
                        qv: None,
                        children: vec![edge(0, d), edge(1, -d)],
                    },
                    LayoutNode {
                        state: -d,
                        lambda: 1.0,
                        nu: 1.0,
                        qv: None,
                        children: vec![edge(1, d), edge(2, -d)],
                    },
                ],
                vec![
                    LayoutNode {
                        state: 2.0 * d,
                        lambda: 0.0,
                        nu: 0.0,
                        qv: None,
                        children: vec![],
                    },
                    LayoutNode {
                        state: 0.0,
                        lambda: 0.0,
                        nu: 0.0,
                        qv: None,
                        children: vec![],
                    },
                    LayoutNode {
                        state: -2.0 * d,
                        lambda: 0.0,
                        nu: 0.0,
                        qv: None,
                        children: vec![],
                    },
                ],
            ],
        };
        let expanded = TreeMarket::from_layout(&recomb, DEFAULT_NODE_CAP).unwrap();
        assert_eq!(expanded.num_leaves(), 4);
        assert_eq!(expanded.len(), 7);
        assert!(TreeMarket::from_layout(&recomb, 5).is_err());
    }

    #[test]
    fn layout_rejects_broken_martingale() {
        let layout = TreeLayout {
            times: vec![0.0, 1.0],
            layers: vec![
                vec![LayoutNode {
                    state: 0.0,
                    lambda: 0.0,
                    nu: 0.0,
                    qv: None,
                    children: vec![
                        LayoutEdge {
                            node: 0,
                            prob: 0.5,
                            dm: 0.2,
                        },
                        LayoutEdge {
                            node: 1,
                            prob: 0.5,
                            dm: -0.1,
                        },
                    ],
                }],
                vec![
                    LayoutNode {
                        state: 0.2,
                        lambda: 0.0,
                        nu: 0.0,
                        qv: None,
                        children: vec![],
                    },
                    LayoutNode {
                        state: -0.1,
                        lambda: 0.0,
                        nu: 0.0,
                        qv: None,
                        children: vec![],
                    },
                ],
            ],
        };
        assert!(matches!(
            TreeMarket::from_layout(&layout, DEFAULT_NODE_CAP),
            Err(Error::InvalidTree(_))
        ));
    }
}
