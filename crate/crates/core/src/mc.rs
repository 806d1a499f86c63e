//! Monte Carlo backend for Brownian models.
//!
//! Every sample draws its Brownian increments from its own ChaCha8 stream,
//! so results do not depend on the thread count. Samples are reduced in
//! fixed-size chunks whose partial sums are combined in index order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::market::{NodeFunction, TreeMarket};
use crate::preferences::UtilitySpec;
use crate::solver::solve_unperturbed;

/// Samples per reduction chunk.
pub const CHUNK: usize = 4096;
pub const DEFAULT_STEPS: usize = 256;
const STREAM_BITS: u32 = 40;

/// Brownian paths on a uniform grid, generated on demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub n_paths: usize,
    pub n_steps: usize,
    pub horizon: f64,
    pub seed: u64,
    pub stream_id: u64,
    /// Pair every draw with its negation; `n_paths` counts both members.
    pub antithetic: bool,
}

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Moment {
    pub mean: f64,
    pub stderr: f64,
    /// Independent samples (pairs when antithetic).
    pub samples: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SanityReport {
    /// Largest `|mean| / se` over steps.
    pub worst_mean_z: f64,
    /// Largest `|var - dt| / se` over steps.
    pub worst_var_z: f64,
}

impl PathEnsemble {
    pub fn new(n_paths: usize, n_steps: usize, horizon: f64, seed: u64) -> Result<Self> {
        let ens = Self {
            n_paths,
            n_steps,
            horizon,
            seed,
            stream_id: 0,
            antithetic: false,
        };
        ens.validate()?;
        Ok(ens)
    }

    pub fn with_stream(mut self, stream_id: u64) -> Result<Self> {
        self.stream_id = stream_id;
        self.validate()?;
        Ok(self)
    }

    pub fn with_antithetic(mut self, on: bool) -> Result<Self> {
        self.antithetic = on;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(invalid("n_paths", "need at least two paths"));
        }
        if self.n_steps == 0 {
            return Err(invalid("n_steps", "must be at least 1"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid("horizon", format!("must be positive, got {}", self.horizon)));
        }
        if self.antithetic && !self.n_paths.is_multiple_of(2) {
            return Err(invalid("n_paths", "antithetic pairing needs an even count"));
        }
        if self.stream_id >= 1 << (64 - STREAM_BITS) {
            return Err(invalid("stream_id", "must be below 2^24"));
        }
        if self.samples() as u64 >= 1 << STREAM_BITS {
            return Err(invalid("n_paths", "too many paths for the stream layout"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn samples(&self) -> usize {
        if self.antithetic {
            self.n_paths / 2
        } else {
            self.n_paths
        }
    }

    fn fill(&self, sample: usize, buf: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((self.stream_id << STREAM_BITS) | sample as u64);
        let sd = self.dt().sqrt();
        for b in buf.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *b = sd * z;
        }
    }

    /// Brownian increments of path `path`.
    pub fn increments(&self, path: usize) -> Vec<f64> {
        let mut buf = vec![0.0; self.n_steps];
        let sample = if self.antithetic { path / 2 } else { path };
        self.fill(sample, &mut buf);
        if self.antithetic && path % 2 == 1 {
            buf.iter_mut().for_each(|b| *b = -*b);
        }
        buf
    }

    /// Means of `width` path statistics with standard errors. Under
    /// antithetic pairing one sample is the average over a pair.
    pub fn moments<F>(&self, width: usize, stat: F) -> Vec<Moment>
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        let n = self.samples();
        let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|chunk| {
                let mut sum = vec![0.0; width];
                let mut sumsq = vec![0.0; width];
                let mut inc = vec![0.0; self.n_steps];
                let mut out = vec![0.0; width];
                let mut anti = vec![0.0; width];
                for s in chunk * CHUNK..((chunk + 1) * CHUNK).min(n) {
                    self.fill(s, &mut inc);
                    stat(&inc, &mut out);
                    if self.antithetic {
                        inc.iter_mut().for_each(|b| *b = -*b);
                        stat(&inc, &mut anti);
                        out.iter_mut().zip(&anti).for_each(|(o, a)| *o = 0.5 * (*o + a));
                    }
                    for k in 0..width {
                        sum[k] += out[k];
                        sumsq[k] += out[k] * out[k];
                    }
                }
                (sum, sumsq)
            })
            .collect();
        let mut sum = vec![0.0; width];
        let mut sumsq = vec![0.0; width];
        for (s, q) in &chunks {
            for k in 0..width {
                sum[k] += s[k];
                sumsq[k] += q[k];
            }
        }
        let nf = n as f64;
        (0..width)
            .map(|k| {
                let mean = sum[k] / nf;
                let var = ((sumsq[k] - nf * mean * mean) / (nf - 1.0)).max(0.0);
                Moment {
                    mean,
                    stderr: (var / nf).sqrt(),
                    samples: n,
                }
            })
            .collect()
    }

    /// Checks per-step sample mean and variance against `(0, dt)` at five
    /// standard errors.
    pub fn sanity_gate(&self) -> Result<SanityReport> {
        let steps = self.n_steps;
        let mut plain = self.clone();
        plain.antithetic = false;
        plain.n_paths = self.samples();
        let m = plain.moments(2 * steps, |inc, out| {
            for (i, b) in inc.iter().enumerate() {
                out[i] = *b;
                out[steps + i] = b * b;
            }
        });
        // under pairing the negated half has mean exactly zero and repeats
        // the squares, so only the independent draws count
        let n = plain.n_paths as f64;
        let dt = self.dt();
        let mut rep = SanityReport {
            worst_mean_z: 0.0,
            worst_var_z: 0.0,
        };
        for i in 0..steps {
            let mean = if self.antithetic { 0.0 } else { m[i].mean };
            let zm = mean.abs() / (dt / n).sqrt();
            let zv = (m[steps + i].mean - mean * mean - dt).abs() / (dt * (2.0 / n).sqrt());
            if zm > 5.0 || zv > 5.0 {
                return Err(Error::SanityGate {
                    step: i,
                    detail: format!("mean z = {zm:.2}, variance z = {zv:.2}"),
                });
            }
            rep.worst_mean_z = rep.worst_mean_z.max(zm);
            rep.worst_var_z = rep.worst_var_z.max(zv);
        }
        Ok(rep)
    }
}

/// Constant-coefficient power-utility model `dS⁰ = λσ² dt + σ dB`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MertonModel {
    pub p: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub x: f64,
    pub horizon: f64,
}

/// Closed-form solution of the Merton problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MertonBaseline {
    pub pi_star: f64,
    pub u0: f64,
    pub y: f64,
    pub axx: f64,
    /// `R₀ = x / (1 - p)`.
    pub r0: f64,
    /// `u_δ` along `ν ≡ 1`.
    pub u_delta: f64,
    /// `a(x,d)` along `ν ≡ 1`.
    pub axd: f64,
}

impl MertonModel {
    pub fn new(p: f64, lambda: f64, sigma: f64, x: f64, horizon: f64) -> Result<Self> {
        if !(p < 1.0 && p != 0.0 && p.is_finite()) {
            return Err(invalid("p", format!("power utility needs p < 1, p != 0, got {p}")));
        }
        if !lambda.is_finite() {
            return Err(invalid("lambda", "must be finite"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid("sigma", format!("must be positive, got {sigma}")));
        }
        if !(x > 0.0 && x.is_finite()) {
            return Err(invalid("x", format!("must be positive, got {x}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid("horizon", format!("must be positive, got {horizon}")));
        }
        Ok(Self {
            p,
            lambda,
            sigma,
            x,
            horizon,
        })
    }

    pub fn pi_star(&self) -> f64 {
        self.lambda / (1.0 - self.p)
    }

    /// Drift of `B` under `ℝ(x,0)`.
    pub fn tilt(&self) -> f64 {
        (self.pi_star() - self.lambda) * self.sigma
    }

    /// `dℝ/dℙ` as a function of `B_T`.
    pub fn weight(&self, b_t: f64) -> f64 {
        let th = self.tilt();
        (th * b_t - 0.5 * th * th * self.horizon).exp()
    }

    pub fn baseline(&self) -> MertonBaseline {
        let Self {
            p,
            lambda,
            sigma,
            x,
            horizon,
        } = *self;
        let pi = self.pi_star();
        let growth = (p * lambda * lambda * sigma * sigma * horizon / (2.0 * (1.0 - p))).exp();
        let u0 = x.powf(p) / p * growth;
        let y = x.powf(p - 1.0) * growth;
        let ef = pi * sigma * sigma * horizon;
        MertonBaseline {
            pi_star: pi,
            u0,
            y,
            axx: 1.0 - p,
            r0: x / (1.0 - p),
            u_delta: x * y * ef,
            axd: -p * x * ef,
        }
    }

    /// Binomial tree with the same coefficients and `ν ≡ nu`.
    pub fn tree(&self, steps: usize, nu: impl Into<NodeFunction>) -> Result<TreeMarket> {
        TreeMarket::binomial(steps, self.horizon / steps as f64, self.sigma, self.lambda, nu)
    }

    /// Relative error of the tree value function against the closed form.
    pub fn tree_value_error(&self, steps: usize) -> Result<f64> {
        let m = self.tree(steps, 0.0)?;
        let pair = solve_unperturbed(&m, &UtilitySpec::power(self.p)?, self.x)?;
        let u0 = self.baseline().u0;
        Ok((pair.u0 / u0 - 1.0).abs())
    }
}

pub fn merton_baseline(p: f64, lambda: f64, sigma: f64, x: f64, horizon: f64) -> Result<MertonBaseline> {
    Ok(MertonModel::new(p, lambda, sigma, x, horizon)?.baseline())
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FirstOrderEstimate {
    /// `xy E^ℝ[F]`.
    pub u_delta: Moment,
    pub e_r_f: Moment,
    /// `-p x E^ℝ[F]`.
    pub axd: Moment,
    /// Mean importance weight; should be 1.
    pub weight: Moment,
}

impl FirstOrderEstimate {
    /// Weights average to one within five standard errors.
    pub fn weights_sane(&self) -> bool {
        (self.weight.mean - 1.0).abs() <= 5.0 * self.weight.stderr
    }
}

/// `u_δ(x,0)` by importance sampling under `ℙ`, with `ν` evaluated at the
/// left end of each step on `(t, M_t)` and `F = Σ ν ΔS⁰` by Euler.
pub fn estimate_first_order(ens: &PathEnsemble, model: &MertonModel, nu: &NodeFunction) -> FirstOrderEstimate {
    let dt = ens.dt();
    let base = model.baseline();
    let xy = model.x * base.y;
    let (lam, sig) = (model.lambda, model.sigma);
    let m = ens.moments(3, |inc, out| {
        let (mut f, mut state, mut b) = (0.0, 0.0, 0.0);
        for (i, db) in inc.iter().enumerate() {
            let nu_i = nu.eval(i as f64 * dt, state);
            f += nu_i * (lam * sig * sig * dt + sig * db);
            state += sig * db;
            b += db;
        }
        let w = model.weight(b);
        out[0] = w * f;
        out[1] = w;
        out[2] = xy * w * f;
    });
    let scale = |mo: Moment, c: f64| Moment {
        mean: c * mo.mean,
        stderr: c.abs() * mo.stderr,
        samples: mo.samples,
    };
    FirstOrderEstimate {
        u_delta: m[2],
        e_r_f: m[0],
        axd: scale(m[0], -model.p * model.x),
        weight: m[1],
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TruncatedMoment {
    pub c: f64,
    pub k: f64,
    pub moment: f64,
    pub stderr: f64,
}

/// `E^ℝ[min(ζ(c,0), K)]` in the model `T` = horizon, `M = B`, `λ ≡ 1`, power
/// utility with exponent `p`, where `ζ(c,0) = exp(c(|ν·S⁰_T| + ν²·⟨M⟩_T))`.
/// Paths are simulated under `ℝ`, where `B` has drift `p/(1-p)`.
pub fn counterexample_probe(
    cs: &[f64],
    truncations: &[f64],
    ens: &PathEnsemble,
    p: f64,
    nu: &NodeFunction,
) -> Result<Vec<TruncatedMoment>> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid("p", format!("must lie in (0, 1), got {p}")));
    }
    if let Some(k) = truncations.iter().find(|k| !(**k >= 1.0)) {
        return Err(invalid("truncations", format!("levels must be at least 1, got {k}")));
    }
    if let Some(c) = cs.iter().find(|c| !(**c >= 0.0 && c.is_finite())) {
        return Err(invalid("c", format!("must be nonnegative, got {c}")));
    }
    let dt = ens.dt();
    let lambda = 1.0;
    let drift = lambda * p / (1.0 - p);
    let combos: Vec<(f64, f64)> = cs
        .iter()
        .flat_map(|&c| truncations.iter().map(move |&k| (c, k)))
        .collect();
    let m = ens.moments(combos.len(), |inc, out| {
        let (mut stoch, mut quad, mut b) = (0.0, 0.0, 0.0);
        for (i, dw) in inc.iter().enumerate() {
            let nu_i = nu.eval(i as f64 * dt, b);
            let db = drift * dt + dw;
            stoch += nu_i * (lambda * dt + db);
            quad += nu_i * nu_i * dt;
            b += db;
        }
        let s = stoch.abs() + quad;
        for (o, (c, k)) in out.iter_mut().zip(&combos) {
            *o = (c * s).exp().min(*k);
        }
    });
    Ok(combos
        .iter()
        .zip(m)
        .map(|(&(c, k), mo)| TruncatedMoment {
            c,
            k,
            moment: mo.mean,
            stderr: mo.stderr,
        })
        .collect())
}

/// The direction `ν_t = 3 B_t²`.
pub fn cubic_direction() -> NodeFunction {
    NodeFunction::Polynomial(vec![0.0, 0.0, 3.0])
}
