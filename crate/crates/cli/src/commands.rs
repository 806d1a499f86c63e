//! Subcommand pipelines. Each returns its results and the checks it ran;
//! CSV tables go straight to the output directory.

use mprsens::kw::{hessian_from_kw, kw_decompose, recover_m1_n1};
use mprsens::market::NodeFunction;
use mprsens::mc::{counterexample_probe, cubic_direction, estimate_first_order, TruncatedMoment};
use mprsens::oracle::{brute_solve, dual_expansion_check, expansion_check, fd_u_delta, fit_order, RayCheck};
use mprsens::preferences::{check_growth_inequalities, log_grid};
use mprsens::sensitivity::{analyze, first_order, integrability_probe, SensitivityReport};
use mprsens::strategies::{derive_gammas, select_epsilon, CorrectedStrategy, DeficitRow};
use mprsens::{solve_unperturbed, OptimalPair, TreeMarket, UtilitySpec};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Config;
use crate::error::CliError;
use crate::report::{Checks, OutDir};

pub struct Run<'a> {
    pub cfg: &'a Config,
    pub out: &'a OutDir,
    pub checks: Checks,
}

type Outcome = Result<Value, CliError>;

struct Base {
    m: TreeMarket,
    u: UtilitySpec,
    pair: OptimalPair,
}

#[derive(Serialize)]
struct NodeRow {
    node: usize,
    level: usize,
    time: f64,
    state: f64,
    xhat: f64,
    yhat: f64,
    pi_hat: f64,
}

#[derive(Serialize)]
struct OracleRow {
    ray: String,
    t: f64,
    u_oracle: f64,
    u_pred: f64,
    residual: f64,
    slope: f64,
}

#[derive(Serialize)]
struct DeficitCsvRow {
    ray: String,
    t: f64,
    dx: f64,
    delta: f64,
    eps: f64,
    u_oracle: f64,
    u_corrected: f64,
    deficit: f64,
    slope: f64,
}

impl DeficitCsvRow {
    fn new(ray: String, r: DeficitRow, slope: f64) -> Self {
        Self {
            ray,
            t: r.t,
            dx: r.dx,
            delta: r.delta,
            eps: r.eps,
            u_oracle: r.u_oracle,
            u_corrected: r.u_corrected,
            deficit: r.deficit,
            slope,
        }
    }
}

#[derive(Serialize)]
struct McRow {
    quantity: &'static str,
    estimate: f64,
    stderr: f64,
    n_paths: usize,
    seed: u64,
}

#[derive(Serialize)]
struct CounterexampleRow {
    direction: &'static str,
    c: f64,
    k: f64,
    moment: f64,
    stderr: f64,
}

fn ray_label(d: (f64, f64)) -> String {
    format!("({},{})", d.0, d.1)
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a Config, out: &'a OutDir, scale: f64) -> Self {
        Self {
            cfg,
            out,
            checks: Checks::new(scale),
        }
    }

    fn base(&mut self) -> Result<Base, CliError> {
        let m = self.cfg.tree()?;
        let u = self.cfg.utility_spec()?;
        let pair = solve_unperturbed(&m, &u, self.cfg.market.x)?;
        let tol = &self.cfg.tolerances;
        self.checks.at_most("foc_residual", pair.foc_residual, tol.foc);
        let gap = (pair.u0 - pair.v0 - pair.x * pair.y).abs();
        self.checks.at_most("duality_gap", gap, tol.duality);
        Ok(Base { m, u, pair })
    }

    pub fn solve(&mut self) -> Outcome {
        let b = self.base()?;
        self.node_table(&b)?;
        Ok(self.solve_results(&b))
    }

    fn solve_results(&self, b: &Base) -> Value {
        let p = &b.pair;
        json!({
            "x": p.x,
            "y": p.y,
            "u0": p.u0,
            "v0": p.v0,
            "pi_root": p.pi_hat[0],
            "foc_residual": p.foc_residual,
            "risk_tolerance_exists": p.has_risk_tolerance(),
            "r0": p.r0,
            "nodes": b.m.len(),
            "leaves": b.m.num_leaves(),
        })
    }

    fn node_table(&self, b: &Base) -> Result<(), CliError> {
        let rows: Vec<NodeRow> = (0..b.m.len())
            .map(|n| {
                let node = b.m.node(n);
                NodeRow {
                    node: n,
                    level: node.level,
                    time: b.m.times()[node.level],
                    state: node.state,
                    xhat: b.pair.xhat_nodes[n],
                    yhat: b.pair.yhat_nodes[n],
                    pi_hat: b.pair.pi_hat[n],
                }
            })
            .collect();
        self.out.csv("nodes.csv", &rows)
    }

    fn sensitivity(&mut self, b: &Base) -> Result<(SensitivityReport, Value), CliError> {
        let rep = analyze(&b.m, &b.u, &b.pair)?;
        let tol = &self.cfg.tolerances;
        let r = &rep.residuals;
        self.checks.at_most("axx_byy", r.axx_byy, tol.axx_byy);
        self.checks.at_most("matrix_product", r.matrix_product, tol.matrix_product);
        self.checks.at_most("gap_identity", r.gap, tol.gap);
        self.checks.at_most("pointwise_primal", r.pointwise_primal, tol.pointwise);
        self.checks.at_most("pointwise_dual", r.pointwise_dual, tol.pointwise);
        self.checks.at_most("product_martingales", r.product_martingales, tol.product_martingales);

        let (f, g) = b.m.compute_f_g();
        let mut kw_json = Value::Null;
        if b.pair.has_risk_tolerance() {
            let kw = kw_decompose(&b.pair, &b.m, &b.u, &f, &g)?;
            let c = hessian_from_kw(&kw, &b.pair)?;
            let (m1, n1) = recover_m1_n1(&kw, &b.pair, &b.m)?;
            let d = rep.coefficients;
            let agreement = [
                (c.axx - d.axx).abs(),
                (c.axd - d.axd).abs(),
                (c.add - d.add).abs(),
                (c.byd - d.byd).abs(),
                (c.bdd - d.bdd).abs(),
                m1.max_abs_diff(&rep.m1),
                n1.max_abs_diff(&rep.n1),
            ]
            .into_iter()
            .fold(0.0, f64::max);
            self.checks.at_most("kw_reconstruction", kw.reconstruction_residual, tol.kw_reconstruction);
            self.checks.at_most("kw_orthogonality", kw.orthogonality, tol.kw_orthogonality);
            self.checks.at_most("kw_agreement", agreement, tol.kw_agreement);
            kw_json = json!({
                "p0": kw.p0,
                "r0": kw.r0,
                "c_a": kw.c_a,
                "c_b": kw.c_b,
                "coefficients": c,
                "reconstruction_residual": kw.reconstruction_residual,
                "orthogonality": kw.orthogonality,
                "agreement": agreement,
            });
        }
        let zeta = integrability_probe(&b.m, &b.pair, &self.cfg.probe.c_grid)?;
        let results = json!({
            "u0": rep.u0,
            "v0": rep.v0,
            "u_delta": first_order(&b.pair, &f),
            "grad_u": rep.grad_u,
            "grad_v": rep.grad_v,
            "hessian_u": rep.hessian_u,
            "hessian_v": rep.hessian_v,
            "coefficients": rep.coefficients,
            "residuals": rep.residuals,
            "dim_attainable": rep.dim_attainable,
            "dim_complement": rep.dim_complement,
            "kunita_watanabe": kw_json,
            "integrability": zeta.iter().map(|(c, e)| json!({"c": c, "e_r_zeta": e})).collect::<Vec<_>>(),
        });
        Ok((rep, results))
    }

    pub fn expand(&mut self) -> Outcome {
        let b = self.base()?;
        let (_, sens) = self.sensitivity(&b)?;
        Ok(json!({ "solve": self.solve_results(&b), "expansion": sens }))
    }

    fn deficit_table(&mut self, b: &Base, rep: &SensitivityReport) -> Outcome {
        let gammas = derive_gammas(&b.pair, rep, &b.m)?;
        let tol = &self.cfg.tolerances;
        self.checks.at_most("gamma0_replay", gammas.0.replay_residual, tol.replay);
        self.checks.at_most("gamma1_replay", gammas.1.replay_residual, tol.replay);
        let probe = &self.cfg.probe;
        let x = b.pair.x;

        // strategy dump at the largest probe along the first ray
        let d0 = self.cfg.rays()[0];
        let (dx0, dl0) = (d0.0 * probe.scales[0] * probe.radius, d0.1 * probe.scales[0] * probe.radius);
        let cs = CorrectedStrategy::new(&b.pair, &b.m, &gammas.0, &gammas.1, dx0, dl0, select_epsilon(dx0, dl0));
        self.out.csv("strategy.csv", &cs.rows(&b.m))?;

        let mut rows = Vec::new();
        let mut slopes = Vec::new();
        let mut min_deficit = f64::INFINITY;
        for dir in self.cfg.rays() {
            let mut ray_rows = Vec::new();
            for &t in &probe.scales {
                let (dx, delta) = (dir.0 * t * probe.radius, dir.1 * t * probe.radius);
                let oracle = brute_solve(&b.m, &b.u, x + dx, delta)?;
                let mut row = mprsens::strategies::deficit(&b.m, &b.u, &b.pair, &gammas, dx, delta, oracle.u0)?;
                row.t = t;
                min_deficit = min_deficit.min(row.deficit);
                ray_rows.push(row);
            }
            let pts: Vec<(f64, f64)> = ray_rows.iter().map(|r| (r.t, r.deficit)).collect();
            let slope = fit_order(&pts)?;
            slopes.push((dir, slope));
            rows.extend(ray_rows.into_iter().map(|row| DeficitCsvRow::new(ray_label(dir), row, slope)));
        }
        self.out.csv("deficit.csv", &rows)?;
        self.checks.at_least("deficit_min", min_deficit, -tol.deficit_floor);
        let diagonal: Vec<_> = slopes.iter().filter(|(d, _)| d.0 == d.1).collect();
        let checked = if diagonal.is_empty() { slopes.iter().collect() } else { diagonal };
        for (d, s) in checked {
            self.checks.at_least(format!("deficit_slope{}", ray_label(*d)), *s, tol.min_slope);
        }
        Ok(json!({
            "gamma0_replay": gammas.0.replay_residual,
            "gamma1_replay": gammas.1.replay_residual,
            "min_deficit": min_deficit,
            "slopes": slopes.iter().map(|(d, s)| json!({"ray": ray_label(*d), "slope": s})).collect::<Vec<_>>(),
        }))
    }

    pub fn strategies(&mut self) -> Outcome {
        let b = self.base()?;
        let (rep, _) = self.sensitivity(&b)?;
        let table = self.deficit_table(&b, &rep)?;
        Ok(json!({ "strategies": table }))
    }

    fn oracle_rows(checks: &[RayCheck]) -> Vec<OracleRow> {
        checks
            .iter()
            .flat_map(|rc| {
                rc.rows.iter().map(move |r| OracleRow {
                    ray: ray_label(rc.direction),
                    t: r.t,
                    u_oracle: r.u_oracle,
                    u_pred: r.u_pred,
                    residual: r.residual,
                    slope: rc.slope,
                })
            })
            .collect()
    }

    pub fn verify(&mut self) -> Outcome {
        let b = self.base()?;
        let (rep, sens) = self.sensitivity(&b)?;
        let probe = &self.cfg.probe;
        let tol = self.cfg.tolerances.clone();
        let rays = self.cfg.rays();

        let primal = expansion_check(&b.m, &b.u, &rep, &rays, probe.radius, &probe.scales)?;
        let dual = dual_expansion_check(&b.m, &b.u, &rep, &rays, probe.radius, &probe.scales)?;
        for rc in &primal {
            self.checks.at_least(format!("expansion_slope{}", ray_label(rc.direction)), rc.slope, tol.min_slope);
        }
        for rc in &dual {
            self.checks.at_least(format!("dual_expansion_slope{}", ray_label(rc.direction)), rc.slope, tol.min_slope);
        }
        self.out.csv("oracle.csv", &Self::oracle_rows(&primal))?;
        self.out.csv("dual_oracle.csv", &Self::oracle_rows(&dual))?;

        let u_delta = rep.grad_u[1];
        let fd = fd_u_delta(&b.m, &b.u, b.pair.x, probe.fd_step)?;
        let rel = (fd - u_delta).abs() / u_delta.abs().max(1e-6);
        self.checks.at_most("first_order_fd", rel, tol.first_order_rel);

        let axis = log_grid(1e-3, 1e3, probe.growth_grid);
        let grid: Vec<(f64, f64)> = axis.iter().flat_map(|&z| axis.iter().map(move |&x| (z, x))).collect();
        let growth = check_growth_inequalities(&b.u, &grid)?;
        self.checks.at_most("growth_violations", growth.violations.len() as f64, 0.0);

        let deficits = self.deficit_table(&b, &rep)?;
        Ok(json!({
            "solve": self.solve_results(&b),
            "expansion": sens,
            "first_order": { "analytic": u_delta, "finite_difference": fd, "relative_error": rel },
            "primal_slopes": primal.iter().map(|rc| json!({"ray": ray_label(rc.direction), "slope": rc.slope})).collect::<Vec<_>>(),
            "dual_slopes": dual.iter().map(|rc| json!({"ray": ray_label(rc.direction), "slope": rc.slope})).collect::<Vec<_>>(),
            "growth": { "checked": growth.checked, "violations": growth.violations.len() },
            "strategies": deficits,
        }))
    }

    pub fn mc(&mut self) -> Outcome {
        let model = self.cfg.merton()?;
        let ens = self.cfg.ensemble()?;
        let tol = self.cfg.tolerances.clone();
        let steps = self.cfg.mc.tree_steps;
        let baseline = model.baseline();
        let value_error = model.tree_value_error(steps)?;
        self.checks.at_most("merton_tree_value", value_error, tol.merton_tree);

        let sanity = ens.sanity_gate()?;
        let nu = self.cfg.perturbation.nu.function();
        let est = estimate_first_order(&ens, &model, &nu);
        let tree = model.tree(steps, nu.clone())?;
        let pair = solve_unperturbed(&tree, &mprsens::UtilitySpec::power(model.p)?, model.x)?;
        let tree_ud = first_order(&pair, &tree.compute_f_g().0);
        let diff = (est.u_delta.mean - tree_ud).abs();
        self.checks.at_most("mc_vs_tree", diff, tol.mc_sigmas * est.u_delta.stderr + 1e-12);
        self.checks.at_most(
            "weight_mean",
            (est.weight.mean - 1.0).abs(),
            tol.weight_sigmas * est.weight.stderr + 1e-12,
        );

        let seed = ens.seed;
        let rows: Vec<McRow> = [
            ("u_delta", est.u_delta),
            ("e_r_f", est.e_r_f),
            ("axd", est.axd),
            ("weight", est.weight),
        ]
        .into_iter()
        .map(|(q, mo)| McRow {
            quantity: q,
            estimate: mo.mean,
            stderr: mo.stderr,
            n_paths: ens.n_paths,
            seed,
        })
        .collect();
        self.out.csv("mc.csv", &rows)?;
        Ok(json!({
            "baseline": baseline,
            "tree_steps": steps,
            "tree_value_error": value_error,
            "tree_u_delta": tree_ud,
            "estimate": est,
            "sanity": sanity,
            "ensemble": ens,
        }))
    }

    pub fn counterexample(&mut self) -> Outcome {
        let ce = &self.cfg.counterexample;
        let ens = self.cfg.counterexample_ensemble()?;
        let tol = self.cfg.tolerances.clone();
        let cubic = counterexample_probe(&ce.c, &ce.truncations, &ens, ce.p, &cubic_direction())?;
        let flat = counterexample_probe(&ce.c, &ce.truncations, &ens, ce.p, &NodeFunction::Constant(0.0))?;

        for &c in ce.c.iter().filter(|c| **c >= 1.0) {
            let row: Vec<&TruncatedMoment> = cubic.iter().filter(|r| r.c == c).collect();
            let worst = row
                .windows(2)
                .map(|w| (w[1].moment / w[0].moment).powf(1.0 / (w[1].k / w[0].k).log10()))
                .fold(f64::INFINITY, f64::min);
            self.checks.at_least(format!("growth_per_decade(c={c})"), worst, tol.growth_per_decade);
        }
        let band = flat.iter().map(|r| (r.moment - 1.0).abs()).fold(0.0, f64::max);
        self.checks.at_most("comparator_band", band, tol.comparator_band);

        let rows: Vec<CounterexampleRow> = cubic
            .iter()
            .map(|r| ("cubic", r))
            .chain(flat.iter().map(|r| ("zero", r)))
            .map(|(direction, r)| CounterexampleRow {
                direction,
                c: r.c,
                k: r.k,
                moment: r.moment,
                stderr: r.stderr,
            })
            .collect();
        self.out.csv("counterexample.csv", &rows)?;
        Ok(json!({ "cubic": cubic, "zero": flat, "ensemble": ens }))
    }
}
