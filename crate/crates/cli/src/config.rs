use std::path::{Path, PathBuf};

use mprsens::market::{NodeFunction, TreeLayout, DEFAULT_NODE_CAP};
use mprsens::mc::{MertonModel, PathEnsemble, DEFAULT_STEPS};
use mprsens::oracle::{default_scales, FD_STEP, RAYS, RAY_RADIUS};
use mprsens::{Error as EngineError, TreeMarket, UtilityChoice, UtilitySpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Whole run configuration, one TOML file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub market: MarketConfig,
    pub utility: UtilityChoice,
    #[serde(default)]
    pub perturbation: PerturbationConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub counterexample: CounterexampleConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: OutputConfig,
}

/// A coefficient given either as a plain number or as a node function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coefficient {
    Scalar(f64),
    Function(NodeFunction),
}

impl Coefficient {
    pub fn function(&self) -> NodeFunction {
        match self {
            Coefficient::Scalar(c) => NodeFunction::Constant(*c),
            Coefficient::Function(f) => f.clone(),
        }
    }

    fn constant(&self) -> Option<f64> {
        match self.function() {
            NodeFunction::Constant(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeKind {
    Binomial,
    Trinomial,
    /// Explicit tree read from a JSON layout file.
    Layout,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    #[serde(default = "default_kind")]
    pub kind: TreeKind,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: Coefficient,
    /// Initial capital.
    #[serde(default = "one")]
    pub x: f64,
    /// Layout file, relative to the config file.
    #[serde(default)]
    pub layout: Option<PathBuf>,
    #[serde(default = "default_cap")]
    pub node_cap: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    #[serde(default = "default_nu")]
    pub nu: Coefficient,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self { nu: default_nu() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_rays")]
    pub rays: Vec<[f64; 2]>,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_scales")]
    pub scales: Vec<f64>,
    #[serde(default = "default_fd")]
    pub fd_step: f64,
    /// Exponents `c` of the integrability probe.
    #[serde(default = "default_c_grid")]
    pub c_grid: Vec<f64>,
    /// Points per axis of the growth-inequality grid.
    #[serde(default = "default_grid")]
    pub growth_grid: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            rays: default_rays(),
            radius: RAY_RADIUS,
            scales: default_scales(),
            fd_step: FD_STEP,
            c_grid: default_c_grid(),
            growth_grid: default_grid(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_mc_steps")]
    pub n_steps: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub stream_id: u64,
    #[serde(default)]
    pub antithetic: bool,
    /// Steps of the tree the estimate is compared with.
    #[serde(default = "default_tree_steps")]
    pub tree_steps: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: default_paths(),
            n_steps: DEFAULT_STEPS,
            seed: default_seed(),
            stream_id: 0,
            antithetic: false,
            tree_steps: default_tree_steps(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleConfig {
    #[serde(default = "default_ce_p")]
    pub p: f64,
    #[serde(default = "default_ce_c")]
    pub c: Vec<f64>,
    #[serde(default = "default_truncations")]
    pub truncations: Vec<f64>,
    #[serde(default = "default_ce_paths")]
    pub n_paths: usize,
    #[serde(default = "default_mc_steps")]
    pub n_steps: usize,
}

impl Default for CounterexampleConfig {
    fn default() -> Self {
        Self {
            p: default_ce_p(),
            c: default_ce_c(),
            truncations: default_truncations(),
            n_paths: default_ce_paths(),
            n_steps: DEFAULT_STEPS,
        }
    }
}

/// Pass/fail thresholds. Upper bounds are multiplied by `--tolerance-scale`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub foc: f64,
    pub duality: f64,
    pub axx_byy: f64,
    pub matrix_product: f64,
    pub gap: f64,
    pub pointwise: f64,
    pub product_martingales: f64,
    pub min_slope: f64,
    pub first_order_rel: f64,
    pub kw_reconstruction: f64,
    pub kw_orthogonality: f64,
    pub kw_agreement: f64,
    pub replay: f64,
    pub deficit_floor: f64,
    pub merton_tree: f64,
    pub mc_sigmas: f64,
    pub weight_sigmas: f64,
    pub growth_per_decade: f64,
    pub comparator_band: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            foc: 1e-10,
            duality: 1e-9,
            axx_byy: 1e-10,
            matrix_product: 1e-8,
            gap: 1e-8,
            pointwise: 1e-9,
            product_martingales: 1e-10,
            min_slope: 2.5,
            first_order_rel: 1e-6,
            kw_reconstruction: 1e-10,
            kw_orthogonality: 1e-10,
            kw_agreement: 1e-8,
            replay: 1e-9,
            deficit_floor: 1e-12,
            merton_tree: 2e-3,
            mc_sigmas: 3.0,
            weight_sigmas: 5.0,
            growth_per_decade: 2.0,
            comparator_band: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

fn default_kind() -> TreeKind {
    TreeKind::Binomial
}
fn default_steps() -> usize {
    4
}
fn default_dt() -> f64 {
    0.25
}
fn default_sigma() -> f64 {
    0.2
}
fn default_lambda() -> Coefficient {
    Coefficient::Scalar(2.0)
}
fn default_nu() -> Coefficient {
    Coefficient::Scalar(1.0)
}
fn one() -> f64 {
    1.0
}
fn default_cap() -> usize {
    DEFAULT_NODE_CAP
}
fn default_rays() -> Vec<[f64; 2]> {
    RAYS.iter().map(|r| [r.0, r.1]).collect()
}
fn default_radius() -> f64 {
    RAY_RADIUS
}
fn default_fd() -> f64 {
    FD_STEP
}
fn default_c_grid() -> Vec<f64> {
    vec![0.1, 0.5, 1.0]
}
fn default_grid() -> usize {
    50
}
fn default_paths() -> usize {
    100_000
}
fn default_mc_steps() -> usize {
    DEFAULT_STEPS
}
fn default_seed() -> u64 {
    42
}
fn default_tree_steps() -> usize {
    12
}
fn default_ce_p() -> f64 {
    0.5
}
fn default_ce_c() -> Vec<f64> {
    vec![0.0, 0.5, 1.0]
}
fn default_truncations() -> Vec<f64> {
    vec![1e2, 1e4, 1e6]
}
fn default_ce_paths() -> usize {
    1_000_000
}

impl Config {
    /// Parses and validates a config file.
    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::parse(&text)?;
        if let Some(layout) = &cfg.market.layout {
            if layout.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.market.layout = Some(base.join(layout));
            }
        }
        Ok((cfg, text))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config {
            key: String::new(),
            message: e.message().to_string(),
        })?;
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            key: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        self.utility_spec()?;
        let m = &self.market;
        let bad = |key: &str, message: String| CliError::Config {
            key: key.to_string(),
            message,
        };
        if !(m.x > 0.0 && m.x.is_finite()) {
            return Err(bad("market.x", format!("initial capital must be positive, got {}", m.x)));
        }
        if m.kind == TreeKind::Layout && m.layout.is_none() {
            return Err(bad("market.layout", "kind = \"layout\" needs a layout file".into()));
        }
        let p = &self.probe;
        if p.rays.is_empty() || p.rays.iter().any(|r| r[0] == 0.0 && r[1] == 0.0) {
            return Err(bad("probe.rays", "need at least one nonzero ray".into()));
        }
        if !(p.radius > 0.0) {
            return Err(bad("probe.radius", format!("must be positive, got {}", p.radius)));
        }
        if p.scales.len() < 3 || p.scales.windows(2).any(|w| w[1] >= w[0]) || p.scales.iter().any(|t| *t <= 0.0) {
            return Err(bad("probe.scales", "need at least three positive, decreasing scales".into()));
        }
        if !(p.fd_step > 0.0) {
            return Err(bad("probe.fd_step", format!("must be positive, got {}", p.fd_step)));
        }
        if p.growth_grid < 2 {
            return Err(bad("probe.growth_grid", "need at least two points per axis".into()));
        }
        let ce = &self.counterexample;
        if !(ce.p > 0.0 && ce.p < 1.0) {
            return Err(bad("counterexample.p", format!("must lie in (0, 1), got {}", ce.p)));
        }
        if ce.truncations.windows(2).any(|w| w[1] <= w[0]) || ce.truncations.iter().any(|k| *k < 1.0) {
            return Err(bad("counterexample.truncations", "need increasing levels of at least 1".into()));
        }
        Ok(())
    }

    pub fn utility_spec(&self) -> Result<UtilitySpec, CliError> {
        self.utility.build().map_err(|e| engine_to_config("utility", e))
    }

    pub fn tree(&self) -> Result<TreeMarket, CliError> {
        let m = &self.market;
        let nu = self.perturbation.nu.function();
        let lambda = m.lambda.function();
        let built = match m.kind {
            TreeKind::Binomial => TreeMarket::binomial(m.steps, m.dt, m.sigma, lambda, nu),
            TreeKind::Trinomial => TreeMarket::trinomial(m.steps, m.dt, m.sigma, lambda, nu),
            TreeKind::Layout => {
                let path = m.layout.as_ref().expect("validated");
                let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
                    path: path.clone(),
                    source: e,
                })?;
                let layout: TreeLayout = serde_json::from_str(&text).map_err(|e| CliError::Config {
                    key: "market.layout".into(),
                    message: e.to_string(),
                })?;
                TreeMarket::from_layout(&layout, m.node_cap).map(|t| t.with_nu(&nu))
            }
        };
        built.map_err(|e| engine_to_config("market", e))
    }

    /// Continuous model with the market's constant coefficients.
    pub fn merton(&self) -> Result<MertonModel, CliError> {
        let p = match self.utility {
            UtilityChoice::Power { p } => p,
            _ => {
                return Err(CliError::Config {
                    key: "utility.kind".into(),
                    message: "Monte Carlo runs need power utility".into(),
                })
            }
        };
        let lambda = self.market.lambda.constant().ok_or_else(|| CliError::Config {
            key: "market.lambda".into(),
            message: "Monte Carlo runs need a constant lambda".into(),
        })?;
        let m = &self.market;
        MertonModel::new(p, lambda, m.sigma, m.x, m.steps as f64 * m.dt).map_err(|e| engine_to_config("market", e))
    }

    pub fn ensemble(&self) -> Result<PathEnsemble, CliError> {
        let mc = &self.mc;
        PathEnsemble::new(mc.n_paths, mc.n_steps, self.market.steps as f64 * self.market.dt, mc.seed)
            .and_then(|e| e.with_stream(mc.stream_id))
            .and_then(|e| e.with_antithetic(mc.antithetic))
            .map_err(|e| engine_to_config("mc", e))
    }

    pub fn counterexample_ensemble(&self) -> Result<PathEnsemble, CliError> {
        let ce = &self.counterexample;
        PathEnsemble::new(ce.n_paths, ce.n_steps, 1.0, self.mc.seed)
            .and_then(|e| e.with_stream(self.mc.stream_id))
            .map_err(|e| engine_to_config("counterexample", e))
    }

    pub fn rays(&self) -> Vec<(f64, f64)> {
        self.probe.rays.iter().map(|r| (r[0], r[1])).collect()
    }
}

/// Maps an engine parameter error to the config key it came from.
fn engine_to_config(section: &str, e: EngineError) -> CliError {
    match e {
        EngineError::InvalidParameter { name, reason } => CliError::Config {
            key: format!("{section}.{name}"),
            message: reason,
        },
        other => CliError::Config {
            key: section.to_string(),
            message: other.to_string(),
        },
    }
}
