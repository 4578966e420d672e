//! Run configuration: a strict JSON document with documented defaults.

use affine_lab::params::AdmissibilityError;
use affine_lab::sde::{Decomposition, STABILITY_MARGIN};
use affine_lab::validate::TestFunction;
use affine_lab::{examples, AdmissibleParams, RawParams, UPoint};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_DT: f64 = 1.0 / 1024.0;
pub const DEFAULT_U_BOUND: f64 = 32.0;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("JSON syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("{0}")]
    Admissibility(#[from] AdmissibilityError),
    #[error("stability rule: {0}")]
    Stability(String),
    #[error("invalid value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub params: RawParams,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub transform: TransformConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub validate: ValidateConfig,
    #[serde(default)]
    pub limit: LimitConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "one")]
    pub t_max: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            t_max: 1.0,
            dt: DEFAULT_DT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_u_bound")]
    pub u_bound: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: default_n_paths(),
            seed: 0,
            eps: DEFAULT_EPS,
            u_bound: DEFAULT_U_BOUND,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformConfig {
    #[serde(default = "examples::test_frequencies")]
    pub u_list: Vec<UPoint>,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            u_list: examples::test_frequencies(),
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Affine,
    Catalytic,
    Reactant,
    Limit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Single,
    Pair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default = "default_system")]
    pub system: System,
    /// Paths written to the CSV; independent of `mc.n_paths`.
    #[serde(default = "default_sim_paths")]
    pub n_paths: usize,
    #[serde(default = "one")]
    pub x0: f64,
    /// `z(0)` for affine and limit runs, `y(0)` for catalytic runs, and the
    /// offset `y(0) − θ` (per reactant) for reactant runs.
    #[serde(default)]
    pub z0: [f64; 2],
    #[serde(default = "one")]
    pub l: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            system: default_system(),
            n_paths: default_sim_paths(),
            x0: 1.0,
            z0: [0.0; 2],
            l: 1.0,
            theta: default_theta(),
            mode: default_mode(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    AffineFormula,
    Moments,
    Uniqueness,
    Generator,
    Semigroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Affine,
    Cbi,
    Catalytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    #[serde(default = "default_checks")]
    pub checks: Vec<Check>,
    #[serde(default = "default_state")]
    pub x0: [f64; 2],
    #[serde(default = "default_t_list")]
    pub t_list: Vec<f64>,
    #[serde(default = "examples::test_frequencies")]
    pub u_list: Vec<UPoint>,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default = "default_pair")]
    pub uniqueness_x0: [f64; 2],
    #[serde(default = "default_sg")]
    pub semigroup_rt: [f64; 2],
    #[serde(default = "default_tol")]
    pub tol: f64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            checks: default_checks(),
            x0: default_state(),
            t_list: default_t_list(),
            u_list: examples::test_frequencies(),
            generator: GeneratorConfig::default(),
            uniqueness_x0: default_pair(),
            semigroup_rt: default_sg(),
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default = "default_states")]
    pub states: Vec<[f64; 2]>,
    #[serde(default = "default_dt")]
    pub delta_t: f64,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<Kind>,
    /// Reactant branching rate for the catalytic generator.
    #[serde(default = "one")]
    pub l: f64,
    /// Catalog names; empty means the whole catalog.
    #[serde(default)]
    pub functions: Vec<String>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            states: default_states(),
            delta_t: DEFAULT_DT,
            kinds: default_kinds(),
            l: 1.0,
            functions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitConfig {
    #[serde(default = "default_ladder")]
    pub theta_ladder: Vec<f64>,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    /// Sign split for pair mode; positive and negative parts when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposition: Option<Decomposition>,
    #[serde(default = "one")]
    pub x0: f64,
    /// `y(0) − θ` per reactant.
    #[serde(default = "default_z0")]
    pub z0: [f64; 2],
    /// When set, also checks that `θ e_θ` is constant within this relative tolerance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_rel_tol: Option<f64>,
}

impl Default for LimitConfig {
    fn default() -> Self {
        Self {
            theta_ladder: default_ladder(),
            modes: default_modes(),
            decomposition: None,
            x0: 1.0,
            z0: default_z0(),
            rate_rel_tol: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub directory: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: default_dir(),
            formats: default_formats(),
        }
    }
}

fn one() -> f64 {
    1.0
}
fn default_dt() -> f64 {
    DEFAULT_DT
}
fn default_eps() -> f64 {
    DEFAULT_EPS
}
fn default_tol() -> f64 {
    DEFAULT_TOL
}
fn default_u_bound() -> f64 {
    DEFAULT_U_BOUND
}
fn default_n_paths() -> usize {
    1000
}
fn default_sim_paths() -> usize {
    10
}
fn default_theta() -> f64 {
    16.0
}
fn default_system() -> System {
    System::Affine
}
fn default_mode() -> Mode {
    Mode::Single
}
fn default_checks() -> Vec<Check> {
    vec![
        Check::Semigroup,
        Check::AffineFormula,
        Check::Moments,
        Check::Uniqueness,
        Check::Generator,
    ]
}
fn default_state() -> [f64; 2] {
    [1.0, 0.5]
}
fn default_pair() -> [f64; 2] {
    [0.5, 1.5]
}
fn default_sg() -> [f64; 2] {
    [0.5, 1.0]
}
fn default_t_list() -> Vec<f64> {
    vec![0.5, 1.0]
}
fn default_states() -> Vec<[f64; 2]> {
    vec![[1.0, 0.5], [0.5, 1.0]]
}
fn default_kinds() -> Vec<Kind> {
    vec![Kind::Affine, Kind::Cbi, Kind::Catalytic]
}
fn default_ladder() -> Vec<f64> {
    vec![4.0, 16.0, 64.0, 256.0]
}
fn default_modes() -> Vec<Mode> {
    vec![Mode::Single, Mode::Pair]
}
fn default_z0() -> [f64; 2] {
    [0.5, 0.0]
}
fn default_dir() -> String {
    "out".into()
}
fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

impl RunConfig {
    /// The validated parameter set.
    pub fn admissible(&self) -> Result<AdmissibleParams, ConfigError> {
        Ok(self.params.validate()?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn generator_functions(&self) -> Result<Vec<TestFunction>, ConfigError> {
        let names = &self.validate.generator.functions;
        if names.is_empty() {
            return Ok(TestFunction::CATALOG.to_vec());
        }
        names
            .iter()
            .map(|n| {
                TestFunction::from_name(n).ok_or_else(|| ConfigError::Schema {
                    path: "validate.generator.functions".into(),
                    message: format!("unknown test function `{n}`"),
                })
            })
            .collect()
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_syntax() || inner.is_eof() {
            ConfigError::Syntax {
                line: inner.line(),
                column: inner.column(),
                message: inner.to_string(),
            }
        } else {
            ConfigError::Schema {
                path,
                message: inner.to_string(),
            }
        }
    })?;
    check(&cfg)?;
    Ok(cfg)
}

fn check(cfg: &RunConfig) -> Result<(), ConfigError> {
    let p = cfg.admissible()?;
    let invalid = |s: String| Err(ConfigError::Invalid(s));
    let g = &cfg.grid;
    if !(g.t_max > 0.0 && g.t_max.is_finite()) {
        return invalid(format!("grid.t_max must be > 0, got {}", g.t_max));
    }
    if !(g.dt > 0.0 && g.dt <= g.t_max) {
        return invalid(format!("grid.dt must lie in (0, t_max], got {}", g.dt));
    }
    for (name, rate) in [("beta11", p.beta11()), ("beta22", p.beta22())] {
        if g.dt * rate.abs() > STABILITY_MARGIN {
            return Err(ConfigError::Stability(format!(
                "dt * |{name}| = {} exceeds {STABILITY_MARGIN}",
                g.dt * rate.abs()
            )));
        }
    }
    let mc = &cfg.mc;
    if mc.n_paths < 2 {
        return invalid(format!("mc.n_paths must be >= 2, got {}", mc.n_paths));
    }
    if !(mc.eps >= 0.0 && mc.eps.is_finite()) {
        return invalid(format!("mc.eps must be >= 0, got {}", mc.eps));
    }
    if !(mc.u_bound > 0.0 && mc.u_bound.is_finite()) {
        return invalid(format!("mc.u_bound must be > 0, got {}", mc.u_bound));
    }
    for (name, tol) in [
        ("transform.tol", cfg.transform.tol),
        ("validate.tol", cfg.validate.tol),
    ] {
        if !(1e-12..=1e-4).contains(&tol) {
            return invalid(format!("{name} must lie in [1e-12, 1e-4], got {tol}"));
        }
    }
    for u in cfg.transform.u_list.iter().chain(&cfg.validate.u_list) {
        UPoint::new(u.u1, u.u2).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    }
    let gen = &cfg.validate.generator;
    if gen.delta_t * p.beta11().abs().max(p.beta22().abs()) > STABILITY_MARGIN {
        return Err(ConfigError::Stability(format!(
            "validate.generator.delta_t = {} is too coarse for the drift rates",
            gen.delta_t
        )));
    }
    cfg.generator_functions()?;
    let ladder = &cfg.limit.theta_ladder;
    if ladder.is_empty() || ladder[0] < 1.0 || ladder.windows(2).any(|w| !(w[1] > w[0])) {
        return invalid("limit.theta_ladder must be increasing and >= 1".into());
    }
    if let Some(d) = &cfg.limit.decomposition {
        d.check(&p)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    }
    if let Some(tol) = cfg.limit.rate_rel_tol {
        if !(tol > 0.0) {
            return invalid(format!("limit.rate_rel_tol must be > 0, got {tol}"));
        }
    }
    if cfg.output.directory.is_empty() {
        return invalid("output.directory must not be empty".into());
    }
    Ok(())
}
