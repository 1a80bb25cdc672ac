//! Problem description file (TOML, strict keys, `schema_version = 1`).

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use roblog_core::bsde::{SolveMode, SolverSpec};
use roblog_core::constraints::{ConstraintSet, Primitive};
use roblog_core::generator::{Convention, GeneratorBundle};
use roblog_core::model::{MarketModel, PiecewiseConstant, ProblemWeights};
use roblog_core::penalty::{PenaltyKind, PenaltySpec, RadialTable};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

/// A validation failure at a dotted field path, e.g. `weights.x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub weights: WeightsConfig,
    pub penalty: PenaltyConfig,
    #[serde(default)]
    pub constraints: ConstraintsConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub conjugate: ConjugateConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub m: usize,
    /// Constant drift; omit when `pieces` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    /// `d` rows of length `m`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
    pub eps: f64,
    #[serde(rename = "K")]
    pub k_upper: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pieces: Vec<PieceConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PieceConfig {
    pub start: f64,
    pub b: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub alpha: f64,
    pub alpha_bar: f64,
    pub beta: f64,
    #[serde(default)]
    pub delta: DeltaConfig,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeltaConfig {
    Constant(f64),
    Piecewise(PiecewiseDelta),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiecewiseDelta {
    pub starts: Vec<f64>,
    pub values: Vec<f64>,
}

impl Default for DeltaConfig {
    fn default() -> Self {
        DeltaConfig::Constant(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKindName {
    Quadratic,
    Norm,
    Tabulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    pub kind: PenaltyKindName,
    /// Weight of the quadratic kind, `h = w |x|^2 / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<f64>,
    /// Two-column CSV `(radius, value)`, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Whole,
    Box,
    Ball,
    Polytope,
    Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimitiveConfig {
    #[serde(rename = "type")]
    pub kind: PrimitiveKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// Rows `a` of the constraints `a . x <= b`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normals: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
}

impl PrimitiveConfig {
    fn of_kind(kind: PrimitiveKind) -> Self {
        Self { kind, lo: None, hi: None, center: None, radius: None, normals: None, offsets: None, point: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintsConfig {
    /// Union of primitives; unconstrained when empty.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub portfolio: Vec<PrimitiveConfig>,
    /// Union of primitives in `R`; `{0}` when empty.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub consumption: Vec<PrimitiveConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Auto,
    Ode,
    Lattice,
}

impl From<ModeName> for SolveMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Auto => SolveMode::Auto,
            ModeName::Ode => SolveMode::Ode,
            ModeName::Lattice => SolveMode::Lattice,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ConventionName {
    Calibrated,
    LiteralPaper,
}

impl From<ConventionName> for Convention {
    fn from(c: ConventionName) -> Self {
        match c {
            ConventionName::Calibrated => Convention::Calibrated,
            ConventionName::LiteralPaper => Convention::LiteralPaper,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(rename = "N")]
    pub steps: usize,
    pub mode: ModeName,
    pub convention: ConventionName,
    pub workers: usize,
    pub refinement_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { steps: 1000, mode: ModeName::Auto, convention: ConventionName::Calibrated, workers: 1, refinement_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtaGridConfig {
    pub radius: f64,
    pub spacing: f64,
}

impl Default for EtaGridConfig {
    fn default() -> Self {
        Self { radius: 1.0, spacing: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub eta_grid: EtaGridConfig,
    pub strategy_perturbations: usize,
    /// Perturbation sizes are drawn uniformly from this range.
    pub perturbation_range: [f64; 2],
    /// Defaults to `{0, T/4, T/2, 3T/4}`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<f64>>,
    pub seed: u64,
    pub tolerances: ToleranceConfig,
    pub saddle: SaddleConfig,
    pub generator_samples: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            eta_grid: EtaGridConfig::default(),
            strategy_perturbations: 50,
            perturbation_range: [0.05, 0.3],
            checkpoints: None,
            seed: 0,
            tolerances: ToleranceConfig::default(),
            saddle: SaddleConfig::default(),
            generator_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceConfig {
    pub crosscheck: f64,
    pub generator: f64,
    pub exact: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self { crosscheck: 1e-2, generator: 1e-6, exact: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaddleConfig {
    pub pi_resolution: f64,
    pub pi_radius: f64,
    pub eta_resolution: f64,
    pub eta_radius: f64,
    pub c_resolution: f64,
    pub c_max: f64,
    pub time_steps: usize,
}

impl Default for SaddleConfig {
    fn default() -> Self {
        let g = roblog_core::verify::SaddleGrids::default();
        Self {
            pi_resolution: g.pi_resolution,
            pi_radius: g.pi_radius,
            eta_resolution: g.eta_resolution,
            eta_radius: g.eta_radius,
            c_resolution: g.c_resolution,
            c_max: g.c_max,
            time_steps: g.time_steps,
        }
    }
}

impl SaddleConfig {
    pub fn grids(&self) -> roblog_core::verify::SaddleGrids {
        roblog_core::verify::SaddleGrids {
            pi_resolution: self.pi_resolution,
            pi_radius: self.pi_radius,
            eta_resolution: self.eta_resolution,
            eta_radius: self.eta_radius,
            c_resolution: self.c_resolution,
            c_max: self.c_max,
            time_steps: self.time_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub paths: usize,
    pub seed: u64,
    /// Only the first `record_paths` paths are written to paths.csv.
    pub record_paths: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { paths: 1000, seed: 0, record_paths: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConjugateConfig {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for ConjugateConfig {
    fn default() -> Self {
        Self { lo: -2.0, hi: 2.0, step: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: PathBuf::from("roblog_out"), formats: vec!["csv".into()] }
    }
}

/// Assembled core objects.
pub struct Problem {
    pub bundle: GeneratorBundle,
    pub solver: SolverSpec,
}

fn err(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::new(path, message)
}

fn check_finite(path: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(err(path, format!("must be finite, got {v}")))
    }
}

fn matrix(path: &str, rows: &[Vec<f64>], d: usize, m: usize) -> Result<DMatrix<f64>, ConfigError> {
    if rows.len() != d {
        return Err(err(path, format!("expected {d} rows, got {}", rows.len())));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != m {
            return Err(err(format!("{path}[{i}]"), format!("expected {m} columns, got {}", r.len())));
        }
        for &v in r {
            check_finite(&format!("{path}[{i}]"), v)?;
        }
    }
    Ok(DMatrix::from_fn(d, m, |i, j| rows[i][j]))
}

fn vector(path: &str, v: &[f64], len: usize) -> Result<DVector<f64>, ConfigError> {
    if v.len() != len {
        return Err(err(path, format!("expected length {len}, got {}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

impl ProblemConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ProblemConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            err("", format!("parse error: {msg}{}", e.span().map(|s| format!(" (bytes {}..{})", s.start, s.end)).unwrap_or_default()))
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(err(
                "schema_version",
                format!("unsupported schema version {}, expected {SCHEMA_VERSION}", cfg.schema_version),
            ));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| err("", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Normalized text form; `parse(to_toml(c)) == c`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the normalized instance; output location and worker count excluded.
    pub fn instance_hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputConfig::default();
        c.solver.workers = 1;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    fn model(&self) -> Result<MarketModel, ConfigError> {
        let mc = &self.model;
        let (d, m) = (mc.d, mc.m);
        if d == 0 {
            return Err(err("model.d", "must be at least 1"));
        }
        if m == 0 {
            return Err(err("model.m", "must be at least 1"));
        }
        check_finite("model.eps", mc.eps)?;
        check_finite("model.K", mc.k_upper)?;
        let mut starts = Vec::new();
        let mut pieces = Vec::new();
        match (&mc.b, &mc.sigma, mc.pieces.is_empty()) {
            (Some(b), Some(s), true) => {
                starts.push(0.0);
                pieces.push((vector("model.b", b, d)?, matrix("model.sigma", s, d, m)?));
            }
            (None, None, false) => {
                for (i, p) in mc.pieces.iter().enumerate() {
                    starts.push(p.start);
                    pieces.push((
                        vector(&format!("model.pieces[{i}].b"), &p.b, d)?,
                        matrix(&format!("model.pieces[{i}].sigma"), &p.sigma, d, m)?,
                    ));
                }
            }
            _ => return Err(err("model", "give either b and sigma, or pieces")),
        }
        MarketModel::new(d, m, starts, pieces, mc.eps, mc.k_upper).map_err(|e| err("model", e.to_string()))
    }

    fn weights(&self) -> Result<ProblemWeights, ConfigError> {
        let w = &self.weights;
        for (name, v) in [("alpha", w.alpha), ("alpha_bar", w.alpha_bar), ("beta", w.beta), ("T", w.horizon), ("x", w.x)] {
            check_finite(&format!("weights.{name}"), v)?;
        }
        if !(w.x > 0.0) {
            return Err(err("weights.x", format!("initial_wealth must be positive, got {}", w.x)));
        }
        if !(w.beta > 0.0) {
            return Err(err("weights.beta", format!("must be positive, got {}", w.beta)));
        }
        if !(w.horizon > 0.0) {
            return Err(err("weights.T", format!("must be positive, got {}", w.horizon)));
        }
        let delta = match &w.delta {
            DeltaConfig::Constant(v) => PiecewiseConstant::constant(*v),
            DeltaConfig::Piecewise(p) => PiecewiseConstant::new(p.starts.clone(), p.values.clone())
                .map_err(|e| err("weights.delta", e.to_string()))?,
        };
        ProblemWeights::new(w.alpha, w.alpha_bar, w.beta, delta, w.horizon, w.x).map_err(|e| err("weights", e.to_string()))
    }

    fn penalty(&self, base_dir: &Path) -> Result<PenaltySpec, ConfigError> {
        let p = &self.penalty;
        let kind = match p.kind {
            PenaltyKindName::Quadratic => {
                if p.table.is_some() {
                    return Err(err("penalty.table", "only allowed for kind = \"tabulated\""));
                }
                PenaltyKind::Quadratic { w: p.w.unwrap_or(1.0) }
            }
            PenaltyKindName::Norm => {
                if p.w.is_some() || p.table.is_some() {
                    return Err(err("penalty", "kind = \"norm\" takes no w or table"));
                }
                PenaltyKind::Norm
            }
            PenaltyKindName::Tabulated => {
                let rel = p.table.as_ref().ok_or_else(|| err("penalty.table", "required for kind = \"tabulated\""))?;
                let path = base_dir.join(rel);
                PenaltyKind::Tabulated(RadialTable::from_csv_path(&path).map_err(|e| err("penalty.table", e.to_string()))?)
            }
        };
        let default_k1 = match &kind {
            PenaltyKind::Quadratic { w } => 0.5 * w,
            _ => 0.0,
        };
        PenaltySpec::new(kind, p.kappa1.unwrap_or(default_k1), p.kappa2.unwrap_or(0.0)).map_err(|e| err("penalty", e.to_string()))
    }

    fn constraint_set(path: &str, prims: &[PrimitiveConfig], dim: usize) -> Result<ConstraintSet, ConfigError> {
        let mut pieces = Vec::with_capacity(prims.len());
        for (i, pc) in prims.iter().enumerate() {
            let at = |field: &str| format!("{path}[{i}].{field}");
            let need_vec = |field: &str, v: &Option<Vec<f64>>| -> Result<Vec<f64>, ConfigError> {
                let v = v.clone().ok_or_else(|| err(at(field), "required"))?;
                if v.len() != dim {
                    return Err(err(at(field), format!("expected length {dim}, got {}", v.len())));
                }
                Ok(v)
            };
            let prim = match pc.kind {
                PrimitiveKind::Whole => Primitive::Whole,
                PrimitiveKind::Box => Primitive::Box { lo: need_vec("lo", &pc.lo)?, hi: need_vec("hi", &pc.hi)? },
                PrimitiveKind::Ball => Primitive::Ball {
                    center: need_vec("center", &pc.center)?,
                    radius: pc.radius.ok_or_else(|| err(at("radius"), "required"))?,
                },
                PrimitiveKind::Point => Primitive::Point(need_vec("point", &pc.point)?),
                PrimitiveKind::Polytope => {
                    let normals = pc.normals.clone().ok_or_else(|| err(at("normals"), "required"))?;
                    let offsets = pc.offsets.clone().ok_or_else(|| err(at("offsets"), "required"))?;
                    if normals.len() != offsets.len() {
                        return Err(err(at("offsets"), "one offset per normal required"));
                    }
                    for (j, a) in normals.iter().enumerate() {
                        if a.len() != dim {
                            return Err(err(format!("{path}[{i}].normals[{j}]"), format!("expected length {dim}")));
                        }
                    }
                    Primitive::Polytope { normals, offsets }
                }
            };
            pieces.push(prim);
        }
        ConstraintSet::new(dim, pieces).map_err(|e| err(path, e.to_string()))
    }

    /// Re-validates every block and assembles the solver inputs.
    pub fn build(&self, base_dir: &Path) -> Result<Problem, ConfigError> {
        let model = self.model()?;
        let weights = self.weights()?;
        let penalty = self.penalty(base_dir)?;
        let portfolio = if self.constraints.portfolio.is_empty() {
            ConstraintSet::whole(self.model.d)
        } else {
            Self::constraint_set("constraints.portfolio", &self.constraints.portfolio, self.model.d)?
        };
        let consumption = if self.constraints.consumption.is_empty() {
            ConstraintSet::point(vec![0.0])
        } else {
            Self::constraint_set("constraints.consumption", &self.constraints.consumption, 1)?
        };
        let s = &self.solver;
        if s.steps == 0 {
            return Err(err("solver.N", "must be at least 1"));
        }
        if s.mode == ModeName::Lattice && self.model.m > roblog_core::lattice::MAX_DIM {
            return Err(err(
                "solver.mode",
                format!(
                    "lattice dimension cap: lattice mode needs model.m <= {}, got {}",
                    roblog_core::lattice::MAX_DIM,
                    self.model.m
                ),
            ));
        }
        if !(s.refinement_tol > 0.0) {
            return Err(err("solver.refinement_tol", "must be positive"));
        }
        if self.output.formats.iter().any(|f| f != "csv") {
            return Err(err("output.formats", "only \"csv\" is supported"));
        }
        let [lo, hi] = self.verify.perturbation_range;
        if !(0.0 <= lo && lo <= hi) {
            return Err(err("verify.perturbation_range", "need 0 <= min <= max"));
        }
        if let Some(cps) = &self.verify.checkpoints {
            if let Some(bad) = cps.iter().find(|&&s| !(0.0..self.weights.horizon).contains(&s)) {
                return Err(err("verify.checkpoints", format!("{bad} outside [0, T)")));
            }
        }
        if !(self.conjugate.step > 0.0) || self.conjugate.hi < self.conjugate.lo {
            return Err(err("conjugate", "need lo <= hi and step > 0"));
        }
        let bundle = GeneratorBundle::new(model, weights, penalty, portfolio, consumption, s.convention.into())
            .map_err(|e| err("constraints", e.to_string()))?;
        let solver =
            SolverSpec { steps: s.steps, mode: s.mode.into(), workers: s.workers.max(1), refinement_tol: s.refinement_tol };
        Ok(Problem { bundle, solver })
    }

    pub fn portfolio_is_zero_point(&self) -> bool {
        let zero = PrimitiveConfig { point: Some(vec![0.0; self.model.d]), ..PrimitiveConfig::of_kind(PrimitiveKind::Point) };
        self.constraints.portfolio.len() == 1 && self.constraints.portfolio[0] == zero
    }

    pub fn consumption_is_zero_point(&self) -> bool {
        let zero = PrimitiveConfig { point: Some(vec![0.0]), ..PrimitiveConfig::of_kind(PrimitiveKind::Point) };
        self.constraints.consumption.is_empty() || self.constraints.consumption == [zero]
    }
}
