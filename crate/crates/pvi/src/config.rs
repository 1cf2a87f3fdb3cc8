//! TOML run configuration. Every coefficient is chosen by a `kind` tag plus
//! parameter arrays; infinite bounds are written as the strings `"inf"` and
//! `"-inf"`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pvi_core::bsvi::{Backend, Generator, GeneratorKind, RegressionBasis, SolverOptions, SourceTerm, TerminalFn, TerminalMap};
use pvi_core::field::{DeclaredConstants, FieldGrid, McSettings, ProblemSpec};
use pvi_core::sde::{CoefficientField, Diffusion, Drift};
use pvi_core::ConvexFunction;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("{0}")]
    Invalid(String),
}

fn invalid<T>(m: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(m.into()))
}

/// A real that may be written as `"inf"`, `"+inf"` or `"-inf"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NumOrStr", into = "NumOrStr")]
pub struct Real(pub f64);

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum NumOrStr {
    Num(f64),
    Str(String),
}

impl TryFrom<NumOrStr> for Real {
    type Error = String;

    fn try_from(v: NumOrStr) -> Result<Self, String> {
        match v {
            NumOrStr::Num(x) => Ok(Real(x)),
            NumOrStr::Str(s) => match s.trim() {
                "inf" | "+inf" => Ok(Real(f64::INFINITY)),
                "-inf" => Ok(Real(f64::NEG_INFINITY)),
                other => Err(format!("expected a number or \"inf\"/\"-inf\", got {other:?}")),
            },
        }
    }
}

impl From<Real> for NumOrStr {
    fn from(r: Real) -> Self {
        if r.0 == f64::INFINITY {
            NumOrStr::Str("inf".into())
        } else if r.0 == f64::NEG_INFINITY {
            NumOrStr::Str("-inf".into())
        } else {
            NumOrStr::Num(r.0)
        }
    }
}

fn reals(v: &[Real]) -> Vec<f64> {
    v.iter().map(|r| r.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftCfg {
    Zero,
    Constant { value: Vec<f64> },
    Affine { a: Vec<f64>, c: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionCfg {
    Zero,
    Constant { matrix: Vec<f64> },
    DiagonalAffine { slope: Vec<f64>, intercept: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceCfg {
    Constant { value: Vec<f64> },
    Affine { a: Vec<f64>, c: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorCfg {
    Zero,
    Constant { value: Vec<f64> },
    LinearInY { gamma: f64 },
    Separable { gamma: f64, source: SourceCfg },
    DampedRotation { gamma: f64, omega: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalCfg {
    Polynomial { axis: usize, coeffs: Vec<f64> },
    PositivePart { axis: usize, strike: f64 },
    Norm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermCfg {
    pub weight: f64,
    pub phi: PhiCfg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhiCfg {
    Zero { k: usize },
    SeparableAbs { k: usize },
    EuclideanNorm { k: usize },
    Quadratic { k: usize, q: Vec<f64> },
    IndicatorBox { lo: Vec<Real>, hi: Vec<Real> },
    IndicatorBall { center: Vec<f64>, radius: f64 },
    IndicatorHalfspace { normal: Vec<f64>, offset: f64 },
    MaxOfAffine { slopes: Vec<Vec<f64>>, intercepts: Vec<f64> },
    ScaledSum { terms: Vec<TermCfg> },
}

impl PhiCfg {
    pub fn build(&self) -> Result<ConvexFunction, ConfigError> {
        let r = match self {
            PhiCfg::Zero { k } => Ok(ConvexFunction::zero(*k)),
            PhiCfg::SeparableAbs { k } => Ok(ConvexFunction::separable_abs(*k)),
            PhiCfg::EuclideanNorm { k } => Ok(ConvexFunction::euclidean_norm(*k)),
            PhiCfg::Quadratic { k, q } => ConvexFunction::quadratic(*k, q.clone()),
            PhiCfg::IndicatorBox { lo, hi } => ConvexFunction::indicator_box(reals(lo), reals(hi)),
            PhiCfg::IndicatorBall { center, radius } => ConvexFunction::indicator_ball(center.clone(), *radius),
            PhiCfg::IndicatorHalfspace { normal, offset } => {
                ConvexFunction::indicator_halfspace(normal.clone(), *offset)
            }
            PhiCfg::MaxOfAffine { slopes, intercepts } => {
                ConvexFunction::max_of_affine(slopes.clone(), intercepts.clone())
            }
            PhiCfg::ScaledSum { terms } => {
                let built = terms
                    .iter()
                    .map(|t| Ok((t.weight, t.phi.build()?)))
                    .collect::<Result<Vec<_>, ConfigError>>()?;
                ConvexFunction::scaled_sum(built)
            }
        };
        r.map_err(|e| ConfigError::Invalid(format!("phi: {e}")))
    }

    pub fn dim(&self) -> usize {
        match self {
            PhiCfg::Zero { k } | PhiCfg::SeparableAbs { k } | PhiCfg::EuclideanNorm { k } | PhiCfg::Quadratic { k, .. } => *k,
            PhiCfg::IndicatorBox { lo, .. } => lo.len(),
            PhiCfg::IndicatorBall { center, .. } => center.len(),
            PhiCfg::IndicatorHalfspace { normal, .. } => normal.len(),
            PhiCfg::MaxOfAffine { slopes, .. } => slopes.first().map_or(0, |s| s.len()),
            PhiCfg::ScaledSum { terms } => terms.first().map_or(0, |t| t.phi.dim()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsCfg {
    pub lipschitz: Option<f64>,
    pub gamma: Option<f64>,
    pub m1: Option<f64>,
    pub p: Option<u32>,
    pub m2: Option<f64>,
    pub r: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemCfg {
    pub horizon: f64,
    pub drift: DriftCfg,
    pub diffusion: DiffusionCfg,
    pub generator: GeneratorCfg,
    pub terminal: Vec<TerminalCfg>,
    pub phi: PhiCfg,
    #[serde(default)]
    pub constants: ConstantsCfg,
}

impl ProblemCfg {
    /// State dimension implied by the coefficients.
    fn state_dim(&self) -> Result<usize, ConfigError> {
        let from_drift = match &self.drift {
            DriftCfg::Zero => None,
            DriftCfg::Constant { value } => Some(value.len()),
            DriftCfg::Affine { c, .. } => Some(c.len()),
        };
        let from_diff = match &self.diffusion {
            DiffusionCfg::Zero => None,
            DiffusionCfg::Constant { matrix } => {
                let d = (matrix.len() as f64).sqrt().round() as usize;
                if d * d != matrix.len() {
                    return invalid(format!("diffusion matrix has {} entries, not a square", matrix.len()));
                }
                Some(d)
            }
            DiffusionCfg::DiagonalAffine { slope, .. } => Some(slope.len()),
        };
        let from_terminal = self
            .terminal
            .iter()
            .filter_map(|t| match t {
                TerminalCfg::Polynomial { axis, .. } | TerminalCfg::PositivePart { axis, .. } => Some(axis + 1),
                TerminalCfg::Norm => None,
            })
            .max();
        match (from_drift, from_diff) {
            (Some(a), Some(b)) if a != b => invalid(format!("drift has dimension {a} but diffusion has {b}")),
            (Some(a), _) | (_, Some(a)) => Ok(a),
            (None, None) => Ok(from_terminal.unwrap_or(1)),
        }
    }

    pub fn build(&self) -> Result<ProblemSpec, ConfigError> {
        let d = self.state_dim()?;
        let k = self.phi.dim();
        let drift = match &self.drift {
            DriftCfg::Zero => Drift::Zero,
            DriftCfg::Constant { value } => Drift::Constant(value.clone()),
            DriftCfg::Affine { a, c } => Drift::Affine { a: a.clone(), c: c.clone() },
        };
        let diffusion = match &self.diffusion {
            DiffusionCfg::Zero => Diffusion::Zero,
            DiffusionCfg::Constant { matrix } => Diffusion::Constant(matrix.clone()),
            DiffusionCfg::DiagonalAffine { slope, intercept } => Diffusion::DiagonalAffine {
                slope: slope.clone(),
                intercept: intercept.clone(),
            },
        };
        let coeffs = CoefficientField::new(d, drift, diffusion).map_err(|e| ConfigError::Invalid(format!("coefficients: {e}")))?;
        let kind = match &self.generator {
            GeneratorCfg::Zero => GeneratorKind::Zero,
            GeneratorCfg::Constant { value } => GeneratorKind::Constant(value.clone()),
            GeneratorCfg::LinearInY { gamma } => GeneratorKind::LinearInY { gamma: *gamma },
            GeneratorCfg::Separable { gamma, source } => GeneratorKind::Separable {
                gamma: *gamma,
                g: match source {
                    SourceCfg::Constant { value } => SourceTerm::Constant(value.clone()),
                    SourceCfg::Affine { a, c } => SourceTerm::Affine { a: a.clone(), c: c.clone() },
                },
            },
            GeneratorCfg::DampedRotation { gamma, omega } => GeneratorKind::DampedRotation { gamma: *gamma, omega: *omega },
        };
        let gen = Generator::new(kind, k, d).map_err(|e| ConfigError::Invalid(format!("{e}")))?;
        let comps = self
            .terminal
            .iter()
            .map(|t| match t {
                TerminalCfg::Polynomial { axis, coeffs } => TerminalFn::Polynomial { axis: *axis, coeffs: coeffs.clone() },
                TerminalCfg::PositivePart { axis, strike } => TerminalFn::PositivePart { axis: *axis, strike: *strike },
                TerminalCfg::Norm => TerminalFn::Norm,
            })
            .collect();
        let term = TerminalMap::new(comps, d).map_err(|e| ConfigError::Invalid(format!("{e}")))?;
        let phi = self.phi.build()?;
        let c = &self.constants;
        let declared = DeclaredConstants {
            lipschitz: c.lipschitz,
            gamma: c.gamma,
            m1: c.m1,
            p: c.p,
            m2: c.m2,
            r: c.r,
        };
        ProblemSpec::new(self.horizon, coeffs, gen, term, phi, &declared).map_err(|e| ConfigError::Invalid(format!("{e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCfg {
    pub times: Vec<f64>,
    /// Each entry a point of `R^d`; plain numbers are accepted for `d = 1`.
    pub points: Vec<PointCfg>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PointCfg {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl PointCfg {
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            PointCfg::Scalar(x) => vec![*x],
            PointCfg::Vector(v) => v.clone(),
        }
    }
}

impl GridCfg {
    pub fn build(&self) -> FieldGrid {
        FieldGrid::new(self.times.clone(), self.points.iter().map(PointCfg::to_vec).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McCfg {
    pub seed: u64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batches")]
    pub batches: usize,
}

fn default_paths() -> usize {
    10_000
}

fn default_steps() -> usize {
    50
}

fn default_batches() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverCfg {
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default)]
    pub implicit: bool,
}

impl Default for SolverCfg {
    fn default() -> Self {
        Self {
            backend: default_backend(),
            degree: default_degree(),
            implicit: false,
        }
    }
}

fn default_backend() -> String {
    "regression".into()
}

fn default_degree() -> usize {
    3
}

pub fn parse_backend(s: &str) -> Result<Backend, ConfigError> {
    match s {
        "regression" => Ok(Backend::Regression),
        "lattice" => Ok(Backend::Lattice),
        other => invalid(format!("unknown backend {other:?} (expected regression or lattice)")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovCfg {
    pub origin_t: f64,
    pub origin_x: Vec<f64>,
    pub s: f64,
    #[serde(default = "default_markov_paths")]
    pub paths: usize,
    #[serde(default = "default_factor")]
    pub factor: f64,
}

fn default_markov_paths() -> usize {
    1000
}

fn default_factor() -> f64 {
    3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthCfg {
    pub p: u32,
    pub bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViscosityCfg {
    /// Probe nodes as `[t, x...]`; empty means every node with a full stencil.
    #[serde(default)]
    pub nodes: Vec<Vec<f64>>,
    /// Stencil spacing; defaults to the smallest gap between grid points.
    #[serde(default)]
    pub spacing: Option<f64>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "default_seed")]
    pub direction_seed: u64,
}

fn default_seed() -> u64 {
    0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksCfg {
    pub markov: Option<MarkovCfg>,
    pub growth: Option<GrowthCfg>,
    pub viscosity: Option<ViscosityCfg>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvexCfg {
    /// Built-in registry names, or `["all"]`.
    #[serde(default = "default_names")]
    pub functions: Vec<String>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Adds the concave negated quadratic, which must be caught.
    #[serde(default)]
    pub inject_fault: bool,
}

fn default_names() -> Vec<String> {
    vec!["all".into()]
}

fn default_samples() -> usize {
    1000
}

fn default_tol() -> f64 {
    1e-6
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputCfg {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Option<ProblemCfg>,
    pub grid: Option<GridCfg>,
    pub mc: McCfg,
    #[serde(default)]
    pub solver: SolverCfg,
    #[serde(default)]
    pub output: OutputCfg,
    #[serde(default)]
    pub checks: ChecksCfg,
    pub convex: Option<ConvexCfg>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { source, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<config>"),
            source: Box::new(e),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn problem(&self) -> Result<ProblemSpec, ConfigError> {
        match &self.problem {
            Some(p) => p.build(),
            None => invalid("config has no [problem] table"),
        }
    }

    /// Grid checked against the problem; errors name the offending node.
    pub fn grid(&self, spec: &ProblemSpec) -> Result<FieldGrid, ConfigError> {
        let g = match &self.grid {
            Some(g) => g.build(),
            None => return invalid("config has no [grid] table"),
        };
        g.validate(spec).map_err(|e| ConfigError::Invalid(format!("{e}")))?;
        Ok(g)
    }

    pub fn mc(&self) -> Result<McSettings, ConfigError> {
        let m = &self.mc;
        if m.paths == 0 || m.steps == 0 || m.batches == 0 {
            return invalid("mc.paths, mc.steps and mc.batches must be positive");
        }
        if m.paths < m.batches {
            return invalid(format!("mc.paths = {} is smaller than mc.batches = {}", m.paths, m.batches));
        }
        Ok(McSettings {
            n_paths: m.paths,
            n_steps: m.steps,
            seed: m.seed,
            batches: m.batches,
        })
    }

    pub fn backend(&self) -> Result<Backend, ConfigError> {
        parse_backend(&self.solver.backend)
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            basis: RegressionBasis { degree: self.solver.degree },
            implicit: self.solver.implicit,
            ..SolverOptions::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAT: &str = r#"
[problem]
horizon = 1.0
drift = { kind = "zero" }
diffusion = { kind = "constant", matrix = [1.0] }
generator = { kind = "zero" }
terminal = [{ kind = "polynomial", axis = 0, coeffs = [0.0, 0.0, 1.0] }]
phi = { kind = "zero", k = 1 }

[grid]
times = [0.0, 0.5]
points = [-1.0, 0.0, 1.0]

[mc]
seed = 7
"#;

    #[test]
    fn parses_heat() {
        let c = RunConfig::parse(HEAT).unwrap();
        let spec = c.problem().unwrap();
        assert_eq!((spec.d, spec.k), (1, 1));
        let g = c.grid(&spec).unwrap();
        assert_eq!(g.points, vec![vec![-1.0], vec![0.0], vec![1.0]]);
        assert_eq!(c.mc().unwrap().n_paths, 10_000);
        assert_eq!(c.backend().unwrap(), Backend::Regression);
    }

    #[test]
    fn infinite_bounds_round_trip() {
        let text = HEAT.replace(
            r#"phi = { kind = "zero", k = 1 }"#,
            r#"phi = { kind = "indicator_box", lo = [0.0], hi = ["inf"] }"#,
        ).replace("coeffs = [0.0, 0.0, 1.0]", "coeffs = [1.0, 0.0, 1.0]");
        let c = RunConfig::parse(&text).unwrap();
        match &c.problem.as_ref().unwrap().phi {
            PhiCfg::IndicatorBox { hi, .. } => assert_eq!(hi[0].0, f64::INFINITY),
            other => panic!("{other:?}"),
        }
        c.problem().unwrap();
        let again = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse(&HEAT.replace("seed = 7", "")).is_err());
        let late = HEAT.replace("times = [0.0, 0.5]", "times = [0.0, 1.5]");
        let c = RunConfig::parse(&late).unwrap();
        let spec = c.problem().unwrap();
        let e = c.grid(&spec).unwrap_err().to_string();
        assert!(e.contains("1.5"), "{e}");
        let bad = HEAT.replace(r#"hi = ["inf"]"#, "").replace(r#"kind = "zero", k = 1"#, r#"kind = "indicator_box", lo = [0.0], hi = ["huge"]"#);
        assert!(RunConfig::parse(&bad).is_err());
    }
}
