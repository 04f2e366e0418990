use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Configuration failures. These map to CLI exit code 1.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConfigError {
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("unknown key {path}")]
    UnknownKey { path: String },
    #[error("invalid value {path}: {why}")]
    Invalid { path: String, why: String },
}

impl ConfigError {
    pub fn invalid(path: impl Into<String>, why: impl Into<String>) -> Self {
        ConfigError::Invalid { path: path.into(), why: why.into() }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty ball: no samples within radius {radius} of ({cx}, {cy})")]
    EmptyBall { cx: f64, cy: f64, radius: f64 },

    #[error("incompatible mean: net source {net:e} exceeds tolerance {tol:e}")]
    IncompatibleMean { net: f64, tol: f64 },

    #[error("unresolved annulus: radius {radius} is below two cells (h = {h})")]
    UnresolvedAnnulus { radius: f64, h: f64 },

    #[error("degenerate body: {cells} cells covered, at least 4 required")]
    DegenerateBody { cells: usize },

    #[error("body exits domain: body {index} at ({x}, {y}) with bounding radius {radius}")]
    BodyExitsDomain { index: usize, x: f64, y: f64, radius: f64 },

    #[error("CFL violated: {0}")]
    CflViolated(String),

    #[error("viscous fixed point stalled: residual {residual:e} after {iterations} iterations")]
    ViscousStalled { residual: f64, iterations: usize },

    #[error("linear solve failed in {context}: residual {residual:e} after {iterations} iterations")]
    LinearSolve { context: &'static str, residual: f64, iterations: usize },

    #[error(
        "unresolvable radius: N = {n} gives radius {radius:.5} below {min_radius:.5} \
         (max feasible N on this grid = {max_feasible})"
    )]
    UnresolvableRadius { n: usize, radius: f64, min_radius: f64, max_feasible: usize },

    #[error("hypothesis ({name}) violated: {detail}")]
    Hypothesis { name: &'static str, detail: String },

    #[error("test function outside the admissible class: {0}")]
    TestClass(String),

    #[error("placement failed: {0}")]
    Placement(String),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn hypothesis(name: &'static str, detail: impl Into<String>) -> Self {
        Error::Hypothesis { name, detail: detail.into() }
    }
}
