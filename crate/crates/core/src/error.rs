use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mesh has no cells ({nx} x {ny})")]
    ZeroDimension { nx: usize, ny: usize },
    #[error("cell {cell} has no region id")]
    RegionGap { cell: usize },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("fields are defined on different meshes")]
    MeshMismatch,
    #[error("non-finite value at cell {0}")]
    NonFinite(usize),
    #[error("stencil diagonal {value:e} at cell {cell} is not positive")]
    NegativeCoefficient { cell: usize, value: f64 },
    #[error("no fissile material in the domain")]
    NoFission,
    #[error("no convergence after {iterations} iterations (last change {change:e})")]
    NoConvergence { iterations: usize, change: f64 },
    #[error("singular linear system: {0}")]
    SingularSystem(String),
    #[error("temperature {0} K is not positive")]
    NonPositiveTemperature(f64),
    #[error("degenerate fitting range [{lo}, {hi}]")]
    DegenerateRange { lo: f64, hi: f64 },
    #[error("parameter {name} = {value} outside [{lo}, {hi}]")]
    ParameterOutOfRange {
        name: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("parameter point lies outside the interpolation grid")]
    ExtrapolationRequest,
    #[error("sensor library is empty")]
    EmptyLibrary,
    #[error("sensor library exhausted after {0} selections")]
    LibraryExhausted(usize),
    #[error("selected residual vanishes under every remaining sensor")]
    DegenerateSnapshot,
    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("training coefficient {0} has zero variance")]
    ZeroVariance(usize),
    #[error("sensor selection stalled at step {step} (score {score:e})")]
    StalledSelection { step: usize, score: f64 },
    #[error("singular saddle-point system (smallest singular value {0:e})")]
    SingularSaddle(f64),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("empty snapshot set")]
    EmptySet,
    #[error("missing field '{0}'")]
    MissingField(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config: {0}")]
    Config(String),
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
