use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum AdamError {
    #[error("duplicate template name `{0}`")]
    DuplicateTemplate(String),
    #[error("template `{0}` has zero width")]
    ZeroWidth(String),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("missing template `{0}`")]
    MissingTemplate(String),
    #[error("empty template selection")]
    EmptySelection,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("feature count mismatch: expected {expected}, found {found}")]
    FeatureMismatch { expected: usize, found: usize },
    #[error("value {value} at feature {index} is outside {{0, 1}}")]
    DomainViolation { index: usize, value: f32 },
    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("empty {0}")]
    Empty(String),

    #[error("grid side {side} too small, need at least {min}")]
    GridTooSmall { side: usize, min: usize },
    #[error("model {0} cannot be built by this constructor")]
    WrongModel(String),

    #[error("invalid bounds lb={lb} ub={ub} for buffer of length {len}")]
    InvalidBounds { lb: usize, ub: usize, len: usize },
    #[error("weight vector length {found} does not match head parameter count {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("network has no base/head boundary")]
    MissingBoundary,

    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl AdamError {
    /// Stable machine-readable code, used by the CLI's single-line error output.
    pub fn code(&self) -> &'static str {
        match self {
            AdamError::DuplicateTemplate(_) => "E_DUPLICATE_TEMPLATE",
            AdamError::ZeroWidth(_) => "E_ZERO_WIDTH",
            AdamError::UnknownTemplate(_) => "E_UNKNOWN_TEMPLATE",
            AdamError::MissingTemplate(_) => "E_MISSING_TEMPLATE",
            AdamError::EmptySelection => "E_EMPTY_SELECTION",
            AdamError::InvalidArgument(_) => "E_INVALID_ARGUMENT",
            AdamError::MalformedHeader(_) => "E_MALFORMED_HEADER",
            AdamError::FeatureMismatch { .. } => "E_FEATURE_MISMATCH",
            AdamError::DomainViolation { .. } => "E_DOMAIN",
            AdamError::Truncated(_) => "E_TRUNCATED",
            AdamError::ShapeMismatch(_) => "E_SHAPE",
            AdamError::NonFinite(_) => "E_NON_FINITE",
            AdamError::Empty(_) => "E_EMPTY",
            AdamError::GridTooSmall { .. } => "E_GRID_TOO_SMALL",
            AdamError::WrongModel(_) => "E_WRONG_MODEL",
            AdamError::InvalidBounds { .. } => "E_BOUNDS",
            AdamError::LengthMismatch { .. } => "E_LENGTH",
            AdamError::MissingBoundary => "E_NO_BOUNDARY",
            AdamError::Config(_) => "E_CONFIG",
            AdamError::MissingArtifact(_) => "E_MISSING_ARTIFACT",
            AdamError::Io(_) => "E_IO",
            AdamError::Json(_) => "E_JSON",
        }
    }
}

pub type Result<T> = std::result::Result<T, AdamError>;
