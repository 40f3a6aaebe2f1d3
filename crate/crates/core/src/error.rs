use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("column `{0}` named in the column map is not present in the header")]
    MissingColumn(String),
    #[error("row {row}: column `{column}` has non-numeric value `{value}`")]
    MalformedRow {
        row: usize,
        column: String,
        value: String,
    },
    #[error("coordinate out of projection domain: lat={lat}, lon={lon}")]
    OutOfDomain { lat: f64, lon: f64 },
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("sample {row} lacks required input `{field}`")]
    MissingInput { row: usize, field: &'static str },
    #[error("column `{0}` has zero variance on the fitting rows")]
    DegenerateColumn(&'static str),
    #[error("standardizer is not fitted")]
    NotFitted,
    #[error("too few rows: need at least {needed}, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("invalid split specification: {0}")]
    BadSplit(String),
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("length mismatch: predictions {pred}, targets {target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(&'static str),
    #[error("no `{0}` labels available for the requested rows")]
    NoLabel(&'static str),
    #[error("empty subset")]
    EmptySubset,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid MC sample count {0} (must be >= 2)")]
    BadSampleCount(usize),
    #[error("standardizer hash mismatch: model expects {expected}, got {got}")]
    StandardizerMismatch { expected: String, got: String },
    #[error("feature column layout mismatch: expected {expected}, got {got}")]
    FeatureLayoutMismatch { expected: String, got: String },
    #[error("no rows left after filtering")]
    EmptyAfterFiltering,
    #[error("invalid grid cell size: {0}")]
    BadCell(String),
    #[error("grids are not comparable: {0}")]
    GridMismatch(String),
    #[error("invalid file: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
