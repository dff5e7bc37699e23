use std::path::PathBuf;

/// Crate-wide error type. Variants carry enough context to identify the
/// offending channel, timestamp, or file without needing a backtrace.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("duplicate channel `{0}`")]
    DuplicateChannel(String),
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("channel `{0}` not found in frame")]
    ChannelNotFound(String),
    #[error("resolution mismatch: {0} vs {1}")]
    ResolutionMismatch(String, String),
    #[error("site/season mismatch: {0} vs {1}")]
    SiteMismatch(String, String),
    #[error("empty timestamp intersection when joining frames")]
    EmptyIntersection,
    #[error("slice window [{start}, {end}] selects no rows")]
    EmptySlice { start: String, end: String },
    #[error("frame invariant violated: {0}")]
    InvalidFrame(String),
    #[error("unit mismatch: `{0}` ({1}) vs `{2}` ({3})")]
    UnitMismatch(String, String, String, String),
    #[error("site `{0}` not in vocabulary")]
    UnknownSite(String),
    #[error("channel `{0}` has no observed values")]
    AllMissing(String),
    #[error("channel `{0}` not covered by normalization spec")]
    NotInSpec(String),
    #[error("channel `{0}` has degenerate range (min == max), cannot invert")]
    DegenerateChannel(String),
    #[error("cannot resample {from} to {to}: target must be coarser")]
    UpsampleRequested { from: String, to: String },
    #[error("empty frame")]
    EmptyFrame,
    #[error("{path}: {message} (row {row})")]
    CsvFormat {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("constant input: Pearson correlation is undefined")]
    ConstantInput,
    #[error("need at least {needed} complete pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("correlation coefficient {0} outside [-1, 1]")]
    CoefficientOutOfRange(f64),
    #[error("window spec invalid: {0}")]
    InvalidWindow(String),
    #[error("frame too short: {len} rows, need more than {need}")]
    FrameTooShort { len: usize, need: usize },
    #[error("channels {0:?} appear in both exogenous and target lists")]
    ExogenousTargetOverlap(Vec<String>),
    #[error("split would leave an empty {0} side")]
    DegenerateSplit(&'static str),
    #[error("held-out group `{0}` not present in dataset provenance")]
    UnknownGroup(String),
    #[error("dataset invalid: {0}")]
    InvalidDataset(String),
    #[error("too few rows to fit: {got}, need at least {need}")]
    TooFewRows { got: usize, need: usize },
    #[error("invalid learner params: {0}")]
    InvalidParams(String),
    #[error("feature schema mismatch: expected {expected:?}, got {got:?}")]
    SchemaMismatch {
        expected: Vec<String>,
        got: Vec<String>,
    },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("baseline must be positive, got {0}")]
    NonpositiveBaseline(f64),
    #[error("missing candidate rows for target `{target}`: {missing:?}")]
    MissingCandidates {
        target: String,
        missing: Vec<String>,
    },
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("output `{0}` already exists (use --force to overwrite)")]
    WouldOverwrite(PathBuf),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("model file invalid: {0}")]
    ModelFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("toml parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
