use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("corrupt header in {}: {reason}", path.display())]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("truncated payload in {}: expected {expected} bytes, found {found}", path.display())]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("dimension mismatch: header declares {declared}, payload implies {actual}")]
    DimensionMismatch { declared: usize, actual: usize },

    #[error("dangling key {key:?}: record {record:?} references a row absent from the {modality} matrix")]
    DanglingKey {
        key: String,
        record: String,
        modality: String,
    },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("non-finite value in {modality} row {key:?}")]
    NonFinite { modality: String, key: String },

    #[error("zero-norm row {0:?}")]
    ZeroNorm(String),

    #[error("embedding matrices come from different encoders: {image:?} vs {text:?}")]
    EncoderMismatch { image: String, text: String },

    #[error("record {record:?} has no {modality} embedding")]
    UnresolvedModality { record: String, modality: String },

    #[error("memory corpus is empty")]
    EmptyMemory,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("record {record:?} lacks field `{field}` required by the {task} template")]
    MissingField {
        record: String,
        field: &'static str,
        task: String,
    },

    #[error("scorer failed on pair ({query_id}, {candidate_id}) after {attempts} attempts: {message}")]
    ScorerTransport {
        query_id: String,
        candidate_id: String,
        attempts: u32,
        message: String,
    },

    #[error("malformed scorer response: {0}")]
    MalformedResponse(String),

    #[error("projection of record {0:?} collapsed to the zero vector")]
    ZeroProjection(String),

    #[error("non-finite gradient for matrix {0}")]
    NonFiniteGradient(String),

    #[error("corrupt checkpoint {}: {reason}", path.display())]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("{0}")]
    Eval(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage `{stage}` needs {artifact} from stage `{producer}`, which has not run; run `{producer}` first")]
    MissingInput {
        stage: String,
        producer: String,
        artifact: String,
    },

    #[error("stale artifact {artifact} from stage `{producer}`: {reason}; rerun `{producer}`")]
    StaleArtifact {
        producer: String,
        artifact: String,
        reason: String,
    },

    #[error("pipeline lock {} is held ({holder}); remove it if no other run is active", path.display())]
    Locked { path: PathBuf, holder: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.to_string(),
        }
    }
}
