use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot parse {what}: {input:?}")]
    Parse { what: &'static str, input: String },
    #[error("{what} {value} out of range [{min}, {max}]")]
    Range { what: &'static str, value: f64, min: f64, max: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("syllable {syllable:?} not resolvable by the lexicon{}", .phoneme.as_ref().map(|p| format!(" (unknown phoneme {p:?})")).unwrap_or_default())]
    LexiconMiss { syllable: String, phoneme: Option<String> },
    #[error("invalid score: {0}")]
    Score(String),
    #[error("frame error: {0}")]
    Frame(String),
    #[error("normalization stats error: {0}")]
    Stats(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid sub-band spec: {0}")]
    Spec(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("incompatible checkpoints: {0}")]
    Compatibility(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
