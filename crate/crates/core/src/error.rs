use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecordError {
    #[error("{component} span [{start}, {end}) out of bounds for {len} tokens")]
    OutOfBounds {
        component: &'static str,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("{0} and {1} spans overlap")]
    Overlap(&'static str, &'static str),
    #[error("property span is empty")]
    EmptyProperty,
    #[error("no comparator span")]
    MissingComparator,
    #[error("stored position disagrees with the thirds rule")]
    PositionMismatch,
}

#[derive(Debug, Error)]
pub enum LmError {
    #[error("sequence of {len} subtokens exceeds max length {max}")]
    TooLong { len: usize, max: usize },
    #[error("expected exactly one mask sentinel, found {0}")]
    MaskCount(usize),
    #[error("span [{start}, {end}) maps to no subtokens")]
    EmptySpan { start: usize, end: usize },
    #[error("'{word}' not found (tried: {tried})")]
    UnknownWord { word: String, tried: String },
    #[error("option '{0}' cannot be scored: it tokenizes to unknown pieces")]
    UnscorableOption(String),
    #[error("model runtime: {0}")]
    Runtime(String),
}

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("need at least 3 distractor candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("distractor '{0}' equals the gold property")]
    GoldAsDistractor(String),
    #[error("co-occurrence candidate '{word}' has frequency {frequency:?}, need > 1")]
    LowFrequency { word: String, frequency: Option<u64> },
    #[error("options are not pairwise distinct")]
    DuplicateOptions,
    #[error("property must be a single token, found {0}")]
    MultiTokenProperty(usize),
    #[error("{0} span is empty")]
    MissingComponent(&'static str),
    #[error("no token eligible for random ablation")]
    NoEligibleToken,
    #[error("fleiss kappa: {0}")]
    Kappa(String),
    #[error("invalid probe item: {0}")]
    InvalidItem(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Record(#[from] RecordError),
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("need at least {need} annotators, got {got}")]
    TooFewAnnotators { need: usize, got: usize },
    #[error("session aborted after {answered} responses")]
    Aborted { answered: usize },
    #[error("no judgment from annotator {annotator} for '{distractor}' in {record}")]
    MissingJudgment {
        record: String,
        distractor: String,
        annotator: usize,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {need} tokens, got {got}")]
    TooFewTokens { need: usize, got: usize },
    #[error("token matrix has rank < 2")]
    Degenerate,
    #[error(transparent)]
    Lm(#[from] LmError),
}

#[derive(Debug, Error)]
pub enum SentimentError {
    #[error("no {0} reviews after filtering")]
    EmptyClass(&'static str),
    #[error("rating {0} outside 1..=5")]
    BadRating(u8),
    #[error("encoder parameters changed during head training ({before:016x} -> {after:016x})")]
    EncoderNotFrozen { before: u64, after: u64 },
    #[error("empty split: {0}")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Lm(#[from] LmError),
}
