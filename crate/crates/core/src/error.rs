use std::path::PathBuf;

/// Errors raised anywhere in the registration pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(&'static str),
    #[error("degenerate pair: source centers {0} and {1} coincide")]
    DegeneratePair(String, String),
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("cannot render an empty splat cloud")]
    EmptyCloud,
    #[error("descriptor for {0} has zero norm")]
    ZeroDescriptor(String),
    #[error(
        "no candidate pair survived geometric verification ({candidates} candidates, \
         forward gap range {min_forward:.2}..{max_forward:.2} deg, \
         up gap range {min_up:.2}..{max_up:.2} deg, {missing} without prediction)"
    )]
    NoVerifiedPairs {
        candidates: usize,
        missing: usize,
        min_forward: f64,
        max_forward: f64,
        min_up: f64,
        max_up: f64,
    },
    #[error("source and target share only {0} camera ids, need at least 2")]
    InsufficientCorrespondence(usize),
    #[error("every candidate pair was degenerate")]
    AllCandidatesDegenerate,
    #[error("no reference mask for camera {0}")]
    MissingMask(String),
    #[error("no reference image for camera {0}")]
    MissingImage(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("pose sets differ in ids: {0}")]
    IdMismatch(String),
    #[error("image is {0}x{1}, structural similarity needs at least 11 pixels per side")]
    ImageTooSmall(u32, u32),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True when the failure is a violated precondition rather than a
    /// stage that ran and failed.
    pub fn is_precondition(&self) -> bool {
        match self {
            Error::InvalidArgument(_)
            | Error::Format { .. }
            | Error::Io { .. }
            | Error::IdMismatch(_)
            | Error::DimensionMismatch(..)
            | Error::ImageTooSmall(..) => true,
            Error::Stage { source, .. } => source.is_precondition(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
