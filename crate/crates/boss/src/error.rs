use boss_core::Error as CoreError;

pub type Result<T, E = AppError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("not found: {0}")]
    NotFound(String),
    /// Illegal state transition (e.g. self-training an unfinished run).
    #[error("conflict: {0}")]
    Conflict(String),
    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Invalid(e.to_string())
    }
}

impl AppError {
    /// HTTP status for the service.
    pub fn status(&self) -> u16 {
        match self {
            AppError::NotFound(_) => 404,
            AppError::Conflict(_) => 409,
            AppError::Core(CoreError::Sequencing(_) | CoreError::ScheduleExhausted { .. }) => 409,
            AppError::Core(_) | AppError::Format(_) | AppError::Invalid(_) => 422,
            AppError::Io(_) => 500,
        }
    }

    /// Short machine-readable kind.
    pub fn kind(&self) -> &'static str {
        match self {
            AppError::NotFound(_) => "not_found",
            AppError::Conflict(_) => "conflict",
            AppError::Format(_) => "format",
            AppError::Invalid(_) => "invalid",
            AppError::Io(_) => "io",
            AppError::Core(e) => match e {
                CoreError::Dimension(_) => "dimension",
                CoreError::NumericDivergence(_) => "numeric_divergence",
                CoreError::Usage(_) => "usage",
                CoreError::Config(_) => "config",
                CoreError::Data(_) => "data",
                CoreError::Validation(_) => "validation",
                CoreError::ScheduleExhausted { .. } => "schedule_exhausted",
                CoreError::Sequencing(_) => "sequencing",
            },
        }
    }

    /// Process exit code for the CLI: 2 for anything the caller got wrong.
    pub fn exit_code(&self) -> i32 {
        if self.status() == 422 || self.status() == 404 {
            2
        } else {
            1
        }
    }
}

macro_rules! not_found {
    ($($arg:tt)*) => {
        $crate::error::AppError::NotFound(format!($($arg)*))
    };
}
pub(crate) use not_found;
