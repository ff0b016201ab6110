use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Every failure the engine can report.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor or batch did not have the shape an operation requires.
    Dimension(String),
    /// NaN or infinity appeared in a forward pass or a loss.
    NumericDivergence(String),
    /// An API was called out of order (e.g. backward without forward).
    Usage(&'static str),
    /// Invalid hyper-parameters or policy settings.
    Config(String),
    /// Bad input data (labels out of range, empty dumps, ...).
    Data(String),
    /// Prototype sets and other user-supplied selections.
    Validation(String),
    /// The optimizer was stepped past its schedule.
    ScheduleExhausted { step: u64, total: u64 },
    /// A workflow step ran before its prerequisite finished.
    Sequencing(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::NumericDivergence(m) => write!(f, "numeric divergence: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::ScheduleExhausted { step, total } => {
                write!(f, "schedule exhausted: step {step} of {total}")
            }
            Error::Sequencing(m) => write!(f, "sequencing error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
