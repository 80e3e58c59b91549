use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("time {t} is outside the admissible range {range}")]
    TimeOutOfRange { t: f64, range: &'static str },

    #[error("time pair must be strictly decreasing, got t = {t}, t_next = {t_next}")]
    NonDecreasingTime { t: f64, t_next: f64 },

    #[error("density is degenerate at t = 0: component variance below {floor:e}")]
    DegenerateDensity { floor: f64 },

    #[error("teacher velocity norm {norm:e} is too small for an unregularized projection")]
    DegenerateTeacher { norm: f64 },

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("expected {expected} items, found {found}")]
    WrongCount { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("unpaired runs: {0}")]
    Unpaired(String),
}
