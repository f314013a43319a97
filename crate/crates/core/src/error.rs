use thiserror::Error;

pub type Result<T, E = RanaError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RanaError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid shape: {rows}x{cols} needs {expected} values, got {got}")]
    InvalidShape {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("SVD failed to converge after {iterations} sweeps")]
    SvdNotConverged { iterations: usize },
    #[error("calibration has no signal")]
    NoCalibrationSignal,
    #[error("all row norms zero")]
    AllRowNormsZero,
    #[error("target {target} out of range (0, {max}]")]
    TargetOutOfRange { target: f64, max: f64 },
    #[error("expected active {active} exceeds kept ranks {kept}")]
    ActiveExceedsRanks { active: f64, kept: usize },
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("infeasible budget {budget:.1} FLOPs; minimum feasible is {minimum:.1}")]
    InfeasibleBudget { budget: f64, minimum: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
