use crate::body::BodyId;

/// Errors raised by the simulation kernels.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate polygon loop (signed area {area})")]
    DegeneratePolygon { area: f64 },

    #[error("polygon loop {loop_index} is not convex")]
    NonConvexLoop { loop_index: usize },

    #[error("mass matrix is singular")]
    SingularMassMatrix,

    #[error("barrier evaluated outside its domain (d = {d})")]
    BarrierDomain { d: f64 },

    #[error("start configuration already in contact (pair {body_a:?}/{body_b:?}, d = {d})")]
    StartIntersecting {
        body_a: BodyId,
        body_b: BodyId,
        d: f64,
    },

    #[error("shared body {0:?} has no consensus anchor")]
    MissingAnchor(BodyId),

    #[error("line search stalled at alpha = {alpha:e} without decrease (iteration {iteration})")]
    LineSearchStalled { alpha: f64, iteration: usize },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("no worker holds both bodies of contact {body_a:?}/{body_b:?}")]
    UnseenContact { body_a: BodyId, body_b: BodyId },

    #[error("merge requested without a passed CCD gate (toi = {toi})")]
    GateNotPassed { toi: f64 },

    #[error("time step halved {halvings} times without a successful frame")]
    TimestepExhausted { halvings: u32 },

    #[error("replicas of body {id:?} disagree by {diff:e}")]
    ReplicaMismatch { id: BodyId, diff: f64 },

    #[error("non-positive compute time {0}")]
    NonPositiveTime(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("frame did not converge within {iterations} iterations")]
    NotConverged { iterations: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
