use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("partition at level {level} does not refine its parent level: {detail}")]
    NonRefining { level: usize, detail: String },
    #[error("clock or time grid not strictly increasing at index {index}")]
    NonIncreasingClock { index: usize },
    #[error("probability mismatch at level {level}, node {node}: expected {expected}, got {got}")]
    ProbabilityMismatch {
        level: usize,
        node: usize,
        expected: f64,
        got: f64,
    },
    #[error("atom {node} has non-positive probability {p}")]
    ZeroProbabilityAtom { node: usize, p: f64 },
    #[error("time grid has no step")]
    NoStep,
    #[error("level order violated: requested level {to} from level {from}")]
    LevelOrder { from: usize, to: usize },
    #[error("generator parameters out of range: {0}")]
    ParamsOutOfRange(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("process is not a martingale: drift {drift:e} at step {step}, node {node}")]
    NotAMartingale {
        step: usize,
        node: usize,
        drift: f64,
    },
    #[error("jump {jump} at index {index} is not below 1")]
    JumpTooLarge { index: usize, jump: f64 },
    #[error("not a density: {0}")]
    NotADensity(String),
    #[error("driver metadata missing")]
    MetadataMissing,
    #[error("driver unsupported: {0}")]
    Unsupported(String),
    #[error("root find failed at step {step}, node {node}: {detail}")]
    RootFindFailure {
        step: usize,
        node: usize,
        detail: String,
    },
    #[error("driver returned a non-finite value at step {step}, node {node}")]
    NonFiniteDriver { step: usize, node: usize },
    #[error("driver not admissible for a g-expectation: {0}")]
    DriverNotAdmissible(String),
    #[error("r is not uniformly balanced: worst product {worst}")]
    RNotBalanced { worst: f64 },
    #[error("interval is empty: alpha {alpha} >= beta {beta}")]
    BadInterval { alpha: f64, beta: f64 },
    #[error("process is not an E^r-submartingale: {0}")]
    NotSubmartingale(String),
    #[error("negative compensator increment {increment:e} at step {step}, node {node}")]
    NegativeCompensator {
        step: usize,
        node: usize,
        increment: f64,
    },
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("process is not an E-martingale: {0}")]
    NotEMartingale(String),
    #[error("drift bound violated: |g| = {g} > ||r z||_M = {bound} at step {step}, node {node}")]
    BoundViolated {
        step: usize,
        node: usize,
        g: f64,
        bound: f64,
    },
    #[error("oracle not dominated: {0}")]
    OracleNotDominated(String),
    #[error("oracle audit failed: {0}")]
    OracleAuditFailed(String),
    #[error("domination violated: |g(z)| = {g} > ||r z||_M = {bound} at step {step}, node {node}")]
    DominationViolated {
        step: usize,
        node: usize,
        g: f64,
        bound: f64,
    },
    #[error("oracle failure: {0}")]
    Oracle(String),
    #[error("scenario invalid at {pointer}: {detail}")]
    ScenarioInvalid { pointer: String, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
