use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid function: {0}")]
    InvalidFunction(String),
    #[error("point {x} outside domain [0, {hi}]")]
    OutOfDomain { x: f64, hi: f64 },
    #[error("{side} limit undefined at {x} on domain [0, {hi}]")]
    LimitSide { side: &'static str, x: f64, hi: f64 },
    #[error("infimal convolution needs at least one function")]
    NoInputs,
    #[error("incompatible domains: need {needed}, have {available}")]
    IncompatibleDomains { needed: f64, available: f64 },
    #[error("invalid grid step {0}")]
    InvalidStep(f64),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("unknown node name `{0}`")]
    UnknownNodeName(String),
    #[error("node {node} is not a predecessor of {of}")]
    NotPredecessor { node: String, of: String },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("cycle detected in network")]
    Cycle,
    #[error("no convergence after {iterations} iterations (marginal gap {gap:e})")]
    NoConvergence { iterations: usize, gap: f64 },
    #[error("invalid routing: {0}")]
    InvalidRouting(String),
    #[error("missing price for relay `{relay}` towards predecessor `{predecessor}`")]
    MissingPrice { relay: String, predecessor: String },
    #[error("relay `{relay}` has {count} predecessors; at most {cap} are supported")]
    TooManyPredecessors { relay: String, count: usize, cap: usize },
    #[error("relay `{relay}` has no competitor for the traffic of `{predecessor}`")]
    NoCompetitor { relay: String, predecessor: String },
    #[error("not an oligopoly: {0}")]
    NotOligopoly(String),
    #[error("construction failed: {0}")]
    Construction(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty equilibrium list")]
    EmptyEquilibria,
    #[error("equilibrium {0} did not verify")]
    UnverifiedEquilibrium(usize),
    #[error("scenario error at `{path}`: {message}")]
    Scenario { path: String, message: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
