use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("case file is missing required table `{0}`")]
    MissingTable(&'static str),
    #[error("table `{table}` row {row}: {message}")]
    BadRow {
        table: &'static str,
        row: usize,
        message: String,
    },
    #[error("duplicate bus id {0}")]
    DuplicateBus(u32),
    #[error("{element} references unknown bus {bus}")]
    UnknownBus { element: String, bus: u32 },
    #[error("network must contain exactly one slack bus, found {0}")]
    SlackCount(usize),
    #[error("network is disconnected: {unreached} of {total} buses unreachable from the slack bus")]
    Disconnected { unreached: usize, total: usize },
    #[error("invalid network data: {0}")]
    InvalidNetwork(String),

    #[error("power flow did not converge after {iterations} iterations (mismatch {mismatch:.3e})")]
    NoConvergence {
        iterations: usize,
        mismatch: f64,
        trace: Vec<f64>,
    },
    #[error("singular Jacobian: {0}")]
    SingularJacobian(String),
    #[error("base operating point is infeasible: {0}")]
    BaseInfeasible(String),

    #[error("bound row {row} = {value:.6e} exceeds its cap {cap:.6e}")]
    CapExceeded { row: usize, value: f64, cap: f64 },
    #[error("negative bound input: {0}")]
    NegativeBound(String),
    #[error("linear relaxation is infeasible (growth ratio {ratio:.4} ≥ 1)")]
    RelaxationDiverged { ratio: f64 },
    #[error("zero certificate: best objective {0:.3e} is below the 1e-9 floor")]
    ZeroCertificate(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
