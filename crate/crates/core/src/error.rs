use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("policy enumeration needs {count} policies, above the cap of {cap}")]
    EnumerationCap { count: f64, cap: u64 },

    #[error("{what} did not converge within {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },

    #[error("occupancy of neighbor policy at ({state}, {action}) is {mu:e}; every state must be visited with positive probability")]
    PositivityViolation { state: usize, action: usize, mu: f64 },

    #[error("robust occupancy lower bound at ({state}, {action}) is {mu:e}; exploration data is insufficient")]
    ZeroMuLow { state: usize, action: usize, mu: f64 },

    #[error("state-action pairs never observed: {0:?}")]
    UnvisitedPairs(Vec<(usize, usize)>),

    #[error("internal consistency check failed: {0}")]
    InternalConsistency(String),

    #[error("hypothesis violated: {0}")]
    HypothesisViolation(String),

    #[error("simulation aborted: {0}")]
    Simulation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad user input (files, configs) rather than
    /// failures during a run.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidMdp(_)
                | Error::InvalidInput(_)
                | Error::Config { .. }
                | Error::Io { .. }
                | Error::Json { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
