use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("collective {collective} on group {group}: {detail}")]
    Collective {
        collective: String,
        group: String,
        detail: String,
    },

    /// A collective or receive could not complete because some participant
    /// never arrived.
    #[error("hang in {collective} on group {group}: waiting for ranks {missing:?}")]
    Hang {
        collective: String,
        group: String,
        missing: Vec<usize>,
    },

    #[error("routing error: {0}")]
    Routing(String),

    #[error("soft failure: non-finite loss or gradient on rank {rank} (node {node}) at step {step}")]
    SoftFailure { rank: usize, node: usize, step: u64 },

    #[error("hard failure: node {node} died at step {step}")]
    HardFailure { node: usize, step: u64 },

    #[error("buffer nodes exhausted after failure of node {failed_node}")]
    BufferExhausted { failed_node: usize },

    #[error("injected crash after {offset} bytes")]
    InjectedCrash { offset: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    /// Hangs are usually a symptom of some other rank failing first.
    pub fn is_hang(&self) -> bool {
        matches!(self, Error::Hang { .. })
    }
}
