use thiserror::Error;

use crate::domain::ProcessorRef;

#[derive(Debug, Error)]
pub enum MmflError {
    #[error("empty model population: model {model} has no samples")]
    EmptyModelPopulation { model: usize },
    #[error("no clients supplied")]
    NoClients,
    #[error("duplicate client id {0}")]
    DuplicateClient(usize),
    #[error("client ids must be contiguous from 0; missing id {0}")]
    NonContiguousClients(usize),
    #[error("client {client}: model index {model} outside [0, {num_models})")]
    ModelOutOfRange {
        client: usize,
        model: usize,
        num_models: usize,
    },
    #[error("invalid client profile {client}: {reason}")]
    InvalidProfile { client: usize, reason: String },
    #[error("invalid dataset spec: {0}")]
    InvalidDatasetSpec(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("divergence in round {round} (client {client}, model {model}): non-finite loss")]
    Divergence {
        round: usize,
        client: usize,
        model: usize,
    },
    #[error("missing value for client {client}, model {model}")]
    MissingValue { client: usize, model: usize },
    #[error("negative magnitude input {value} for client {client}, model {model}")]
    NegativeMagnitude {
        client: usize,
        model: usize,
        value: f64,
    },
    #[error("infeasible budget m = {budget} for {processors} processors")]
    InfeasibleBudget { budget: f64, processors: usize },
    #[error("no feasible saturated-set split for budget {0}")]
    NoFeasibleSplit(f64),
    #[error("plan invariant violated: {0}")]
    PlanInvariant(String),
    #[error("protocol error: active processor {processor:?} supplied no update for model {model}")]
    MissingUpdate { processor: ProcessorRef, model: usize },
    #[error("no stale state for client {client}, model {model}")]
    NoStaleState { client: usize, model: usize },
    #[error("oracle guard: {0}")]
    OracleGuard(String),
    #[error("{method} failed: {source}")]
    Method {
        method: String,
        #[source]
        source: Box<MmflError>,
    },
    #[error("configuration error(s):\n{}", .0.join("\n"))]
    Config(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = MmflError> = std::result::Result<T, E>;
