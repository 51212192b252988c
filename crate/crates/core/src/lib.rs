//! Next-community prediction for shared content: session-based community
//! influence graphs, APPNP and temporal-memory embeddings, BPR/CE training
//! and ranking evaluation, on a small from-scratch autodiff core.

pub mod cig;
pub mod dynamic;
pub mod eval;
pub mod event_store;
pub mod intervals;
pub mod model;
pub mod nn;
pub mod numeric;
pub mod static_encoder;
pub mod synth;
pub mod trainer;

/// Any failure surfaced by the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] event_store::DataError),
    #[error(transparent)]
    Interval(#[from] intervals::IntervalError),
    #[error(transparent)]
    Cig(#[from] cig::CigError),
    #[error(transparent)]
    Static(#[from] static_encoder::StaticError),
    #[error(transparent)]
    Context(#[from] model::ContextError),
    #[error(transparent)]
    Numeric(#[from] numeric::NumericError),
    #[error(transparent)]
    Checkpoint(#[from] numeric::CheckpointError),
    #[error(transparent)]
    Order(#[from] dynamic::OrderError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Broad failure classes, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use ErrorKind::*;
        match self {
            Error::Numeric(_) | Error::Train(trainer::TrainError::NonFinite { .. }) => Numeric,
            Error::Train(trainer::TrainError::Config(_)) | Error::Synth(synth::SynthError::Config(_)) => Usage,
            Error::Static(static_encoder::StaticError::UnknownScheme(_))
            | Error::Cig(cig::CigError::UnknownMode(_) | cig::CigError::UnknownFormat(_)) => Usage,
            _ => Data,
        }
    }
}
