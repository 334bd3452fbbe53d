use thiserror::Error;

/// Errors raised by the state algebra, optical elements, gadgets and drivers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate state: all amplitudes vanish")]
    DegenerateState,

    #[error("shape error: {0}")]
    Shape(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("unknown unitary `{0}`")]
    UnknownUnitary(String),

    #[error("photon {0} is not carried by the state")]
    AbsentPhoton(char),

    #[error("coherence loss: {0}")]
    CoherenceLoss(String),

    #[error("aliasing: target and control are the same subsystem ({0})")]
    Aliasing(String),

    #[error("protocol order: {0}")]
    ProtocolOrder(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid case index: {0}")]
    InvalidCase(String),

    #[error("constraint violated: {0}")]
    Constraint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
