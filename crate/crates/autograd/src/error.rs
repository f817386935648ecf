use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward from non-scalar node of shape {0}")]
    NonScalarLoss(String),
    #[error("node {0} does not belong to this graph")]
    UnknownVar(usize),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;
