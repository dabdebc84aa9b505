use thiserror::Error;

use crate::graph::NodeId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("graph invariant violated: {0}")]
    Graph(String),
    #[error("node {node}: {msg}")]
    Node { node: NodeId, msg: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("pattern not matched at node {0}")]
    NoMatch(NodeId),
    #[error("donor {donor}: {msg}")]
    Redistribution { donor: NodeId, msg: String },
    #[error("strategy {strategy} does not fit graph: {msg}")]
    Strategy { strategy: String, msg: String },
    #[error("depth exhausted at {0}")]
    DepthExhausted(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("slot capacity exceeded: need {need}, have {have}")]
    Capacity { need: usize, have: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn node(node: NodeId, msg: impl Into<String>) -> Self {
        Error::Node { node, msg: msg.into() }
    }
}
