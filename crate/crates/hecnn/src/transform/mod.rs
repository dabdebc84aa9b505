//! Function-preserving graph rewrites.

mod fuse;
mod pipeline;
mod redistribute;

use serde::{Deserialize, Serialize};

use crate::graph::NodeId;

pub use fuse::{
    fuse_at, fuse_bn_act, fuse_bn_conv, fuse_skip_bn_bn, fuse_skip_identity, fuse_skip_plain, fuse_to_fixpoint,
    matches, FuseRule,
};
pub(crate) use pipeline::check_degree;
pub use pipeline::{apply_pipeline, equivalence_error, PassReport, Strategy};
pub use redistribute::{
    normalize_backward, normalize_forward, receive_backward, receive_forward, redistribute_all,
    redistribute_backward, redistribute_forward, Direction, UpdateTerm,
};

/// One applied rewrite.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rewrite {
    pub rule: String,
    pub nodes: Vec<NodeId>,
}

impl Rewrite {
    pub fn new(rule: &str, nodes: Vec<NodeId>) -> Self {
        Self { rule: rule.to_string(), nodes }
    }
}
