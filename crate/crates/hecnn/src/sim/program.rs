use serde::{Deserialize, Serialize};

use super::SlotLayout;
use crate::graph::NodeId;
use crate::levels::ModulusChainPlan;

pub type Reg = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Instr {
    /// Loads input channel `channel`.
    Encode { dst: Reg, channel: usize },
    Add { dst: Reg, a: Reg, b: Reg },
    AddPlain { dst: Reg, a: Reg, pt: usize },
    MultPlain { dst: Reg, a: Reg, pt: usize },
    MultCt { dst: Reg, a: Reg, b: Reg },
    Rotate { dst: Reg, a: Reg, step: i64 },
    /// Drops the next modulus; `node` is the graph node whose output is settled.
    Rescale { dst: Reg, a: Reg, node: NodeId },
    /// Emits output channel `index`.
    Decode { src: Reg, index: usize },
}

impl Instr {
    pub fn name(&self) -> &'static str {
        match self {
            Instr::Encode { .. } => "encode",
            Instr::Add { .. } => "add",
            Instr::AddPlain { .. } => "add_plain",
            Instr::MultPlain { .. } => "mult_plain",
            Instr::MultCt { .. } => "mult_ct",
            Instr::Rotate { .. } => "rotate",
            Instr::Rescale { .. } => "rescale",
            Instr::Decode { .. } => "decode",
        }
    }

    pub fn dst(&self) -> Option<Reg> {
        match *self {
            Instr::Encode { dst, .. }
            | Instr::Add { dst, .. }
            | Instr::AddPlain { dst, .. }
            | Instr::MultPlain { dst, .. }
            | Instr::MultCt { dst, .. }
            | Instr::Rotate { dst, .. }
            | Instr::Rescale { dst, .. } => Some(dst),
            Instr::Decode { .. } => None,
        }
    }

    pub fn sources(&self) -> Vec<Reg> {
        match *self {
            Instr::Encode { .. } => vec![],
            Instr::Add { a, b, .. } | Instr::MultCt { a, b, .. } => vec![a, b],
            Instr::AddPlain { a, .. } | Instr::MultPlain { a, .. } | Instr::Rotate { a, .. } | Instr::Rescale { a, .. } => {
                vec![a]
            }
            Instr::Decode { src, .. } => vec![src],
        }
    }
}

/// Plaintext with one value per replica region on a mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlainSpec {
    pub mask: usize,
    pub values: Vec<f64>,
    pub sublevel: u32,
    /// Conv node and kernel column for weight plaintexts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<(NodeId, usize)>,
    /// Layout a product with this plaintext takes on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitProgram {
    pub slots: usize,
    pub replicas: usize,
    pub delta_bits: u32,
    pub sublevel: u32,
    pub input_channels: usize,
    pub input_layout: SlotLayout,
    pub output_layout: SlotLayout,
    pub layouts: Vec<SlotLayout>,
    /// Region-relative slot lists.
    pub masks: Vec<Vec<usize>>,
    pub plaintexts: Vec<PlainSpec>,
    pub instrs: Vec<Instr>,
    pub outputs: usize,
    pub plan: ModulusChainPlan,
}

impl CircuitProgram {
    /// Number of instructions of each kind.
    pub fn op_counts(&self) -> std::collections::BTreeMap<&'static str, usize> {
        let mut m = std::collections::BTreeMap::new();
        for i in &self.instrs {
            *m.entry(i.name()).or_insert(0) += 1;
        }
        m
    }

    pub fn rescale_nodes(&self) -> Vec<NodeId> {
        self.instrs
            .iter()
            .filter_map(|i| match i {
                Instr::Rescale { node, .. } => Some(*node),
                _ => None,
            })
            .collect()
    }
}
