use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{fuse_to_fixpoint, redistribute_all, FuseRule, Rewrite};
use crate::error::{Error, Result};
use crate::graph::{reference_eval, ModelGraph, Node, Tensor};
use crate::levels::graph_depth;

/// Optimization strategy. The digit is the activation degree; `F` fuses,
/// `R` redistributes, `T` reuses the modulus tower.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    P4,
    P2,
    P2F,
    P2R,
    P2FR,
    P2FRT,
}

impl Strategy {
    pub const ALL: [Strategy; 6] =
        [Strategy::P4, Strategy::P2, Strategy::P2F, Strategy::P2R, Strategy::P2FR, Strategy::P2FRT];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::P4 => "P4",
            Strategy::P2 => "P2",
            Strategy::P2F => "P2F",
            Strategy::P2R => "P2R",
            Strategy::P2FR => "P2FR",
            Strategy::P2FRT => "P2FRT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }

    pub fn degree(self) -> usize {
        if self == Strategy::P4 {
            4
        } else {
            2
        }
    }

    pub fn fuses(self) -> bool {
        matches!(self, Strategy::P2F | Strategy::P2FR | Strategy::P2FRT)
    }

    pub fn redistributes(self) -> bool {
        matches!(self, Strategy::P2R | Strategy::P2FR | Strategy::P2FRT)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub strategy: Strategy,
    pub rewrites: Vec<Rewrite>,
    pub nodes_removed: usize,
    pub depth_before: u32,
    pub depth_after: u32,
}

pub(crate) fn check_degree(g: &ModelGraph, strategy: Strategy) -> Result<()> {
    for (id, n) in g.nodes() {
        let d = match n {
            Node::PolyAct(p) => p.degree(),
            Node::PolySkip(p) => p.degree(),
            _ => continue,
        };
        if d != strategy.degree() {
            return Err(Error::Strategy {
                strategy: strategy.name().into(),
                msg: format!("node {id} has degree {d}, expected {}", strategy.degree()),
            });
        }
    }
    Ok(())
}

/// Runs the passes named by `strategy`. `P4` and `P2` only check the graph.
pub fn apply_pipeline(g: &ModelGraph, strategy: Strategy) -> Result<(ModelGraph, PassReport)> {
    g.validate()?;
    check_degree(g, strategy)?;
    let depth_before = graph_depth(g)?;
    let mut h = g.clone();
    let mut rewrites = Vec::new();
    if strategy.fuses() {
        rewrites.extend(fuse_to_fixpoint(&mut h, &FuseRule::ALL)?);
    }
    if strategy.redistributes() {
        let (r, log) = redistribute_all(&h)?;
        h = r;
        rewrites.extend(log);
    }
    h.validate()?;
    let report = PassReport {
        strategy,
        rewrites,
        nodes_removed: g.len() - h.len(),
        depth_before,
        depth_after: graph_depth(&h)?,
    };
    Ok((h, report))
}

/// Largest `max|a - b| / max|a|` over `trials` inputs drawn from `U(-1, 1)`.
pub fn equivalence_error(a: &ModelGraph, b: &ModelGraph, trials: usize, seed: u64) -> Result<f64> {
    let Some(Node::Input(shape)) = a.node(a.input_id()?) else { unreachable!() };
    let shape = *shape;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = Tensor::new(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let (ya, yb) = (reference_eval(a, &x)?, reference_eval(b, &x)?);
        if ya.len() != yb.len() {
            return Err(Error::Shape(format!("outputs have {} and {} values", ya.len(), yb.len())));
        }
        let norm = ya.iter().fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
        let diff = ya.iter().zip(&yb).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
        worst = worst.max(diff / norm);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_resnet_graph, ActKind, NodeKind, Variant};

    #[test]
    fn parse_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::parse(&s.name().to_lowercase()), Some(s));
        }
        assert_eq!(Strategy::parse("p3"), None);
    }

    #[test]
    fn degree_mismatch_is_rejected() {
        let g = build_resnet_graph(Variant::Rn20, ActKind::Relu { degree: 4 });
        assert!(matches!(apply_pipeline(&g, Strategy::P2F), Err(Error::Strategy { .. })));
        assert!(apply_pipeline(&g, Strategy::P4).is_ok());
    }

    #[test]
    fn p2fr_on_rn20() {
        let g = build_resnet_graph(Variant::Rn20, ActKind::Relu { degree: 2 });
        let (h, rep) = apply_pipeline(&g, Strategy::P2FR).unwrap();
        assert_eq!(h.count_kind(NodeKind::BatchNorm), 0);
        assert_eq!(h.count_kind(NodeKind::Add), 0);
        assert!(rep.depth_after < rep.depth_before);
        assert_eq!(rep.nodes_removed, g.len() - h.len());
        assert!(equivalence_error(&g, &h, 20, 0).unwrap() < 1e-8);
    }
}
