//! Multiplicative level analysis and modulus-chain planning.

mod meta;
mod plan;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_resnet_graph, ActKind, ModelGraph, Node, Variant};
use crate::poly::poly_depth;
use crate::transform::{apply_pipeline, Strategy};

pub use meta::{apply_rescale, needs_rescale, sublevel, CiphertextMeta};
pub use plan::{plan_modulus_chain, ModulusChainPlan, ModulusRole, ModulusSpec, Preset, RescaleSchedule};

/// Level cost of each node form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelCostTable {
    pub conv: u32,
    pub linear: u32,
    pub batchnorm: u32,
    pub batchnorm_unit: u32,
    pub avgpool: u32,
    pub avgpool_unit: u32,
}

impl Default for LevelCostTable {
    fn default() -> Self {
        Self { conv: 1, linear: 1, batchnorm: 1, batchnorm_unit: 0, avgpool: 1, avgpool_unit: 0 }
    }
}

impl LevelCostTable {
    pub fn cost(&self, node: &Node) -> u32 {
        match node {
            Node::Conv(_) => self.conv,
            Node::Linear(_) => self.linear,
            Node::BatchNorm(b) if b.is_unit_slope() => self.batchnorm_unit,
            Node::BatchNorm(_) => self.batchnorm,
            Node::AvgPool(p) if p.divisor == 1.0 => self.avgpool_unit,
            Node::AvgPool(_) => self.avgpool,
            Node::PolyAct(p) => poly_depth(p.degree(), p.is_monic()),
            Node::PolySkip(p) => poly_depth(p.degree(), p.is_monic()),
            Node::Input(_) | Node::Add | Node::Output => 0,
        }
    }
}

/// Critical-path level sum of `g` as it stands.
pub fn graph_depth(g: &ModelGraph) -> Result<u32> {
    let table = LevelCostTable::default();
    let path = g.longest_path(|n| table.cost(n) as u64)?;
    Ok(path.iter().map(|&id| table.cost(g.node(id).unwrap())).sum())
}

fn mismatch(strategy: Strategy, msg: String) -> Error {
    Error::Strategy { strategy: strategy.name().into(), msg }
}

/// Checks that the graph's node forms are what `strategy` produces.
pub fn check_forms(g: &ModelGraph, strategy: Strategy) -> Result<()> {
    crate::transform::check_degree(g, strategy)?;
    for (id, n) in g.nodes() {
        match n {
            Node::BatchNorm(b) => {
                if strategy.fuses() {
                    return Err(mismatch(strategy, format!("batchnorm {id} survives fusing")));
                }
                if strategy.redistributes() && !b.is_unit_slope() {
                    return Err(mismatch(strategy, format!("batchnorm {id} slope is not 1")));
                }
            }
            Node::PolySkip(_) if !strategy.fuses() => {
                return Err(mismatch(strategy, format!("polyskip {id} without fusing")));
            }
            Node::PolyAct(p) if strategy.redistributes() && !p.is_monic() => {
                return Err(mismatch(strategy, format!("activation {id} is not monic")));
            }
            Node::PolySkip(p) if strategy.redistributes() && !p.is_monic() => {
                return Err(mismatch(strategy, format!("polyskip {id} is not monic")));
            }
            Node::AvgPool(p) if strategy.redistributes() && p.divisor != 1.0 => {
                return Err(mismatch(strategy, format!("pool {id} divisor is {}", p.divisor)));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Level count `L` of a graph already in the forms of `strategy`. Tower
/// reuse halves the count, rounding up.
pub fn analyze_levels(g: &ModelGraph, strategy: Strategy) -> Result<u32> {
    g.validate()?;
    check_forms(g, strategy)?;
    let l = graph_depth(g)?;
    Ok(if strategy == Strategy::P2FRT { l.div_ceil(2) } else { l })
}

/// Levels of the generated `variant` under every strategy, in
/// `Strategy::ALL` order. Each column is built with the ReLU fit of the
/// strategy's degree.
pub fn strategy_table(variant: Variant) -> Result<Vec<(Strategy, u32)>> {
    Strategy::ALL
        .iter()
        .map(|&s| {
            let g = build_resnet_graph(variant, ActKind::Relu { degree: s.degree() });
            let (h, _) = apply_pipeline(&g, s)?;
            Ok((s, analyze_levels(&h, s)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TensorShape;

    fn table(v: Variant) -> Vec<u32> {
        strategy_table(v).unwrap().into_iter().map(|(_, l)| l).collect()
    }

    #[test]
    fn resnet_tables() {
        assert_eq!(table(Variant::Rn18), vec![87, 70, 53, 35, 35, 18]);
        let rn20 = table(Variant::Rn20);
        assert_eq!((rn20[0], rn20[5]), (97, 20));
        let rn32 = table(Variant::Rn32);
        assert_eq!((rn32[0], rn32[5]), (157, 32));
    }

    #[test]
    fn empty_graph_has_no_levels() {
        let mut g = ModelGraph::new();
        let i = g.push(Node::Input(TensorShape::new(1, 2, 2)), &[]);
        g.push(Node::Output, &[i]);
        for s in Strategy::ALL {
            assert_eq!(analyze_levels(&g, s).unwrap(), 0);
        }
    }

    #[test]
    fn form_mismatch_is_rejected() {
        let g = build_resnet_graph(Variant::Rn18, ActKind::Relu { degree: 4 });
        assert!(analyze_levels(&g, Strategy::P2).is_err());
        let g = build_resnet_graph(Variant::Rn18, ActKind::Relu { degree: 2 });
        assert!(analyze_levels(&g, Strategy::P2F).is_err());
        assert!(analyze_levels(&g, Strategy::P2R).is_err());
    }
}
