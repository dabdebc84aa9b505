//! Node fusing.
//!
//! Unit fusions operate on node parameters; the graph rules locate a pattern
//! and splice in the fused node. Only degree-2 activations are fused.

use serde::{Deserialize, Serialize};

use super::Rewrite;
use crate::error::{Error, Result};
use crate::graph::{BatchNormNode, ConvNode, ModelGraph, Node, NodeId, PolyActNode, PolySkipNode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseRule {
    /// BN feeding an activation.
    BnAct,
    /// Conv feeding a BN.
    ConvBn,
    /// `P(B_X(x) + B_Y(y))`.
    SkipBnBn,
    /// `P(B_X(x) + y)`.
    SkipIdentity,
    /// `P(x + y)`.
    SkipPlain,
}

impl FuseRule {
    pub const ALL: [FuseRule; 5] =
        [FuseRule::SkipBnBn, FuseRule::SkipIdentity, FuseRule::SkipPlain, FuseRule::BnAct, FuseRule::ConvBn];

    pub fn name(self) -> &'static str {
        match self {
            FuseRule::BnAct => "fuse_bn_act",
            FuseRule::ConvBn => "fuse_bn_conv",
            FuseRule::SkipBnBn => "fuse_skip_bn_bn",
            FuseRule::SkipIdentity => "fuse_skip_identity",
            FuseRule::SkipPlain => "fuse_skip_plain",
        }
    }
}

fn quadratic(act: &PolyActNode) -> Result<()> {
    if act.degree() != 2 {
        return Err(Error::Invalid(format!("fusing needs a degree-2 activation, got degree {}", act.degree())));
    }
    Ok(())
}

fn check_rows(rows: usize, n: usize) -> Result<()> {
    if rows != 1 && rows != n {
        return Err(Error::Shape(format!("{rows} activation rows for {n} channels")));
    }
    Ok(())
}

pub fn fuse_bn_act(bn: &BatchNormNode, act: &PolyActNode) -> Result<PolyActNode> {
    quadratic(act)?;
    let n = bn.channels();
    check_rows(act.coeffs.len(), n)?;
    let coeffs = (0..n)
        .map(|ch| {
            let (b1, b0) = (bn.slope(ch), bn.intercept(ch));
            let r = act.row(ch);
            let (c0, c1, c2) = (r[0], r[1], r[2]);
            vec![b0 * b0 * c2 + b0 * c1 + c0, b1 * (2.0 * b0 * c2 + c1), b1 * b1 * c2]
        })
        .collect();
    Ok(PolyActNode { coeffs })
}

pub fn fuse_bn_conv(conv: &ConvNode, bn: &BatchNormNode) -> Result<ConvNode> {
    if bn.channels() != conv.out_channels {
        return Err(Error::Shape(format!(
            "batchnorm has {} channels, conv produces {}",
            bn.channels(),
            conv.out_channels
        )));
    }
    let mut out = conv.clone();
    let per = conv.in_channels * conv.kernel_h * conv.kernel_w;
    for o in 0..conv.out_channels {
        let (b1, b0) = (bn.slope(o), bn.intercept(o));
        out.weights[o * per..(o + 1) * per].iter_mut().for_each(|w| *w *= b1);
        out.bias[o] = b1 * conv.bias[o] + b0;
    }
    Ok(out)
}

/// Coefficients of `c2 (ax x + bx + ay y + by)^2 + c1 (..) + c0` in
/// [`PolySkipNode::QUADRATIC`] order.
fn skip_row(bx: (f64, f64), by: (f64, f64), c: &[f64]) -> Vec<f64> {
    let (x1, x0) = bx;
    let (y1, y0) = by;
    let (c0, c1, c2) = (c[0], c[1], c[2]);
    let s = x0 + y0;
    vec![
        c2 * x1 * x1,
        c2 * y1 * y1,
        2.0 * c2 * x1 * y1,
        x1 * (2.0 * c2 * s + c1),
        y1 * (2.0 * c2 * s + c1),
        c2 * s * s + c1 * s + c0,
    ]
}

fn skip_node(n: usize, act: &PolyActNode, bx: impl Fn(usize) -> (f64, f64), by: impl Fn(usize) -> (f64, f64)) -> Result<PolySkipNode> {
    quadratic(act)?;
    check_rows(act.coeffs.len(), n)?;
    let coeffs = (0..n).map(|ch| skip_row(bx(ch), by(ch), act.row(ch))).collect();
    Ok(PolySkipNode { monomials: PolySkipNode::QUADRATIC.to_vec(), coeffs })
}

fn affine(bn: &BatchNormNode) -> impl Fn(usize) -> (f64, f64) + '_ {
    move |ch| (bn.slope(ch), bn.intercept(ch))
}

pub fn fuse_skip_bn_bn(bnx: &BatchNormNode, bny: &BatchNormNode, act: &PolyActNode) -> Result<PolySkipNode> {
    if bnx.channels() != bny.channels() {
        return Err(Error::Shape(format!("branch batchnorms have {} and {} channels", bnx.channels(), bny.channels())));
    }
    skip_node(bnx.channels(), act, affine(bnx), affine(bny))
}

pub fn fuse_skip_identity(bnx: &BatchNormNode, act: &PolyActNode) -> Result<PolySkipNode> {
    skip_node(bnx.channels(), act, affine(bnx), |_| (1.0, 0.0))
}

/// `P(x + y)` over `n` channels.
pub fn fuse_skip_plain(n: usize, act: &PolyActNode) -> Result<PolySkipNode> {
    skip_node(n, act, |_| (1.0, 0.0), |_| (1.0, 0.0))
}

fn single_consumer(g: &ModelGraph, id: NodeId) -> Option<NodeId> {
    match g.consumers(id).as_slice() {
        [c] => Some(*c),
        _ => None,
    }
}

fn quadratic_act(g: &ModelGraph, id: NodeId) -> Option<&PolyActNode> {
    match g.node(id) {
        Some(Node::PolyAct(p)) if p.degree() == 2 => Some(p),
        _ => None,
    }
}

fn bn(g: &ModelGraph, id: NodeId) -> Option<&BatchNormNode> {
    match g.node(id) {
        Some(Node::BatchNorm(b)) => Some(b),
        _ => None,
    }
}

/// Branch of an Add: a BN absorbed into the fused node, or the identity.
struct Branch {
    bn: Option<NodeId>,
    src: NodeId,
}

fn branch(g: &ModelGraph, add: NodeId, input: NodeId) -> Branch {
    if bn(g, input).is_some() && g.consumers(input) == [add] {
        Branch { bn: Some(input), src: g.inputs(input)[0] }
    } else {
        Branch { bn: None, src: input }
    }
}

/// Rule a node anchors, if any. BnAct and ConvBn anchor on the BN, the skip
/// rules on the Add.
pub fn matches(g: &ModelGraph, id: NodeId, rule: FuseRule) -> bool {
    match rule {
        FuseRule::BnAct => {
            bn(g, id).is_some() && single_consumer(g, id).is_some_and(|c| quadratic_act(g, c).is_some())
        }
        FuseRule::ConvBn => {
            bn(g, id).is_some()
                && g.inputs(id).first().is_some_and(|&p| {
                    matches!(g.node(p), Some(Node::Conv(_))) && single_consumer(g, p) == Some(id)
                })
        }
        FuseRule::SkipBnBn | FuseRule::SkipIdentity | FuseRule::SkipPlain => {
            if !matches!(g.node(id), Some(Node::Add)) {
                return false;
            }
            if !single_consumer(g, id).is_some_and(|c| quadratic_act(g, c).is_some()) {
                return false;
            }
            let ins = g.inputs(id);
            let absorbed = ins.iter().filter(|&&i| branch(g, id, i).bn.is_some()).count();
            // The same BN feeding both sides is not absorbable.
            let absorbed = if ins[0] == ins[1] { 0 } else { absorbed };
            absorbed
                == match rule {
                    FuseRule::SkipBnBn => 2,
                    FuseRule::SkipIdentity => 1,
                    _ => 0,
                }
        }
    }
}

/// Applies `rule` anchored at `id`.
pub fn fuse_at(g: &mut ModelGraph, id: NodeId, rule: FuseRule) -> Result<Rewrite> {
    if !matches(g, id, rule) {
        return Err(Error::NoMatch(id));
    }
    match rule {
        FuseRule::BnAct => {
            let act_id = single_consumer(g, id).unwrap();
            let fused = fuse_bn_act(bn(g, id).unwrap(), quadratic_act(g, act_id).unwrap())?;
            let src = g.inputs(id)[0];
            g.replace_input(act_id, id, src);
            g.remove(id);
            *g.node_mut(act_id).unwrap() = Node::PolyAct(fused);
            Ok(Rewrite::new(rule.name(), vec![id, act_id]))
        }
        FuseRule::ConvBn => {
            let conv_id = g.inputs(id)[0];
            let Some(Node::Conv(conv)) = g.node(conv_id) else { unreachable!() };
            let fused = fuse_bn_conv(conv, bn(g, id).unwrap())?;
            g.redirect_outputs(id, conv_id);
            g.remove(id);
            *g.node_mut(conv_id).unwrap() = Node::Conv(fused);
            Ok(Rewrite::new(rule.name(), vec![conv_id, id]))
        }
        _ => {
            let act_id = single_consumer(g, id).unwrap();
            let act = quadratic_act(g, act_id).unwrap().clone();
            let ins = g.inputs(id);
            let mut a = branch(g, id, ins[0]);
            let mut b = branch(g, id, ins[1]);
            if ins[0] == ins[1] {
                a.bn = None;
                b.bn = None;
                a.src = ins[0];
                b.src = ins[1];
            }
            // The x slot carries the BN when only one branch has one.
            if a.bn.is_none() && b.bn.is_some() {
                std::mem::swap(&mut a, &mut b);
            }
            let node = match (a.bn, b.bn) {
                (Some(x), Some(y)) => fuse_skip_bn_bn(bn(g, x).unwrap(), bn(g, y).unwrap(), &act)?,
                (Some(x), None) => fuse_skip_identity(bn(g, x).unwrap(), &act)?,
                _ => {
                    let n = g.validate()?[&id].channels;
                    fuse_skip_plain(n, &act)?
                }
            };
            let mut touched = vec![id, act_id];
            touched.extend(a.bn);
            touched.extend(b.bn);
            g.remove(id);
            for x in a.bn.into_iter().chain(b.bn) {
                g.remove(x);
            }
            g.connect(a.src, act_id);
            g.connect(b.src, act_id);
            *g.node_mut(act_id).unwrap() = Node::PolySkip(node);
            touched.sort_unstable();
            Ok(Rewrite::new(rule.name(), touched))
        }
    }
}

/// Repeatedly applies the first rule in `order` that matches anywhere
/// (smallest anchor id first) until nothing matches.
pub fn fuse_to_fixpoint(g: &mut ModelGraph, order: &[FuseRule]) -> Result<Vec<Rewrite>> {
    let mut log = Vec::new();
    'outer: loop {
        for &rule in order {
            if let Some(id) = g.node_ids().into_iter().find(|&id| matches(g, id, rule)) {
                log.push(fuse_at(g, id, rule)?);
                continue 'outer;
            }
        }
        return Ok(log);
    }
}
