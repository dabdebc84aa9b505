//! Weight redistribution.
//!
//! A donor is rewritten so that its leading coefficient (or pool divisor)
//! becomes 1, and the removed factor `υ` is pushed into neighbouring linear
//! operators. Forward updates scale successors for an input that shrank by
//! `υ`; backward updates scale predecessors so the donor sees an input grown
//! by `υ`. `υ` is carried per channel since fused activations are.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Rewrite;
use crate::error::{Error, Result};
use crate::graph::{BatchNormNode, ModelGraph, Node, NodeId, PolyActNode, PolySkipNode, TensorShape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateTerm {
    /// One factor per channel of the donor output.
    pub upsilon: Vec<f64>,
    pub direction: Direction,
    pub donor: NodeId,
}

fn at(v: &[f64], c: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[c]
    }
}

fn uniform(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

/// Rebuilds coefficient rows as `f(row, channel)`, keeping a single shared
/// row when every per-channel factor agrees.
fn map_rows(rows: &[Vec<f64>], factors: &[&[f64]], f: impl Fn(&[f64], usize) -> Vec<f64>) -> Vec<Vec<f64>> {
    let shared = rows.len() == 1 && factors.iter().all(|v| uniform(v));
    if shared {
        return vec![f(&rows[0], 0)];
    }
    let n = factors.iter().map(|v| v.len()).chain([rows.len()]).max().unwrap_or(1);
    (0..n).map(|c| f(if rows.len() == 1 { &rows[0] } else { &rows[c] }, c)).collect()
}

fn nonzero(donor: NodeId, ups: &[f64]) -> Result<()> {
    if ups.iter().any(|&u| u == 0.0 || !u.is_finite()) {
        return Err(Error::Redistribution { donor, msg: "update term is zero or not finite".into() });
    }
    Ok(())
}

fn skip_lead_index(p: &PolySkipNode, donor: NodeId) -> Result<usize> {
    let d = p.degree() as u32;
    p.position(d, 0)
        .ok_or_else(|| Error::Redistribution { donor, msg: format!("no x^{d} term to normalize on") })
}

/// Normalizes a donor for a forward update. Returns the rewritten node and
/// `υ` per coefficient row (one entry for pools).
pub fn normalize_forward(node: &Node, donor: NodeId) -> Result<(Node, Vec<f64>)> {
    let out = match node {
        Node::AvgPool(p) => (Node::AvgPool(crate::graph::AvgPoolNode { window: p.window, divisor: 1.0 }), vec![p.divisor]),
        Node::PolyAct(p) => {
            let d = p.degree();
            let ups: Vec<f64> = p.coeffs.iter().map(|r| r[d]).collect();
            nonzero(donor, &ups)?;
            let coeffs = p
                .coeffs
                .iter()
                .zip(&ups)
                .map(|(r, u)| {
                    let mut r: Vec<f64> = r.iter().map(|c| c / u).collect();
                    r[d] = 1.0;
                    r
                })
                .collect();
            (Node::PolyAct(PolyActNode { coeffs }), ups)
        }
        Node::PolySkip(p) => {
            let k = skip_lead_index(p, donor)?;
            let ups: Vec<f64> = p.coeffs.iter().map(|r| r[k]).collect();
            nonzero(donor, &ups)?;
            let coeffs = p
                .coeffs
                .iter()
                .zip(&ups)
                .map(|(r, u)| {
                    let mut r: Vec<f64> = r.iter().map(|c| c / u).collect();
                    r[k] = 1.0;
                    r
                })
                .collect();
            (Node::PolySkip(PolySkipNode { monomials: p.monomials.clone(), coeffs }), ups)
        }
        Node::BatchNorm(b) => {
            let ups = b.slopes();
            nonzero(donor, &ups)?;
            let b0 = b.intercepts().iter().zip(&ups).map(|(o, u)| o / u).collect();
            (Node::BatchNorm(BatchNormNode::from_affine(vec![1.0; ups.len()], b0)), ups)
        }
        other => {
            return Err(Error::Redistribution { donor, msg: format!("{} cannot donate", other.kind().name()) })
        }
    };
    nonzero(donor, &out.1)?;
    Ok(out)
}

/// Real `d`-th root, defined for negative values only at odd `d`.
fn real_root(v: f64, d: usize, donor: NodeId) -> Result<f64> {
    if v < 0.0 && d % 2 == 0 {
        return Err(Error::Redistribution {
            donor,
            msg: format!("leading coefficient {v} is negative at even degree {d}"),
        });
    }
    Ok(v.signum() * v.abs().powf(1.0 / d as f64))
}

/// Normalizes a donor for a backward update.
pub fn normalize_backward(node: &Node, donor: NodeId) -> Result<(Node, Vec<f64>)> {
    let out = match node {
        Node::AvgPool(p) => (Node::AvgPool(crate::graph::AvgPoolNode { window: p.window, divisor: 1.0 }), vec![p.divisor]),
        Node::PolyAct(p) => {
            let d = p.degree();
            let ups = p.coeffs.iter().map(|r| real_root(r[d], d, donor)).collect::<Result<Vec<_>>>()?;
            nonzero(donor, &ups)?;
            let coeffs = p
                .coeffs
                .iter()
                .zip(&ups)
                .map(|(r, u)| {
                    let mut r: Vec<f64> = r.iter().enumerate().map(|(i, c)| c * u.powi(-(i as i32))).collect();
                    r[d] = 1.0;
                    r
                })
                .collect();
            (Node::PolyAct(PolyActNode { coeffs }), ups)
        }
        Node::PolySkip(p) => {
            let k = skip_lead_index(p, donor)?;
            let d = p.degree();
            let ups = p.coeffs.iter().map(|r| real_root(r[k], d, donor)).collect::<Result<Vec<_>>>()?;
            nonzero(donor, &ups)?;
            let coeffs = p
                .coeffs
                .iter()
                .zip(&ups)
                .map(|(r, u)| {
                    let mut r: Vec<f64> =
                        r.iter().zip(&p.monomials).map(|(c, &(i, _))| c * u.powi(-(i as i32))).collect();
                    r[k] = 1.0;
                    r
                })
                .collect();
            (Node::PolySkip(PolySkipNode { monomials: p.monomials.clone(), coeffs }), ups)
        }
        Node::BatchNorm(b) => {
            let ups = b.slopes();
            nonzero(donor, &ups)?;
            let b0 = b.intercepts();
            (Node::BatchNorm(BatchNormNode::from_affine(vec![1.0; ups.len()], b0)), ups)
        }
        other => {
            return Err(Error::Redistribution { donor, msg: format!("{} cannot donate", other.kind().name()) })
        }
    };
    nonzero(donor, &out.1)?;
    Ok(out)
}

/// Adjusts a consumer whose input at `slot` is now `x / υ`.
pub fn receive_forward(node: &Node, slot: usize, ups: &[f64], in_shape: TensorShape) -> Option<Node> {
    Some(match node {
        Node::Conv(c) => {
            let mut c = c.clone();
            let k = c.kernel_h * c.kernel_w;
            for (i, w) in c.weights.iter_mut().enumerate() {
                *w *= at(ups, (i / k) % c.in_channels);
            }
            Node::Conv(c)
        }
        Node::Linear(l) => {
            let mut l = l.clone();
            let hw = in_shape.height * in_shape.width;
            for (i, w) in l.weights.iter_mut().enumerate() {
                *w *= at(ups, (i % l.in_features) / hw);
            }
            Node::Linear(l)
        }
        Node::PolyAct(p) => Node::PolyAct(PolyActNode {
            coeffs: map_rows(&p.coeffs, &[ups], |r, c| {
                r.iter().enumerate().map(|(i, v)| v * at(ups, c).powi(i as i32)).collect()
            }),
        }),
        Node::PolySkip(p) => Node::PolySkip(PolySkipNode {
            monomials: p.monomials.clone(),
            coeffs: map_rows(&p.coeffs, &[ups], |r, c| {
                r.iter()
                    .zip(&p.monomials)
                    .map(|(v, &(i, j))| v * at(ups, c).powi(if slot == 0 { i } else { j } as i32))
                    .collect()
            }),
        }),
        Node::BatchNorm(b) => {
            let b1 = (0..b.channels()).map(|c| b.slope(c) * at(ups, c)).collect();
            Node::BatchNorm(BatchNormNode::from_affine(b1, b.intercepts()))
        }
        _ => return None,
    })
}

/// Adjusts a producer so that its output grows by `υ`.
pub fn receive_backward(node: &Node, ups: &[f64]) -> Option<Node> {
    Some(match node {
        Node::Conv(c) => {
            let mut c = c.clone();
            let per = c.in_channels * c.kernel_h * c.kernel_w;
            for (i, w) in c.weights.iter_mut().enumerate() {
                *w *= at(ups, i / per);
            }
            for (o, b) in c.bias.iter_mut().enumerate() {
                *b *= at(ups, o);
            }
            Node::Conv(c)
        }
        Node::Linear(l) => {
            let mut l = l.clone();
            for (i, w) in l.weights.iter_mut().enumerate() {
                *w *= at(ups, i / l.in_features);
            }
            for (k, b) in l.bias.iter_mut().enumerate() {
                *b *= at(ups, k);
            }
            Node::Linear(l)
        }
        Node::PolyAct(p) => Node::PolyAct(PolyActNode {
            coeffs: map_rows(&p.coeffs, &[ups], |r, c| r.iter().map(|v| v * at(ups, c)).collect()),
        }),
        Node::PolySkip(p) => Node::PolySkip(PolySkipNode {
            monomials: p.monomials.clone(),
            coeffs: map_rows(&p.coeffs, &[ups], |r, c| r.iter().map(|v| v * at(ups, c)).collect()),
        }),
        Node::BatchNorm(b) => {
            let n = b.channels();
            Node::BatchNorm(BatchNormNode::from_affine(
                (0..n).map(|c| b.slope(c) * at(ups, c)).collect(),
                (0..n).map(|c| b.intercept(c) * at(ups, c)).collect(),
            ))
        }
        _ => return None,
    })
}

fn push_forward(
    g: &mut ModelGraph,
    shapes: &BTreeMap<NodeId, TensorShape>,
    from: NodeId,
    ups: &[f64],
    donor: NodeId,
) -> Result<()> {
    let mut consumers = g.consumers(from);
    consumers.dedup();
    for c in consumers {
        if let Some(Node::AvgPool(_)) = g.node(c) {
            push_forward(g, shapes, c, ups, donor)?;
            continue;
        }
        for (slot, _) in g.inputs(c).iter().enumerate().filter(|(_, &p)| p == from) {
            let node = g.node(c).unwrap();
            let new = receive_forward(node, slot, ups, shapes[&from]).ok_or_else(|| Error::Redistribution {
                donor,
                msg: format!("path through node {c} ({}) has no receiver", node.kind().name()),
            })?;
            *g.node_mut(c).unwrap() = new;
        }
    }
    Ok(())
}

fn push_backward(g: &mut ModelGraph, consumer: NodeId, producer: NodeId, ups: &[f64], donor: NodeId) -> Result<()> {
    if g.consumers(producer) != [consumer] {
        return Err(Error::Redistribution {
            donor,
            msg: format!("predecessor {producer} feeds other nodes and cannot be rescaled"),
        });
    }
    let node = g.node(producer).unwrap();
    match node {
        Node::Add => {
            for p in g.inputs(producer) {
                push_backward(g, producer, p, ups, donor)?;
            }
        }
        Node::AvgPool(_) => {
            let p = g.inputs(producer)[0];
            push_backward(g, producer, p, ups, donor)?;
        }
        _ => {
            let new = receive_backward(node, ups).ok_or_else(|| Error::Redistribution {
                donor,
                msg: format!("path through node {producer} ({}) has no receiver", node.kind().name()),
            })?;
            *g.node_mut(producer).unwrap() = new;
        }
    }
    Ok(())
}

fn broadcast(ups: Vec<f64>, n: usize) -> Vec<f64> {
    if ups.len() == 1 {
        vec![ups[0]; n]
    } else {
        ups
    }
}

/// Normalizes `donor` and scales every successor receiver. The input graph
/// is untouched on error.
pub fn redistribute_forward(g: &ModelGraph, donor: NodeId) -> Result<(ModelGraph, UpdateTerm)> {
    let shapes = g.validate()?;
    let node = g.node(donor).ok_or_else(|| Error::Graph(format!("no node {donor}")))?;
    let (new, ups) = normalize_forward(node, donor)?;
    let ups = broadcast(ups, shapes[&donor].channels);
    let mut h = g.clone();
    *h.node_mut(donor).unwrap() = new;
    push_forward(&mut h, &shapes, donor, &ups, donor)?;
    Ok((h, UpdateTerm { upsilon: ups, direction: Direction::Forward, donor }))
}

/// Normalizes `donor` and scales its predecessor receivers (the `x` branch
/// only, for a bivariate donor).
pub fn redistribute_backward(g: &ModelGraph, donor: NodeId) -> Result<(ModelGraph, UpdateTerm)> {
    let shapes = g.validate()?;
    let node = g.node(donor).ok_or_else(|| Error::Graph(format!("no node {donor}")))?;
    let (new, ups) = normalize_backward(node, donor)?;
    let src = g.inputs(donor)[0];
    let ups = broadcast(ups, shapes[&src].channels);
    let mut h = g.clone();
    *h.node_mut(donor).unwrap() = new;
    push_backward(&mut h, donor, src, &ups, donor)?;
    Ok((h, UpdateTerm { upsilon: ups, direction: Direction::Backward, donor }))
}

/// Normalizes every donor in the graph at once.
///
/// Each node gets a per-channel potential `t` with `new_output = old_output / t`.
/// Donors fix their `t` so their leading coefficient becomes 1; kernels
/// (conv, linear) are free and absorb `t_in / t_out`. At an Add both inputs
/// must share `t`; a mismatch is absorbed by the kernel that starts one of
/// the branches. The outcome equals composing forward updates in topological
/// order, with backward updates wherever a forward path has no receiver.
pub fn redistribute_all(g: &ModelGraph) -> Result<(ModelGraph, Vec<Rewrite>)> {
    let shapes = g.validate()?;
    let order = g.topo_order()?;
    let mut t: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    for &id in &order {
        let ins = g.inputs(id);
        let n = shapes[&id].channels;
        let tin = |k: usize, t: &BTreeMap<NodeId, Vec<f64>>| t[&ins[k]].clone();
        let v = match g.node(id).unwrap() {
            Node::Input(_) | Node::Conv(_) | Node::Linear(_) => vec![1.0; n],
            Node::BatchNorm(b) => {
                let ti = tin(0, &t);
                (0..n).map(|c| b.slope(c) * ti[c]).collect()
            }
            Node::PolyAct(p) => {
                let (ti, d) = (tin(0, &t), p.degree());
                (0..n).map(|c| p.row(c)[d] * ti[c].powi(d as i32)).collect()
            }
            Node::PolySkip(p) => {
                let (tx, d, k) = (tin(0, &t), p.degree(), skip_lead_index(p, id)?);
                (0..n).map(|c| p.row(c)[k] * tx[c].powi(d as i32)).collect()
            }
            Node::AvgPool(p) => tin(0, &t).iter().map(|v| v * p.divisor).collect(),
            Node::Add => {
                let (a, b) = (tin(0, &t), tin(1, &t));
                if !close(&a, &b) {
                    let r: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x / y).collect();
                    let rinv: Vec<f64> = r.iter().map(|v| 1.0 / v).collect();
                    if !try_adjust(g, &mut t, ins[1], &r) && !try_adjust(g, &mut t, ins[0], &rinv) {
                        return Err(Error::Redistribution {
                            donor: id,
                            msg: "add branches carry different scales and neither starts at a free kernel".into(),
                        });
                    }
                }
                t[&ins[0]].clone()
            }
            Node::Output => {
                let ti = tin(0, &t);
                if !ti.iter().all(|&v| v == 1.0) {
                    let r: Vec<f64> = ti.iter().map(|v| 1.0 / v).collect();
                    if !try_adjust(g, &mut t, ins[0], &r) {
                        return Err(Error::Redistribution {
                            donor: ins[0],
                            msg: "no kernel between the last donor and the output".into(),
                        });
                    }
                }
                vec![1.0; n]
            }
        };
        nonzero(id, &v)?;
        t.insert(id, v);
    }

    let mut h = g.clone();
    let mut log = Vec::new();
    for &id in &order {
        let ins = g.inputs(id);
        let tout = &t[&id];
        let tin = |k: usize| &t[&ins[k]];
        let changed = |a: &Node, b: &Node| a != b;
        let old = g.node(id).unwrap();
        let new = match old {
            Node::Conv(c) => {
                let (ti, mut c) = (tin(0), c.clone());
                let k = c.kernel_h * c.kernel_w;
                let per = c.in_channels * k;
                for (i, w) in c.weights.iter_mut().enumerate() {
                    *w *= ti[(i / k) % c.in_channels] / tout[i / per];
                }
                for (o, b) in c.bias.iter_mut().enumerate() {
                    *b /= tout[o];
                }
                Node::Conv(c)
            }
            Node::Linear(l) => {
                let (ti, mut l) = (tin(0), l.clone());
                let s = shapes[&ins[0]];
                let hw = s.height * s.width;
                let fin = l.in_features;
                for (i, w) in l.weights.iter_mut().enumerate() {
                    *w *= ti[(i % fin) / hw] / tout[i / fin];
                }
                for (k, b) in l.bias.iter_mut().enumerate() {
                    *b /= tout[k];
                }
                Node::Linear(l)
            }
            Node::BatchNorm(b) => {
                let n = b.channels();
                Node::BatchNorm(BatchNormNode::from_affine(
                    vec![1.0; n],
                    (0..n).map(|c| b.intercept(c) / tout[c]).collect(),
                ))
            }
            Node::PolyAct(p) => {
                let (ti, d) = (tin(0), p.degree());
                Node::PolyAct(PolyActNode {
                    coeffs: map_rows(&p.coeffs, &[ti, tout], |r, c| {
                        let mut r: Vec<f64> =
                            r.iter().enumerate().map(|(i, v)| v * ti[c].powi(i as i32) / tout[c]).collect();
                        r[d] = 1.0;
                        r
                    }),
                })
            }
            Node::PolySkip(p) => {
                let (tx, ty, k) = (tin(0), tin(1), skip_lead_index(p, id)?);
                Node::PolySkip(PolySkipNode {
                    monomials: p.monomials.clone(),
                    coeffs: map_rows(&p.coeffs, &[tx, ty, tout], |r, c| {
                        let mut r: Vec<f64> = r
                            .iter()
                            .zip(&p.monomials)
                            .map(|(v, &(i, j))| v * tx[c].powi(i as i32) * ty[c].powi(j as i32) / tout[c])
                            .collect();
                        r[k] = 1.0;
                        r
                    }),
                })
            }
            Node::AvgPool(p) => Node::AvgPool(crate::graph::AvgPoolNode { window: p.window, divisor: 1.0 }),
            _ => continue,
        };
        if changed(old, &new) {
            let rule = match new.kind() {
                crate::graph::NodeKind::Conv | crate::graph::NodeKind::Linear => "absorb_update",
                _ => "normalize_donor",
            };
            log.push(Rewrite::new(rule, vec![id]));
            *h.node_mut(id).unwrap() = new;
        }
    }
    Ok((h, log))
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()))
}

/// Multiplies the potentials of a single-consumer chain ending at a free
/// kernel by `r`; leaves `t` untouched when no such chain exists.
fn try_adjust(g: &ModelGraph, t: &mut BTreeMap<NodeId, Vec<f64>>, id: NodeId, r: &[f64]) -> bool {
    let mut trial = t.clone();
    if adjust(g, &mut trial, id, r) {
        *t = trial;
        true
    } else {
        false
    }
}

fn adjust(g: &ModelGraph, t: &mut BTreeMap<NodeId, Vec<f64>>, id: NodeId, r: &[f64]) -> bool {
    if g.consumers(id).len() != 1 {
        return false;
    }
    let ins = g.inputs(id);
    let ok = match g.node(id) {
        Some(Node::Conv(_)) | Some(Node::Linear(_)) => true,
        Some(Node::BatchNorm(_)) | Some(Node::AvgPool(_)) => adjust(g, t, ins[0], r),
        Some(Node::Add) => ins[0] != ins[1] && adjust(g, t, ins[0], r) && adjust(g, t, ins[1], r),
        _ => false,
    };
    if ok {
        let v = t.get_mut(&id).unwrap();
        for (x, f) in v.iter_mut().zip(r) {
            *x *= f;
        }
    }
    ok
}
