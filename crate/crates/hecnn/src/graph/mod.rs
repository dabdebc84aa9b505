//! Typed CNN computation graph.
//!
//! Nodes are kept in an id-indexed map and edges as an ordered list of
//! `(producer, consumer)` pairs. The order of a node's incoming edges is
//! significant for `PolySkip`, whose first input is the `x` branch.

mod eval;
mod io;
mod resnet;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use eval::{reference_eval, reference_eval_all, Tensor};
pub use io::{
    from_json_str, load_model, load_tensor, save_model, save_tensor, tensor_from_bytes, tensor_to_bytes, to_json_string,
};
pub use resnet::{build_resnet_graph, build_resnet_with, ActKind, ResNetConfig, Variant};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Weights are laid out `[out][in][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNode {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvNode {
    #[inline]
    pub fn index(&self, o: usize, i: usize, h: usize, w: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel_h + h) * self.kernel_w + w
    }

    pub fn weight(&self, o: usize, i: usize, h: usize, w: usize) -> f64 {
        self.weights[self.index(o, i, h, w)]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w || self.stride == 0 {
            return None;
        }
        Some(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }
}

/// Raw batch-norm statistics. The affine form `b1 x + b0` is always derived.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormNode {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BatchNormNode {
    /// Canonical statistics for a given affine map: `gamma = b1`, `std = 1`,
    /// `mean = 0`, `beta = b0`, so that the derived slope and intercept are
    /// exactly `b1` and `b0`.
    pub fn from_affine(b1: Vec<f64>, b0: Vec<f64>) -> Self {
        let n = b1.len();
        Self { gamma: b1, beta: b0, mean: vec![0.0; n], std: vec![1.0; n] }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn slope(&self, c: usize) -> f64 {
        self.gamma[c] / self.std[c]
    }

    pub fn intercept(&self, c: usize) -> f64 {
        self.beta[c] - self.slope(c) * self.mean[c]
    }

    pub fn slopes(&self) -> Vec<f64> {
        (0..self.channels()).map(|c| self.slope(c)).collect()
    }

    pub fn intercepts(&self) -> Vec<f64> {
        (0..self.channels()).map(|c| self.intercept(c)).collect()
    }

    pub fn is_unit_slope(&self) -> bool {
        (0..self.channels()).all(|c| self.slope(c) == 1.0)
    }
}

/// Univariate activation `sum c_i x^i`, applied coordinate-wise.
///
/// `coeffs` holds one row `c_0..c_d` per channel, or a single row shared by
/// all channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyActNode {
    pub coeffs: Vec<Vec<f64>>,
}

impl PolyActNode {
    pub fn shared(coeffs: Vec<f64>) -> Self {
        Self { coeffs: vec![coeffs] }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.first().map_or(0, |r| r.len().saturating_sub(1))
    }

    pub fn row(&self, c: usize) -> &[f64] {
        if self.coeffs.len() == 1 {
            &self.coeffs[0]
        } else {
            &self.coeffs[c]
        }
    }

    pub fn is_monic(&self) -> bool {
        self.coeffs.iter().all(|r| r.last() == Some(&1.0))
    }

    pub fn eval(&self, c: usize, x: f64) -> f64 {
        horner(self.row(c), x)
    }
}

pub fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Bivariate activation `sum c_ij x^i y^j`; `x` is the first input.
///
/// `coeffs[ch][m]` is the coefficient of `monomials[m]` on channel `ch`
/// (a single row is shared by all channels).
#[derive(Clone, Debug, PartialEq)]
pub struct PolySkipNode {
    pub monomials: Vec<(u32, u32)>,
    pub coeffs: Vec<Vec<f64>>,
}

impl PolySkipNode {
    /// Order of the six quadratic monomials produced by skip fusing.
    pub const QUADRATIC: [(u32, u32); 6] = [(2, 0), (0, 2), (1, 1), (1, 0), (0, 1), (0, 0)];

    pub fn degree(&self) -> usize {
        self.monomials.iter().map(|&(i, j)| (i + j) as usize).max().unwrap_or(0)
    }

    pub fn row(&self, c: usize) -> &[f64] {
        if self.coeffs.len() == 1 {
            &self.coeffs[0]
        } else {
            &self.coeffs[c]
        }
    }

    pub fn position(&self, i: u32, j: u32) -> Option<usize> {
        self.monomials.iter().position(|&m| m == (i, j))
    }

    pub fn coeff(&self, c: usize, i: u32, j: u32) -> f64 {
        self.position(i, j).map_or(0.0, |k| self.row(c)[k])
    }

    /// Leading coefficients `c_{d0}` per row.
    pub fn leading(&self) -> Vec<f64> {
        let d = self.degree() as u32;
        match self.position(d, 0) {
            Some(k) => self.coeffs.iter().map(|r| r[k]).collect(),
            None => vec![0.0; self.coeffs.len()],
        }
    }

    pub fn is_monic(&self) -> bool {
        self.leading().iter().all(|&v| v == 1.0)
    }

    pub fn eval(&self, c: usize, x: f64, y: f64) -> f64 {
        self.monomials
            .iter()
            .zip(self.row(c))
            .map(|(&(i, j), &k)| k * x.powi(i as i32) * y.powi(j as i32))
            .sum()
    }
}

/// Non-overlapping `window x window` average pooling; `divisor` multiplies
/// the window sum (normally `1/k` with `k = window^2`).
#[derive(Clone, Debug, PartialEq)]
pub struct AvgPoolNode {
    pub window: usize,
    pub divisor: f64,
}

impl AvgPoolNode {
    pub fn new(window: usize) -> Self {
        Self { window, divisor: 1.0 / (window * window) as f64 }
    }

    /// Number of elements summed per output.
    pub fn kernel_size(&self) -> usize {
        self.window * self.window
    }
}

/// Row-major `out_features x in_features` matrix plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearNode {
    pub out_features: usize,
    pub in_features: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Input(TensorShape),
    Conv(ConvNode),
    BatchNorm(BatchNormNode),
    PolyAct(PolyActNode),
    PolySkip(PolySkipNode),
    AvgPool(AvgPoolNode),
    Add,
    Linear(LinearNode),
    Output,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    #[default]
    Input,
    Conv,
    BatchNorm,
    PolyAct,
    PolySkip,
    AvgPool,
    Add,
    Linear,
    Output,
}

impl NodeKind {
    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Conv => "conv",
            NodeKind::BatchNorm => "batchnorm",
            NodeKind::PolyAct => "polyact",
            NodeKind::PolySkip => "polyskip",
            NodeKind::AvgPool => "avgpool",
            NodeKind::Add => "add",
            NodeKind::Linear => "linear",
            NodeKind::Output => "output",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            NodeKind::Input => 0,
            NodeKind::PolySkip | NodeKind::Add => 2,
            _ => 1,
        }
    }
}

impl Node {
    pub fn kind(&self) -> NodeKind {
        match self {
            Node::Input(_) => NodeKind::Input,
            Node::Conv(_) => NodeKind::Conv,
            Node::BatchNorm(_) => NodeKind::BatchNorm,
            Node::PolyAct(_) => NodeKind::PolyAct,
            Node::PolySkip(_) => NodeKind::PolySkip,
            Node::AvgPool(_) => NodeKind::AvgPool,
            Node::Add => NodeKind::Add,
            Node::Linear(_) => NodeKind::Linear,
            Node::Output => NodeKind::Output,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelGraph {
    nodes: BTreeMap<NodeId, Node>,
    edges: Vec<(NodeId, NodeId)>,
}

impl ModelGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a node under the next free id.
    pub fn add(&mut self, node: Node) -> NodeId {
        let id = self.nodes.keys().next_back().map_or(0, |k| k + 1);
        self.nodes.insert(id, node);
        id
    }

    pub fn insert(&mut self, id: NodeId, node: Node) -> Option<Node> {
        self.nodes.insert(id, node)
    }

    pub fn connect(&mut self, src: NodeId, dst: NodeId) {
        self.edges.push((src, dst));
    }

    /// Adds `node` fed by `inputs` in order.
    pub fn push(&mut self, node: Node, inputs: &[NodeId]) -> NodeId {
        let id = self.add(node);
        for &src in inputs {
            self.connect(src, id);
        }
        id
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut Node> {
        self.nodes.get_mut(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &Node)> {
        self.nodes.iter().map(|(&k, v)| (k, v))
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Producers of `id`, in edge order.
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.edges.iter().filter(|e| e.1 == id).map(|e| e.0).collect()
    }

    /// Consumers of `id`, in edge order (repeated if connected twice).
    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        self.edges.iter().filter(|e| e.0 == id).map(|e| e.1).collect()
    }

    pub fn count_kind(&self, kind: NodeKind) -> usize {
        self.nodes.values().filter(|n| n.kind() == kind).count()
    }

    pub fn ids_of_kind(&self, kind: NodeKind) -> Vec<NodeId> {
        self.nodes.iter().filter(|(_, n)| n.kind() == kind).map(|(&k, _)| k).collect()
    }

    pub fn input_id(&self) -> Result<NodeId> {
        self.single_of(NodeKind::Input)
    }

    pub fn output_id(&self) -> Result<NodeId> {
        self.single_of(NodeKind::Output)
    }

    fn single_of(&self, kind: NodeKind) -> Result<NodeId> {
        let ids = self.ids_of_kind(kind);
        match ids.as_slice() {
            [id] => Ok(*id),
            _ => Err(Error::Graph(format!("expected exactly one {} node, found {}", kind.name(), ids.len()))),
        }
    }

    /// Removes a node and every edge touching it.
    pub fn remove(&mut self, id: NodeId) -> Option<Node> {
        self.edges.retain(|e| e.0 != id && e.1 != id);
        self.nodes.remove(&id)
    }

    /// Redirects every edge leaving `from` so that it leaves `to` instead,
    /// keeping the consumer's input position.
    pub fn redirect_outputs(&mut self, from: NodeId, to: NodeId) {
        for e in &mut self.edges {
            if e.0 == from {
                e.0 = to;
            }
        }
    }

    /// Replaces the producer of the edge `(old_src, dst)` by `new_src` in place.
    pub fn replace_input(&mut self, dst: NodeId, old_src: NodeId, new_src: NodeId) {
        if let Some(e) = self.edges.iter_mut().find(|e| e.0 == old_src && e.1 == dst) {
            e.0 = new_src;
        }
    }

    /// Kahn order; ties broken by smallest id for determinism.
    pub fn topo_order(&self) -> Result<Vec<NodeId>> {
        let mut indeg: BTreeMap<NodeId, usize> = self.nodes.keys().map(|&k| (k, 0)).collect();
        for &(s, d) in &self.edges {
            if !self.nodes.contains_key(&s) || !self.nodes.contains_key(&d) {
                return Err(Error::Graph(format!("edge [{s}, {d}] references a missing node")));
            }
            *indeg.get_mut(&d).unwrap() += 1;
        }
        let mut ready: BTreeSet<NodeId> = indeg.iter().filter(|(_, &v)| v == 0).map(|(&k, _)| k).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(&n) = ready.iter().next() {
            ready.remove(&n);
            order.push(n);
            for &(s, d) in &self.edges {
                if s == n {
                    let v = indeg.get_mut(&d).unwrap();
                    *v -= 1;
                    if *v == 0 {
                        ready.insert(d);
                    }
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(Error::Graph("graph contains a cycle".into()));
        }
        Ok(order)
    }

    /// Checks every structural invariant and returns the output shape of each node.
    pub fn validate(&self) -> Result<BTreeMap<NodeId, TensorShape>> {
        self.input_id()?;
        self.output_id()?;
        let order = self.topo_order()?;
        let mut shapes = BTreeMap::new();
        for id in order {
            let node = &self.nodes[&id];
            let ins = self.inputs(id);
            let kind = node.kind();
            if ins.len() != kind.arity() {
                return Err(Error::node(id, format!("{} expects {} inputs, has {}", kind.name(), kind.arity(), ins.len())));
            }
            if kind == NodeKind::Output && !self.consumers(id).is_empty() {
                return Err(Error::node(id, "output node has consumers"));
            }
            let in_shapes: Vec<TensorShape> = ins.iter().map(|i| shapes[i]).collect();
            let shape = node_shape(id, node, &in_shapes)?;
            shapes.insert(id, shape);
        }
        Ok(shapes)
    }

    /// Nodes on some Input-to-Output path.
    pub fn live_nodes(&self) -> Result<BTreeSet<NodeId>> {
        let input = self.input_id()?;
        let output = self.output_id()?;
        let fwd = self.reach(input, true);
        let bwd = self.reach(output, false);
        Ok(fwd.intersection(&bwd).copied().collect())
    }

    fn reach(&self, start: NodeId, forward: bool) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            for &(s, d) in &self.edges {
                let next = if forward && s == n {
                    d
                } else if !forward && d == n {
                    s
                } else {
                    continue;
                };
                if seen.insert(next) {
                    queue.push_back(next);
                }
            }
        }
        seen
    }

    /// Longest Input-to-Output path by node count, as a list of ids.
    pub fn critical_path(&self) -> Result<Vec<NodeId>> {
        self.longest_path(|_| 1)
    }

    /// Longest Input-to-Output path under a per-node weight; ties resolve to
    /// the smallest predecessor id.
    pub fn longest_path(&self, weight: impl Fn(&Node) -> u64) -> Result<Vec<NodeId>> {
        let order = self.topo_order()?;
        let input = self.input_id()?;
        let output = self.output_id()?;
        let mut best: BTreeMap<NodeId, (u64, Option<NodeId>)> = BTreeMap::new();
        for id in order {
            let w = weight(&self.nodes[&id]);
            if id == input {
                best.insert(id, (w, None));
                continue;
            }
            let pred = self
                .inputs(id)
                .into_iter()
                .filter_map(|p| best.get(&p).map(|b| (b.0, p)))
                .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
            if let Some((v, p)) = pred {
                best.insert(id, (v + w, Some(p)));
            }
        }
        let mut path = Vec::new();
        let mut cur = Some(output);
        while let Some(c) = cur {
            let entry = best.get(&c).ok_or_else(|| Error::Graph("output unreachable from input".into()))?;
            path.push(c);
            cur = entry.1;
        }
        path.reverse();
        Ok(path)
    }

    /// Node-kind multiset.
    pub fn kind_counts(&self) -> BTreeMap<NodeKind, usize> {
        let mut m = BTreeMap::new();
        for n in self.nodes.values() {
            *m.entry(n.kind()).or_insert(0) += 1;
        }
        m
    }
}

fn node_shape(id: NodeId, node: &Node, ins: &[TensorShape]) -> Result<TensorShape> {
    let mismatch = |msg: String| Error::node(id, msg);
    Ok(match node {
        Node::Input(s) => {
            if s.channels == 0 || s.height == 0 || s.width == 0 {
                return Err(mismatch("input dimensions must be >= 1".into()));
            }
            *s
        }
        Node::Output => ins[0],
        Node::Conv(c) => {
            let s = ins[0];
            if c.kernel_h == 0 || c.kernel_w == 0 || c.out_channels == 0 || c.stride == 0 {
                return Err(mismatch("kernel dims and stride must be >= 1".into()));
            }
            if c.weights.len() != c.out_channels * c.in_channels * c.kernel_h * c.kernel_w {
                return Err(mismatch("weight tensor length does not match dimensions".into()));
            }
            if c.bias.len() != c.out_channels {
                return Err(mismatch(format!("bias length {} != out channels {}", c.bias.len(), c.out_channels)));
            }
            if s.channels != c.in_channels {
                return Err(mismatch(format!("conv expects {} input channels, got {}", c.in_channels, s.channels)));
            }
            let (h, w) = c.out_hw(s.height, s.width).ok_or_else(|| mismatch("kernel larger than padded input".into()))?;
            TensorShape::new(c.out_channels, h, w)
        }
        Node::BatchNorm(b) => {
            let s = ins[0];
            let n = b.channels();
            if b.beta.len() != n || b.mean.len() != n || b.std.len() != n {
                return Err(mismatch("batchnorm parameter lengths differ".into()));
            }
            if n != s.channels {
                return Err(mismatch(format!("batchnorm has {} channels, input has {}", n, s.channels)));
            }
            if let Some(c) = b.std.iter().position(|&v| !(v > 0.0)) {
                return Err(mismatch(format!("batchnorm std must be > 0 (channel {c} has {})", b.std[c])));
            }
            s
        }
        Node::PolyAct(p) => {
            let rows = p.coeffs.len();
            if rows != 1 && rows != ins[0].channels {
                return Err(mismatch(format!("{rows} coefficient rows for {} channels", ins[0].channels)));
            }
            if p.degree() < 1 || p.coeffs.iter().any(|r| r.len() != p.degree() + 1) {
                return Err(mismatch("activation degree must be >= 1 and equal across rows".into()));
            }
            ins[0]
        }
        Node::PolySkip(p) => {
            let rows = p.coeffs.len();
            if rows != 1 && rows != ins[0].channels {
                return Err(mismatch(format!("{rows} coefficient rows for {} channels", ins[0].channels)));
            }
            if p.monomials.is_empty() || p.coeffs.iter().any(|r| r.len() != p.monomials.len()) {
                return Err(mismatch("polyskip rows must match its monomial list".into()));
            }
            if ins[0] != ins[1] {
                return Err(mismatch(format!("polyskip inputs differ: {:?} vs {:?}", ins[0], ins[1])));
            }
            ins[0]
        }
        Node::Add => {
            if ins[0] != ins[1] {
                return Err(mismatch(format!("add inputs differ: {:?} vs {:?}", ins[0], ins[1])));
            }
            ins[0]
        }
        Node::AvgPool(p) => {
            let s = ins[0];
            if p.window == 0 || !(p.divisor > 0.0) {
                return Err(mismatch("pool window must be >= 1 and divisor > 0".into()));
            }
            if s.height % p.window != 0 || s.width % p.window != 0 {
                return Err(mismatch(format!("pool window {} does not tile {}x{}", p.window, s.height, s.width)));
            }
            TensorShape::new(s.channels, s.height / p.window, s.width / p.window)
        }
        Node::Linear(l) => {
            let s = ins[0];
            if l.weights.len() != l.out_features * l.in_features || l.bias.len() != l.out_features {
                return Err(mismatch("linear parameter lengths do not match dimensions".into()));
            }
            if s.len() != l.in_features {
                return Err(mismatch(format!("linear expects {} inputs, got {}", l.in_features, s.len())));
            }
            TensorShape::new(l.out_features, 1, 1)
        }
    })
}
