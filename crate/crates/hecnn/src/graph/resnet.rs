//! Random-weight ResNet-shaped graphs.
//!
//! Basic blocks compute `act(bn2(conv2(act(bn1(conv1(x))))) + shortcut(x))`
//! where the shortcut is the identity or a strided 1x1 conv followed by
//! batch norm. Add inputs are ordered main branch first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{AvgPoolNode, BatchNormNode, ConvNode, LinearNode, ModelGraph, Node, NodeId, PolyActNode, TensorShape};
use crate::poly::fit_relu_poly;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Rn18,
    Rn20,
    Rn32,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Rn18, Variant::Rn20, Variant::Rn32];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Rn18 => "rn18",
            Variant::Rn20 => "rn20",
            Variant::Rn32 => "rn32",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s.to_ascii_lowercase())
    }

    /// Basic blocks per stage.
    pub fn stages(self) -> &'static [usize] {
        match self {
            Variant::Rn18 => &[2, 2, 2, 2],
            Variant::Rn20 => &[3, 3, 3],
            Variant::Rn32 => &[5, 5, 5],
        }
    }

    /// Convolutions on the longest path: the stem plus two per block.
    pub fn depth_convs(self) -> usize {
        1 + 2 * self.stages().iter().sum::<usize>()
    }

    pub fn default_input_hw(self) -> usize {
        match self {
            Variant::Rn18 => 16,
            _ => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActKind {
    /// Fitted ReLU approximation on `[-2, 2]` with 10 fractional bits.
    Relu { degree: usize },
    Custom(Vec<f64>),
}

impl ActKind {
    pub fn coeffs(&self) -> Vec<f64> {
        match self {
            ActKind::Relu { degree } => fit_relu_poly(*degree, 2.0, 10).expect("valid fit parameters").0.real_coeffs(),
            ActKind::Custom(c) => c.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub variant: Variant,
    pub act: ActKind,
    pub base_width: usize,
    pub input_hw: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub seed: u64,
}

impl ResNetConfig {
    pub fn new(variant: Variant, act: ActKind) -> Self {
        Self { variant, act, base_width: 4, input_hw: variant.default_input_hw(), in_channels: 3, classes: 10, seed: 0 }
    }
}

pub fn build_resnet_graph(variant: Variant, act: ActKind) -> ModelGraph {
    build_resnet_with(&ResNetConfig::new(variant, act))
}

struct Builder {
    g: ModelGraph,
    rng: ChaCha20Rng,
    act: Vec<f64>,
}

impl Builder {
    fn conv(&mut self, src: NodeId, cin: usize, cout: usize, k: usize, stride: usize) -> NodeId {
        let fan_in = (cin * k * k) as f64;
        let a = (3.0 / fan_in).sqrt();
        let weights = (0..cout * cin * k * k).map(|_| self.rng.gen_range(-a..a)).collect();
        let bias = (0..cout).map(|_| self.rng.gen_range(-0.05..0.05)).collect();
        let node = ConvNode {
            out_channels: cout,
            in_channels: cin,
            kernel_h: k,
            kernel_w: k,
            weights,
            bias,
            stride,
            padding: k / 2,
        };
        self.g.push(Node::Conv(node), &[src])
    }

    fn bn(&mut self, src: NodeId, n: usize) -> NodeId {
        self.bn_scaled(src, n, 1.0)
    }

    /// `gain` shrinks gamma; residual branches use a small gain so that
    /// deep stacks of quadratic activations stay bounded.
    fn bn_scaled(&mut self, src: NodeId, n: usize, gain: f64) -> NodeId {
        let r = &mut self.rng;
        let bn = BatchNormNode {
            gamma: (0..n).map(|_| gain * r.gen_range(0.8..1.2)).collect(),
            beta: (0..n).map(|_| r.gen_range(-0.1..0.1)).collect(),
            mean: (0..n).map(|_| r.gen_range(-0.1..0.1)).collect(),
            std: (0..n).map(|_| r.gen_range(0.8..1.2)).collect(),
        };
        self.g.push(Node::BatchNorm(bn), &[src])
    }

    fn act(&mut self, src: NodeId) -> NodeId {
        let coeffs = self.act.clone();
        self.g.push(Node::PolyAct(PolyActNode::shared(coeffs)), &[src])
    }
}

const RESIDUAL_GAIN: f64 = 0.3;

pub fn build_resnet_with(cfg: &ResNetConfig) -> ModelGraph {
    let mut b = Builder { g: ModelGraph::new(), rng: ChaCha20Rng::seed_from_u64(cfg.seed), act: cfg.act.coeffs() };
    let mut hw = cfg.input_hw;
    let input = b.g.push(Node::Input(TensorShape::new(cfg.in_channels, hw, hw)), &[]);
    let w0 = cfg.base_width;
    let c = b.conv(input, cfg.in_channels, w0, 3, 1);
    let n = b.bn(c, w0);
    let mut x = b.act(n);
    let mut ch = w0;
    for (s, &blocks) in cfg.variant.stages().iter().enumerate() {
        let out = w0 << s;
        for blk in 0..blocks {
            let stride = if s > 0 && blk == 0 { 2 } else { 1 };
            let c1 = b.conv(x, ch, out, 3, stride);
            let n1 = b.bn(c1, out);
            let a1 = b.act(n1);
            let c2 = b.conv(a1, out, out, 3, 1);
            let n2 = b.bn_scaled(c2, out, RESIDUAL_GAIN);
            let short = if stride != 1 || ch != out {
                let cs = b.conv(x, ch, out, 1, stride);
                b.bn(cs, out)
            } else {
                x
            };
            let sum = b.g.push(Node::Add, &[n2, short]);
            x = b.act(sum);
            ch = out;
            hw = hw.div_ceil(stride);
        }
    }
    let pool = b.g.push(Node::AvgPool(AvgPoolNode::new(hw)), &[x]);
    let a = (3.0 / ch as f64).sqrt();
    let lin = LinearNode {
        out_features: cfg.classes,
        in_features: ch,
        weights: (0..cfg.classes * ch).map(|_| b.rng.gen_range(-a..a)).collect(),
        bias: (0..cfg.classes).map(|_| b.rng.gen_range(-0.1..0.1)).collect(),
    };
    let l = b.g.push(Node::Linear(lin), &[pool]);
    b.g.push(Node::Output, &[l]);
    b.g
}
