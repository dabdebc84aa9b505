use std::collections::BTreeMap;

use super::{ConvNode, ModelGraph, Node, NodeId, TensorShape};
use crate::error::{Error, Result};

/// Dense CHW tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: TensorShape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: TensorShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!("{} values for shape {:?}", data.len(), shape)));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: TensorShape) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    #[inline]
    pub fn at(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[(c * self.shape.height + h) * self.shape.width + w]
    }

    #[inline]
    fn at_mut(&mut self, c: usize, h: usize, w: usize) -> &mut f64 {
        let i = (c * self.shape.height + h) * self.shape.width + w;
        &mut self.data[i]
    }

    fn map(&self, mut f: impl FnMut(usize, f64) -> f64) -> Tensor {
        let hw = self.shape.height * self.shape.width;
        let data = self.data.iter().enumerate().map(|(i, &v)| f(i / hw, v)).collect();
        Tensor { shape: self.shape, data }
    }
}

/// Plaintext forward pass; returns the flattened value reaching Output.
pub fn reference_eval(g: &ModelGraph, input: &Tensor) -> Result<Vec<f64>> {
    let all = reference_eval_all(g, input)?;
    let out = g.output_id()?;
    Ok(all[&out].data.clone())
}

/// Forward pass returning every node's output.
pub fn reference_eval_all(g: &ModelGraph, input: &Tensor) -> Result<BTreeMap<NodeId, Tensor>> {
    g.validate()?;
    let mut vals: BTreeMap<NodeId, Tensor> = BTreeMap::new();
    for id in g.topo_order()? {
        let ins: Vec<&Tensor> = g.inputs(id).iter().map(|i| &vals[i]).collect();
        let out = match g.node(id).unwrap() {
            Node::Input(s) => {
                if input.shape != *s {
                    return Err(Error::Shape(format!("input {:?} does not match graph input {:?}", input.shape, s)));
                }
                input.clone()
            }
            Node::Output => ins[0].clone(),
            Node::Conv(c) => conv2d(c, ins[0]),
            Node::BatchNorm(b) => {
                let (s, o) = (b.slopes(), b.intercepts());
                ins[0].map(|c, v| s[c] * v + o[c])
            }
            Node::PolyAct(p) => ins[0].map(|c, v| p.eval(c, v)),
            Node::PolySkip(p) => {
                let y = ins[1];
                let mut k = 0;
                ins[0].map(|c, v| {
                    let r = p.eval(c, v, y.data[k]);
                    k += 1;
                    r
                })
            }
            Node::Add => {
                let y = ins[1];
                let mut k = 0;
                ins[0].map(|_, v| {
                    let r = v + y.data[k];
                    k += 1;
                    r
                })
            }
            Node::AvgPool(p) => {
                let x = ins[0];
                let s = TensorShape::new(x.shape.channels, x.shape.height / p.window, x.shape.width / p.window);
                let mut out = Tensor::zeros(s);
                for c in 0..s.channels {
                    for i in 0..s.height {
                        for j in 0..s.width {
                            let mut acc = 0.0;
                            for a in 0..p.window {
                                for b in 0..p.window {
                                    acc += x.at(c, i * p.window + a, j * p.window + b);
                                }
                            }
                            *out.at_mut(c, i, j) = p.divisor * acc;
                        }
                    }
                }
                out
            }
            Node::Linear(l) => {
                let x = &ins[0].data;
                let data = (0..l.out_features)
                    .map(|k| {
                        let row = &l.weights[k * l.in_features..(k + 1) * l.in_features];
                        row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + l.bias[k]
                    })
                    .collect();
                Tensor { shape: TensorShape::new(l.out_features, 1, 1), data }
            }
        };
        vals.insert(id, out);
    }
    Ok(vals)
}

fn conv2d(c: &ConvNode, x: &Tensor) -> Tensor {
    let (oh, ow) = c.out_hw(x.shape.height, x.shape.width).expect("validated");
    let mut out = Tensor::zeros(TensorShape::new(c.out_channels, oh, ow));
    let (h, w) = (x.shape.height as isize, x.shape.width as isize);
    for o in 0..c.out_channels {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = c.bias[o];
                for ci in 0..c.in_channels {
                    for kh in 0..c.kernel_h {
                        let r = (i * c.stride + kh) as isize - c.padding as isize;
                        if r < 0 || r >= h {
                            continue;
                        }
                        for kw in 0..c.kernel_w {
                            let s = (j * c.stride + kw) as isize - c.padding as isize;
                            if s < 0 || s >= w {
                                continue;
                            }
                            acc += c.weight(o, ci, kh, kw) * x.at(ci, r as usize, s as usize);
                        }
                    }
                }
                *out.at_mut(o, i, j) = acc;
            }
        }
    }
    out
}
