//! Neutral JSON model format.
//!
//! Structural parameters are inline; every real-valued parameter block lives
//! in `weights` as base64 of little-endian `f64`s, referenced by `weight_ref`.
//! Block layouts: conv = weights then bias; batchnorm = gamma, beta, mean,
//! std; polyact = rows of c_0..c_d; polyskip = rows with one value per
//! listed monomial; avgpool = [divisor]; linear = weights then bias.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{
    AvgPoolNode, Tensor, BatchNormNode, ConvNode, LinearNode, ModelGraph, Node, NodeId, NodeKind, PolyActNode,
    PolySkipNode, TensorShape,
};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    nodes: Vec<NodeRecord>,
    edges: Vec<[NodeId; 2]>,
    #[serde(default)]
    weights: BTreeMap<String, String>,
}

#[derive(Default, Serialize, Deserialize)]
struct NodeRecord {
    id: NodeId,
    kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    degree: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    monomials: Option<Vec<[u32; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_ref: Option<String>,
}

fn encode_f64s(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode_f64s(s: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD.decode(s).map_err(|e| Error::Parse(format!("bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse("weight block length is not a multiple of 8".into()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn to_json_string(g: &ModelGraph) -> String {
    let mut weights = BTreeMap::new();
    let mut nodes = Vec::new();
    for (id, node) in g.nodes() {
        let mut r = NodeRecord { id, kind: node.kind(), ..Default::default() };
        let block: Option<Vec<f64>> = match node {
            Node::Input(s) => {
                r.shape = Some([s.channels, s.height, s.width]);
                None
            }
            Node::Conv(c) => {
                r.out_channels = Some(c.out_channels);
                r.in_channels = Some(c.in_channels);
                r.kernel = Some([c.kernel_h, c.kernel_w]);
                r.stride = Some(c.stride);
                r.padding = Some(c.padding);
                Some(c.weights.iter().chain(&c.bias).copied().collect())
            }
            Node::BatchNorm(b) => {
                r.channels = Some(b.channels());
                Some([&b.gamma, &b.beta, &b.mean, &b.std].iter().flat_map(|v| v.iter().copied()).collect())
            }
            Node::PolyAct(p) => {
                r.degree = Some(p.degree());
                r.channels = Some(p.coeffs.len());
                Some(p.coeffs.concat())
            }
            Node::PolySkip(p) => {
                r.monomials = Some(p.monomials.iter().map(|&(i, j)| [i, j]).collect());
                r.channels = Some(p.coeffs.len());
                Some(p.coeffs.concat())
            }
            Node::AvgPool(p) => {
                r.window = Some(p.window);
                Some(vec![p.divisor])
            }
            Node::Linear(l) => {
                r.out_features = Some(l.out_features);
                r.in_features = Some(l.in_features);
                Some(l.weights.iter().chain(&l.bias).copied().collect())
            }
            Node::Add | Node::Output => None,
        };
        if let Some(b) = block {
            let key = format!("n{id}");
            weights.insert(key.clone(), encode_f64s(&b));
            r.weight_ref = Some(key);
        }
        nodes.push(r);
    }
    let file = ModelFile {
        version: FORMAT_VERSION,
        nodes,
        edges: g.edges().iter().map(|&(s, d)| [s, d]).collect(),
        weights,
    };
    serde_json::to_string_pretty(&file).expect("model serialization cannot fail")
}

pub fn from_json_str(text: &str) -> Result<ModelGraph> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if file.version != FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported format version {}", file.version)));
    }
    let mut g = ModelGraph::new();
    for r in &file.nodes {
        let node = build_node(r, &file.weights)?;
        if g.insert(r.id, node).is_some() {
            return Err(Error::Parse(format!("duplicate node id {}", r.id)));
        }
    }
    for [s, d] in &file.edges {
        g.connect(*s, *d);
    }
    g.validate()?;
    Ok(g)
}

fn build_node(r: &NodeRecord, weights: &BTreeMap<String, String>) -> Result<Node> {
    let id = r.id;
    let need = |v: Option<usize>, name: &str| v.ok_or_else(|| Error::node(id, format!("missing field `{name}`")));
    let block = |len: usize| -> Result<Vec<f64>> {
        let key = r.weight_ref.as_ref().ok_or_else(|| Error::node(id, "missing weight_ref"))?;
        let enc = weights.get(key).ok_or_else(|| Error::node(id, format!("weight_ref `{key}` not found")))?;
        let v = decode_f64s(enc)?;
        if v.len() != len {
            return Err(Error::node(id, format!("weight block has {} values, expected {len}", v.len())));
        }
        Ok(v)
    };
    Ok(match r.kind {
        NodeKind::Input => {
            let [c, h, w] = r.shape.ok_or_else(|| Error::node(id, "missing field `shape`"))?;
            Node::Input(TensorShape::new(c, h, w))
        }
        NodeKind::Output => Node::Output,
        NodeKind::Add => Node::Add,
        NodeKind::Conv => {
            let o = need(r.out_channels, "out_channels")?;
            let i = need(r.in_channels, "in_channels")?;
            let [kh, kw] = r.kernel.ok_or_else(|| Error::node(id, "missing field `kernel`"))?;
            let n = o * i * kh * kw;
            let mut v = block(n + o)?;
            let bias = v.split_off(n);
            Node::Conv(ConvNode {
                out_channels: o,
                in_channels: i,
                kernel_h: kh,
                kernel_w: kw,
                weights: v,
                bias,
                stride: need(r.stride, "stride")?,
                padding: need(r.padding, "padding")?,
            })
        }
        NodeKind::BatchNorm => {
            let n = need(r.channels, "channels")?;
            let v = block(4 * n)?;
            Node::BatchNorm(BatchNormNode {
                gamma: v[..n].to_vec(),
                beta: v[n..2 * n].to_vec(),
                mean: v[2 * n..3 * n].to_vec(),
                std: v[3 * n..].to_vec(),
            })
        }
        NodeKind::PolyAct => {
            let d = need(r.degree, "degree")?;
            let rows = r.channels.unwrap_or(1);
            let v = block(rows * (d + 1))?;
            Node::PolyAct(PolyActNode { coeffs: v.chunks(d + 1).map(<[f64]>::to_vec).collect() })
        }
        NodeKind::PolySkip => {
            let mons = r.monomials.as_ref().ok_or_else(|| Error::node(id, "missing field `monomials`"))?;
            if mons.is_empty() {
                return Err(Error::node(id, "empty monomial list"));
            }
            let rows = r.channels.unwrap_or(1);
            let v = block(rows * mons.len())?;
            Node::PolySkip(PolySkipNode {
                monomials: mons.iter().map(|&[i, j]| (i, j)).collect(),
                coeffs: v.chunks(mons.len()).map(<[f64]>::to_vec).collect(),
            })
        }
        NodeKind::AvgPool => {
            let window = need(r.window, "window")?;
            Node::AvgPool(AvgPoolNode { window, divisor: block(1)?[0] })
        }
        NodeKind::Linear => {
            let o = need(r.out_features, "out_features")?;
            let i = need(r.in_features, "in_features")?;
            let mut v = block(o * i + o)?;
            let bias = v.split_off(o * i);
            Node::Linear(LinearNode { out_features: o, in_features: i, weights: v, bias })
        }
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    from_json_str(&std::fs::read_to_string(path)?)
}

pub fn save_model(g: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_json_string(g))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    dtype: String,
    shape: [usize; 3],
}

/// One JSON header line `{"dtype":"<f8","shape":[c,h,w]}`, then the values
/// as raw little-endian `f64`s in channel-major order.
pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let s = t.shape;
    let head = TensorHeader { dtype: "<f8".into(), shape: [s.channels, s.height, s.width] };
    let mut out = serde_json::to_vec(&head).expect("header serializes");
    out.push(b'\n');
    out.extend(t.data.iter().flat_map(|x| x.to_le_bytes()));
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Parse("tensor header has no newline".into()))?;
    let head: TensorHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Parse(format!("tensor header: {e}")))?;
    if head.dtype != "<f8" {
        return Err(Error::Parse(format!("unsupported dtype {}", head.dtype)));
    }
    let [c, h, w] = head.shape;
    let body = &bytes[nl + 1..];
    if body.len() != 8 * c * h * w {
        return Err(Error::Parse(format!("expected {} bytes of data, found {}", 8 * c * h * w, body.len())));
    }
    let data = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    Tensor::new(TensorShape::new(c, h, w), data)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    tensor_from_bytes(&std::fs::read(path)?)
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_bytes_round_trip() {
        let t = Tensor::new(TensorShape::new(2, 1, 2), vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0]).unwrap();
        let b = tensor_to_bytes(&t);
        assert!(b.starts_with(br#"{"dtype":"<f8","shape":[2,1,2]}"#));
        let back = tensor_from_bytes(&b).unwrap();
        assert_eq!(back.shape, t.shape);
        assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(tensor_from_bytes(&b[..b.len() - 1]).is_err());
    }

    const MINIMAL: &str = r#"{
      "version": 1,
      "nodes": [
        {"id": 0, "kind": "input", "shape": [1, 1, 2]},
        {"id": 1, "kind": "linear", "out_features": 1, "in_features": 2, "weight_ref": "w"},
        {"id": 2, "kind": "output"}
      ],
      "edges": [[0, 1], [1, 2]],
      "weights": {"w": "AAAAAAAA8D8AAAAAAAAAQAAAAAAAAOA/"}
    }"#;

    #[test]
    fn minimal_file_loads() {
        let g = from_json_str(MINIMAL).unwrap();
        assert_eq!(g.len(), 3);
        match g.node(1).unwrap() {
            Node::Linear(l) => {
                assert_eq!(l.weights, vec![1.0, 2.0]);
                assert_eq!(l.bias, vec![0.5]);
            }
            _ => panic!("expected linear"),
        }
    }

    #[test]
    fn missing_ref_is_error() {
        let bad = MINIMAL.replace("\"weight_ref\": \"w\"", "\"weight_ref\": \"nope\"");
        assert!(from_json_str(&bad).is_err());
    }

    #[test]
    fn base64_round_trip_keeps_bits() {
        let v = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e308, -3.5e-300];
        let back = decode_f64s(&encode_f64s(&v)).unwrap();
        let bits: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
        let back_bits: Vec<u64> = back.iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, back_bits);
    }
}
