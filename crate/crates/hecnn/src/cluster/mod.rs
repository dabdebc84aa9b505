//! Codebook quantization of convolution weights.
//!
//! A slice of a conv layer is every weight at one kernel column: the
//! weights that can share a plaintext encoding in the HW layout.

mod kmeans;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConvNode, ModelGraph, Node, NodeId, NodeKind};

pub use kmeans::{kmeans, nearest, sq_dist, KMeans, MAX_ITERS, RESTARTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SliceKey {
    pub layer: NodeId,
    /// Kernel column, zero based.
    pub column: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Scope {
    Global,
    Slice { layer: NodeId, column: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    /// Centroids in `R^M`.
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub scope: Scope,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMode {
    Full,
    Slice,
    Ensemble,
}

impl ClusterMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Some(Self::Full),
            "slice" => Some(Self::Slice),
            "ensemble" => Some(Self::Ensemble),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub key: SliceKey,
    pub points: usize,
    pub codebook_size: usize,
    /// Distinct centroids used in the slice.
    pub encodings: usize,
    pub distortion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub mode: ClusterMode,
    pub k: usize,
    pub models: usize,
    pub distortion: f64,
    /// Plaintext encodings required: distinct centroids summed over slices.
    pub encodings: usize,
    /// Encodings if each member were clustered alone: `sum min(k^M, points)`.
    pub independent_bound: usize,
    pub slices: Vec<SliceReport>,
    pub codebooks: Vec<Codebook>,
}

impl ClusterReport {
    pub fn max_slice_encodings(&self) -> usize {
        self.slices.iter().map(|s| s.encodings).max().unwrap_or(0)
    }
}

/// Seed for one slice, independent of the order slices are processed in.
pub fn slice_seed(seed: u64, layer: NodeId, column: usize) -> u64 {
    let mut z = seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (column as u64).rotate_left(32);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn convs(g: &ModelGraph) -> Vec<(NodeId, &ConvNode)> {
    g.ids_of_kind(NodeKind::Conv)
        .into_iter()
        .map(|id| match g.node(id) {
            Some(Node::Conv(c)) => (id, c),
            _ => unreachable!(),
        })
        .collect()
}

/// Weight indices of each slice, in `(o, i, h)` order.
fn slices(c: &ConvNode) -> Vec<Vec<usize>> {
    (0..c.kernel_w)
        .map(|s| {
            let mut idx = Vec::with_capacity(c.out_channels * c.in_channels * c.kernel_h);
            for o in 0..c.out_channels {
                for i in 0..c.in_channels {
                    for h in 0..c.kernel_h {
                        idx.push(c.index(o, i, h, s));
                    }
                }
            }
            idx
        })
        .collect()
}

fn conv_mut(g: &mut ModelGraph, id: NodeId) -> &mut ConvNode {
    match g.node_mut(id) {
        Some(Node::Conv(c)) => c,
        _ => unreachable!(),
    }
}

fn require_convs(g: &ModelGraph) -> Result<()> {
    if g.count_kind(NodeKind::Conv) == 0 {
        return Err(Error::Invalid("graph has no convolution to cluster".into()));
    }
    Ok(())
}

fn slice_report(key: SliceKey, points: &[Vec<f64>], cb: &[Vec<f64>], assign: &[usize]) -> SliceReport {
    let used: BTreeSet<usize> = assign.iter().copied().collect();
    SliceReport {
        key,
        points: points.len(),
        codebook_size: cb.len(),
        encodings: used.len(),
        distortion: points.iter().zip(assign).map(|(p, &a)| sq_dist(p, &cb[a])).sum(),
    }
}

/// One global codebook over every conv weight.
pub fn full_cluster(g: &ModelGraph, k: usize, seed: u64) -> Result<(ModelGraph, ClusterReport)> {
    require_convs(g)?;
    let layers = convs(g);
    let points: Vec<Vec<f64>> = layers.iter().flat_map(|(_, c)| c.weights.iter().map(|&w| vec![w])).collect();
    let km = kmeans(&points, k, seed)?;
    let mut out = g.clone();
    let mut reports = Vec::new();
    let mut offset = 0;
    for (id, c) in &layers {
        let n = c.weights.len();
        let assign = &km.assignments[offset..offset + n];
        let conv = conv_mut(&mut out, *id);
        for (w, &a) in conv.weights.iter_mut().zip(assign) {
            *w = km.centroids[a][0];
        }
        for (s, idx) in slices(c).into_iter().enumerate() {
            let pts: Vec<Vec<f64>> = idx.iter().map(|&i| vec![c.weights[i]]).collect();
            let asg: Vec<usize> = idx.iter().map(|&i| assign[i]).collect();
            reports.push(slice_report(SliceKey { layer: *id, column: s }, &pts, &km.centroids, &asg));
        }
        offset += n;
    }
    let independent_bound = reports.iter().map(|r| r.points.min(k)).sum();
    let report = ClusterReport {
        mode: ClusterMode::Full,
        k,
        models: 1,
        distortion: km.distortion,
        encodings: reports.iter().map(|r| r.encodings).sum(),
        independent_bound,
        slices: reports,
        codebooks: vec![Codebook { centroids: km.centroids, assignments: km.assignments, scope: Scope::Global }],
    };
    Ok((out, report))
}

/// An independent codebook per slice.
pub fn slice_cluster(g: &ModelGraph, k: usize, seed: u64) -> Result<(ModelGraph, ClusterReport)> {
    let (mut gs, mut report) = ensemble_slice_cluster(std::slice::from_ref(g), k, seed)?;
    report.mode = ClusterMode::Slice;
    Ok((gs.pop().unwrap(), report))
}

/// Shared per-slice codebooks in `R^M` across `M` models: row `j` of a slice
/// holds weight `j` of every member.
pub fn ensemble_slice_cluster(models: &[ModelGraph], k: usize, seed: u64) -> Result<(Vec<ModelGraph>, ClusterReport)> {
    let Some(base) = models.first() else {
        return Err(Error::Invalid("no models to cluster".into()));
    };
    require_convs(base)?;
    let layers = convs(base);
    let member_convs: Vec<Vec<(NodeId, &ConvNode)>> = models.iter().map(convs).collect();
    for (m, mc) in member_convs.iter().enumerate() {
        let same = mc.len() == layers.len()
            && mc.iter().zip(&layers).all(|((a, x), (b, y))| {
                a == b
                    && (x.out_channels, x.in_channels, x.kernel_h, x.kernel_w)
                        == (y.out_channels, y.in_channels, y.kernel_h, y.kernel_w)
            });
        if !same || models[m].edges() != base.edges() {
            return Err(Error::Graph(format!("model {m} differs in topology from model 0")));
        }
    }
    let mm = models.len();
    let mut outs: Vec<ModelGraph> = models.to_vec();
    let mut reports = Vec::new();
    let mut codebooks = Vec::new();
    for (li, (id, c)) in layers.iter().enumerate() {
        for (s, idx) in slices(c).into_iter().enumerate() {
            let points: Vec<Vec<f64>> =
                idx.iter().map(|&i| member_convs.iter().map(|mc| mc[li].1.weights[i]).collect()).collect();
            let km = kmeans(&points, k, slice_seed(seed, *id, s))?;
            for (m, out) in outs.iter_mut().enumerate() {
                let conv = conv_mut(out, *id);
                for (&i, &a) in idx.iter().zip(&km.assignments) {
                    conv.weights[i] = km.centroids[a][m];
                }
            }
            let key = SliceKey { layer: *id, column: s };
            reports.push(slice_report(key, &points, &km.centroids, &km.assignments));
            codebooks.push(Codebook {
                centroids: km.centroids,
                assignments: km.assignments,
                scope: Scope::Slice { layer: *id, column: s },
            });
        }
    }
    let kk = (k as u128).saturating_pow(mm as u32);
    let independent_bound = reports.iter().map(|r| (r.points as u128).min(kk) as usize).sum();
    let report = ClusterReport {
        mode: ClusterMode::Ensemble,
        k,
        models: mm,
        distortion: reports.iter().map(|r| r.distortion).sum(),
        encodings: reports.iter().map(|r| r.encodings).sum(),
        independent_bound,
        slices: reports,
        codebooks,
    };
    Ok((outs, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_resnet_graph, ActKind, TensorShape, Variant};

    fn tiny(seed: u64) -> ModelGraph {
        let mut g = ModelGraph::new();
        let i = g.push(Node::Input(TensorShape::new(1, 4, 4)), &[]);
        let mut prev = i;
        for (l, (cin, cout)) in [(1, 2), (2, 1)].into_iter().enumerate() {
            let n = cout * cin * 9;
            let weights = (0..n).map(|j| ((j as u64 * 13 + l as u64 * 5 + seed) as f64 * 0.77).sin()).collect();
            let c = ConvNode {
                out_channels: cout,
                in_channels: cin,
                kernel_h: 3,
                kernel_w: 3,
                weights,
                bias: vec![0.5; cout],
                stride: 1,
                padding: 1,
            };
            prev = g.push(Node::Conv(c), &[prev]);
        }
        g.push(Node::Output, &[prev]);
        g
    }

    fn weights(g: &ModelGraph) -> Vec<f64> {
        convs(g).iter().flat_map(|(_, c)| c.weights.clone()).collect()
    }

    #[test]
    fn three_codebooks_per_layer() {
        let (q, r) = slice_cluster(&tiny(0), 2, 1).unwrap();
        assert_eq!(r.slices.len(), 6);
        assert!(r.slices.iter().all(|s| s.encodings <= 2));
        assert_eq!(r.codebooks.len(), 6);
        for (id, c) in convs(&q) {
            assert_eq!(c.bias, vec![0.5; c.out_channels], "{id}");
        }
    }

    #[test]
    fn k_one_collapses_to_slice_means() {
        let g = tiny(3);
        let (q, r) = slice_cluster(&g, 1, 0).unwrap();
        let mut want = 0.0;
        for ((_, c), (_, d)) in convs(&g).iter().zip(convs(&q)) {
            for idx in slices(c) {
                let mean = idx.iter().map(|&i| c.weights[i]).sum::<f64>() / idx.len() as f64;
                want += idx.iter().map(|&i| (c.weights[i] - mean).powi(2)).sum::<f64>();
                assert!(idx.iter().all(|&i| (d.weights[i] - mean).abs() < 1e-12));
            }
        }
        assert!((r.distortion - want).abs() < 1e-9);
    }

    #[test]
    fn large_k_leaves_model_unchanged() {
        let g = tiny(1);
        let (q, r) = full_cluster(&g, 1000, 0).unwrap();
        assert_eq!(weights(&q), weights(&g));
        assert_eq!(r.distortion, 0.0);
        assert!(r.encodings <= r.independent_bound);
    }

    #[test]
    fn slice_codebooks_beat_global_per_slice() {
        let g = tiny(2);
        let (_, full) = full_cluster(&g, 3, 5).unwrap();
        let (_, slice) = slice_cluster(&g, 3, 5).unwrap();
        for (a, b) in slice.slices.iter().zip(&full.slices) {
            assert_eq!(a.key, b.key);
            assert!(a.distortion <= b.distortion + 1e-12);
        }
    }

    #[test]
    fn single_member_ensemble_is_slice_mode() {
        let g = tiny(4);
        let (a, ra) = slice_cluster(&g, 3, 9).unwrap();
        let (b, rb) = ensemble_slice_cluster(std::slice::from_ref(&g), 3, 9).unwrap();
        assert_eq!(weights(&a).iter().map(|w| w.to_bits()).collect::<Vec<_>>(), weights(&b[0]).iter().map(|w| w.to_bits()).collect::<Vec<_>>());
        assert_eq!(ra.codebooks, rb.codebooks);
    }

    #[test]
    fn identical_members_get_diagonal_centroids() {
        let g = tiny(5);
        let (qs, r) = ensemble_slice_cluster(&[g.clone(), g], 2, 3).unwrap();
        assert_eq!(qs[0], qs[1]);
        assert!(r.codebooks.iter().flat_map(|c| &c.centroids).all(|c| c[0] == c[1]));
        assert!(r.max_slice_encodings() <= 2);
    }

    #[test]
    fn topology_mismatch_is_rejected() {
        let a = build_resnet_graph(Variant::Rn20, ActKind::Relu { degree: 2 });
        assert!(ensemble_slice_cluster(&[a, tiny(0)], 2, 0).is_err());
        let mut g = ModelGraph::new();
        let i = g.push(Node::Input(TensorShape::new(1, 2, 2)), &[]);
        g.push(Node::Output, &[i]);
        assert!(full_cluster(&g, 2, 0).is_err());
    }

    #[test]
    fn seeds_differ_per_slice() {
        assert_ne!(slice_seed(1, 2, 0), slice_seed(1, 2, 1));
        assert_ne!(slice_seed(1, 2, 0), slice_seed(1, 3, 0));
        assert_eq!(slice_seed(7, 4, 2), slice_seed(7, 4, 2));
    }
}
