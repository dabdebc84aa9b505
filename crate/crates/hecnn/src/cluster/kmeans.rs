use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Lloyd iteration cap.
pub const MAX_ITERS: usize = 300;
/// Independent k-means++ restarts; the lowest distortion wins.
pub const RESTARTS: usize = 10;

/// Result of one clustering problem.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub distortion: f64,
    /// Distortion after each Lloyd iteration of the winning restart.
    pub history: Vec<f64>,
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
pub fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    points.iter().map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<HashSet<_>>().len()
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha20Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap();
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[idx].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeans {
    let dim = points[0].len();
    let k = centroids.len();
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut history = Vec::new();
    for _ in 0..MAX_ITERS {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        // Empty clusters move to the point farthest from its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .max_by(|&i, &j| {
                        let di = sq_dist(&points[i], &centroids[assignments[i]]);
                        let dj = sq_dist(&points[j], &centroids[assignments[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
                counts[assignments[far]] -= 1;
                assignments[far] = c;
                counts[c] = 1;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let distortion = points.iter().zip(&next).map(|(p, &a)| sq_dist(p, &centroids[a])).sum();
        history.push(distortion);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let distortion = *history.last().unwrap();
    KMeans { centroids, assignments, distortion, history }
}

/// k-means++ seeded Lloyd's algorithm under squared l2 distance.
///
/// `k` larger than the number of distinct points shrinks to that number.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Invalid("k must be >= 1".into()));
    }
    let Some(first) = points.first() else {
        return Err(Error::Invalid("no points to cluster".into()));
    };
    if first.is_empty() || points.iter().any(|p| p.len() != first.len()) {
        return Err(Error::Invalid("points must share a nonzero dimension".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("clustering input".into()));
    }
    let k = k.min(distinct_count(points));
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..RESTARTS {
        let run = lloyd(points, seed_plus_plus(points, k, &mut rng));
        if best.as_ref().map_or(true, |b| run.distortion < b.distortion) {
            best = Some(run);
        }
        if k == 1 {
            break;
        }
    }
    Ok(best.unwrap())
}
