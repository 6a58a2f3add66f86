use nalgebra::Vector3;

use crate::camera::{backproject_camera, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::image::{DepthImage, Mask};
use crate::se3::PoseSE3;

/// Sparse learnable motion proxies in canonical space.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControlPointSet {
    pub positions: Vec<[f64; 3]>,
    /// Gaussian RBF radii, stored as logs.
    pub log_radii: Vec<f64>,
}

const DEFAULT_RADIUS: f64 = 0.05;

impl ControlPointSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn radius(&self, k: usize) -> f64 {
        self.log_radii[k].exp()
    }
}

/// Backprojects the pixels flagged in `dynamic` (true = moving) and keeps a
/// farthest-point sample of `target_count` of them. Radii start at the mean
/// nearest-neighbor distance of the sample.
pub fn init_control_points(
    depth: &DepthImage,
    dynamic: &Mask,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    target_count: usize,
) -> ControlPointSet {
    let cam_to_world = pose.inverse();
    let mut candidates: Vec<Vector3<f64>> = Vec::new();
    for y in 0..dynamic.height {
        for x in 0..dynamic.width {
            let d = depth.get(x, y);
            if dynamic.get(x, y) && d > 0.0 {
                candidates
                    .push(cam_to_world.transform(&backproject_camera(x as f64, y as f64, d, k)));
            }
        }
    }
    let chosen = farthest_point_sample(&candidates, target_count);
    let positions: Vec<[f64; 3]> = chosen.iter().map(|&i| candidates[i].into()).collect();
    let radius = mean_nearest_neighbor_distance(&positions).unwrap_or(DEFAULT_RADIUS);
    ControlPointSet {
        log_radii: vec![radius.max(1e-4).ln(); positions.len()],
        positions,
    }
}

/// Greedy farthest-point sampling seeded with the first point.
pub fn farthest_point_sample(points: &[Vector3<f64>], count: usize) -> Vec<usize> {
    if points.len() <= count {
        return (0..points.len()).collect();
    }
    let mut chosen = Vec::with_capacity(count);
    let mut dist = vec![f64::INFINITY; points.len()];
    let mut next = 0;
    for _ in 0..count {
        chosen.push(next);
        let p = points[next];
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, q) in points.iter().enumerate() {
            let d = (q - p).norm_squared();
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best.0 {
                best = (dist[i], i);
            }
        }
        next = best.1;
    }
    chosen
}

fn mean_nearest_neighbor_distance(points: &[[f64; 3]]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let total: f64 = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| dist2(p, q))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    Some(total / points.len() as f64)
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// The `k` nearest control points to `query`, nearest first; ties go to the
/// lower index.
pub fn knn_neighbors(points: &[[f64; 3]], query: &[f64; 3], k: usize) -> Result<Vec<usize>> {
    if k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {} available control points",
            points.len()
        )));
    }
    let mut idx: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(p, query), i))
        .collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(idx.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Normalized Gaussian RBF weights `∝ exp(−‖q − p_k‖² / 2σ_k²)`. Falls back to
/// uniform weights when every raw weight underflows.
pub fn rbf_weights(points: &ControlPointSet, neighbors: &[usize], query: &[f64; 3]) -> Vec<f64> {
    rbf_raw(points, neighbors, query).1
}

/// Returns `(raw, normalized, underflowed)`.
fn rbf_raw(
    points: &ControlPointSet,
    neighbors: &[usize],
    query: &[f64; 3],
) -> (Vec<f64>, Vec<f64>, bool) {
    let raw: Vec<f64> = neighbors
        .iter()
        .map(|&k| {
            let s = points.radius(k);
            (-dist2(query, &points.positions[k]) / (2.0 * s * s)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    if !(sum > 1e-300) || !sum.is_finite() {
        let n = neighbors.len().max(1) as f64;
        return (raw, vec![1.0 / n; neighbors.len()], true);
    }
    let w = raw.iter().map(|r| r / sum).collect();
    (raw, w, false)
}

/// Gradients of the weights' downstream loss with respect to the query,
/// each neighbor position and each neighbor log-radius.
pub(crate) struct RbfGrad {
    pub query: [f64; 3],
    pub positions: Vec<[f64; 3]>,
    pub log_radii: Vec<f64>,
}

pub(crate) fn rbf_weights_backward(
    points: &ControlPointSet,
    neighbors: &[usize],
    query: &[f64; 3],
    g_w: &[f64],
) -> RbfGrad {
    let n = neighbors.len();
    let mut out = RbfGrad {
        query: [0.0; 3],
        positions: vec![[0.0; 3]; n],
        log_radii: vec![0.0; n],
    };
    let (raw, w, underflow) = rbf_raw(points, neighbors, query);
    if underflow {
        return out;
    }
    let sum: f64 = raw.iter().sum();
    let gw_dot_w: f64 = g_w.iter().zip(&w).map(|(a, b)| a * b).sum();
    for (j, &k) in neighbors.iter().enumerate() {
        let g_raw = (g_w[j] - gw_dot_w) / sum;
        let s = points.radius(k);
        let p = &points.positions[k];
        let d = [query[0] - p[0], query[1] - p[1], query[2] - p[2]];
        let inv_s2 = 1.0 / (s * s);
        let ge = g_raw * raw[j];
        for c in 0..3 {
            out.query[c] -= ge * d[c] * inv_s2;
            out.positions[j][c] += ge * d[c] * inv_s2;
        }
        out.log_radii[j] = ge * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) * inv_s2;
    }
    out
}
