//! Deformation field for dynamic Gaussians.
//!
//! Control points carry time-varying rigid transforms predicted by
//! [`DeformNet`]. Each dynamic Gaussian is bound, once and in canonical
//! space, to its `k` nearest control points; at query time their transforms
//! are blended with normalized Gaussian RBF weights (linear blend skinning).

mod control;
mod net;

pub use control::{
    farthest_point_sample, init_control_points, knn_neighbors, rbf_weights, ControlPointSet,
};
pub use net::{DeformNet, NetEval};

use nalgebra::{Matrix3, Vector3};
use rand_chacha::ChaCha8Rng;

use crate::config::DeformConfig;
use crate::gaussian::{GaussianGrad, GaussianPrimitive};
use crate::se3::{
    axis_angle_to_raw_backward, dot4, normalize4, normalize4_backward, quat_mul, quat_mul_backward,
    rotation_from_raw, rotation_from_raw_backward,
};
use control::{dist2, rbf_weights_backward};

/// Rigid transform of one control point: rotate about the point, then translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlTransform {
    /// `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl ControlTransform {
    pub const IDENTITY: ControlTransform = ControlTransform {
        rotation: [1.0, 0.0, 0.0, 0.0],
        translation: [0.0; 3],
    };
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TransformGrad {
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

/// Control points, the network and the cached canonical-space bindings.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformField {
    pub points: ControlPointSet,
    pub net: DeformNet,
    /// Neighbor control points of each dynamic Gaussian, nearest first.
    pub bindings: Vec<Vec<usize>>,
    pub knn_k: usize,
}

/// Gradients of the deformation's learnable state.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformGrad {
    pub net: Vec<f64>,
    pub positions: Vec<[f64; 3]>,
    pub log_radii: Vec<f64>,
}

impl DeformGrad {
    pub fn zeros(field: &DeformField) -> Self {
        Self {
            net: vec![0.0; field.net.param_count()],
            positions: vec![[0.0; 3]; field.points.len()],
            log_radii: vec![0.0; field.points.len()],
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.net.iter_mut().for_each(|v| *v *= s);
        self.positions.iter_mut().flatten().for_each(|v| *v *= s);
        self.log_radii.iter_mut().for_each(|v| *v *= s);
    }
}

impl DeformField {
    pub fn new(points: ControlPointSet, cfg: &DeformConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            points,
            net: DeformNet::new(cfg.hidden_width, cfg.position_bands, cfg.time_bands, rng),
            bindings: Vec::new(),
            knn_k: cfg.knn_k,
        }
    }

    /// A field with no control points: the identity deformation.
    pub fn empty(cfg: &DeformConfig, rng: &mut ChaCha8Rng) -> Self {
        Self::new(ControlPointSet::default(), cfg, rng)
    }

    /// Binds each canonical dynamic Gaussian to its nearest control points.
    pub fn bind(&mut self, canonical: &[GaussianPrimitive]) {
        let k = self.knn_k.min(self.points.len());
        self.bindings = canonical
            .iter()
            .map(|g| {
                if k == 0 {
                    Vec::new()
                } else {
                    knn_neighbors(&self.points.positions, &g.mean, k).expect("k <= N")
                }
            })
            .collect();
    }

    pub fn query_all(&self, t: f64) -> Vec<NetEval> {
        self.points
            .positions
            .iter()
            .map(|p| self.net.query(p, t))
            .collect()
    }

    /// Backpropagates per-control-point transform gradients into the network
    /// and the control-point positions.
    pub fn transforms_backward(
        &self,
        evals: &[NetEval],
        grads: &[TransformGrad],
        out: &mut DeformGrad,
    ) {
        for (k, (e, g)) in evals.iter().zip(grads).enumerate() {
            if g.rotation == [0.0; 4] && g.translation == [0.0; 3] {
                continue;
            }
            let g_aa = axis_angle_to_raw_backward(&e.axis_angle, &g.rotation);
            let g_out = [
                g_aa[0],
                g_aa[1],
                g_aa[2],
                g.translation[0],
                g.translation[1],
                g.translation[2],
            ];
            let g_p = self.net.backward(e, &g_out, &mut out.net);
            for c in 0..3 {
                out.positions[k][c] += g_p[c];
            }
        }
    }
}

pub fn transforms_of(evals: &[NetEval]) -> Vec<ControlTransform> {
    evals
        .iter()
        .map(|e| ControlTransform {
            rotation: e.rotation,
            translation: e.translation,
        })
        .collect()
}

/// Equivalent of `Ψ(p_k, t) → (R, T)` for a single control point.
pub fn query_control_transform(net: &DeformNet, p_k: &[f64; 3], t: f64) -> ControlTransform {
    let e = net.query(p_k, t);
    ControlTransform {
        rotation: e.rotation,
        translation: e.translation,
    }
}

/// Linear blend skinning of canonical dynamic Gaussians.
pub fn blend(
    canonical: &[GaussianPrimitive],
    points: &ControlPointSet,
    transforms: &[ControlTransform],
    bindings: &[Vec<usize>],
) -> Vec<GaussianPrimitive> {
    canonical
        .iter()
        .zip(bindings)
        .map(|(g, nb)| blend_one(g, points, transforms, nb))
        .collect()
}

fn blend_one(
    g: &GaussianPrimitive,
    points: &ControlPointSet,
    transforms: &[ControlTransform],
    nb: &[usize],
) -> GaussianPrimitive {
    if nb.is_empty() {
        return *g;
    }
    let w = rbf_weights(points, nb, &g.mean);
    let mu = Vector3::from(g.mean);
    let mut mean = Vector3::zeros();
    let mut q = [0.0; 4];
    let q_first = transforms[nb[0]].rotation;
    for (j, &k) in nb.iter().enumerate() {
        let tr = &transforms[k];
        let p = Vector3::from(points.positions[k]);
        let r = rotation_from_raw(&tr.rotation);
        mean += w[j] * (r * (mu - p) + p + Vector3::from(tr.translation));
        let s = align_sign(&tr.rotation, &q_first);
        for c in 0..4 {
            q[c] += w[j] * s * tr.rotation[c];
        }
    }
    let mut out = *g;
    out.mean = mean.into();
    out.rot = quat_mul(&normalize4(&q), &g.rot);
    out
}

#[inline]
fn align_sign(q: &[f64; 4], reference: &[f64; 4]) -> f64 {
    if dot4(q, reference) < 0.0 {
        -1.0
    } else {
        1.0
    }
}

pub struct BlendGrad {
    pub canonical: Vec<GaussianGrad>,
    pub transforms: Vec<TransformGrad>,
    pub positions: Vec<[f64; 3]>,
    pub log_radii: Vec<f64>,
}

pub fn blend_backward(
    canonical: &[GaussianPrimitive],
    points: &ControlPointSet,
    transforms: &[ControlTransform],
    bindings: &[Vec<usize>],
    grads: &[GaussianGrad],
) -> BlendGrad {
    let n = points.len();
    let mut out = BlendGrad {
        canonical: grads.to_vec(),
        transforms: vec![TransformGrad::default(); transforms.len()],
        positions: vec![[0.0; 3]; n],
        log_radii: vec![0.0; n],
    };
    for (gi, (g, nb)) in canonical.iter().zip(bindings).enumerate() {
        if nb.is_empty() {
            continue;
        }
        let gd = grads[gi];
        let w = rbf_weights(points, nb, &g.mean);
        let mu = Vector3::from(g.mean);
        let g_mean_out = Vector3::from(gd.mean);
        let q_first = transforms[nb[0]].rotation;

        let mut q = [0.0; 4];
        for (j, &k) in nb.iter().enumerate() {
            let s = align_sign(&transforms[k].rotation, &q_first);
            for c in 0..4 {
                q[c] += w[j] * s * transforms[k].rotation[c];
            }
        }
        let (g_qhat, g_rot) = quat_mul_backward(&normalize4(&q), &g.rot, &gd.rot);
        let g_q = normalize4_backward(&q, &g_qhat);

        let mut g_w = vec![0.0; nb.len()];
        let mut g_mu = Vector3::zeros();
        for (j, &k) in nb.iter().enumerate() {
            let tr = &transforms[k];
            let p = Vector3::from(points.positions[k]);
            let r = rotation_from_raw(&tr.rotation);
            let rel = mu - p;
            let rt_g = r.transpose() * g_mean_out;
            g_mu += w[j] * rt_g;
            let tg = &mut out.transforms[k];
            for c in 0..3 {
                tg.translation[c] += w[j] * g_mean_out[c];
            }
            let g_r: Matrix3<f64> = w[j] * g_mean_out * rel.transpose();
            let gq_r = rotation_from_raw_backward(&tr.rotation, &g_r);
            let s = align_sign(&tr.rotation, &q_first);
            for c in 0..4 {
                tg.rotation[c] += gq_r[c] + w[j] * s * g_q[c];
            }
            let gp = w[j] * (g_mean_out - rt_g);
            for c in 0..3 {
                out.positions[k][c] += gp[c];
            }
            g_w[j] = g_mean_out.dot(&(r * rel + p + Vector3::from(tr.translation)))
                + s * dot4(&tr.rotation, &g_q);
        }
        let rg = rbf_weights_backward(points, nb, &g.mean, &g_w);
        for (j, &k) in nb.iter().enumerate() {
            for c in 0..3 {
                out.positions[k][c] += rg.positions[j][c];
            }
            out.log_radii[k] += rg.log_radii[j];
        }
        let cg = &mut out.canonical[gi];
        for c in 0..3 {
            cg.mean[c] = g_mu[c] + rg.query[c];
        }
        cg.rot = g_rot;
    }
    out
}

/// Dynamic Gaussians deformed to time `t`, with the network evaluations kept
/// for backprop.
#[derive(Debug, Clone)]
pub struct Deformed {
    pub t: f64,
    pub gaussians: Vec<GaussianPrimitive>,
    pub evals: Vec<NetEval>,
}

pub fn deform_gaussians(canonical: &[GaussianPrimitive], field: &DeformField, t: f64) -> Deformed {
    let evals = field.query_all(t);
    let transforms = transforms_of(&evals);
    let gaussians = blend(canonical, &field.points, &transforms, &field.bindings);
    Deformed {
        t,
        gaussians,
        evals,
    }
}

/// Chains gradients of the deformed Gaussians back to the canonical ones
/// (returned) and to the field (accumulated into `out`).
pub fn deform_gaussians_backward(
    canonical: &[GaussianPrimitive],
    field: &DeformField,
    deformed: &Deformed,
    grads: &[GaussianGrad],
    out: &mut DeformGrad,
) -> Vec<GaussianGrad> {
    let transforms = transforms_of(&deformed.evals);
    let bg = blend_backward(
        canonical,
        &field.points,
        &transforms,
        &field.bindings,
        grads,
    );
    for k in 0..field.points.len() {
        for c in 0..3 {
            out.positions[k][c] += bg.positions[k][c];
        }
        out.log_radii[k] += bg.log_radii[k];
    }
    field.transforms_backward(&deformed.evals, &bg.transforms, out);
    bg.canonical
}

/// Undirected edges of the control-point KNN graph (self excluded).
pub fn knn_edges(positions: &[[f64; 3]], k: usize) -> Vec<(usize, usize)> {
    let n = positions.len();
    if n < 2 {
        return Vec::new();
    }
    let kk = k.min(n - 1);
    let mut edges = std::collections::BTreeSet::new();
    for (i, p) in positions.iter().enumerate() {
        let nb = knn_neighbors(positions, p, kk + 1).expect("k+1 <= n");
        for j in nb.into_iter().filter(|&j| j != i).take(kk) {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    edges.into_iter().collect()
}

/// As-rigid-as-possible penalty on control-graph edge lengths:
/// `Σ_edges | ‖x_i − x_j‖ − ‖p_i − p_j‖ |` with `x = p + T`.
/// Returns the loss and gradients for positions and translations.
pub fn arap_terms(
    positions: &[[f64; 3]],
    translations: &[[f64; 3]],
    k: usize,
) -> (f64, Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let n = positions.len();
    let mut g_p = vec![[0.0; 3]; n];
    let mut g_t = vec![[0.0; 3]; n];
    let mut loss = 0.0;
    let x: Vec<[f64; 3]> = positions
        .iter()
        .zip(translations)
        .map(|(p, t)| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
        .collect();
    for (i, j) in knn_edges(positions, k) {
        let lx = dist2(&x[i], &x[j]).sqrt();
        let lp = dist2(&positions[i], &positions[j]).sqrt();
        let d = lx - lp;
        loss += d.abs();
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        if s == 0.0 {
            continue;
        }
        for c in 0..3 {
            let ux = if lx > 0.0 {
                (x[i][c] - x[j][c]) / lx
            } else {
                0.0
            };
            let up = if lp > 0.0 {
                (positions[i][c] - positions[j][c]) / lp
            } else {
                0.0
            };
            g_t[i][c] += s * ux;
            g_t[j][c] -= s * ux;
            g_p[i][c] += s * (ux - up);
            g_p[j][c] -= s * (ux - up);
        }
    }
    (loss, g_p, g_t)
}

/// ARAP loss of the field at time `t`; gradients accumulate into `out`
/// scaled by `weight`.
pub fn arap_loss(field: &DeformField, t: f64, weight: f64, out: Option<&mut DeformGrad>) -> f64 {
    if field.points.len() < 2 {
        return 0.0;
    }
    let evals = field.query_all(t);
    let translations: Vec<[f64; 3]> = evals.iter().map(|e| e.translation).collect();
    let (loss, g_p, g_t) = arap_terms(&field.points.positions, &translations, field.knn_k);
    if let Some(out) = out {
        let tg: Vec<TransformGrad> = g_t
            .iter()
            .map(|t| TransformGrad {
                rotation: [0.0; 4],
                translation: t.map(|v| v * weight),
            })
            .collect();
        for k in 0..field.points.len() {
            for c in 0..3 {
                out.positions[k][c] += weight * g_p[k][c];
            }
        }
        field.transforms_backward(&evals, &tg, out);
    }
    loss
}

#[cfg(test)]
mod tests;
