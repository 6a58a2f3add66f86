//! Gaussian primitives and the static/dynamic map that owns them.

use nalgebra::{Matrix3, Vector3};

use crate::se3::{normalize4, rotation_from_raw};

/// One anisotropic 3D Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: [f64; 3],
    /// `[w, x, y, z]`, renormalized after every optimizer step.
    pub rot: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub color: [f64; 3],
    pub dynamic: bool,
    pub birth_frame: usize,
}

impl GaussianPrimitive {
    pub fn isotropic(mean: [f64; 3], scale: f64, opacity: f64, color: [f64; 3]) -> Self {
        Self {
            mean,
            rot: [1.0, 0.0, 0.0, 0.0],
            log_scale: [scale.ln(); 3],
            opacity_logit: logit(opacity),
            color,
            dynamic: false,
            birth_frame: 0,
        }
    }

    pub fn mean_vec(&self) -> Vector3<f64> {
        Vector3::from(self.mean)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> [f64; 3] {
        self.log_scale.map(f64::exp)
    }

    pub fn normalize_rotation(&mut self) {
        self.rot = normalize4(&self.rot);
    }
}

/// `Σ = R · diag(exp(2·log_scale)) · Rᵀ`.
pub fn covariance_from_params(g: &GaussianPrimitive) -> Matrix3<f64> {
    let r = rotation_from_raw(&g.rot);
    let s = g.scales();
    let m = r * Matrix3::from_diagonal(&Vector3::from(s));
    m * m.transpose()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Gradient of a scalar with respect to one primitive's parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: [f64; 3],
    pub rot: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

impl GaussianGrad {
    pub fn add_assign(&mut self, o: &GaussianGrad) {
        for i in 0..3 {
            self.mean[i] += o.mean[i];
            self.log_scale[i] += o.log_scale[i];
            self.color[i] += o.color[i];
        }
        for i in 0..4 {
            self.rot[i] += o.rot[i];
        }
        self.opacity_logit += o.opacity_logit;
    }
}

/// Number of scalar parameters per primitive in the flat layout.
pub const PARAMS_PER_GAUSSIAN: usize = 14;

/// Flat parameter views used by finite-difference checks and the optimizer.
pub fn get_param(g: &GaussianPrimitive, i: usize) -> f64 {
    match i {
        0..=2 => g.mean[i],
        3..=6 => g.rot[i - 3],
        7..=9 => g.log_scale[i - 7],
        10 => g.opacity_logit,
        11..=13 => g.color[i - 11],
        _ => panic!("parameter index {i} out of range"),
    }
}

pub fn set_param(g: &mut GaussianPrimitive, i: usize, v: f64) {
    match i {
        0..=2 => g.mean[i] = v,
        3..=6 => g.rot[i - 3] = v,
        7..=9 => g.log_scale[i - 7] = v,
        10 => g.opacity_logit = v,
        11..=13 => g.color[i - 11] = v,
        _ => panic!("parameter index {i} out of range"),
    }
}

pub fn get_grad(g: &GaussianGrad, i: usize) -> f64 {
    match i {
        0..=2 => g.mean[i],
        3..=6 => g.rot[i - 3],
        7..=9 => g.log_scale[i - 7],
        10 => g.opacity_logit,
        11..=13 => g.color[i - 11],
        _ => panic!("parameter index {i} out of range"),
    }
}

/// A list of primitives with stable ids that survive densification and pruning.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<GaussianPrimitive>,
    pub ids: Vec<u64>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn push(&mut self, g: GaussianPrimitive, id: u64) {
        self.gaussians.push(g);
        self.ids.push(id);
    }

    /// Keeps the entries for which `keep` is true; returns how many were removed.
    pub fn retain_indices(&mut self, keep: &[bool]) -> usize {
        let before = self.len();
        let mut k = keep.iter();
        self.gaussians.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.ids.retain(|_| *k.next().unwrap());
        before - self.len()
    }
}

/// Static part of the map. Tracking only ever sees this type.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StaticMap(pub GaussianSet);

impl StaticMap {
    pub fn gaussians(&self) -> &[GaussianPrimitive] {
        &self.0.gaussians
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Static primitives plus the canonical-space dynamic ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianMap {
    pub statics: StaticMap,
    pub dynamics: GaussianSet,
    pub next_id: u64,
}

impl GaussianMap {
    pub fn add_static(&mut self, mut g: GaussianPrimitive) {
        g.dynamic = false;
        let id = self.alloc_id();
        self.statics.0.push(g, id);
    }

    pub fn add_dynamic(&mut self, mut g: GaussianPrimitive) {
        g.dynamic = true;
        let id = self.alloc_id();
        self.dynamics.push(g, id);
    }

    fn alloc_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn len(&self) -> usize {
        self.statics.len() + self.dynamics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &GaussianPrimitive> {
        self.statics
            .gaussians()
            .iter()
            .chain(self.dynamics.gaussians.iter())
    }
}
