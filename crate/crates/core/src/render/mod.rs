//! Differentiable CPU splatting renderer.
//!
//! Forward: each Gaussian is projected with the EWA approximation, then
//! color, depth, opacity and (optionally) flow are alpha-composited front to
//! back with one shared transmittance product. Backward: analytic adjoints
//! for every Gaussian parameter, the camera pose (left-multiplicative twist)
//! and per-splat flow displacements.

mod flow;
mod project;
mod raster;

use nalgebra::Matrix2;

pub use flow::{render_flow_pair, render_flow_pair_backward, FlowPairRender};
pub use project::{
    project_gaussian_backward, project_gaussian_ewa, project_mean_backward, Culled,
    COV2D_REGULARIZATION,
};
pub use raster::{SplatGrad, TILE_SIZE};

use crate::camera::CameraIntrinsics;
use crate::gaussian::{GaussianGrad, GaussianPrimitive};
use crate::image::{DepthImage, FlowImage, RgbImage};
use crate::se3::{PoseSE3, Twist};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub flow: bool,
    /// Compositing stops once transmittance drops below this.
    pub termination_transmittance: f64,
    /// Record a hash of every per-pixel contributor sequence.
    pub track_signature: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            flow: false,
            termination_transmittance: 1e-4,
            track_signature: false,
        }
    }
}

impl RenderSettings {
    pub fn with_flow(mut self) -> Self {
        self.flow = true;
        self
    }
}

/// A Gaussian after projection into one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: [f64; 2],
    pub cov2d: Matrix2<f64>,
    /// Camera-frame z of the mean.
    pub depth: f64,
    pub base_opacity: f64,
    pub color: [f64; 3],
    pub flow_dx: Option<[f64; 2]>,
    pub source_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: RgbImage,
    pub depth: DepthImage,
    pub opacity: DepthImage,
    pub flow: Option<FlowImage>,
    /// Largest alpha each input splat reached at any pixel, indexed like the
    /// composited list.
    pub max_alpha: Vec<f64>,
    pub signature: Option<u64>,
}

/// Per-pixel adjoints of a scalar loss with respect to each output channel.
#[derive(Debug, Clone, Default)]
pub struct PixelAdjoint {
    pub color: Option<RgbImage>,
    pub depth: Option<DepthImage>,
    pub opacity: Option<DepthImage>,
    pub flow: Option<FlowImage>,
}

impl PixelAdjoint {
    pub fn add_assign(&mut self, other: &PixelAdjoint) {
        fn add<P: Copy>(
            a: &mut Option<crate::image::Image<P>>,
            b: &Option<crate::image::Image<P>>,
            f: impl Fn(P, P) -> P,
        ) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => {
                    for (p, q) in x.data.iter_mut().zip(&y.data) {
                        *p = f(*p, *q);
                    }
                }
                (None, Some(y)) => *a = Some(y.clone()),
                _ => {}
            }
        }
        add(&mut self.color, &other.color, |p, q| {
            [p[0] + q[0], p[1] + q[1], p[2] + q[2]]
        });
        add(&mut self.depth, &other.depth, |p, q| p + q);
        add(&mut self.opacity, &other.opacity, |p, q| p + q);
        add(&mut self.flow, &other.flow, |p, q| {
            [p[0] + q[0], p[1] + q[1]]
        });
    }
}

/// Composite already-projected splats.
pub fn composite(
    projected: &[ProjectedGaussian],
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> RenderOutput {
    raster::composite(projected, k, settings)
}

/// Adjoint of [`composite`], indexed like `projected`.
pub fn composite_backward(
    projected: &[ProjectedGaussian],
    k: &CameraIntrinsics,
    settings: &RenderSettings,
    adj: &PixelAdjoint,
) -> Vec<SplatGrad> {
    raster::composite_backward(projected, k, settings, adj)
}

/// Result of rendering a list of world-space Gaussians.
#[derive(Debug, Clone)]
pub struct SceneRender {
    pub output: RenderOutput,
    pub projected: Vec<ProjectedGaussian>,
}

impl SceneRender {
    /// Largest alpha per source Gaussian (0 for culled ones).
    pub fn alpha_per_source(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (p, &a) in self.projected.iter().zip(&self.output.max_alpha) {
            out[p.source_index] = a;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SceneGrad {
    pub gaussians: Vec<GaussianGrad>,
    pub pose: Twist,
    pub flows: Vec<[f64; 2]>,
}

/// Project and composite `gaussians`; `flows`, when given, attaches one
/// displacement per Gaussian to the flow channel.
pub fn render_gaussians(
    gaussians: &[GaussianPrimitive],
    flows: Option<&[[f64; 2]]>,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> SceneRender {
    let projected = project_all(gaussians, flows, pose, k);
    let settings = RenderSettings {
        flow: settings.flow || flows.is_some(),
        ..*settings
    };
    let output = composite(&projected, k, &settings);
    SceneRender { output, projected }
}

fn project_all(
    gaussians: &[GaussianPrimitive],
    flows: Option<&[[f64; 2]]>,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
) -> Vec<ProjectedGaussian> {
    use rayon::prelude::*;
    gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let mut p = project_gaussian_ewa(g, pose, k).ok()?;
            p.source_index = i;
            p.flow_dx = flows.map(|f| f[i]);
            Some(p)
        })
        .collect()
}

pub fn render_gaussians_backward(
    gaussians: &[GaussianPrimitive],
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
    scene: &SceneRender,
    adj: &PixelAdjoint,
) -> SceneGrad {
    use rayon::prelude::*;
    let settings = RenderSettings {
        flow: settings.flow || scene.output.flow.is_some(),
        ..*settings
    };
    let splat_grads = composite_backward(&scene.projected, k, &settings, adj);
    let per: Vec<(usize, GaussianGrad, Twist, [f64; 2])> = scene
        .projected
        .par_iter()
        .zip(splat_grads.par_iter())
        .map(|(p, sg)| {
            let i = p.source_index;
            let (gg, gp) = project_gaussian_backward(&gaussians[i], pose, k, sg);
            (i, gg, gp, sg.flow)
        })
        .collect();
    let mut out = SceneGrad {
        gaussians: vec![GaussianGrad::default(); gaussians.len()],
        pose: [0.0; 6],
        flows: vec![[0.0; 2]; gaussians.len()],
    };
    for (i, gg, gp, gf) in per {
        out.gaussians[i] = gg;
        out.flows[i] = gf;
        for j in 0..6 {
            out.pose[j] += gp[j];
        }
    }
    out
}
