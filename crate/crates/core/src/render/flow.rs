//! Rendered optical flow between two configurations of the dynamic
//! Gaussians.
//!
//! Each Gaussian carries its own image displacement between the two frames.
//! The backward map (`t → t−1`) is composited with the `t` configuration on
//! the `t` camera, the forward map (`t−1 → t`) with the `t−1` configuration on
//! the `t−1` camera. Values point from the source-time pixel to the other
//! time. Gaussians whose mean is behind either camera carry no flow and are
//! left out of both maps.

use nalgebra::Vector3;

use super::{
    project_mean_backward, render_gaussians, render_gaussians_backward, PixelAdjoint,
    RenderSettings, SceneRender,
};
use crate::camera::{project_point, CameraIntrinsics};
use crate::gaussian::{GaussianGrad, GaussianPrimitive};
use crate::image::FlowImage;
use crate::se3::{PoseSE3, Twist};

#[derive(Debug, Clone)]
pub struct FlowPairRender {
    /// Source time `t−1`.
    pub forward: SceneRender,
    /// Source time `t`.
    pub backward: SceneRender,
    /// Input indices of the Gaussians that took part, in render order.
    pub used: Vec<usize>,
    pub uv_prev: Vec<[f64; 2]>,
    pub uv_cur: Vec<[f64; 2]>,
}

impl FlowPairRender {
    pub fn forward_flow(&self) -> &FlowImage {
        self.forward.output.flow.as_ref().expect("flow channel")
    }

    pub fn backward_flow(&self) -> &FlowImage {
        self.backward.output.flow.as_ref().expect("flow channel")
    }
}

#[derive(Debug, Clone)]
pub struct FlowPairGrad {
    pub prev: Vec<GaussianGrad>,
    pub cur: Vec<GaussianGrad>,
    pub pose_prev: Twist,
    pub pose_cur: Twist,
}

fn project_uv(g: &GaussianPrimitive, pose: &PoseSE3, k: &CameraIntrinsics) -> Option<[f64; 2]> {
    project_point(&Vector3::from(g.mean), pose, k)
        .visible()
        .map(|(u, v, _)| [u, v])
}

/// `prev[i]` and `cur[i]` are the same Gaussian at `t−1` and `t`.
pub fn render_flow_pair(
    prev: &[GaussianPrimitive],
    cur: &[GaussianPrimitive],
    pose_prev: &PoseSE3,
    pose_cur: &PoseSE3,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> FlowPairRender {
    assert_eq!(
        prev.len(),
        cur.len(),
        "flow pair configurations differ in length"
    );
    let mut used = Vec::new();
    let mut uv_prev = Vec::new();
    let mut uv_cur = Vec::new();
    for i in 0..cur.len() {
        if let (Some(a), Some(b)) = (
            project_uv(&prev[i], pose_prev, k),
            project_uv(&cur[i], pose_cur, k),
        ) {
            used.push(i);
            uv_prev.push(a);
            uv_cur.push(b);
        }
    }
    let sel_prev: Vec<GaussianPrimitive> = used.iter().map(|&i| prev[i]).collect();
    let sel_cur: Vec<GaussianPrimitive> = used.iter().map(|&i| cur[i]).collect();
    let d_fwd: Vec<[f64; 2]> = uv_prev
        .iter()
        .zip(&uv_cur)
        .map(|(a, b)| [b[0] - a[0], b[1] - a[1]])
        .collect();
    let d_bwd: Vec<[f64; 2]> = d_fwd.iter().map(|d| [-d[0], -d[1]]).collect();
    let settings = settings.with_flow();
    let forward = render_gaussians(&sel_prev, Some(&d_fwd), pose_prev, k, &settings);
    let backward = render_gaussians(&sel_cur, Some(&d_bwd), pose_cur, k, &settings);
    FlowPairRender {
        forward,
        backward,
        used,
        uv_prev,
        uv_cur,
    }
}

pub fn render_flow_pair_backward(
    prev: &[GaussianPrimitive],
    cur: &[GaussianPrimitive],
    pose_prev: &PoseSE3,
    pose_cur: &PoseSE3,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
    render: &FlowPairRender,
    adj_forward: &PixelAdjoint,
    adj_backward: &PixelAdjoint,
) -> FlowPairGrad {
    let settings = settings.with_flow();
    let sel_prev: Vec<GaussianPrimitive> = render.used.iter().map(|&i| prev[i]).collect();
    let sel_cur: Vec<GaussianPrimitive> = render.used.iter().map(|&i| cur[i]).collect();
    let gf = render_gaussians_backward(
        &sel_prev,
        pose_prev,
        k,
        &settings,
        &render.forward,
        adj_forward,
    );
    let gb = render_gaussians_backward(
        &sel_cur,
        pose_cur,
        k,
        &settings,
        &render.backward,
        adj_backward,
    );

    let mut out = FlowPairGrad {
        prev: vec![GaussianGrad::default(); prev.len()],
        cur: vec![GaussianGrad::default(); cur.len()],
        pose_prev: gf.pose,
        pose_cur: gb.pose,
    };
    for (j, &i) in render.used.iter().enumerate() {
        out.prev[i] = gf.gaussians[j];
        out.cur[i] = gb.gaussians[j];
        // fwd value = uv_cur − uv_prev, bwd value = uv_prev − uv_cur
        let g_cur = [
            gf.flows[j][0] - gb.flows[j][0],
            gf.flows[j][1] - gb.flows[j][1],
        ];
        let g_prev = [-g_cur[0], -g_cur[1]];
        if g_cur != [0.0; 2] {
            let (gm, gp) = project_mean_backward(&Vector3::from(cur[i].mean), pose_cur, k, g_cur);
            for c in 0..3 {
                out.cur[i].mean[c] += gm[c];
            }
            for c in 0..6 {
                out.pose_cur[c] += gp[c];
            }
            let (gm, gp) =
                project_mean_backward(&Vector3::from(prev[i].mean), pose_prev, k, g_prev);
            for c in 0..3 {
                out.prev[i].mean[c] += gm[c];
            }
            for c in 0..6 {
                out.pose_prev[c] += gp[c];
            }
        }
    }
    out
}
