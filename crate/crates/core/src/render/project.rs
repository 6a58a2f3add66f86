use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use super::{ProjectedGaussian, SplatGrad};
use crate::camera::CameraIntrinsics;
use crate::gaussian::{covariance_from_params, sigmoid, GaussianGrad, GaussianPrimitive};
use crate::se3::{rotation_from_raw, rotation_from_raw_backward, PoseSE3, Twist};

/// Added to the diagonal of every screen-space covariance (pixels²).
pub const COV2D_REGULARIZATION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Culled {
    BehindNearPlane,
    OutsideImage,
}

#[inline]
fn jacobian(pc: &Vector3<f64>, k: &CameraIntrinsics) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz2,
    )
}

/// EWA projection: `cov2d = J·W·Σ·Wᵀ·Jᵀ + 0.3·I`.
pub fn project_gaussian_ewa(
    g: &GaussianPrimitive,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
) -> Result<ProjectedGaussian, Culled> {
    let pc = pose.transform(&g.mean_vec());
    if pc.z <= k.near_clip {
        return Err(Culled::BehindNearPlane);
    }
    let w = pose.rotation_matrix();
    let cov_cam = w * covariance_from_params(g) * w.transpose();
    let j = jacobian(&pc, k);
    let cov2d = j * cov_cam * j.transpose() + Matrix2::identity() * COV2D_REGULARIZATION;
    let u = k.fx * pc.x / pc.z + k.cx;
    let v = k.fy * pc.y / pc.z + k.cy;
    let rx = 3.0 * cov2d[(0, 0)].sqrt();
    let ry = 3.0 * cov2d[(1, 1)].sqrt();
    let x_lo = (u - rx).ceil().max(0.0);
    let x_hi = (u + rx).floor().min(k.width as f64 - 1.0);
    let y_lo = (v - ry).ceil().max(0.0);
    let y_hi = (v + ry).floor().min(k.height as f64 - 1.0);
    if !(x_lo <= x_hi && y_lo <= y_hi) {
        return Err(Culled::OutsideImage);
    }
    Ok(ProjectedGaussian {
        mean2d: [u, v],
        cov2d,
        depth: pc.z,
        base_opacity: sigmoid(g.opacity_logit),
        color: g.color.map(|c| c.clamp(0.0, 1.0)),
        flow_dx: None,
        source_index: 0,
    })
}

/// Chains a splat gradient back to the Gaussian's parameters and to a
/// left-multiplicative pose twist `(v, ω)`.
pub fn project_gaussian_backward(
    g: &GaussianPrimitive,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    sg: &SplatGrad,
) -> (GaussianGrad, Twist) {
    let w = pose.rotation_matrix();
    let pc = pose.transform(&g.mean_vec());
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let rq = rotation_from_raw(&g.rot);
    let s = Vector3::from(g.scales());
    let m = rq * Matrix3::from_diagonal(&s);
    let sigma = m * m.transpose();
    let sigma_c = w * sigma * w.transpose();
    let j = jacobian(&pc, k);

    let g2 = sg.cov2d;
    let g_sigma_c = j.transpose() * g2 * j;
    let g_j = g2 * j * sigma_c.transpose() + g2.transpose() * j * sigma_c;

    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_pc = Vector3::zeros();
    g_pc.x += g_j[(0, 2)] * (-k.fx * iz2);
    g_pc.y += g_j[(1, 2)] * (-k.fy * iz2);
    g_pc.z += g_j[(0, 0)] * (-k.fx * iz2)
        + g_j[(0, 2)] * (2.0 * k.fx * x * iz3)
        + g_j[(1, 1)] * (-k.fy * iz2)
        + g_j[(1, 2)] * (2.0 * k.fy * y * iz3);

    let [gu, gv] = sg.mean2d;
    g_pc.x += gu * k.fx * iz;
    g_pc.y += gv * k.fy * iz;
    g_pc.z += -gu * k.fx * x * iz2 - gv * k.fy * y * iz2;
    g_pc.z += sg.depth;

    let g_sigma = w.transpose() * g_sigma_c * w;
    let g_m = (g_sigma + g_sigma.transpose()) * m;
    let mut out = GaussianGrad::default();
    let mut g_rq = Matrix3::zeros();
    for col in 0..3 {
        let mut gs = 0.0;
        for row in 0..3 {
            gs += g_m[(row, col)] * rq[(row, col)];
            g_rq[(row, col)] = g_m[(row, col)] * s[col];
        }
        out.log_scale[col] = gs * s[col];
    }
    out.rot = rotation_from_raw_backward(&g.rot, &g_rq);
    let g_mean = w.transpose() * g_pc;
    out.mean = [g_mean.x, g_mean.y, g_mean.z];
    let a = sigmoid(g.opacity_logit);
    out.opacity_logit = sg.opacity * a * (1.0 - a);
    for c in 0..3 {
        out.color[c] = if (0.0..=1.0).contains(&g.color[c]) {
            sg.color[c]
        } else {
            0.0
        };
    }

    let h = g_sigma_c * sigma_c + g_sigma_c.transpose() * sigma_c;
    let gw = pc.cross(&g_pc);
    let pose_grad = [
        g_pc.x,
        g_pc.y,
        g_pc.z,
        gw.x + h[(2, 1)] - h[(1, 2)],
        gw.y + h[(0, 2)] - h[(2, 0)],
        gw.z + h[(1, 0)] - h[(0, 1)],
    ];
    (out, pose_grad)
}

/// Backward of the pinhole projection of a single world point: returns
/// `(dL/dp_world, dL/dtwist)` given `dL/d(u, v)`.
pub fn project_mean_backward(
    p_world: &Vector3<f64>,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    g_uv: [f64; 2],
) -> (Vector3<f64>, Twist) {
    let pc = pose.transform(p_world);
    let iz = 1.0 / pc.z;
    let g_pc = Vector3::new(
        g_uv[0] * k.fx * iz,
        g_uv[1] * k.fy * iz,
        -(g_uv[0] * k.fx * pc.x + g_uv[1] * k.fy * pc.y) * iz * iz,
    );
    let gw = pc.cross(&g_pc);
    (
        pose.rotation_matrix().transpose() * g_pc,
        [g_pc.x, g_pc.y, g_pc.z, gw.x, gw.y, gw.z],
    )
}
