//! Frame-to-map camera tracking against the static Gaussians.

use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::gaussian::StaticMap;
use crate::image::{check_shape, DepthImage, Mask, RgbImage};
use crate::loss::{sign, Observation};
use crate::optim::{Adam, StepOutcome};
use crate::render::{
    render_gaussians, render_gaussians_backward, PixelAdjoint, RenderOutput, RenderSettings,
};
use crate::se3::{PoseSE3, Twist};

/// Per-frame affine color correction `exp(log_gain)·c + offset`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Exposure {
    pub log_gain: f64,
    pub offset: f64,
}

impl Exposure {
    /// Corrected colors, clamped to `[0, 1]`.
    pub fn apply(&self, color: &RgbImage) -> RgbImage {
        let g = self.log_gain.exp();
        color.map(|p| p.map(|c| (g * c + self.offset).clamp(0.0, 1.0)))
    }

    /// Given `dL/d apply(color)`, returns `dL/dcolor` and
    /// `dL/d(log_gain, offset)`. Clamped channels pass no gradient.
    pub fn backward(&self, color: &RgbImage, g_out: &RgbImage) -> (RgbImage, [f64; 2]) {
        let gain = self.log_gain.exp();
        let mut g_params = [0.0; 2];
        let mut g_color = RgbImage::new(color.width, color.height);
        for i in 0..color.len() {
            for c in 0..3 {
                let v = gain * color.data[i][c] + self.offset;
                if !(0.0..=1.0).contains(&v) {
                    continue;
                }
                let g = g_out.data[i][c];
                g_color.data[i][c] = g * gain;
                g_params[0] += g * gain * color.data[i][c];
                g_params[1] += g;
            }
        }
        (g_color, g_params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackResult {
    pub pose: PoseSE3,
    pub exposure: Exposure,
    pub final_loss: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

/// True where the Sobel gradient magnitude of the grayscale image exceeds
/// `sigma`. Borders replicate the edge pixels.
pub fn gradient_gate_mask(color: &RgbImage, sigma: f64) -> Mask {
    let gray = color.to_gray();
    let (w, h) = (gray.width, gray.height);
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        gray.get(x, y)
    };
    Mask::from_fn(w, h, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
            - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
        let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
            - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        (gx * gx + gy * gy).sqrt() > sigma
    })
}

#[derive(Debug, Clone)]
pub struct TrackingLoss {
    pub value: f64,
    pub adjoint: PixelAdjoint,
    pub exposure_grad: [f64; 2],
}

/// Masked, opacity-weighted color L1 plus gated depth L1.
///
/// Color: `λ · mean_{ℳ ∧ gate} O·|e|` with `e` the exposure-corrected error
/// averaged over channels. Depth: `(1−λ) · mean_{ℳ ∧ O>gate ∧ D_gt>0} |D − D_gt|`.
pub fn tracking_loss(
    render: &RenderOutput,
    obs: &Observation,
    gate: &Mask,
    exposure: &Exposure,
    lambda: f64,
    opacity_gate: f64,
) -> Result<TrackingLoss> {
    check_shape(&render.color, obs.color, "tracking color")?;
    check_shape(&render.color, obs.depth, "tracking depth")?;
    check_shape(&render.color, obs.static_mask, "tracking mask")?;
    check_shape(&render.color, gate, "tracking gate")?;
    if obs.static_mask.count() == 0 {
        return Err(Error::Untrackable);
    }
    let (w, h) = (render.color.width, render.color.height);
    let n = w * h;
    let color_px: Vec<bool> = (0..n)
        .map(|i| obs.static_mask.data[i] && gate.data[i])
        .collect();
    let depth_px: Vec<bool> = (0..n)
        .map(|i| {
            obs.static_mask.data[i]
                && render.opacity.data[i] > opacity_gate
                && obs.depth.data[i] > 0.0
        })
        .collect();
    let nc = color_px.iter().filter(|&&b| b).count();
    let nd = depth_px.iter().filter(|&&b| b).count();

    let shown = exposure.apply(&render.color);
    let mut g_shown = RgbImage::new(w, h);
    let mut g_opacity = DepthImage::new(w, h);
    let mut g_depth = DepthImage::new(w, h);
    let mut value = 0.0;
    if nc > 0 {
        let s = lambda / nc as f64;
        for i in (0..n).filter(|&i| color_px[i]) {
            let o = render.opacity.data[i];
            let mut e = 0.0;
            for c in 0..3 {
                let d = shown.data[i][c] - obs.color.data[i][c];
                e += d.abs() / 3.0;
                g_shown.data[i][c] = s * o * sign(d) / 3.0;
            }
            value += s * o * e;
            g_opacity.data[i] = s * e;
        }
    }
    if nd > 0 {
        let s = (1.0 - lambda) / nd as f64;
        for i in (0..n).filter(|&i| depth_px[i]) {
            let d = render.depth.data[i] - obs.depth.data[i];
            value += s * d.abs();
            g_depth.data[i] = s * sign(d);
        }
    }
    let (g_color, exposure_grad) = exposure.backward(&render.color, &g_shown);
    Ok(TrackingLoss {
        value,
        adjoint: PixelAdjoint {
            color: Some(g_color),
            depth: Some(g_depth),
            opacity: Some(g_opacity),
            flow: None,
        },
        exposure_grad,
    })
}

/// Constant-velocity extrapolation of a world-to-camera pose.
pub fn predict_pose(before_last: &PoseSE3, last: &PoseSE3) -> PoseSE3 {
    let motion = last.compose(&before_last.inverse());
    motion.compose(last)
}

/// Optimizes the pose and exposure of one frame against the static map.
pub fn track_frame(
    map: &StaticMap,
    obs: &Observation,
    init_pose: &PoseSE3,
    init_exposure: &Exposure,
    k: &CameraIntrinsics,
    cfg: &Config,
) -> Result<TrackResult> {
    if map.is_empty() {
        return Err(Error::InvalidArgument(
            "tracking against an empty map".into(),
        ));
    }
    let tc = &cfg.tracking;
    let lambda = cfg.weights.lambda;
    let gate = gradient_gate_mask(obs.color, tc.grad_gate_sigma);
    let settings = RenderSettings::default();
    let gaussians = map.gaussians();

    let mut pose = *init_pose;
    let mut exposure = *init_exposure;
    let mut pose_opt = Adam::new(6);
    let mut exp_opt = Adam::new(2);
    let lr_pose = |i: usize| if i < 3 { tc.lr_trans } else { tc.lr_rot };

    let mut best = TrackResult {
        pose,
        exposure,
        final_loss: f64::INFINITY,
        iterations_used: 0,
        converged: false,
    };
    let mut initial = None;
    let mut prev_loss = f64::INFINITY;
    let mut flat_steps = 0;
    for it in 0..tc.iterations {
        let scene = render_gaussians(gaussians, None, &pose, k, &settings);
        let tl = tracking_loss(
            &scene.output,
            obs,
            &gate,
            &exposure,
            lambda,
            tc.opacity_gate,
        )?;
        let initial_loss = *initial.get_or_insert(tl.value);
        best.iterations_used = it + 1;
        if !tl.value.is_finite() || tl.value > tc.divergence_factor * initial_loss.max(1e-12) {
            log::warn!("tracking diverged at iteration {it} (loss {})", tl.value);
            return Ok(TrackResult {
                pose: *init_pose,
                exposure: *init_exposure,
                final_loss: initial_loss,
                iterations_used: it + 1,
                converged: false,
            });
        }
        if tl.value < best.final_loss {
            best.pose = pose;
            best.exposure = exposure;
            best.final_loss = tl.value;
        }
        if (prev_loss - tl.value).abs() < tc.convergence_eps {
            flat_steps += 1;
            if flat_steps >= tc.convergence_patience {
                best.converged = true;
                break;
            }
        } else {
            flat_steps = 0;
        }
        prev_loss = tl.value;
        if it + 1 == tc.iterations {
            break;
        }
        let grad = render_gaussians_backward(gaussians, &pose, k, &settings, &scene, &tl.adjoint);
        let mut delta: Twist = [0.0; 6];
        if pose_opt.update_with(&mut delta, &grad.pose, lr_pose) == StepOutcome::Applied {
            pose = pose.retract(&delta);
        }
        let mut e = [exposure.log_gain, exposure.offset];
        exp_opt.update(&mut e, &tl.exposure_grad, tc.lr_exposure);
        exposure = Exposure {
            log_gain: e[0],
            offset: e[1],
        };
    }
    Ok(best)
}

#[cfg(test)]
mod tests;
