//! Loss terms with hand-written adjoints.

mod ssim;

pub use ssim::{d_ssim, ssim};

use crate::config::LossWeights;
use crate::error::Result;
use crate::gaussian::GaussianPrimitive;
use crate::image::{check_shape, DepthImage, FlowImage, Image, Mask, RgbImage};
use crate::render::{PixelAdjoint, RenderOutput};
use crate::tracker::Exposure;

/// How a multi-channel pixel error is reduced to one number.
pub trait L1Pixel: Copy + Default {
    /// Per-pixel error and the subgradient of that error w.r.t. `pred`.
    fn l1(pred: Self, target: Self) -> (f64, Self);
    fn scale(self, s: f64) -> Self;
}

#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl L1Pixel for f64 {
    fn l1(p: f64, t: f64) -> (f64, f64) {
        ((p - t).abs(), sign(p - t))
    }
    fn scale(self, s: f64) -> f64 {
        self * s
    }
}

/// Colors: mean absolute error over the three channels.
impl L1Pixel for [f64; 3] {
    fn l1(p: [f64; 3], t: [f64; 3]) -> (f64, [f64; 3]) {
        let e = ((p[0] - t[0]).abs() + (p[1] - t[1]).abs() + (p[2] - t[2]).abs()) / 3.0;
        let g = [0, 1, 2].map(|c| sign(p[c] - t[c]) / 3.0);
        (e, g)
    }
    fn scale(self, s: f64) -> Self {
        self.map(|v| v * s)
    }
}

/// Flow vectors: L1 norm of the displacement error in pixels.
impl L1Pixel for [f64; 2] {
    fn l1(p: [f64; 2], t: [f64; 2]) -> (f64, [f64; 2]) {
        (
            (p[0] - t[0]).abs() + (p[1] - t[1]).abs(),
            [sign(p[0] - t[0]), sign(p[1] - t[1])],
        )
    }
    fn scale(self, s: f64) -> Self {
        self.map(|v| v * s)
    }
}

/// `Σ_{mask} w·|pred − target| / |mask|` and its adjoint w.r.t. `pred`.
pub fn masked_l1<P: L1Pixel>(
    pred: &Image<P>,
    target: &Image<P>,
    mask: &Mask,
    weights: Option<&DepthImage>,
) -> Result<(f64, Image<P>)> {
    check_shape(pred, target, "masked_l1 target")?;
    check_shape(pred, mask, "masked_l1 mask")?;
    if let Some(w) = weights {
        check_shape(pred, w, "masked_l1 weights")?;
    }
    let mut adj = Image::<P>::new(pred.width, pred.height);
    let count = mask.count();
    if count == 0 {
        return Ok((0.0, adj));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for i in 0..pred.len() {
        if !mask.data[i] {
            continue;
        }
        let w = weights.map_or(1.0, |w| w.data[i]);
        let (e, g) = P::l1(pred.data[i], target.data[i]);
        total += w * e;
        adj.data[i] = g.scale(w * inv);
    }
    Ok((total * inv, adj))
}

/// `Σ_i Σ_k |s_ik − mean_k(s_i)|` over scales, with gradients w.r.t. the
/// log-scales.
pub fn iso_loss(gaussians: &[GaussianPrimitive]) -> (f64, Vec<[f64; 3]>) {
    let mut total = 0.0;
    let grads = gaussians
        .iter()
        .map(|g| {
            let s = g.scales();
            let mean = (s[0] + s[1] + s[2]) / 3.0;
            let sg = s.map(|v| sign(v - mean));
            total += s.iter().map(|v| (v - mean).abs()).sum::<f64>();
            let sg_mean = (sg[0] + sg[1] + sg[2]) / 3.0;
            [0, 1, 2].map(|k| (sg[k] - sg_mean) * s[k])
        })
        .collect();
    (total, grads)
}

/// Forward plus backward flow L1 over `region`, with adjoints for both
/// rendered maps.
pub fn flow_loss(
    rendered_fwd: &FlowImage,
    rendered_bwd: &FlowImage,
    provider_fwd: &FlowImage,
    provider_bwd: &FlowImage,
    region: &Mask,
) -> Result<(f64, FlowImage, FlowImage)> {
    let (lb, gb) = masked_l1(rendered_bwd, provider_bwd, region, None)?;
    let (lf, gf) = masked_l1(rendered_fwd, provider_fwd, region, None)?;
    Ok((lb + lf, gf, gb))
}

/// The component values entering the mapping objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MappingTerms {
    pub l1_color: f64,
    pub l1_depth: f64,
    pub flow: f64,
    pub arap: f64,
    pub iso: f64,
}

impl MappingTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.lambda * self.l1_color
            + (1.0 - w.lambda) * self.l1_depth
            + w.lambda_flow * self.flow
            + w.w1_arap * self.arap
            + w.w2_iso * self.iso
    }
}

pub const REFINE_DSSIM: f64 = 0.2;
pub const REFINE_COLOR: f64 = 0.8;
pub const REFINE_DEPTH: f64 = 0.1;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RefinementTerms {
    pub d_ssim: f64,
    pub l1_color: f64,
    pub l1_depth: f64,
    pub arap: f64,
    pub iso: f64,
}

impl RefinementTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        REFINE_DSSIM * self.d_ssim
            + REFINE_COLOR * self.l1_color
            + REFINE_DEPTH * self.l1_depth
            + w.w1_arap * self.arap
            + w.w2_iso * self.iso
    }
}

/// Observed images of one keyframe.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub color: &'a RgbImage,
    pub depth: &'a DepthImage,
    /// True where the pixel is static.
    pub static_mask: &'a Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Mapping stage 1: color/depth weights doubled inside the motion region.
    Stage1,
    Stage2,
    Refinement,
}

/// Photometric and geometric part of the mapping or refinement objective
/// for one rendered keyframe.
#[derive(Debug, Clone)]
pub struct ImageLoss {
    /// Weighted sum of the image terms only.
    pub value: f64,
    pub l1_color: f64,
    pub l1_depth: f64,
    pub d_ssim: f64,
    pub adjoint: PixelAdjoint,
    /// `d value / d (log_gain, offset)`.
    pub exposure_grad: [f64; 2],
}

pub fn image_loss(
    render: &RenderOutput,
    obs: &Observation,
    exposure: &Exposure,
    weights: &LossWeights,
    opacity_gate: f64,
    objective: Objective,
) -> Result<ImageLoss> {
    check_shape(&render.color, obs.color, "image_loss color")?;
    check_shape(&render.color, obs.depth, "image_loss depth")?;
    check_shape(&render.color, obs.static_mask, "image_loss mask")?;
    let (w, h) = (render.color.width, render.color.height);
    let pixel_weights = match objective {
        Objective::Stage1 => Some(obs.static_mask.map(|s| if s { 1.0 } else { 2.0 })),
        _ => None,
    };
    let all = Mask::filled(w, h, true);
    let depth_mask = Mask::from_fn(w, h, |x, y| {
        render.opacity.get(x, y) > opacity_gate && obs.depth.get(x, y) > 0.0
    });
    let shown = exposure.apply(&render.color);
    let (l1c, gc) = masked_l1(&shown, obs.color, &all, pixel_weights.as_ref())?;
    let (l1d, gd) = masked_l1(
        &render.depth,
        obs.depth,
        &depth_mask,
        pixel_weights.as_ref(),
    )?;
    let (wc, wd) = match objective {
        Objective::Refinement => (REFINE_COLOR, REFINE_DEPTH),
        _ => (weights.lambda, 1.0 - weights.lambda),
    };
    let mut g_shown = gc.map(|p| p.map(|v| v * wc));
    let mut dssim = 0.0;
    if objective == Objective::Refinement {
        let (v, g) = d_ssim(&shown, obs.color)?;
        dssim = v;
        for (a, b) in g_shown.data.iter_mut().zip(&g.data) {
            for c in 0..3 {
                a[c] += REFINE_DSSIM * b[c];
            }
        }
    }
    let (g_color, exposure_grad) = exposure.backward(&render.color, &g_shown);
    let value = wc * l1c
        + wd * l1d
        + if objective == Objective::Refinement {
            REFINE_DSSIM * dssim
        } else {
            0.0
        };
    Ok(ImageLoss {
        value,
        l1_color: l1c,
        l1_depth: l1d,
        d_ssim: dssim,
        adjoint: PixelAdjoint {
            color: Some(g_color),
            depth: Some(gd.map(|v| v * wd)),
            opacity: None,
            flow: None,
        },
        exposure_grad,
    })
}

#[cfg(test)]
mod tests;
