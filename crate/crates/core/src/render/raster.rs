//! Tiled front-to-back compositing of projected splats and its adjoint.
//!
//! Both passes parallelize over 16×16 tiles. Every pixel is owned by one
//! tile, and per-splat gradient partials are merged in tile order, so the
//! results do not depend on thread scheduling.

use nalgebra::Matrix2;
use rayon::prelude::*;

use super::{PixelAdjoint, ProjectedGaussian, RenderOutput, RenderSettings};
use crate::camera::CameraIntrinsics;
use crate::image::Image;

pub const TILE_SIZE: usize = 16;

/// Mahalanobis radius² of the 3σ footprint.
const CUTOFF_M: f64 = 9.0;

/// A splat prepared for rasterization.
#[derive(Debug, Clone, Copy)]
struct Prepared {
    u: f64,
    v: f64,
    // conic = cov2d⁻¹ = [[a, b], [b, c]]
    a: f64,
    b: f64,
    c: f64,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    depth: f64,
    opacity: f64,
    color: [f64; 3],
    flow: [f64; 2],
    /// Position in the caller's `projected` slice.
    slot: usize,
}

/// Gradient of the loss with respect to one projected splat.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplatGrad {
    pub mean2d: [f64; 2],
    /// Full-matrix convention: `dL = Σ_ij cov2d[i][j] · d cov2d_ij`.
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    pub flow: [f64; 2],
}

impl SplatGrad {
    fn add_assign(&mut self, o: &SplatGrad) {
        self.mean2d[0] += o.mean2d[0];
        self.mean2d[1] += o.mean2d[1];
        self.cov2d += o.cov2d;
        self.depth += o.depth;
        self.opacity += o.opacity;
        for i in 0..3 {
            self.color[i] += o.color[i];
        }
        self.flow[0] += o.flow[0];
        self.flow[1] += o.flow[1];
    }
}

// Conic-space partials accumulated per pixel before the conversion to cov2d.
#[derive(Debug, Clone, Copy, Default)]
struct RawGrad {
    mean2d: [f64; 2],
    conic: [f64; 3],
    depth: f64,
    opacity: f64,
    color: [f64; 3],
    flow: [f64; 2],
}

impl RawGrad {
    fn add_assign(&mut self, o: &RawGrad) {
        self.mean2d[0] += o.mean2d[0];
        self.mean2d[1] += o.mean2d[1];
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.depth += o.depth;
        self.opacity += o.opacity;
        self.flow[0] += o.flow[0];
        self.flow[1] += o.flow[1];
    }
}

struct Binned {
    splats: Vec<Prepared>,
    tiles_x: usize,
    tiles_y: usize,
    /// Per tile: indices into `splats`, front to back.
    tile_lists: Vec<Vec<u32>>,
}

fn prepare(projected: &[ProjectedGaussian], k: &CameraIntrinsics) -> Binned {
    let w = k.width;
    let h = k.height;
    let mut order: Vec<usize> = (0..projected.len()).collect();
    order.sort_by(|&i, &j| {
        projected[i]
            .depth
            .total_cmp(&projected[j].depth)
            .then(projected[i].source_index.cmp(&projected[j].source_index))
    });

    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    let mut splats = Vec::with_capacity(projected.len());

    for &slot in &order {
        let p = &projected[slot];
        let cov = p.cov2d;
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        if !(det > 0.0) || !det.is_finite() {
            continue;
        }
        let a = cov[(1, 1)] / det;
        let b = -0.5 * (cov[(0, 1)] + cov[(1, 0)]) / det;
        let c = cov[(0, 0)] / det;
        let rx = 3.0 * cov[(0, 0)].sqrt();
        let ry = 3.0 * cov[(1, 1)].sqrt();
        let [u, v] = p.mean2d;
        let fx0 = (u - rx).ceil().max(0.0);
        let fx1 = (u + rx).floor().min(w as f64 - 1.0);
        let fy0 = (v - ry).ceil().max(0.0);
        let fy1 = (v + ry).floor().min(h as f64 - 1.0);
        if !(fx0 <= fx1 && fy0 <= fy1) {
            continue;
        }
        let (x0, x1, y0, y1) = (fx0 as usize, fx1 as usize, fy0 as usize, fy1 as usize);
        let idx = splats.len() as u32;
        splats.push(Prepared {
            u,
            v,
            a,
            b,
            c,
            x0,
            x1,
            y0,
            y1,
            depth: p.depth,
            opacity: p.base_opacity,
            color: p.color,
            flow: p.flow_dx.unwrap_or([0.0, 0.0]),
            slot,
        });
        for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                tile_lists[ty * tiles_x + tx].push(idx);
            }
        }
    }
    Binned {
        splats,
        tiles_x,
        tiles_y,
        tile_lists,
    }
}

#[inline]
fn tile_bounds(b: &Binned, tile: usize, k: &CameraIntrinsics) -> (usize, usize, usize, usize) {
    let tx = tile % b.tiles_x;
    let ty = tile / b.tiles_x;
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    (
        x0,
        (x0 + TILE_SIZE).min(k.width),
        y0,
        (y0 + TILE_SIZE).min(k.height),
    )
}

/// Per-pixel splat weight; `None` outside the 3σ footprint.
#[inline]
fn evaluate(s: &Prepared, x: usize, y: usize) -> Option<(f64, f64, f64, f64)> {
    if x < s.x0 || x > s.x1 || y < s.y0 || y > s.y1 {
        return None;
    }
    let dx = x as f64 - s.u;
    let dy = y as f64 - s.v;
    let m = s.a * dx * dx + 2.0 * s.b * dx * dy + s.c * dy * dy;
    if !(m <= CUTOFF_M) {
        return None;
    }
    let g = (-0.5 * m).exp();
    Some((g, (s.opacity * g).clamp(0.0, 1.0), dx, dy))
}

struct TileForward {
    color: Vec<[f64; 3]>,
    depth: Vec<f64>,
    opacity: Vec<f64>,
    flow: Vec<[f64; 2]>,
    /// (splat index, max alpha) for every splat that reached some pixel.
    touched: Vec<(u32, f64)>,
    signature: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[inline]
fn fnv(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(FNV_PRIME)
}

pub(crate) fn composite(
    projected: &[ProjectedGaussian],
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> RenderOutput {
    let binned = prepare(projected, k);
    let ntiles = binned.tiles_x * binned.tiles_y;
    let want_flow = settings.flow;
    let term = settings.termination_transmittance;
    let track_sig = settings.track_signature;

    let tiles: Vec<TileForward> = (0..ntiles)
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = tile_bounds(&binned, tile, k);
            let n = (x1 - x0) * (y1 - y0);
            let list = &binned.tile_lists[tile];
            let mut out = TileForward {
                color: vec![[0.0; 3]; n],
                depth: vec![0.0; n],
                opacity: vec![0.0; n],
                flow: if want_flow {
                    vec![[0.0; 2]; n]
                } else {
                    Vec::new()
                },
                touched: Vec::new(),
                signature: FNV_OFFSET,
            };
            let mut max_alpha = vec![0.0f64; list.len()];
            let mut reached = vec![false; list.len()];
            let mut p = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let mut t = 1.0;
                    let mut col = [0.0; 3];
                    let mut dep = 0.0;
                    let mut fl = [0.0; 2];
                    let mut sig = FNV_OFFSET;
                    for (li, &si) in list.iter().enumerate() {
                        let s = &binned.splats[si as usize];
                        let Some((_, alpha, _, _)) = evaluate(s, x, y) else {
                            continue;
                        };
                        if track_sig {
                            sig = fnv(sig, si as u64);
                        }
                        reached[li] = true;
                        if alpha > max_alpha[li] {
                            max_alpha[li] = alpha;
                        }
                        let wgt = alpha * t;
                        col[0] += wgt * s.color[0];
                        col[1] += wgt * s.color[1];
                        col[2] += wgt * s.color[2];
                        dep += wgt * s.depth;
                        if want_flow {
                            fl[0] += wgt * s.flow[0];
                            fl[1] += wgt * s.flow[1];
                        }
                        t *= 1.0 - alpha;
                        if t < term {
                            break;
                        }
                    }
                    out.color[p] = col;
                    out.depth[p] = dep;
                    out.opacity[p] = 1.0 - t;
                    if want_flow {
                        out.flow[p] = fl;
                    }
                    if track_sig {
                        out.signature = fnv(out.signature, sig);
                    }
                    p += 1;
                }
            }
            for (li, &si) in list.iter().enumerate() {
                if reached[li] {
                    out.touched.push((si, max_alpha[li]));
                }
            }
            out
        })
        .collect();

    let mut output = RenderOutput::empty(k.width, k.height, want_flow, projected.len());
    let mut signature = FNV_OFFSET;
    for (tile, tf) in tiles.into_iter().enumerate() {
        let (x0, x1, y0, y1) = tile_bounds(&binned, tile, k);
        let mut p = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * k.width + x;
                output.color.data[i] = tf.color[p];
                output.depth.data[i] = tf.depth[p];
                output.opacity.data[i] = tf.opacity[p];
                if let Some(f) = output.flow.as_mut() {
                    f.data[i] = tf.flow[p];
                }
                p += 1;
            }
        }
        for (si, a) in tf.touched {
            let slot = binned.splats[si as usize].slot;
            if a > output.max_alpha[slot] {
                output.max_alpha[slot] = a;
            }
        }
        signature = fnv(signature, tf.signature);
    }
    if track_sig {
        output.signature = Some(signature);
    }
    output
}

struct Contributor {
    si: u32,
    li: usize,
    g: f64,
    alpha: f64,
    t: f64,
    dx: f64,
    dy: f64,
}

/// Gradients with respect to every projected splat, indexed like `projected`.
pub(crate) fn composite_backward(
    projected: &[ProjectedGaussian],
    k: &CameraIntrinsics,
    settings: &RenderSettings,
    adj: &PixelAdjoint,
) -> Vec<SplatGrad> {
    let binned = prepare(projected, k);
    let ntiles = binned.tiles_x * binned.tiles_y;
    let term = settings.termination_transmittance;
    let zero3 = [0.0; 3];
    let zero2 = [0.0; 2];

    let partials: Vec<Vec<RawGrad>> = (0..ntiles)
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = tile_bounds(&binned, tile, k);
            let list = &binned.tile_lists[tile];
            let mut grads = vec![RawGrad::default(); list.len()];
            let mut contrib: Vec<Contributor> = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = y * k.width + x;
                    let ac = adj.color.as_ref().map_or(zero3, |im| im.data[i]);
                    let ad = adj.depth.as_ref().map_or(0.0, |im| im.data[i]);
                    let ao = adj.opacity.as_ref().map_or(0.0, |im| im.data[i]);
                    let af = adj.flow.as_ref().map_or(zero2, |im| im.data[i]);
                    if ac == zero3 && ad == 0.0 && ao == 0.0 && af == zero2 {
                        continue;
                    }
                    contrib.clear();
                    let mut t = 1.0;
                    for (li, &si) in list.iter().enumerate() {
                        let s = &binned.splats[si as usize];
                        let Some((g, alpha, dx, dy)) = evaluate(s, x, y) else {
                            continue;
                        };
                        contrib.push(Contributor {
                            si,
                            li,
                            g,
                            alpha,
                            t,
                            dx,
                            dy,
                        });
                        t *= 1.0 - alpha;
                        if t < term {
                            break;
                        }
                    }
                    // Values composited behind the current splat, starting from
                    // unit transmittance (background is zero in every channel).
                    let mut s_col = [0.0; 3];
                    let mut s_dep = 0.0;
                    let mut s_op = 0.0;
                    let mut s_fl = [0.0; 2];
                    for c in contrib.iter().rev() {
                        let s = &binned.splats[c.si as usize];
                        let gr = &mut grads[c.li];
                        let wt = c.alpha * c.t;
                        let mut g_alpha = 0.0;
                        for ch in 0..3 {
                            gr.color[ch] += ac[ch] * wt;
                            g_alpha += ac[ch] * c.t * (s.color[ch] - s_col[ch]);
                        }
                        gr.depth += ad * wt;
                        g_alpha += ad * c.t * (s.depth - s_dep);
                        g_alpha += ao * c.t * (1.0 - s_op);
                        for ch in 0..2 {
                            gr.flow[ch] += af[ch] * wt;
                            g_alpha += af[ch] * c.t * (s.flow[ch] - s_fl[ch]);
                        }
                        for ch in 0..3 {
                            s_col[ch] = c.alpha * s.color[ch] + (1.0 - c.alpha) * s_col[ch];
                        }
                        s_dep = c.alpha * s.depth + (1.0 - c.alpha) * s_dep;
                        s_op = c.alpha + (1.0 - c.alpha) * s_op;
                        for ch in 0..2 {
                            s_fl[ch] = c.alpha * s.flow[ch] + (1.0 - c.alpha) * s_fl[ch];
                        }

                        if s.opacity * c.g > 1.0 {
                            continue; // clamped
                        }
                        gr.opacity += g_alpha * c.g;
                        let g_m = -0.5 * g_alpha * c.alpha;
                        gr.mean2d[0] -= g_m * 2.0 * (s.a * c.dx + s.b * c.dy);
                        gr.mean2d[1] -= g_m * 2.0 * (s.b * c.dx + s.c * c.dy);
                        gr.conic[0] += g_m * c.dx * c.dx;
                        gr.conic[1] += g_m * 2.0 * c.dx * c.dy;
                        gr.conic[2] += g_m * c.dy * c.dy;
                    }
                }
            }
            grads
        })
        .collect();

    let mut raw = vec![RawGrad::default(); binned.splats.len()];
    for (tile, grads) in partials.iter().enumerate() {
        for (li, &si) in binned.tile_lists[tile].iter().enumerate() {
            raw[si as usize].add_assign(&grads[li]);
        }
    }

    let mut out = vec![SplatGrad::default(); projected.len()];
    for (s, r) in binned.splats.iter().zip(&raw) {
        let conic = Matrix2::new(s.a, s.b, s.b, s.c);
        let g_conic = Matrix2::new(r.conic[0], 0.5 * r.conic[1], 0.5 * r.conic[1], r.conic[2]);
        let mut g = SplatGrad {
            mean2d: r.mean2d,
            cov2d: -(conic * g_conic * conic),
            depth: r.depth,
            opacity: r.opacity,
            color: r.color,
            flow: r.flow,
        };
        if projected[s.slot].flow_dx.is_none() {
            g.flow = [0.0; 2];
        }
        out[s.slot].add_assign(&g);
    }
    out
}

impl RenderOutput {
    pub(crate) fn empty(width: usize, height: usize, flow: bool, n: usize) -> Self {
        Self {
            color: Image::new(width, height),
            depth: Image::new(width, height),
            opacity: Image::new(width, height),
            flow: flow.then(|| Image::new(width, height)),
            max_alpha: vec![0.0; n],
            signature: None,
        }
    }
}
