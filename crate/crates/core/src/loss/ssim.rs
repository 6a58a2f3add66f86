//! Structural dissimilarity with an 11×11 Gaussian window and its adjoint.

use crate::error::Result;
use crate::image::{check_shape, RgbImage};

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; WINDOW] {
    let r = (WINDOW / 2) as f64;
    let mut k = [0.0; WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Valid-mode separable blur: `w × h` → `(w − 10) × (h − 10)`.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let row = &src[y * w + x..y * w + x + WINDOW];
            tmp[y * ow + x] = row.iter().zip(k).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (j, kj) in k.iter().enumerate() {
                s += kj * tmp[(y + j) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`blur`].
fn blur_transpose(g: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for (j, kj) in k.iter().enumerate() {
                tmp[(y + j) * ow + x] += kj * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (i, ki) in k.iter().enumerate() {
                out[y * w + x + i] += ki * v;
            }
        }
    }
    out
}

/// Local statistics → SSIM value and its partials with respect to
/// `(μx, E[x²], E[xy])`, treating them as independent.
#[inline]
fn ssim_terms(mx: f64, my: f64, exx: f64, eyy: f64, exy: f64) -> (f64, f64, f64, f64) {
    let sxx = exx - mx * mx;
    let syy = eyy - my * my;
    let sxy = exy - mx * my;
    let a1 = 2.0 * mx * my + C1;
    let a2 = 2.0 * sxy + C2;
    let b1 = mx * mx + my * my + C1;
    let b2 = sxx + syy + C2;
    let d = b1 * b2;
    let s = a1 * a2 / d;
    let g_exx = -s / b2;
    let g_exy = 2.0 * a1 / d;
    let g_mx = (2.0 * my * a2 - 2.0 * my * a1) / d - s * 2.0 * mx / b1 + s * 2.0 * mx / b2;
    (s, g_mx, g_exx, g_exy)
}

/// Mean SSIM over channels and window positions, with `dSSIM/dpred` when
/// requested.
fn ssim_channels(pred: &RgbImage, target: &RgbImage, want_grad: bool) -> (f64, Option<RgbImage>) {
    let (w, h) = (pred.width, pred.height);
    let n = w * h;
    let mut grad = want_grad.then(|| RgbImage::new(w, h));
    let mut total = 0.0;
    let global = w < WINDOW || h < WINDOW;
    let k = kernel();
    for ch in 0..3 {
        let x: Vec<f64> = pred.data.iter().map(|p| p[ch]).collect();
        let y: Vec<f64> = target.data.iter().map(|p| p[ch]).collect();
        if global {
            let inv = 1.0 / n as f64;
            let mx = x.iter().sum::<f64>() * inv;
            let my = y.iter().sum::<f64>() * inv;
            let exx = x.iter().map(|v| v * v).sum::<f64>() * inv;
            let eyy = y.iter().map(|v| v * v).sum::<f64>() * inv;
            let exy = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() * inv;
            let (s, g_mx, g_exx, g_exy) = ssim_terms(mx, my, exx, eyy, exy);
            total += s;
            if let Some(g) = grad.as_mut() {
                for i in 0..n {
                    g.data[i][ch] = inv * (g_mx + 2.0 * x[i] * g_exx + y[i] * g_exy) / 3.0;
                }
            }
            continue;
        }
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = blur(&x, w, h, &k);
        let my = blur(&y, w, h, &k);
        let exx = blur(&xx, w, h, &k);
        let eyy = blur(&yy, w, h, &k);
        let exy = blur(&xy, w, h, &k);
        let m = mx.len();
        let inv = 1.0 / m as f64;
        let mut gm = vec![0.0; m];
        let mut gxx = vec![0.0; m];
        let mut gxy = vec![0.0; m];
        let mut sum = 0.0;
        for q in 0..m {
            let (s, a, b, c) = ssim_terms(mx[q], my[q], exx[q], eyy[q], exy[q]);
            sum += s;
            gm[q] = a * inv;
            gxx[q] = b * inv;
            gxy[q] = c * inv;
        }
        total += sum * inv;
        if let Some(g) = grad.as_mut() {
            let tm = blur_transpose(&gm, w, h, &k);
            let txx = blur_transpose(&gxx, w, h, &k);
            let txy = blur_transpose(&gxy, w, h, &k);
            for i in 0..n {
                g.data[i][ch] = (tm[i] + 2.0 * x[i] * txx[i] + y[i] * txy[i]) / 3.0;
            }
        }
    }
    (total / 3.0, grad)
}

/// Mean SSIM in `[-1, 1]` (1 for identical images).
pub fn ssim(pred: &RgbImage, target: &RgbImage) -> Result<f64> {
    check_shape(pred, target, "ssim")?;
    Ok(ssim_channels(pred, target, false).0)
}

/// `(1 − SSIM) / 2` and its adjoint with respect to `pred`.
pub fn d_ssim(pred: &RgbImage, target: &RgbImage) -> Result<(f64, RgbImage)> {
    check_shape(pred, target, "d_ssim")?;
    let (s, g) = ssim_channels(pred, target, true);
    let g = g.expect("gradient requested").map(|p| p.map(|v| -0.5 * v));
    Ok(((1.0 - s) / 2.0, g))
}
