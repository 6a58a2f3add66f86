//! Trajectory and image-quality metrics.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{check_shape, Mask, RgbImage};
use crate::io::{atomic_write, TimedPose, MAX_ASSOCIATION_GAP};

/// Reported PSNR for (near) identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Pairs of `(estimated, ground truth)` camera centers matched by nearest
/// timestamp.
pub fn associate_centers(est: &[TimedPose], gt: &[TimedPose]) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut out = Vec::new();
    for e in est {
        let nearest = gt.iter().min_by(|a, b| {
            (a.timestamp - e.timestamp)
                .abs()
                .total_cmp(&(b.timestamp - e.timestamp).abs())
        });
        if let Some(g) =
            nearest.filter(|g| (g.timestamp - e.timestamp).abs() <= MAX_ASSOCIATION_GAP)
        {
            out.push((e.pose.center(), g.pose.center()));
        }
    }
    out
}

/// Rotation and translation minimizing `Σ |g − (R e + t)|²` (Umeyama without
/// scale).
pub fn align_rigid(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = pairs.len() as f64;
    let me = pairs.iter().map(|p| p.0).sum::<Vector3<f64>>() / n;
    let mg = pairs.iter().map(|p| p.1).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (e, g) in pairs {
        cov += (g - mg) * (e - me).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    (r, mg - r * me)
}

/// RMSE of the camera-center residuals after rigid alignment, in centimeters.
pub fn ate_rmse(est: &[TimedPose], gt: &[TimedPose]) -> Result<f64> {
    let pairs = associate_centers(est, gt);
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ATE needs at least 2 associated poses, got {}",
            pairs.len()
        )));
    }
    let (r, t) = align_rigid(&pairs);
    let sq: f64 = pairs
        .iter()
        .map(|(e, g)| (g - (r * e + t)).norm_squared())
        .sum();
    Ok((sq / pairs.len() as f64).sqrt() * 100.0)
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// `10·log10(1/MSE)` over all pixels and channels, capped at 99 dB.
pub fn psnr(pred: &RgbImage, target: &RgbImage) -> Result<f64> {
    check_shape(pred, target, "psnr")?;
    let se: f64 = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(psnr_from_mse(se / (3 * pred.len()).max(1) as f64))
}

/// PSNR restricted to the pixels where `mask` is true.
pub fn psnr_masked(pred: &RgbImage, target: &RgbImage, mask: &Mask) -> Result<f64> {
    check_shape(pred, target, "psnr")?;
    check_shape(pred, mask, "psnr mask")?;
    let mut se = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if mask.data[i] {
            se += (0..3)
                .map(|c| (pred.data[i][c] - target.data[i][c]).powi(2))
                .sum::<f64>();
            n += 3;
        }
    }
    Ok(psnr_from_mse(se / n.max(1) as f64))
}

/// `1 − 2·D-SSIM`, clamped to `[0, 1]`.
pub fn ssim(pred: &RgbImage, target: &RgbImage) -> Result<f64> {
    Ok(crate::loss::ssim(pred, target)?.clamp(0.0, 1.0))
}

/// Mean PSNR and SSIM over `(rendered, reference)` pairs.
pub fn image_metrics(pairs: &[(RgbImage, RgbImage)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no images to compare".into()));
    }
    let per: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|(p, t)| Ok((psnr(p, t)?, ssim(p, t)?)))
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok((
        per.iter().map(|p| p.0).sum::<f64>() / n,
        per.iter().map(|p| p.1).sum::<f64>() / n,
    ))
}

/// Metrics of one run. Missing values are written as `n/a`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub sequence: String,
    pub frames: usize,
    pub keyframes: usize,
    pub static_gaussians: usize,
    pub dynamic_gaussians: usize,
    pub ate_cm: Option<f64>,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    /// Mean flow loss on dynamic regions before and after deformation
    /// learning.
    pub flow_loss_initial: Option<f64>,
    pub flow_loss_final: Option<f64>,
}

fn opt(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.decimals$}"))
}

impl Report {
    /// `key = value` lines in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("sequence", self.sequence.clone()),
            ("frames", self.frames.to_string()),
            ("keyframes", self.keyframes.to_string()),
            ("static_gaussians", self.static_gaussians.to_string()),
            ("dynamic_gaussians", self.dynamic_gaussians.to_string()),
            ("ate_cm", opt(self.ate_cm, 4)),
            ("psnr_db", opt(self.psnr_db, 4)),
            ("ssim", opt(self.ssim, 5)),
            ("lpips", "n/a".to_string()),
            ("flow_loss_initial", opt(self.flow_loss_initial, 6)),
            ("flow_loss_final", opt(self.flow_loss_final, 6)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{:<10} {:>9} {:>9} {:>7} {:>6}",
            "sequence", "ATE[cm]", "PSNR[dB]", "SSIM", "LPIPS"
        )
        .unwrap();
        writeln!(
            s,
            "{:<10} {:>9} {:>9} {:>7} {:>6}",
            self.sequence,
            opt(self.ate_cm, 2),
            opt(self.psnr_db, 2),
            opt(self.ssim, 3),
            "n/a"
        )
        .unwrap();
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }
}

/// Reads `key = value` lines back.
pub fn parse_report(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{se3_exp, PoseSE3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj(poses: &[PoseSE3]) -> Vec<TimedPose> {
        poses
            .iter()
            .enumerate()
            .map(|(i, &pose)| TimedPose {
                timestamp: i as f64 * 0.1,
                pose,
            })
            .collect()
    }

    fn random_traj(rng: &mut ChaCha8Rng, n: usize) -> Vec<PoseSE3> {
        (0..n)
            .map(|_| {
                let mut t = [0.0; 6];
                t.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
                se3_exp(&t)
            })
            .collect()
    }

    #[test]
    fn ate_identity_and_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_traj(&mut rng, 10);
        assert!(ate_rmse(&traj(&gt), &traj(&gt)).unwrap() < 1e-12);
        // Moving every camera center by the same world offset.
        let shift = PoseSE3::new(Default::default(), Vector3::new(0.3, -1.0, 2.0));
        let moved: Vec<PoseSE3> = gt.iter().map(|p| p.compose(&shift.inverse())).collect();
        assert!(ate_rmse(&traj(&moved), &traj(&gt)).unwrap() < 1e-9);
    }

    #[test]
    fn ate_hand_example() {
        // Centers (0,0,0) and (1,0,0) against (0,0.01,0) and (1,-0.01,0): the
        // best rigid fit leaves 1 cm on each.
        let at =
            |x: f64, y: f64| PoseSE3::new(Default::default(), Vector3::new(x, y, 0.0)).inverse();
        let est = traj(&[at(0.0, 0.0), at(1.0, 0.0)]);
        let gt = traj(&[at(0.0, 0.01), at(1.0, -0.01)]);
        let ate = ate_rmse(&est, &gt).unwrap();
        let stretched = traj(&[at(0.0, 0.0), at(1.02, 0.0)]);
        assert!((ate_rmse(&est, &stretched).unwrap() - 1.0).abs() < 1e-9);
        // Rotation can absorb part of it: the optimum turns the segment by
        // atan(0.02); the residual is then the half-distance mismatch.
        let len_gt = (1.0f64 + 0.02 * 0.02).sqrt();
        let expect = (len_gt - 1.0) / 2.0 * 100.0;
        assert!((ate - expect).abs() < 1e-9, "{ate} vs {expect}");

        // Residuals a rotation cannot absorb: ±1 cm along the segment axis
        // cancels, so use three collinear points with the middle one off.
        let est = traj(&[at(-1.0, 0.0), at(0.0, 0.0), at(1.0, 0.0)]);
        let gt = traj(&[at(-1.0, 0.0), at(0.0, 0.015), at(1.0, 0.0)]);
        let ate = ate_rmse(&est, &gt).unwrap();
        // Best fit shifts y by 0.005: residuals −0.005, 0.01, −0.005.
        let expect = ((0.005f64.powi(2) * 2.0 + 0.01f64.powi(2)) / 3.0).sqrt() * 100.0;
        assert!((ate - expect).abs() < 1e-9, "{ate} vs {expect}");
    }

    #[test]
    fn ate_needs_two_associations() {
        let p = traj(&[PoseSE3::identity()]);
        assert!(ate_rmse(&p, &p).is_err());
        let mut far = traj(&[PoseSE3::identity(), PoseSE3::identity()]);
        far.iter_mut().for_each(|p| p.timestamp += 1.0);
        assert!(ate_rmse(&far, &traj(&[PoseSE3::identity(), PoseSE3::identity()])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ate_invariant_to_global_rigid_transform(seed in 0u64..10_000, tw in prop::array::uniform6(-2.0f64..2.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_traj(&mut rng, 8);
            let est: Vec<PoseSE3> = gt
                .iter()
                .map(|p| {
                    let mut t = [0.0; 6];
                    t.iter_mut().for_each(|v| *v = rng.gen_range(-0.02..0.02));
                    se3_exp(&t).compose(p)
                })
                .collect();
            let a = ate_rmse(&traj(&est), &traj(&gt)).unwrap();
            let g = se3_exp(&tw);
            // w2c ∘ g⁻¹ moves the world by g.
            let moved: Vec<PoseSE3> = est.iter().map(|p| p.compose(&g.inverse())).collect();
            let b = ate_rmse(&traj(&moved), &traj(&gt)).unwrap();
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn psnr_examples() {
        let a = RgbImage::filled(8, 8, [0.5; 3]);
        let b = RgbImage::filled(8, 8, [0.0; 3]);
        assert!((psnr(&a, &b).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert!(psnr(&a, &RgbImage::filled(4, 8, [0.0; 3])).is_err());
        let half = Mask::from_fn(8, 8, |x, _| x < 4);
        let mut c = a.clone();
        for y in 0..8 {
            for x in 4..8 {
                c.set(x, y, [0.0; 3]);
            }
        }
        assert_eq!(psnr_masked(&c, &a, &half).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = RgbImage::from_fn(24, 16, |_, _| [rng.gen_range(0.2..0.8); 3]);
        let noise = RgbImage::from_fn(24, 16, |_, _| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        });
        let values: Vec<f64> = [0.01, 0.02, 0.04, 0.08, 0.16]
            .iter()
            .map(|&amp| {
                let noisy = RgbImage::from_fn(24, 16, |x, y| {
                    let (b, n) = (base.get(x, y), noise.get(x, y));
                    [b[0] + amp * n[0], b[1] + amp * n[1], b[2] + amp * n[2]]
                });
                psnr(&noisy, &base).unwrap()
            })
            .collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = RgbImage::from_fn(20, 16, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let b = RgbImage::from_fn(20, 16, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let (p, s) = image_metrics(&[(a.clone(), a.clone()), (a.clone(), a)]).unwrap();
        assert_eq!(p, PSNR_CAP_DB);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_keys_in_stable_order() {
        let r = Report {
            sequence: "synthetic".into(),
            frames: 30,
            ate_cm: Some(0.5),
            psnr_db: Some(31.25),
            ssim: Some(0.95),
            ..Default::default()
        };
        let text = r.to_text();
        let keys: Vec<String> = parse_report(&text).into_iter().map(|(k, _)| k).collect();
        assert_eq!(
            keys,
            [
                "sequence",
                "frames",
                "keyframes",
                "static_gaussians",
                "dynamic_gaussians",
                "ate_cm",
                "psnr_db",
                "ssim",
                "lpips",
                "flow_loss_initial",
                "flow_loss_final"
            ]
        );
        assert!(text.contains("ate_cm = 0.5000\n") && text.contains("lpips = n/a\n"));
        assert_eq!(text, r.clone().to_text());
        assert!(r.table().contains("31.25"));
    }
}
