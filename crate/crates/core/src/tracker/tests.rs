use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gaussian::{GaussianPrimitive, GaussianSet};
use crate::se3::se3_exp;

#[test]
fn gate_on_constant_and_step_images() {
    let flat = RgbImage::filled(10, 8, [0.3, 0.3, 0.3]);
    assert_eq!(gradient_gate_mask(&flat, 0.01).count(), 0);
    let step = RgbImage::from_fn(10, 8, |x, _| if x < 5 { [0.0; 3] } else { [1.0; 3] });
    let m = gradient_gate_mask(&step, 0.01);
    for y in 0..8 {
        assert!(m.get(4, y) && m.get(5, y));
        assert!(!m.get(0, y) && !m.get(9, y));
    }
    let ramp = RgbImage::from_fn(10, 8, |x, _| [x as f64 * 1e-3; 3]);
    assert_eq!(gradient_gate_mask(&ramp, 0.0).count(), 80);
}

#[test]
fn exposure_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = RgbImage::from_fn(5, 4, |_, _| {
        [
            rng.gen_range(0.0..0.8),
            rng.gen_range(0.0..0.8),
            rng.gen_range(0.0..0.8),
        ]
    });
    let g = RgbImage::from_fn(5, 4, |_, _| {
        [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]
    });
    let e = Exposure {
        log_gain: 0.1,
        offset: 0.02,
    };
    let dot = |e: &Exposure| -> f64 {
        e.apply(&c)
            .data
            .iter()
            .zip(&g.data)
            .map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
            .sum()
    };
    let (_, gp) = e.backward(&c, &g);
    let h = 1e-7;
    let fd0 = (dot(&Exposure {
        log_gain: e.log_gain + h,
        ..e
    }) - dot(&Exposure {
        log_gain: e.log_gain - h,
        ..e
    })) / (2.0 * h);
    let fd1 = (dot(&Exposure {
        offset: e.offset + h,
        ..e
    }) - dot(&Exposure {
        offset: e.offset - h,
        ..e
    })) / (2.0 * h);
    assert!((fd0 - gp[0]).abs() < 1e-6 && (fd1 - gp[1]).abs() < 1e-6);
}

fn toy_map(rng: &mut ChaCha8Rng, n: usize) -> StaticMap {
    let mut set = GaussianSet::default();
    for i in 0..n {
        let g = GaussianPrimitive::isotropic(
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(2.0..3.0),
            ],
            rng.gen_range(0.04..0.1),
            rng.gen_range(0.6..0.95),
            [
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            ],
        );
        set.push(g, i as u64);
    }
    StaticMap(set)
}

fn cam() -> CameraIntrinsics {
    CameraIntrinsics::new(40.0, 40.0, 23.5, 17.5, 48, 36).unwrap()
}

#[test]
fn tracking_loss_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let map = toy_map(&mut rng, 80);
    let k = cam();
    let r = render_gaussians(
        map.gaussians(),
        None,
        &PoseSE3::identity(),
        &k,
        &RenderSettings::default(),
    )
    .output;
    let all = Mask::filled(48, 36, true);
    let obs = Observation {
        color: &r.color,
        depth: &r.depth,
        static_mask: &all,
    };
    let tl = tracking_loss(&r, &obs, &all, &Exposure::default(), 0.9, 0.95).unwrap();
    assert_eq!(tl.value, 0.0);

    // Uniform color error e, no depth error: 0.9 · mean(O) · e.
    let e = 0.1;
    let brighter = r.color.map(|p| p.map(|v| v + e));
    let obs = Observation {
        color: &brighter,
        depth: &r.depth,
        static_mask: &all,
    };
    let tl = tracking_loss(&r, &obs, &all, &Exposure::default(), 0.9, 0.95).unwrap();
    let mean_o: f64 = r.opacity.data.iter().sum::<f64>() / r.opacity.len() as f64;
    assert!((tl.value - 0.9 * mean_o * e).abs() < 1e-12);

    // Depth is only compared where O > 0.95.
    let mut half = r.clone();
    half.opacity.data.iter_mut().for_each(|o| *o = 0.5);
    let deeper = r.depth.map(|d| d + 1.0);
    let obs = Observation {
        color: &r.color,
        depth: &deeper,
        static_mask: &all,
    };
    let tl = tracking_loss(&half, &obs, &all, &Exposure::default(), 0.9, 0.95).unwrap();
    assert_eq!(tl.value, 0.0);

    let none = Mask::filled(48, 36, false);
    let obs = Observation {
        color: &r.color,
        depth: &r.depth,
        static_mask: &none,
    };
    assert!(matches!(
        tracking_loss(&r, &obs, &all, &Exposure::default(), 0.9, 0.95),
        Err(Error::Untrackable)
    ));
}

#[test]
fn tracking_loss_ignores_dynamic_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let map = toy_map(&mut rng, 60);
    let k = cam();
    let r = render_gaussians(
        map.gaussians(),
        None,
        &se3_exp(&[0.01, 0.0, 0.0, 0.0, 0.01, 0.0]),
        &k,
        &RenderSettings::default(),
    )
    .output;
    let color = RgbImage::from_fn(48, 36, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
    let depth = DepthImage::from_fn(48, 36, |_, _| rng.gen_range(1.0..3.0));
    let mask = Mask::from_fn(48, 36, |x, y| {
        !(10..25).contains(&x) || !(5..20).contains(&y)
    });
    let gate = gradient_gate_mask(&color, 0.01);
    let obs = Observation {
        color: &color,
        depth: &depth,
        static_mask: &mask,
    };
    let a = tracking_loss(&r, &obs, &gate, &Exposure::default(), 0.9, 0.95)
        .unwrap()
        .value;
    let mut color2 = color.clone();
    let mut depth2 = depth.clone();
    for i in 0..mask.len() {
        if !mask.data[i] {
            color2.data[i] = [rng.gen(), rng.gen(), rng.gen()];
            depth2.data[i] = rng.gen_range(0.0..9.0);
        }
    }
    let obs = Observation {
        color: &color2,
        depth: &depth2,
        static_mask: &mask,
    };
    let b = tracking_loss(&r, &obs, &gate, &Exposure::default(), 0.9, 0.95)
        .unwrap()
        .value;
    assert_eq!(a, b);
}

#[test]
fn tracking_at_ground_truth_stays_put() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let map = toy_map(&mut rng, 150);
    let k = cam();
    let pose = se3_exp(&[0.02, -0.01, 0.0, 0.01, 0.02, 0.0]);
    let r = render_gaussians(map.gaussians(), None, &pose, &k, &RenderSettings::default()).output;
    let all = Mask::filled(48, 36, true);
    let obs = Observation {
        color: &r.color,
        depth: &r.depth,
        static_mask: &all,
    };
    let res = track_frame(
        &map,
        &obs,
        &pose,
        &Exposure::default(),
        &k,
        &Config::default(),
    )
    .unwrap();
    assert_eq!(res.final_loss, 0.0);
    assert_eq!(res.pose, pose);
    assert!(res.converged);
}

#[test]
fn tracking_recovers_a_small_perturbation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let map = toy_map(&mut rng, 200);
    let k = cam();
    let gt = PoseSE3::identity();
    let r = render_gaussians(map.gaussians(), None, &gt, &k, &RenderSettings::default()).output;
    let all = Mask::filled(48, 36, true);
    let obs = Observation {
        color: &r.color,
        depth: &r.depth,
        static_mask: &all,
    };
    let init = se3_exp(&[0.01, -0.01, 0.005, 0.01, -0.005, 0.0]);
    let res = track_frame(
        &map,
        &obs,
        &init,
        &Exposure::default(),
        &k,
        &Config::default(),
    )
    .unwrap();
    let err = res.pose.compose(&gt.inverse());
    assert!(err.translation.norm() < 0.003, "{}", err.translation.norm());
    assert!(err.rotation.angle() < 0.2f64.to_radians());
    assert!(res.pose.rotation.as_ref().norm() - 1.0 < 1e-9);
}

#[test]
fn doubled_brightness_is_absorbed_by_gain() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let map = toy_map(&mut rng, 150);
    let k = cam();
    let gt = PoseSE3::identity();
    let r = render_gaussians(map.gaussians(), None, &gt, &k, &RenderSettings::default()).output;
    let bright = r.color.map(|p| p.map(|v| 2.0 * v));
    let all = Mask::filled(48, 36, true);
    let obs = Observation {
        color: &bright,
        depth: &r.depth,
        static_mask: &all,
    };
    let mut cfg = Config::default();
    cfg.tracking.iterations = 300;
    cfg.tracking.lr_exposure = 0.02;
    let res = track_frame(&map, &obs, &gt, &Exposure::default(), &k, &cfg).unwrap();
    assert!((res.exposure.log_gain - 2f64.ln()).abs() < 0.05, "{res:?}");
    let err = res.pose.compose(&gt.inverse());
    assert!(err.translation.norm() < 0.005 && err.rotation.angle() < 0.5f64.to_radians());
}

#[test]
fn constant_velocity_prediction() {
    let a = se3_exp(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let b = se3_exp(&[0.01, 0.0, 0.0, 0.0, 0.02, 0.0]);
    let c = predict_pose(&a, &b);
    let expect = se3_exp(&[0.01, 0.0, 0.0, 0.0, 0.02, 0.0]).compose(&b);
    assert!((c.translation - expect.translation).norm() < 1e-12);
    assert!(c.rotation.angle_to(&expect.rotation) < 1e-12);
}
