use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::camera::CameraIntrinsics;
use crate::gaussian::{get_grad, get_param, set_param, PARAMS_PER_GAUSSIAN};
use crate::render::{render_gaussians, render_gaussians_backward, RenderSettings};
use crate::se3::PoseSE3;

fn random_rgb(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

#[test]
fn masked_l1_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_rgb(&mut rng, 8, 6);
    let all = Mask::filled(8, 6, true);
    assert_eq!(masked_l1(&a, &a, &all, None).unwrap().0, 0.0);
    let b = a.map(|p| p.map(|v| v + 0.5));
    assert!((masked_l1(&a, &b, &all, None).unwrap().0 - 0.5).abs() < 1e-15);
    let none = Mask::filled(8, 6, false);
    let (v, g) = masked_l1(&a, &b, &none, None).unwrap();
    assert_eq!(v, 0.0);
    assert!(g.data.iter().all(|p| *p == [0.0; 3]));
    let small = RgbImage::new(4, 4);
    assert!(masked_l1(&a, &small, &all, None).is_err());
}

#[test]
fn masked_l1_adjoint_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_rgb(&mut rng, 7, 5);
    let b = random_rgb(&mut rng, 7, 5);
    let mask = Mask::from_fn(7, 5, |x, y| (x + y) % 3 != 0);
    let w = DepthImage::from_fn(7, 5, |_, _| rng.gen_range(0.5..2.0));
    let (_, g) = masked_l1(&a, &b, &mask, Some(&w)).unwrap();
    let h = 1e-7;
    for i in 0..a.len() {
        for c in 0..3 {
            let mut p = a.clone();
            let mut m = a.clone();
            p.data[i][c] += h;
            m.data[i][c] -= h;
            let fd = (masked_l1(&p, &b, &mask, Some(&w)).unwrap().0
                - masked_l1(&m, &b, &mask, Some(&w)).unwrap().0)
                / (2.0 * h);
            assert!((fd - g.data[i][c]).abs() < 1e-6, "{fd} vs {}", g.data[i][c]);
        }
    }
}

#[test]
fn iso_cases() {
    let mut g = GaussianPrimitive::isotropic([0.0; 3], 0.3, 0.5, [0.5; 3]);
    assert!(iso_loss(&[g]).0.abs() < 1e-15);
    g.log_scale = [0.0, 0.0, 4f64.ln()];
    assert!((iso_loss(&[g]).0 - 4.0).abs() < 1e-12);
}

#[test]
fn iso_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gs: Vec<GaussianPrimitive> = (0..10)
        .map(|_| {
            let mut g = GaussianPrimitive::isotropic([0.0; 3], 0.1, 0.5, [0.5; 3]);
            g.log_scale = [
                rng.gen_range(-3.0..0.0),
                rng.gen_range(-3.0..0.0),
                rng.gen_range(-3.0..0.0),
            ];
            g
        })
        .collect();
    let (v, grads) = iso_loss(&gs);
    assert!(v >= 0.0);
    let h = 1e-7;
    for i in 0..gs.len() {
        for k in 0..3 {
            let mut p = gs.clone();
            let mut m = gs.clone();
            p[i].log_scale[k] += h;
            m[i].log_scale[k] -= h;
            let fd = (iso_loss(&p).0 - iso_loss(&m).0) / (2.0 * h);
            assert!((fd - grads[i][k]).abs() < 1e-6);
        }
    }
}

#[test]
fn flow_loss_cases() {
    let z = FlowImage::new(6, 4);
    let one = FlowImage::filled(6, 4, [1.0, 0.0]);
    let region = Mask::filled(6, 4, true);
    assert_eq!(flow_loss(&z, &z, &z, &z, &region).unwrap().0, 0.0);
    assert!((flow_loss(&one, &z, &z, &z, &region).unwrap().0 - 1.0).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r = |rng: &mut ChaCha8Rng| {
        FlowImage::from_fn(6, 4, |_, _| {
            [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]
        })
    };
    let (a, b, c, d) = (r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng));
    let x = flow_loss(&a, &b, &c, &d, &region).unwrap().0;
    let y = flow_loss(&b, &a, &d, &c, &region).unwrap().0;
    assert!((x - y).abs() < 1e-14);
    let empty = Mask::filled(6, 4, false);
    assert_eq!(flow_loss(&a, &b, &c, &d, &empty).unwrap().0, 0.0);
}

#[test]
fn weighted_sums_use_configured_weights() {
    let w = LossWeights::default();
    let ones = MappingTerms {
        l1_color: 1.0,
        l1_depth: 1.0,
        flow: 1.0,
        arap: 1.0,
        iso: 1.0,
    };
    assert!((ones.total(&w) - 14.0001).abs() < 1e-12);
    assert_eq!(MappingTerms::default().total(&w), 0.0);
    let r = RefinementTerms {
        d_ssim: 1.0,
        l1_color: 1.0,
        l1_depth: 1.0,
        arap: 0.0,
        iso: 0.0,
    };
    assert!((r.total(&w) - 1.1).abs() < 1e-12);
    assert_eq!(RefinementTerms::default().total(&w), 0.0);
}

fn toy_scene(rng: &mut ChaCha8Rng) -> (Vec<GaussianPrimitive>, CameraIntrinsics) {
    let k = CameraIntrinsics::new(18.0, 18.0, 7.5, 7.5, 16, 16).unwrap();
    let gs = (0..8)
        .map(|_| {
            let mut g = GaussianPrimitive::isotropic(
                [
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(1.5..2.5),
                ],
                rng.gen_range(0.08..0.2),
                rng.gen_range(0.4..0.9),
                [
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                ],
            );
            g.log_scale[1] += rng.gen_range(-0.3..0.3);
            g
        })
        .collect();
    (gs, k)
}

#[test]
fn stage_one_differs_only_inside_motion_region() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (gs, k) = toy_scene(&mut rng);
    let r = render_gaussians(
        &gs,
        None,
        &PoseSE3::identity(),
        &k,
        &RenderSettings::default(),
    );
    let color = random_rgb(&mut rng, 16, 16);
    let depth = DepthImage::from_fn(16, 16, |_, _| rng.gen_range(1.0..3.0));
    let mask = Mask::from_fn(16, 16, |x, _| x < 10);
    let obs = Observation {
        color: &color,
        depth: &depth,
        static_mask: &mask,
    };
    let w = LossWeights::default();
    let e = Exposure::default();
    let a = image_loss(&r.output, &obs, &e, &w, 0.95, Objective::Stage1).unwrap();
    let b = image_loss(&r.output, &obs, &e, &w, 0.95, Objective::Stage2).unwrap();
    let (ca, cb) = (a.adjoint.color.unwrap(), b.adjoint.color.unwrap());
    for y in 0..16 {
        for x in 0..16 {
            let (pa, pb) = (ca.get(x, y), cb.get(x, y));
            if mask.get(x, y) {
                assert_eq!(pa, pb);
            } else {
                for c in 0..3 {
                    assert!((pa[c] - 2.0 * pb[c]).abs() < 1e-15);
                }
            }
        }
    }
}

#[test]
fn perfect_fit_costs_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (gs, k) = toy_scene(&mut rng);
    let r = render_gaussians(
        &gs,
        None,
        &PoseSE3::identity(),
        &k,
        &RenderSettings::default(),
    );
    let mask = Mask::filled(16, 16, true);
    let obs = Observation {
        color: &r.output.color,
        depth: &r.output.depth,
        static_mask: &mask,
    };
    for obj in [Objective::Stage1, Objective::Stage2, Objective::Refinement] {
        let l = image_loss(
            &r.output,
            &obs,
            &Exposure::default(),
            &LossWeights::default(),
            0.95,
            obj,
        )
        .unwrap();
        assert!(l.value.abs() < 1e-12, "{obj:?}: {}", l.value);
    }
}

#[test]
fn refinement_adjoint_routes_to_gaussians() {
    let settings = RenderSettings {
        track_signature: true,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (gs, k) = toy_scene(&mut rng);
    let pose = PoseSE3::identity();
    // Targets offset from the render keep every L1 residual away from its kink.
    let base = render_gaussians(&gs, None, &pose, &k, &settings);
    let color = base
        .output
        .color
        .map(|p| p.map(|v| if v > 0.5 { v - 0.2 } else { v + 0.2 }));
    let depth = base.output.depth.map(|d| d + 0.3);
    let mask = Mask::filled(16, 16, true);
    let obs = Observation {
        color: &color,
        depth: &depth,
        static_mask: &mask,
    };
    let w = LossWeights::default();
    let exposure = Exposure {
        log_gain: 0.05,
        offset: -0.01,
    };
    let f = |gs: &[GaussianPrimitive], e: &Exposure| {
        let r = render_gaussians(gs, None, &pose, &k, &settings);
        let l = image_loss(&r.output, &obs, e, &w, 0.95, Objective::Refinement).unwrap();
        let gate_sig: u64 = r
            .output
            .opacity
            .data
            .iter()
            .map(|&o| (o > 0.95) as u64)
            .sum();
        (l.value, (r.output.signature, gate_sig))
    };
    let loss = image_loss(
        &base.output,
        &obs,
        &exposure,
        &w,
        0.95,
        Objective::Refinement,
    )
    .unwrap();
    let grad = render_gaussians_backward(&gs, &pose, &k, &settings, &base, &loss.adjoint);
    let (_, sig) = f(&gs, &exposure);
    let h = 1e-6;
    let mut checked = 0;
    for i in 0..gs.len() {
        for j in 0..PARAMS_PER_GAUSSIAN {
            let mut p = gs.clone();
            let mut m = gs.clone();
            set_param(&mut p[i], j, get_param(&gs[i], j) + h);
            set_param(&mut m[i], j, get_param(&gs[i], j) - h);
            let (fp, sp) = f(&p, &exposure);
            let (fm, sm) = f(&m, &exposure);
            if sp != sig || sm != sig {
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            let an = get_grad(&grad.gaussians[i], j);
            assert!(
                (an - fd).abs() <= 1e-6 + 1e-3 * fd.abs(),
                "{i}/{j}: {an} vs {fd}"
            );
            checked += 1;
        }
    }
    assert!(checked > 60);
    for (idx, d) in [(0, [h, 0.0]), (1, [0.0, h])] {
        let ep = Exposure {
            log_gain: exposure.log_gain + d[0],
            offset: exposure.offset + d[1],
        };
        let em = Exposure {
            log_gain: exposure.log_gain - d[0],
            offset: exposure.offset - d[1],
        };
        let fd = (f(&gs, &ep).0 - f(&gs, &em).0) / (2.0 * h);
        assert!((loss.exposure_grad[idx] - fd).abs() <= 1e-6 + 1e-3 * fd.abs());
    }
}
