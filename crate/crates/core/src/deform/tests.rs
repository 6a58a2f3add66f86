use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::DeformConfig;
use crate::gaussian::{get_grad, get_param, set_param, PARAMS_PER_GAUSSIAN};

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> ControlPointSet {
    ControlPointSet {
        positions: (0..n)
            .map(|_| {
                [
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(1.0..2.0),
                ]
            })
            .collect(),
        log_radii: (0..n).map(|_| rng.gen_range(0.2f64..0.5).ln()).collect(),
    }
}

fn random_gaussians(rng: &mut ChaCha8Rng, n: usize) -> Vec<GaussianPrimitive> {
    (0..n)
        .map(|_| {
            let q = UnitQuaternion::from_euler_angles(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let mut g = GaussianPrimitive::isotropic(
                [
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(1.0..2.0),
                ],
                0.05,
                0.7,
                [0.5; 3],
            );
            g.rot = [q.w, q.i, q.j, q.k];
            g.dynamic = true;
            g
        })
        .collect()
}

fn random_field(
    rng: &mut ChaCha8Rng,
    points: ControlPointSet,
    canonical: &[GaussianPrimitive],
) -> DeformField {
    let cfg = DeformConfig {
        hidden_width: 12,
        position_bands: 2,
        time_bands: 2,
        ..DeformConfig::default()
    };
    let mut f = DeformField::new(points, &cfg, rng);
    for p in f.net.params.iter_mut() {
        *p = rng.gen_range(-0.4..0.4);
    }
    f.bind(canonical);
    f
}

fn random_transform(rng: &mut ChaCha8Rng) -> ControlTransform {
    let aa = [
        rng.gen_range(-0.3..0.3),
        rng.gen_range(-0.3..0.3),
        rng.gen_range(-0.3..0.3),
    ];
    ControlTransform {
        rotation: crate::se3::axis_angle_to_raw(&aa),
        translation: [
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
        ],
    }
}

fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b}");
}

#[test]
fn zero_initialized_field_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gs = random_gaussians(&mut rng, 20);
    let pts = random_points(&mut rng, 8);
    let mut f = DeformField::new(pts, &DeformConfig::default(), &mut rng);
    f.bind(&gs);
    for t in [0.0, 0.3, 1.0] {
        let d = deform_gaussians(&gs, &f, t);
        for (a, b) in d.gaussians.iter().zip(&gs) {
            for c in 0..3 {
                assert_close(a.mean[c], b.mean[c], 1e-12);
            }
            for c in 0..4 {
                assert_close(a.rot[c], b.rot[c], 1e-12);
            }
            assert_eq!(a.log_scale, b.log_scale);
        }
    }
}

#[test]
fn empty_control_set_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gs = random_gaussians(&mut rng, 5);
    let mut f = DeformField::empty(&DeformConfig::default(), &mut rng);
    f.bind(&gs);
    assert_eq!(deform_gaussians(&gs, &f, 0.5).gaussians, gs);
}

#[test]
fn common_rigid_motion_moves_every_gaussian_rigidly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts = random_points(&mut rng, 6);
    let gs = random_gaussians(&mut rng, 30);
    let rigid = random_transform(&mut rng);
    let r = rotation_from_raw(&rigid.rotation);
    let t = Vector3::from(rigid.translation);
    // Rotation about each control point, so express x ↦ Rx + T per point.
    let transforms: Vec<ControlTransform> = pts
        .positions
        .iter()
        .map(|p| {
            let p = Vector3::from(*p);
            ControlTransform {
                rotation: rigid.rotation,
                translation: (r * p + t - p).into(),
            }
        })
        .collect();
    let bindings: Vec<Vec<usize>> = gs
        .iter()
        .map(|g| knn_neighbors(&pts.positions, &g.mean, 4).unwrap())
        .collect();
    let out = blend(&gs, &pts, &transforms, &bindings);
    for (a, g) in out.iter().zip(&gs) {
        let expect = r * g.mean_vec() + t;
        for c in 0..3 {
            assert_close(a.mean[c], expect[c], 1e-12);
        }
        let q = quat_mul(&rigid.rotation, &g.rot);
        for c in 0..4 {
            assert_close(a.rot[c], q[c], 1e-12);
        }
    }
}

#[test]
fn blending_commutes_with_global_rigid_motion() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts = random_points(&mut rng, 8);
    let gs = random_gaussians(&mut rng, 25);
    let transforms: Vec<ControlTransform> = (0..8).map(|_| random_transform(&mut rng)).collect();
    let bindings: Vec<Vec<usize>> = gs
        .iter()
        .map(|g| knn_neighbors(&pts.positions, &g.mean, 4).unwrap())
        .collect();
    let global = random_transform(&mut rng);
    let rg = rotation_from_raw(&global.rotation);
    let tg = Vector3::from(global.translation);
    let move_point = |p: &[f64; 3]| -> [f64; 3] { (rg * Vector3::from(*p) + tg).into() };

    let moved_pts = ControlPointSet {
        positions: pts.positions.iter().map(move_point).collect(),
        log_radii: pts.log_radii.clone(),
    };
    let moved_gs: Vec<GaussianPrimitive> = gs
        .iter()
        .map(|g| {
            let mut g = *g;
            g.mean = move_point(&g.mean);
            g.rot = quat_mul(&global.rotation, &g.rot);
            g
        })
        .collect();
    let conj = crate::se3::quat_conj(&global.rotation);
    let moved_tr: Vec<ControlTransform> = transforms
        .iter()
        .map(|t| ControlTransform {
            rotation: quat_mul(&quat_mul(&global.rotation, &t.rotation), &conj),
            translation: (rg * Vector3::from(t.translation)).into(),
        })
        .collect();

    let a = blend(&moved_gs, &moved_pts, &moved_tr, &bindings);
    let b = blend(&gs, &pts, &transforms, &bindings);
    for (x, y) in a.iter().zip(&b) {
        let expect = move_point(&y.mean);
        for c in 0..3 {
            assert_close(x.mean[c], expect[c], 1e-6);
        }
        let q = quat_mul(&global.rotation, &y.rot);
        let s = if dot4(&q, &x.rot) < 0.0 { -1.0 } else { 1.0 };
        for c in 0..4 {
            assert_close(x.rot[c], s * q[c], 1e-6);
        }
    }
}

fn weighted_sum(out: &[GaussianPrimitive], w: &[[f64; PARAMS_PER_GAUSSIAN]]) -> f64 {
    out.iter()
        .zip(w)
        .map(|(g, w)| {
            (0..PARAMS_PER_GAUSSIAN)
                .map(|j| w[j] * get_param(g, j))
                .sum::<f64>()
        })
        .sum()
}

#[test]
fn deformation_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts = random_points(&mut rng, 6);
    let gs = random_gaussians(&mut rng, 8);
    let mut field = random_field(&mut rng, pts, &gs);
    let t = 0.37;
    let w: Vec<[f64; PARAMS_PER_GAUSSIAN]> = (0..gs.len())
        .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
        .collect();
    let grads: Vec<GaussianGrad> = w
        .iter()
        .map(|w| {
            let mut g = GaussianGrad::default();
            g.mean = [w[0], w[1], w[2]];
            g.rot = [w[3], w[4], w[5], w[6]];
            g.log_scale = [w[7], w[8], w[9]];
            g.opacity_logit = w[10];
            g.color = [w[11], w[12], w[13]];
            g
        })
        .collect();
    let d = deform_gaussians(&gs, &field, t);
    let mut dg = DeformGrad::zeros(&field);
    let cg = deform_gaussians_backward(&gs, &field, &d, &grads, &mut dg);

    let h = 1e-6;
    let tol = |a: f64, f: f64| (a - f).abs() <= 1e-6 + 1e-4 * f.abs().max(a.abs());
    let eval = |gs: &[GaussianPrimitive], f: &DeformField| {
        weighted_sum(&deform_gaussians(gs, f, t).gaussians, &w)
    };

    for i in 0..gs.len() {
        for j in 0..PARAMS_PER_GAUSSIAN {
            let mut a = gs.clone();
            let mut b = gs.clone();
            set_param(&mut a[i], j, get_param(&gs[i], j) + h);
            set_param(&mut b[i], j, get_param(&gs[i], j) - h);
            let fd = (eval(&a, &field) - eval(&b, &field)) / (2.0 * h);
            let an = get_grad(&cg[i], j);
            assert!(tol(an, fd), "canonical {i}/{j}: {an} vs {fd}");
        }
    }
    for i in (0..field.net.param_count()).step_by(7) {
        let orig = field.net.params[i];
        field.net.params[i] = orig + h;
        let fp = eval(&gs, &field);
        field.net.params[i] = orig - h;
        let fm = eval(&gs, &field);
        field.net.params[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        assert!(tol(dg.net[i], fd), "net {i}: {} vs {fd}", dg.net[i]);
    }
    for k in 0..field.points.len() {
        for c in 0..3 {
            let orig = field.points.positions[k][c];
            field.points.positions[k][c] = orig + h;
            let fp = eval(&gs, &field);
            field.points.positions[k][c] = orig - h;
            let fm = eval(&gs, &field);
            field.points.positions[k][c] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                tol(dg.positions[k][c], fd),
                "point {k}/{c}: {} vs {fd}",
                dg.positions[k][c]
            );
        }
        let orig = field.points.log_radii[k];
        field.points.log_radii[k] = orig + h;
        let fp = eval(&gs, &field);
        field.points.log_radii[k] = orig - h;
        let fm = eval(&gs, &field);
        field.points.log_radii[k] = orig;
        let fd = (fp - fm) / (2.0 * h);
        assert!(
            tol(dg.log_radii[k], fd),
            "radius {k}: {} vs {fd}",
            dg.log_radii[k]
        );
    }
}

#[test]
fn arap_of_rigid_motion_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pts = random_points(&mut rng, 10);
    let rigid = random_transform(&mut rng);
    let r = rotation_from_raw(&rigid.rotation);
    let t = Vector3::from(rigid.translation);
    let trans: Vec<[f64; 3]> = pts
        .positions
        .iter()
        .map(|p| {
            let p = Vector3::from(*p);
            (r * p + t - p).into()
        })
        .collect();
    let (loss, _, _) = arap_terms(&pts.positions, &trans, 4);
    assert!(loss.abs() < 1e-9);
}

#[test]
fn arap_of_stretched_pair() {
    let (loss, _, _) = arap_terms(
        &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
        &[[0.0; 3], [1.0, 0.0, 0.0]],
        4,
    );
    assert_close(loss, 1.0, 1e-15);
}

#[test]
fn arap_is_nonnegative_and_zero_for_single_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let pts = random_points(&mut rng, 7);
        let tr: Vec<[f64; 3]> = (0..7)
            .map(|_| random_transform(&mut rng).translation)
            .collect();
        assert!(arap_terms(&pts.positions, &tr, 3).0 >= 0.0);
    }
    let one = random_points(&mut rng, 1);
    let mut f = DeformField::new(one, &DeformConfig::default(), &mut rng);
    f.bind(&[]);
    assert_eq!(arap_loss(&f, 0.5, 1.0, None), 0.0);
}

#[test]
fn arap_edges_are_undirected_and_unique() {
    let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
    assert_eq!(knn_edges(&pts, 1), vec![(0, 1), (1, 2)]);
    assert_eq!(knn_edges(&pts, 5), vec![(0, 1), (0, 2), (1, 2)]);
}

#[test]
fn arap_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pts = random_points(&mut rng, 7);
    let mut field = random_field(&mut rng, pts, &[]);
    let t = 0.6;
    let mut g = DeformGrad::zeros(&field);
    arap_loss(&field, t, 2.0, Some(&mut g));
    let h = 1e-6;
    for i in (0..field.net.param_count()).step_by(5) {
        let orig = field.net.params[i];
        field.net.params[i] = orig + h;
        let fp = arap_loss(&field, t, 1.0, None);
        field.net.params[i] = orig - h;
        let fm = arap_loss(&field, t, 1.0, None);
        field.net.params[i] = orig;
        let fd = 2.0 * (fp - fm) / (2.0 * h);
        assert!(
            (g.net[i] - fd).abs() <= 1e-6 + 1e-4 * fd.abs(),
            "net {i}: {} vs {fd}",
            g.net[i]
        );
    }
    for k in 0..field.points.len() {
        for c in 0..3 {
            let orig = field.points.positions[k][c];
            field.points.positions[k][c] = orig + h;
            let fp = arap_loss(&field, t, 1.0, None);
            field.points.positions[k][c] = orig - h;
            let fm = arap_loss(&field, t, 1.0, None);
            field.points.positions[k][c] = orig;
            let fd = 2.0 * (fp - fm) / (2.0 * h);
            // Moving a point can re-wire the KNN graph; only compare smooth spots.
            if (fd - g.positions[k][c]).abs() > 1e-3 && knn_changes(&field, k, c, h) {
                continue;
            }
            assert!((g.positions[k][c] - fd).abs() <= 1e-6 + 1e-4 * fd.abs());
        }
    }
}

fn knn_changes(field: &DeformField, k: usize, c: usize, h: f64) -> bool {
    let mut a = field.points.positions.clone();
    let mut b = a.clone();
    a[k][c] += h;
    b[k][c] -= h;
    knn_edges(&a, field.knn_k) != knn_edges(&b, field.knn_k)
}

#[test]
fn query_control_transform_matches_net() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pts = random_points(&mut rng, 3);
    let field = random_field(&mut rng, pts, &[]);
    let p = field.points.positions[1];
    let a = query_control_transform(&field.net, &p, 0.2);
    let b = query_control_transform(&field.net, &p, 0.2);
    assert_eq!(a, b);
    assert_close(crate::se3::norm4(&a.rotation), 1.0, 1e-12);
}
