use criterion::{criterion_group, criterion_main, Criterion};
use dynsplat::config::DeformConfig;
use dynsplat::deform::{deform_gaussians, ControlPointSet, DeformField};
use dynsplat::io::{generate_synthetic, SceneScript, SyntheticScene};
use dynsplat::loss::Observation;
use dynsplat::render::{render_gaussians, render_gaussians_backward, RenderSettings};
use dynsplat::tracker::{gradient_gate_mask, track_frame, tracking_loss, Exposure};
use dynsplat::{Config, GaussianPrimitive, StaticMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene() -> SyntheticScene {
    let mut script = SceneScript::default();
    script.frames = 2;
    generate_synthetic(&script, 0).expect("synthetic scene")
}

fn render(c: &mut Criterion) {
    let s = scene();
    let k = s.intrinsics;
    let pose = s.camera[0].pose;
    let g = &s.statics.gaussians;
    let settings = RenderSettings::default();
    let frame = &s.frames[0];
    let obs = Observation {
        color: &frame.color,
        depth: &frame.depth,
        static_mask: &frame.mask,
    };
    let gate = gradient_gate_mask(&frame.color, 0.01);

    c.bench_function("render_forward", |b| {
        b.iter(|| render_gaussians(g, None, &pose, &k, &settings))
    });
    let scene = render_gaussians(g, None, &pose, &k, &settings);
    let tl = tracking_loss(&scene.output, &obs, &gate, &Exposure::default(), 0.9, 0.95).unwrap();
    c.bench_function("render_backward", |b| {
        b.iter(|| render_gaussians_backward(g, &pose, &k, &settings, &scene, &tl.adjoint))
    });
}

fn tracking(c: &mut Criterion) {
    let s = scene();
    let map = StaticMap(s.statics.clone());
    let frame = &s.frames[1];
    let obs = Observation {
        color: &frame.color,
        depth: &frame.depth,
        static_mask: &frame.mask,
    };
    let mut cfg = Config::default();
    cfg.tracking.iterations = 10;
    let init = s.camera[0].pose;
    let mut group = c.benchmark_group("tracking");
    group.sample_size(10);
    group.bench_function("track_frame_10_iters", |b| {
        b.iter(|| {
            track_frame(&map, &obs, &init, &Exposure::default(), &s.intrinsics, &cfg).unwrap()
        })
    });
    group.finish();
}

fn deform(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let canonical: Vec<GaussianPrimitive> = (0..300)
        .map(|_| {
            let mean = [0; 3].map(|_| rng.gen_range(-0.3..0.3));
            GaussianPrimitive::isotropic(mean, 0.03, 0.8, [0.5; 3])
        })
        .collect();
    let points = ControlPointSet {
        positions: (0..30)
            .map(|_| [0; 3].map(|_| rng.gen_range(-0.3..0.3)))
            .collect(),
        log_radii: vec![0.15f64.ln(); 30],
    };
    let mut field = DeformField::new(points, &DeformConfig::default(), &mut rng);
    for p in field.net.params.iter_mut() {
        *p = rng.gen_range(-0.1..0.1);
    }
    field.bind(&canonical);
    c.bench_function("deform_300_gaussians", |b| {
        b.iter(|| deform_gaussians(&canonical, &field, 0.5))
    });
}

criterion_group!(benches, render, tracking, deform);
criterion_main!(benches);
