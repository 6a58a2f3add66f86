use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use dynsplat::eval::{ate_rmse, image_metrics, Report};
use dynsplat::io::{
    atomic_write, export_ply, generate_synthetic, load_checkpoint, load_tum_sequence,
    save_checkpoint, write_color_png, write_depth_png, write_flo, write_synthetic,
    write_trajectory, write_unit_png, FlowProvider, NoFlow, SceneScript, SequenceSource,
};
use dynsplat::pipeline::SlamSystem;
use dynsplat::tracker::Exposure;
use dynsplat::{Config, DepthImage, PoseSE3};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::{EvalArgs, RenderArgs, RunArgs, SynthArgs};

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.dsplat";
pub const REPORT_FILE: &str = "report.txt";
pub const TIMING_FILE: &str = "timing.txt";
pub const MAP_FILE: &str = "map.ply";

/// Frames compared per metric batch.
const METRIC_BATCH: usize = 16;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn sequence_name(dir: &Path) -> String {
    dir.canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| dir.display().to_string())
}

/// Mean PSNR and SSIM of the renders at the estimated poses against the
/// first `n` frames of `source`.
fn image_scores(sys: &SlamSystem, source: &SequenceSource, n: usize) -> Result<Option<(f64, f64)>> {
    let (mut psnr, mut ssim, mut count) = (0.0, 0.0, 0usize);
    let mut batch = Vec::with_capacity(METRIC_BATCH);
    let mut frames = source.frames(Some(n));
    loop {
        let next = frames.next().transpose()?;
        if let Some(f) = next.as_ref() {
            if let Some(r) = sys.render_frame(f.index) {
                batch.push((r.color, f.color.clone()));
            }
        }
        if batch.len() == METRIC_BATCH || (next.is_none() && !batch.is_empty()) {
            let (p, s) = image_metrics(&batch)?;
            psnr += p * batch.len() as f64;
            ssim += s * batch.len() as f64;
            count += batch.len();
            batch.clear();
        }
        if next.is_none() {
            break;
        }
    }
    Ok((count > 0).then(|| (psnr / count as f64, ssim / count as f64)))
}

fn build_report(sys: &SlamSystem, source: &SequenceSource, n: usize) -> Result<Report> {
    let ate_cm = match &source.ground_truth {
        Some(gt) => match ate_rmse(&sys.timed_poses(), gt) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("no ATE: {e}");
                None
            }
        },
        None => None,
    };
    let scores = image_scores(sys, source, n)?;
    let (flow_loss_initial, flow_loss_final) = sys.flow_losses();
    let map = &sys.mapper.map;
    Ok(Report {
        sequence: sequence_name(&source.root),
        frames: sys.trajectory.len(),
        keyframes: sys.mapper.registry.len(),
        static_gaussians: map.statics.len(),
        dynamic_gaussians: map.dynamics.len(),
        ate_cm,
        psnr_db: scores.map(|s| s.0),
        ssim: scores.map(|s| s.1),
        flow_loss_initial,
        flow_loss_final,
    })
}

pub fn run(a: &RunArgs) -> Result<()> {
    let t0 = Instant::now();
    let source = load_tum_sequence(&a.input)
        .with_context(|| format!("cannot load sequence {}", a.input.display()))?;
    ensure!(
        !source.is_empty(),
        "{} has no usable frames",
        a.input.display()
    );
    let mut cfg = match &a.config {
        Some(p) => {
            Config::load(p).with_context(|| format!("cannot load config {}", p.display()))?
        }
        None => Config::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let n = a.max_frames.map_or(source.len(), |m| m.min(source.len()));
    ensure!(n > 0, "--max-frames must be positive");
    create_dir(&a.output)?;

    let flow: Box<dyn FlowProvider> = match source.flow_provider() {
        Some(p) => Box::new(p),
        None => {
            log::info!("no flow/ directory; mapping runs without flow supervision");
            Box::new(NoFlow)
        }
    };
    let mut sys = SlamSystem::new(cfg, source.intrinsics, n, flow)?;
    let t_load = t0.elapsed().as_secs_f64();

    let (mut t_track, mut t_map) = (0.0, 0.0);
    for frame in source.frames(Some(n)) {
        let frame = frame?;
        let out = sys
            .process_frame(&frame)
            .with_context(|| format!("frame {} failed", frame.index))?;
        t_track += out.tracking_time.as_secs_f64();
        t_map += out.mapping_time.as_secs_f64();
        match out.keyframe {
            Some(cause) => log::info!("frame {}/{n}: keyframe ({cause:?})", frame.index + 1),
            None => log::info!("frame {}/{n}", frame.index + 1),
        }
    }
    ensure!(
        sys.trajectory.len() == n,
        "only {} of {n} frames were processed",
        sys.trajectory.len()
    );

    let t = Instant::now();
    log::info!("refining over {} keyframes", sys.mapper.registry.len());
    sys.refine();
    let t_refine = t.elapsed().as_secs_f64();

    write_trajectory(&a.output.join(TRAJECTORY_FILE), &sys.timed_poses())?;
    save_checkpoint(&a.output.join(CHECKPOINT_FILE), &sys.checkpoint())?;
    let all: Vec<_> = sys.mapper.map.all().cloned().collect();
    export_ply(&a.output.join(MAP_FILE), all.iter())?;

    let t = Instant::now();
    let report = build_report(&sys, &source, n)?;
    report.write(&a.output.join(REPORT_FILE))?;
    let t_eval = t.elapsed().as_secs_f64();
    print!("{}", report.table());

    let mut timing = String::new();
    for (k, v) in [
        ("load_s", t_load),
        ("tracking_s", t_track),
        ("mapping_s", t_map),
        ("refine_s", t_refine),
        ("eval_s", t_eval),
        ("total_s", t0.elapsed().as_secs_f64()),
    ] {
        writeln!(timing, "{k} = {v:.3}")?;
    }
    atomic_write(&a.output.join(TIMING_FILE), timing.as_bytes())?;
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let script = match &a.spec {
        Some(p) => SceneScript::load(p)
            .with_context(|| format!("cannot load scene script {}", p.display()))?,
        None => SceneScript::default(),
    };
    let scene = generate_synthetic(&script, a.seed)?;
    create_dir(&a.output)?;
    write_synthetic(&scene, &a.output)?;
    log::info!(
        "{} frames, {} flow pairs written to {}",
        scene.frames.len(),
        scene.flows.len(),
        a.output.display()
    );
    Ok(())
}

/// World-to-camera pose from TUM-ordered camera-to-world values.
fn parse_pose(v: &[f64]) -> Result<PoseSE3> {
    ensure!(v.len() == 7, "--pose takes 7 values, got {}", v.len());
    ensure!(
        v.iter().all(|x| x.is_finite()),
        "--pose values must be finite"
    );
    let q = Quaternion::new(v[6], v[3], v[4], v[5]);
    ensure!(q.norm() > 1e-6, "--pose quaternion is zero");
    let c2w = PoseSE3::new(
        UnitQuaternion::from_quaternion(q),
        Vector3::new(v[0], v[1], v[2]),
    );
    Ok(c2w.inverse())
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", a.checkpoint.display()))?;
    let sys = SlamSystem::from_checkpoint(ckpt, Box::new(NoFlow));
    let (pose, exposure, frame_time) = match (a.frame, &a.pose) {
        (Some(id), _) => {
            let Some(e) = sys.trajectory.iter().find(|e| e.frame_id == id) else {
                bail!("frame {id} is not in the checkpoint trajectory");
            };
            (e.pose, e.exposure, sys.time_of(id))
        }
        (None, Some(v)) => (parse_pose(v)?, Exposure::default(), 0.0),
        (None, None) => bail!("either --pose or --frame is required"),
    };
    let t = a.time.unwrap_or(frame_time);
    ensure!(t.is_finite(), "--time must be finite");
    if !(0.0..=1.0).contains(&t) {
        log::warn!("time {t} is outside the trained range [0, 1]");
    }

    let out = sys.mapper.render(&pose, &exposure, t);
    create_dir(&a.output)?;
    write_color_png(&a.output.join("color.png"), &out.color)?;
    let depth = DepthImage::from_fn(out.depth.width, out.depth.height, |x, y| {
        let o = out.opacity.get(x, y);
        if o > 0.5 {
            out.depth.get(x, y) / o
        } else {
            0.0
        }
    });
    write_depth_png(&a.output.join("depth.png"), &depth)?;
    write_unit_png(&a.output.join("opacity.png"), &out.opacity)?;

    if !sys.mapper.map.dynamics.is_empty() {
        let step = match sys.time_of(1) {
            s if s > 0.0 => s,
            _ => 1.0,
        };
        let to = a
            .flow_to
            .unwrap_or(if t + step <= 1.0 { t + step } else { t - step });
        ensure!(to.is_finite(), "--flow-to must be finite");
        let (forward, _) = sys
            .mapper
            .render_flow(&sys.mapper.deform, &pose, t, &pose, to);
        write_flo(&a.output.join("flow.flo"), &forward)?;
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let path = a.run.join(CHECKPOINT_FILE);
    let ckpt = load_checkpoint(&path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    let source = load_tum_sequence(&a.gt)
        .with_context(|| format!("cannot load sequence {}", a.gt.display()))?;
    let sys = SlamSystem::from_checkpoint(ckpt, Box::new(NoFlow));
    let n = sys
        .trajectory
        .iter()
        .map(|e| e.frame_id + 1)
        .max()
        .unwrap_or(0)
        .min(source.len());
    let report = build_report(&sys, &source, n)?;
    report.write(&a.run.join(REPORT_FILE))?;
    print!("{}", report.table());
    Ok(())
}
