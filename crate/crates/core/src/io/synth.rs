//! Scripted synthetic scenes: a textured static wall and one rigidly moving
//! object, rendered with the splatting forward pass.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::flo::write_flo;
use super::png::{write_color_png, write_depth_png, write_mask_png};
use super::tum::{format_trajectory, write_intrinsics, Frame, TimedPose};
use super::{atomic_write, create_dir};
use crate::camera::{backproject_camera, project_point, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianPrimitive, GaussianSet};
use crate::image::{DepthImage, FlowImage, Mask};
use crate::render::{render_gaussians, RenderSettings};
use crate::se3::{quat_from_axis_angle, quat_mul, PoseSE3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneScript {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub frames: usize,
    pub fps: f64,
    /// Flow files are written for every pair of frames at most this far apart.
    pub flow_max_gap: usize,
    pub camera: CameraScript,
    pub wall: WallScript,
    /// `count = 0` leaves the scene static.
    pub object: ObjectScript,
}

/// Camera-to-world motion: the center moves by `velocity` and the camera
/// turns by `angular_velocity` (axis-angle) every frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraScript {
    pub start: [f64; 3],
    pub velocity: [f64; 3],
    pub angular_velocity: [f64; 3],
}

/// Grid of Gaussians in the plane `z = depth`, colored by a smooth pattern
/// plus per-Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WallScript {
    pub depth: f64,
    pub half_width: f64,
    pub half_height: f64,
    pub spacing: f64,
    pub scale: f64,
    pub opacity: f64,
    /// Uniform z offset range; keeps the depth order of neighbors well defined.
    pub depth_jitter: f64,
    /// Pattern frequency in cycles per meter.
    pub texture_frequency: f64,
    pub color_noise: f64,
}

/// Ball of Gaussians rotating about its center by `angular_velocity` and
/// translating by `velocity` every frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectScript {
    pub center: [f64; 3],
    pub radius: f64,
    pub count: usize,
    pub scale: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    pub color_noise: f64,
    pub velocity: [f64; 3],
    pub angular_velocity: [f64; 3],
    /// Lay the Gaussians on a disc facing the camera instead of a ball.
    pub flat: bool,
}

impl Default for SceneScript {
    fn default() -> Self {
        Self {
            width: 64,
            height: 48,
            fx: 56.0,
            fy: 56.0,
            frames: 30,
            fps: 30.0,
            flow_max_gap: 5,
            camera: CameraScript::default(),
            wall: WallScript::default(),
            object: ObjectScript::default(),
        }
    }
}

impl Default for CameraScript {
    fn default() -> Self {
        Self {
            start: [0.0; 3],
            velocity: [0.002, 0.0005, 0.0],
            angular_velocity: [0.0, 0.001, 0.0],
        }
    }
}

impl Default for WallScript {
    fn default() -> Self {
        Self {
            depth: 2.0,
            half_width: 1.5,
            half_height: 1.2,
            spacing: 0.05,
            scale: 0.035,
            opacity: 0.97,
            depth_jitter: 0.02,
            texture_frequency: 1.2,
            color_noise: 0.1,
        }
    }
}

impl Default for ObjectScript {
    fn default() -> Self {
        Self {
            center: [-0.25, 0.0, 1.3],
            radius: 0.15,
            count: 150,
            scale: 0.04,
            opacity: 0.95,
            color: [0.85, 0.25, 0.15],
            color_noise: 0.08,
            velocity: [0.01, 0.0, 0.0],
            angular_velocity: [0.0, 0.02, 0.0],
            flat: false,
        }
    }
}

impl SceneScript {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let script: SceneScript = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("script serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics()?;
        if self.frames == 0 {
            return Err(Error::Config("frames must be positive".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config("fps must be positive".into()));
        }
        let w = &self.wall;
        if !(w.spacing > 0.0 && w.scale > 0.0 && w.depth > 0.0) {
            return Err(Error::Config(
                "wall depth, spacing and scale must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&w.opacity) {
            return Err(Error::Config("wall opacity must lie in [0, 1)".into()));
        }
        let o = &self.object;
        if o.count > 0 && (!(o.radius > 0.0 && o.scale > 0.0) || !(0.0..1.0).contains(&o.opacity)) {
            return Err(Error::Config(
                "object radius/scale must be positive, opacity in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Principal point at the image center.
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.fx,
            self.fy,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub script: SceneScript,
    pub intrinsics: CameraIntrinsics,
    pub statics: GaussianSet,
    /// Object Gaussians at frame 0.
    pub object: GaussianSet,
    /// World-space rigid motion of the object from frame 0 to frame `i`.
    pub object_motion: Vec<PoseSE3>,
    /// World-to-camera ground truth.
    pub camera: Vec<TimedPose>,
    pub frames: Vec<Frame>,
    /// Keyed by `(a, b)`: flow from frame `a` to frame `b`, sourced at `a`.
    pub flows: BTreeMap<(usize, usize), FlowImage>,
}

impl SyntheticScene {
    /// Object Gaussians moved to frame `i`.
    pub fn object_at(&self, i: usize) -> Vec<GaussianPrimitive> {
        let m = &self.object_motion[i];
        let q = m.rotation.quaternion();
        let qr = [q.w, q.i, q.j, q.k];
        self.object
            .gaussians
            .iter()
            .map(|g| GaussianPrimitive {
                mean: m.transform(&g.mean_vec()).into(),
                rot: quat_mul(&qr, &g.rot),
                ..*g
            })
            .collect()
    }

    /// Every ground-truth Gaussian at frame `i`, statics first.
    pub fn gaussians_at(&self, i: usize) -> Vec<GaussianPrimitive> {
        let mut all = self.statics.gaussians.clone();
        all.extend(self.object_at(i));
        all
    }
}

fn wall_gaussians(w: &WallScript, rng: &mut ChaCha8Rng) -> GaussianSet {
    let mut set = GaussianSet::default();
    let nx = (2.0 * w.half_width / w.spacing).round() as usize + 1;
    let ny = (2.0 * w.half_height / w.spacing).round() as usize + 1;
    let tau = std::f64::consts::TAU * w.texture_frequency;
    for j in 0..ny {
        for i in 0..nx {
            let x = -w.half_width + i as f64 * w.spacing;
            let y = -w.half_height + j as f64 * w.spacing;
            let z = w.depth + rng.gen_range(-0.5..=0.5) * w.depth_jitter;
            let base = [
                0.5 + 0.3 * (tau * x).sin() * (0.7 * tau * y).cos(),
                0.5 + 0.3 * (0.8 * tau * (x + y)).cos(),
                0.45 + 0.25 * (1.3 * tau * y + 0.5).sin(),
            ];
            let color =
                base.map(|c| (c + rng.gen_range(-1.0..=1.0) * w.color_noise).clamp(0.0, 1.0));
            let id = set.len() as u64;
            set.push(
                GaussianPrimitive::isotropic([x, y, z], w.scale, w.opacity, color),
                id,
            );
        }
    }
    set
}

fn object_gaussians(o: &ObjectScript, rng: &mut ChaCha8Rng, first_id: u64) -> GaussianSet {
    let mut set = GaussianSet::default();
    while set.len() < o.count {
        let p = [
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            if o.flat {
                0.0
            } else {
                rng.gen_range(-1.0..=1.0)
            },
        ];
        if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] > 1.0 {
            continue;
        }
        let mean = [
            o.center[0] + o.radius * p[0],
            o.center[1] + o.radius * p[1],
            o.center[2] + o.radius * p[2],
        ];
        let color = o
            .color
            .map(|c| (c + rng.gen_range(-1.0..=1.0) * o.color_noise).clamp(0.0, 1.0));
        let mut g = GaussianPrimitive::isotropic(mean, o.scale, o.opacity, color);
        g.dynamic = true;
        let id = first_id + set.len() as u64;
        set.push(g, id);
    }
    set
}

fn object_motion(o: &ObjectScript, i: usize) -> PoseSE3 {
    let f = i as f64;
    let rot = quat_from_axis_angle(&(Vector3::from(o.angular_velocity) * f));
    let c = Vector3::from(o.center);
    PoseSE3::new(rot, c + Vector3::from(o.velocity) * f - rot * c)
}

fn camera_pose(c: &CameraScript, i: usize) -> PoseSE3 {
    let f = i as f64;
    let rot = quat_from_axis_angle(&(Vector3::from(c.angular_velocity) * f));
    let center = Vector3::from(c.start) + Vector3::from(c.velocity) * f;
    PoseSE3::new(rot, center).inverse()
}

/// Generates every frame, mask and flow of `script`. Deterministic per seed.
pub fn generate_synthetic(script: &SceneScript, seed: u64) -> Result<SyntheticScene> {
    script.validate()?;
    let k = script.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let statics = wall_gaussians(&script.wall, &mut rng);
    let object = object_gaussians(&script.object, &mut rng, statics.len() as u64);
    let n = script.frames;
    let object_motion: Vec<PoseSE3> = (0..n).map(|i| object_motion(&script.object, i)).collect();
    let camera: Vec<TimedPose> = (0..n)
        .map(|i| TimedPose {
            timestamp: i as f64 / script.fps,
            pose: camera_pose(&script.camera, i),
        })
        .collect();
    let mut scene = SyntheticScene {
        script: script.clone(),
        intrinsics: k,
        statics,
        object,
        object_motion,
        camera,
        frames: Vec::with_capacity(n),
        flows: BTreeMap::new(),
    };

    // The flow channel, fed 1 for object Gaussians and 0 for the wall, is
    // the object's share of every pixel.
    let n_static = scene.statics.len();
    for i in 0..n {
        let all = scene.gaussians_at(i);
        let share: Vec<[f64; 2]> = (0..all.len())
            .map(|j| [(j >= n_static) as u8 as f64, 0.0])
            .collect();
        let r = render_gaussians(
            &all,
            Some(&share),
            &scene.camera[i].pose,
            &k,
            &RenderSettings::default(),
        )
        .output;
        let flow = r.flow.expect("flow channel");
        let mask = Mask::from_fn(k.width, k.height, |x, y| flow.get(x, y)[0] <= 0.5);
        let depth = DepthImage::from_fn(k.width, k.height, |x, y| {
            let o = r.opacity.get(x, y);
            if o > 0.5 {
                r.depth.get(x, y) / o
            } else {
                0.0
            }
        });
        scene.frames.push(Frame {
            index: i,
            timestamp: scene.camera[i].timestamp,
            color: r.color,
            depth,
            mask,
        });
    }
    for a in 0..n {
        for b in 0..n {
            if a != b && a.abs_diff(b) <= script.flow_max_gap {
                let f = ground_truth_flow(&scene, a, b);
                scene.flows.insert((a, b), f);
            }
        }
    }
    Ok(scene)
}

/// Each pixel of frame `a` with depth is lifted to 3D, moved with the object
/// when the mask marks it dynamic, and projected into frame `b`.
fn ground_truth_flow(scene: &SyntheticScene, a: usize, b: usize) -> FlowImage {
    let k = &scene.intrinsics;
    let fa = &scene.frames[a];
    let c2w_a = scene.camera[a].pose.inverse();
    let motion = scene.object_motion[b].compose(&scene.object_motion[a].inverse());
    // Exact zeros where nothing moved, instead of round-off.
    let same_camera = scene.camera[a].pose == scene.camera[b].pose;
    let same_object = scene.object_motion[a] == scene.object_motion[b];
    FlowImage::from_fn(k.width, k.height, |x, y| {
        let d = fa.depth.get(x, y);
        if !(d > 0.0) || (same_camera && (same_object || fa.mask.get(x, y))) {
            return [0.0; 2];
        }
        let mut p = c2w_a.transform(&backproject_camera(x as f64, y as f64, d, k));
        if !fa.mask.get(x, y) {
            p = motion.transform(&p);
        }
        match project_point(&p, &scene.camera[b].pose, k).visible() {
            Some((u, v, _)) => [u - x as f64, v - y as f64],
            None => [0.0; 2],
        }
    })
}

fn stamp_name(ts: f64) -> String {
    format!("{ts:.6}")
}

/// Writes the scene in TUM layout with `mask/`, `flow/` and `intrinsics.txt`.
pub fn write_synthetic(scene: &SyntheticScene, dir: &Path) -> Result<()> {
    for sub in ["rgb", "depth", "mask", "flow"] {
        create_dir(&dir.join(sub))?;
    }
    let mut rgb_list = String::from("# timestamp filename\n");
    let mut depth_list = rgb_list.clone();
    for f in &scene.frames {
        let name = stamp_name(f.timestamp);
        write_color_png(&dir.join(format!("rgb/{name}.png")), &f.color)?;
        write_depth_png(&dir.join(format!("depth/{name}.png")), &f.depth)?;
        write_mask_png(&dir.join(format!("mask/{name}.png")), &f.mask)?;
        rgb_list.push_str(&format!("{name} rgb/{name}.png\n"));
        depth_list.push_str(&format!("{name} depth/{name}.png\n"));
    }
    atomic_write(&dir.join("rgb.txt"), rgb_list.as_bytes())?;
    atomic_write(&dir.join("depth.txt"), depth_list.as_bytes())?;
    atomic_write(
        &dir.join("groundtruth.txt"),
        format_trajectory(&scene.camera).as_bytes(),
    )?;
    write_intrinsics(&dir.join("intrinsics.txt"), &scene.intrinsics)?;
    atomic_write(
        &dir.join("scene.toml"),
        scene.script.to_toml_string().as_bytes(),
    )?;
    for ((a, b), f) in &scene.flows {
        write_flo(&dir.join(format!("flow/{a}_{b}.flo")), f)?;
    }
    Ok(())
}
