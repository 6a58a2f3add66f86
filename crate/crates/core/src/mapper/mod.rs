//! Keyframe management and 4D map optimization.
//!
//! The mapper owns every mutable piece of scene state: the Gaussian map, the
//! deformation field and the keyframe registry. Tracking only ever receives
//! `&StaticMap`.

mod optimize;

pub use optimize::{Objectives, StageReport};

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{backproject_pixel, CameraIntrinsics};
use crate::config::{Config, KeyframeConfig};
use crate::deform::{deform_gaussians, init_control_points, DeformField};
use crate::gaussian::GaussianMap;
use crate::gaussian::{logit, GaussianPrimitive, StaticMap};
use crate::image::{DepthImage, FlowImage, Mask, RgbImage};
use crate::render::{render_flow_pair, render_gaussians, RenderOutput, RenderSettings};
use crate::se3::PoseSE3;
use crate::tracker::Exposure;

/// Provider flow between a keyframe and the keyframe before it.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeFlow {
    pub prev_frame: usize,
    /// Previous keyframe → this one, sourced at the previous keyframe.
    pub forward: FlowImage,
    /// This keyframe → previous one, sourced here.
    pub backward: FlowImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub frame_id: usize,
    pub timestamp: f64,
    /// Normalized sequence time in `[0, 1]`.
    pub time: f64,
    /// World-to-camera.
    pub pose: PoseSE3,
    pub exposure: Exposure,
    pub color: RgbImage,
    pub depth: DepthImage,
    /// True where the pixel is static.
    pub mask: Mask,
    pub flow: Option<KeyframeFlow>,
    /// Sorted ids of static Gaussians visible from this keyframe, as of its
    /// insertion.
    pub touched: Vec<u64>,
}

/// Sliding window of keyframe ids, newest first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyframeWindow {
    pub ids: Vec<usize>,
    pub capacity: usize,
}

impl KeyframeWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            ids: Vec::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Adds `id` at the front; returns whatever fell off the back.
    pub fn push_front(&mut self, id: usize) -> Option<usize> {
        self.ids.retain(|&i| i != id);
        self.ids.insert(0, id);
        if self.ids.len() > self.capacity {
            self.ids.pop()
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertReason {
    Visibility,
    Translation,
    MaskChange,
    FrameGap,
}

/// Ids of the static Gaussians reaching `alpha_min` somewhere in the image.
pub fn touched_ids(
    statics: &StaticMap,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    alpha_min: f64,
) -> Vec<u64> {
    let scene = render_gaussians(
        statics.gaussians(),
        None,
        pose,
        k,
        &RenderSettings::default(),
    );
    let alpha = scene.alpha_per_source(statics.len());
    let mut ids: Vec<u64> = alpha
        .iter()
        .zip(&statics.0.ids)
        .filter(|(&a, _)| a > alpha_min)
        .map(|(_, &id)| id)
        .collect();
    ids.sort_unstable();
    ids
}

/// Fraction of `newer` also present in `older`; both sorted. An empty
/// `newer` overlaps fully.
pub fn visibility_overlap(newer: &[u64], older: &[u64]) -> f64 {
    if newer.is_empty() {
        return 1.0;
    }
    let (mut i, mut j, mut common) = (0, 0, 0usize);
    while i < newer.len() && j < older.len() {
        match newer[i].cmp(&older[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    common as f64 / newer.len() as f64
}

/// What the selection rule needs to know about the current frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameState<'a> {
    pub frame_id: usize,
    pub pose: &'a PoseSE3,
    pub mask: &'a Mask,
    pub touched: &'a [u64],
}

/// Keyframe test against the last keyframe; the first firing rule is reported.
pub fn should_insert_keyframe(
    cur: &FrameState,
    last: &Keyframe,
    cfg: &KeyframeConfig,
) -> Option<InsertReason> {
    if visibility_overlap(cur.touched, &last.touched) < cfg.insert_overlap {
        return Some(InsertReason::Visibility);
    }
    let moved = (cur.pose.center() - last.pose.center()).norm();
    if moved > cfg.translation_threshold {
        return Some(InsertReason::Translation);
    }
    if cur.mask.invert().iou(&last.mask.invert()) < cfg.mask_iou_threshold {
        return Some(InsertReason::MaskChange);
    }
    if cur.frame_id.saturating_sub(last.frame_id) >= cfg.keyframe_max_gap {
        return Some(InsertReason::FrameGap);
    }
    None
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InsertOutcome {
    pub evicted: Vec<usize>,
    pub added: usize,
}

/// New static Gaussians for pixels the map does not explain yet: static,
/// valid depth, and either rendered opacity below the threshold or a depth
/// error above `factor` times the median error.
pub fn densify_candidates(
    render: &RenderOutput,
    kf: &Keyframe,
    k: &CameraIntrinsics,
    cfg: &KeyframeConfig,
) -> Vec<GaussianPrimitive> {
    let (w, h) = (kf.depth.width, kf.depth.height);
    let mut errors: Vec<f64> = Vec::new();
    for i in 0..w * h {
        let d = kf.depth.data[i];
        if kf.mask.data[i] && d > 0.0 && render.opacity.data[i] >= cfg.densify_opacity {
            errors.push((render.depth.data[i] - d).abs());
        }
    }
    let median = if errors.is_empty() {
        f64::INFINITY
    } else {
        let mid = errors.len() / 2;
        *errors.select_nth_unstable_by(mid, f64::total_cmp).1
    };
    let stride = cfg.densify_stride.max(1);
    let mut out = Vec::new();
    for y in (0..h).step_by(stride) {
        for x in (0..w).step_by(stride) {
            let d = kf.depth.get(x, y);
            if !kf.mask.get(x, y) || !(d > 0.0) {
                continue;
            }
            let o = render.opacity.get(x, y);
            let err = (render.depth.get(x, y) - d).abs();
            if o < cfg.densify_opacity || err > cfg.densify_depth_factor * median {
                out.push(new_gaussian(x, y, kf, k, cfg.new_gaussian_opacity));
            }
        }
    }
    out
}

fn new_gaussian(
    x: usize,
    y: usize,
    kf: &Keyframe,
    k: &CameraIntrinsics,
    opacity: f64,
) -> GaussianPrimitive {
    let d = kf.depth.get(x, y);
    let p = backproject_pixel(x as f64, y as f64, d, &kf.pose, k).expect("valid pixel and depth");
    let mut g = GaussianPrimitive::isotropic(p.into(), d / k.fx, 0.5, kf.color.get(x, y));
    g.opacity_logit = logit(opacity);
    g.birth_frame = kf.frame_id;
    g
}

pub struct Mapper {
    pub cfg: Config,
    pub k: CameraIntrinsics,
    pub map: GaussianMap,
    pub deform: DeformField,
    /// The field as it was when the dynamic Gaussians were created.
    pub deform_initial: Option<DeformField>,
    pub registry: BTreeMap<usize, Keyframe>,
    pub window: KeyframeWindow,
    rng: ChaCha8Rng,
}

impl Mapper {
    pub fn new(cfg: Config, k: CameraIntrinsics) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let deform = DeformField::empty(&cfg.deform, &mut rng);
        Self {
            window: KeyframeWindow::new(cfg.keyframes.window_capacity),
            cfg,
            k,
            map: GaussianMap::default(),
            deform,
            deform_initial: None,
            registry: BTreeMap::new(),
            rng,
        }
    }

    /// Rebuilds a mapper from saved state. The sampling RNG restarts from
    /// the configured seed.
    pub fn from_state(
        cfg: Config,
        k: CameraIntrinsics,
        map: GaussianMap,
        deform: DeformField,
        deform_initial: Option<DeformField>,
        keyframes: Vec<Keyframe>,
        window: KeyframeWindow,
    ) -> Self {
        let mut m = Self::new(cfg, k);
        m.map = map;
        m.deform = deform;
        m.deform_initial = deform_initial;
        m.registry = keyframes.into_iter().map(|kf| (kf.frame_id, kf)).collect();
        m.window = window;
        m
    }

    pub fn static_map(&self) -> &StaticMap {
        &self.map.statics
    }

    pub fn last_keyframe(&self) -> Option<&Keyframe> {
        self.window.ids.first().and_then(|id| self.registry.get(id))
    }

    pub fn touched(&self, pose: &PoseSE3) -> Vec<u64> {
        touched_ids(
            &self.map.statics,
            pose,
            &self.k,
            self.cfg.keyframes.visibility_alpha,
        )
    }

    /// Registers `kf`, evicts window members that no longer overlap it and
    /// densifies static Gaussians. Dynamic Gaussians are never added here.
    pub fn insert_keyframe(&mut self, mut kf: Keyframe) -> InsertOutcome {
        let kc = self.cfg.keyframes.clone();
        let render = render_gaussians(
            self.map.statics.gaussians(),
            None,
            &kf.pose,
            &self.k,
            &RenderSettings::default(),
        );
        let fresh = densify_candidates(&render.output, &kf, &self.k, &kc);
        let added = fresh.len();
        for g in fresh {
            self.map.add_static(g);
        }
        kf.touched = self.touched(&kf.pose);

        let mut evicted: Vec<usize> = self
            .window
            .ids
            .iter()
            .copied()
            .filter(|id| {
                visibility_overlap(&kf.touched, &self.registry[id].touched) < kc.evict_overlap
            })
            .collect();
        self.window.ids.retain(|id| !evicted.contains(id));
        if let Some(old) = self.window.push_front(kf.frame_id) {
            evicted.push(old);
        }
        log::debug!(
            "keyframe {}: +{added} static Gaussians, evicted {:?}",
            kf.frame_id,
            evicted
        );
        self.registry.insert(kf.frame_id, kf);
        InsertOutcome { evicted, added }
    }

    /// Creates dynamic Gaussians and control points from the masked pixels of
    /// keyframe `frame_id`; that keyframe becomes the canonical space.
    pub fn initialize_dynamics(&mut self, frame_id: usize) -> usize {
        let kf = &self.registry[&frame_id];
        let dynamic = kf.mask.invert();
        let stride = self.cfg.deform.dynamic_stride.max(1);
        let mut created = Vec::new();
        for y in (0..dynamic.height).step_by(stride) {
            for x in (0..dynamic.width).step_by(stride) {
                if dynamic.get(x, y) && kf.depth.get(x, y) > 0.0 {
                    created.push(new_gaussian(
                        x,
                        y,
                        kf,
                        &self.k,
                        self.cfg.keyframes.new_gaussian_opacity,
                    ));
                }
            }
        }
        if created.is_empty() {
            return 0;
        }
        let points = init_control_points(
            &kf.depth,
            &dynamic,
            &kf.pose,
            &self.k,
            self.cfg.deform.control_point_count,
        );
        self.deform = DeformField::new(points, &self.cfg.deform, &mut self.rng);
        let n = created.len();
        for g in created {
            self.map.add_dynamic(g);
        }
        self.deform.bind(&self.map.dynamics.gaussians);
        self.deform_initial = Some(self.deform.clone());
        n
    }

    /// Window head, then random keyframes overlapping `cur`, then random ones
    /// from the whole registry, without repeats.
    pub fn select_mapping_frames(&mut self, cur: usize) -> Vec<usize> {
        let mut chosen = self.select_local_frames(cur);
        let rest: Vec<usize> = self
            .registry
            .keys()
            .copied()
            .filter(|id| !chosen.contains(id))
            .collect();
        pick(
            &mut self.rng,
            &rest,
            self.cfg.mapping.global_samples,
            &mut chosen,
        );
        chosen
    }

    /// Window head plus random keyframes overlapping `cur`.
    pub fn select_local_frames(&mut self, cur: usize) -> Vec<usize> {
        let mc = &self.cfg.mapping;
        let mut chosen: Vec<usize> = self
            .window
            .ids
            .iter()
            .copied()
            .take(mc.window_head)
            .collect();
        let cur_touched = self
            .registry
            .get(&cur)
            .map(|k| k.touched.clone())
            .unwrap_or_default();
        let overlapping: Vec<usize> = self
            .registry
            .values()
            .filter(|kf| !chosen.contains(&kf.frame_id))
            .filter(|kf| {
                visibility_overlap(&cur_touched, &kf.touched) > self.cfg.keyframes.sample_overlap
            })
            .map(|kf| kf.frame_id)
            .collect();
        pick(&mut self.rng, &overlapping, mc.overlap_samples, &mut chosen);
        chosen
    }

    /// Stage 1, stage 2 and pruning for the newest keyframe. The global
    /// keyframes are redrawn at every iteration.
    pub fn map_keyframe(&mut self, cur: usize) -> (StageReport, StageReport) {
        let local = self.select_local_frames(cur);
        let global = self.cfg.mapping.global_samples;
        let mc = self.cfg.mapping.clone();
        if self.registry.len() == 1 {
            return (
                StageReport::default(),
                self.stage2_with_global(&local, 0, mc.init_iters),
            );
        }
        let s1 = self.stage1_with_global(&local, global, mc.stage1_iters);
        let s2 = self.stage2_with_global(&local, global, mc.stage2_iters);
        (s1, s2)
    }

    /// Full scene at `pose` and normalized time `t`.
    pub fn render(&self, pose: &PoseSE3, exposure: &Exposure, t: f64) -> RenderOutput {
        let mut all = self.map.statics.gaussians().to_vec();
        if !self.map.dynamics.is_empty() {
            all.extend(deform_gaussians(&self.map.dynamics.gaussians, &self.deform, t).gaussians);
        }
        let mut out =
            render_gaussians(&all, None, pose, &self.k, &RenderSettings::default()).output;
        out.color = exposure.apply(&out.color);
        out
    }

    /// Forward and backward flow rendered by the dynamic Gaussians between
    /// times `t_prev` and `t_cur`.
    pub fn render_flow(
        &self,
        field: &DeformField,
        pose_prev: &PoseSE3,
        t_prev: f64,
        pose_cur: &PoseSE3,
        t_cur: f64,
    ) -> (FlowImage, FlowImage) {
        let dy = &self.map.dynamics.gaussians;
        let prev = deform_gaussians(dy, field, t_prev).gaussians;
        let cur = deform_gaussians(dy, field, t_cur).gaussians;
        let r = render_flow_pair(
            &prev,
            &cur,
            pose_prev,
            pose_cur,
            &self.k,
            &RenderSettings::default(),
        );
        (r.forward_flow().clone(), r.backward_flow().clone())
    }

    /// Mean flow loss over all keyframes that carry provider flow, with the
    /// dynamic Gaussians moved by `field`. `None` when no keyframe has flow.
    pub fn keyframe_flow_loss(&self, field: &DeformField) -> Option<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for kf in self.registry.values() {
            let Some(flow) = &kf.flow else { continue };
            let Some(prev) = self.registry.get(&flow.prev_frame) else {
                continue;
            };
            let (f, b) = self.render_flow(field, &prev.pose, prev.time, &kf.pose, kf.time);
            let region = kf.mask.invert();
            let (v, _, _) = crate::loss::flow_loss(&f, &b, &flow.forward, &flow.backward, &region)
                .expect("shapes");
            total += v;
            count += 1;
        }
        (count > 0).then(|| total / count as f64)
    }
}

fn pick(rng: &mut ChaCha8Rng, from: &[usize], n: usize, into: &mut Vec<usize>) {
    let n = n.min(from.len());
    if n == 0 {
        return;
    }
    let mut idx = sample(rng, from.len(), n).into_vec();
    idx.sort_unstable();
    into.extend(idx.into_iter().map(|i| from[i]));
}
