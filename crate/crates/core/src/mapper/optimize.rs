//! Mapping stages and the final refinement.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use super::Mapper;
use crate::camera::project_point;
use crate::deform::{arap_loss, deform_gaussians, deform_gaussians_backward, DeformGrad};
use crate::error::Result;
use crate::gaussian::{
    get_grad, get_param, set_param, GaussianGrad, GaussianPrimitive, PARAMS_PER_GAUSSIAN,
};
use crate::loss::{flow_loss, image_loss, iso_loss, Objective, Observation};
use crate::optim::{Adam, StepOutcome};
use crate::render::{
    render_flow_pair, render_flow_pair_backward, render_gaussians, render_gaussians_backward,
    PixelAdjoint, RenderSettings,
};
use crate::se3::{PoseSE3, Twist};
use crate::tracker::Exposure;

/// Objective value and its components, averaged over the evaluated
/// keyframes (isotropy is counted once).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Objectives {
    pub total: f64,
    pub l1_color: f64,
    pub l1_depth: f64,
    pub d_ssim: f64,
    pub flow: f64,
    pub arap: f64,
    pub iso: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageReport {
    pub losses: Vec<f64>,
    pub flow_losses: Vec<f64>,
    pub aborted: bool,
    pub pruned: usize,
}

/// Gradients of an objective with respect to everything the mapper owns.
#[derive(Debug, Clone)]
pub struct MapGrads {
    pub statics: Vec<GaussianGrad>,
    /// Canonical-space dynamic Gaussians.
    pub dynamics: Vec<GaussianGrad>,
    pub deform: DeformGrad,
    pub poses: BTreeMap<usize, Twist>,
    pub exposures: BTreeMap<usize, [f64; 2]>,
}

struct Learnable {
    gaussians: bool,
    deform: bool,
    /// Keyframes whose pose and exposure are optimized.
    frames: Vec<usize>,
}

struct MapOptim {
    gaussians: Adam,
    net: Adam,
    points: Adam,
    radii: Adam,
    poses: BTreeMap<usize, Adam>,
    exposures: BTreeMap<usize, Adam>,
}

struct Snapshot {
    map: crate::gaussian::GaussianMap,
    deform: crate::deform::DeformField,
    frames: Vec<(usize, PoseSE3, Exposure)>,
}

fn add_twist(a: &mut Twist, b: &Twist) {
    for i in 0..6 {
        a[i] += b[i];
    }
}

impl Mapper {
    /// Mapping (`Stage1`/`Stage2`) or refinement objective over `frames`,
    /// with gradients.
    pub fn evaluate(
        &self,
        frames: &[usize],
        objective: Objective,
    ) -> Result<(Objectives, MapGrads)> {
        let settings = RenderSettings::default();
        let w = &self.cfg.weights;
        let statics = self.map.statics.gaussians();
        let dynamics = &self.map.dynamics.gaussians;
        let ns = statics.len();
        let mut grads = MapGrads {
            statics: vec![GaussianGrad::default(); ns],
            dynamics: vec![GaussianGrad::default(); dynamics.len()],
            deform: DeformGrad::zeros(&self.deform),
            poses: BTreeMap::new(),
            exposures: BTreeMap::new(),
        };
        let mut obj = Objectives::default();
        let refinement = objective == Objective::Refinement;
        for &id in frames {
            let kf = &self.registry[&id];
            let deformed =
                (!dynamics.is_empty()).then(|| deform_gaussians(dynamics, &self.deform, kf.time));
            let mut all = statics.to_vec();
            if let Some(d) = &deformed {
                all.extend_from_slice(&d.gaussians);
            }
            let scene = render_gaussians(&all, None, &kf.pose, &self.k, &settings);
            let obs = Observation {
                color: &kf.color,
                depth: &kf.depth,
                static_mask: &kf.mask,
            };
            let il = image_loss(
                &scene.output,
                &obs,
                &kf.exposure,
                w,
                self.cfg.tracking.opacity_gate,
                objective,
            )?;
            obj.total += il.value;
            obj.l1_color += il.l1_color;
            obj.l1_depth += il.l1_depth;
            obj.d_ssim += il.d_ssim;
            let sg =
                render_gaussians_backward(&all, &kf.pose, &self.k, &settings, &scene, &il.adjoint);
            for (a, b) in grads.statics.iter_mut().zip(&sg.gaussians[..ns]) {
                a.add_assign(b);
            }
            add_twist(grads.poses.entry(id).or_default(), &sg.pose);
            let e = grads.exposures.entry(id).or_default();
            e[0] += il.exposure_grad[0];
            e[1] += il.exposure_grad[1];

            let Some(deformed) = deformed else { continue };
            let mut g_cur: Vec<GaussianGrad> = sg.gaussians[ns..].to_vec();

            let flow_pair = if refinement { None } else { kf.flow.as_ref() };
            if let Some((flow, prev)) =
                flow_pair.and_then(|f| self.registry.get(&f.prev_frame).map(|p| (f, p)))
            {
                let prev_def = deform_gaussians(dynamics, &self.deform, prev.time);
                let fr = render_flow_pair(
                    &prev_def.gaussians,
                    &deformed.gaussians,
                    &prev.pose,
                    &kf.pose,
                    &self.k,
                    &settings,
                );
                let region = kf.mask.invert();
                let (v, af, ab) = flow_loss(
                    fr.forward_flow(),
                    fr.backward_flow(),
                    &flow.forward,
                    &flow.backward,
                    &region,
                )?;
                obj.flow += v;
                obj.total += w.lambda_flow * v;
                let scale = |f: &crate::image::FlowImage| PixelAdjoint {
                    flow: Some(f.map(|p| [p[0] * w.lambda_flow, p[1] * w.lambda_flow])),
                    ..Default::default()
                };
                let fg = render_flow_pair_backward(
                    &prev_def.gaussians,
                    &deformed.gaussians,
                    &prev.pose,
                    &kf.pose,
                    &self.k,
                    &settings,
                    &fr,
                    &scale(&af),
                    &scale(&ab),
                );
                for (a, b) in g_cur.iter_mut().zip(&fg.cur) {
                    a.add_assign(b);
                }
                let canon = deform_gaussians_backward(
                    dynamics,
                    &self.deform,
                    &prev_def,
                    &fg.prev,
                    &mut grads.deform,
                );
                for (a, b) in grads.dynamics.iter_mut().zip(&canon) {
                    a.add_assign(b);
                }
                add_twist(grads.poses.entry(id).or_default(), &fg.pose_cur);
                add_twist(grads.poses.entry(prev.frame_id).or_default(), &fg.pose_prev);
            }
            let canon = deform_gaussians_backward(
                dynamics,
                &self.deform,
                &deformed,
                &g_cur,
                &mut grads.deform,
            );
            for (a, b) in grads.dynamics.iter_mut().zip(&canon) {
                a.add_assign(b);
            }
            let arap = arap_loss(&self.deform, kf.time, w.w1_arap, Some(&mut grads.deform));
            obj.arap += arap;
            obj.total += w.w1_arap * arap;
        }

        let n = frames.len().max(1) as f64;
        let inv = 1.0 / n;
        for v in [
            &mut obj.total,
            &mut obj.l1_color,
            &mut obj.l1_depth,
            &mut obj.d_ssim,
            &mut obj.flow,
            &mut obj.arap,
        ] {
            *v *= inv;
        }
        let scale_grad = |g: &mut GaussianGrad| {
            for j in 0..3 {
                g.mean[j] *= inv;
                g.log_scale[j] *= inv;
                g.color[j] *= inv;
            }
            g.rot.iter_mut().for_each(|v| *v *= inv);
            g.opacity_logit *= inv;
        };
        grads.statics.iter_mut().for_each(scale_grad);
        grads.dynamics.iter_mut().for_each(scale_grad);
        grads.deform.scale(inv);
        grads.poses.values_mut().flatten().for_each(|v| *v *= inv);
        grads
            .exposures
            .values_mut()
            .flatten()
            .for_each(|v| *v *= inv);

        // Isotropy enters as a per-Gaussian mean so its weight does not grow
        // with the map.
        let (iso_s, gs) = iso_loss(statics);
        let (iso_d, gd) = iso_loss(dynamics);
        let per = 1.0 / (statics.len() + dynamics.len()).max(1) as f64;
        obj.iso = (iso_s + iso_d) * per;
        obj.total += w.w2_iso * obj.iso;
        for (g, d) in grads
            .statics
            .iter_mut()
            .zip(&gs)
            .chain(grads.dynamics.iter_mut().zip(&gd))
        {
            for j in 0..3 {
                g.log_scale[j] += w.w2_iso * per * d[j];
            }
        }
        Ok((obj, grads))
    }

    fn snapshot(&self, frames: &[usize]) -> Snapshot {
        Snapshot {
            map: self.map.clone(),
            deform: self.deform.clone(),
            frames: frames
                .iter()
                .map(|id| (*id, self.registry[id].pose, self.registry[id].exposure))
                .collect(),
        }
    }

    fn restore(&mut self, s: Snapshot) {
        self.map = s.map;
        self.deform = s.deform;
        for (id, pose, exposure) in s.frames {
            let kf = self.registry.get_mut(&id).expect("snapshot keyframe");
            kf.pose = pose;
            kf.exposure = exposure;
        }
    }

    /// Keyframes whose pose may move: the window head minus the first
    /// keyframe of the sequence, which anchors the world frame.
    fn learnable_frames(&self) -> Vec<usize> {
        let anchor = self.registry.keys().next().copied();
        self.window
            .ids
            .iter()
            .copied()
            .take(self.cfg.mapping.window_head)
            .filter(|id| Some(*id) != anchor)
            .collect()
    }

    fn new_optim(&self, frames: &[usize]) -> MapOptim {
        MapOptim {
            gaussians: Adam::new(self.map.len() * PARAMS_PER_GAUSSIAN),
            net: Adam::new(self.deform.net.params.len()),
            points: Adam::new(self.deform.points.len() * 3),
            radii: Adam::new(self.deform.points.len()),
            poses: frames.iter().map(|&id| (id, Adam::new(6))).collect(),
            exposures: frames.iter().map(|&id| (id, Adam::new(2))).collect(),
        }
    }

    fn apply(&mut self, opt: &mut MapOptim, g: &MapGrads, learn: &Learnable) {
        let lr = self.cfg.learning_rates.clone();
        if learn.gaussians {
            let ns = self.map.statics.len();
            let count = self.map.len();
            let mut params = Vec::with_capacity(count * PARAMS_PER_GAUSSIAN);
            let mut grads = Vec::with_capacity(count * PARAMS_PER_GAUSSIAN);
            for (gp, gg) in self
                .map
                .statics
                .gaussians()
                .iter()
                .zip(&g.statics)
                .chain(self.map.dynamics.gaussians.iter().zip(&g.dynamics))
            {
                for j in 0..PARAMS_PER_GAUSSIAN {
                    params.push(get_param(gp, j));
                    grads.push(get_grad(gg, j));
                }
            }
            let rate = |i: usize| match i % PARAMS_PER_GAUSSIAN {
                0..=2 => lr.means,
                3..=6 => lr.rotations,
                7..=9 => lr.scales,
                10 => lr.opacities,
                _ => lr.colors,
            };
            if opt.gaussians.update_with(&mut params, &grads, rate) == StepOutcome::Applied {
                let write = |gs: &mut [GaussianPrimitive], offset: usize| {
                    for (i, gp) in gs.iter_mut().enumerate() {
                        for j in 0..PARAMS_PER_GAUSSIAN {
                            set_param(gp, j, params[(offset + i) * PARAMS_PER_GAUSSIAN + j]);
                        }
                        gp.normalize_rotation();
                    }
                };
                write(&mut self.map.statics.0.gaussians, 0);
                write(&mut self.map.dynamics.gaussians, ns);
            }
        }
        if learn.deform && !self.deform.points.is_empty() {
            opt.net
                .update(&mut self.deform.net.params, &g.deform.net, lr.deform_net);
            let mut pos: Vec<f64> = self
                .deform
                .points
                .positions
                .iter()
                .flatten()
                .copied()
                .collect();
            let gpos: Vec<f64> = g.deform.positions.iter().flatten().copied().collect();
            if opt.points.update(&mut pos, &gpos, lr.control_points) == StepOutcome::Applied {
                for (p, c) in self.deform.points.positions.iter_mut().zip(pos.chunks(3)) {
                    p.copy_from_slice(c);
                }
            }
            if self.cfg.deform.learnable_radii {
                opt.radii.update(
                    &mut self.deform.points.log_radii,
                    &g.deform.log_radii,
                    lr.control_points,
                );
            }
        }
        for &id in &learn.frames {
            let kf = self.registry.get_mut(&id).expect("learnable keyframe");
            if let (Some(adam), Some(gp)) = (opt.poses.get_mut(&id), g.poses.get(&id)) {
                let mut delta: Twist = [0.0; 6];
                let rate = |i: usize| if i < 3 { lr.pose_trans } else { lr.pose_rot };
                if adam.update_with(&mut delta, gp, rate) == StepOutcome::Applied {
                    kf.pose = kf.pose.retract(&delta);
                }
            }
            if let (Some(adam), Some(ge)) = (opt.exposures.get_mut(&id), g.exposures.get(&id)) {
                let mut e = [kf.exposure.log_gain, kf.exposure.offset];
                if adam.update(&mut e, ge, lr.exposure) == StepOutcome::Applied {
                    kf.exposure = Exposure {
                        log_gain: e[0],
                        offset: e[1],
                    };
                }
            }
        }
    }

    /// `global` extra keyframes are drawn from the rest of the registry at
    /// every iteration.
    fn run_stage(
        &mut self,
        selection: &[usize],
        global: usize,
        iters: usize,
        objective: Objective,
        learn: Learnable,
    ) -> StageReport {
        let mut report = StageReport::default();
        if selection.is_empty() || iters == 0 {
            return report;
        }
        let rest: Vec<usize> = self
            .registry
            .keys()
            .copied()
            .filter(|id| !selection.contains(id))
            .collect();
        let global = global.min(rest.len());
        let snapshot = self.snapshot(&learn.frames);
        let mut opt = self.new_optim(&learn.frames);
        for it in 0..iters {
            let mut frames = selection.to_vec();
            if global > 0 {
                let mut idx = sample(&mut self.rng, rest.len(), global).into_vec();
                idx.sort_unstable();
                frames.extend(idx.into_iter().map(|i| rest[i]));
            }
            let (obj, grads) = match self.evaluate(&frames, objective) {
                Ok(v) => v,
                Err(e) => {
                    log::error!("mapping evaluation failed: {e}");
                    report.aborted = true;
                    break;
                }
            };
            if !obj.total.is_finite() {
                log::warn!("non-finite mapping loss at iteration {it}; restoring stage snapshot");
                report.aborted = true;
                break;
            }
            report.losses.push(obj.total);
            report.flow_losses.push(obj.flow);
            self.apply(&mut opt, &grads, &learn);
        }
        if report.aborted {
            self.restore(snapshot);
        }
        report
    }

    /// Poses, exposures and the deformation only; Gaussians stay frozen and
    /// the color/depth weights double inside the motion region.
    pub fn map_stage1(&mut self, selection: &[usize], iters: usize) -> StageReport {
        self.stage1_with_global(selection, 0, iters)
    }

    pub(super) fn stage1_with_global(
        &mut self,
        selection: &[usize],
        global: usize,
        iters: usize,
    ) -> StageReport {
        let learn = Learnable {
            gaussians: false,
            deform: true,
            frames: self.learnable_frames(),
        };
        self.run_stage(selection, global, iters, Objective::Stage1, learn)
    }

    /// Everything, followed by pruning of static Gaussians.
    pub fn map_stage2(&mut self, selection: &[usize], iters: usize) -> StageReport {
        self.stage2_with_global(selection, 0, iters)
    }

    pub(super) fn stage2_with_global(
        &mut self,
        selection: &[usize],
        global: usize,
        iters: usize,
    ) -> StageReport {
        let learn = Learnable {
            gaussians: true,
            deform: true,
            frames: self.learnable_frames(),
        };
        let mut report = self.run_stage(selection, global, iters, Objective::Stage2, learn);
        if self.cfg.mapping.prune_after_stage2 && !report.aborted {
            report.pruned = self.prune(selection);
        }
        report
    }

    /// Removes static Gaussians that are nearly transparent, or that project
    /// below the footprint threshold in every selected view that sees them.
    pub fn prune(&mut self, selection: &[usize]) -> usize {
        let mc = &self.cfg.mapping;
        let poses: Vec<PoseSE3> = selection.iter().map(|id| self.registry[id].pose).collect();
        let keep: Vec<bool> = self
            .map
            .statics
            .gaussians()
            .iter()
            .map(|g| {
                if g.opacity() < mc.prune_opacity {
                    return false;
                }
                let s_max = g.scales().into_iter().fold(0.0, f64::max);
                let mut seen = false;
                for pose in &poses {
                    if let Some((_, _, z)) = project_point(&g.mean_vec(), pose, &self.k).visible() {
                        seen = true;
                        if self.k.fx * s_max / z >= mc.prune_footprint_px {
                            return true;
                        }
                    }
                }
                !seen
            })
            .collect();
        let removed = self.map.statics.0.retain_indices(&keep);
        if removed > 0 {
            log::debug!("pruned {removed} static Gaussians");
        }
        removed
    }

    /// Global color refinement: each iteration samples up to
    /// `refine_frames` distinct keyframes and optimizes Gaussians and the
    /// deformation with poses and exposures frozen.
    pub fn refine_colors(&mut self) -> StageReport {
        let ids: Vec<usize> = self.registry.keys().copied().collect();
        let mut report = StageReport::default();
        if ids.is_empty() {
            return report;
        }
        let learn = Learnable {
            gaussians: true,
            deform: true,
            frames: Vec::new(),
        };
        let snapshot = self.snapshot(&[]);
        let mut opt = self.new_optim(&[]);
        let n = self.cfg.mapping.refine_frames.min(ids.len());
        for it in 0..self.cfg.mapping.refine_iters {
            let mut pick = sample(&mut self.rng, ids.len(), n).into_vec();
            pick.sort_unstable();
            let frames: Vec<usize> = pick.into_iter().map(|i| ids[i]).collect();
            let (obj, grads) = match self.evaluate(&frames, Objective::Refinement) {
                Ok(v) if v.0.total.is_finite() => v,
                _ => {
                    log::warn!("refinement failed at iteration {it}; restoring");
                    report.aborted = true;
                    break;
                }
            };
            report.losses.push(obj.total);
            self.apply(&mut opt, &grads, &learn);
        }
        if report.aborted {
            self.restore(snapshot);
        }
        report
    }
}
