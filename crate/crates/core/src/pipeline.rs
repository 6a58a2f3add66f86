//! The tracking and mapping loop over a frame sequence.

use std::time::{Duration, Instant};

use crate::camera::CameraIntrinsics;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::io::{Checkpoint, FlowProvider, Frame, TimedPose, TrajectoryEntry};
use crate::loss::Observation;
use crate::mapper::{
    should_insert_keyframe, FrameState, InsertReason, Keyframe, KeyframeFlow, Mapper, StageReport,
};
use crate::render::RenderOutput;
use crate::se3::PoseSE3;
use crate::tracker::{predict_pose, track_frame, Exposure, TrackResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyframeCause {
    /// First frame, or the frame that initializes the dynamic Gaussians.
    Forced,
    Rule(InsertReason),
}

#[derive(Debug, Clone)]
pub struct FrameOutcome {
    pub frame_id: usize,
    pub pose: PoseSE3,
    pub exposure: Exposure,
    pub tracking: Option<TrackResult>,
    pub keyframe: Option<KeyframeCause>,
    pub mapping: Option<(StageReport, StageReport)>,
    pub tracking_time: Duration,
    pub mapping_time: Duration,
}

pub struct SlamSystem {
    pub mapper: Mapper,
    pub trajectory: Vec<TrajectoryEntry>,
    sequence_length: usize,
    flow: Box<dyn FlowProvider>,
}

impl SlamSystem {
    /// `sequence_length` fixes the normalized time `t = i / (n − 1)`.
    pub fn new(
        cfg: Config,
        k: CameraIntrinsics,
        sequence_length: usize,
        flow: Box<dyn FlowProvider>,
    ) -> Result<Self> {
        cfg.validate()?;
        k.validate()?;
        Ok(Self {
            mapper: Mapper::new(cfg, k),
            trajectory: Vec::new(),
            sequence_length,
            flow,
        })
    }

    pub fn from_checkpoint(c: Checkpoint, flow: Box<dyn FlowProvider>) -> Self {
        Self {
            mapper: Mapper::from_state(
                c.config,
                c.intrinsics,
                c.map,
                c.deform,
                c.deform_initial,
                c.keyframes,
                c.window,
            ),
            trajectory: c.trajectory,
            sequence_length: c.sequence_length,
            flow,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let m = &self.mapper;
        Checkpoint {
            config: m.cfg.clone(),
            intrinsics: m.k,
            sequence_length: self.sequence_length,
            map: m.map.clone(),
            deform: m.deform.clone(),
            deform_initial: m.deform_initial.clone(),
            keyframes: m.registry.values().cloned().collect(),
            window: m.window.clone(),
            trajectory: self.trajectory.clone(),
        }
    }

    pub fn config(&self) -> &Config {
        &self.mapper.cfg
    }

    pub fn time_of(&self, frame_id: usize) -> f64 {
        if self.sequence_length <= 1 {
            0.0
        } else {
            frame_id as f64 / (self.sequence_length - 1) as f64
        }
    }

    pub fn timed_poses(&self) -> Vec<TimedPose> {
        self.trajectory
            .iter()
            .map(|e| TimedPose {
                timestamp: e.timestamp,
                pose: e.pose,
            })
            .collect()
    }

    /// Tracks `frame`, then inserts and maps it if it becomes a keyframe.
    pub fn process_frame(&mut self, frame: &Frame) -> Result<FrameOutcome> {
        let k = self.mapper.k;
        if frame.color.width != k.width || frame.color.height != k.height {
            return Err(Error::Shape(format!(
                "frame {} is {}x{}, camera is {}x{}",
                frame.index, frame.color.width, frame.color.height, k.width, k.height
            )));
        }
        let id = frame.index;
        if self.trajectory.last().is_some_and(|e| e.frame_id >= id) {
            return Err(Error::InvalidArgument(format!(
                "frame {id} arrives out of order"
            )));
        }
        let cfg = self.mapper.cfg.clone();
        let started = Instant::now();

        let (pose, exposure, tracking) = match self.trajectory.as_slice() {
            [] => (PoseSE3::identity(), Exposure::default(), None),
            [.., prev] => {
                let init = match self.trajectory.len() {
                    1 => prev.pose,
                    n => predict_pose(&self.trajectory[n - 2].pose, &prev.pose),
                };
                let obs = Observation {
                    color: &frame.color,
                    depth: &frame.depth,
                    static_mask: &frame.mask,
                };
                let r = track_frame(
                    self.mapper.static_map(),
                    &obs,
                    &init,
                    &prev.exposure,
                    &k,
                    &cfg,
                )?;
                if !r.converged {
                    log::debug!(
                        "frame {id}: tracking stopped after {} iterations",
                        r.iterations_used
                    );
                }
                (r.pose, r.exposure, Some(r))
            }
        };
        self.trajectory.push(TrajectoryEntry {
            frame_id: id,
            timestamp: frame.timestamp,
            pose,
            exposure,
        });

        let init_dynamics = id == cfg.dynamic_init_frame && self.mapper.map.dynamics.is_empty();
        let cause = match self.mapper.last_keyframe() {
            None => Some(KeyframeCause::Forced),
            Some(_) if init_dynamics => Some(KeyframeCause::Forced),
            Some(last) => {
                let touched = self.mapper.touched(&pose);
                let state = FrameState {
                    frame_id: id,
                    pose: &pose,
                    mask: &frame.mask,
                    touched: &touched,
                };
                should_insert_keyframe(&state, last, &cfg.keyframes).map(KeyframeCause::Rule)
            }
        };

        let tracking_time = started.elapsed();
        let started = Instant::now();
        let mut mapping = None;
        if cause.is_some() {
            let flow = match self.mapper.last_keyframe() {
                Some(last) => self
                    .flow
                    .flow_pair(last.frame_id, id, k.width, k.height)?
                    .map(|(forward, backward)| KeyframeFlow {
                        prev_frame: last.frame_id,
                        forward,
                        backward,
                    }),
                None => None,
            };
            self.mapper.insert_keyframe(Keyframe {
                frame_id: id,
                timestamp: frame.timestamp,
                time: self.time_of(id),
                pose,
                exposure,
                color: frame.color.clone(),
                depth: frame.depth.clone(),
                mask: frame.mask.clone(),
                flow,
                touched: Vec::new(),
            });
            if init_dynamics {
                let n = self.mapper.initialize_dynamics(id);
                log::info!("frame {id}: {n} dynamic Gaussians");
            }
            mapping = Some(self.mapper.map_keyframe(id));
            self.sync_keyframe_poses();
        }
        let last = self.trajectory.last().expect("just pushed");
        Ok(FrameOutcome {
            frame_id: id,
            pose: last.pose,
            exposure: last.exposure,
            tracking,
            keyframe: cause,
            mapping,
            tracking_time,
            mapping_time: started.elapsed(),
        })
    }

    /// Mapping moves keyframe poses; the trajectory follows.
    fn sync_keyframe_poses(&mut self) {
        for e in &mut self.trajectory {
            if let Some(kf) = self.mapper.registry.get(&e.frame_id) {
                e.pose = kf.pose;
                e.exposure = kf.exposure;
            }
        }
    }

    /// Final color refinement over all keyframes.
    pub fn refine(&mut self) -> StageReport {
        let r = self.mapper.refine_colors();
        self.sync_keyframe_poses();
        r
    }

    /// Render of frame `frame_id` at its estimated pose and exposure.
    pub fn render_frame(&self, frame_id: usize) -> Option<RenderOutput> {
        let e = self.trajectory.iter().find(|e| e.frame_id == frame_id)?;
        Some(
            self.mapper
                .render(&e.pose, &e.exposure, self.time_of(frame_id)),
        )
    }

    /// `(rendered, observed)` color pairs for `frames`.
    pub fn render_pairs(&self, frames: &[Frame]) -> Vec<(RgbImage, RgbImage)> {
        frames
            .iter()
            .filter_map(|f| {
                self.render_frame(f.index)
                    .map(|r| (r.color, f.color.clone()))
            })
            .collect()
    }

    /// Dynamic-region flow loss with the deformation at initialization and
    /// now.
    pub fn flow_losses(&self) -> (Option<f64>, Option<f64>) {
        let initial = self
            .mapper
            .deform_initial
            .as_ref()
            .and_then(|f| self.mapper.keyframe_flow_loss(f));
        (initial, self.mapper.keyframe_flow_loss(&self.mapper.deform))
    }
}
