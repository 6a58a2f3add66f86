//! Run configuration. Serialized as TOML with one section per subsystem;
//! every field has a default so partial files are accepted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub weights: LossWeights,
    pub tracking: TrackingConfig,
    pub keyframes: KeyframeConfig,
    pub deform: DeformConfig,
    pub mapping: MappingConfig,
    pub learning_rates: LearningRates,
    /// Frame index at which dynamic Gaussians and control points are created.
    pub dynamic_init_frame: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            weights: LossWeights::default(),
            tracking: TrackingConfig::default(),
            keyframes: KeyframeConfig::default(),
            deform: DeformConfig::default(),
            mapping: MappingConfig::default(),
            learning_rates: LearningRates::default(),
            dynamic_init_frame: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Color/depth balance λ.
    pub lambda: f64,
    pub lambda_flow: f64,
    /// ARAP weight W₁.
    pub w1_arap: f64,
    /// Isotropy weight W₂.
    pub w2_iso: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            lambda_flow: 3.0,
            w1_arap: 1e-4,
            w2_iso: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    /// Sobel-magnitude threshold σ for the color term.
    pub grad_gate_sigma: f64,
    /// Depth term applies only where rendered opacity exceeds this.
    pub opacity_gate: f64,
    pub iterations: usize,
    pub lr_rot: f64,
    pub lr_trans: f64,
    pub lr_exposure: f64,
    pub convergence_eps: f64,
    pub convergence_patience: usize,
    pub divergence_factor: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            grad_gate_sigma: 0.01,
            opacity_gate: 0.95,
            iterations: 100,
            lr_rot: 2e-3,
            lr_trans: 1e-3,
            lr_exposure: 1e-2,
            convergence_eps: 1e-6,
            convergence_patience: 5,
            divergence_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyframeConfig {
    pub keyframe_max_gap: usize,
    pub mask_iou_threshold: f64,
    pub insert_overlap: f64,
    pub evict_overlap: f64,
    pub sample_overlap: f64,
    pub translation_threshold: f64,
    pub window_capacity: usize,
    /// Alpha a Gaussian must reach at some pixel to count as visible.
    pub visibility_alpha: f64,
    pub densify_stride: usize,
    pub densify_opacity: f64,
    pub densify_depth_factor: f64,
    pub new_gaussian_opacity: f64,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        Self {
            keyframe_max_gap: 5,
            mask_iou_threshold: 0.8,
            insert_overlap: 0.9,
            evict_overlap: 0.05,
            sample_overlap: 0.1,
            translation_threshold: 0.04,
            window_capacity: 8,
            visibility_alpha: 0.01,
            densify_stride: 1,
            densify_opacity: 0.5,
            densify_depth_factor: 5.0,
            new_gaussian_opacity: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformConfig {
    pub knn_k: usize,
    pub control_point_count: usize,
    pub hidden_width: usize,
    pub position_bands: usize,
    pub time_bands: usize,
    pub learnable_radii: bool,
    /// Stride used when sampling masked pixels for dynamic Gaussians.
    pub dynamic_stride: usize,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            knn_k: 4,
            control_point_count: 32,
            hidden_width: 64,
            position_bands: 6,
            time_bands: 4,
            learnable_radii: true,
            dynamic_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    /// Iterations spent on the very first keyframe.
    pub init_iters: usize,
    pub refine_iters: usize,
    pub refine_frames: usize,
    pub window_head: usize,
    pub overlap_samples: usize,
    pub global_samples: usize,
    pub prune_opacity: f64,
    pub prune_footprint_px: f64,
    pub prune_after_stage2: bool,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            stage1_iters: 30,
            stage2_iters: 60,
            init_iters: 150,
            refine_iters: 1500,
            refine_frames: 10,
            window_head: 3,
            overlap_samples: 5,
            global_samples: 2,
            prune_opacity: 0.005,
            prune_footprint_px: 0.1,
            prune_after_stage2: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub means: f64,
    pub rotations: f64,
    pub scales: f64,
    pub opacities: f64,
    pub colors: f64,
    pub pose_rot: f64,
    pub pose_trans: f64,
    pub exposure: f64,
    pub deform_net: f64,
    pub control_points: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            means: 1.6e-4,
            rotations: 1e-3,
            scales: 5e-3,
            opacities: 5e-2,
            colors: 2.5e-3,
            pose_rot: 1e-3,
            pose_trans: 3e-4,
            exposure: 1e-2,
            deform_net: 1e-4,
            control_points: 1e-4,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        for (name, v) in [
            ("lambda", w.lambda),
            ("lambda_flow", w.lambda_flow),
            ("w1_arap", w.w1_arap),
            ("w2_iso", w.w2_iso),
            ("grad_gate_sigma", self.tracking.grad_gate_sigma),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if w.lambda > 1.0 {
            return Err(Error::Config("lambda must lie in [0, 1]".into()));
        }
        let d = &self.deform;
        if d.knn_k < 1 || d.knn_k > d.control_point_count {
            return Err(Error::Config(format!(
                "knn_k must satisfy 1 <= knn_k <= control_point_count ({}), got {}",
                d.control_point_count, d.knn_k
            )));
        }
        if self.keyframes.window_capacity < self.mapping.window_head {
            return Err(Error::Config(
                "window_capacity must be >= window_head".into(),
            ));
        }
        if self.keyframes.keyframe_max_gap == 0 {
            return Err(Error::Config("keyframe_max_gap must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }
}
