//! Gaussian-splatting SLAM for dynamic RGB-D sequences.

pub mod camera;
pub mod config;
pub mod deform;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod image;
pub mod io;
pub mod loss;
pub mod mapper;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod se3;
pub mod tracker;

pub use camera::CameraIntrinsics;
pub use config::Config;
pub use error::{Error, Result};
pub use gaussian::{GaussianMap, GaussianPrimitive, StaticMap};
pub use image::{DepthImage, FlowImage, Image, Mask, RgbImage};
pub use se3::PoseSE3;
