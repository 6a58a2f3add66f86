//! Binary PLY export of Gaussians, one vertex per primitive.
//!
//! Scales are stored as logs and opacity as a logit, like the usual Gaussian
//! splatting viewers expect; colors are quantized to bytes.

use std::path::Path;

use byteorder::{LittleEndian as LE, WriteBytesExt};

use super::atomic_write;
use crate::error::Result;
use crate::gaussian::GaussianPrimitive;

const PROPERTIES: [&str; 11] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
];

pub fn encode_ply<'a>(gaussians: impl ExactSizeIterator<Item = &'a GaussianPrimitive>) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        gaussians.len()
    )
    .into_bytes();
    for p in PROPERTIES {
        out.extend_from_slice(format!("property float {p}\n").as_bytes());
    }
    for p in ["red", "green", "blue", "dy"] {
        out.extend_from_slice(format!("property uchar {p}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    for g in gaussians {
        let floats = g
            .mean
            .iter()
            .chain(&g.log_scale)
            .chain(&g.rot)
            .chain(std::iter::once(&g.opacity_logit));
        for &v in floats {
            out.write_f32::<LE>(v as f32).unwrap();
        }
        for c in g.color {
            out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(g.dynamic as u8);
    }
    out
}

pub fn export_ply<'a>(
    path: &Path,
    gaussians: impl ExactSizeIterator<Item = &'a GaussianPrimitive>,
) -> Result<()> {
    atomic_write(path, &encode_ply(gaussians))
}
