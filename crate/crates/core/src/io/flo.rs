//! Middlebury `.flo` optical flow files.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use super::{atomic_write, read_file};
use crate::error::{Error, Result};
use crate::image::FlowImage;

const MAGIC: &[u8; 4] = b"PIEH";

pub fn encode_flo(flow: &FlowImage) -> Vec<u8> {
    let mut out = vec![0u8; 12 + 8 * flow.len()];
    out[..4].copy_from_slice(MAGIC);
    LittleEndian::write_i32(&mut out[4..8], flow.width as i32);
    LittleEndian::write_i32(&mut out[8..12], flow.height as i32);
    for (i, f) in flow.data.iter().enumerate() {
        let o = 12 + 8 * i;
        LittleEndian::write_f32(&mut out[o..o + 4], f[0] as f32);
        LittleEndian::write_f32(&mut out[o + 4..o + 8], f[1] as f32);
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowImage> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a .flo file (bad magic)".into()));
    }
    let w = LittleEndian::read_i32(&bytes[4..8]);
    let h = LittleEndian::read_i32(&bytes[8..12]);
    if w < 0 || h < 0 {
        return Err(Error::Format(format!(".flo has negative size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| Error::Format(".flo size overflows".into()))?;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "truncated .flo: {} bytes, expected {need}",
            bytes.len()
        )));
    }
    let data = bytes[12..need]
        .chunks_exact(8)
        .map(|c| {
            [
                LittleEndian::read_f32(&c[..4]) as f64,
                LittleEndian::read_f32(&c[4..]) as f64,
            ]
        })
        .collect();
    Ok(FlowImage {
        width: w,
        height: h,
        data,
    })
}

pub fn write_flo(path: &Path, flow: &FlowImage) -> Result<()> {
    atomic_write(path, &encode_flo(flow))
}

pub fn read_flo(path: &Path) -> Result<FlowImage> {
    decode_flo(&read_file(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}
