//! Sequence ingestion, synthetic scenes, flow sidecars, checkpoints and
//! exporters.

mod checkpoint;
mod flo;
mod flow_provider;
mod ply;
mod png;
mod synth;
mod tum;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    TrajectoryEntry, CHECKPOINT_VERSION,
};
pub use flo::{decode_flo, encode_flo, read_flo, write_flo};
pub use flow_provider::{FileFlowProvider, FlowProvider, NoFlow};
pub use ply::{encode_ply, export_ply};
pub use png::{
    read_color_png, read_depth_png, read_mask_png, write_color_png, write_depth_png,
    write_mask_png, write_unit_png, DEPTH_SCALE,
};
pub use synth::{generate_synthetic, write_synthetic, SceneScript, SyntheticScene};
pub use tum::{
    default_intrinsics, format_trajectory, load_tum_sequence, read_intrinsics, read_trajectory,
    write_intrinsics, write_trajectory, Frame, FrameIter, SequenceSource, TimedPose,
    MAX_ASSOCIATION_GAP,
};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
