//! Source of dense optical flow between frame pairs.

use std::path::PathBuf;

use super::flo::read_flo;
use crate::error::Result;
use crate::image::FlowImage;

pub trait FlowProvider: Send {
    /// Flow from frame `a` to frame `b`, sourced at `a`. `Ok(None)` when the
    /// provider has nothing for that pair.
    fn flow(&self, a: usize, b: usize, width: usize, height: usize) -> Result<Option<FlowImage>>;

    /// Forward (`a → b`) and backward (`b → a`) flow, or `None` unless both
    /// exist.
    fn flow_pair(
        &self,
        a: usize,
        b: usize,
        width: usize,
        height: usize,
    ) -> Result<Option<(FlowImage, FlowImage)>> {
        let Some(f) = self.flow(a, b, width, height)? else {
            return Ok(None);
        };
        Ok(self.flow(b, a, width, height)?.map(|bw| (f, bw)))
    }
}

/// Provider without any flow.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoFlow;

impl FlowProvider for NoFlow {
    fn flow(&self, a: usize, b: usize, width: usize, height: usize) -> Result<Option<FlowImage>> {
        Ok((a == b).then(|| FlowImage::new(width, height)))
    }
}

/// Reads `<dir>/<a>_<b>.flo`.
#[derive(Debug, Clone)]
pub struct FileFlowProvider {
    pub dir: PathBuf,
}

impl FileFlowProvider {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }

    pub fn path(&self, a: usize, b: usize) -> PathBuf {
        self.dir.join(format!("{a}_{b}.flo"))
    }
}

impl FlowProvider for FileFlowProvider {
    fn flow(&self, a: usize, b: usize, width: usize, height: usize) -> Result<Option<FlowImage>> {
        if a == b {
            return Ok(Some(FlowImage::new(width, height)));
        }
        let p = self.path(a, b);
        if !p.exists() {
            return Ok(None);
        }
        let f = read_flo(&p)?;
        if f.width != width || f.height != height {
            return Err(crate::error::Error::Shape(format!(
                "{}: {}x{}, expected {width}x{height}",
                p.display(),
                f.width,
                f.height
            )));
        }
        Ok(Some(f))
    }
}
