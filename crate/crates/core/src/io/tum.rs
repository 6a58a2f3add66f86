//! TUM RGB-D directory layout: `rgb.txt`, `depth.txt`, optional
//! `groundtruth.txt`, `mask/` and `flow/`, plus an `intrinsics.txt` sidecar.

use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::flow_provider::FileFlowProvider;
use super::png::{read_color_png, read_depth_png, read_mask_png};
use super::{atomic_write, read_file};
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::image::{check_shape, DepthImage, Mask, RgbImage};
use crate::se3::PoseSE3;

/// Largest rgb/depth timestamp difference accepted as one frame.
pub const MAX_ASSOCIATION_GAP: f64 = 0.02;
const PREFETCH: usize = 4;

/// A pose with its timestamp. The pose is world-to-camera; files store
/// camera-to-world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: PoseSE3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub color: RgbImage,
    /// Meters; zero where missing.
    pub depth: DepthImage,
    /// True where the pixel is static. All true without a mask file.
    pub mask: Mask,
}

#[derive(Debug, Clone)]
struct Entry {
    timestamp: f64,
    rgb: PathBuf,
    depth: PathBuf,
    mask: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SequenceSource {
    pub root: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub ground_truth: Option<Vec<TimedPose>>,
    entries: Vec<Entry>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        message: message.into(),
    }
}

/// Non-empty, non-comment lines with their 1-based numbers.
fn data_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| parse_err(path, 0, "not UTF-8"))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect())
}

fn parse_f64(path: &Path, line: usize, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_err(path, line, format!("bad number {s:?}")))
}

fn read_file_list(path: &Path) -> Result<Vec<(f64, String)>> {
    let mut out: Vec<(f64, String)> = Vec::new();
    for (n, line) in data_lines(path)? {
        let mut it = line.split_whitespace();
        let (Some(ts), Some(file), None) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err(path, n, "expected `timestamp filename`"));
        };
        let ts = parse_f64(path, n, ts)?;
        if let Some(&(last, _)) = out.last() {
            if ts <= last {
                return Err(parse_err(path, n, "timestamps must increase"));
            }
        }
        out.push((ts, file.to_string()));
    }
    Ok(out)
}

/// Reads a TUM trajectory (`timestamp tx ty tz qx qy qz qw`, camera-to-world).
pub fn read_trajectory(path: &Path) -> Result<Vec<TimedPose>> {
    let mut out = Vec::new();
    for (n, line) in data_lines(path)? {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| parse_f64(path, n, s))
            .collect::<Result<_>>()?;
        if v.len() != 8 {
            return Err(parse_err(
                path,
                n,
                format!("expected 8 values, got {}", v.len()),
            ));
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if q.norm() < 1e-6 {
            return Err(parse_err(path, n, "zero quaternion"));
        }
        let c2w = PoseSE3::new(
            UnitQuaternion::from_quaternion(q),
            Vector3::new(v[1], v[2], v[3]),
        );
        out.push(TimedPose {
            timestamp: v[0],
            pose: c2w.inverse(),
        });
    }
    Ok(out)
}

pub fn format_trajectory(poses: &[TimedPose]) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for p in poses {
        let c2w = p.pose.inverse();
        let t = c2w.translation;
        let q = c2w.rotation.quaternion();
        s.push_str(&format!(
            "{:.6} {} {} {} {} {} {} {}\n",
            p.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        ));
    }
    s
}

pub fn write_trajectory(path: &Path, poses: &[TimedPose]) -> Result<()> {
    atomic_write(path, format_trajectory(poses).as_bytes())
}

/// `fx fy cx cy width height` on one line.
pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let lines = data_lines(path)?;
    let Some((n, line)) = lines.first() else {
        return Err(parse_err(path, 0, "empty intrinsics file"));
    };
    let v: Vec<&str> = line.split_whitespace().collect();
    if v.len() != 6 {
        return Err(parse_err(path, *n, "expected `fx fy cx cy width height`"));
    }
    let f: Vec<f64> = v[..4]
        .iter()
        .map(|s| parse_f64(path, *n, s))
        .collect::<Result<_>>()?;
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_err(path, *n, format!("bad size {s:?}")))
    };
    CameraIntrinsics::new(f[0], f[1], f[2], f[3], dim(v[4])?, dim(v[5])?)
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    let s = format!(
        "# fx fy cx cy width height\n{} {} {} {} {} {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    );
    atomic_write(path, s.as_bytes())
}

/// Nearest-timestamp association of every rgb entry with a depth entry.
/// Rgb entries without depth within the gap are skipped.
fn associate(rgb: &[(f64, String)], depth: &[(f64, String)]) -> Vec<(f64, String, String)> {
    let mut out = Vec::new();
    let mut j = 0;
    for (ts, rgb_file) in rgb {
        while j + 1 < depth.len() && (depth[j + 1].0 - ts).abs() <= (depth[j].0 - ts).abs() {
            j += 1;
        }
        match depth.get(j) {
            Some((dts, dfile)) if (dts - ts).abs() <= MAX_ASSOCIATION_GAP => {
                out.push((*ts, rgb_file.clone(), dfile.clone()));
            }
            _ => {
                log::warn!("no depth within {MAX_ASSOCIATION_GAP} s of rgb frame {ts:.6}; skipped")
            }
        }
    }
    out
}

/// Intrinsics used when the sequence has no `intrinsics.txt`.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480).expect("valid defaults")
}

pub fn load_tum_sequence(root: &Path) -> Result<SequenceSource> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "sequence directory not found"),
        ));
    }
    let rgb = read_file_list(&root.join("rgb.txt"))?;
    let depth = read_file_list(&root.join("depth.txt"))?;
    let sidecar = root.join("intrinsics.txt");
    let intrinsics = if sidecar.exists() {
        read_intrinsics(&sidecar)?
    } else {
        log::warn!("{} missing; using default intrinsics", sidecar.display());
        default_intrinsics()
    };
    let gt_path = root.join("groundtruth.txt");
    let ground_truth = if gt_path.exists() {
        Some(read_trajectory(&gt_path)?)
    } else {
        None
    };
    let mask_dir = root.join("mask");
    let entries = associate(&rgb, &depth)
        .into_iter()
        .map(|(timestamp, rgb, depth)| {
            let mask = mask_dir.is_dir().then(|| {
                let stem = Path::new(&rgb)
                    .file_stem()
                    .unwrap_or_default()
                    .to_string_lossy();
                mask_dir.join(format!("{stem}.png"))
            });
            Entry {
                timestamp,
                rgb: root.join(rgb),
                depth: root.join(depth),
                mask: mask.filter(|p| p.exists()),
            }
        })
        .collect();
    Ok(SequenceSource {
        root: root.to_path_buf(),
        intrinsics,
        ground_truth,
        entries,
    })
}

fn load_entry(index: usize, e: &Entry, k: &CameraIntrinsics) -> Result<Frame> {
    let color = read_color_png(&e.rgb)?;
    let depth = read_depth_png(&e.depth)?;
    let mask = match &e.mask {
        Some(p) => read_mask_png(p)?,
        None => Mask::filled(color.width, color.height, true),
    };
    check_shape(&color, &depth, "color vs depth")?;
    check_shape(&color, &mask, "color vs mask")?;
    if color.width != k.width || color.height != k.height {
        return Err(Error::Shape(format!(
            "frame {index} is {}x{}, intrinsics say {}x{}",
            color.width, color.height, k.width, k.height
        )));
    }
    Ok(Frame {
        index,
        timestamp: e.timestamp,
        color,
        depth,
        mask,
    })
}

impl SequenceSource {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.timestamp).collect()
    }

    pub fn load_frame(&self, index: usize) -> Result<Frame> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("frame {index} out of range")))?;
        load_entry(index, e, &self.intrinsics)
    }

    /// Frames in order, decoded on a background thread a few frames ahead.
    pub fn frames(&self, max_frames: Option<usize>) -> FrameIter {
        let n = max_frames.map_or(self.len(), |m| m.min(self.len()));
        let entries: Vec<Entry> = self.entries[..n].to_vec();
        let k = self.intrinsics;
        let (tx, rx) = sync_channel(PREFETCH - 1);
        let worker = std::thread::spawn(move || {
            for (i, e) in entries.iter().enumerate() {
                let frame = load_entry(i, e, &k);
                let failed = frame.is_err();
                if tx.send(frame).is_err() || failed {
                    break;
                }
            }
        });
        FrameIter {
            rx,
            worker: Some(worker),
        }
    }

    /// Provider over `flow/<a>_<b>.flo` when the directory exists.
    pub fn flow_provider(&self) -> Option<FileFlowProvider> {
        let dir = self.root.join("flow");
        dir.is_dir().then(|| FileFlowProvider::new(dir))
    }
}

/// In-order frame stream; stops after the first error.
pub struct FrameIter {
    rx: Receiver<Result<Frame>>,
    worker: Option<JoinHandle<()>>,
}

impl Iterator for FrameIter {
    type Item = Result<Frame>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.rx.recv() {
            Ok(f) => Some(f),
            Err(_) => {
                if let Some(w) = self.worker.take() {
                    let _ = w.join();
                }
                None
            }
        }
    }
}

impl Drop for FrameIter {
    fn drop(&mut self) {
        // Unblock the worker before joining it.
        let (_, dummy) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dummy));
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
