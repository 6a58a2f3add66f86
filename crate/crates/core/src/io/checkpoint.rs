//! Versioned binary checkpoint of the whole SLAM state.
//!
//! Layout: magic, version, section count, a table of `(tag, offset, length)`
//! entries, the section payloads, and a SHA-256 of everything before it.
//! All numbers are little-endian; floats are stored bit-exactly.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use sha2::{Digest, Sha256};

use super::{atomic_write, read_file};
use crate::camera::CameraIntrinsics;
use crate::config::Config;
use crate::deform::{ControlPointSet, DeformField, DeformNet};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianMap, GaussianPrimitive, GaussianSet, StaticMap};
use crate::image::{FlowImage, Image};
use crate::mapper::{Keyframe, KeyframeFlow, KeyframeWindow};
use crate::se3::PoseSE3;
use crate::tracker::Exposure;

const MAGIC: &[u8; 8] = b"DSPLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Estimated state of one processed frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub frame_id: usize,
    pub timestamp: f64,
    /// World-to-camera.
    pub pose: PoseSE3,
    pub exposure: Exposure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub intrinsics: CameraIntrinsics,
    /// Number of frames the normalized time is measured against.
    pub sequence_length: usize,
    pub map: GaussianMap,
    pub deform: DeformField,
    pub deform_initial: Option<DeformField>,
    pub keyframes: Vec<Keyframe>,
    pub window: KeyframeWindow,
    pub trajectory: Vec<TrajectoryEntry>,
}

type W = Vec<u8>;

fn put_u64(w: &mut W, v: usize) {
    w.write_u64::<LE>(v as u64).unwrap();
}

fn put_f64(w: &mut W, v: f64) {
    w.write_f64::<LE>(v).unwrap();
}

fn put_f64s(w: &mut W, v: &[f64]) {
    put_u64(w, v.len());
    v.iter().for_each(|&x| put_f64(w, x));
}

fn put_pose(w: &mut W, p: &PoseSE3) {
    let q = p.rotation.quaternion();
    for v in [
        q.w,
        q.i,
        q.j,
        q.k,
        p.translation.x,
        p.translation.y,
        p.translation.z,
    ] {
        put_f64(w, v);
    }
}

fn put_exposure(w: &mut W, e: &Exposure) {
    put_f64(w, e.log_gain);
    put_f64(w, e.offset);
}

fn put_image<P: Copy>(w: &mut W, img: &Image<P>, put: impl Fn(&mut W, P)) {
    put_u64(w, img.width);
    put_u64(w, img.height);
    img.data.iter().for_each(|&p| put(w, p));
}

fn put_gaussians(w: &mut W, set: &GaussianSet) {
    put_u64(w, set.len());
    for (g, &id) in set.gaussians.iter().zip(&set.ids) {
        w.write_u64::<LE>(id).unwrap();
        g.mean
            .iter()
            .chain(&g.rot)
            .chain(&g.log_scale)
            .for_each(|&v| put_f64(w, v));
        put_f64(w, g.opacity_logit);
        g.color.iter().for_each(|&v| put_f64(w, v));
        w.write_u8(g.dynamic as u8).unwrap();
        put_u64(w, g.birth_frame);
    }
}

fn put_field(w: &mut W, f: &DeformField) {
    put_u64(w, f.points.len());
    f.points
        .positions
        .iter()
        .flatten()
        .for_each(|&v| put_f64(w, v));
    put_f64s(w, &f.points.log_radii);
    put_u64(w, f.net.hidden);
    put_u64(w, f.net.position_bands);
    put_u64(w, f.net.time_bands);
    put_f64s(w, &f.net.params);
    put_u64(w, f.knn_k);
    put_u64(w, f.bindings.len());
    for b in &f.bindings {
        put_u64(w, b.len());
        b.iter().for_each(|&i| put_u64(w, i));
    }
}

fn put_keyframe(w: &mut W, kf: &Keyframe) {
    put_u64(w, kf.frame_id);
    put_f64(w, kf.timestamp);
    put_f64(w, kf.time);
    put_pose(w, &kf.pose);
    put_exposure(w, &kf.exposure);
    put_image(w, &kf.color, |w, p| p.iter().for_each(|&v| put_f64(w, v)));
    put_image(w, &kf.depth, put_f64);
    put_image(w, &kf.mask, |w, b| w.write_u8(b as u8).unwrap());
    match &kf.flow {
        None => w.write_u8(0).unwrap(),
        Some(f) => {
            w.write_u8(1).unwrap();
            put_u64(w, f.prev_frame);
            let flow = |w: &mut W, img: &FlowImage| {
                put_image(w, img, |w, p| p.iter().for_each(|&v| put_f64(w, v)))
            };
            flow(w, &f.forward);
            flow(w, &f.backward);
        }
    }
    put_u64(w, kf.touched.len());
    kf.touched
        .iter()
        .for_each(|&id| w.write_u64::<LE>(id).unwrap());
}

fn sections(c: &Checkpoint) -> Vec<([u8; 4], W)> {
    let mut out = Vec::new();

    out.push((*b"CONF", c.config.to_toml_string().into_bytes()));

    let mut w = W::new();
    let k = &c.intrinsics;
    for v in [k.fx, k.fy, k.cx, k.cy] {
        put_f64(&mut w, v);
    }
    put_u64(&mut w, k.width);
    put_u64(&mut w, k.height);
    put_f64(&mut w, k.near_clip);
    put_u64(&mut w, c.sequence_length);
    out.push((*b"INTR", w));

    let mut w = W::new();
    w.write_u64::<LE>(c.map.next_id).unwrap();
    put_gaussians(&mut w, &c.map.statics.0);
    put_gaussians(&mut w, &c.map.dynamics);
    out.push((*b"GAUS", w));

    let mut w = W::new();
    put_field(&mut w, &c.deform);
    match &c.deform_initial {
        None => w.write_u8(0).unwrap(),
        Some(f) => {
            w.write_u8(1).unwrap();
            put_field(&mut w, f);
        }
    }
    out.push((*b"DEFM", w));

    let mut w = W::new();
    put_u64(&mut w, c.keyframes.len());
    c.keyframes.iter().for_each(|kf| put_keyframe(&mut w, kf));
    put_u64(&mut w, c.window.capacity);
    put_u64(&mut w, c.window.ids.len());
    c.window.ids.iter().for_each(|&i| put_u64(&mut w, i));
    out.push((*b"KEYF", w));

    let mut w = W::new();
    put_u64(&mut w, c.trajectory.len());
    for t in &c.trajectory {
        put_u64(&mut w, t.frame_id);
        put_f64(&mut w, t.timestamp);
        put_pose(&mut w, &t.pose);
        put_exposure(&mut w, &t.exposure);
    }
    out.push((*b"TRAJ", w));
    out
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let secs = sections(c);
    let table_len = secs.len() * 20;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(CHECKPOINT_VERSION).unwrap();
    out.write_u32::<LE>(secs.len() as u32).unwrap();
    let mut offset = out.len() + table_len;
    for (tag, body) in &secs {
        out.extend_from_slice(tag);
        put_u64(&mut out, offset);
        put_u64(&mut out, body.len());
        offset += body.len();
    }
    for (_, body) in &secs {
        out.extend_from_slice(body);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    atomic_write(path, &encode_checkpoint(c))
}

struct R<'a>(Cursor<&'a [u8]>);

fn truncated(_: std::io::Error) -> Error {
    Error::Format("checkpoint section is truncated".into())
}

impl R<'_> {
    fn u8(&mut self) -> Result<u8> {
        self.0.read_u8().map_err(truncated)
    }

    fn u64(&mut self) -> Result<u64> {
        self.0.read_u64::<LE>().map_err(truncated)
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("count overflows".into()))
    }

    /// A length that cannot exceed the bytes left, at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        let left = self.0.get_ref().len() - self.0.position() as usize;
        if n.saturating_mul(unit.max(1)) > left {
            return Err(Error::Format(format!("implausible count {n}")));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        self.0.read_f64::<LE>().map_err(truncated)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn arr<const N: usize>(&mut self) -> Result<[f64; N]> {
        let mut a = [0.0; N];
        for v in &mut a {
            *v = self.f64()?;
        }
        Ok(a)
    }

    fn pose(&mut self) -> Result<PoseSE3> {
        let [w, i, j, k, x, y, z] = self.arr::<7>()?;
        Ok(PoseSE3::new(
            UnitQuaternion::new_unchecked(Quaternion::new(w, i, j, k)),
            Vector3::new(x, y, z),
        ))
    }

    fn exposure(&mut self) -> Result<Exposure> {
        Ok(Exposure {
            log_gain: self.f64()?,
            offset: self.f64()?,
        })
    }

    fn image<P>(
        &mut self,
        unit: usize,
        mut get: impl FnMut(&mut Self) -> Result<P>,
    ) -> Result<Image<P>> {
        let width = self.usize()?;
        let height = self.usize()?;
        let n = width
            .checked_mul(height)
            .ok_or_else(|| Error::Format("image size overflows".into()))?;
        let left = self.0.get_ref().len() - self.0.position() as usize;
        if n.saturating_mul(unit) > left {
            return Err(Error::Format("image payload truncated".into()));
        }
        let data = (0..n).map(|_| get(self)).collect::<Result<_>>()?;
        Ok(Image {
            width,
            height,
            data,
        })
    }

    fn gaussians(&mut self) -> Result<GaussianSet> {
        let n = self.len(8 * 16 + 1)?;
        let mut set = GaussianSet::default();
        for _ in 0..n {
            let id = self.u64()?;
            let g = GaussianPrimitive {
                mean: self.arr()?,
                rot: self.arr()?,
                log_scale: self.arr()?,
                opacity_logit: self.f64()?,
                color: self.arr()?,
                dynamic: self.u8()? != 0,
                birth_frame: self.usize()?,
            };
            set.push(g, id);
        }
        Ok(set)
    }

    fn field(&mut self) -> Result<DeformField> {
        let n = self.len(24)?;
        let positions = (0..n).map(|_| self.arr::<3>()).collect::<Result<_>>()?;
        let log_radii = self.f64s()?;
        let hidden = self.usize()?;
        let position_bands = self.usize()?;
        let time_bands = self.usize()?;
        let params = self.f64s()?;
        let knn_k = self.usize()?;
        let nb = self.len(8)?;
        let mut bindings = Vec::with_capacity(nb);
        for _ in 0..nb {
            let m = self.len(8)?;
            bindings.push((0..m).map(|_| self.usize()).collect::<Result<_>>()?);
        }
        Ok(DeformField {
            points: ControlPointSet {
                positions,
                log_radii,
            },
            net: DeformNet {
                hidden,
                position_bands,
                time_bands,
                params,
            },
            bindings,
            knn_k,
        })
    }

    fn keyframe(&mut self) -> Result<Keyframe> {
        let frame_id = self.usize()?;
        let timestamp = self.f64()?;
        let time = self.f64()?;
        let pose = self.pose()?;
        let exposure = self.exposure()?;
        let color = self.image(24, |r| r.arr::<3>())?;
        let depth = self.image(8, |r| r.f64())?;
        let mask = self.image(1, |r| Ok(r.u8()? != 0))?;
        let flow = match self.u8()? {
            0 => None,
            _ => Some(KeyframeFlow {
                prev_frame: self.usize()?,
                forward: self.image(16, |r| r.arr::<2>())?,
                backward: self.image(16, |r| r.arr::<2>())?,
            }),
        };
        let nt = self.len(8)?;
        let touched = (0..nt).map(|_| self.u64()).collect::<Result<_>>()?;
        Ok(Keyframe {
            frame_id,
            timestamp,
            time,
            pose,
            exposure,
            color,
            depth,
            mask,
            flow,
            touched,
        })
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let header = MAGIC.len() + 8;
    if bytes.len() < header + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum("checkpoint".into()));
    }
    let mut r = Cursor::new(&body[MAGIC.len()..]);
    let version = r.read_u32::<LE>().map_err(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.read_u32::<LE>().map_err(truncated)? as usize;
    let mut table = Vec::new();
    for _ in 0..count.min(body.len() / 20) {
        let mut tag = [0u8; 4];
        r.read_exact(&mut tag).map_err(truncated)?;
        let off = r.read_u64::<LE>().map_err(truncated)? as usize;
        let len = r.read_u64::<LE>().map_err(truncated)? as usize;
        if off.checked_add(len).is_none_or(|end| end > body.len()) {
            return Err(Error::Format("section outside the file".into()));
        }
        table.push((tag, &body[off..off + len]));
    }
    let section = |tag: &[u8; 4]| -> Result<R> {
        table
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, s)| R(Cursor::new(*s)))
            .ok_or_else(|| {
                Error::Format(format!("missing section {}", String::from_utf8_lossy(tag)))
            })
    };

    let conf = section(b"CONF")?.0.into_inner();
    let config = Config::from_toml_str(
        std::str::from_utf8(conf)
            .map_err(|_| Error::Format("config section is not UTF-8".into()))?,
    )?;

    let mut s = section(b"INTR")?;
    let [fx, fy, cx, cy] = s.arr::<4>()?;
    let intrinsics = CameraIntrinsics {
        fx,
        fy,
        cx,
        cy,
        width: s.usize()?,
        height: s.usize()?,
        near_clip: s.f64()?,
    };
    intrinsics.validate()?;
    let sequence_length = s.usize()?;

    let mut s = section(b"GAUS")?;
    let next_id = s.u64()?;
    let statics = StaticMap(s.gaussians()?);
    let dynamics = s.gaussians()?;

    let mut s = section(b"DEFM")?;
    let deform = s.field()?;
    let deform_initial = match s.u8()? {
        0 => None,
        _ => Some(s.field()?),
    };

    let mut s = section(b"KEYF")?;
    let nk = s.len(64)?;
    let keyframes = (0..nk).map(|_| s.keyframe()).collect::<Result<_>>()?;
    let capacity = s.usize()?;
    let nw = s.len(8)?;
    let ids = (0..nw).map(|_| s.usize()).collect::<Result<_>>()?;

    let mut s = section(b"TRAJ")?;
    let nt = s.len(88)?;
    let mut trajectory = Vec::with_capacity(nt);
    for _ in 0..nt {
        trajectory.push(TrajectoryEntry {
            frame_id: s.usize()?,
            timestamp: s.f64()?,
            pose: s.pose()?,
            exposure: s.exposure()?,
        });
    }

    Ok(Checkpoint {
        config,
        intrinsics,
        sequence_length,
        map: GaussianMap {
            statics,
            dynamics,
            next_id,
        },
        deform,
        deform_initial,
        keyframes,
        window: KeyframeWindow { ids, capacity },
        trajectory,
    })
}

/// Reads and verifies a checkpoint; nothing is returned unless every check
/// passes.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}
