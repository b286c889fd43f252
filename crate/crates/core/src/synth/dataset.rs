//! `DVAS` scene container.
//!
//! ```text
//! "DVAS" | version u32 | count u32 | count × (len u32 | payload | crc32 u32)
//! ```
//!
//! All integers and reals are little-endian. A payload holds the seed, the
//! rig (image size, per-camera `fx fy cx cy` and a row-major 4×4
//! camera→ego matrix), both ego poses as row-major 4×4 matrices, and the
//! boxes (`center`, `size`, `yaw` as f64, class as u32).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Box3D, Scene};
use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraRig, Intrinsics, RigidTransform};

const MAGIC: [u8; 4] = *b"DVAS";
const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_scene(scene: &Scene) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&scene.seed.to_le_bytes());
    put_u32(&mut buf, scene.rig.image_h as u32);
    put_u32(&mut buf, scene.rig.image_w as u32);
    put_u32(&mut buf, scene.rig.num_cameras() as u32);
    for cam in &scene.rig.cameras {
        let k = &cam.intrinsics;
        put_f64s(&mut buf, &[k.fx, k.fy, k.cx, k.cy]);
        put_f64s(&mut buf, &cam.cam_to_ego.to_row_major());
    }
    put_f64s(&mut buf, &scene.ego_pose_prev.to_row_major());
    put_f64s(&mut buf, &scene.ego_pose_curr.to_row_major());
    put_u32(&mut buf, scene.boxes.len() as u32);
    for b in &scene.boxes {
        put_f64s(&mut buf, &b.center);
        put_f64s(&mut buf, &b.size);
        put_f64s(&mut buf, &[b.yaw]);
        put_u32(&mut buf, u32::from(b.class_id));
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    index: usize,
}

impl<'a> Cursor<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptRecord {
            index: self.index,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s<const K: usize>(&mut self) -> Result<[f64; K]> {
        let mut out = [0.0; K];
        for v in &mut out {
            *v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        }
        Ok(out)
    }

    fn transform(&mut self) -> Result<RigidTransform> {
        let m = self.f64s::<16>()?;
        RigidTransform::from_row_major(&m).map_err(|e| self.corrupt(e.to_string()))
    }
}

fn decode_scene(payload: &[u8], index: usize) -> Result<Scene> {
    let mut c = Cursor {
        buf: payload,
        pos: 0,
        index,
    };
    let seed = c.u64()?;
    let image_h = c.u32()? as usize;
    let image_w = c.u32()? as usize;
    let n_cams = c.u32()? as usize;
    let mut cameras = Vec::with_capacity(n_cams.min(64));
    for _ in 0..n_cams {
        let [fx, fy, cx, cy] = c.f64s::<4>()?;
        let intrinsics = Intrinsics::new(fx, fy, cx, cy).map_err(|e| c.corrupt(e.to_string()))?;
        let cam_to_ego = c.transform()?;
        cameras.push(Camera {
            intrinsics,
            cam_to_ego,
        });
    }
    let rig = CameraRig::new(cameras, image_h, image_w).map_err(|e| c.corrupt(e.to_string()))?;
    let ego_pose_prev = c.transform()?;
    let ego_pose_curr = c.transform()?;
    let n_boxes = c.u32()? as usize;
    let mut boxes = Vec::with_capacity(n_boxes.min(1024));
    for _ in 0..n_boxes {
        let center = c.f64s::<3>()?;
        let size = c.f64s::<3>()?;
        let [yaw] = c.f64s::<1>()?;
        let class = c.u32()?;
        let b = Box3D {
            center,
            size,
            yaw,
            class_id: u8::try_from(class).map_err(|_| c.corrupt(format!("class {class}")))?,
        };
        b.validate().map_err(|e| c.corrupt(e.to_string()))?;
        boxes.push(b);
    }
    if c.pos != payload.len() {
        return Err(c.corrupt(format!("{} trailing bytes", payload.len() - c.pos)));
    }
    Ok(Scene {
        boxes,
        ego_pose_prev,
        ego_pose_curr,
        rig,
        seed,
    })
}

pub fn scenes_to_bytes(scenes: &[Scene]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, scenes.len() as u32);
    for s in scenes {
        let payload = encode_scene(s);
        put_u32(&mut out, payload.len() as u32);
        out.extend_from_slice(&payload);
        put_u32(&mut out, crc32fast::hash(&payload));
    }
    out
}

pub fn scenes_from_bytes(buf: &[u8]) -> Result<Vec<Scene>> {
    let mut c = Cursor { buf, pos: 0, index: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let count = c.u32()? as usize;
    let mut scenes = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        c.index = index;
        let len = c.u32()? as usize;
        let payload = c.take(len)?;
        let crc = c.u32()?;
        if crc32fast::hash(payload) != crc {
            return Err(c.corrupt("checksum mismatch"));
        }
        scenes.push(decode_scene(payload, index)?);
    }
    if c.pos != buf.len() {
        return Err(Error::CorruptRecord {
            index: count,
            reason: format!("{} trailing bytes after the last record", buf.len() - c.pos),
        });
    }
    Ok(scenes)
}

pub fn write_dataset(path: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&scenes_to_bytes(scenes))?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    scenes_from_bytes(&buf)
}
