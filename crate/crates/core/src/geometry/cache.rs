//! Binary cache for [`VoxelCoords`].
//!
//! Layout, little-endian: magic `DVAC`, version `u32`, ray dims `N H W D` and
//! grid dims `X Y Z` as `u32`, then `N·H·W·D` index triples as `i32`, then a
//! validity bitmap packed LSB-first (`ceil(N·H·W·D / 8)` bytes).

use std::io::{Read, Write};

use ndarray::Array4;

use super::{VoxelCoords, INVALID_INDEX};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"DVAC";
const VERSION: u32 = 1;

pub fn voxel_coords_to_bytes(cv: &VoxelCoords) -> Vec<u8> {
    let dims = cv.ray_dims();
    let count: usize = dims.iter().product();
    let mut out = Vec::with_capacity(4 + 4 * 8 + count * 12 + count.div_ceil(8));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims.iter().chain(cv.grid_dims.iter()) {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for (idx, ok) in cv.indices.iter().zip(cv.valid.iter()) {
        let idx = if *ok { *idx } else { INVALID_INDEX };
        for v in idx {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut bitmap = vec![0u8; count.div_ceil(8)];
    for (i, ok) in cv.valid.iter().enumerate() {
        if *ok {
            bitmap[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bitmap);
    out
}

pub fn write_voxel_coords(cv: &VoxelCoords, mut w: impl Write) -> Result<()> {
    w.write_all(&voxel_coords_to_bytes(cv))?;
    Ok(())
}

pub fn read_voxel_coords(mut r: impl Read) -> Result<VoxelCoords> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    voxel_coords_from_bytes(&buf)
}

pub fn voxel_coords_from_bytes(buf: &[u8]) -> Result<VoxelCoords> {
    let corrupt = |reason: &str| Error::CorruptRecord {
        index: 0,
        reason: reason.to_string(),
    };
    if buf.len() < 8 + 28 {
        return Err(corrupt("truncated header"));
    }
    let magic: [u8; 4] = buf[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let word = |at: usize| u32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let d: Vec<usize> = (0..7).map(|i| word(8 + 4 * i) as usize).collect();
    let count = d[0] * d[1] * d[2] * d[3];
    let body = 36;
    if buf.len() != body + count * 12 + count.div_ceil(8) {
        return Err(corrupt("payload length does not match dims"));
    }
    let bitmap = &buf[body + count * 12..];
    let mut indices = Vec::with_capacity(count);
    let mut valid = Vec::with_capacity(count);
    for i in 0..count {
        let at = body + i * 12;
        let triple = std::array::from_fn(|a| {
            i32::from_le_bytes(buf[at + 4 * a..at + 4 * a + 4].try_into().unwrap())
        });
        let ok = bitmap[i / 8] >> (i % 8) & 1 == 1;
        if ok && (0..3).any(|a| triple[a] < 0 || triple[a] as usize >= d[4 + a]) {
            return Err(corrupt("valid index outside the grid"));
        }
        indices.push(triple);
        valid.push(ok);
    }
    let shape = (d[0], d[1], d[2], d[3]);
    Ok(VoxelCoords {
        indices: Array4::from_shape_vec(shape, indices).unwrap(),
        valid: Array4::from_shape_vec(shape, valid).unwrap(),
        grid_dims: [d[4], d[5], d[6]],
    })
}
