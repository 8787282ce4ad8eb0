//! SPCD v1 point-cloud files: a 16-byte header (`SPCD`, version, point
//! count, channel count) followed by little-endian `f32` channels.

use std::path::Path;

use super::{Point, PointCloud, CHANNELS};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPCD";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + cloud.len() * CHANNELS * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    out.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
    for p in &cloud.points {
        for v in p.channels() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Parses an SPCD buffer. Identifiers live in the dataset manifest, so the
/// returned cloud carries the ones given here.
pub fn decode(bytes: &[u8], shape_id: &str, class_id: &str) -> Result<PointCloud> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("SPCD header truncated"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format("bad SPCD magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::format(format!("unsupported SPCD version {version}")));
    }
    let count = word(8) as usize;
    let channels = word(12) as usize;
    if channels != CHANNELS {
        return Err(Error::format(format!("expected {CHANNELS} channels, found {channels}")));
    }
    if count == 0 {
        return Err(Error::format("SPCD file holds no points"));
    }
    let expected = count
        .checked_mul(CHANNELS * 4)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format("SPCD point count overflows"))?;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "SPCD payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let floats: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let points = floats
        .chunks_exact(CHANNELS)
        .map(|c| Point::new([c[0], c[1], c[2]], [c[3], c[4], c[5]]))
        .collect();
    let cloud = PointCloud::new(points, shape_id, class_id);
    cloud.validate().map_err(|e| Error::format(e.to_string()))?;
    Ok(cloud)
}

pub fn write(path: &Path, cloud: &PointCloud) -> Result<()> {
    crate::io::write_atomic(path, &encode(cloud))
}

pub fn read(path: &Path, shape_id: &str, class_id: &str) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, shape_id, class_id)
}
