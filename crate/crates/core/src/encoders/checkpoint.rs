//! ENCK v1 checkpoints: a 36-byte header followed by every weight as a
//! little-endian `f64`, shape branch first.
//!
//! Header: `ENCK`, version, D, H, F, input channels, shape-branch weight
//! count, image-branch weight count, trainable flags (bit 0 shape, bit 1 image).

use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{EncoderDims, EncoderParams, Gradients};
use crate::geometry::CHANNELS;
use crate::io::Reader;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ENCK";
pub const VERSION: u32 = 1;

/// SHA-256 digest identifying an encoder (or one of its branches).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn of(bytes: &[u8]) -> Self {
        Fingerprint(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn encode_checkpoint(params: &EncoderParams) -> Vec<u8> {
    let d = params.dims();
    let shape = params.shape.tensors();
    let image = params.image.tensors();
    let count = |ts: &[&[f64]]| ts.iter().map(|t| t.len()).sum::<usize>();
    let flags = u32::from(params.shape_trainable) | (u32::from(params.image_trainable) << 1);
    let mut out = Vec::with_capacity(36 + 8 * params.num_weights());
    out.extend_from_slice(MAGIC);
    for word in [
        VERSION,
        d.embed as u32,
        d.hidden as u32,
        d.view as u32,
        CHANNELS as u32,
        count(&shape) as u32,
        count(&image) as u32,
        flags,
    ] {
        out.extend_from_slice(&word.to_le_bytes());
    }
    for t in shape.iter().chain(&image) {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<EncoderParams> {
    let mut r = Reader::new(bytes, "ENCK checkpoint");
    if r.take(4)? != MAGIC {
        return Err(Error::format("bad ENCK magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported ENCK version {version}")));
    }
    let embed = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let view = r.u32()? as usize;
    let channels = r.u32()? as usize;
    if channels != CHANNELS || embed == 0 || hidden == 0 || view == 0 {
        return Err(Error::format("ENCK header has invalid dimensions"));
    }
    let dims = EncoderDims { hidden, embed, view };
    let shape_count = r.u32()? as usize;
    let image_count = r.u32()? as usize;
    let flags = r.u32()?;

    let mut params = EncoderParams {
        shape: Gradients::zeros(dims).shape,
        image: Gradients::zeros(dims).image,
        shape_trainable: flags & 1 != 0,
        image_trainable: flags & 2 != 0,
    };
    let expect_shape: usize = params.shape.tensors().iter().map(|t| t.len()).sum();
    let expect_image: usize = params.image.tensors().iter().map(|t| t.len()).sum();
    if shape_count != expect_shape || image_count != expect_image {
        return Err(Error::format("ENCK branch sizes disagree with dimensions"));
    }
    for t in params.shape.tensors_mut().into_iter().chain(params.image.tensors_mut()) {
        for v in t.iter_mut() {
            *v = r.f64()?;
        }
    }
    r.finish()?;
    if !params.is_finite() {
        return Err(Error::format("ENCK checkpoint holds non-finite weights"));
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &EncoderParams) -> Result<Fingerprint> {
    let bytes = encode_checkpoint(params);
    crate::io::write_atomic(path, &bytes)?;
    Ok(Fingerprint::of(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
