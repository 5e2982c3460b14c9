//! "CAPD" dataset files, little-endian throughout:
//!
//! ```text
//! magic "CAPD" | version u32 | count u32
//! per example: R u32 | image f32[3*R*R] | caption_len u32 | caption UTF-8
//! ```
//!
//! Scenes are not stored; reading recovers them from the pixels and rejects
//! files whose captions disagree with their images.

use std::fs;
use std::path::Path;

use super::{caption_of, inverse_render, Example};
use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"CAPD";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(examples: &[Example]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(examples.len() as u32).to_le_bytes());
    for ex in examples {
        out.extend_from_slice(&(ex.resolution() as u32).to_le_bytes());
        for v in ex.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(ex.caption.len() as u32).to_le_bytes());
        out.extend_from_slice(ex.caption.as_bytes());
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Example>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::Format("missing CAPD magic".into()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Version { found: version, expected: DATASET_VERSION });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let res = r.u32()? as usize;
        let n = res
            .checked_mul(res)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| Error::Format("resolution overflow".into()))?;
        let data = r.f32s(n)?;
        let image = Tensor::new(vec![3, res, res], data)?;
        let len = r.u32()? as usize;
        let caption = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format(format!("example {i}: caption is not UTF-8")))?
            .to_owned();
        let scene =
            inverse_render(&image).ok_or_else(|| Error::Format(format!("example {i}: image holds no scene")))?;
        if caption_of(&scene) != caption {
            return Err(Error::Format(format!("example {i}: caption {caption:?} does not match its image")));
        }
        out.push(Example { image, caption, scene });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    fs::write(path, encode_dataset(examples))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Example>> {
    decode_dataset(&fs::read(path)?)
}
