//! Precomputed lip-reading features and the `SBLF` container.
//!
//! ```text
//! "SBLF" | u32 F | u32 C | F×C f32
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SBLF";
const HEADER: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct LipClip {
    pub frames: usize,
    pub dim: usize,
    pub features: Vec<f64>,
}

impl LipClip {
    pub fn new(frames: usize, dim: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != frames * dim {
            return Err(Error::contract(format!(
                "lip features: {} values for {frames}×{dim}",
                features.len()
            )));
        }
        Ok(LipClip {
            frames,
            dim,
            features,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.frames, self.dim], self.features.clone()).expect("shape")
    }

    /// Frames `[start, start+len)`, zero-padded past the end.
    pub fn window(&self, start: usize, len: usize) -> LipClip {
        let mut out = vec![0.0; len * self.dim];
        for f in 0..len {
            let src = start + f;
            if src < self.frames {
                out[f * self.dim..(f + 1) * self.dim]
                    .copy_from_slice(&self.features[src * self.dim..(src + 1) * self.dim]);
            }
        }
        LipClip {
            frames: len,
            dim: self.dim,
            features: out,
        }
    }
}

pub fn encode_lip(clip: &LipClip) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER + clip.features.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(clip.frames as u32).to_le_bytes());
    buf.extend_from_slice(&(clip.dim as u32).to_le_bytes());
    for v in &clip.features {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_lip(bytes: &[u8]) -> Result<LipClip> {
    if bytes.get(..4) != Some(MAGIC) {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected SBLF".into(),
        });
    }
    if bytes.len() < HEADER {
        return Err(Error::Format {
            offset: bytes.len(),
            message: "truncated header".into(),
        });
    }
    let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = frames * dim;
    let payload = &bytes[HEADER..];
    if payload.len() < n * 4 {
        return Err(Error::Format {
            offset: HEADER + payload.len() / 4 * 4,
            message: format!("truncated payload: need {} bytes", n * 4),
        });
    }
    let features = payload[..n * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    LipClip::new(frames, dim, features)
}

pub fn read_lip(path: &Path) -> Result<LipClip> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    decode_lip(&std::fs::read(path)?)
}

pub fn write_lip(path: &Path, clip: &LipClip) -> Result<()> {
    std::fs::write(path, encode_lip(clip))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let clip = LipClip::new(3, 2, vec![0.5, -1.25, 3.0, 0.0, 1e-3f32 as f64, 7.0]).unwrap();
        let bytes = encode_lip(&clip);
        assert_eq!(decode_lip(&bytes).unwrap(), clip);
        assert!(matches!(decode_lip(&bytes[..14]), Err(Error::Format { .. })));
        assert!(matches!(decode_lip(b"SBKP"), Err(Error::Format { offset: 0, .. })));
    }
}
