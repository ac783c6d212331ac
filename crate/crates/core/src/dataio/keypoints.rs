//! Skeleton keypoint clips and the `SBKP` container.
//!
//! ```text
//! "SBKP" | u32 version | u32 F | u32 J | f32 fps | F×J×3 f32 coords
//! ```
//! Little-endian throughout. Missing joints are stored as NaN.

use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 203;

pub const FACE: Range<usize> = 0..128;
pub const BODY: Range<usize> = 128..161;
pub const LEFT_HAND: Range<usize> = 161..182;
pub const RIGHT_HAND: Range<usize> = 182..203;

/// Body-pose indices 11 and 12, offset into the global joint list.
pub const LEFT_SHOULDER: usize = 128 + 11;
pub const RIGHT_SHOULDER: usize = 128 + 12;

const MAGIC: &[u8; 4] = b"SBKP";
const VERSION: u32 = 1;
const HEADER: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointClip {
    pub frames: usize,
    pub fps: f32,
    /// `frames × 203 × 3`, row-major.
    pub coords: Vec<f64>,
    /// `frames × 203`; false where tracking failed (coords zeroed).
    pub valid: Vec<bool>,
}

impl KeypointClip {
    pub fn new(frames: usize, fps: f32, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != frames * NUM_JOINTS * 3 {
            return Err(Error::contract(format!(
                "expected {} coords for {frames} frames, got {}",
                frames * NUM_JOINTS * 3,
                coords.len()
            )));
        }
        Ok(KeypointClip {
            frames,
            fps,
            coords,
            valid: vec![true; frames * NUM_JOINTS],
        })
    }

    pub fn zeros(frames: usize, fps: f32) -> Self {
        KeypointClip {
            frames,
            fps,
            coords: vec![0.0; frames * NUM_JOINTS * 3],
            valid: vec![true; frames * NUM_JOINTS],
        }
    }

    pub fn joint(&self, frame: usize, joint: usize) -> [f64; 3] {
        let o = (frame * NUM_JOINTS + joint) * 3;
        [self.coords[o], self.coords[o + 1], self.coords[o + 2]]
    }

    pub fn set_joint(&mut self, frame: usize, joint: usize, xyz: [f64; 3]) {
        let o = (frame * NUM_JOINTS + joint) * 3;
        self.coords[o..o + 3].copy_from_slice(&xyz);
    }

    pub fn is_valid(&self, frame: usize, joint: usize) -> bool {
        self.valid[frame * NUM_JOINTS + joint]
    }

    /// Frames `[start, end)`, zero-padded (and flagged invalid) past the end.
    pub fn window(&self, start: usize, len: usize) -> KeypointClip {
        let mut out = KeypointClip::zeros(len, self.fps);
        for f in 0..len {
            let src = start + f;
            if src < self.frames {
                let (a, b) = (src * NUM_JOINTS * 3, (src + 1) * NUM_JOINTS * 3);
                out.coords[f * NUM_JOINTS * 3..(f + 1) * NUM_JOINTS * 3]
                    .copy_from_slice(&self.coords[a..b]);
                out.valid[f * NUM_JOINTS..(f + 1) * NUM_JOINTS]
                    .copy_from_slice(&self.valid[src * NUM_JOINTS..(src + 1) * NUM_JOINTS]);
            } else {
                out.valid[f * NUM_JOINTS..(f + 1) * NUM_JOINTS].fill(false);
            }
        }
        out
    }
}

pub fn encode_keypoints(clip: &KeypointClip) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER + clip.coords.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(clip.frames as u32).to_le_bytes());
    buf.extend_from_slice(&(NUM_JOINTS as u32).to_le_bytes());
    buf.extend_from_slice(&clip.fps.to_le_bytes());
    for (i, c) in clip.coords.iter().enumerate() {
        let v = if clip.valid[i / 3] { *c as f32 } else { f32::NAN };
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn u32_at(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or(Error::Format {
            offset: at,
            message: "truncated header".into(),
        })
}

pub fn decode_keypoints(bytes: &[u8]) -> Result<KeypointClip> {
    if bytes.get(..4) != Some(MAGIC) {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected SBKP".into(),
        });
    }
    let version = u32_at(bytes, 4)?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let frames = u32_at(bytes, 8)? as usize;
    let joints = u32_at(bytes, 12)? as usize;
    if joints != NUM_JOINTS {
        return Err(Error::Format {
            offset: 12,
            message: format!("expected {NUM_JOINTS} joints, found {joints}"),
        });
    }
    let fps = f32::from_bits(u32_at(bytes, 16)?);
    let n = frames * NUM_JOINTS * 3;
    let payload = &bytes[HEADER..];
    if payload.len() < n * 4 {
        return Err(Error::Format {
            offset: HEADER + payload.len() / 4 * 4,
            message: format!("truncated payload: need {} bytes, have {}", n * 4, payload.len()),
        });
    }
    let mut clip = KeypointClip::zeros(frames, fps);
    for (i, chunk) in payload[..n * 4].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if v.is_nan() {
            clip.valid[i / 3] = false;
        } else {
            clip.coords[i] = v as f64;
        }
    }
    for (j, ok) in clip.valid.iter().enumerate() {
        if !ok {
            clip.coords[j * 3..j * 3 + 3].fill(0.0);
        }
    }
    Ok(clip)
}

pub fn read_keypoints(path: &Path) -> Result<KeypointClip> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    decode_keypoints(&std::fs::read(path)?)
}

pub fn write_keypoints(path: &Path, clip: &KeypointClip) -> Result<()> {
    std::fs::write(path, encode_keypoints(clip))?;
    Ok(())
}

/// Per-clip shoulder statistics: mean midpoint and mean shoulder distance
/// over the frames where both shoulders are tracked.
pub fn shoulder_stats(clip: &KeypointClip) -> Option<([f64; 3], f64)> {
    let mut center = [0.0; 3];
    let mut dist = 0.0;
    let mut n = 0usize;
    for f in 0..clip.frames {
        if !(clip.is_valid(f, LEFT_SHOULDER) && clip.is_valid(f, RIGHT_SHOULDER)) {
            continue;
        }
        let l = clip.joint(f, LEFT_SHOULDER);
        let r = clip.joint(f, RIGHT_SHOULDER);
        for k in 0..3 {
            center[k] += 0.5 * (l[k] + r[k]);
        }
        dist += ((l[0] - r[0]).powi(2) + (l[1] - r[1]).powi(2) + (l[2] - r[2]).powi(2)).sqrt();
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let n = n as f64;
    Some((center.map(|c| c / n), dist / n))
}

/// Center the mean shoulder midpoint at the origin and scale the mean
/// shoulder distance to 1. Untracked joints stay at zero.
pub fn normalize_keypoints(clip: &KeypointClip) -> Result<KeypointClip> {
    let (center, dist) = shoulder_stats(clip).ok_or_else(|| {
        Error::Normalization("no frame has both shoulders tracked".into())
    })?;
    if !(dist > 1e-12) {
        return Err(Error::Normalization(
            "shoulder distance is zero in every frame".into(),
        ));
    }
    let mut out = clip.clone();
    for (j, ok) in clip.valid.iter().enumerate() {
        if !ok {
            continue;
        }
        for k in 0..3 {
            out.coords[j * 3 + k] = (clip.coords[j * 3 + k] - center[k]) / dist;
        }
    }
    Ok(out)
}
