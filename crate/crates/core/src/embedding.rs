//! Frame-level emotion embedding sequences and their on-disk format.
//!
//! Layout of an embedding file (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "EMOS"
//! 4       4     version (u32, = 1)
//! 8       1     modality (0 = video, 1 = audio)
//! 9       3     reserved, zero
//! 12      4     T, number of frames (u32, >= 1)
//! 16      4     d, embedding width (u32, >= 1)
//! 20      4*T*d payload, IEEE-754 binary32, row-major
//! ```

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMOS";
pub const EMBEDDING_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

/// Default embedding widths of the frozen visual and audio emotion encoders.
pub const VIDEO_DIM: usize = 512;
pub const AUDIO_DIM: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Audio,
}

impl Modality {
    fn code(self) -> u8 {
        match self {
            Modality::Video => 0,
            Modality::Audio => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Modality::Video),
            1 => Ok(Modality::Audio),
            other => Err(Error::InvalidHeader(format!("unknown modality code {other}"))),
        }
    }
}

/// One modality's frame-level embeddings, `num_frames x dim`, row-major f32.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub modality: Modality,
    pub sample_id: String,
    num_frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingSequence {
    pub fn new(
        modality: Modality,
        sample_id: impl Into<String>,
        num_frames: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if num_frames == 0 {
            return Err(Error::Shape("num_frames must be >= 1".into()));
        }
        if dim == 0 {
            return Err(Error::Shape("dim must be >= 1".into()));
        }
        if data.len() != num_frames * dim {
            return Err(Error::Shape(format!(
                "data length {} != {num_frames} x {dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite("embedding sequence", i));
        }
        Ok(Self {
            modality,
            sample_id: sample_id.into(),
            num_frames,
            dim,
            data,
        })
    }

    pub fn from_array(
        modality: Modality,
        sample_id: impl Into<String>,
        frames: &Array2<f32>,
    ) -> Result<Self> {
        let (t, d) = frames.dim();
        Self::new(modality, sample_id, t, d, frames.iter().copied().collect())
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_array(&self) -> Array2<f32> {
        Array2::from_shape_vec((self.num_frames, self.dim), self.data.clone())
            .expect("invariant: data length == num_frames * dim")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite("embedding sequence", i));
        }
        let t = u32::try_from(self.num_frames)
            .map_err(|_| Error::Shape("num_frames exceeds u32".into()))?;
        let d = u32::try_from(self.dim).map_err(|_| Error::Shape("dim exceeds u32".into()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.push(self.modality.code());
        out.extend_from_slice(&[0u8; 3]);
        out.extend_from_slice(&t.to_le_bytes());
        out.extend_from_slice(&d.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], sample_id: impl Into<String>) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != EMBEDDING_MAGIC {
            return Err(Error::BadMagic { expected: "EMOS" });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::SizeMismatch {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != EMBEDDING_VERSION {
            return Err(Error::VersionMismatch {
                expected: EMBEDDING_VERSION,
                found: version,
            });
        }
        let modality = Modality::from_code(bytes[8])?;
        if bytes[9..12] != [0, 0, 0] {
            return Err(Error::InvalidHeader("reserved bytes must be zero".into()));
        }
        let t = u32_at(12) as u64;
        let d = u32_at(16) as u64;
        if t == 0 {
            return Err(Error::InvalidHeader("zero frames (T = 0)".into()));
        }
        if d == 0 {
            return Err(Error::InvalidHeader("zero width (d = 0)".into()));
        }
        let expected = HEADER_LEN as u64 + 4 * t * d;
        if bytes.len() as u64 != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: bytes.len() as u64,
            });
        }
        let data: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(modality, sample_id, t as usize, d as usize, data)
    }
}

/// Writes `seq` in the embedding file format. Non-finite values are rejected
/// before anything touches the filesystem.
pub fn write_embedding_file(seq: &EmbeddingSequence, destination: &Path) -> Result<()> {
    let bytes = seq.to_bytes()?;
    fsutil::write_atomic(destination, &bytes)
}

/// Reads an embedding file; the sample id is taken from the file stem.
pub fn read_embedding_file(source: &Path) -> Result<EmbeddingSequence> {
    let bytes = fsutil::read_bytes(source)?;
    let id = source
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    EmbeddingSequence::from_bytes(&bytes, id)
}

/// Segment-mean pooling to `target_len` frames: output frame `i` averages source
/// frames `[floor(i*T/L), floor((i+1)*T/L))`.
pub fn downsample_to_length(seq: &EmbeddingSequence, target_len: usize) -> Result<EmbeddingSequence> {
    let t = seq.num_frames;
    if target_len == 0 {
        return Err(Error::InvalidArgument("target_len must be >= 1".into()));
    }
    if target_len > t {
        return Err(Error::InvalidArgument(format!(
            "target_len {target_len} exceeds num_frames {t}"
        )));
    }
    if target_len == t {
        return Ok(seq.clone());
    }
    let d = seq.dim;
    let mut out = Vec::with_capacity(target_len * d);
    let mut acc = vec![0f64; d];
    for i in 0..target_len {
        let start = i * t / target_len;
        let end = (i + 1) * t / target_len;
        acc.iter_mut().for_each(|a| *a = 0.0);
        for f in start..end {
            for (a, &v) in acc.iter_mut().zip(seq.frame(f)) {
                *a += v as f64;
            }
        }
        let n = (end - start) as f64;
        out.extend(acc.iter().map(|a| (a / n) as f32));
    }
    EmbeddingSequence::new(seq.modality, seq.sample_id.clone(), target_len, d, out)
}
