//! Labeled clip records and the JSON dataset manifest.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::{downsample_to_length, read_embedding_file, EmbeddingSequence, Modality};
use crate::error::{Error, Result};
use crate::fsutil;

pub const MANIFEST_VERSION: u32 = 1;

/// One labeled clip. `label` is 1 for fake, 0 for real.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub label: u8,
    pub video_fake: bool,
    pub audio_fake: bool,
    pub manipulation_tags: BTreeSet<String>,
    pub group_key: String,
    pub video_path: PathBuf,
    pub audio_path: PathBuf,
}

impl Sample {
    pub fn is_fake(&self) -> bool {
        self.label == 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Manifest(format!(
                "sample {}: label must be 0 or 1, got {}",
                self.id, self.label
            )));
        }
        if self.is_fake() != (self.video_fake || self.audio_fake) {
            return Err(Error::Manifest(format!(
                "sample {}: label disagrees with per-modality fake flags",
                self.id
            )));
        }
        if self.is_fake() && self.manipulation_tags.is_empty() {
            return Err(Error::Manifest(format!(
                "sample {}: fake sample without manipulation tag",
                self.id
            )));
        }
        if !self.is_fake() && !self.manipulation_tags.is_empty() {
            return Err(Error::Manifest(format!(
                "sample {}: real sample carries manipulation tags",
                self.id
            )));
        }
        Ok(())
    }

    pub fn has_any_tag(&self, tags: &BTreeSet<String>) -> bool {
        self.manipulation_tags.iter().any(|t| tags.contains(t))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub samples: Vec<Sample>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            samples,
            metadata: BTreeMap::new(),
        }
    }

    /// Structural checks: version, unique ids, per-sample invariants.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                expected: MANIFEST_VERSION,
                found: self.format_version,
            });
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample id {}", s.id)));
            }
            s.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_json()?.as_bytes())
    }

    /// Parses and structurally validates a manifest without touching the
    /// embedding files.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fsutil::read_bytes(path)?;
        let m: DatasetManifest = serde_json::from_slice(&bytes)?;
        m.validate()?;
        Ok(m)
    }

    /// Reads a manifest and parses every referenced embedding file.
    pub fn load(path: &Path) -> Result<(Self, Dataset)> {
        let m = Self::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let ds = Dataset::load(&m, base, Streams::Both)?;
        Ok((m, ds))
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn subset(&self, ids: &[String]) -> Result<DatasetManifest> {
        let index: BTreeMap<&str, &Sample> =
            self.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        let samples = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| Error::Manifest(format!("unknown sample id {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DatasetManifest {
            format_version: self.format_version,
            samples,
            metadata: self.metadata.clone(),
        })
    }

    pub fn all_tags(&self) -> BTreeSet<String> {
        self.samples
            .iter()
            .flat_map(|s| s.manipulation_tags.iter().cloned())
            .collect()
    }
}

/// Which embedding streams to materialize when loading clips.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Streams {
    Both,
    VideoOnly,
    AudioOnly,
}

impl Streams {
    pub fn video(self) -> bool {
        !matches!(self, Streams::AudioOnly)
    }

    pub fn audio(self) -> bool {
        !matches!(self, Streams::VideoOnly)
    }
}

/// A clip ready for the model: audio already pooled to the video frame count.
/// Streams that were not requested are empty (`0 x 0`).
#[derive(Clone, Debug)]
pub struct Clip {
    pub sample: Sample,
    pub video: Array2<f32>,
    pub audio: Array2<f32>,
}

impl Clip {
    pub fn from_sequences(
        sample: Sample,
        video: Option<&EmbeddingSequence>,
        audio: Option<&EmbeddingSequence>,
        target_len: Option<usize>,
    ) -> Result<Self> {
        let video_arr = video.map(|v| v.to_array()).unwrap_or_else(|| Array2::zeros((0, 0)));
        let audio_arr = match audio {
            Some(a) => {
                let len = target_len
                    .or(video.map(|v| v.num_frames()))
                    .unwrap_or(a.num_frames());
                downsample_to_length(a, len)?.to_array()
            }
            None => Array2::zeros((0, 0)),
        };
        Ok(Self {
            sample,
            video: video_arr,
            audio: audio_arr,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.clips.iter().map(|c| c.sample.label).collect()
    }

    pub fn count_real(&self) -> usize {
        self.clips.iter().filter(|c| !c.sample.is_fake()).count()
    }

    pub fn count_fake(&self) -> usize {
        self.len() - self.count_real()
    }

    /// Loads the requested streams for every sample in `manifest`; relative
    /// paths resolve against `base_dir`. The audio stream is pooled to the
    /// video frame count; with audio only, video headers are still read for
    /// the target length.
    pub fn load(manifest: &DatasetManifest, base_dir: &Path, streams: Streams) -> Result<Self> {
        let mut clips = Vec::with_capacity(manifest.samples.len());
        for s in &manifest.samples {
            clips.push(load_clip(s, base_dir, streams)?);
        }
        Ok(Self { clips })
    }

    /// Clips whose ids appear in `ids`, in the order of `ids`.
    pub fn select(&self, ids: &[String]) -> Result<Dataset> {
        let index: BTreeMap<&str, &Clip> =
            self.clips.iter().map(|c| (c.sample.id.as_str(), c)).collect();
        let clips = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|c| (*c).clone())
                    .ok_or_else(|| Error::Manifest(format!("unknown sample id {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { clips })
    }
}

pub fn resolve(base_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

pub fn load_clip(sample: &Sample, base_dir: &Path, streams: Streams) -> Result<Clip> {
    let video = if streams.video() {
        Some(read_checked(&resolve(base_dir, &sample.video_path), Modality::Video)?)
    } else {
        None
    };
    let (audio, target) = if streams.audio() {
        let a = read_checked(&resolve(base_dir, &sample.audio_path), Modality::Audio)?;
        let target = match &video {
            Some(v) => v.num_frames(),
            None => video_frame_count(&resolve(base_dir, &sample.video_path))?,
        };
        (Some(a), Some(target))
    } else {
        (None, None)
    };
    Clip::from_sequences(sample.clone(), video.as_ref(), audio.as_ref(), target)
}

fn read_checked(path: &Path, modality: Modality) -> Result<EmbeddingSequence> {
    let seq = read_embedding_file(path)?;
    if seq.modality != modality {
        return Err(Error::Manifest(format!(
            "{} holds {:?} embeddings, expected {:?}",
            path.display(),
            seq.modality,
            modality
        )));
    }
    Ok(seq)
}

fn video_frame_count(path: &Path) -> Result<usize> {
    // Header only; the video payload is not needed for audio-only models.
    let bytes = fsutil::read_bytes(path)?;
    if bytes.len() < crate::embedding::HEADER_LEN {
        return Err(Error::SizeMismatch {
            expected: crate::embedding::HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    Ok(u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, video_fake: bool, audio_fake: bool, tags: &[&str]) -> Sample {
        Sample {
            id: id.into(),
            label: (video_fake || audio_fake) as u8,
            video_fake,
            audio_fake,
            manipulation_tags: tags.iter().map(|t| t.to_string()).collect(),
            group_key: id.into(),
            video_path: format!("{id}.video.emb").into(),
            audio_path: format!("{id}.audio.emb").into(),
        }
    }

    #[test]
    fn label_must_match_modality_flags() {
        let mut s = sample("a", true, false, &["A"]);
        s.validate().unwrap();
        s.label = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn tag_rules_for_real_and_fake() {
        assert!(sample("r", false, false, &["A"]).validate().is_err());
        assert!(sample("f", false, true, &[]).validate().is_err());
        sample("r", false, false, &[]).validate().unwrap();
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let m = DatasetManifest::new(vec![
            sample("x", false, false, &[]),
            sample("x", true, true, &["A"]),
        ]);
        assert!(m.validate().unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let json = r#"{"format_version":1,"samples":[],"metadata":{},"extra":1}"#;
        assert!(serde_json::from_str::<DatasetManifest>(json).is_err());
    }

    #[test]
    fn json_uses_snake_case_keys() {
        let m = DatasetManifest::new(vec![sample("s0", true, false, &["A"])]);
        let v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        let s = &v["samples"][0];
        for key in [
            "id",
            "label",
            "video_fake",
            "audio_fake",
            "manipulation_tags",
            "group_key",
            "video_path",
            "audio_path",
        ] {
            assert!(s.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["format_version"], 1);
    }

    #[test]
    fn load_reads_and_aligns_streams() {
        use crate::embedding::write_embedding_file;
        let dir = tempfile::tempdir().unwrap();
        let s = sample("c0", false, false, &[]);
        let v = EmbeddingSequence::new(Modality::Video, "c0", 2, 3, vec![1.0; 6]).unwrap();
        let a = EmbeddingSequence::new(Modality::Audio, "c0", 4, 2, (0..8).map(|i| i as f32).collect())
            .unwrap();
        write_embedding_file(&v, &dir.path().join(&s.video_path)).unwrap();
        write_embedding_file(&a, &dir.path().join(&s.audio_path)).unwrap();
        let m = DatasetManifest::new(vec![s]);
        m.save(&dir.path().join("manifest.json")).unwrap();
        let (_, ds) = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(ds.clips[0].video.dim(), (2, 3));
        assert_eq!(ds.clips[0].audio.dim(), (2, 2));
        // frames (0,1),(2,3) -> 1,2 ; (4,5),(6,7) -> 5,6
        assert_eq!(ds.clips[0].audio.as_slice().unwrap(), &[1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn missing_file_fails_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(vec![sample("gone", false, false, &[])]);
        m.save(&dir.path().join("manifest.json")).unwrap();
        assert!(matches!(
            DatasetManifest::load(&dir.path().join("manifest.json")),
            Err(Error::Io { .. })
        ));
    }
}
