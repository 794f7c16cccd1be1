//! Seeded synthetic stand-in for a real audio-visual deepfake corpus.
//!
//! Every clip is driven by a smooth latent emotion trajectory `z(t)` in
//! `R^latent_dim`, pushed through two fixed random linear maps to a 512-d video
//! stream and a 1024-d audio stream, plus small isotropic noise. In a real clip
//! both streams follow the same trajectory.
//!
//! A manipulated stream is blended toward a trajectory drawn from the
//! *generator law*: flattened affect anchored near a fixed "neutral" latent
//! direction, independent of the other stream. With `s` the
//! `inconsistency_strength`, each fake sample uses one of two mechanisms (50/50):
//!
//! * inter-modal: the whole stream becomes `(1 - s) z + s z_gen`, which breaks
//!   agreement with the untouched stream;
//! * intra-modal: alternating segments between 2 or 3 random cut points are
//!   replaced by `(1 - s) z + s z_gen'` with a fresh generator draw per segment,
//!   producing temporal discontinuities.
//!
//! At `s = 0` fake and real streams are drawn from exactly the same law.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{write_embedding_file, EmbeddingSequence, Modality, AUDIO_DIM, VIDEO_DIM};
use crate::error::{Error, Result};
use crate::manifest::{Clip, Dataset, DatasetManifest, Sample};

const HARMONICS: usize = 3;
const FLUCTUATION_SCALE: f64 = 0.5;
const GEN_ANCHOR: f64 = 2.0;
const GEN_SPREAD: f64 = 0.4;
const GEN_DAMPING: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_real: usize,
    pub num_fake_video: usize,
    pub num_fake_audio: usize,
    pub num_fake_both: usize,
    #[serde(default = "default_seq_len_video")]
    pub seq_len_video: usize,
    #[serde(default = "default_seq_len_audio")]
    pub seq_len_audio: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_strength")]
    pub inconsistency_strength: f64,
    #[serde(default = "default_tag_pool")]
    pub manipulation_tag_pool: Vec<String>,
    pub seed: u64,
    #[serde(default = "default_video_dim")]
    pub video_dim: usize,
    #[serde(default = "default_audio_dim")]
    pub audio_dim: usize,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
}

fn default_seq_len_video() -> usize {
    16
}
fn default_seq_len_audio() -> usize {
    32
}
fn default_latent_dim() -> usize {
    8
}
fn default_strength() -> f64 {
    1.0
}
fn default_tag_pool() -> Vec<String> {
    vec!["A".into(), "B".into(), "C".into()]
}
fn default_video_dim() -> usize {
    VIDEO_DIM
}
fn default_audio_dim() -> usize {
    AUDIO_DIM
}
fn default_noise_std() -> f64 {
    0.1
}

impl SynthConfig {
    pub fn new(
        num_real: usize,
        num_fake_video: usize,
        num_fake_audio: usize,
        num_fake_both: usize,
        seed: u64,
    ) -> Self {
        Self {
            num_real,
            num_fake_video,
            num_fake_audio,
            num_fake_both,
            seq_len_video: default_seq_len_video(),
            seq_len_audio: default_seq_len_audio(),
            latent_dim: default_latent_dim(),
            inconsistency_strength: default_strength(),
            manipulation_tag_pool: default_tag_pool(),
            seed,
            video_dim: default_video_dim(),
            audio_dim: default_audio_dim(),
            noise_std: default_noise_std(),
        }
    }

    /// A balanced real/fake corpus of `total` samples, fakes split evenly over
    /// video-only, audio-only and both-modality manipulations.
    pub fn balanced(total: usize, seed: u64) -> Self {
        let num_real = total / 2;
        let fakes = total - num_real;
        let per = fakes / 3;
        let rem = fakes - 3 * per;
        Self::new(num_real, per + (rem > 0) as usize, per + (rem > 1) as usize, per, seed)
    }

    pub fn with_strength(mut self, s: f64) -> Self {
        self.inconsistency_strength = s;
        self
    }

    pub fn with_tags(mut self, tags: &[&str]) -> Self {
        self.manipulation_tag_pool = tags.iter().map(|t| t.to_string()).collect();
        self
    }

    pub fn total(&self) -> usize {
        self.num_real + self.num_fake_video + self.num_fake_audio + self.num_fake_both
    }

    pub fn num_fake(&self) -> usize {
        self.total() - self.num_real
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len_video == 0 || self.seq_len_audio == 0 {
            return Err(Error::Config("sequence lengths must be >= 1".into()));
        }
        if self.seq_len_audio < self.seq_len_video {
            return Err(Error::Config(
                "seq_len_audio must be >= seq_len_video (audio is pooled down to video length)"
                    .into(),
            ));
        }
        if self.latent_dim == 0 || self.video_dim == 0 || self.audio_dim == 0 {
            return Err(Error::Config("dimensions must be >= 1".into()));
        }
        if !(self.inconsistency_strength.is_finite() && self.inconsistency_strength >= 0.0) {
            return Err(Error::Config("inconsistency_strength must be finite and >= 0".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        if self.num_fake() > 0 && self.manipulation_tag_pool.is_empty() {
            return Err(Error::Config("manipulation_tag_pool is empty but fakes requested".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Real,
    FakeVideo,
    FakeAudio,
    FakeBoth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mechanism {
    InterModal,
    IntraModal,
}

/// Generated corpus held in memory; `write` materializes it on disk.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub video: Vec<EmbeddingSequence>,
    pub audio: Vec<EmbeddingSequence>,
    pub mechanisms: Vec<Option<Mechanism>>,
}

impl SynthDataset {
    /// Writes embedding files and `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (i, s) in self.manifest.samples.iter().enumerate() {
            write_embedding_file(&self.video[i], &dir.join(&s.video_path))?;
            write_embedding_file(&self.audio[i], &dir.join(&s.audio_path))?;
        }
        self.manifest.save(&dir.join("manifest.json"))
    }

    /// In-memory clips with the audio stream pooled to video length.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let clips = self
            .manifest
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Clip::from_sequences(s.clone(), Some(&self.video[i]), Some(&self.audio[i]), None)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { clips })
    }
}

/// Fixed per-corpus randomness: the two encoder maps and the neutral direction.
struct Law {
    video_map: Array2<f64>,
    audio_map: Array2<f64>,
    neutral: Vec<f64>,
}

/// Harmonic fluctuation around a static offset.
struct Trajectory {
    offset: Vec<f64>,
    amplitude: Vec<[f64; HARMONICS]>,
    phase: Vec<[f64; HARMONICS]>,
    freq: [f64; HARMONICS],
}

impl Trajectory {
    fn at(&self, tau: f64, out: &mut [f64]) {
        for (l, o) in out.iter_mut().enumerate() {
            let mut v = self.offset[l];
            for k in 0..HARMONICS {
                v += self.amplitude[l][k] * (2.0 * PI * self.freq[k] * tau + self.phase[l][k]).sin();
            }
            *o = v;
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn natural_trajectory(rng: &mut impl Rng, latent: usize) -> Trajectory {
    let offset = (0..latent).map(|_| normal(rng)).collect();
    fluctuating(rng, offset, 1.0)
}

fn generator_trajectory(rng: &mut impl Rng, law: &Law) -> Trajectory {
    let offset = law
        .neutral
        .iter()
        .map(|n| GEN_ANCHOR * n + GEN_SPREAD * normal(rng))
        .collect();
    fluctuating(rng, offset, GEN_DAMPING)
}

fn fluctuating(rng: &mut impl Rng, offset: Vec<f64>, damping: f64) -> Trajectory {
    let latent = offset.len();
    let mut freq = [0.0; HARMONICS];
    for (k, f) in freq.iter_mut().enumerate() {
        *f = (k + 1) as f64 * rng.random_range(0.5..1.0);
    }
    let amplitude = (0..latent)
        .map(|_| {
            let mut a = [0.0; HARMONICS];
            for (k, v) in a.iter_mut().enumerate() {
                *v = damping * FLUCTUATION_SCALE / (k + 1) as f64 * normal(rng);
            }
            a
        })
        .collect();
    let phase = (0..latent)
        .map(|_| {
            let mut p = [0.0; HARMONICS];
            for v in p.iter_mut() {
                *v = rng.random_range(0.0..2.0 * PI);
            }
            p
        })
        .collect();
    Trajectory {
        offset,
        amplitude,
        phase,
        freq,
    }
}

/// Per-stream latent path: either the clip's natural trajectory, or a blend
/// toward generator draws on some time segments.
struct StreamPlan<'a> {
    natural: &'a Trajectory,
    /// (start, end, generator trajectory) in clip time [0, 1]
    replaced: Vec<(f64, f64, Trajectory)>,
    strength: f64,
}

impl StreamPlan<'_> {
    fn latent_at(&self, tau: f64, out: &mut [f64], scratch: &mut [f64]) {
        self.natural.at(tau, out);
        if let Some((_, _, gen)) = self
            .replaced
            .iter()
            .find(|(a, b, _)| tau >= *a && tau < *b)
        {
            gen.at(tau, scratch);
            for (o, g) in out.iter_mut().zip(scratch.iter()) {
                *o = (1.0 - self.strength) * *o + self.strength * g;
            }
        }
    }
}

fn manipulate<'a>(
    rng: &mut impl Rng,
    law: &Law,
    natural: &'a Trajectory,
    mechanism: Mechanism,
    strength: f64,
) -> StreamPlan<'a> {
    let replaced = match mechanism {
        Mechanism::InterModal => vec![(0.0, f64::INFINITY, generator_trajectory(rng, law))],
        Mechanism::IntraModal => {
            let cuts_n = rng.random_range(2..=3);
            let mut cuts: Vec<f64> = (0..cuts_n).map(|_| rng.random_range(0.15..0.85)).collect();
            cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut bounds = vec![0.0];
            bounds.extend(cuts);
            bounds.push(f64::INFINITY);
            bounds
                .windows(2)
                .enumerate()
                .filter(|(i, _)| i % 2 == 1)
                .map(|(_, w)| (w[0], w[1], generator_trajectory(rng, law)))
                .collect()
        }
    };
    StreamPlan {
        natural,
        replaced,
        strength,
    }
}

fn render(
    rng: &mut impl Rng,
    plan: &StreamPlan<'_>,
    map: &Array2<f64>,
    frames: usize,
    noise_std: f64,
) -> Vec<f32> {
    let (dim, latent) = map.dim();
    let mut z = vec![0.0; latent];
    let mut scratch = vec![0.0; latent];
    let mut out = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        let tau = (t as f64 + 0.5) / frames as f64;
        plan.latent_at(tau, &mut z, &mut scratch);
        for r in 0..dim {
            let row = map.row(r);
            let mut v = 0.0;
            for (w, zl) in row.iter().zip(&z) {
                v += w * zl;
            }
            out.push((v + noise_std * normal(rng)) as f32);
        }
    }
    out
}

/// Generates the corpus. A pure function of `cfg` (including its seed).
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = cfg.latent_dim;
    let scale = 1.0 / (l as f64).sqrt();
    let video_map = Array2::from_shape_simple_fn((cfg.video_dim, l), || scale * normal(&mut rng));
    let audio_map = Array2::from_shape_simple_fn((cfg.audio_dim, l), || scale * normal(&mut rng));
    let mut neutral: Vec<f64> = (0..l).map(|_| normal(&mut rng)).collect();
    let norm = neutral.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    neutral.iter_mut().for_each(|v| *v /= norm);
    let law = Law {
        video_map,
        audio_map,
        neutral,
    };

    let mut kinds: Vec<Kind> = std::iter::repeat_n(Kind::Real, cfg.num_real)
        .chain(std::iter::repeat_n(Kind::FakeVideo, cfg.num_fake_video))
        .chain(std::iter::repeat_n(Kind::FakeAudio, cfg.num_fake_audio))
        .chain(std::iter::repeat_n(Kind::FakeBoth, cfg.num_fake_both))
        .collect();
    kinds.shuffle(&mut rng);

    let width = cfg.total().to_string().len().max(5);
    let mut samples = Vec::with_capacity(kinds.len());
    let mut video = Vec::with_capacity(kinds.len());
    let mut audio = Vec::with_capacity(kinds.len());
    let mut mechanisms = Vec::with_capacity(kinds.len());
    let mut fake_counter = 0usize;
    let s = cfg.inconsistency_strength;

    for (i, kind) in kinds.into_iter().enumerate() {
        let id = format!("s{i:0width$}");
        let natural = natural_trajectory(&mut rng, l);
        let (video_fake, audio_fake) = match kind {
            Kind::Real => (false, false),
            Kind::FakeVideo => (true, false),
            Kind::FakeAudio => (false, true),
            Kind::FakeBoth => (true, true),
        };
        let mechanism = (kind != Kind::Real).then(|| {
            if rng.random_bool(0.5) {
                Mechanism::InterModal
            } else {
                Mechanism::IntraModal
            }
        });
        let untouched = || StreamPlan {
            natural: &natural,
            replaced: Vec::new(),
            strength: 0.0,
        };
        let video_plan = match mechanism {
            Some(m) if video_fake => manipulate(&mut rng, &law, &natural, m, s),
            _ => untouched(),
        };
        let audio_plan = match mechanism {
            Some(m) if audio_fake => manipulate(&mut rng, &law, &natural, m, s),
            _ => untouched(),
        };
        let v = render(&mut rng, &video_plan, &law.video_map, cfg.seq_len_video, cfg.noise_std);
        let a = render(&mut rng, &audio_plan, &law.audio_map, cfg.seq_len_audio, cfg.noise_std);

        let mut tags = BTreeSet::new();
        if kind != Kind::Real {
            let pool = &cfg.manipulation_tag_pool;
            tags.insert(pool[fake_counter % pool.len()].clone());
            fake_counter += 1;
        }
        samples.push(Sample {
            id: id.clone(),
            label: (video_fake || audio_fake) as u8,
            video_fake,
            audio_fake,
            manipulation_tags: tags,
            group_key: id.clone(),
            video_path: format!("embeddings/{id}.video.emb").into(),
            audio_path: format!("embeddings/{id}.audio.emb").into(),
        });
        video.push(EmbeddingSequence::new(
            Modality::Video,
            id.clone(),
            cfg.seq_len_video,
            cfg.video_dim,
            v,
        )?);
        audio.push(EmbeddingSequence::new(
            Modality::Audio,
            id,
            cfg.seq_len_audio,
            cfg.audio_dim,
            a,
        )?);
        mechanisms.push(mechanism);
    }

    let mut manifest = DatasetManifest::new(samples);
    manifest.metadata.insert("source".into(), "synthetic".into());
    manifest.metadata.insert("seed".into(), cfg.seed.to_string());
    manifest
        .metadata
        .insert("inconsistency_strength".into(), format!("{s}"));
    manifest.validate()?;
    Ok(SynthDataset {
        manifest,
        video,
        audio,
        mechanisms,
    })
}

/// Generates the corpus and writes it under `dir` (manifest at `dir/manifest.json`).
pub fn generate_synthetic_dataset(cfg: &SynthConfig, dir: &Path) -> Result<DatasetManifest> {
    let ds = generate_synthetic(cfg)?;
    ds.write(dir)?;
    Ok(ds.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        let mut c = SynthConfig::new(10, 5, 5, 0, seed);
        c.video_dim = 12;
        c.audio_dim = 20;
        c
    }

    #[test]
    fn counts_and_labels_follow_config() {
        let ds = generate_synthetic(&small(3)).unwrap();
        let m = &ds.manifest;
        assert_eq!(m.samples.len(), 20);
        assert_eq!(m.samples.iter().filter(|s| s.label == 1).count(), 10);
        assert_eq!(m.samples.iter().filter(|s| s.video_fake && !s.audio_fake).count(), 5);
        assert_eq!(m.samples.iter().filter(|s| s.audio_fake && !s.video_fake).count(), 5);
        for s in &m.samples {
            assert_eq!(s.label == 1, s.video_fake || s.audio_fake);
        }
        assert_eq!(ds.video[0].num_frames(), 16);
        assert_eq!(ds.audio[0].num_frames(), 32);
    }

    #[test]
    fn tags_are_round_robin_over_fakes() {
        let ds = generate_synthetic(&small(4)).unwrap();
        let tags: Vec<String> = ds
            .manifest
            .samples
            .iter()
            .filter(|s| s.is_fake())
            .map(|s| s.manipulation_tags.iter().next().unwrap().clone())
            .collect();
        for (i, t) in tags.iter().enumerate() {
            assert_eq!(t, ["A", "B", "C"][i % 3]);
        }
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&small(11), a.path()).unwrap();
        generate_synthetic_dataset(&small(11), b.path()).unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(
                std::fs::read(&entry).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap(),
                "{}",
                rel.display()
            );
        }
        let c = generate_synthetic(&small(12)).unwrap();
        let a_ds = generate_synthetic(&small(11)).unwrap();
        assert_ne!(a_ds.video[0].data(), c.video[0].data());
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn zero_strength_leaves_streams_on_the_natural_law() {
        // With s = 0 the fake streams must equal the natural rendering; the
        // generator draws still consume randomness, so compare the latent plans.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let law = Law {
            video_map: Array2::eye(3),
            audio_map: Array2::eye(3),
            neutral: vec![1.0, 0.0, 0.0],
        };
        let nat = natural_trajectory(&mut rng, 3);
        for mech in [Mechanism::InterModal, Mechanism::IntraModal] {
            let plan = manipulate(&mut rng, &law, &nat, mech, 0.0);
            let (mut a, mut b, mut s) = (vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]);
            for t in 0..50 {
                let tau = t as f64 / 50.0;
                plan.latent_at(tau, &mut a, &mut s);
                nat.at(tau, &mut b);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn intra_modal_plans_alternate_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let law = Law {
            video_map: Array2::eye(2),
            audio_map: Array2::eye(2),
            neutral: vec![0.0, 1.0],
        };
        let nat = natural_trajectory(&mut rng, 2);
        for _ in 0..20 {
            let plan = manipulate(&mut rng, &law, &nat, Mechanism::IntraModal, 1.0);
            assert!(!plan.replaced.is_empty() && plan.replaced.len() <= 2);
            assert!(plan.replaced[0].0 >= 0.15);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small(1);
        c.seq_len_audio = 8;
        assert!(generate_synthetic(&c).is_err());
        let mut c = small(1);
        c.manipulation_tag_pool.clear();
        assert!(generate_synthetic(&c).is_err());
        let c = small(1).with_strength(-1.0);
        assert!(generate_synthetic(&c).is_err());
    }

    #[test]
    fn balanced_split_of_counts() {
        let c = SynthConfig::balanced(2800, 42);
        assert_eq!(c.total(), 2800);
        assert_eq!(c.num_real, 1400);
    }
}
