//! The emotion-consistency detector: two temporal encoders, fusion, a linear
//! head, the BCE + margin-contrastive objective and its training loop.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fsutil::derive_seed;
use crate::manifest::{Clip, Dataset, Sample};
use crate::nn::ops::{sigmoid, softplus};
use crate::nn::params::join;
use crate::nn::{Affine, EncoderCache, EncoderParams, ModalityRepr, Parameters, TransformerConfig};
use crate::optim::{AdamW, AdamWConfig, EarlyStopping, ReduceOnPlateau};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    #[default]
    Add,
    Concat,
    Product,
}

impl FusionStrategy {
    pub fn output_dim(self, dim: usize) -> usize {
        match self {
            FusionStrategy::Concat => 2 * dim,
            _ => dim,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Add => "add",
            FusionStrategy::Concat => "concat",
            FusionStrategy::Product => "product",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMode {
    #[default]
    Both,
    VideoOnly,
    AudioOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointEmotionRepr {
    pub vector: Array1<f64>,
    pub fusion_strategy: FusionStrategy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastivePair {
    pub left: ModalityRepr,
    pub right: ModalityRepr,
    pub pair_label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probability: f64,
    pub logit: f64,
    pub joint_repr: JointEmotionRepr,
}

pub fn fuse_modalities(
    h_v: &ModalityRepr,
    h_a: &ModalityRepr,
    strategy: FusionStrategy,
) -> Result<JointEmotionRepr> {
    let (v, a) = (&h_v.vector, &h_a.vector);
    if v.len() != a.len() {
        return Err(Error::Shape(format!(
            "cannot fuse lengths {} and {}",
            v.len(),
            a.len()
        )));
    }
    let vector = match strategy {
        FusionStrategy::Add => v + a,
        FusionStrategy::Product => v * a,
        FusionStrategy::Concat => concatenate![Axis(0), *v, *a],
    };
    Ok(JointEmotionRepr {
        vector,
        fusion_strategy: strategy,
    })
}

/// Single affine map to one logit.
pub fn classify(f_e: &JointEmotionRepr, head: &Affine) -> Result<Prediction> {
    if head.input_dim() != f_e.vector.len() || head.output_dim() != 1 {
        return Err(Error::Shape(format!(
            "head is {}x{}, input has width {}",
            head.input_dim(),
            head.output_dim(),
            f_e.vector.len()
        )));
    }
    let logit = f_e.vector.dot(&head.weight.column(0)) + head.bias[0];
    Ok(Prediction {
        probability: sigmoid(logit),
        logit,
        joint_repr: f_e.clone(),
    })
}

/// Binary cross-entropy evaluated from the logit: `y softplus(-z) + (1-y) softplus(z)`.
pub fn bce_loss(logit: f64, y: f64) -> f64 {
    y * softplus(-logit) + (1.0 - y) * softplus(logit)
}

fn unit(v: ArrayView1<'_, f64>) -> Result<(Array1<f64>, f64)> {
    let n = v.dot(&v).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidArgument(
            "zero-norm embedding in contrastive distance".into(),
        ));
    }
    Ok((&v / n, n))
}

/// Euclidean distance between the L2-normalized inputs.
pub fn contrastive_distance(h_v: ArrayView1<'_, f64>, h_a: ArrayView1<'_, f64>) -> Result<f64> {
    if h_v.len() != h_a.len() {
        return Err(Error::Shape("contrastive inputs differ in length".into()));
    }
    let (u, _) = unit(h_v)?;
    let (w, _) = unit(h_a)?;
    let diff = &u - &w;
    Ok(diff.dot(&diff).sqrt())
}

fn margin_term(d: f64, pair_label: u8, margin: f64) -> f64 {
    if pair_label == 1 {
        d * d
    } else {
        let gap = (margin - d).max(0.0);
        gap * gap
    }
}

pub fn contrastive_loss(pair: &ContrastivePair, margin: f64) -> Result<f64> {
    let d = contrastive_distance(pair.left.vector.view(), pair.right.vector.view())?;
    Ok(margin_term(d, pair.pair_label, margin))
}

/// Pair plan over batch indices: `(video index, audio index, pair label)`.
///
/// Each real sample contributes its own positive pair; each fake `F` draws one
/// real `R` and contributes `(F, R)` and `(R, F)` as negatives. Without reals
/// there are no pairs.
pub fn pair_indices(is_fake: &[bool], rng: &mut (impl RngCore + ?Sized)) -> Vec<(usize, usize, u8)> {
    let reals: Vec<usize> = (0..is_fake.len()).filter(|&i| !is_fake[i]).collect();
    if reals.is_empty() {
        return Vec::new();
    }
    let mut pairs = Vec::with_capacity(reals.len() + 2 * (is_fake.len() - reals.len()));
    for (i, &fake) in is_fake.iter().enumerate() {
        if fake {
            let r = reals[rng.random_range(0..reals.len())];
            pairs.push((i, r, 0));
            pairs.push((r, i, 0));
        } else {
            pairs.push((i, i, 1));
        }
    }
    pairs
}

pub fn build_contrastive_pairs(
    batch: &[(&Sample, ModalityRepr, ModalityRepr)],
    rng: &mut (impl RngCore + ?Sized),
) -> Vec<ContrastivePair> {
    let is_fake: Vec<bool> = batch.iter().map(|(s, _, _)| s.is_fake()).collect();
    pair_indices(&is_fake, rng)
        .into_iter()
        .map(|(v, a, y)| ContrastivePair {
            left: batch[v].1.clone(),
            right: batch[a].2.clone(),
            pair_label: y,
        })
        .collect()
}

pub fn combined_loss(bce: f64, contrast: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * bce + alpha * contrast
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer_epsilon: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    pub scheduler_patience: usize,
    pub scheduler_factor: f64,
    pub early_stop_patience: usize,
    pub alpha: f64,
    pub margin: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub fusion_strategy: FusionStrategy,
    pub disable_contrastive: bool,
    pub disable_temporal_transformers: bool,
    pub modality: ModalityMode,
    pub depth: usize,
    pub num_heads: usize,
    pub ffn_multiplier: usize,
    pub max_seq_len: usize,
    pub use_positional: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let t = TransformerConfig::default();
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.05,
            optimizer_epsilon: 1e-8,
            dropout: t.dropout_rate,
            max_epochs: 100,
            scheduler_patience: 4,
            scheduler_factor: 0.5,
            early_stop_patience: 50,
            alpha: 0.5,
            margin: 1.0,
            batch_size: 32,
            seed: 0,
            fusion_strategy: FusionStrategy::Add,
            disable_contrastive: false,
            disable_temporal_transformers: false,
            modality: ModalityMode::Both,
            depth: t.depth,
            num_heads: t.num_heads,
            ffn_multiplier: t.ffn_multiplier,
            max_seq_len: t.max_seq_len,
            use_positional: t.use_positional,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.margin > 0.0) {
            return bad("margin must be > 0");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be >= 0");
        }
        if !(self.optimizer_epsilon > 0.0) {
            return bad("optimizer_epsilon must be > 0");
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor <= 1.0) {
            return bad("scheduler_factor must lie in (0, 1]");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        self.transformer(512).validate()
    }

    pub fn transformer(&self, model_dim: usize) -> TransformerConfig {
        TransformerConfig {
            depth: self.depth,
            model_dim,
            num_heads: self.num_heads,
            ffn_multiplier: self.ffn_multiplier,
            dropout_rate: self.dropout,
            max_seq_len: self.max_seq_len,
            use_positional: self.use_positional,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: if self.disable_contrastive { 0.0 } else { self.alpha },
            margin: self.margin,
        }
    }

    pub fn spec(&self, video_dim: usize, audio_dim: usize) -> ModelSpec {
        ModelSpec {
            transformer: self.transformer(video_dim),
            fusion: self.fusion_strategy,
            modality: self.modality,
            use_transformers: !self.disable_temporal_transformers,
            video_dim,
            audio_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub margin: f64,
}

/// Architecture of one detector instance; stored in checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub transformer: TransformerConfig,
    pub fusion: FusionStrategy,
    pub modality: ModalityMode,
    pub use_transformers: bool,
    pub video_dim: usize,
    pub audio_dim: usize,
}

impl ModelSpec {
    pub fn uses_video(&self) -> bool {
        self.modality != ModalityMode::AudioOnly
    }

    pub fn uses_audio(&self) -> bool {
        self.modality != ModalityMode::VideoOnly
    }

    pub fn model_dim(&self) -> usize {
        self.transformer.model_dim
    }

    /// Width of the joint representation consumed by the head.
    pub fn joint_dim(&self) -> usize {
        match self.modality {
            ModalityMode::Both => self.fusion.output_dim(self.model_dim()),
            _ => self.model_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if self.video_dim != self.model_dim() {
            return Err(Error::Config(format!(
                "video dim {} must equal model_dim {}",
                self.video_dim,
                self.model_dim()
            )));
        }
        if self.audio_dim == 0 {
            return Err(Error::Config("audio dim must be positive".into()));
        }
        Ok(())
    }

    /// Training target for a sample: the clip label, or the per-modality flag
    /// in unimodal modes.
    pub fn target(&self, s: &Sample) -> f64 {
        let fake = match self.modality {
            ModalityMode::Both => s.is_fake(),
            ModalityMode::VideoOnly => s.video_fake,
            ModalityMode::AudioOnly => s.audio_fake,
        };
        if fake {
            1.0
        } else {
            0.0
        }
    }

    /// Contrastive pairs need both streams.
    pub fn supports_pairs(&self) -> bool {
        self.modality == ModalityMode::Both
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmoForensicsParams {
    pub video_encoder: Option<EncoderParams>,
    pub audio_projection: Option<Affine>,
    pub audio_encoder: Option<EncoderParams>,
    pub head: Affine,
}

impl Parameters for EmoForensicsParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [f64])) {
        self.video_encoder.visit(&join(prefix, "video_encoder"), f);
        self.audio_projection.visit(&join(prefix, "audio_projection"), f);
        self.audio_encoder.visit(&join(prefix, "audio_encoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.video_encoder.visit_mut(&join(prefix, "video_encoder"), f);
        self.audio_projection.visit_mut(&join(prefix, "audio_projection"), f);
        self.audio_encoder.visit_mut(&join(prefix, "audio_encoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmoForensics {
    pub spec: ModelSpec,
    pub params: EmoForensicsParams,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub bce: f64,
    pub contrast: f64,
    pub num_pairs: usize,
}

struct Encoded {
    h_v: Option<Array2<f64>>,
    h_a: Option<Array2<f64>>,
    video_cache: Option<EncoderCache>,
    audio_cache: Option<EncoderCache>,
    audio_in: Option<Array2<f64>>,
    joint: Array2<f64>,
    logits: Array1<f64>,
}

fn to_f64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

/// Row-wise mean over frames of each clip, stacked.
fn frame_means(mats: &[Array2<f64>]) -> Array2<f64> {
    let d = mats[0].ncols();
    let mut out = Array2::zeros((mats.len(), d));
    for (mut row, m) in out.outer_iter_mut().zip(mats) {
        row.assign(&m.mean_axis(Axis(0)).expect("non-empty sequence"));
    }
    out
}

impl EmoForensics {
    /// Fresh parameters; draws from `rng` in a fixed order (video encoder,
    /// audio projection, audio encoder, head).
    pub fn init(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let t = &spec.transformer;
        let video_encoder =
            (spec.uses_video() && spec.use_transformers).then(|| EncoderParams::init(t, rng));
        let audio_projection = spec
            .uses_audio()
            .then(|| Affine::glorot(spec.audio_dim, spec.model_dim(), rng));
        let audio_encoder =
            (spec.uses_audio() && spec.use_transformers).then(|| EncoderParams::init(t, rng));
        let head = Affine::glorot(spec.joint_dim(), 1, rng);
        Ok(Self {
            spec,
            params: EmoForensicsParams {
                video_encoder,
                audio_projection,
                audio_encoder,
                head,
            },
        })
    }

    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        Self::init(spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), Value::from("emoforensics"));
        meta.insert("spec".to_string(), serde_json::to_value(&self.spec)?);
        Ok(Checkpoint::from_params(&self.params, meta))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_str("kind")? != "emoforensics" {
            return Err(Error::Checkpoint("not an emoforensics checkpoint".into()));
        }
        let spec: ModelSpec = serde_json::from_value(
            ck.metadata
                .get("spec")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing model spec".into()))?,
        )?;
        let mut model = Self::new(spec, 0)?;
        ck.load_into(&mut model.params)?;
        Ok(model)
    }

    pub fn zero_grad(&self) -> EmoForensicsParams {
        let mut g = self.params.clone();
        g.fill(0.0);
        g
    }

    fn check_clip(&self, c: &Clip) -> Result<()> {
        let sp = &self.spec;
        if sp.uses_video() && c.video.ncols() != sp.video_dim {
            return Err(Error::Shape(format!(
                "sample {}: video dim {} != {}",
                c.sample.id,
                c.video.ncols(),
                sp.video_dim
            )));
        }
        if sp.uses_audio() && c.audio.ncols() != sp.audio_dim {
            return Err(Error::Shape(format!(
                "sample {}: audio dim {} != {}",
                c.sample.id,
                c.audio.ncols(),
                sp.audio_dim
            )));
        }
        if (sp.uses_video() && c.video.nrows() == 0) || (sp.uses_audio() && c.audio.nrows() == 0)
        {
            return Err(Error::Shape(format!("sample {}: empty stream", c.sample.id)));
        }
        Ok(())
    }

    fn encode(&self, clips: &[&Clip], mut dropout: Option<&mut dyn RngCore>) -> Result<Encoded> {
        if clips.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for c in clips {
            self.check_clip(c)?;
        }
        let sp = &self.spec;
        let t = &sp.transformer;
        let p = &self.params;

        let (h_v, video_cache) = if sp.uses_video() {
            let vids: Vec<Array2<f64>> = clips.iter().map(|c| to_f64(&c.video)).collect();
            match &p.video_encoder {
                Some(enc) => {
                    let views: Vec<ArrayView2<'_, f64>> = vids.iter().map(|v| v.view()).collect();
                    let (h, cache) = enc.forward_batch(t, &views, crate::nn::transformer::reborrow(&mut dropout))?;
                    (Some(h), Some(cache))
                }
                None => (Some(frame_means(&vids)), None),
            }
        } else {
            (None, None)
        };

        let (h_a, audio_cache, audio_in) = if sp.uses_audio() {
            let proj = p.audio_projection.as_ref().expect("audio projection present");
            let auds: Vec<Array2<f64>> = clips.iter().map(|c| to_f64(&c.audio)).collect();
            match &p.audio_encoder {
                Some(enc) => {
                    let views: Vec<ArrayView2<'_, f64>> = auds.iter().map(|a| a.view()).collect();
                    let stacked = concatenate(Axis(0), &views)
                        .map_err(|e| Error::Shape(e.to_string()))?;
                    let tokens = proj.forward(stacked.view());
                    let mut off = 0;
                    let tviews: Vec<ArrayView2<'_, f64>> = auds
                        .iter()
                        .map(|a| {
                            let v = tokens.slice(s![off..off + a.nrows(), ..]);
                            off += a.nrows();
                            v
                        })
                        .collect();
                    let (h, cache) = enc.forward_batch(t, &tviews, crate::nn::transformer::reborrow(&mut dropout))?;
                    (Some(h), Some(cache), Some(stacked))
                }
                None => {
                    let means = frame_means(&auds);
                    (Some(proj.forward(means.view())), None, Some(means))
                }
            }
        } else {
            (None, None, None)
        };

        let joint = match (&h_v, &h_a) {
            (Some(v), Some(a)) => match sp.fusion {
                FusionStrategy::Add => v + a,
                FusionStrategy::Product => v * a,
                FusionStrategy::Concat => concatenate![Axis(1), *v, *a],
            },
            (Some(v), None) => v.clone(),
            (None, Some(a)) => a.clone(),
            (None, None) => unreachable!("at least one stream is used"),
        };
        let logits = p.head.forward(joint.view()).column(0).to_owned();
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite("logits", i));
        }
        Ok(Encoded {
            h_v,
            h_a,
            video_cache,
            audio_cache,
            audio_in,
            joint,
            logits,
        })
    }

    /// Single-clip prediction; dropout is active iff `dropout` is `Some`.
    pub fn forward(&self, clip: &Clip, dropout: Option<&mut dyn RngCore>) -> Result<Prediction> {
        let enc = self.encode(&[clip], dropout)?;
        let logit = enc.logits[0];
        Ok(Prediction {
            probability: sigmoid(logit),
            logit,
            joint_repr: JointEmotionRepr {
                vector: enc.joint.row(0).to_owned(),
                fusion_strategy: self.spec.fusion,
            },
        })
    }

    /// Evaluation-mode logits and joint representations, computed in chunks.
    pub fn infer(&self, clips: &[Clip], chunk: usize) -> Result<(Array1<f64>, Array2<f64>)> {
        let mut logits = Vec::with_capacity(clips.len());
        let mut joints = Vec::with_capacity(clips.len());
        for part in clips.chunks(chunk.max(1)) {
            let refs: Vec<&Clip> = part.iter().collect();
            let enc = self.encode(&refs, None)?;
            logits.extend(enc.logits.iter().copied());
            joints.push(enc.joint);
        }
        let views: Vec<_> = joints.iter().map(|j| j.view()).collect();
        let joint = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Ok((Array1::from(logits), joint))
    }

    /// Evaluation-mode fake probabilities.
    pub fn scores(&self, data: &Dataset) -> Result<Vec<f64>> {
        Ok(self.infer(&data.clips, 64)?.0.mapv(sigmoid).to_vec())
    }

    /// Objective on one batch. When `grad` is given, parameter gradients are
    /// accumulated into it. `rng` drives dropout (only if `training`) and the
    /// negative-pair draws.
    pub fn loss_and_grad(
        &self,
        clips: &[&Clip],
        loss: LossConfig,
        rng: &mut dyn RngCore,
        training: bool,
        grad: Option<&mut EmoForensicsParams>,
    ) -> Result<LossParts> {
        let sp = &self.spec;
        let enc = self.encode(clips, if training { Some(&mut *rng) } else { None })?;
        let b = clips.len();
        let alpha = if sp.supports_pairs() { loss.alpha } else { 0.0 };

        let targets: Vec<f64> = clips.iter().map(|c| sp.target(&c.sample)).collect();
        let bce = enc
            .logits
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| bce_loss(z, y))
            .sum::<f64>()
            / b as f64;

        let d = sp.model_dim();
        let mut d_hv = Array2::<f64>::zeros((b, d));
        let mut d_ha = Array2::<f64>::zeros((b, d));
        let mut contrast = 0.0;
        let mut num_pairs = 0;
        if alpha > 0.0 {
            let (hv, ha) = (enc.h_v.as_ref().unwrap(), enc.h_a.as_ref().unwrap());
            let is_fake: Vec<bool> = clips.iter().map(|c| c.sample.is_fake()).collect();
            let pairs = pair_indices(&is_fake, rng);
            num_pairs = pairs.len();
            if num_pairs > 0 {
                let scale = alpha / num_pairs as f64;
                for &(i, j, y) in &pairs {
                    let (u, nu) = unit(hv.row(i))?;
                    let (w, nw) = unit(ha.row(j))?;
                    let diff = &u - &w;
                    let dist = diff.dot(&diff).sqrt();
                    contrast += margin_term(dist, y, loss.margin);
                    let coef = if y == 1 {
                        2.0
                    } else if dist < loss.margin && dist > 0.0 {
                        -2.0 * (loss.margin - dist) / dist
                    } else {
                        0.0
                    };
                    if coef == 0.0 {
                        continue;
                    }
                    let g = &diff * (coef * scale);
                    let gu = &g - &(&u * u.dot(&g));
                    let mut row = d_hv.row_mut(i);
                    row.scaled_add(1.0 / nu, &gu);
                    let gw = &(&w * w.dot(&g)) - &g;
                    let mut row = d_ha.row_mut(j);
                    row.scaled_add(1.0 / nw, &gw);
                }
                contrast /= num_pairs as f64;
            }
        }
        let total = combined_loss(bce, contrast, alpha);
        if !total.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss (bce {bce}, contrast {contrast})"
            )));
        }
        let parts = LossParts {
            total,
            bce,
            contrast,
            num_pairs,
        };
        let Some(grad) = grad else {
            return Ok(parts);
        };

        let p = &self.params;
        let w_bce = (1.0 - alpha) / b as f64;
        let d_logits = Array2::from_shape_fn((b, 1), |(i, _)| {
            w_bce * (sigmoid(enc.logits[i]) - targets[i])
        });
        let d_joint = p
            .head
            .backward(enc.joint.view(), d_logits.view(), &mut grad.head, true)
            .expect("input grad requested");
        match (&enc.h_v, &enc.h_a) {
            (Some(hv), Some(ha)) => match sp.fusion {
                FusionStrategy::Add => {
                    d_hv += &d_joint;
                    d_ha += &d_joint;
                }
                FusionStrategy::Product => {
                    d_hv += &(&d_joint * ha);
                    d_ha += &(&d_joint * hv);
                }
                FusionStrategy::Concat => {
                    d_hv += &d_joint.slice(s![.., ..d]);
                    d_ha += &d_joint.slice(s![.., d..]);
                }
            },
            (Some(_), None) => d_hv += &d_joint,
            (None, Some(_)) => d_ha += &d_joint,
            (None, None) => unreachable!(),
        }

        if let (Some(encp), Some(cache)) = (&p.video_encoder, &enc.video_cache) {
            encp.backward_batch(
                &sp.transformer,
                cache,
                d_hv.view(),
                grad.video_encoder.as_mut().expect("grad tree matches params"),
            );
        }
        if let Some(proj) = &p.audio_projection {
            let x = enc.audio_in.as_ref().expect("audio input cached");
            let gproj = grad.audio_projection.as_mut().expect("grad tree matches params");
            match (&p.audio_encoder, &enc.audio_cache) {
                (Some(encp), Some(cache)) => {
                    let d_tokens = encp.backward_batch(
                        &sp.transformer,
                        cache,
                        d_ha.view(),
                        grad.audio_encoder.as_mut().expect("grad tree matches params"),
                    );
                    proj.backward(x.view(), d_tokens.view(), gproj, false);
                }
                _ => {
                    proj.backward(x.view(), d_ha.view(), gproj, false);
                }
            }
        }
        Ok(parts)
    }

    /// Mean objective over `data` in evaluation mode. Pair draws use a fresh
    /// RNG seeded with `pair_seed`, so repeated evaluations agree.
    pub fn evaluate_loss(
        &self,
        data: &[Clip],
        loss: LossConfig,
        batch_size: usize,
        pair_seed: u64,
    ) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
        let mut sum = 0.0;
        for part in data.chunks(batch_size.max(1)) {
            let refs: Vec<&Clip> = part.iter().collect();
            let parts = self.loss_and_grad(&refs, loss, &mut rng, false, None)?;
            sum += parts.total * part.len() as f64;
        }
        Ok(sum / data.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Input dimensions of a dataset, falling back to the standard widths for
/// streams that were not loaded.
pub fn dataset_dims(data: &Dataset) -> (usize, usize) {
    let first = &data.clips[0];
    let v = if first.video.ncols() > 0 {
        first.video.ncols()
    } else {
        crate::embedding::VIDEO_DIM
    };
    let a = if first.audio.ncols() > 0 {
        first.audio.ncols()
    } else {
        crate::embedding::AUDIO_DIM
    };
    (v, a)
}

/// Mini-batch AdamW on the combined objective with reduce-on-plateau and early
/// stopping on validation loss. Returns the lowest-validation-loss model.
pub fn train_emoforensics(
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(EmoForensics, TrainHistory)> {
    train_emoforensics_with(train, val, cfg, |_| {})
}

/// As [`train_emoforensics`], calling `on_epoch` after every epoch.
pub fn train_emoforensics_with(
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(EmoForensics, TrainHistory)> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::Training("validation set is empty".into()));
    }
    if train.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    let (vd, ad) = dataset_dims(train);
    let spec = cfg.spec(vd, ad);
    let fakes = train
        .clips
        .iter()
        .filter(|c| spec.target(&c.sample) == 1.0)
        .count();
    if fakes == 0 || fakes == train.len() {
        return Err(Error::Training(
            "training set needs at least one real and one fake sample".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = EmoForensics::init(spec, &mut rng)?;
    let loss = cfg.loss();
    let val_pair_seed = derive_seed(cfg.seed, "val-pairs");
    let mut opt = AdamW::new(
        AdamWConfig {
            eps: cfg.optimizer_epsilon,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        model.params.num_params(),
    );
    let mut sched = ReduceOnPlateau::new(cfg.learning_rate, cfg.scheduler_factor, cfg.scheduler_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best = model.params.clone();
    let mut history = TrainHistory::default();
    let mut grad = model.zero_grad();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut lr = cfg.learning_rate;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Clip> = idx.iter().map(|&i| &train.clips[i]).collect();
            grad.fill(0.0);
            let parts = model.loss_and_grad(&batch, loss, &mut rng, true, Some(&mut grad))?;
            if !grad.all_finite() {
                return Err(Error::Training(format!("non-finite gradient in epoch {epoch}")));
            }
            opt.step(&mut model.params, &grad, lr);
            sum += parts.total * batch.len() as f64;
        }
        let train_loss = sum / train.len() as f64;
        let val_loss = model.evaluate_loss(&val.clips, loss, cfg.batch_size, val_pair_seed)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        on_epoch(&record);
        history.epochs.push(record);
        if stopper.step(val_loss) {
            best.clone_from(&model.params);
            history.best_epoch = epoch;
        }
        lr = sched.step(val_loss);
        if stopper.should_stop() {
            history.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    model.params = best;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Clip;
    use crate::nn::ops::normal_init;
    use ndarray::array;
    use std::collections::BTreeSet;
    use std::path::PathBuf;

    fn repr(v: Array1<f64>) -> ModalityRepr {
        ModalityRepr { vector: v }
    }

    fn sample(id: &str, vf: bool, af: bool) -> Sample {
        let fake = vf || af;
        Sample {
            id: id.into(),
            label: fake as u8,
            video_fake: vf,
            audio_fake: af,
            manipulation_tags: if fake {
                BTreeSet::from(["A".to_string()])
            } else {
                BTreeSet::new()
            },
            group_key: id.into(),
            video_path: PathBuf::from(format!("{id}.video.emb")),
            audio_path: PathBuf::from(format!("{id}.audio.emb")),
        }
    }

    fn clip(id: &str, vf: bool, af: bool, t: usize, dv: usize, da: usize, seed: u64) -> Clip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Clip {
            sample: sample(id, vf, af),
            video: normal_init((t, dv), 1.0, &mut rng).mapv(|v| v as f32),
            audio: normal_init((t, da), 1.0, &mut rng).mapv(|v| v as f32),
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            depth: 1,
            num_heads: 2,
            ffn_multiplier: 2,
            max_seq_len: 8,
            batch_size: 4,
            max_epochs: 2,
            ..TrainConfig::default()
        }
    }

    fn small_data(n: usize, seed: u64) -> Dataset {
        Dataset {
            clips: (0..n)
                .map(|i| {
                    let fake = i % 2 == 1;
                    clip(&format!("c{i}"), fake, fake && i % 4 == 1, 4, 8, 12, seed + i as u64)
                })
                .collect(),
        }
    }

    #[test]
    fn fusion_identities() {
        let hv = repr(array![1.0, -2.0, 3.0]);
        let add = fuse_modalities(&hv, &repr(Array1::zeros(3)), FusionStrategy::Add).unwrap();
        assert_eq!(add.vector, hv.vector);
        let prod = fuse_modalities(&hv, &repr(Array1::ones(3)), FusionStrategy::Product).unwrap();
        assert_eq!(prod.vector, hv.vector);
        let ha = repr(array![4.0, 5.0, 6.0]);
        let cat = fuse_modalities(&hv, &ha, FusionStrategy::Concat).unwrap();
        assert_eq!(cat.vector.len(), 6);
        assert_eq!(cat.vector.slice(s![..3]), hv.vector);
        for st in [FusionStrategy::Add, FusionStrategy::Product] {
            assert_eq!(
                fuse_modalities(&hv, &ha, st).unwrap().vector,
                fuse_modalities(&ha, &hv, st).unwrap().vector
            );
        }
        assert_ne!(
            fuse_modalities(&ha, &hv, FusionStrategy::Concat).unwrap().vector,
            cat.vector
        );
        assert!(fuse_modalities(&hv, &repr(Array1::zeros(2)), FusionStrategy::Add).is_err());
    }

    #[test]
    fn fusion_of_full_width_vectors() {
        let hv = repr(Array1::linspace(-1.0, 1.0, 512));
        let ha = repr(Array1::linspace(2.0, 3.0, 512));
        let cat = fuse_modalities(&hv, &ha, FusionStrategy::Concat).unwrap();
        assert_eq!(cat.vector.len(), 1024);
        assert_eq!(cat.vector.slice(s![..512]), hv.vector);
    }

    #[test]
    fn classify_examples() {
        let f = JointEmotionRepr {
            vector: array![0.3, -1.0, 2.0],
            fusion_strategy: FusionStrategy::Add,
        };
        let p = classify(&f, &Affine::zeros(3, 1)).unwrap();
        assert_eq!(p.probability, 0.5);
        let mut head = Affine::zeros(3, 1);
        head.bias[0] = 10.0;
        assert!(classify(&f, &head).unwrap().probability > 0.9999);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = Affine::glorot(3, 1, &mut rng);
        let p = classify(&f, &head).unwrap();
        let z = 0.3 * head.weight[[0, 0]] - head.weight[[1, 0]] + 2.0 * head.weight[[2, 0]];
        assert!((p.logit - z).abs() < 1e-12);
        assert!((p.probability - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
        assert!(classify(&f, &Affine::zeros(4, 1)).is_err());
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(0.0, 1.0) - 0.693147).abs() < 1e-6);
        // probability 0.25 <=> logit ln(1/3)
        assert!((bce_loss((1.0f64 / 3.0).ln(), 1.0) - 1.386294).abs() < 1e-6);
        assert!(bce_loss(30.0, 1.0) < 1e-10);
        assert!(bce_loss(-30.0, 0.0) < 1e-10);
        assert!(bce_loss(1e6, 0.0).is_finite());
    }

    #[test]
    fn distance_examples() {
        let e0 = array![1.0, 0.0, 0.0];
        let e1 = array![0.0, 2.0, 0.0];
        assert_eq!(contrastive_distance(e0.view(), e0.view()).unwrap(), 0.0);
        assert!((contrastive_distance(e0.view(), e1.view()).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!((contrastive_distance(e0.view(), (-&e0).view()).unwrap() - 2.0).abs() < 1e-12);
        assert!(contrastive_distance(e0.view(), Array1::zeros(3).view()).is_err());
    }

    #[test]
    fn contrastive_examples() {
        let e0 = repr(array![1.0, 0.0]);
        let e1 = repr(array![0.0, 1.0]);
        let pair = |l: &ModalityRepr, r: &ModalityRepr, y| ContrastivePair {
            left: l.clone(),
            right: r.clone(),
            pair_label: y,
        };
        assert_eq!(contrastive_loss(&pair(&e0, &e0, 1), 1.0).unwrap(), 0.0);
        assert!((contrastive_loss(&pair(&e0, &e0, 0), 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((contrastive_loss(&pair(&e0, &e1, 1), 1.0).unwrap() - 2.0).abs() < 1e-12);
        // negatives farther than the margin cost nothing
        assert_eq!(contrastive_loss(&pair(&e0, &e1, 0), 1.0).unwrap(), 0.0);
        let zero = repr(array![0.0, 0.0]);
        assert!(contrastive_loss(&pair(&e0, &zero, 1), 1.0).is_err());
    }

    #[test]
    fn pair_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s_real = sample("r", false, false);
        let s_fake = sample("f", true, false);
        let h = || repr(array![1.0, 2.0]);
        let batch = |n_real: usize, n_fake: usize| {
            let mut b = Vec::new();
            for _ in 0..n_real {
                b.push((&s_real, h(), h()));
            }
            for _ in 0..n_fake {
                b.push((&s_fake, h(), h()));
            }
            b
        };
        let p = build_contrastive_pairs(&batch(3, 0), &mut rng);
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|p| p.pair_label == 1));
        let p = build_contrastive_pairs(&batch(2, 2), &mut rng);
        assert_eq!(p.len(), 6);
        assert_eq!(p.iter().filter(|p| p.pair_label == 0).count(), 4);
        assert!(build_contrastive_pairs(&batch(0, 3), &mut rng).is_empty());
    }

    #[test]
    fn negative_pairs_never_join_two_fakes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let is_fake = [true, false, true, true, false, false, true];
        for _ in 0..50 {
            for (v, a, y) in pair_indices(&is_fake, &mut rng) {
                if y == 1 {
                    assert_eq!(v, a);
                    assert!(!is_fake[v]);
                } else {
                    assert!(is_fake[v] != is_fake[a]);
                }
            }
        }
    }

    #[test]
    fn combined_examples() {
        assert_eq!(combined_loss(0.3, 5.0, 0.0), 0.3);
        assert_eq!(combined_loss(0.3, 5.0, 1.0), 5.0);
        assert!((combined_loss(0.693147, 2.0, 0.5) - 1.3465735).abs() < 1e-6);
    }

    #[test]
    fn train_config_round_trips_and_rejects_unknown_keys() {
        let cfg = TrainConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), cfg);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 1}"#).is_err());
        let partial: TrainConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.learning_rate, 1e-3);
        let mut bad = cfg.clone();
        bad.alpha = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.batch_size = 1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = small_cfg();
        let model = EmoForensics::new(cfg.spec(8, 12), 5).unwrap();
        let c = clip("x", false, false, 4, 8, 12, 1);
        let a = model.forward(&c, None).unwrap();
        let b = model.forward(&c, None).unwrap();
        assert_eq!(a, b);
        assert!((a.probability - sigmoid(a.logit)).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_ne!(model.forward(&c, Some(&mut rng)).unwrap(), a);
    }

    #[test]
    fn transformer_free_video_side_is_the_frame_mean() {
        let mut cfg = small_cfg();
        cfg.disable_temporal_transformers = true;
        cfg.modality = ModalityMode::VideoOnly;
        let model = EmoForensics::new(cfg.spec(8, 12), 5).unwrap();
        let mut c = clip("x", false, false, 4, 8, 12, 1);
        let frame = array![0.5f32, -1.0, 2.0, 0.0, 3.0, 1.5, -0.25, 4.0];
        for mut row in c.video.outer_iter_mut() {
            row.assign(&frame);
        }
        let p = model.forward(&c, None).unwrap();
        assert_eq!(p.joint_repr.vector, frame.mapv(f64::from));
    }

    #[test]
    fn video_only_ignores_the_audio_stream() {
        let mut cfg = small_cfg();
        cfg.modality = ModalityMode::VideoOnly;
        let model = EmoForensics::new(cfg.spec(8, 12), 5).unwrap();
        assert!(model.params.audio_projection.is_none());
        let c = clip("x", true, false, 4, 8, 12, 1);
        let mut corrupted = c.clone();
        corrupted.audio.fill(f32::NAN);
        assert_eq!(
            model.forward(&c, None).unwrap(),
            model.forward(&corrupted, None).unwrap()
        );
        corrupted.audio = Array2::zeros((0, 0));
        assert_eq!(
            model.forward(&c, None).unwrap(),
            model.forward(&corrupted, None).unwrap()
        );
    }

    #[test]
    fn unimodal_targets_use_modality_flags() {
        let mut cfg = small_cfg();
        let s = sample("x", false, true);
        cfg.modality = ModalityMode::VideoOnly;
        assert_eq!(cfg.spec(8, 12).target(&s), 0.0);
        cfg.modality = ModalityMode::AudioOnly;
        assert_eq!(cfg.spec(8, 12).target(&s), 1.0);
        cfg.modality = ModalityMode::Both;
        assert_eq!(cfg.spec(8, 12).target(&s), 1.0);
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        for fusion in [FusionStrategy::Add, FusionStrategy::Concat, FusionStrategy::Product] {
            let mut cfg = small_cfg();
            cfg.fusion_strategy = fusion;
            let model = EmoForensics::new(cfg.spec(8, 12), 2).unwrap();
            let ck = Checkpoint::from_bytes(&model.to_checkpoint().unwrap().to_bytes().unwrap())
                .unwrap();
            let back = EmoForensics::from_checkpoint(&ck).unwrap();
            assert_eq!(back, model);
            assert_eq!(back.checksum(), model.checksum());
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut cfg = small_cfg();
        cfg.learning_rate = 0.0;
        let data = small_data(10, 0);
        let initial = EmoForensics::init(cfg.spec(8, 12), &mut ChaCha8Rng::seed_from_u64(cfg.seed))
            .unwrap();
        let (trained, hist) = train_emoforensics(&data, &data, &cfg).unwrap();
        assert_eq!(hist.epochs.len(), 2);
        assert_eq!(trained.checksum(), initial.checksum());
    }

    #[test]
    fn same_seed_same_checksum() {
        let cfg = small_cfg();
        let data = small_data(10, 0);
        let (a, ha) = train_emoforensics(&data, &data, &cfg).unwrap();
        let (b, hb) = train_emoforensics(&data, &data, &cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(ha, hb);
        let mut other = cfg.clone();
        other.seed = 1;
        let (c, _) = train_emoforensics(&data, &data, &other).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn training_requires_both_classes() {
        let cfg = small_cfg();
        let data = Dataset {
            clips: (0..4)
                .map(|i| clip(&format!("r{i}"), false, false, 4, 8, 12, i))
                .collect(),
        };
        assert!(matches!(
            train_emoforensics(&data, &data, &cfg),
            Err(Error::Training(_))
        ));
        assert!(train_emoforensics(&small_data(4, 0), &Dataset::default(), &cfg).is_err());
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let mut cfg = small_cfg();
        cfg.max_epochs = 6;
        cfg.early_stop_patience = 1;
        cfg.learning_rate = 0.0;
        let data = small_data(8, 1);
        let (_, hist) = train_emoforensics(&data, &data, &cfg).unwrap();
        // constant validation loss: epoch 1 is best, epoch 2 triggers the stop
        assert_eq!(hist.best_epoch, 1);
        assert_eq!(hist.epochs.len(), 2);
        assert!(hist.stopped_early);
    }

    fn grad_check_model(cfg: &TrainConfig, data: &Dataset) -> crate::nn::GradCheckReport {
        use crate::nn::gradcheck::{gradient_check, ParamTarget};
        let model = EmoForensics::new(cfg.spec(8, 12), 11).unwrap();
        let spec = model.spec.clone();
        let loss = cfg.loss();
        let clips = data.clips.clone();
        let mut target = ParamTarget::new(model.params.clone(), move |p: &EmoForensicsParams| {
            let m = EmoForensics {
                spec: spec.clone(),
                params: p.clone(),
            };
            let refs: Vec<&Clip> = clips.iter().collect();
            let mut g = m.zero_grad();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let parts = m
                .loss_and_grad(&refs, loss, &mut rng, true, Some(&mut g))
                .unwrap();
            (parts.total, g)
        });
        gradient_check(&mut target, 1e-5, 300, 4)
    }

    #[test]
    fn gradients_match_finite_differences_for_every_variant() {
        let data = small_data(5, 7);
        for fusion in [FusionStrategy::Add, FusionStrategy::Concat, FusionStrategy::Product] {
            for modality in [ModalityMode::Both, ModalityMode::VideoOnly, ModalityMode::AudioOnly] {
                for no_tf in [false, true] {
                    let cfg = TrainConfig {
                        fusion_strategy: fusion,
                        modality,
                        disable_temporal_transformers: no_tf,
                        ..small_cfg()
                    };
                    let r = grad_check_model(&cfg, &data);
                    assert!(r.max_rel_error <= 1e-4, "{fusion:?} {modality:?} no_tf={no_tf}: {r:?}");
                }
            }
        }
    }
}
