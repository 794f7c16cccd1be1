//! Frozen late fusion: the detector's joint emotion representation is
//! projected to the width of an external detector's feature vector, fused with
//! it, and classified. Only the projection and the head are trained.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::Checkpoint;
use crate::embedding::{read_embedding_file, write_embedding_file, EmbeddingSequence, Modality};
use crate::error::{Error, Result};
use crate::fsutil::{derive_seed, sha256_hex, write_atomic};
use crate::manifest::{resolve, Dataset, Sample};
use crate::model::{bce_loss, EmoForensics, EpochRecord, TrainHistory};
use crate::nn::ops::{gelu, gelu_grad, sigmoid};
use crate::nn::params::join;
use crate::nn::{Affine, Parameters};
use crate::optim::{AdamW, AdamWConfig, EarlyStopping, ReduceOnPlateau};

/// A frozen feature extractor: sample -> fixed-length vector.
pub trait Detector {
    fn detector_id(&self) -> &str;
    fn feature_dim(&self) -> usize;
    fn features(&self, sample: &Sample) -> Result<Array1<f64>>;
    /// Hash of everything that determines the features.
    fn fingerprint(&self) -> String;
}

/// Stacked detector features for `samples`, one row each.
pub fn detector_matrix(det: &dyn Detector, samples: &[&Sample]) -> Result<Array2<f64>> {
    let d = det.feature_dim();
    let mut out = Array2::zeros((samples.len(), d));
    for (mut row, s) in out.outer_iter_mut().zip(samples) {
        let f = det.features(s)?;
        if f.len() != d {
            return Err(Error::Shape(format!(
                "detector {} returned {} features for {}, expected {d}",
                det.detector_id(),
                f.len(),
                s.id
            )));
        }
        if let Some(i) = f.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("detector features of {}", s.id), i));
        }
        row.assign(&f);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockDetectorConfig {
    pub feature_dim: usize,
    pub signal_strength: f64,
    pub blind_tags: BTreeSet<String>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for MockDetectorConfig {
    fn default() -> Self {
        Self {
            feature_dim: 256,
            signal_strength: 0.9,
            blind_tags: BTreeSet::new(),
            noise_std: 0.3,
            seed: 0,
        }
    }
}

impl MockDetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(Error::Config("signal_strength must lie in [0, 1]".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Stand-in for a low-level detector. Features are
/// `offset + noise(seed, id) + rho * label * direction`, where the last term is
/// dropped for samples carrying a blind tag.
#[derive(Clone, Debug)]
pub struct MockDetector {
    cfg: MockDetectorConfig,
    id: String,
    offset: Array1<f64>,
    direction: Array1<f64>,
}

impl MockDetector {
    pub fn new(cfg: MockDetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "mock-detector/offset"));
        let offset = Array1::from_shape_simple_fn(d, || {
            1.0 + 0.25 * rng.sample::<f64, _>(StandardNormal)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "mock-detector/direction"));
        let raw = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal));
        let direction = &raw / raw.dot(&raw).sqrt();
        Ok(Self {
            id: format!("mock-{}", cfg.seed),
            cfg,
            offset,
            direction,
        })
    }

    pub fn config(&self) -> &MockDetectorConfig {
        &self.cfg
    }

    /// The label-dependent term for `sample` (zero for reals and blind tags).
    pub fn label_component(&self, sample: &Sample) -> Array1<f64> {
        if sample.is_fake() && !sample.has_any_tag(&self.cfg.blind_tags) {
            &self.direction * self.cfg.signal_strength
        } else {
            Array1::zeros(self.cfg.feature_dim)
        }
    }
}

impl Detector for MockDetector {
    fn detector_id(&self) -> &str {
        &self.id
    }

    fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    fn features(&self, sample: &Sample) -> Result<Array1<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.cfg.seed,
            &format!("mock-detector/sample/{}", sample.id),
        ));
        let sigma = self.cfg.noise_std;
        let mut f = self.offset.clone();
        f.iter_mut()
            .for_each(|v| *v += sigma * rng.sample::<f64, _>(StandardNormal));
        f += &self.label_component(sample);
        Ok(f)
    }

    fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(&self.cfg).expect("config serializes");
        sha256_hex(&json)
    }
}

/// Detector backed by exported feature files: a JSON index
/// `{sample_id: path}` pointing at one-row embedding files.
#[derive(Clone, Debug)]
pub struct SidecarDetector {
    id: String,
    dim: usize,
    features: BTreeMap<String, Array1<f64>>,
    fingerprint: String,
}

impl SidecarDetector {
    pub fn load(index_path: &Path) -> Result<Self> {
        let bytes = crate::fsutil::read_bytes(index_path)?;
        let index: BTreeMap<String, PathBuf> = serde_json::from_slice(&bytes)?;
        let base = index_path.parent().unwrap_or(Path::new("."));
        let mut features = BTreeMap::new();
        let mut dim = None;
        let mut hash_input = bytes.clone();
        for (id, rel) in &index {
            let path = resolve(base, rel);
            let seq = read_embedding_file(&path)?;
            if seq.num_frames() != 1 {
                return Err(Error::Shape(format!(
                    "{}: detector features must have exactly one row",
                    path.display()
                )));
            }
            if *dim.get_or_insert(seq.dim()) != seq.dim() {
                return Err(Error::Shape(format!(
                    "{}: feature width {} differs from {}",
                    path.display(),
                    seq.dim(),
                    dim.unwrap()
                )));
            }
            hash_input.extend_from_slice(&seq.to_bytes()?);
            features.insert(
                id.clone(),
                seq.data().iter().map(|&v| f64::from(v)).collect::<Array1<f64>>(),
            );
        }
        let dim = dim.ok_or_else(|| Error::Manifest("detector index is empty".into()))?;
        Ok(Self {
            id: index_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "sidecar".into()),
            dim,
            features,
            fingerprint: sha256_hex(&hash_input),
        })
    }

    /// Writes one feature file per sample under `dir/features/` and the index
    /// at `index_path`.
    pub fn write(index_path: &Path, features: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        let base = index_path.parent().unwrap_or(Path::new("."));
        let mut index = BTreeMap::new();
        for (id, f) in features {
            let rel = PathBuf::from(format!("features/{id}.det.emb"));
            let seq = EmbeddingSequence::new(Modality::Video, id.clone(), 1, f.len(), f.clone())?;
            write_embedding_file(&seq, &base.join(&rel))?;
            index.insert(id.clone(), rel);
        }
        write_atomic(index_path, serde_json::to_string_pretty(&index)?.as_bytes())
    }
}

impl Detector for SidecarDetector {
    fn detector_id(&self) -> &str {
        &self.id
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn features(&self, sample: &Sample) -> Result<Array1<f64>> {
        self.features
            .get(&sample.id)
            .cloned()
            .ok_or_else(|| Error::Manifest(format!("no detector features for {}", sample.id)))
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LateFusion {
    #[default]
    Product,
    Add,
    Concat,
}

impl LateFusion {
    pub fn output_dim(self, d: usize) -> usize {
        match self {
            LateFusion::Concat => 2 * d,
            _ => d,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LateFusion::Product => "product",
            LateFusion::Add => "add",
            LateFusion::Concat => "concat",
        }
    }
}

/// Row-wise late fusion of projected emotion features with detector features.
pub fn fuse_late(
    projected: ArrayView2<'_, f64>,
    detector: ArrayView2<'_, f64>,
    strategy: LateFusion,
) -> Result<Array2<f64>> {
    if projected.dim() != detector.dim() {
        return Err(Error::Shape(format!(
            "late fusion of {:?} and {:?}",
            projected.dim(),
            detector.dim()
        )));
    }
    Ok(match strategy {
        LateFusion::Product => &projected * &detector,
        LateFusion::Add => &projected + &detector,
        LateFusion::Concat => concatenate![Axis(1), projected, detector],
    })
}

/// Affine layers with GELU between consecutive layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub layers: Vec<Affine>,
}

impl Parameters for ProjectionHead {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [f64])) {
        self.layers.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.layers.visit_mut(prefix, f);
    }
}

struct ProjectionCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl ProjectionHead {
    /// `depth` affine layers, every one `width` wide on the output side.
    pub fn init(input: usize, width: usize, depth: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..depth.max(1))
            .map(|i| Affine::glorot(if i == 0 { input } else { width }, width, rng))
            .collect();
        Self { layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output_dim()).unwrap_or(0)
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ProjectionCache)> {
        if x.ncols() != self.layers[0].input_dim() {
            return Err(Error::Shape(format!(
                "projection expects width {}, got {}",
                self.layers[0].input_dim(),
                x.ncols()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(h.view());
            inputs.push(h);
            h = if i + 1 < self.layers.len() {
                z.mapv(gelu)
            } else {
                z.clone()
            };
            pre.push(z);
        }
        Ok((h, ProjectionCache { inputs, pre }))
    }

    fn backward(&self, cache: &ProjectionCache, dy: Array2<f64>, grad: &mut ProjectionHead) {
        let mut d = dy;
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                d.zip_mut_with(&cache.pre[i], |g, &z| *g *= gelu_grad(z));
            }
            let need = i > 0;
            if let Some(dx) =
                self.layers[i].backward(cache.inputs[i].view(), d.view(), &mut grad.layers[i], need)
            {
                d = dx;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmoBoostParams {
    pub projection: ProjectionHead,
    pub head: Affine,
}

impl Parameters for EmoBoostParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [f64])) {
        self.projection.visit(&join(prefix, "projection"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.projection.visit_mut(&join(prefix, "projection"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmoBoostSpec {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub fusion: LateFusion,
    pub projection_depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmoBoostConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer_epsilon: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub scheduler_patience: usize,
    pub scheduler_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub fusion: LateFusion,
    pub projection_depth: usize,
}

impl Default for EmoBoostConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.05,
            optimizer_epsilon: 1e-8,
            max_epochs: 20,
            early_stop_patience: 8,
            scheduler_patience: 4,
            scheduler_factor: 0.5,
            batch_size: 32,
            seed: 0,
            fusion: LateFusion::Product,
            projection_depth: 2,
        }
    }
}

impl EmoBoostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.projection_depth == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and projection_depth must be >= 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate and weight_decay must be >= 0".into()));
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor <= 1.0) {
            return Err(Error::Config("scheduler_factor must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// The trainable part of the fused model.
#[derive(Clone, Debug, PartialEq)]
pub struct EmoBoost {
    pub spec: EmoBoostSpec,
    pub params: EmoBoostParams,
}

/// Frozen inputs for the fusion heads, aligned by row.
#[derive(Clone, Debug)]
pub struct FusionInputs {
    pub joint: Array2<f64>,
    pub detector: Array2<f64>,
    pub labels: Vec<f64>,
}

impl FusionInputs {
    /// Evaluation-mode joint representations and detector features.
    pub fn compute(data: &Dataset, emo: &EmoForensics, det: &dyn Detector) -> Result<Self> {
        let (_, joint) = emo.infer(&data.clips, 64)?;
        let samples: Vec<&Sample> = data.clips.iter().map(|c| &c.sample).collect();
        let detector = detector_matrix(det, &samples)?;
        let labels = samples.iter().map(|s| f64::from(s.label)).collect();
        Ok(Self {
            joint,
            detector,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn rows(&self, idx: &[usize]) -> Self {
        Self {
            joint: self.joint.select(Axis(0), idx),
            detector: self.detector.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

impl EmoBoost {
    pub fn init(spec: EmoBoostSpec, rng: &mut impl Rng) -> Self {
        let projection =
            ProjectionHead::init(spec.input_dim, spec.feature_dim, spec.projection_depth, rng);
        let head = Affine::glorot(spec.fusion.output_dim(spec.feature_dim), 1, rng);
        Self {
            spec,
            params: EmoBoostParams { projection, head },
        }
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn to_checkpoint(&self, frozen: &FrozenHashes) -> Result<Checkpoint> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), Value::from("emoboost"));
        meta.insert("spec".to_string(), serde_json::to_value(&self.spec)?);
        meta.insert("frozen".to_string(), serde_json::to_value(frozen)?);
        Ok(Checkpoint::from_params(&self.params, meta))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, FrozenHashes)> {
        if ck.meta_str("kind")? != "emoboost" {
            return Err(Error::Checkpoint("not an emoboost checkpoint".into()));
        }
        let get = |k: &str| {
            ck.metadata
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {k}")))
        };
        let spec: EmoBoostSpec = serde_json::from_value(get("spec")?)?;
        let frozen: FrozenHashes = serde_json::from_value(get("frozen")?)?;
        let mut model = Self::init(spec, &mut ChaCha8Rng::seed_from_u64(0));
        ck.load_into(&mut model.params)?;
        Ok((model, frozen))
    }

    pub fn logits(&self, joint: ArrayView2<'_, f64>, detector: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let proj = self.params.projection.forward(joint)?;
        let fused = fuse_late(proj.view(), detector, self.spec.fusion)?;
        Ok(self.params.head.forward(fused.view()).column(0).to_owned())
    }

    pub fn scores(&self, inputs: &FusionInputs) -> Result<Vec<f64>> {
        Ok(self
            .logits(inputs.joint.view(), inputs.detector.view())?
            .mapv(sigmoid)
            .to_vec())
    }

    /// Mean BCE over `inputs`; accumulates gradients into `grad` when given.
    pub fn loss_and_grad(&self, inputs: &FusionInputs, grad: Option<&mut EmoBoostParams>) -> Result<f64> {
        let (proj, cache) = self.params.projection.forward_cached(inputs.joint.view())?;
        let fused = fuse_late(proj.view(), inputs.detector.view(), self.spec.fusion)?;
        let logits = self.params.head.forward(fused.view());
        let b = inputs.len() as f64;
        let loss = logits
            .column(0)
            .iter()
            .zip(&inputs.labels)
            .map(|(&z, &y)| bce_loss(z, y))
            .sum::<f64>()
            / b;
        if !loss.is_finite() {
            return Err(Error::Training("non-finite fusion loss".into()));
        }
        let Some(grad) = grad else {
            return Ok(loss);
        };
        let d_logits = Array2::from_shape_fn((inputs.len(), 1), |(i, _)| {
            (sigmoid(logits[[i, 0]]) - inputs.labels[i]) / b
        });
        let d_fused = self
            .params
            .head
            .backward(fused.view(), d_logits.view(), &mut grad.head, true)
            .expect("input grad requested");
        // detector features are constants: no gradient flows back into them
        let d_proj = match self.spec.fusion {
            LateFusion::Product => &d_fused * &inputs.detector,
            LateFusion::Add => d_fused,
            LateFusion::Concat => d_fused.slice(s![.., ..self.spec.feature_dim]).to_owned(),
        };
        self.params.projection.backward(&cache, d_proj, &mut grad.projection);
        Ok(loss)
    }
}

/// Checksums of the frozen components, taken before and after training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenHashes {
    pub emoforensics: String,
    pub detector: String,
}

impl FrozenHashes {
    pub fn of(emo: &EmoForensics, det: &dyn Detector) -> Self {
        Self {
            emoforensics: emo.checksum(),
            detector: det.fingerprint(),
        }
    }
}

/// Trains projection + head on frozen inputs with AdamW, reduce-on-plateau
/// and early stopping on validation BCE. Returns the best-validation heads.
pub fn train_fusion_heads(
    train: &FusionInputs,
    val: &FusionInputs,
    cfg: &EmoBoostConfig,
) -> Result<(EmoBoost, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Training("empty fusion training or validation set".into()));
    }
    let spec = EmoBoostSpec {
        input_dim: train.joint.ncols(),
        feature_dim: train.detector.ncols(),
        fusion: cfg.fusion,
        projection_depth: cfg.projection_depth,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = EmoBoost::init(spec, &mut rng);
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
    let mut grad = model.params.clone();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut lr = cfg.learning_rate;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = train.rows(idx);
            grad.fill(0.0);
            let loss = model.loss_and_grad(&batch, Some(&mut grad))?;
            opt.step(&mut model.params, &grad, lr);
            sum += loss * idx.len() as f64;
        }
        let val_loss = model.loss_and_grad(val, None)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: sum / train.len() as f64,
            val_loss,
            lr,
        });
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

/// Result of [`train_emoboost`].
#[derive(Clone, Debug)]
pub struct EmoBoostRun {
    pub model: EmoBoost,
    pub history: TrainHistory,
    pub frozen_before: FrozenHashes,
    pub frozen_after: FrozenHashes,
}

/// End-to-end fusion training with frozen detector and EmoForensics.
pub fn train_emoboost(
    train: &Dataset,
    val: &Dataset,
    emo: &EmoForensics,
    det: &dyn Detector,
    cfg: &EmoBoostConfig,
) -> Result<EmoBoostRun> {
    let frozen_before = FrozenHashes::of(emo, det);
    let train_in = FusionInputs::compute(train, emo, det)?;
    let val_in = FusionInputs::compute(val, emo, det)?;
    let (model, history) = train_fusion_heads(&train_in, &val_in, cfg)?;
    let frozen_after = FrozenHashes::of(emo, det);
    if frozen_before != frozen_after {
        return Err(Error::Training("frozen component changed during fusion training".into()));
    }
    Ok(EmoBoostRun {
        model,
        history,
        frozen_before,
        frozen_after,
    })
}

/// Logistic-regression probe on fixed features (full-batch AdamW, no decay).
pub fn train_linear_probe(features: &Array2<f64>, labels: &[f64], epochs: usize, seed: u64) -> Affine {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = Affine::glorot(features.ncols(), 1, &mut rng);
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        probe.num_params(),
    );
    let n = labels.len() as f64;
    let mut grad = probe.clone();
    for _ in 0..epochs {
        let z = probe.forward(features.view());
        let dz = Array2::from_shape_fn((labels.len(), 1), |(i, _)| (sigmoid(z[[i, 0]]) - labels[i]) / n);
        grad.fill(0.0);
        probe.backward(features.view(), dz.view(), &mut grad, false);
        opt.step(&mut probe, &grad, 1e-2);
    }
    probe
}
