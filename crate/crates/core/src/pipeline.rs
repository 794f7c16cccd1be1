//! Config-driven orchestration behind the command-line tool.
//!
//! Layout of the output directory:
//!
//! ```text
//! data/manifest.json, data/embeddings/...    synth
//! splits/<plan>.json                           splits
//! models/emoforensics/<plan>.emop (+ .history.json)
//! models/emoboost/<plan>.emop (+ .history.json)
//! reports/{eval,ablation,summary}.{json,txt}
//! provenance/<command>.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::checkpoint::Checkpoint;
use crate::emoboost::{
    detector_matrix, train_emoboost, train_linear_probe, Detector, EmoBoost, EmoBoostConfig,
    FrozenHashes, FusionInputs, LateFusion, MockDetector, MockDetectorConfig, SidecarDetector,
};
use crate::error::{Error, Result};
use crate::fsutil::{derive_seed, read_bytes, sha256_hex, write_atomic};
use crate::manifest::{resolve, Dataset, DatasetManifest, Sample, Streams};
use crate::metrics::ScoredSet;
use crate::model::{
    train_emoforensics, EmoForensics, FusionStrategy, ModalityMode, TrainConfig, TrainHistory,
};
use crate::report::{render_table, EvalReport, SplitMetrics};
use crate::splits::{make_in_domain_split, make_leave_one_out_splits, with_val_test, SplitPlan, TagGroup};
use crate::synth::{generate_synthetic, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Splits,
    TrainEmoforensics,
    TrainEmoboost,
    Eval,
    Ablate,
    Report,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Synth,
        Command::Splits,
        Command::TrainEmoforensics,
        Command::TrainEmoboost,
        Command::Eval,
        Command::Ablate,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Splits => "splits",
            Command::TrainEmoforensics => "train-emoforensics",
            Command::TrainEmoboost => "train-emoboost",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Report => "report",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command {s}")))
    }
}

fn default_ratios() -> [f64; 3] {
    [0.6, 0.1, 0.3]
}

fn default_val_test_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitsSection {
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    #[serde(default)]
    pub leave_one_out: Vec<TagGroup>,
    /// Share of each leave-one-out test class moved to `val_test`.
    #[serde(default = "default_val_test_fraction")]
    pub val_test_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DetectorSection {
    Mock(MockDetectorConfig),
    /// JSON index of per-sample feature files.
    Sidecar(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Emoforensics,
    Emoboost,
    DetectorProbe,
}

impl ModelKind {
    fn name(self) -> &'static str {
        match self {
            ModelKind::Emoforensics => "emoforensics",
            ModelKind::Emoboost => "emoboost",
            ModelKind::DetectorProbe => "detector_probe",
        }
    }
}

fn default_models() -> Vec<ModelKind> {
    vec![ModelKind::Emoforensics]
}

fn default_probe_epochs() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    #[serde(default = "default_probe_epochs")]
    pub probe_epochs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            models: default_models(),
            probe_epochs: default_probe_epochs(),
        }
    }
}

pub const ABLATION_VARIANTS: [&str; 8] = [
    "full",
    "no_contrastive",
    "no_transformers",
    "video_only",
    "audio_only",
    "fusion_add",
    "fusion_concat",
    "fusion_product",
];

fn default_plan() -> String {
    "in_domain".into()
}

fn default_variants() -> Vec<String> {
    ABLATION_VARIANTS.iter().map(|s| s.to_string()).collect()
}

fn default_late_fusions() -> Vec<LateFusion> {
    vec![LateFusion::Add, LateFusion::Concat, LateFusion::Product]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    #[serde(default = "default_plan")]
    pub plan: String,
    #[serde(default = "default_variants")]
    pub variants: Vec<String>,
    /// Late-fusion strategies trained on top of the `full` variant.
    #[serde(default = "default_late_fusions")]
    pub late_fusions: Vec<LateFusion>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            plan: default_plan(),
            variants: default_variants(),
            late_fusions: default_late_fusions(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalAucs {
    pub model: String,
    #[serde(default)]
    pub splits: Vec<String>,
    pub aucs: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Report files written by `eval` or `ablate`.
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
    #[serde(default)]
    pub external: Vec<ExternalAucs>,
}

fn default_plans() -> Vec<String> {
    vec![default_plan()]
}

/// One run configuration. Relative paths resolve against the config file's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Existing manifest to use instead of `synth` output.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    pub splits: SplitsSection,
    /// Plans trained and evaluated by the train and eval commands.
    #[serde(default = "default_plans")]
    pub plans: Vec<String>,
    pub train: TrainConfig,
    pub detector: DetectorSection,
    pub emoboost: EmoBoostConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default)]
    pub report: ReportSection,
}

/// Command-line overrides. A flag that disagrees with a value already set in
/// the config is an error.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Sections whose seed is derived from the global seed unless given.
const SEEDED_SECTIONS: [&[&str]; 5] = [
    &["synth"],
    &["splits"],
    &["train"],
    &["emoboost"],
    &["detector", "mock"],
];

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: RunConfig,
    /// Effective config after overrides and seed derivation.
    pub resolved: Value,
    pub seed: u64,
    pub out_dir: PathBuf,
    base_dir: PathBuf,
}

/// Artifacts written by one command, relative to the output directory.
#[derive(Clone, Debug, Default)]
pub struct RunOutcome {
    pub outputs: Vec<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl Pipeline {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let bytes = read_bytes(path).map_err(|_| config_err(format!("config not found: {}", path.display())))?;
        let value: Value = serde_json::from_slice(&bytes)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_value(value, base, overrides)
    }

    pub fn from_value(mut value: Value, base_dir: &Path, overrides: &Overrides) -> Result<Self> {
        let root = value
            .as_object_mut()
            .ok_or_else(|| config_err("config must be a JSON object"))?;

        let seed = match (root.get("seed").and_then(Value::as_u64), overrides.seed) {
            (Some(a), Some(b)) if a != b => {
                return Err(config_err(format!("--seed {b} conflicts with config seed {a}")))
            }
            (Some(a), _) => a,
            (None, Some(b)) => b,
            (None, None) if root.get("seed").is_some_and(|v| !v.is_null()) => {
                return Err(config_err("seed must be a non-negative integer"))
            }
            (None, None) => return Err(config_err("no seed: set \"seed\" in the config or pass --seed")),
        };
        root.insert("seed".into(), json!(seed));

        let out = match (root.get("out_dir").and_then(Value::as_str), &overrides.out) {
            (Some(a), Some(b)) if Path::new(a) != b.as_path() => {
                return Err(config_err(format!(
                    "--out {} conflicts with config out_dir {a}",
                    b.display()
                )))
            }
            (Some(a), _) => PathBuf::from(a),
            (None, Some(b)) => b.clone(),
            (None, None) => return Err(config_err("no output directory: set \"out_dir\" or pass --out")),
        };
        root.insert("out_dir".into(), json!(out));

        for key in ["splits", "train", "emoboost"] {
            root.entry(key).or_insert_with(|| Value::Object(Map::new()));
        }
        root.entry("detector")
            .or_insert_with(|| json!({ "mock": {} }));
        for path in SEEDED_SECTIONS {
            let mut node = Some(&mut *root);
            for (i, key) in path.iter().enumerate() {
                let Some(map) = node else { break };
                match map.get_mut(*key) {
                    Some(Value::Object(inner)) if i + 1 == path.len() => {
                        inner
                            .entry("seed")
                            .or_insert_with(|| json!(derive_seed(seed, &path.join("/"))));
                        node = None;
                    }
                    Some(Value::Object(inner)) => node = Some(inner),
                    _ => node = None,
                }
            }
        }

        let config: RunConfig =
            serde_json::from_value(value.clone()).map_err(|e| config_err(e.to_string()))?;
        config.train.validate()?;
        config.emoboost.validate()?;
        if let DetectorSection::Mock(m) = &config.detector {
            m.validate()?;
        }
        if let Some(s) = &config.synth {
            s.validate()?;
        }
        for v in &config.ablate.variants {
            if !ABLATION_VARIANTS.contains(&v.as_str()) {
                return Err(config_err(format!("unknown ablation variant {v}")));
            }
        }
        if config.plans.is_empty() {
            return Err(config_err("plans must not be empty"));
        }
        let out_dir = resolve(base_dir, &out);
        Ok(Self {
            config,
            resolved: value,
            seed,
            out_dir,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.resolved).expect("value serializes"))
    }

    fn manifest_path(&self) -> PathBuf {
        match &self.config.manifest {
            Some(p) => resolve(&self.base_dir, p),
            None => self.out_dir.join("data/manifest.json"),
        }
    }

    fn split_path(&self, plan: &str) -> PathBuf {
        self.out_dir.join(format!("splits/{plan}.json"))
    }

    fn model_path(&self, kind: &str, plan: &str) -> PathBuf {
        self.out_dir.join(format!("models/{kind}/{plan}.emop"))
    }

    fn history_path(&self, kind: &str, plan: &str) -> PathBuf {
        self.out_dir.join(format!("models/{kind}/{plan}.history.json"))
    }

    fn report_path(&self, name: &str, ext: &str) -> PathBuf {
        self.out_dir.join(format!("reports/{name}.{ext}"))
    }

    fn require(path: &Path, what: &str) -> Result<()> {
        if path.is_file() {
            Ok(())
        } else {
            Err(config_err(format!("{what} not found: {}", path.display())))
        }
    }

    /// Checks every input the command will read before any work starts.
    pub fn check_inputs(&self, cmd: Command) -> Result<Vec<PathBuf>> {
        let mut inputs = Vec::new();
        let mut need = |p: PathBuf, what: &str| -> Result<()> {
            Self::require(&p, what)?;
            inputs.push(p);
            Ok(())
        };
        match cmd {
            Command::Synth => {
                if self.config.synth.is_none() {
                    return Err(config_err("synth section missing"));
                }
            }
            Command::Splits => need(self.manifest_path(), "manifest")?,
            Command::TrainEmoforensics | Command::TrainEmoboost | Command::Eval => {
                need(self.manifest_path(), "manifest")?;
                for plan in &self.config.plans {
                    need(self.split_path(plan), "split plan")?;
                    let emo_needed = cmd == Command::TrainEmoboost
                        || (cmd == Command::Eval
                            && self.config.eval.models.iter().any(|m| *m != ModelKind::DetectorProbe));
                    if emo_needed {
                        need(self.model_path("emoforensics", plan), "checkpoint")?;
                    }
                    if cmd == Command::Eval && self.config.eval.models.contains(&ModelKind::Emoboost) {
                        need(self.model_path("emoboost", plan), "checkpoint")?;
                    }
                }
                let uses_detector = cmd == Command::TrainEmoboost
                    || (cmd == Command::Eval
                        && self.config.eval.models.iter().any(|m| *m != ModelKind::Emoforensics));
                if let (true, DetectorSection::Sidecar(p)) = (uses_detector, &self.config.detector) {
                    need(resolve(&self.base_dir, p), "detector index")?;
                }
            }
            Command::Ablate => {
                need(self.manifest_path(), "manifest")?;
                need(self.split_path(&self.config.ablate.plan), "split plan")?;
                if let (false, DetectorSection::Sidecar(p)) =
                    (self.config.ablate.late_fusions.is_empty(), &self.config.detector)
                {
                    need(resolve(&self.base_dir, p), "detector index")?;
                }
            }
            Command::Report => {
                if self.config.report.inputs.is_empty() && self.config.report.external.is_empty() {
                    return Err(config_err("report section lists no inputs"));
                }
                for p in &self.config.report.inputs {
                    need(resolve(&self.base_dir, p), "report input")?;
                }
            }
        }
        Ok(inputs)
    }

    pub fn run(&self, cmd: Command) -> Result<RunOutcome> {
        let inputs = self.check_inputs(cmd)?;
        let outputs = match cmd {
            Command::Synth => self.synth()?,
            Command::Splits => self.splits()?,
            Command::TrainEmoforensics => self.train_emoforensics()?,
            Command::TrainEmoboost => self.train_emoboost()?,
            Command::Eval => self.eval()?,
            Command::Ablate => self.ablate()?,
            Command::Report => self.report()?,
        };
        self.write_provenance(cmd, &inputs, &outputs)?;
        Ok(RunOutcome {
            outputs: outputs.iter().map(|p| self.relative(p)).collect(),
        })
    }

    fn relative(&self, p: &Path) -> PathBuf {
        p.strip_prefix(&self.out_dir).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
    }

    fn write_provenance(&self, cmd: Command, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        let hashes = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            paths
                .iter()
                .map(|p| Ok((self.relative(p).display().to_string(), sha256_hex(&read_bytes(p)?))))
                .collect()
        };
        let record = json!({
            "command": cmd.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "config_sha256": self.config_hash(),
            "config": self.resolved,
            "inputs": hashes(inputs)?,
            "outputs": hashes(outputs)?,
        });
        write_atomic(
            &self.out_dir.join(format!("provenance/{}.json", cmd.name())),
            (serde_json::to_string_pretty(&record)? + "\n").as_bytes(),
        )
    }

    fn synth(&self) -> Result<Vec<PathBuf>> {
        let cfg = self.config.synth.as_ref().expect("checked");
        let dir = self.out_dir.join("data");
        let ds = generate_synthetic(cfg)?;
        ds.write(&dir)?;
        let mut out = vec![dir.join("manifest.json")];
        for s in &ds.manifest.samples {
            out.push(dir.join(&s.video_path));
            out.push(dir.join(&s.audio_path));
        }
        Ok(out)
    }

    fn read_manifest(&self) -> Result<DatasetManifest> {
        DatasetManifest::read(&self.manifest_path())
    }

    fn load_dataset(&self, manifest: &DatasetManifest) -> Result<Dataset> {
        let path = self.manifest_path();
        Dataset::load(manifest, path.parent().unwrap_or(Path::new(".")), Streams::Both)
    }

    fn splits(&self) -> Result<Vec<PathBuf>> {
        let manifest = self.read_manifest()?;
        let sc = &self.config.splits;
        let base = make_in_domain_split(&manifest, sc.ratios, sc.seed)?;
        let mut plans = vec![base.clone()];
        for plan in make_leave_one_out_splits(&manifest, &base, &sc.leave_one_out)? {
            let seed = derive_seed(sc.seed, &plan.name);
            plans.push(with_val_test(plan, &manifest, sc.val_test_fraction, seed)?);
        }
        let mut out = Vec::new();
        for plan in &plans {
            plan.validate(&manifest)?;
            let path = self.split_path(&plan.name);
            write_atomic(&path, (serde_json::to_string_pretty(plan)? + "\n").as_bytes())?;
            out.push(path);
        }
        Ok(out)
    }

    fn read_plan(&self, name: &str, manifest: &DatasetManifest) -> Result<SplitPlan> {
        let plan: SplitPlan = serde_json::from_slice(&read_bytes(&self.split_path(name))?)?;
        plan.validate(manifest)?;
        Ok(plan)
    }

    fn detector(&self) -> Result<Box<dyn Detector>> {
        Ok(match &self.config.detector {
            DetectorSection::Mock(cfg) => Box::new(MockDetector::new(cfg.clone())?),
            DetectorSection::Sidecar(p) => Box::new(SidecarDetector::load(&resolve(&self.base_dir, p))?),
        })
    }

    fn load_emoforensics(&self, plan: &str) -> Result<EmoForensics> {
        EmoForensics::from_checkpoint(&Checkpoint::load(&self.model_path("emoforensics", plan))?)
    }

    fn train_emoforensics(&self) -> Result<Vec<PathBuf>> {
        let manifest = self.read_manifest()?;
        let data = self.load_dataset(&manifest)?;
        let mut out = Vec::new();
        for name in &self.config.plans {
            let plan = self.read_plan(name, &manifest)?;
            let (model, history) =
                train_emoforensics(&data.select(&plan.train)?, &data.select(&plan.val)?, &self.config.train)?;
            out.extend(self.save_model("emoforensics", name, &model.to_checkpoint()?, &history)?);
        }
        Ok(out)
    }

    fn save_model(&self, kind: &str, plan: &str, ck: &Checkpoint, history: &TrainHistory) -> Result<Vec<PathBuf>> {
        let model = self.model_path(kind, plan);
        ck.save(&model)?;
        let hist = self.history_path(kind, plan);
        write_atomic(&hist, (serde_json::to_string_pretty(history)? + "\n").as_bytes())?;
        Ok(vec![model, hist])
    }

    fn train_emoboost(&self) -> Result<Vec<PathBuf>> {
        let manifest = self.read_manifest()?;
        let data = self.load_dataset(&manifest)?;
        let det = self.detector()?;
        let mut out = Vec::new();
        for name in &self.config.plans {
            let plan = self.read_plan(name, &manifest)?;
            let emo_path = self.model_path("emoforensics", name);
            let emo_bytes = read_bytes(&emo_path)?;
            let emo = EmoForensics::from_checkpoint(&Checkpoint::from_bytes(&emo_bytes)?)?;
            let run = train_emoboost(
                &data.select(&plan.train)?,
                &data.select(&plan.val)?,
                &emo,
                det.as_ref(),
                &self.config.emoboost,
            )?;
            if read_bytes(&emo_path)? != emo_bytes {
                return Err(Error::Training(format!("{} changed during fusion training", emo_path.display())));
            }
            out.extend(self.save_model("emoboost", name, &run.model.to_checkpoint(&run.frozen_after)?, &run.history)?);
        }
        Ok(out)
    }

    fn eval(&self) -> Result<Vec<PathBuf>> {
        let manifest = self.read_manifest()?;
        let data = self.load_dataset(&manifest)?;
        let models: BTreeSet<ModelKind> = self.config.eval.models.iter().copied().collect();
        let det = if models.iter().any(|m| *m != ModelKind::Emoforensics) {
            Some(self.detector()?)
        } else {
            None
        };
        let mut per_model: BTreeMap<ModelKind, Vec<SplitMetrics>> = BTreeMap::new();
        for name in &self.config.plans {
            let plan = self.read_plan(name, &manifest)?;
            let test = data.select(&plan.reporting_test())?;
            let labels = test.labels();
            let emo = if models.iter().any(|m| *m != ModelKind::DetectorProbe) {
                Some(self.load_emoforensics(name)?)
            } else {
                None
            };
            for &kind in &models {
                let scores = match kind {
                    ModelKind::Emoforensics => emo.as_ref().expect("loaded").scores(&test)?,
                    ModelKind::Emoboost => {
                        let emo = emo.as_ref().expect("loaded");
                        let det = det.as_deref().expect("built");
                        let (boost, frozen) =
                            EmoBoost::from_checkpoint(&Checkpoint::load(&self.model_path("emoboost", name))?)?;
                        if frozen != FrozenHashes::of(emo, det) {
                            return Err(config_err(format!(
                                "emoboost checkpoint for {name} was trained against different frozen components"
                            )));
                        }
                        boost.scores(&FusionInputs::compute(&test, emo, det)?)?
                    }
                    ModelKind::DetectorProbe => {
                        let det = det.as_deref().expect("built");
                        probe_scores(
                            det,
                            &data.select(&plan.train)?,
                            &test,
                            self.config.eval.probe_epochs,
                            derive_seed(self.seed, &format!("probe/{name}")),
                        )?
                    }
                };
                let set = ScoredSet::new(scores, labels.clone())?;
                per_model
                    .entry(kind)
                    .or_default()
                    .push(SplitMetrics::compute(name.clone(), &set)?);
            }
        }
        let reports = per_model
            .into_iter()
            .map(|(k, splits)| EvalReport::new(k.name(), splits))
            .collect::<Result<Vec<_>>>()?;
        self.write_reports("eval", &reports)
    }

    fn write_reports(&self, name: &str, reports: &[EvalReport]) -> Result<Vec<PathBuf>> {
        let json_path = self.report_path(name, "json");
        write_atomic(&json_path, (serde_json::to_string_pretty(reports)? + "\n").as_bytes())?;
        let txt_path = self.report_path(name, "txt");
        write_atomic(&txt_path, render_table(reports).as_bytes())?;
        Ok(vec![json_path, txt_path])
    }

    fn ablate(&self) -> Result<Vec<PathBuf>> {
        let manifest = self.read_manifest()?;
        let data = self.load_dataset(&manifest)?;
        let ab = &self.config.ablate;
        let plan = self.read_plan(&ab.plan, &manifest)?;
        let (split_name, eval_ids) = if plan.val_test.is_empty() {
            (format!("{}/test", plan.name), plan.test.clone())
        } else {
            (format!("{}/val_test", plan.name), plan.val_test.clone())
        };
        let train = data.select(&plan.train)?;
        let val = data.select(&plan.val)?;
        let test = data.select(&eval_ids)?;

        let mut reports = Vec::new();
        let mut full = None;
        for variant in &ab.variants {
            let cfg = TrainConfig {
                seed: derive_seed(self.seed, &format!("ablate/{variant}")),
                ..ablation_config(&self.config.train, variant)
            };
            let (model, _) = train_emoforensics(&train, &val, &cfg)?;
            let labels: Vec<u8> = test
                .clips
                .iter()
                .map(|c| model.spec.target(&c.sample) as u8)
                .collect();
            let set = ScoredSet::new(model.scores(&test)?, labels)?;
            reports.push(EvalReport::new(
                variant.clone(),
                vec![SplitMetrics::compute(split_name.clone(), &set)?],
            )?);
            if variant == "full" {
                full = Some(model);
            }
        }

        if !ab.late_fusions.is_empty() {
            let full = match full {
                Some(m) => m,
                None => {
                    let cfg = TrainConfig {
                        seed: derive_seed(self.seed, "ablate/full"),
                        ..self.config.train.clone()
                    };
                    train_emoforensics(&train, &val, &cfg)?.0
                }
            };
            let det = self.detector()?;
            let labels = test.labels();
            let probe = probe_scores(
                det.as_ref(),
                &train,
                &test,
                self.config.eval.probe_epochs,
                derive_seed(self.seed, "ablate/detector_probe"),
            )?;
            reports.push(EvalReport::new(
                "detector_probe",
                vec![SplitMetrics::compute(split_name.clone(), &ScoredSet::new(probe, labels.clone())?)?],
            )?);
            let test_in = FusionInputs::compute(&test, &full, det.as_ref())?;
            for &fusion in &ab.late_fusions {
                let name = format!("emoboost_{}", fusion.name());
                let cfg = EmoBoostConfig {
                    fusion,
                    seed: derive_seed(self.seed, &format!("ablate/{name}")),
                    ..self.config.emoboost.clone()
                };
                let run = train_emoboost(&train, &val, &full, det.as_ref(), &cfg)?;
                let set = ScoredSet::new(run.model.scores(&test_in)?, labels.clone())?;
                reports.push(EvalReport::new(name, vec![SplitMetrics::compute(split_name.clone(), &set)?])?);
            }
        }
        self.write_reports("ablation", &reports)
    }

    fn report(&self) -> Result<Vec<PathBuf>> {
        let mut reports = Vec::new();
        for p in &self.config.report.inputs {
            let bytes = read_bytes(&resolve(&self.base_dir, p))?;
            match serde_json::from_slice::<Vec<EvalReport>>(&bytes) {
                Ok(list) => reports.extend(list),
                Err(_) => reports.push(serde_json::from_slice::<EvalReport>(&bytes)?),
            }
        }
        for ext in &self.config.report.external {
            let names: Vec<String> = if ext.splits.is_empty() {
                (1..=ext.aucs.len()).map(|i| format!("split{i}")).collect()
            } else {
                ext.splits.clone()
            };
            reports.push(EvalReport::from_aucs(ext.model.clone(), &names, &ext.aucs)?);
        }
        self.write_reports("summary", &reports)
    }
}

/// Train config for one named ablation variant.
pub fn ablation_config(base: &TrainConfig, variant: &str) -> TrainConfig {
    let mut cfg = base.clone();
    match variant {
        "no_contrastive" => cfg.disable_contrastive = true,
        "no_transformers" => cfg.disable_temporal_transformers = true,
        "video_only" => cfg.modality = ModalityMode::VideoOnly,
        "audio_only" => cfg.modality = ModalityMode::AudioOnly,
        "fusion_add" => cfg.fusion_strategy = FusionStrategy::Add,
        "fusion_concat" => cfg.fusion_strategy = FusionStrategy::Concat,
        "fusion_product" => cfg.fusion_strategy = FusionStrategy::Product,
        _ => {}
    }
    cfg
}

/// Linear probe on detector features, fit on `train` and scored on `test`.
pub fn probe_scores(det: &dyn Detector, train: &Dataset, test: &Dataset, epochs: usize, seed: u64) -> Result<Vec<f64>> {
    fn samples(d: &Dataset) -> Vec<&Sample> {
        d.clips.iter().map(|c| &c.sample).collect()
    }
    let x = detector_matrix(det, &samples(train))?;
    let y: Vec<f64> = train.labels().into_iter().map(f64::from).collect();
    let probe = train_linear_probe(&x, &y, epochs, seed);
    let xt = detector_matrix(det, &samples(test))?;
    Ok(probe.forward(xt.view()).column(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Value {
        json!({ "seed": 5, "out_dir": "out" })
    }

    #[test]
    fn command_names_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!("fit".parse::<Command>().is_err());
    }

    #[test]
    fn seeds_are_derived_and_recorded() {
        let p = Pipeline::from_value(base(), Path::new("/tmp"), &Overrides::default()).unwrap();
        assert_eq!(p.seed, 5);
        assert_eq!(p.config.train.seed, derive_seed(5, "train"));
        assert_eq!(p.config.splits.seed, derive_seed(5, "splits"));
        match &p.config.detector {
            DetectorSection::Mock(m) => assert_eq!(m.seed, derive_seed(5, "detector/mock")),
            _ => panic!("default detector is the mock"),
        }
        assert_eq!(p.out_dir, Path::new("/tmp/out"));

        let mut v = base();
        v["train"] = json!({ "seed": 9 });
        let p = Pipeline::from_value(v, Path::new("."), &Overrides::default()).unwrap();
        assert_eq!(p.config.train.seed, 9);
    }

    #[test]
    fn conflicting_overrides_are_errors() {
        let conflict = Overrides {
            seed: Some(6),
            out: None,
        };
        let err = Pipeline::from_value(base(), Path::new("."), &conflict).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let same = Overrides {
            seed: Some(5),
            out: Some("out".into()),
        };
        assert!(Pipeline::from_value(base(), Path::new("."), &same).is_ok());
        let other_out = Overrides {
            seed: None,
            out: Some("elsewhere".into()),
        };
        assert!(Pipeline::from_value(base(), Path::new("."), &other_out).is_err());

        let only_flags = Overrides {
            seed: Some(1),
            out: Some("o".into()),
        };
        assert!(Pipeline::from_value(json!({}), Path::new("."), &only_flags).is_ok());
        assert!(Pipeline::from_value(json!({}), Path::new("."), &Overrides::default()).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = base();
        v["trian"] = json!({});
        assert!(matches!(
            Pipeline::from_value(v, Path::new("."), &Overrides::default()),
            Err(Error::Config(_))
        ));
        let mut v = base();
        v["train"] = json!({ "learning_rat": 1.0 });
        assert!(Pipeline::from_value(v, Path::new("."), &Overrides::default()).is_err());
        let mut v = base();
        v["ablate"] = json!({ "variants": ["full", "bogus"] });
        assert!(Pipeline::from_value(v, Path::new("."), &Overrides::default()).is_err());
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::from_value(base(), dir.path(), &Overrides::default()).unwrap();
        let err = p.run(Command::Eval).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(p.run(Command::Synth).unwrap_err().to_string().contains("synth section missing"));
    }

    #[test]
    fn ablation_variants_flip_one_switch() {
        let base = TrainConfig::default();
        assert_eq!(ablation_config(&base, "full"), base);
        assert!(ablation_config(&base, "no_contrastive").disable_contrastive);
        assert!(ablation_config(&base, "no_transformers").disable_temporal_transformers);
        assert_eq!(ablation_config(&base, "audio_only").modality, ModalityMode::AudioOnly);
        assert_eq!(ablation_config(&base, "fusion_concat").fusion_strategy, FusionStrategy::Concat);
    }
}
