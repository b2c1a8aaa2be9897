//! Experiment runner: one TOML spec drives corpus generation, training,
//! evaluation, calibration, the inversion attack and report collation.
//!
//! Every command writes its artifacts atomically into one output directory,
//! refuses to overwrite without `force`, and leaves a manifest holding the
//! effective spec, its hash, the seed and the SHA-256 of every artifact. A
//! manifest can be passed back as the spec to replay the command.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{sweep_eta, InversionResult, DEFAULT_ETAS};
use crate::corpus::{
    generate_synthetic_corpus, median_messages, parse_conversations, segment_all, split_dataset,
    write_conversations, Conversation, DatasetSplit, SplitRatios, SyntheticCorpusConfig, MAX_SEGMENT_LEN,
};
use crate::dp::AccountantReport;
use crate::embed::{Embedder, EmbedderSpec, Span};
use crate::error::{Error, Result};
use crate::espd::{evaluate_scored, score_testset, write_verdicts, EspdConfig, TestsetEvaluation};
use crate::fed::{embed_segments, run_training, train_centralized, FederatedConfig, TrainingHistory, TrainingMode};
use crate::metrics::{calibrate_threshold, derive_p, fpr_sweep, report, Calibration, EvaluationReport, REPORT_HEADER};
use crate::model::LogisticModel;
use crate::rng::{derive_seed, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Synthetic(SyntheticCorpusConfig),
    /// Conversation JSONL files. With a separate `test` file the split's
    /// test ratio must be zero.
    Files { train: PathBuf, test: Option<PathBuf> },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic(SyntheticCorpusConfig::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedianSource {
    /// Positive training conversations.
    #[default]
    PositiveTrain,
    PositiveTest,
    AllTrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationOptions {
    pub target_fpr: f64,
    /// Fixed penalty rate; derived from the median length when absent.
    pub p: Option<f64>,
    pub median_source: MedianSource,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        Self {
            target_fpr: 0.01,
            p: None,
            median_source: MedianSource::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineOptions {
    /// Epochs for the warm-up-only and centralized models.
    pub epochs: usize,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self { epochs: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackOptions {
    pub etas: Vec<f64>,
    /// Reference vectors attacked; the first training segments are used.
    pub n_reference: usize,
    /// Embedder for the reference vectors; the experiment embedder if absent.
    pub embedder: Option<EmbedderSpec>,
}

impl Default for AttackOptions {
    fn default() -> Self {
        Self {
            etas: DEFAULT_ETAS.to_vec(),
            n_reference: 10_000,
            embedder: None,
        }
    }
}

fn default_split() -> SplitRatios {
    SplitRatios {
        test: 0.2,
        ..SplitRatios::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub corpus: CorpusSource,
    #[serde(default = "default_split")]
    pub split: SplitRatios,
    #[serde(default)]
    pub embedder: EmbedderSpec,
    #[serde(default)]
    pub federated: FederatedConfig,
    #[serde(default)]
    pub baseline: BaselineOptions,
    #[serde(default)]
    pub espd: EspdConfig,
    #[serde(default)]
    pub evaluation: EvaluationOptions,
    #[serde(default)]
    pub attack: AttackOptions,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid("spec", e.message().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match &self.corpus {
            CorpusSource::Synthetic(c) => c.validate().map_err(|e| e.context("corpus"))?,
            CorpusSource::Files { train, test } => {
                for p in std::iter::once(train).chain(test) {
                    if !p.is_file() {
                        return Err(Error::invalid("corpus", format!("file {} does not exist", p.display())));
                    }
                }
                if test.is_some() && self.split.test > 0.0 {
                    return Err(Error::invalid("split.test", "must be 0 when a test file is given"));
                }
            }
        }
        self.embedder.validate().map_err(|e| e.context("embedder"))?;
        if let EmbedderSpec::Precomputed { path, .. } = &self.embedder {
            if !path.is_file() {
                return Err(Error::invalid("embedder.path", format!("file {} does not exist", path.display())));
            }
        }
        self.federated.validate().map_err(|e| e.context("federated"))?;
        self.espd.validate().map_err(|e| e.context("espd"))?;
        let ev = &self.evaluation;
        if !(0.0..=1.0).contains(&ev.target_fpr) {
            return Err(Error::invalid("evaluation.target_fpr", "must lie in [0, 1]"));
        }
        if ev.p.is_some_and(|p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::invalid("evaluation.p", "must be positive"));
        }
        if self.attack.n_reference == 0 || self.attack.etas.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::invalid("attack", "n_reference must be >= 1 and etas positive"));
        }
        if let Some(e) = &self.attack.embedder {
            e.validate().map_err(|e| e.context("attack.embedder"))?;
        }
        Ok(())
    }

    /// Make referenced paths absolute relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let CorpusSource::Files { train, test } = &mut self.corpus {
            fix(train);
            if let Some(t) = test {
                fix(t);
            }
        }
        if let EmbedderSpec::Precomputed { path, .. } = &mut self.embedder {
            fix(path);
        }
        if let Some(EmbedderSpec::Precomputed { path, .. }) = &mut self.attack.embedder {
            fix(path);
        }
        if let Some(o) = &mut self.out_dir {
            fix(o);
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn federated_config(&self) -> FederatedConfig {
        FederatedConfig {
            seed: derive_seed(self.seed, &[tag::LOCAL]),
            ..self.federated.clone()
        }
    }
}

/// What `train` produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTarget {
    Federated(TrainingMode),
    /// Trained on the warm-up set alone.
    Warmup,
    /// Trained on warm-up plus all training segments pooled.
    Centralized,
}

impl TrainTarget {
    pub fn label(&self) -> &'static str {
        match self {
            TrainTarget::Federated(m) => m.name(),
            TrainTarget::Warmup => "warmup",
            TrainTarget::Centralized => "centralized",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub target: Option<TrainTarget>,
    pub seed: u64,
    pub spec_sha256: String,
    pub spec: ExperimentSpec,
    /// Files read, with their SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Files written, by name relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
}

/// Load a TOML spec, or the spec embedded in a manifest.
pub fn load_spec(path: &Path) -> Result<(ExperimentSpec, Option<Manifest>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if path.extension().is_some_and(|e| e == "json") {
        let m: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        let mut spec = m.spec.clone();
        spec.resolve_paths(&base);
        return Ok((spec, Some(m)));
    }
    let mut spec = ExperimentSpec::from_toml(&text)?;
    spec.resolve_paths(&base);
    Ok((spec, None))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Spec plus output location for one command.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub spec: ExperimentSpec,
    pub out: PathBuf,
    pub force: bool,
}

impl RunContext {
    pub fn new(spec: ExperimentSpec, out: Option<PathBuf>, force: bool) -> Result<Self> {
        spec.validate()?;
        let out = out
            .or_else(|| spec.out_dir.clone())
            .ok_or_else(|| Error::invalid("out", "no output directory given"))?;
        Ok(Self { spec, out, force })
    }

    fn claim(&self, names: &[String]) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        if !self.force {
            if let Some(n) = names.iter().find(|n| self.out.join(n).exists()) {
                return Err(Error::invalid(
                    "out",
                    format!("{} exists; pass --force to overwrite", self.out.join(n).display()),
                ));
            }
        }
        Ok(())
    }

    fn write(&self, name: &str, bytes: &[u8], artifacts: &mut BTreeMap<String, String>) -> Result<PathBuf> {
        let path = self.out.join(name);
        write_atomic(&path, bytes)?;
        artifacts.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(path)
    }

    fn finish(
        &self,
        command: &str,
        target: Option<TrainTarget>,
        inputs: BTreeMap<String, String>,
        mut artifacts: BTreeMap<String, String>,
    ) -> Result<PathBuf> {
        let name = match target {
            Some(t) => format!("manifest-{command}-{}.json", t.label()),
            None => format!("manifest-{command}.json"),
        };
        let m = Manifest {
            command: command.to_string(),
            target,
            seed: self.spec.seed,
            spec_sha256: self.spec.hash(),
            spec: self.spec.clone(),
            inputs,
            artifacts: artifacts.clone(),
        };
        let mut json = serde_json::to_vec_pretty(&m).expect("manifest serializes");
        json.push(b'\n');
        self.write(&name, &json, &mut artifacts)
    }
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn read_jsonl(path: &Path) -> Result<Vec<Conversation>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_conversations(BufReader::new(f)).map_err(|e| e.context(path.display().to_string()))
}

/// Corpus, split and embedder, all derived deterministically from the spec.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Vec<Conversation>,
    pub split: DatasetSplit,
    pub embedder: Embedder,
}

pub fn load_corpus(spec: &ExperimentSpec) -> Result<(Vec<Conversation>, Option<Vec<Conversation>>)> {
    match &spec.corpus {
        CorpusSource::Synthetic(cfg) => {
            let cfg = SyntheticCorpusConfig {
                seed: derive_seed(spec.seed, &[tag::CORPUS, cfg.seed]),
                ..cfg.clone()
            };
            Ok((generate_synthetic_corpus(&cfg)?, None))
        }
        CorpusSource::Files { train, test } => Ok((read_jsonl(train)?, test.as_deref().map(read_jsonl).transpose()?)),
    }
}

pub fn prepare(spec: &ExperimentSpec) -> Result<Prepared> {
    let (corpus, test) = load_corpus(spec).map_err(|e| e.context("corpus"))?;
    let mut split = split_dataset(&corpus, &spec.split, derive_seed(spec.seed, &[tag::SPLIT])).map_err(|e| e.context("split"))?;
    if let Some(t) = test {
        split.test = t;
    }
    let embedder = Embedder::from_spec(&spec.embedder).map_err(|e| e.context("embedder"))?;
    Ok(Prepared { corpus, split, embedder })
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub model: LogisticModel,
    pub history: Option<TrainingHistory>,
    pub privacy: Option<AccountantReport>,
}

pub fn train_target(spec: &ExperimentSpec, prep: &Prepared, target: TrainTarget) -> Result<TrainArtifacts> {
    let cfg = spec.federated_config();
    let dim = prep.embedder.dimension();
    match target {
        TrainTarget::Federated(mode) => {
            let cfg = FederatedConfig { mode, ..cfg };
            let out = run_training(&prep.split.train, &prep.split.warmup, &prep.embedder, &cfg).map_err(|e| e.context("fed"))?;
            let privacy = out.history.final_privacy().cloned();
            Ok(TrainArtifacts {
                model: out.model,
                history: Some(out.history),
                privacy,
            })
        }
        TrainTarget::Warmup | TrainTarget::Centralized => {
            let mut segs = prep.split.warmup.clone();
            if target == TrainTarget::Centralized {
                segs.extend(segment_all(&prep.split.train, MAX_SEGMENT_LEN)?);
            }
            let examples = embed_segments(&prep.embedder, &segs)?;
            let model = train_centralized(&examples, LogisticModel::zeros(dim), &cfg.sgd(), spec.baseline.epochs, cfg.seed)?;
            Ok(TrainArtifacts {
                model,
                history: None,
                privacy: None,
            })
        }
    }
}

/// Penalty rate from the spec override or the configured median source.
pub fn penalty_rate(spec: &ExperimentSpec, prep: &Prepared) -> Result<f64> {
    if let Some(p) = spec.evaluation.p {
        return Ok(p);
    }
    let pick = |convs: &[Conversation], positive_only: bool| -> Vec<Conversation> {
        convs
            .iter()
            .filter(|c| !positive_only || c.label.is_positive())
            .cloned()
            .collect()
    };
    let pool = match spec.evaluation.median_source {
        MedianSource::PositiveTrain => pick(&prep.split.train, true),
        MedianSource::PositiveTest => pick(&prep.split.test, true),
        MedianSource::AllTrain => pick(&prep.split.train, false),
    };
    derive_p(median_messages(&pool).map_err(|e| e.context("median length"))?)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub testset: TestsetEvaluation,
    pub report: EvaluationReport,
}

/// Stream the test set through the model at `cfg`'s threshold.
pub fn evaluate_model(spec: &ExperimentSpec, prep: &Prepared, model: &LogisticModel, cfg: &EspdConfig) -> Result<Evaluation> {
    if prep.split.test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let scored = score_testset(model, &prep.embedder, &prep.split.test, cfg.window_len)?;
    let testset = evaluate_scored(&scored, cfg)?;
    let report = report(testset.counts, &testset.latencies, penalty_rate(spec, prep)?)?;
    Ok(Evaluation { testset, report })
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::invalid("csv", e.to_string());
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(r).map_err(wrap)?;
    }
    w.into_inner().map_err(|e| Error::invalid("csv", e.to_string()))
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializable");
    b.push(b'\n');
    b
}

#[derive(Serialize)]
struct SplitManifest<'a> {
    warmup: Vec<String>,
    train: Vec<&'a str>,
    validation: Vec<&'a str>,
    test: Vec<&'a str>,
}

pub fn cmd_gen_corpus(ctx: &RunContext) -> Result<PathBuf> {
    let names = ["corpus.jsonl", "split.json", "manifest-gen-corpus.json"].map(String::from);
    ctx.claim(&names)?;
    let prep = prepare(&ctx.spec)?;
    let mut all = prep.corpus.clone();
    if let CorpusSource::Files { test: Some(_), .. } = ctx.spec.corpus {
        all.extend(prep.split.test.iter().cloned());
    }
    let mut buf = Vec::new();
    write_conversations(&mut buf, &all)?;
    let ids = |c: &'_ [Conversation]| -> Vec<String> { c.iter().map(|c| c.id.clone()).collect() };
    let (train, validation, test) = (ids(&prep.split.train), ids(&prep.split.validation), ids(&prep.split.test));
    let split = SplitManifest {
        warmup: prep
            .split
            .warmup
            .iter()
            .map(|s| Span::from_segment(s).key())
            .collect(),
        train: train.iter().map(String::as_str).collect(),
        validation: validation.iter().map(String::as_str).collect(),
        test: test.iter().map(String::as_str).collect(),
    };
    let mut art = BTreeMap::new();
    ctx.write(&names[0], &buf, &mut art)?;
    ctx.write(&names[1], &json_bytes(&split), &mut art)?;
    ctx.finish("gen-corpus", None, BTreeMap::new(), art)
}

pub fn model_file(target: TrainTarget) -> String {
    format!("model-{}.ckpt", target.label())
}

pub fn cmd_train(ctx: &RunContext, target: TrainTarget) -> Result<PathBuf> {
    let l = target.label();
    let names = [
        model_file(target),
        format!("history-{l}.jsonl"),
        format!("privacy-{l}.json"),
        format!("manifest-train-{l}.json"),
    ];
    ctx.claim(&names)?;
    let prep = prepare(&ctx.spec)?;
    let out = train_target(&ctx.spec, &prep, target)?;
    let mut art = BTreeMap::new();
    ctx.write(&names[0], out.model.to_checkpoint().as_bytes(), &mut art)?;
    if let Some(h) = &out.history {
        let mut buf = Vec::new();
        h.write_jsonl(&mut buf)?;
        for n in &h.notes {
            writeln!(buf, "{}", serde_json::json!({ "note": n })).expect("vec write");
        }
        ctx.write(&names[1], &buf, &mut art)?;
    }
    if let Some(p) = &out.privacy {
        ctx.write(&names[2], &json_bytes(p), &mut art)?;
    }
    ctx.finish("train", Some(target), BTreeMap::new(), art)
}

fn load_model(path: &Path) -> Result<(LogisticModel, BTreeMap<String, String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model = LogisticModel::from_checkpoint(&text).map_err(|e| e.context(path.display().to_string()))?;
    let mut inputs = BTreeMap::new();
    inputs.insert(path.display().to_string(), hex::encode(Sha256::digest(text.as_bytes())));
    Ok((model, inputs))
}

fn resolve_checkpoint(ctx: &RunContext, target: TrainTarget, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint.map_or_else(|| ctx.out.join(model_file(target)), Path::to_path_buf)
}

pub fn cmd_evaluate(ctx: &RunContext, target: TrainTarget, checkpoint: Option<&Path>) -> Result<EvaluationReport> {
    let l = target.label();
    let names = [format!("report-{l}.csv"), format!("verdicts-{l}.jsonl"), format!("manifest-evaluate-{l}.json")];
    ctx.claim(&names)?;
    let (model, inputs) = load_model(&resolve_checkpoint(ctx, target, checkpoint))?;
    let prep = prepare(&ctx.spec)?;
    let ev = evaluate_model(&ctx.spec, &prep, &model, &ctx.spec.espd)?;
    let mut art = BTreeMap::new();
    let row = ev.report.csv_row(l, &format!("threshold={}", ctx.spec.espd.proba_threshold));
    ctx.write(&names[0], &csv_bytes(&REPORT_HEADER, &[row])?, &mut art)?;
    let mut buf = Vec::new();
    write_verdicts(&mut buf, &ev.testset.verdicts)?;
    ctx.write(&names[1], &buf, &mut art)?;
    ctx.finish("evaluate", Some(target), inputs, art)?;
    Ok(ev.report)
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationOutcome {
    pub calibration: Calibration,
    pub target_fpr: f64,
    pub default: EvaluationReport,
    pub calibrated: EvaluationReport,
}

pub fn cmd_calibrate(ctx: &RunContext, target: TrainTarget, checkpoint: Option<&Path>) -> Result<CalibrationOutcome> {
    let l = target.label();
    let names = [
        format!("calibration-{l}.json"),
        format!("report-{l}-calibrated.csv"),
        format!("sweep-{l}.csv"),
        format!("manifest-calibrate-{l}.json"),
    ];
    ctx.claim(&names)?;
    let (model, inputs) = load_model(&resolve_checkpoint(ctx, target, checkpoint))?;
    let prep = prepare(&ctx.spec)?;
    let cfg = ctx.spec.espd;
    let scored = score_testset(&model, &prep.embedder, &prep.split.test, cfg.window_len)?;
    let negatives: Vec<_> = scored.iter().filter(|s| !s.label.is_positive()).cloned().collect();
    let target_fpr = ctx.spec.evaluation.target_fpr;
    let calibration = calibrate_threshold(&negatives, &cfg, target_fpr)?;
    let p = penalty_rate(&ctx.spec, &prep)?;
    let at = |c: &EspdConfig| -> Result<EvaluationReport> {
        let ev = evaluate_scored(&scored, c)?;
        report(ev.counts, &ev.latencies, p)
    };
    let default = at(&cfg)?;
    let calibrated = at(&cfg.with_threshold(calibration.threshold()))?;
    let outcome = CalibrationOutcome {
        calibration,
        target_fpr,
        default,
        calibrated,
    };
    let sweep = fpr_sweep(&scored, &cfg, p)?;
    let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
    let rows: Vec<Vec<String>> = sweep
        .iter()
        .map(|r| vec![r.threshold.to_string(), opt(r.fpr), r.f1.to_string(), opt(r.speed)])
        .collect();
    let mut art = BTreeMap::new();
    ctx.write(&names[0], &json_bytes(&outcome), &mut art)?;
    let row = outcome
        .calibrated
        .csv_row(l, &format!("calibrated {}", outcome.calibration));
    ctx.write(&names[1], &csv_bytes(&REPORT_HEADER, &[row])?, &mut art)?;
    ctx.write(&names[2], &csv_bytes(&["threshold", "fpr", "f1", "speed"], &rows)?, &mut art)?;
    ctx.finish("calibrate", Some(target), inputs, art)?;
    Ok(outcome)
}

pub fn cmd_attack(ctx: &RunContext) -> Result<Vec<InversionResult>> {
    let names = ["attack.csv", "manifest-attack.json"].map(String::from);
    ctx.claim(&names)?;
    let prep = prepare(&ctx.spec)?;
    let embedder = match &ctx.spec.attack.embedder {
        Some(s) => Embedder::from_spec(s)?,
        None => prep.embedder.clone(),
    };
    let mut segs = segment_all(&prep.split.train, MAX_SEGMENT_LEN)?;
    segs.truncate(ctx.spec.attack.n_reference);
    let reference: Vec<_> = embed_segments(&embedder, &segs)?.into_iter().map(|e| e.features).collect();
    let results = sweep_eta(&reference, &ctx.spec.attack.etas, derive_seed(ctx.spec.seed, &[tag::ATTACK]))?;
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| vec![r.eta.to_string(), r.accuracy.to_string(), r.n_trials.to_string()])
        .collect();
    let mut art = BTreeMap::new();
    ctx.write(&names[0], &csv_bytes(&["eta", "accuracy", "n_trials"], &rows)?, &mut art)?;
    ctx.finish("attack", None, BTreeMap::new(), art)?;
    Ok(results)
}

/// Collate every `report-*.csv` in the output directory into `report.csv`.
pub fn cmd_report(ctx: &RunContext) -> Result<PathBuf> {
    let names = ["report.csv", "manifest-report.json"].map(String::from);
    ctx.claim(&names)?;
    let mut files: Vec<PathBuf> = fs::read_dir(&ctx.out)
        .map_err(|e| Error::io(&ctx.out, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("report-") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Insufficient(format!("no report-*.csv in {}", ctx.out.display())));
    }
    let mut rows = Vec::new();
    let mut inputs = BTreeMap::new();
    for f in &files {
        inputs.insert(f.display().to_string(), sha256_file(f)?);
        let mut r = csv::Reader::from_path(f).map_err(|e| Error::invalid("report", e.to_string()))?;
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::invalid("report", e.to_string()))?;
            rows.push(rec.iter().map(String::from).collect());
        }
    }
    let mut art = BTreeMap::new();
    ctx.write(&names[0], &csv_bytes(&REPORT_HEADER, &rows)?, &mut art)?;
    ctx.finish("report", None, inputs, art)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_requires_seed_and_names_bad_fields() {
        assert!(ExperimentSpec::from_toml("").is_err());
        let e = ExperimentSpec::from_toml("seed = 1\n[federated]\nroundz = 3\n").unwrap_err();
        assert!(e.to_string().contains("roundz"), "{e}");
        let s = ExperimentSpec::from_toml("seed = 1\n").unwrap();
        assert_eq!(s.federated.rounds, 100);
        assert_eq!(s.split.test, 0.2);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let s = ExperimentSpec::from_toml(
            "seed = 3\n[corpus]\nkind = \"synthetic\"\nn_positive = 20\n[embedder]\nkind = \"hashing\"\ndimension = 16\n[federated]\nmode = \"dp-fedavg\"\noversample_step = 10\n",
        )
        .unwrap();
        let j = serde_json::to_string(&s).unwrap();
        let back: ExperimentSpec = serde_json::from_str(&j).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.hash(), back.hash());
        assert_eq!(back.federated.mode, TrainingMode::DpFedavg);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
