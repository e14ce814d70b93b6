//! Evaluation runs: manifest, folds, prompting mode and backends in; a run
//! directory with per-case results, transcripts and a report out.
//!
//! Run directory layout:
//!
//! ```text
//! config.snapshot     resolved RunConfig as TOML
//! folds.json          fold assignments
//! cases.jsonl         one line per evaluated case, appended as it finishes
//! transcripts.jsonl   one line per case with every model call
//! report.json         EvalReport
//! report.txt          EvalReport::render_text of report.json
//! ```
//!
//! JSON and text files are written to a temporary name and renamed into
//! place; the two JSONL streams are appended and flushed line by line.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{
    run_decoupled_inference, run_reflection, run_single_shot, ArmConfig, ArmError, InferenceRecord,
    ReflectionTranscript, Termination,
};
use crate::backend::{Backend, BackendConfig, BackendError, OpenAiBackend, ScriptedBackend};
use crate::domain::{load_manifest, CaseRecord, DatasetManifest, DomainError, ManifestFormat, StageLabel};
use crate::metrics::{stratified_kfold, ConfusionMatrix, EvalReport, Fold, FoldMetrics, MetricsError, RunMetadata};
use crate::parse::ConfidenceKind;
use crate::prompt::{FewShotBank, PromptBuilder, PromptError, TemplateSet};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("cannot parse config {path}: {detail}")]
    ConfigParse { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("fold {fold_id}, case {case_id}: {source}")]
    Case { fold_id: usize, case_id: String, source: ArmError },
    #[error("malformed JSON in {path}: {detail}")]
    Json { path: PathBuf, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ZeroShot,
    FewShot,
    Cot,
    ArmOnly,
    FtOnly,
    FtArm,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::ZeroShot, Mode::FewShot, Mode::Cot, Mode::ArmOnly, Mode::FtOnly, Mode::FtArm];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::ZeroShot => "zero_shot",
            Mode::FewShot => "few_shot",
            Mode::Cot => "cot",
            Mode::ArmOnly => "arm_only",
            Mode::FtOnly => "ft_only",
            Mode::FtArm => "ft_arm",
        }
    }

    pub fn uses_reflection(self) -> bool {
        matches!(self, Mode::ArmOnly | Mode::FtArm)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown mode {s:?}")))
    }
}

/// Where a role's model lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Openai(BackendConfig),
    Scripted {
        /// JSONL of `{"matcher", "response", "consume_once"}` entries.
        script: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<String>,
        #[serde(default)]
        latency: f64,
        #[serde(default = "default_true")]
        multi_image: bool,
    },
}

fn default_true() -> bool {
    true
}

impl BackendSpec {
    pub fn build(&self) -> Result<Arc<dyn Backend>, HarnessError> {
        Ok(match self {
            BackendSpec::Openai(cfg) => Arc::new(OpenAiBackend::new(cfg.clone())?),
            BackendSpec::Scripted { script, id, latency, multi_image } => {
                let mut b = ScriptedBackend::from_jsonl(script)?.with_latency(*latency).with_multi_image(*multi_image);
                if let Some(id) = id {
                    b = b.with_id(id.clone());
                }
                Arc::new(b)
            }
        })
    }

    fn resolve(&mut self, base: &Path) {
        match self {
            BackendSpec::Openai(cfg) => {
                if let Some(p) = cfg.debug_log.as_mut() {
                    *p = resolve_path(base, p);
                }
            }
            BackendSpec::Scripted { script, .. } => *script = resolve_path(base, script),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmSettings {
    pub max_iterations: usize,
    /// Only takes effect when a `rationale` backend is configured.
    pub decoupled_rationale: bool,
}

impl Default for ArmSettings {
    fn default() -> Self {
        Self { max_iterations: 2, decoupled_rationale: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_format: Option<ManifestFormat>,
    pub mode: Mode,
    #[serde(default = "default_k")]
    pub k_folds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Pool cases of all folds together instead of one fold at a time.
    #[serde(default)]
    pub parallel_folds: bool,
    pub output_dir: PathBuf,
    #[serde(default = "default_per_class")]
    pub few_shot_per_class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub arm: ArmSettings,
    pub generator: BackendSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic: Option<BackendSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<BackendSpec>,
}

fn default_k() -> usize {
    5
}

fn default_parallelism() -> usize {
    4
}

fn default_per_class() -> usize {
    2
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Parses TOML; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let mut cfg: RunConfig = toml::from_str(text)
            .map_err(|e| HarnessError::ConfigParse { path: base_dir.to_path_buf(), detail: e.to_string() })?;
        cfg.manifest_path = resolve_path(base_dir, &cfg.manifest_path);
        cfg.output_dir = resolve_path(base_dir, &cfg.output_dir);
        if let Some(t) = cfg.templates_dir.as_mut() {
            *t = resolve_path(base_dir, t);
        }
        cfg.generator.resolve(base_dir);
        for spec in [cfg.critic.as_mut(), cfg.rationale.as_mut()].into_iter().flatten() {
            spec.resolve(base_dir);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            HarnessError::ConfigParse { detail, .. } => HarnessError::ConfigParse { path: path.to_path_buf(), detail },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.k_folds == 0 {
            return Err(HarnessError::Config("k_folds must be positive".into()));
        }
        if self.parallelism == 0 {
            return Err(HarnessError::Config("parallelism must be positive".into()));
        }
        if self.mode.uses_reflection() {
            if self.critic.is_none() {
                return Err(HarnessError::Config(format!("mode {} needs a critic backend", self.mode)));
            }
            if self.arm.max_iterations == 0 {
                return Err(HarnessError::Config("arm.max_iterations must be at least 1".into()));
            }
        }
        if self.mode == Mode::FewShot {
            if self.k_folds < 2 {
                return Err(HarnessError::Config("few_shot draws its bank from the training split; k_folds must be >= 2".into()));
            }
            if self.few_shot_per_class == 0 {
                return Err(HarnessError::Config("few_shot_per_class must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn prompt_builder(&self) -> Result<PromptBuilder, HarnessError> {
        let templates = match &self.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::default(),
        };
        Ok(PromptBuilder::new(templates))
    }
}

/// Backends built from a [`RunConfig`].
#[derive(Clone)]
pub struct Backends {
    pub generator: Arc<dyn Backend>,
    pub critic: Option<Arc<dyn Backend>>,
    pub rationale: Option<Arc<dyn Backend>>,
}

impl Backends {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, HarnessError> {
        Ok(Self {
            generator: cfg.generator.build()?,
            critic: cfg.critic.as_ref().map(|s| s.build()).transpose()?,
            rationale: cfg.rationale.as_ref().map(|s| s.build()).transpose()?,
        })
    }

    pub fn ids(&self) -> Vec<String> {
        [Some(&self.generator), self.critic.as_ref(), self.rationale.as_ref()]
            .into_iter()
            .flatten()
            .map(|b| b.id().to_string())
            .collect()
    }

    fn decoupled(&self, cfg: &RunConfig) -> Option<&Arc<dyn Backend>> {
        self.rationale.as_ref().filter(|_| cfg.arm.decoupled_rationale)
    }

    pub fn arm_config(&self, cfg: &RunConfig) -> Result<ArmConfig, HarnessError> {
        let critic = self.critic.clone().ok_or_else(|| HarnessError::Config("no critic backend".into()))?;
        let rationale = self.decoupled(cfg).cloned();
        Ok(ArmConfig {
            max_iterations: cfg.arm.max_iterations,
            generator: self.generator.clone(),
            critic,
            decoupled_rationale: rationale.is_some(),
            rationale,
        })
    }
}

/// One line of `cases.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub fold_id: usize,
    pub case_id: String,
    pub true_stage: StageLabel,
    pub predicted: Option<StageLabel>,
    pub rationale: Option<String>,
    pub terminated_by: Option<Termination>,
    pub parse: ConfidenceKind,
    pub latency: f64,
}

/// One line of `transcripts.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceLine {
    Reflection { fold_id: usize, transcript: ReflectionTranscript },
    SingleShot { fold_id: usize, record: InferenceRecord },
}

impl TraceLine {
    pub fn reflection(&self) -> Option<&ReflectionTranscript> {
        match self {
            TraceLine::Reflection { transcript, .. } => Some(transcript),
            TraceLine::SingleShot { .. } => None,
        }
    }
}

/// Evaluates one case under `cfg.mode`.
pub fn evaluate_case(
    cfg: &RunConfig,
    prompts: &PromptBuilder,
    backends: &Backends,
    bank: Option<&FewShotBank>,
    fold_id: usize,
    case: &CaseRecord,
) -> Result<(CaseResult, TraceLine), ArmError> {
    let single = |record: InferenceRecord| {
        let result = CaseResult {
            fold_id,
            case_id: case.case_id.clone(),
            true_stage: case.true_stage,
            predicted: record.prediction.as_ref().map(|p| p.stage),
            rationale: record.prediction.as_ref().map(|p| p.rationale.clone()),
            terminated_by: None,
            parse: record.parse,
            latency: record.latency,
        };
        (result, TraceLine::SingleShot { fold_id, record })
    };
    let generator = backends.generator.as_ref();
    match cfg.mode {
        Mode::ZeroShot => Ok(single(run_single_shot(prompts, case, &prompts.build_zero_shot(case)?, generator)?)),
        Mode::FewShot => {
            let bank = bank.ok_or_else(|| ArmError::Config("few_shot needs a bank".into()))?;
            let request = prompts.build_few_shot(case, bank, cfg.seed, generator.supports_multi_image())?;
            Ok(single(run_single_shot(prompts, case, &request, generator)?))
        }
        Mode::Cot => {
            let request = prompts.build_cot(case, prompts.templates.stage_definitions())?;
            Ok(single(run_single_shot(prompts, case, &request, generator)?))
        }
        Mode::FtOnly => match backends.decoupled(cfg) {
            Some(r) => Ok(single(run_decoupled_inference(prompts, case, generator, r.as_ref())?)),
            None => Ok(single(run_single_shot(prompts, case, &prompts.build_zero_shot(case)?, generator)?)),
        },
        Mode::ArmOnly | Mode::FtArm => {
            let arm = backends.arm_config(cfg).map_err(|e| ArmError::Config(e.to_string()))?;
            let t = run_reflection(prompts, case, &arm)?;
            let result = CaseResult {
                fold_id,
                case_id: case.case_id.clone(),
                true_stage: case.true_stage,
                predicted: t.final_stage(),
                rationale: t.final_prediction.as_ref().map(|p| p.rationale.clone()),
                terminated_by: Some(t.terminated_by),
                parse: t.initial_parse,
                latency: t.total_latency,
            };
            Ok((result, TraceLine::Reflection { fold_id, transcript: t }))
        }
    }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct JsonlSink {
    path: PathBuf,
    file: File,
}

impl JsonlSink {
    fn create(path: PathBuf) -> Result<Self, HarnessError> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(&path).map_err(io_err(&path))?;
        Ok(Self { path, file })
    }

    fn append<T: Serialize>(&mut self, value: &T) -> Result<(), HarnessError> {
        let mut line = serde_json::to_string(value).expect("record serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))
    }
}

/// Runs `work` over `items` on `parallelism` threads; results are handed to
/// `sink` on the calling thread as they complete. Stops scheduling new items
/// after the first error and returns it once in-flight items finish.
fn run_pool<T, R, E, W, S>(items: &[T], parallelism: usize, work: W, mut sink: S) -> Result<(), E>
where
    T: Sync,
    R: Send,
    E: Send,
    W: Fn(&T) -> Result<R, E> + Sync,
    S: FnMut(R) -> Result<(), E>,
{
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<Result<R, E>>();
        for _ in 0..parallelism.min(items.len()) {
            let tx = tx.clone();
            let (next, stop, work) = (&next, &stop, &work);
            scope.spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(item) = items.get(i) else { break };
                    let out = work(item);
                    if out.is_err() {
                        stop.store(true, Ordering::SeqCst);
                    }
                    if tx.send(out).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        let mut first_err = None;
        for out in rx {
            let handled = out.and_then(&mut sink);
            if let Err(e) = handled {
                stop.store(true, Ordering::SeqCst);
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    })
}

/// Runs a full evaluation and persists the run directory.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalReport, HarnessError> {
    cfg.validate()?;
    let started_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    let format = cfg.manifest_format.unwrap_or_else(|| ManifestFormat::from_path(&cfg.manifest_path));
    let manifest = load_manifest(&cfg.manifest_path, format)?;
    let folds = stratified_kfold(&manifest, cfg.k_folds, cfg.seed)?;
    let prompts = cfg.prompt_builder()?;
    let backends = Backends::from_config(cfg)?;

    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let snapshot = cfg.to_toml();
    write_atomic(&out.join("config.snapshot"), snapshot.as_bytes())?;
    write_atomic(&out.join("folds.json"), folds_json(&folds).as_bytes())?;
    let mut cases_sink = JsonlSink::create(out.join("cases.jsonl"))?;
    let mut trace_sink = JsonlSink::create(out.join("transcripts.jsonl"))?;

    let banks: Vec<Option<FewShotBank>> = folds
        .iter()
        .map(|f| {
            (cfg.mode == Mode::FewShot).then(|| {
                let train = f.train_ids.iter().filter_map(|id| manifest.get(id));
                FewShotBank::from_cases(cfg.few_shot_per_class, train)
            })
        })
        .collect();

    let items: Vec<(usize, &CaseRecord)> = folds
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| f.test_ids.iter().filter_map(|id| manifest.get(id)).map(move |c| (fi, c)))
        .collect();
    let batches: Vec<Vec<(usize, &CaseRecord)>> = if cfg.parallel_folds {
        vec![items]
    } else {
        (0..folds.len()).map(|fi| items.iter().copied().filter(|(f, _)| *f == fi).collect()).collect()
    };

    let mut matrices = vec![ConfusionMatrix::new(); folds.len()];
    for batch in &batches {
        run_pool(
            batch,
            cfg.parallelism,
            |(fi, case)| {
                let fold_id = folds[*fi].fold_id;
                evaluate_case(cfg, &prompts, &backends, banks[*fi].as_ref(), fold_id, case)
                    .map_err(|source| HarnessError::Case { fold_id, case_id: case.case_id.clone(), source })
            },
            |(result, trace)| {
                matrices[result.fold_id - 1].record(result.true_stage, result.predicted);
                cases_sink.append(&result)?;
                trace_sink.append(&trace)
            },
        )?;
    }

    let per_fold = matrices.into_iter().enumerate().map(|(i, cm)| FoldMetrics::from_confusion(i + 1, cm)).collect();
    let metadata = RunMetadata {
        mode: cfg.mode.to_string(),
        config_snapshot: snapshot,
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        backend_ids: backends.ids(),
    };
    let report = EvalReport::new(per_fold, metadata);
    write_report(out, &report)?;
    Ok(report)
}

pub fn folds_json(folds: &[Fold]) -> String {
    let mut s = serde_json::to_string_pretty(folds).expect("folds serialize");
    s.push('\n');
    s
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), HarnessError> {
    write_atomic(&dir.join("report.json"), report.to_json().as_bytes())?;
    write_atomic(&dir.join("report.txt"), report.render_text().as_bytes())
}

pub fn read_report(dir: &Path) -> Result<EvalReport, HarnessError> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    EvalReport::from_json(&text).map_err(|e| HarnessError::Json { path, detail: e.to_string() })
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|e| HarnessError::Json { path: path.to_path_buf(), detail: format!("line {}: {e}", i + 1) })?;
        out.push(value);
    }
    Ok(out)
}

/// Reflection transcripts from a JSONL file holding either harness trace
/// lines or bare transcripts.
pub fn read_reflection_transcripts(path: &Path) -> Result<Vec<ReflectionTranscript>, HarnessError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Either {
        Line(Box<TraceLine>),
        Bare(Box<ReflectionTranscript>),
    }
    let lines: Vec<Either> = read_jsonl(path)?;
    Ok(lines
        .into_iter()
        .filter_map(|l| match l {
            Either::Line(line) => line.reflection().cloned(),
            Either::Bare(t) => Some(*t),
        })
        .collect())
}

/// Manifest helper for callers that only have a path.
pub fn load_manifest_auto(path: &Path) -> Result<DatasetManifest, HarnessError> {
    Ok(load_manifest(path, ManifestFormat::from_path(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ModelResponse, PromptRequest};
    use std::sync::Mutex;

    #[test]
    fn mode_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("fine_tune".parse::<Mode>().is_err());
    }

    fn base_toml(mode: &str) -> String {
        format!(
            r#"
manifest_path = "m.csv"
mode = "{mode}"
output_dir = "out"

[generator]
kind = "scripted"
script = "gen.jsonl"
"#
        )
    }

    #[test]
    fn config_defaults_and_paths() {
        let cfg = RunConfig::from_toml(&base_toml("zero_shot"), Path::new("/base")).unwrap();
        assert_eq!(cfg.k_folds, 5);
        assert_eq!(cfg.parallelism, 4);
        assert_eq!(cfg.arm, ArmSettings { max_iterations: 2, decoupled_rationale: true });
        assert_eq!(cfg.manifest_path, PathBuf::from("/base/m.csv"));
        assert_eq!(cfg.output_dir, PathBuf::from("/base/out"));
        match &cfg.generator {
            BackendSpec::Scripted { script, .. } => assert_eq!(script, &PathBuf::from("/base/gen.jsonl")),
            other => panic!("{other:?}"),
        }
        cfg.validate().unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn config_validation() {
        let cfg = RunConfig::from_toml(&base_toml("ft_arm"), Path::new("/b")).unwrap();
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(m)) if m.contains("critic")));
        let mut cfg = RunConfig::from_toml(&base_toml("few_shot"), Path::new("/b")).unwrap();
        cfg.k_folds = 1;
        assert!(cfg.validate().is_err());
        cfg.k_folds = 5;
        cfg.parallelism = 0;
        assert!(cfg.validate().is_err());
        assert!(matches!(
            RunConfig::from_toml("mode = 3", Path::new("/b")),
            Err(HarnessError::ConfigParse { .. })
        ));
    }

    #[test]
    fn openai_spec_parses() {
        let text = r#"
manifest_path = "m.csv"
mode = "ft_only"
output_dir = "out"

[generator]
kind = "openai"
endpoint_url = "http://localhost:9/v1/chat/completions"
model_name = "stager-ft"
timeout_secs = 30
"#;
        let cfg = RunConfig::from_toml(text, Path::new("/b")).unwrap();
        match cfg.generator {
            BackendSpec::Openai(c) => {
                assert_eq!(c.model_name, "stager-ft");
                assert_eq!(c.timeout_secs, 30.0);
                assert_eq!(c.max_retries, 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    struct Gauge {
        now: AtomicUsize,
        peak: AtomicUsize,
        seen: Mutex<Vec<usize>>,
    }

    #[test]
    fn pool_bounds_concurrency() {
        let gauge = Gauge { now: AtomicUsize::new(0), peak: AtomicUsize::new(0), seen: Mutex::new(vec![]) };
        let items: Vec<usize> = (0..40).collect();
        let mut got = Vec::new();
        run_pool::<_, _, (), _, _>(
            &items,
            3,
            |i| {
                let n = gauge.now.fetch_add(1, Ordering::SeqCst) + 1;
                gauge.peak.fetch_max(n, Ordering::SeqCst);
                std::thread::sleep(std::time::Duration::from_millis(2));
                gauge.seen.lock().unwrap().push(*i);
                gauge.now.fetch_sub(1, Ordering::SeqCst);
                Ok(*i)
            },
            |r| {
                got.push(r);
                Ok(())
            },
        )
        .unwrap();
        assert!(gauge.peak.load(Ordering::SeqCst) <= 3);
        got.sort();
        assert_eq!(got, items);
    }

    #[test]
    fn pool_stops_on_error() {
        let items: Vec<usize> = (0..100).collect();
        let mut ok = 0;
        let err = run_pool(&items, 1, |i| if *i == 5 { Err(*i) } else { Ok(*i) }, |_| {
            ok += 1;
            Ok(())
        });
        assert_eq!(err, Err(5));
        assert_eq!(ok, 5);
    }

    struct Counting;

    impl Backend for Counting {
        fn id(&self) -> &str {
            "counting"
        }

        fn complete(&self, _request: &PromptRequest) -> Result<ModelResponse, BackendError> {
            Ok(ModelResponse { text: "Stage II".into(), latency: 0.5, token_counts: None, backend_id: "counting".into(), retries: 0 })
        }
    }

    #[test]
    fn evaluate_single_shot_modes() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        fs::write(&img, b"png").unwrap();
        let case = CaseRecord {
            case_id: "a".into(),
            image_path: img,
            true_stage: StageLabel::II,
            clinical_note: None,
            source_split: None,
        };
        let mut cfg = RunConfig::from_toml(&base_toml("zero_shot"), dir.path()).unwrap();
        let backends = Backends { generator: Arc::new(Counting), critic: None, rationale: None };
        let prompts = PromptBuilder::default();
        for mode in [Mode::ZeroShot, Mode::Cot, Mode::FtOnly] {
            cfg.mode = mode;
            let (result, trace) = evaluate_case(&cfg, &prompts, &backends, None, 1, &case).unwrap();
            assert_eq!(result.predicted, Some(StageLabel::II));
            assert_eq!(result.latency, 0.5);
            assert!(matches!(trace, TraceLine::SingleShot { .. }));
        }
    }
}
