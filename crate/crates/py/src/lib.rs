//! Python bindings for `pustage-core`.
//!
//! Stages cross the boundary as roman-numeral strings ("I" .. "IV"); larger
//! records (transcripts, reports, review stats) as JSON strings.

use std::cell::RefCell;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pustage_core::arm::{self, ArmConfig};
use pustage_core::backend::{Backend, ScriptEntry, ScriptedBackend};
use pustage_core::domain::{CaseRecord, PredictionSource, StageLabel, StagePrediction};
use pustage_core::harness::{self, RunConfig};
use pustage_core::lora;
use pustage_core::metrics;
use pustage_core::parse;
use pustage_core::prompt::PromptBuilder;
use pustage_core::review;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn stage(s: &str) -> PyResult<StageLabel> {
    s.parse::<StageLabel>().map_err(value_err)
}

#[pyfunction]
fn extract_stage(text: &str) -> (Option<String>, String, String) {
    let out = parse::extract_stage(text);
    let kind = serde_json::to_value(out.confidence_kind).unwrap().as_str().unwrap_or_default().to_string();
    (out.stage.map(|s| s.roman().to_string()), out.rationale, kind)
}

#[pyfunction]
fn format_prediction(stage_name: &str, rationale: &str) -> PyResult<String> {
    Ok(parse::format_prediction(&StagePrediction {
        stage: stage(stage_name)?,
        rationale: rationale.to_string(),
        raw_model_text: String::new(),
        source: PredictionSource::GeneratorInitial,
    }))
}

/// `(approved, suggested_stage)`.
#[pyfunction]
fn critique_verdict(text: &str) -> (bool, Option<String>) {
    match parse::extract_critique_verdict(text) {
        parse::CritiqueVerdict::Ok => (true, None),
        parse::CritiqueVerdict::Revise { suggested_stage, .. } => (false, suggested_stage.map(|s| s.roman().to_string())),
    }
}

/// `[(train_ids, test_ids), ...]`.
#[pyfunction]
#[pyo3(signature = (manifest_path, k=5, seed=0))]
fn stratified_kfold(manifest_path: PathBuf, k: usize, seed: u64) -> PyResult<Vec<(Vec<String>, Vec<String>)>> {
    let m = harness::load_manifest_auto(&manifest_path).map_err(value_err)?;
    let folds = metrics::stratified_kfold(&m, k, seed).map_err(value_err)?;
    Ok(folds.into_iter().map(|f| (f.train_ids, f.test_ids)).collect())
}

#[pyclass(name = "ConfusionMatrix")]
struct PyConfusionMatrix {
    inner: metrics::ConfusionMatrix,
}

#[pymethods]
impl PyConfusionMatrix {
    /// `predictions` entries may be `None` for unparseable replies.
    #[new]
    fn new(truths: Vec<String>, predictions: Vec<Option<String>>) -> PyResult<Self> {
        let t = truths.iter().map(|s| stage(s)).collect::<PyResult<Vec<_>>>()?;
        let p = predictions.iter().map(|s| s.as_deref().map(stage).transpose()).collect::<PyResult<Vec<_>>>()?;
        Ok(Self { inner: metrics::ConfusionMatrix::from_pairs(&t, &p).map_err(value_err)? })
    }

    #[staticmethod]
    fn from_counts(counts: [[u64; 4]; 4]) -> Self {
        Self { inner: metrics::ConfusionMatrix::from_counts(counts) }
    }

    fn counts(&self) -> [[u64; 4]; 4] {
        self.inner.counts
    }

    fn unparseable_count(&self) -> u64 {
        self.inner.unparseable_count()
    }

    fn accuracy(&self) -> f64 {
        metrics::accuracy(&self.inner).value
    }

    fn macro_f1(&self) -> f64 {
        metrics::macro_f1(&self.inner).value
    }

    fn weighted_f1(&self) -> f64 {
        metrics::weighted_f1(&self.inner).value
    }

    fn precision_recall_f1(&self, stage_name: &str) -> PyResult<(f64, f64, f64)> {
        let m = metrics::precision_recall_f1(&self.inner, stage(stage_name)?);
        Ok((m.precision.value, m.recall.value, m.f1.value))
    }

    /// `(over_staged, under_staged)`.
    fn severity_direction(&self) -> (u64, u64) {
        let d = metrics::severity_direction(&self.inner);
        (d.over_staged, d.under_staged)
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<lora::Matrix> {
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    lora::Matrix::from_rows(&refs).map_err(value_err)
}

fn rows(m: &lora::Matrix) -> Vec<Vec<f64>> {
    m.as_slice().chunks(m.cols().max(1)).take(m.rows()).map(|c| c.to_vec()).collect()
}

#[pyclass(name = "LoraLayer")]
struct PyLoraLayer {
    inner: lora::LoraLayer,
}

#[pymethods]
impl PyLoraLayer {
    /// Random `A`, zero `B`.
    #[new]
    #[pyo3(signature = (w, rank, seed=0, scaling=1.0))]
    fn new(w: Vec<Vec<f64>>, rank: usize, seed: u64, scaling: f64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = lora::LoraLayer::new(matrix(&w)?, rank, &mut rng).map_err(value_err)?.with_scaling(scaling);
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (w, a, b, scaling=1.0))]
    fn from_parts(w: Vec<Vec<f64>>, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, scaling: f64) -> PyResult<Self> {
        let inner = lora::LoraLayer::from_parts(matrix(&w)?, matrix(&a)?, matrix(&b)?, scaling).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: lora::LoraLayer::load(&path).map_err(value_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(runtime_err)
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        if x.len() != self.inner.d_in() {
            return Err(value_err(format!("expected {} inputs, got {}", self.inner.d_in(), x.len())));
        }
        Ok(self.inner.forward(&x))
    }

    fn merge(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.merge())
    }

    fn trainable_params(&self) -> usize {
        self.inner.trainable_params()
    }

    #[getter]
    fn w(&self) -> Vec<Vec<f64>> {
        rows(self.inner.w())
    }

    #[getter]
    fn a(&self) -> Vec<Vec<f64>> {
        rows(self.inner.a())
    }

    #[getter]
    fn b(&self) -> Vec<Vec<f64>> {
        rows(self.inner.b())
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }
}

/// LM loss where `probs(prefix)` returns the next-token distribution.
#[pyfunction]
fn lm_loss(py: Python<'_>, sequences: Vec<Vec<usize>>, vocab_size: usize, probs: Py<PyAny>) -> PyResult<f64> {
    let batch = lora::ToySequenceBatch::new(sequences, vocab_size).map_err(value_err)?;
    let failure: RefCell<Option<PyErr>> = RefCell::new(None);
    let loss = lora::lm_loss(
        |prefix| {
            let result = probs.call1(py, (prefix.to_vec(),)).and_then(|v| v.extract::<Vec<f64>>(py));
            match result {
                Ok(v) if v.len() == vocab_size => v,
                Ok(v) => {
                    failure.borrow_mut().get_or_insert(value_err(format!("expected {vocab_size} probabilities, got {}", v.len())));
                    vec![1.0; vocab_size]
                }
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                    vec![1.0; vocab_size]
                }
            }
        },
        &batch,
    );
    match failure.into_inner() {
        Some(e) => Err(e),
        None => Ok(loss),
    }
}

/// Loss before each step of the toy LoRA training demo.
#[pyfunction]
#[pyo3(signature = (steps=200, lr=1e-2, rank=4, dim=8, seed=0))]
fn lora_demo(steps: usize, lr: f64, rank: usize, dim: usize, seed: u64) -> PyResult<Vec<f64>> {
    let task = lora::ToyLm::classification_task(4, 4, dim, seed).map_err(value_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let w = lora::Matrix::random(task.vocab_size(), dim, 0.3, &mut rng);
    let mut layer = lora::LoraLayer::new(w, rank, &mut rng).map_err(value_err)?;
    Ok(lora::toy_train(&mut layer, &task, &lora::TrainConfig { steps, lr, ..Default::default() }))
}

fn scripted(entries: Vec<(String, String, bool)>, id: &str) -> PyResult<Arc<dyn Backend>> {
    let entries = entries
        .into_iter()
        .map(|(m, r, once)| if once { ScriptEntry::once(m, r) } else { ScriptEntry::new(m, r) })
        .collect();
    Ok(Arc::new(ScriptedBackend::new(entries).map_err(value_err)?.with_id(id)))
}

/// Runs the reflection loop against scripted backends; entries are
/// `(matcher, response, consume_once)`. Returns the transcript as JSON.
#[pyfunction]
#[pyo3(signature = (image_path, generator, critic, max_iterations=2, note=None, rationale=None))]
fn run_reflection_scripted(
    image_path: PathBuf,
    generator: Vec<(String, String, bool)>,
    critic: Vec<(String, String, bool)>,
    max_iterations: usize,
    note: Option<String>,
    rationale: Option<Vec<(String, String, bool)>>,
) -> PyResult<String> {
    let case = CaseRecord {
        case_id: image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        image_path,
        true_stage: StageLabel::I,
        clinical_note: note,
        source_split: None,
    };
    let rationale_backend = rationale.map(|r| scripted(r, "rationale")).transpose()?;
    let config = ArmConfig {
        max_iterations,
        generator: scripted(generator, "generator")?,
        critic: scripted(critic, "critic")?,
        decoupled_rationale: rationale_backend.is_some(),
        rationale: rationale_backend,
    };
    let t = arm::run_reflection(&PromptBuilder::default(), &case, &config).map_err(runtime_err)?;
    Ok(t.to_json_line())
}

/// Runs an evaluation from a TOML config; returns the report as JSON.
#[pyfunction]
fn run_eval(config_path: PathBuf) -> PyResult<String> {
    let cfg = RunConfig::load(&config_path).map_err(value_err)?;
    Ok(harness::run_eval(&cfg).map_err(runtime_err)?.to_json())
}

/// Per-iteration timing table from a transcripts JSONL file.
#[pyfunction]
fn timing_table(transcripts_path: PathBuf) -> PyResult<String> {
    let ts = harness::read_reflection_transcripts(&transcripts_path).map_err(value_err)?;
    Ok(arm::timing_summary(&ts).render())
}

#[pyclass(name = "ReviewStore")]
struct PyReviewStore {
    inner: review::ReviewStore,
}

#[pymethods]
impl PyReviewStore {
    /// In-memory store over `(case_id, true_stage)` pairs.
    #[new]
    fn new(cases: Vec<(String, String)>) -> PyResult<Self> {
        let catalog = cases
            .into_iter()
            .map(|(case_id, s)| {
                Ok(review::CaseInfo {
                    case_id,
                    true_stage: stage(&s)?,
                    predicted_stage: None,
                    rationale: None,
                    image_path: None,
                    fold_id: None,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self { inner: review::ReviewStore::in_memory(catalog) })
    }

    /// Submits a ReviewEntry given as JSON; returns the entry id.
    fn submit(&mut self, entry_json: &str) -> PyResult<u64> {
        let entry: review::ReviewEntry = serde_json::from_str(entry_json).map_err(value_err)?;
        Ok(self.inner.submit(entry).map_err(value_err)?.entry_id)
    }

    fn stats_json(&self) -> String {
        serde_json::to_string(&self.inner.stats()).unwrap()
    }

    fn export_jsonl(&self) -> String {
        self.inner.export_jsonl()
    }
}

#[pymodule]
fn pustage(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(extract_stage, m)?)?;
    m.add_function(wrap_pyfunction!(format_prediction, m)?)?;
    m.add_function(wrap_pyfunction!(critique_verdict, m)?)?;
    m.add_function(wrap_pyfunction!(stratified_kfold, m)?)?;
    m.add_function(wrap_pyfunction!(lm_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lora_demo, m)?)?;
    m.add_function(wrap_pyfunction!(run_reflection_scripted, m)?)?;
    m.add_function(wrap_pyfunction!(run_eval, m)?)?;
    m.add_function(wrap_pyfunction!(timing_table, m)?)?;
    m.add_class::<PyConfusionMatrix>()?;
    m.add_class::<PyLoraLayer>()?;
    m.add_class::<PyReviewStore>()?;
    Ok(())
}
