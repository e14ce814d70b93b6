//! Generator-critic reflection loop.
//!
//! A run asks the generator for a stage and rationale, then alternates
//! critic review and generator revision for at most `max_iterations`
//! rounds. A critic reply of `OK` ends the loop early. Optionally the final
//! rationale is rewritten by a separate (base) model that is told the stage
//! and cannot change it.
//!
//! Every model call is recorded verbatim in the transcript together with the
//! latency the backend reported, so scripted runs produce identical bytes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, ModelResponse, PromptRequest};
use crate::domain::{CaseRecord, PredictionSource, StageLabel, StagePrediction};
use crate::metrics::mean_stdev;
use crate::parse::{extract_critique_verdict, resolve_with_reask, ConfidenceKind, CritiqueVerdict};
use crate::prompt::{PromptBuilder, PromptError};

pub const TRANSCRIPT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArmError {
    #[error("invalid reflection config: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("backend failure on call {call_index} ({role:?}): {source}")]
    BackendFailure {
        call_index: usize,
        role: CallRole,
        source: BackendError,
        /// Everything recorded before the failing call.
        partial: Box<ReflectionTrace>,
    },
}

#[derive(Clone)]
pub struct ArmConfig {
    pub max_iterations: usize,
    pub generator: Arc<dyn Backend>,
    pub critic: Arc<dyn Backend>,
    pub decoupled_rationale: bool,
    pub rationale: Option<Arc<dyn Backend>>,
}

impl std::fmt::Debug for ArmConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ArmConfig")
            .field("max_iterations", &self.max_iterations)
            .field("generator", &self.generator.id())
            .field("critic", &self.critic.id())
            .field("decoupled_rationale", &self.decoupled_rationale)
            .field("rationale", &self.rationale.as_ref().map(|b| b.id().to_string()))
            .finish()
    }
}

impl ArmConfig {
    /// One backend in both roles, two iterations, no decoupled rationale.
    pub fn same_model(backend: Arc<dyn Backend>) -> Self {
        Self {
            max_iterations: 2,
            generator: backend.clone(),
            critic: backend,
            decoupled_rationale: false,
            rationale: None,
        }
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn with_rationale_backend(mut self, backend: Arc<dyn Backend>) -> Self {
        self.decoupled_rationale = true;
        self.rationale = Some(backend);
        self
    }

    pub fn validate(&self) -> Result<(), ArmError> {
        if self.max_iterations == 0 {
            return Err(ArmError::Config("max_iterations must be at least 1".into()));
        }
        if self.decoupled_rationale && self.rationale.is_none() {
            return Err(ArmError::Config("decoupled rationale requires a rationale backend".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallRole {
    Generator,
    Critic,
    Reviser,
    Reask,
    Classifier,
    Rationale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: CallRole,
    pub backend_id: String,
    pub prompt: String,
    pub response: String,
    pub latency: f64,
    pub retries: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    CriticOk,
    IterationCap,
    ParseFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionRound {
    pub critique_text: String,
    pub verdict: CritiqueVerdict,
    pub revised: Option<StagePrediction>,
    pub iteration_latency: f64,
}

/// Calls and rounds recorded so far; what a failed run leaves behind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReflectionTrace {
    pub case_id: String,
    pub initial: Option<StagePrediction>,
    pub rounds: Vec<ReflectionRound>,
    pub calls: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionTranscript {
    pub schema_version: u32,
    pub case_id: String,
    /// `None` only when the first generator reply could not be parsed.
    pub initial: Option<StagePrediction>,
    pub initial_parse: ConfidenceKind,
    pub rounds: Vec<ReflectionRound>,
    #[serde(rename = "final")]
    pub final_prediction: Option<StagePrediction>,
    pub terminated_by: Termination,
    pub total_latency: f64,
    pub per_call_latencies: Vec<f64>,
    pub calls: Vec<CallRecord>,
}

impl ReflectionTranscript {
    pub fn final_stage(&self) -> Option<StageLabel> {
        self.final_prediction.as_ref().map(|p| p.stage)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("transcript serializes")
    }
}

struct Recorder<'a> {
    trace: ReflectionTrace,
    prompts: &'a PromptBuilder,
}

impl Recorder<'_> {
    fn call(&mut self, backend: &dyn Backend, request: &PromptRequest, role: CallRole) -> Result<ModelResponse, ArmError> {
        match backend.complete(request) {
            Ok(resp) => {
                self.trace.calls.push(CallRecord {
                    role,
                    backend_id: resp.backend_id.clone(),
                    prompt: request.user_text.clone(),
                    response: resp.text.clone(),
                    latency: resp.latency,
                    retries: resp.retries,
                });
                Ok(resp)
            }
            Err(source) => Err(ArmError::BackendFailure {
                call_index: self.trace.calls.len(),
                role,
                source,
                partial: Box::new(self.trace.clone()),
            }),
        }
    }

    /// Issues `request`, parsing the reply with at most one re-ask.
    fn classify(
        &mut self,
        backend: &dyn Backend,
        request: &PromptRequest,
        role: CallRole,
    ) -> Result<(ModelResponse, crate::parse::ParseOutcome, f64), ArmError> {
        let resp = self.call(backend, request, role)?;
        let reask_request = self.prompts.build_reask(request, &resp.text)?;
        let mut failure = None;
        let resolution = resolve_with_reask(&resp.text, || match self.call(backend, &reask_request, CallRole::Reask) {
            Ok(r) => Ok(r),
            Err(err) => {
                let source = match &err {
                    ArmError::BackendFailure { source, .. } => source.clone(),
                    _ => BackendError::Transport(err.to_string()),
                };
                failure = Some(err);
                Err(source)
            }
        });
        let resolution = match (resolution, failure) {
            (Ok(r), _) => r,
            (Err(_), Some(err)) => return Err(err),
            (Err(source), None) => return Err(ArmError::BackendFailure {
                call_index: self.trace.calls.len(),
                role: CallRole::Reask,
                source,
                partial: Box::new(self.trace.clone()),
            }),
        };
        let latency = resp.latency + resolution.reask.as_ref().map_or(0.0, |r| r.latency);
        Ok((resp, resolution.outcome, latency))
    }
}

fn prediction(stage: StageLabel, rationale: String, raw: String, source: PredictionSource) -> StagePrediction {
    StagePrediction { stage, rationale, raw_model_text: raw, source }
}

/// Runs the reflection loop for one case.
pub fn run_reflection(
    prompts: &PromptBuilder,
    case: &CaseRecord,
    config: &ArmConfig,
) -> Result<ReflectionTranscript, ArmError> {
    config.validate()?;
    let mut rec = Recorder {
        trace: ReflectionTrace { case_id: case.case_id.clone(), ..Default::default() },
        prompts,
    };

    let gen_request = prompts.build_generator_prompt(case)?;
    let (resp, outcome, _) = rec.classify(config.generator.as_ref(), &gen_request, CallRole::Generator)?;
    let initial_parse = outcome.confidence_kind;
    let Some(stage) = outcome.stage else {
        return Ok(finish(rec.trace, initial_parse, None, Termination::ParseFailure));
    };
    let initial = prediction(stage, outcome.rationale, resp.text, PredictionSource::GeneratorInitial);
    rec.trace.initial = Some(initial.clone());

    let mut current = initial;
    let mut terminated_by = Termination::IterationCap;
    for _ in 0..config.max_iterations {
        let critique_request = prompts.build_critique_prompt(case, &current)?;
        let critic_resp = rec.call(config.critic.as_ref(), &critique_request, CallRole::Critic)?;
        let verdict = extract_critique_verdict(&critic_resp.text);
        let critique_text = match &verdict {
            CritiqueVerdict::Ok => {
                rec.trace.rounds.push(ReflectionRound {
                    critique_text: critic_resp.text.clone(),
                    verdict,
                    revised: None,
                    iteration_latency: critic_resp.latency,
                });
                terminated_by = Termination::CriticOk;
                break;
            }
            CritiqueVerdict::Revise { critique_text, .. } => critique_text.clone(),
        };
        if critique_text.is_empty() {
            // an empty critic reply carries no feedback to inject
            rec.trace.rounds.push(ReflectionRound {
                critique_text,
                verdict,
                revised: None,
                iteration_latency: critic_resp.latency,
            });
            terminated_by = Termination::ParseFailure;
            break;
        }

        let feedback_request = prompts.build_feedback_prompt(case, &current, &critique_text)?;
        let (revision_resp, outcome, revision_latency) =
            rec.classify(config.generator.as_ref(), &feedback_request, CallRole::Reviser)?;
        let revised = outcome
            .stage
            .map(|stage| prediction(stage, outcome.rationale, revision_resp.text, PredictionSource::GeneratorRevised));
        rec.trace.rounds.push(ReflectionRound {
            critique_text,
            verdict,
            revised: revised.clone(),
            iteration_latency: critic_resp.latency + revision_latency,
        });
        match revised {
            Some(r) => current = r,
            None => {
                terminated_by = Termination::ParseFailure;
                break;
            }
        }
    }

    if config.decoupled_rationale {
        let backend = config.rationale.as_ref().expect("validated");
        let request = prompts.build_rationale_prompt(case, current.stage)?;
        let resp = rec.call(backend.as_ref(), &request, CallRole::Rationale)?;
        current.rationale = resp.text.trim().to_string();
        current.source = PredictionSource::DecoupledRationale;
    }

    Ok(finish(rec.trace, initial_parse, Some(current), terminated_by))
}

fn finish(
    trace: ReflectionTrace,
    initial_parse: ConfidenceKind,
    final_prediction: Option<StagePrediction>,
    terminated_by: Termination,
) -> ReflectionTranscript {
    let per_call_latencies: Vec<f64> = trace.calls.iter().map(|c| c.latency).collect();
    ReflectionTranscript {
        schema_version: TRANSCRIPT_SCHEMA_VERSION,
        case_id: trace.case_id,
        initial: trace.initial,
        initial_parse,
        rounds: trace.rounds,
        final_prediction,
        terminated_by,
        total_latency: per_call_latencies.iter().sum(),
        per_call_latencies,
        calls: trace.calls,
    }
}

/// Outcome of a single-shot classification (optionally with a decoupled
/// rationale call).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub case_id: String,
    pub prediction: Option<StagePrediction>,
    pub parse: ConfidenceKind,
    pub latency: f64,
    pub calls: Vec<CallRecord>,
}

/// Classifies with one prompt on one backend, re-asking at most once.
pub fn run_single_shot(
    prompts: &PromptBuilder,
    case: &CaseRecord,
    request: &PromptRequest,
    backend: &dyn Backend,
) -> Result<InferenceRecord, ArmError> {
    let mut rec = Recorder {
        trace: ReflectionTrace { case_id: case.case_id.clone(), ..Default::default() },
        prompts,
    };
    let (resp, outcome, latency) = rec.classify(backend, request, CallRole::Classifier)?;
    let prediction = outcome
        .stage
        .map(|stage| prediction(stage, outcome.rationale, resp.text, PredictionSource::GeneratorInitial));
    Ok(InferenceRecord {
        case_id: case.case_id.clone(),
        prediction,
        parse: outcome.confidence_kind,
        latency,
        calls: rec.trace.calls,
    })
}

/// Classifier fixes the stage from a zero-shot prompt; the rationale backend
/// then explains that stage. The rationale reply never changes the stage.
pub fn run_decoupled_inference(
    prompts: &PromptBuilder,
    case: &CaseRecord,
    classifier: &dyn Backend,
    rationale_backend: &dyn Backend,
) -> Result<InferenceRecord, ArmError> {
    let request = prompts.build_zero_shot(case)?;
    let mut record = run_single_shot(prompts, case, &request, classifier)?;
    let Some(pred) = record.prediction.as_mut() else {
        return Ok(record);
    };
    let rationale_request = prompts.build_rationale_prompt(case, pred.stage)?;
    let mut rec = Recorder { trace: ReflectionTrace { calls: record.calls.clone(), ..Default::default() }, prompts };
    let resp = rec.call(rationale_backend, &rationale_request, CallRole::Rationale)?;
    pred.rationale = resp.text.trim().to_string();
    pred.source = PredictionSource::DecoupledRationale;
    record.latency += resp.latency;
    record.calls = rec.trace.calls;
    Ok(record)
}

// ---------------------------------------------------------------------------
// Timing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub iteration: usize,
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 when fewer than two observations.
    pub stdev: f64,
    pub stdev_defined: bool,
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub rows: Vec<TimingRow>,
}

/// Per-iteration latency statistics over every transcript reaching that
/// iteration; the cumulative column is the running sum of means.
pub fn timing_summary(transcripts: &[ReflectionTranscript]) -> TimingSummary {
    let depth = transcripts.iter().map(|t| t.rounds.len()).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(depth);
    let mut cumulative = 0.0;
    for i in 0..depth {
        let samples: Vec<f64> =
            transcripts.iter().filter_map(|t| t.rounds.get(i)).map(|r| r.iteration_latency).collect();
        let (mean, stdev, stdev_defined) = mean_stdev(&samples);
        cumulative += mean;
        rows.push(TimingRow { iteration: i + 1, count: samples.len(), mean, stdev, stdev_defined, cumulative });
    }
    TimingSummary { rows }
}

impl TimingSummary {
    pub fn render(&self) -> String {
        let mut out = format!("{:<9}  {:<22}  {}\n", "Iteration", "Time (s) per Iteration", "Cumulative Time (s)");
        let mut footnote = false;
        for row in &self.rows {
            let marker = if row.stdev_defined { "" } else { "*" };
            footnote |= !row.stdev_defined;
            let cell = format!("{:.2} ± {:.2}{marker}", row.mean, row.stdev);
            out.push_str(&format!("{:<9}  {:<22}  {:.2}\n", row.iteration, cell, row.cumulative));
        }
        if footnote {
            out.push_str("* fewer than two observations; standard deviation undefined\n");
        }
        out
    }
}
