//! Stage extraction from free-form model text.
//!
//! Resolution order for [`extract_stage`]:
//!
//! 1. the first layout line `Stage: X`
//! 2. the last `stage X` mention anywhere in the text
//! 3. a bare numeral (`III`, `3`) alone on a line
//!
//! where `X` is a roman numeral I-IV or an arabic digit 1-4. Longer numeral
//! runs such as `IIIA` or `IIII` never match.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, ModelResponse};
use crate::domain::{parse_stage_token, StageLabel, StagePrediction};

static LAYOUT_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^[ \t]*stage[ \t]*:[ \t]*(iv|i{1,3}|[1-4])\b").unwrap());
static STAGE_MENTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bstage\s+(iv|i{1,3}|[1-4])\b").unwrap());
static BARE_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^[ \t]*(iv|i{1,3}|[1-4])[ \t]*\.?[ \t\r]*$").unwrap());
static RATIONALE_MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)rationale[ \t]*:").unwrap());

/// Instruction sent on the single re-ask.
pub const REASK_INSTRUCTION: &str = "Answer with exactly one of: Stage I, Stage II, Stage III, Stage IV.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceKind {
    LayoutMatch,
    PatternMatch,
    ReaskResolved,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub stage: Option<StageLabel>,
    pub rationale: String,
    pub confidence_kind: ConfidenceKind,
}

impl ParseOutcome {
    fn unparseable(text: &str) -> Self {
        Self { stage: None, rationale: text.trim().to_string(), confidence_kind: ConfidenceKind::Unparseable }
    }
}

fn token_stage(token: &str) -> StageLabel {
    parse_stage_token(token).expect("regex only captures valid stage tokens")
}

/// Text after the first `Rationale:` marker, if any.
fn marked_rationale(text: &str) -> Option<String> {
    RATIONALE_MARKER.find(text).map(|m| text[m.end()..].trim().to_string())
}

fn without_line(text: &str, byte_offset: usize) -> String {
    let start = text[..byte_offset].rfind('\n').map(|i| i + 1).unwrap_or(0);
    let end = text[byte_offset..].find('\n').map(|i| byte_offset + i + 1).unwrap_or(text.len());
    format!("{}{}", &text[..start], &text[end..]).trim().to_string()
}

/// Extracts a stage and rationale. Total: never panics, returns
/// [`ConfidenceKind::Unparseable`] when no rule applies.
pub fn extract_stage(text: &str) -> ParseOutcome {
    // the layout puts the stage line first, so the first one counts
    if let Some(caps) = LAYOUT_LINE.captures(text) {
        let stage = token_stage(&caps[1]);
        let line_start = caps.get(0).map(|m| m.start()).unwrap_or(0);
        let rationale = marked_rationale(text).unwrap_or_else(|| without_line(text, line_start));
        return ParseOutcome { stage: Some(stage), rationale, confidence_kind: ConfidenceKind::LayoutMatch };
    }
    if let Some(caps) = STAGE_MENTION.captures_iter(text).last() {
        let stage = token_stage(&caps[1]);
        // a mention sits inside prose, so the prose itself is the rationale
        let rationale = marked_rationale(text).unwrap_or_else(|| text.trim().to_string());
        return ParseOutcome { stage: Some(stage), rationale, confidence_kind: ConfidenceKind::PatternMatch };
    }
    if let Some(caps) = BARE_LINE.captures_iter(text).last() {
        let stage = token_stage(&caps[1]);
        let start = caps.get(0).map(|m| m.start()).unwrap_or(0);
        let rationale = marked_rationale(text).unwrap_or_else(|| without_line(text, start));
        return ParseOutcome { stage: Some(stage), rationale, confidence_kind: ConfidenceKind::PatternMatch };
    }
    ParseOutcome::unparseable(text)
}

/// Fixed generator layout: `Stage: <roman>` then `Rationale: ...`.
pub fn format_prediction(prediction: &StagePrediction) -> String {
    format!("Stage: {}\nRationale: {}", prediction.stage.roman(), prediction.rationale)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum CritiqueVerdict {
    Ok,
    Revise { critique_text: String, suggested_stage: Option<StageLabel> },
}

impl CritiqueVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, CritiqueVerdict::Ok)
    }
}

/// `OK` (any case), optionally followed by punctuation only, approves;
/// anything else is a critique.
pub fn extract_critique_verdict(text: &str) -> CritiqueVerdict {
    let trimmed = text.trim();
    let approves = trimmed.len() >= 2
        && trimmed.is_char_boundary(2)
        && trimmed[..2].eq_ignore_ascii_case("ok")
        && trimmed[2..].chars().all(|c| c.is_ascii_punctuation() || c.is_whitespace());
    if approves {
        return CritiqueVerdict::Ok;
    }
    CritiqueVerdict::Revise { critique_text: trimmed.to_string(), suggested_stage: extract_stage(text).stage }
}

/// Result of [`resolve_with_reask`]: the outcome plus the re-ask response,
/// when one was issued.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    pub outcome: ParseOutcome,
    pub reask: Option<ModelResponse>,
}

impl Resolution {
    pub fn reask_count(&self) -> usize {
        usize::from(self.reask.is_some())
    }
}

/// Parses `text`; if unparseable, invokes `reask` exactly once and parses
/// its reply.
pub fn resolve_with_reask<F>(text: &str, reask: F) -> Result<Resolution, BackendError>
where
    F: FnOnce() -> Result<ModelResponse, BackendError>,
{
    let first = extract_stage(text);
    if first.stage.is_some() {
        return Ok(Resolution { outcome: first, reask: None });
    }
    let response = reask()?;
    let second = extract_stage(&response.text);
    let outcome = match second.stage {
        Some(stage) => ParseOutcome {
            stage: Some(stage),
            // keep the richer first reply as rationale when the re-ask is terse
            rationale: if second.rationale.is_empty() { text.trim().to_string() } else { second.rationale },
            confidence_kind: ConfidenceKind::ReaskResolved,
        },
        None => ParseOutcome::unparseable(text),
    };
    Ok(Resolution { outcome, reask: Some(response) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::PredictionSource;
    use proptest::prelude::*;
    use std::cell::Cell;

    fn response(text: &str) -> ModelResponse {
        ModelResponse {
            text: text.to_string(),
            latency: 0.0,
            token_counts: None,
            backend_id: "t".into(),
            retries: 0,
        }
    }

    #[test]
    fn layout_rule() {
        let out = extract_stage("Stage: III\nRationale: full-thickness loss with visible fat.");
        assert_eq!(out.stage, Some(StageLabel::III));
        assert_eq!(out.confidence_kind, ConfidenceKind::LayoutMatch);
        assert_eq!(out.rationale, "full-thickness loss with visible fat.");
    }

    #[test]
    fn pattern_rule() {
        let text = "The wound likely corresponds to Stage III, as there is full-thickness skin loss and visible fat tissue.";
        let out = extract_stage(text);
        assert_eq!(out.stage, Some(StageLabel::III));
        assert_eq!(out.confidence_kind, ConfidenceKind::PatternMatch);
        assert_eq!(out.rationale, text);
    }

    #[test]
    fn last_mention_wins() {
        let out = extract_stage("Could be Stage II or stage 3. Final verdict: This ulcer is Stage IV.");
        assert_eq!(out.stage, Some(StageLabel::IV));
    }

    #[test]
    fn no_stage() {
        let out = extract_stage("The wound shows erythema.");
        assert_eq!(out.stage, None);
        assert_eq!(out.confidence_kind, ConfidenceKind::Unparseable);
        assert_eq!(extract_stage("").confidence_kind, ConfidenceKind::Unparseable);
    }

    #[test]
    fn critique_verdicts() {
        assert_eq!(extract_critique_verdict("OK"), CritiqueVerdict::Ok);
        assert_eq!(extract_critique_verdict("ok."), CritiqueVerdict::Ok);
        assert_eq!(extract_critique_verdict("  Ok!\n"), CritiqueVerdict::Ok);
        match extract_critique_verdict("No bone or tendon is visible; Stage III is more appropriate.") {
            CritiqueVerdict::Revise { suggested_stage, critique_text } => {
                assert_eq!(suggested_stage, Some(StageLabel::III));
                assert!(critique_text.starts_with("No bone"));
            }
            v => panic!("unexpected {v:?}"),
        }
        assert!(!extract_critique_verdict("OK, but the depth is unclear").is_ok());
        assert!(!extract_critique_verdict("Okay").is_ok());
        assert!(!extract_critique_verdict("").is_ok());
        assert!(!extract_critique_verdict("é").is_ok());
    }

    #[test]
    fn reask_short_circuits() {
        let called = Cell::new(0);
        let r = resolve_with_reask("Stage: II\nRationale: x", || {
            called.set(called.get() + 1);
            Ok(response("Stage I"))
        })
        .unwrap();
        assert_eq!(called.get(), 0);
        assert_eq!(r.outcome.stage, Some(StageLabel::II));
        assert_eq!(r.reask_count(), 0);
    }

    #[test]
    fn reask_resolves() {
        let r = resolve_with_reask("I cannot tell.", || Ok(response("Stage II"))).unwrap();
        assert_eq!(r.outcome.stage, Some(StageLabel::II));
        assert_eq!(r.outcome.confidence_kind, ConfidenceKind::ReaskResolved);
        assert_eq!(r.reask_count(), 1);
    }

    #[test]
    fn reask_at_most_once() {
        let called = Cell::new(0);
        let r = resolve_with_reask("hmm", || {
            called.set(called.get() + 1);
            Ok(response("still unsure"))
        })
        .unwrap();
        assert_eq!(called.get(), 1);
        assert_eq!(r.outcome.stage, None);
        assert_eq!(r.outcome.confidence_kind, ConfidenceKind::Unparseable);
        assert_eq!(r.reask_count(), 1);
    }

    #[test]
    fn reask_error_propagates() {
        let r = resolve_with_reask("hmm", || Err(BackendError::Timeout));
        assert_eq!(r, Err(BackendError::Timeout));
    }

    proptest! {
        #[test]
        fn extract_is_total(s in ".*") {
            let out = extract_stage(&s);
            prop_assert_eq!(out.stage.is_none(), out.confidence_kind == ConfidenceKind::Unparseable);
            let _ = extract_critique_verdict(&s);
        }

        #[test]
        fn format_round_trip(idx in 0usize..4, rationale in "(?s).{0,200}") {
            let stage = StageLabel::from_index(idx).unwrap();
            let p = StagePrediction {
                stage,
                rationale,
                raw_model_text: String::new(),
                source: PredictionSource::GeneratorRevised,
            };
            prop_assert_eq!(extract_stage(&format_prediction(&p)).stage, Some(stage));
        }
    }
}
