//! Prompt construction for every inference mode.
//!
//! Templates are plain text with `{slot}` markers. The built-in set is
//! compiled in from `templates/`; a directory containing any subset of the
//! same file names overrides them one by one.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{mime_for_path, ImagePart, PromptRequest, SupportExample};
use crate::domain::{parse_stage_token, CaseRecord, StageLabel, StagePrediction};
use crate::parse::format_prediction;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("cannot read image {path}: {detail}")]
    ImageRead { path: String, detail: String },
    #[error("few-shot bank has too few {0} examples")]
    InsufficientBank(StageLabel),
    #[error("backend does not accept multiple images")]
    MultiImageUnsupported,
    #[error("missing definition for {0}")]
    MissingDefinition(StageLabel),
    #[error("critique text is empty")]
    EmptyCritique,
    #[error("template {template} has unbound slot {{{slot}}}")]
    UnboundSlot { template: String, slot: String },
    #[error("template {template}: {detail}")]
    TemplateSyntax { template: String, detail: String },
    #[error("cannot load template file {path}: {detail}")]
    TemplateIo { path: String, detail: String },
}

/// Answers accepted when a classification reply is constrained.
pub const STAGE_ANSWERS: [&str; 4] = ["Stage I", "Stage II", "Stage III", "Stage IV"];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: String,
    pub role_preamble: String,
    pub body_with_slots: String,
    pub slots: Vec<String>,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn parse(
        template_id: impl Into<String>,
        role_preamble: impl Into<String>,
        body: impl Into<String>,
    ) -> Result<Self, PromptError> {
        let template_id = template_id.into();
        let body = body.into();
        let mut segments = Vec::new();
        let mut slots = Vec::new();
        let mut rest = body.as_str();
        while let Some(open) = rest.find('{') {
            if open > 0 {
                segments.push(Segment::Text(rest[..open].to_string()));
            }
            let after = &rest[open + 1..];
            let close = after.find('}').ok_or_else(|| PromptError::TemplateSyntax {
                template: template_id.clone(),
                detail: "unterminated '{'".into(),
            })?;
            let name = &after[..close];
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
                return Err(PromptError::TemplateSyntax {
                    template: template_id.clone(),
                    detail: format!("invalid slot name {name:?}"),
                });
            }
            if !slots.iter().any(|s| s == name) {
                slots.push(name.to_string());
            }
            segments.push(Segment::Slot(name.to_string()));
            rest = &after[close + 1..];
        }
        if rest.contains('}') {
            return Err(PromptError::TemplateSyntax {
                template: template_id.clone(),
                detail: "stray '}'".into(),
            });
        }
        if !rest.is_empty() {
            segments.push(Segment::Text(rest.to_string()));
        }
        Ok(Self { template_id, role_preamble: role_preamble.into(), body_with_slots: body, slots, segments })
    }

    /// Substitutes every slot. Bound values are inserted verbatim, so model
    /// text containing braces is safe.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body_with_slots.len());
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(name) => {
                    let value = bindings
                        .iter()
                        .find(|(k, _)| k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| PromptError::UnboundSlot {
                            template: self.template_id.clone(),
                            slot: name.clone(),
                        })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

const TEMPLATE_IDS: [&str; 8] =
    ["zero_shot", "generator", "few_shot", "cot", "critique", "feedback", "rationale", "reask"];

fn builtin_body(id: &str) -> &'static str {
    match id {
        "system" => include_str!("../templates/system.txt"),
        "zero_shot" => include_str!("../templates/zero_shot.txt"),
        "generator" => include_str!("../templates/generator.txt"),
        "few_shot" => include_str!("../templates/few_shot.txt"),
        "cot" => include_str!("../templates/cot.txt"),
        "critique" => include_str!("../templates/critique.txt"),
        "feedback" => include_str!("../templates/feedback.txt"),
        "rationale" => include_str!("../templates/rationale.txt"),
        "reask" => include_str!("../templates/reask.txt"),
        "stage_definitions" => include_str!("../templates/stage_definitions.txt"),
        _ => unreachable!("unknown template id {id}"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
    stage_definitions: BTreeMap<StageLabel, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::from_sources(|id| Ok(builtin_body(id).to_string())).expect("built-in templates are valid")
    }
}

impl TemplateSet {
    /// Loads templates from `dir`, falling back to the built-in text for any
    /// file that is absent.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        Self::from_sources(|id| {
            let path = dir.join(format!("{id}.txt"));
            if path.exists() {
                std::fs::read_to_string(&path).map_err(|e| PromptError::TemplateIo {
                    path: path.display().to_string(),
                    detail: e.to_string(),
                })
            } else {
                Ok(builtin_body(id).to_string())
            }
        })
    }

    fn from_sources(load: impl Fn(&str) -> Result<String, PromptError>) -> Result<Self, PromptError> {
        let preamble = load("system")?.trim_end().to_string();
        let mut templates = BTreeMap::new();
        for id in TEMPLATE_IDS {
            let body = load(id)?.trim_end().to_string();
            templates.insert(id.to_string(), PromptTemplate::parse(id, preamble.clone(), body)?);
        }
        let stage_definitions = parse_definitions(&load("stage_definitions")?)?;
        Ok(Self { templates, stage_definitions })
    }

    pub fn get(&self, id: &str) -> &PromptTemplate {
        &self.templates[id]
    }

    pub fn preamble(&self) -> &str {
        &self.get("generator").role_preamble
    }

    pub fn stage_definitions(&self) -> &BTreeMap<StageLabel, String> {
        &self.stage_definitions
    }
}

/// Parses `<stage>: <definition>` lines.
pub fn parse_definitions(text: &str) -> Result<BTreeMap<StageLabel, String>, PromptError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (head, body) = line.split_once(':').ok_or_else(|| PromptError::TemplateSyntax {
            template: "stage_definitions".into(),
            detail: format!("line {} lacks ':'", i + 1),
        })?;
        let stage = parse_stage_token(head).map_err(|e| PromptError::TemplateSyntax {
            template: "stage_definitions".into(),
            detail: format!("line {}: {e}", i + 1),
        })?;
        out.insert(stage, body.trim().to_string());
    }
    Ok(out)
}

/// Labeled support cases for few-shot prompting, grouped by stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotBank {
    pub examples_per_class: usize,
    pub entries: BTreeMap<StageLabel, Vec<CaseRecord>>,
}

impl FewShotBank {
    pub fn from_cases<'a>(examples_per_class: usize, cases: impl IntoIterator<Item = &'a CaseRecord>) -> Self {
        let mut entries: BTreeMap<StageLabel, Vec<CaseRecord>> = BTreeMap::new();
        for case in cases {
            entries.entry(case.true_stage).or_default().push(case.clone());
        }
        Self { examples_per_class, entries }
    }

    /// Seeded selection of `k` examples per stage, Stage I first, never
    /// including `exclude_id`.
    pub fn select(&self, exclude_id: &str, seed: u64) -> Result<Vec<&CaseRecord>, PromptError> {
        let k = self.examples_per_class;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(4 * k);
        for stage in StageLabel::ALL {
            let pool: Vec<&CaseRecord> = self
                .entries
                .get(&stage)
                .map(|v| v.iter().filter(|c| c.case_id != exclude_id).collect())
                .unwrap_or_default();
            if pool.len() < k {
                return Err(PromptError::InsufficientBank(stage));
            }
            let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), k).into_vec();
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|i| pool[i]));
        }
        Ok(out)
    }
}

/// Reads a case image into a request part.
pub fn read_image(path: &Path) -> Result<ImagePart, PromptError> {
    let mime = mime_for_path(path).ok_or_else(|| PromptError::ImageRead {
        path: path.display().to_string(),
        detail: "unsupported image extension (expected .jpg, .jpeg or .png)".into(),
    })?;
    let bytes = std::fs::read(path)
        .map_err(|e| PromptError::ImageRead { path: path.display().to_string(), detail: e.to_string() })?;
    Ok(ImagePart { mime_type: mime.to_string(), bytes })
}

fn note_block(case: &CaseRecord) -> String {
    match &case.clinical_note {
        Some(note) => format!("\n\nClinical note: {note}"),
        None => String::new(),
    }
}

fn stage_constraint() -> Option<Vec<String>> {
    Some(STAGE_ANSWERS.iter().map(|s| s.to_string()).collect())
}

/// Builds [`PromptRequest`]s from a [`TemplateSet`].
#[derive(Debug, Clone)]
pub struct PromptBuilder {
    pub templates: TemplateSet,
    pub max_output_tokens: u32,
    pub temperature: f64,
}

impl Default for PromptBuilder {
    fn default() -> Self {
        Self { templates: TemplateSet::default(), max_output_tokens: 512, temperature: 0.0 }
    }
}

impl PromptBuilder {
    pub fn new(templates: TemplateSet) -> Self {
        Self { templates, ..Self::default() }
    }

    fn request(
        &self,
        user_text: String,
        images: Vec<ImagePart>,
        support_examples: Vec<SupportExample>,
        decode_constraint: Option<Vec<String>>,
    ) -> PromptRequest {
        PromptRequest {
            system_text: self.templates.preamble().to_string(),
            user_text,
            images,
            support_examples,
            decode_constraint,
            max_output_tokens: self.max_output_tokens,
            temperature: self.temperature,
        }
    }

    fn render(&self, id: &str, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        self.templates.get(id).render(bindings)
    }

    pub fn build_zero_shot(&self, case: &CaseRecord) -> Result<PromptRequest, PromptError> {
        let image = read_image(&case.image_path)?;
        let text = self.render("zero_shot", &[("note_block", &note_block(case))])?;
        Ok(self.request(text, vec![image], vec![], stage_constraint()))
    }

    pub fn build_few_shot(
        &self,
        case: &CaseRecord,
        bank: &FewShotBank,
        seed: u64,
        multi_image: bool,
    ) -> Result<PromptRequest, PromptError> {
        if !multi_image {
            return Err(PromptError::MultiImageUnsupported);
        }
        let selected = bank.select(&case.case_id, seed)?;
        let mut support = Vec::with_capacity(selected.len());
        for example in &selected {
            support.push(SupportExample {
                image: read_image(&example.image_path)?,
                label: example.true_stage.to_string(),
            });
        }
        let labels: Vec<String> = selected.iter().map(|c| c.true_stage.to_string()).collect();
        let count = support.len().to_string();
        let joined = labels.join(", ");
        let text = self.render(
            "few_shot",
            &[("example_count", &count), ("example_labels", &joined), ("note_block", &note_block(case))],
        )?;
        let image = read_image(&case.image_path)?;
        Ok(self.request(text, vec![image], support, stage_constraint()))
    }

    pub fn build_cot(
        &self,
        case: &CaseRecord,
        stage_definitions: &BTreeMap<StageLabel, String>,
    ) -> Result<PromptRequest, PromptError> {
        let mut lines = Vec::with_capacity(4);
        for stage in StageLabel::ALL {
            let def = stage_definitions.get(&stage).ok_or(PromptError::MissingDefinition(stage))?;
            lines.push(format!("{stage}: {def}"));
        }
        let definitions = lines.join("\n");
        let image = read_image(&case.image_path)?;
        let text = self.render("cot", &[("note_block", &note_block(case)), ("definitions", &definitions)])?;
        Ok(self.request(text, vec![image], vec![], None))
    }

    pub fn build_generator_prompt(&self, case: &CaseRecord) -> Result<PromptRequest, PromptError> {
        let image = read_image(&case.image_path)?;
        let text = self.generator_text(case)?;
        Ok(self.request(text, vec![image], vec![], None))
    }

    fn generator_text(&self, case: &CaseRecord) -> Result<String, PromptError> {
        self.render("generator", &[("note_block", &note_block(case))])
    }

    pub fn build_critique_prompt(
        &self,
        case: &CaseRecord,
        prior: &StagePrediction,
    ) -> Result<PromptRequest, PromptError> {
        let image = read_image(&case.image_path)?;
        let text = self.render(
            "critique",
            &[
                ("note_block", &note_block(case)),
                ("prior_stage", prior.stage.roman()),
                ("prior_rationale", &prior.rationale),
            ],
        )?;
        Ok(self.request(text, vec![image], vec![], None))
    }

    pub fn build_feedback_prompt(
        &self,
        case: &CaseRecord,
        prior: &StagePrediction,
        critique_text: &str,
    ) -> Result<PromptRequest, PromptError> {
        if critique_text.trim().is_empty() {
            return Err(PromptError::EmptyCritique);
        }
        let image = read_image(&case.image_path)?;
        let generator = self.generator_text(case)?;
        let prior_answer = format_prediction(prior);
        let text = self.render(
            "feedback",
            &[("generator_prompt", &generator), ("prior_answer", &prior_answer), ("critique", critique_text)],
        )?;
        Ok(self.request(text, vec![image], vec![], None))
    }

    pub fn build_rationale_prompt(
        &self,
        case: &CaseRecord,
        fixed_stage: StageLabel,
    ) -> Result<PromptRequest, PromptError> {
        let image = read_image(&case.image_path)?;
        let text = self.render("rationale", &[("stage", fixed_stage.roman()), ("note_block", &note_block(case))])?;
        Ok(self.request(text, vec![image], vec![], None))
    }

    /// Follow-up request asking for a bare stage after an unparseable reply.
    pub fn build_reask(&self, original: &PromptRequest, previous_reply: &str) -> Result<PromptRequest, PromptError> {
        let text = self.render(
            "reask",
            &[("original_prompt", &original.user_text), ("previous_reply", previous_reply)],
        )?;
        let mut req = original.clone();
        req.user_text = text;
        req.decode_constraint = stage_constraint();
        Ok(req)
    }
}

/// Slots each built-in template declares; used to validate overrides.
pub fn declared_slots(set: &TemplateSet) -> BTreeMap<String, BTreeSet<String>> {
    TEMPLATE_IDS
        .iter()
        .map(|id| (id.to_string(), set.get(id).slots.iter().cloned().collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::PredictionSource;
    use std::path::PathBuf;

    fn case_in(dir: &Path, id: &str, stage: StageLabel, bytes: &[u8]) -> CaseRecord {
        let path = dir.join(format!("{id}.jpg"));
        std::fs::write(&path, bytes).unwrap();
        CaseRecord {
            case_id: id.to_string(),
            image_path: path,
            true_stage: stage,
            clinical_note: None,
            source_split: None,
        }
    }

    fn prediction(stage: StageLabel, rationale: &str) -> StagePrediction {
        StagePrediction {
            stage,
            rationale: rationale.to_string(),
            raw_model_text: String::new(),
            source: PredictionSource::GeneratorInitial,
        }
    }

    #[test]
    fn template_rendering_rules() {
        let t = PromptTemplate::parse("t", "", "a {x} b {y} {x}").unwrap();
        assert_eq!(t.slots, vec!["x", "y"]);
        assert_eq!(t.render(&[("x", "1"), ("y", "{z}")]).unwrap(), "a 1 b {z} 1");
        assert!(matches!(t.render(&[("x", "1")]), Err(PromptError::UnboundSlot { slot, .. }) if slot == "y"));
        assert!(PromptTemplate::parse("t", "", "oops {x").is_err());
        assert!(PromptTemplate::parse("t", "", "oops }").is_err());
        assert!(PromptTemplate::parse("t", "", "bad {X}").is_err());
    }

    #[test]
    fn zero_shot_shape() {
        let dir = tempfile::tempdir().unwrap();
        let a = case_in(dir.path(), "a", StageLabel::I, b"aaa");
        let b = case_in(dir.path(), "b", StageLabel::III, b"bbbb");
        let pb = PromptBuilder::default();
        let ra = pb.build_zero_shot(&a).unwrap();
        let rb = pb.build_zero_shot(&b).unwrap();
        assert_eq!(ra.images.len(), 1);
        assert!(ra.support_examples.is_empty());
        assert!(ra.user_text.contains("What is the stage of this pressure ulcer?"));
        assert!(ra.system_text.starts_with("You are a wound expert"));
        assert_eq!(ra.user_text, rb.user_text);
        assert_eq!(ra.system_text, rb.system_text);
        assert_ne!(ra.images[0].bytes, rb.images[0].bytes);
    }

    #[test]
    fn missing_image_is_read_error() {
        let case = CaseRecord {
            case_id: "x".into(),
            image_path: PathBuf::from("/nonexistent/x.jpg"),
            true_stage: StageLabel::I,
            clinical_note: None,
            source_split: None,
        };
        assert!(matches!(PromptBuilder::default().build_zero_shot(&case), Err(PromptError::ImageRead { .. })));
    }

    #[test]
    fn few_shot_selection() {
        let dir = tempfile::tempdir().unwrap();
        let mut cases = Vec::new();
        for (i, stage) in StageLabel::ALL.iter().cycle().take(20).enumerate() {
            cases.push(case_in(dir.path(), &format!("c{i:02}"), *stage, &[i as u8]));
        }
        let query = cases[0].clone();
        let pb = PromptBuilder::default();

        let bank = FewShotBank::from_cases(2, &cases);
        let req = pb.build_few_shot(&query, &bank, 7, true).unwrap();
        assert_eq!(req.support_examples.len(), 8);
        assert_eq!(req.images.len(), 1);
        let labels: Vec<&str> = req.support_examples.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(
            labels,
            ["Stage I", "Stage I", "Stage II", "Stage II", "Stage III", "Stage III", "Stage IV", "Stage IV"]
        );
        let again = pb.build_few_shot(&query, &bank, 7, true).unwrap();
        assert_eq!(req, again);
        for seed in 0..50 {
            let picked = bank.select(&query.case_id, seed).unwrap();
            assert!(picked.iter().all(|c| c.case_id != query.case_id));
        }

        let bank1 = FewShotBank::from_cases(1, &cases);
        assert_eq!(pb.build_few_shot(&query, &bank1, 7, true).unwrap().support_examples.len(), 4);

        assert_eq!(pb.build_few_shot(&query, &bank, 7, false), Err(PromptError::MultiImageUnsupported));

        let thin: Vec<CaseRecord> = cases
            .iter()
            .filter(|c| c.true_stage != StageLabel::III)
            .cloned()
            .chain(cases.iter().find(|c| c.true_stage == StageLabel::III).cloned())
            .collect();
        let thin_bank = FewShotBank::from_cases(2, &thin);
        assert_eq!(
            pb.build_few_shot(&query, &thin_bank, 7, true),
            Err(PromptError::InsufficientBank(StageLabel::III))
        );
    }

    #[test]
    fn cot_definitions_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let case = case_in(dir.path(), "a", StageLabel::II, b"x");
        let pb = PromptBuilder::default();
        let defs = pb.templates.stage_definitions().clone();
        let req = pb.build_cot(&case, &defs).unwrap();
        let mut last = 0;
        for stage in StageLabel::ALL {
            let pos = req.user_text.find(defs[&stage].as_str()).expect("definition present");
            assert!(pos > last);
            last = pos;
        }
        let features = req.user_text.find("Describe the visual features").unwrap();
        let diagnosis = req.user_text.find("diagnosis").unwrap();
        assert!(features < req.user_text.find(defs[&StageLabel::I].as_str()).unwrap());
        assert!(last < diagnosis);

        let mut partial = defs.clone();
        partial.remove(&StageLabel::IV);
        assert_eq!(pb.build_cot(&case, &partial), Err(PromptError::MissingDefinition(StageLabel::IV)));
    }

    #[test]
    fn generator_layout() {
        let dir = tempfile::tempdir().unwrap();
        let case = case_in(dir.path(), "a", StageLabel::II, b"x");
        let pb = PromptBuilder::default();
        let r1 = pb.build_generator_prompt(&case).unwrap();
        let r2 = pb.build_generator_prompt(&case).unwrap();
        assert!(r1.user_text.contains("Stage:") && r1.user_text.contains("Rationale:"));
        assert_eq!(r1.user_text, r2.user_text);
        assert!(r1.system_text.starts_with("You are a wound expert."));
    }

    #[test]
    fn critique_includes_prior_and_ok_token() {
        let dir = tempfile::tempdir().unwrap();
        let case = case_in(dir.path(), "a", StageLabel::III, b"x");
        let pb = PromptBuilder::default();
        let req = pb.build_critique_prompt(&case, &prediction(StageLabel::IV, "slough and depth")).unwrap();
        assert!(req.user_text.contains("Stage: IV"));
        assert!(req.user_text.contains("slough and depth"));
        assert!(req.user_text.contains("reply with exactly: OK"));
        assert_eq!(req.images.len(), 1);
    }

    #[test]
    fn feedback_embeds_critique() {
        let dir = tempfile::tempdir().unwrap();
        let case = case_in(dir.path(), "a", StageLabel::III, b"x");
        let pb = PromptBuilder::default();
        let prior = prediction(StageLabel::IV, "slough and depth");
        let critique = "no bone or tendon visible; consider Stage III";
        let req = pb.build_feedback_prompt(&case, &prior, critique).unwrap();
        let block_start = req.user_text.find("<<<CRITIQUE").unwrap();
        let block_end = req.user_text.find("CRITIQUE>>>").unwrap();
        let inside = &req.user_text[block_start..block_end];
        assert!(inside.contains(critique));
        assert!(req.user_text.contains("slough and depth"));
        assert!(req.user_text.contains("Stage: IV"));
        assert!(req.user_text.contains("What is the stage of this pressure ulcer?"));
        assert_eq!(pb.build_feedback_prompt(&case, &prior, "  "), Err(PromptError::EmptyCritique));
    }

    #[test]
    fn rationale_sentence() {
        let dir = tempfile::tempdir().unwrap();
        let case = case_in(dir.path(), "a", StageLabel::III, b"x");
        let pb = PromptBuilder::default();
        let req = pb.build_rationale_prompt(&case, StageLabel::III).unwrap();
        assert_eq!(req.user_text, "The stage of this wound is III. For the given image, provide a rationale!");
        assert_eq!(req.decode_constraint, None);
        assert_eq!(req.images.len(), 1);
        let req = pb.build_rationale_prompt(&case, StageLabel::I).unwrap();
        assert_eq!(req.user_text, "The stage of this wound is I. For the given image, provide a rationale!");
    }

    #[test]
    fn clinical_note_is_included() {
        let dir = tempfile::tempdir().unwrap();
        let mut case = case_in(dir.path(), "a", StageLabel::III, b"x");
        case.clinical_note = Some("sacral wound, 3 weeks".into());
        let pb = PromptBuilder::default();
        let req = pb.build_generator_prompt(&case).unwrap();
        assert!(req.user_text.contains("Clinical note: sacral wound, 3 weeks"));
    }

    #[test]
    fn builtin_templates_bind_every_slot() {
        let set = TemplateSet::default();
        let slots = declared_slots(&set);
        assert!(slots["critique"].contains("prior_rationale"));
        assert_eq!(set.stage_definitions().len(), 4);
    }

    #[test]
    fn template_dir_override() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("zero_shot.txt"), "Which stage?{note_block}").unwrap();
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        assert_eq!(set.get("zero_shot").body_with_slots, "Which stage?{note_block}");
        assert_eq!(set.get("generator"), TemplateSet::default().get("generator"));

        std::fs::write(dir.path().join("cot.txt"), "broken {").unwrap();
        assert!(TemplateSet::load_dir(dir.path()).is_err());
    }
}
