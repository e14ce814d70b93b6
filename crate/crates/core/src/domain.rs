//! Shared vocabulary: stage labels, wound cases, predictions and the
//! dataset manifest loader.
//!
//! Manifests are sidecar files that reference images by path. Two formats
//! are accepted:
//!
//! * CSV with header `case_id,image_path,stage,note` (an optional `split`
//!   column carries a pre-assigned fold tag)
//! * JSONL, one object per line with the same keys
//!
//! Relative image paths are resolved against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("manifest file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest row at line {line}: {detail}")]
    MalformedRow { line: usize, detail: String },
    #[error("unknown stage token {0:?}")]
    UnknownStage(String),
    #[error("duplicate case id {0:?}")]
    DuplicateCaseId(String),
    #[error("image file missing or unreadable: {0}")]
    MissingImage(PathBuf),
    #[error("unknown manifest format {0:?} (expected csv or jsonl)")]
    UnknownFormat(String),
}

/// Pressure-ulcer severity stage. Ordered from least to most severe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageLabel {
    I,
    II,
    III,
    IV,
}

impl StageLabel {
    pub const ALL: [StageLabel; 4] = [StageLabel::I, StageLabel::II, StageLabel::III, StageLabel::IV];

    /// Roman numeral without the "Stage" prefix.
    pub fn roman(self) -> &'static str {
        match self {
            StageLabel::I => "I",
            StageLabel::II => "II",
            StageLabel::III => "III",
            StageLabel::IV => "IV",
        }
    }

    /// Zero-based position in severity order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<StageLabel> {
        Self::ALL.get(idx).copied()
    }
}

/// Canonical rendering: `Stage I` .. `Stage IV`.
impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Stage {}", self.roman())
    }
}

impl FromStr for StageLabel {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_stage_token(s)
    }
}

/// Strict stage token parser.
///
/// Accepts (case-insensitively, after trimming) a roman numeral, an arabic
/// numeral 1-4, or either form prefixed by `Stage `.
pub fn parse_stage_token(token: &str) -> Result<StageLabel, DomainError> {
    let trimmed = token.trim();
    let lower = trimmed.to_ascii_lowercase();
    let body = match lower.strip_prefix("stage") {
        // "stage" must be followed by whitespace; "stageiii" is not accepted.
        Some(rest) if rest.starts_with(char::is_whitespace) => rest.trim_start(),
        Some(_) => return Err(DomainError::UnknownStage(token.to_string())),
        None => lower.as_str(),
    };
    match body {
        "i" | "1" => Ok(StageLabel::I),
        "ii" | "2" => Ok(StageLabel::II),
        "iii" | "3" => Ok(StageLabel::III),
        "iv" | "4" => Ok(StageLabel::IV),
        _ => Err(DomainError::UnknownStage(token.to_string())),
    }
}

/// One wound case from the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub image_path: PathBuf,
    pub true_stage: StageLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clinical_note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    cases: Vec<CaseRecord>,
    class_counts: BTreeMap<StageLabel, usize>,
}

impl DatasetManifest {
    /// Builds a manifest from already-validated cases, deriving class counts.
    ///
    /// Fails on duplicate case ids. Image existence is not checked here; that
    /// belongs to [`load_manifest`].
    pub fn from_cases(cases: Vec<CaseRecord>) -> Result<Self, DomainError> {
        let mut seen = HashSet::with_capacity(cases.len());
        let mut class_counts: BTreeMap<StageLabel, usize> =
            StageLabel::ALL.iter().map(|s| (*s, 0)).collect();
        for case in &cases {
            if !seen.insert(case.case_id.as_str()) {
                return Err(DomainError::DuplicateCaseId(case.case_id.clone()));
            }
            *class_counts.entry(case.true_stage).or_default() += 1;
        }
        Ok(Self { cases, class_counts })
    }

    pub fn cases(&self) -> &[CaseRecord] {
        &self.cases
    }

    pub fn class_counts(&self) -> &BTreeMap<StageLabel, usize> {
        &self.class_counts
    }

    pub fn count(&self, stage: StageLabel) -> usize {
        self.class_counts.get(&stage).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn get(&self, case_id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }
}

/// Where a prediction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSource {
    GeneratorInitial,
    GeneratorRevised,
    DecoupledRationale,
}

/// A parsed stage together with its rationale and the raw model text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePrediction {
    pub stage: StageLabel,
    pub rationale: String,
    pub raw_model_text: String,
    pub source: PredictionSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestFormat {
    Csv,
    Jsonl,
}

impl FromStr for ManifestFormat {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ManifestFormat::Csv),
            "jsonl" => Ok(ManifestFormat::Jsonl),
            other => Err(DomainError::UnknownFormat(other.to_string())),
        }
    }
}

impl ManifestFormat {
    /// Guesses the format from a file extension; defaults to CSV.
    pub fn from_path(path: &Path) -> ManifestFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("jsonl") => ManifestFormat::Jsonl,
            _ => ManifestFormat::Csv,
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawRow {
    case_id: Option<String>,
    image_path: Option<String>,
    stage: Option<String>,
    #[serde(default)]
    note: Option<String>,
    #[serde(default)]
    split: Option<String>,
}

/// Loads and validates a manifest, preserving row order.
pub fn load_manifest(path: &Path, format: ManifestFormat) -> Result<DatasetManifest, DomainError> {
    let text = std::fs::read_to_string(path).map_err(|_| DomainError::MissingFile(path.to_path_buf()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let rows = match format {
        ManifestFormat::Csv => read_csv_rows(&text)?,
        ManifestFormat::Jsonl => read_jsonl_rows(&text)?,
    };

    let mut cases = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        let case_id = required(row.case_id, line, "case_id")?;
        let image = required(row.image_path, line, "image_path")?;
        let stage_token = required(row.stage, line, "stage")?;
        let true_stage = parse_stage_token(&stage_token)?;
        let image_path = resolve(&base, &image);
        if !std::fs::metadata(&image_path).map(|m| m.is_file()).unwrap_or(false) {
            return Err(DomainError::MissingImage(image_path));
        }
        cases.push(CaseRecord {
            case_id,
            image_path,
            true_stage,
            clinical_note: row.note.filter(|n| !n.trim().is_empty()),
            source_split: row.split.filter(|s| !s.trim().is_empty()),
        });
    }
    DatasetManifest::from_cases(cases)
}

fn required(value: Option<String>, line: usize, field: &str) -> Result<String, DomainError> {
    match value {
        Some(v) if !v.trim().is_empty() => Ok(v.trim().to_string()),
        _ => Err(DomainError::MalformedRow { line, detail: format!("missing {field}") }),
    }
}

fn resolve(base: &Path, image: &str) -> PathBuf {
    let p = PathBuf::from(image);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn read_csv_rows(text: &str) -> Result<Vec<(usize, RawRow)>, DomainError> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| DomainError::MalformedRow { line: 1, detail: e.to_string() })?
        .clone();
    let mut out = Vec::new();
    for result in reader.records() {
        let record = result.map_err(|err| DomainError::MalformedRow {
            line: err.position().map(|p| p.line() as usize).unwrap_or(0),
            detail: err.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: RawRow = record
            .deserialize(Some(&headers))
            .map_err(|e| DomainError::MalformedRow { line, detail: e.to_string() })?;
        out.push((line, row));
    }
    Ok(out)
}

fn read_jsonl_rows(text: &str) -> Result<Vec<(usize, RawRow)>, DomainError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: RawRow = serde_json::from_str(line)
            .map_err(|e| DomainError::MalformedRow { line: idx + 1, detail: e.to_string() })?;
        out.push((idx + 1, row));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn touch(dir: &Path, name: &str) {
        std::fs::write(dir.join(name), b"\xff\xd8\xff").unwrap();
    }

    #[test]
    fn stage_tokens() {
        assert_eq!(parse_stage_token("Stage III").unwrap(), StageLabel::III);
        assert_eq!(parse_stage_token("iv").unwrap(), StageLabel::IV);
        assert_eq!(parse_stage_token("  2 ").unwrap(), StageLabel::II);
        assert_eq!(parse_stage_token("stage   1").unwrap(), StageLabel::I);
        assert!(matches!(parse_stage_token("Stage V"), Err(DomainError::UnknownStage(t)) if t == "Stage V"));
        assert!(parse_stage_token("").is_err());
        assert!(parse_stage_token("StageIII").is_err());
        assert!(parse_stage_token("IIII").is_err());
    }

    #[test]
    fn canonical_format_round_trip() {
        for token in ["I", "1", "Stage I", "ii", "2", "stage ii", "III", "3", "STAGE III", "iv", "4", "Stage IV"] {
            let stage = parse_stage_token(token).unwrap();
            let rendered = stage.to_string();
            assert!(rendered.starts_with("Stage "));
            assert_eq!(parse_stage_token(&rendered).unwrap(), stage);
        }
    }

    #[test]
    fn ordering_follows_severity() {
        assert!(StageLabel::I < StageLabel::II);
        assert!(StageLabel::III < StageLabel::IV);
    }

    #[test]
    fn csv_manifest_one_per_class() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["a.jpg", "b.jpg", "c.jpg", "d.jpg"] {
            touch(dir.path(), n);
        }
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            "case_id,image_path,stage,note\nc1,a.jpg,I,\nc2,b.jpg,II,some note\nc3,c.jpg,III,\nc4,d.jpg,IV,\n",
        )
        .unwrap();
        let m = load_manifest(&path, ManifestFormat::Csv).unwrap();
        assert_eq!(m.len(), 4);
        for s in StageLabel::ALL {
            assert_eq!(m.count(s), 1);
        }
        assert_eq!(m.cases()[1].clinical_note.as_deref(), Some("some note"));
        assert_eq!(m.cases()[0].clinical_note, None);
        assert_eq!(m.cases()[2].case_id, "c3");
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.jpg");
        let path = dir.path().join("m.csv");

        std::fs::write(&path, "case_id,image_path,stage,note\nc1,a.jpg,V,\n").unwrap();
        assert_eq!(load_manifest(&path, ManifestFormat::Csv), Err(DomainError::UnknownStage("V".into())));

        std::fs::write(&path, "case_id,image_path,stage,note\nc1,a.jpg,I,\nc1,a.jpg,II,\n").unwrap();
        assert_eq!(load_manifest(&path, ManifestFormat::Csv), Err(DomainError::DuplicateCaseId("c1".into())));

        std::fs::write(&path, "case_id,image_path,stage,note\nc1,nope.jpg,I,\n").unwrap();
        assert!(matches!(load_manifest(&path, ManifestFormat::Csv), Err(DomainError::MissingImage(_))));

        std::fs::write(&path, "case_id,image_path,stage,note\nc1,a.jpg,I,\nc2,a.jpg\n").unwrap();
        assert!(matches!(
            load_manifest(&path, ManifestFormat::Csv),
            Err(DomainError::MalformedRow { line: 3, .. })
        ));

        std::fs::write(&path, "case_id,image_path,stage,note\n,a.jpg,I,\n").unwrap();
        assert!(matches!(
            load_manifest(&path, ManifestFormat::Csv),
            Err(DomainError::MalformedRow { line: 2, .. })
        ));

        assert!(matches!(
            load_manifest(&dir.path().join("absent.csv"), ManifestFormat::Csv),
            Err(DomainError::MissingFile(_))
        ));
    }

    #[test]
    fn jsonl_manifest() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        let path = dir.path().join("m.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"case_id":"x","image_path":"a.png","stage":"Stage IV","note":null}}"#).unwrap();
        writeln!(f).unwrap();
        writeln!(f, r#"{{"case_id":"y","image_path":"a.png","stage":"1"}}"#).unwrap();
        writeln!(f, r#"{{"case_id":"z","image_path":"a.png""#).unwrap();
        drop(f);
        assert!(matches!(
            load_manifest(&path, ManifestFormat::Jsonl),
            Err(DomainError::MalformedRow { line: 4, .. })
        ));

        let text = std::fs::read_to_string(&path).unwrap();
        let fixed: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        std::fs::write(&path, fixed).unwrap();
        let m = load_manifest(&path, ManifestFormat::Jsonl).unwrap();
        assert_eq!(m.count(StageLabel::IV), 1);
        assert_eq!(m.count(StageLabel::I), 1);
        assert_eq!(m.count(StageLabel::II), 0);
    }

    #[test]
    fn full_size_manifest_counts() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "img.jpg");
        let mut csv = String::from("case_id,image_path,stage,note\n");
        let mut id = 0;
        for (stage, n) in [("I", 230), ("II", 313), ("III", 275), ("IV", 273)] {
            for _ in 0..n {
                csv.push_str(&format!("p{id:04},img.jpg,{stage},\n"));
                id += 1;
            }
        }
        let path = dir.path().join("cases.csv");
        std::fs::write(&path, csv).unwrap();
        let m = load_manifest(&path, ManifestFormat::Csv).unwrap();
        assert_eq!(m.count(StageLabel::I), 230);
        assert_eq!(m.count(StageLabel::II), 313);
        assert_eq!(m.count(StageLabel::III), 275);
        assert_eq!(m.count(StageLabel::IV), 273);
        assert_eq!(m.class_counts().values().sum::<usize>(), 1091);
        assert_eq!(m.len(), 1091);

        // deterministic: same file, same serialized bytes
        let again = load_manifest(&path, ManifestFormat::Csv).unwrap();
        assert_eq!(serde_json::to_vec(&m).unwrap(), serde_json::to_vec(&again).unwrap());
    }
}
