//! Classification metrics, stratified k-fold splitting and evaluation
//! reports.
//!
//! Rows of a [`ConfusionMatrix`] are true stages, columns are predicted
//! stages. Replies that could not be parsed are kept in a separate per-class
//! counter: they lower accuracy and recall but never count as a prediction
//! of any class.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DatasetManifest, StageLabel};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("k must be positive")]
    InvalidK,
    #[error("{stage} has {count} cases, fewer than k = {k}")]
    ClassTooSmall { stage: StageLabel, count: usize, k: usize },
    #[error("length mismatch: {truths} labels vs {predictions} predictions")]
    LengthMismatch { truths: usize, predictions: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 4]; 4],
    pub unparseable_by_true: [u64; 4],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [[u64; 4]; 4]) -> Self {
        Self { counts, unparseable_by_true: [0; 4] }
    }

    pub fn from_pairs(truths: &[StageLabel], predictions: &[Option<StageLabel>]) -> Result<Self, MetricsError> {
        if truths.len() != predictions.len() {
            return Err(MetricsError::LengthMismatch { truths: truths.len(), predictions: predictions.len() });
        }
        let mut cm = Self::new();
        for (t, p) in truths.iter().zip(predictions) {
            cm.record(*t, *p);
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: StageLabel, predicted: Option<StageLabel>) {
        match predicted {
            Some(p) => self.counts[truth.index()][p.index()] += 1,
            None => self.unparseable_by_true[truth.index()] += 1,
        }
    }

    pub fn get(&self, truth: StageLabel, predicted: StageLabel) -> u64 {
        self.counts[truth.index()][predicted.index()]
    }

    pub fn unparseable_count(&self) -> u64 {
        self.unparseable_by_true.iter().sum()
    }

    /// Parsed predictions only.
    pub fn grand_total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Every scored case, parsed or not.
    pub fn scored(&self) -> u64 {
        self.grand_total() + self.unparseable_count()
    }

    pub fn trace(&self) -> u64 {
        (0..4).map(|i| self.counts[i][i]).sum()
    }

    /// True cases of `stage`, including unparseable ones.
    pub fn support(&self, stage: StageLabel) -> u64 {
        self.counts[stage.index()].iter().sum::<u64>() + self.unparseable_by_true[stage.index()]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted,I,II,III,IV,unparseable\n");
        for stage in StageLabel::ALL {
            let row = &self.counts[stage.index()];
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                stage.roman(),
                row[0],
                row[1],
                row[2],
                row[3],
                self.unparseable_by_true[stage.index()]
            );
        }
        out
    }
}

/// A ratio with a flag for the 0/0 case, which scores 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

impl Score {
    pub fn ratio(num: f64, den: f64) -> Self {
        if den == 0.0 {
            Score { value: 0.0, degenerate: true }
        } else {
            Score { value: num / den, degenerate: false }
        }
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Score {
    Score::ratio(cm.trace() as f64, cm.scored() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub stage: StageLabel,
    pub precision: Score,
    pub recall: Score,
    pub f1: Score,
    pub support: u64,
}

/// One-vs-rest precision, recall and F1 for `stage`.
pub fn precision_recall_f1(cm: &ConfusionMatrix, stage: StageLabel) -> ClassMetrics {
    let i = stage.index();
    let tp = cm.counts[i][i] as f64;
    let predicted: u64 = (0..4).map(|r| cm.counts[r][i]).sum();
    let support = cm.support(stage);
    let precision = Score::ratio(tp, predicted as f64);
    let recall = Score::ratio(tp, support as f64);
    let f1 = Score::ratio(2.0 * precision.value * recall.value, precision.value + recall.value);
    ClassMetrics { stage, precision, recall, f1, support }
}

pub fn per_class(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    StageLabel::ALL.iter().map(|s| precision_recall_f1(cm, *s)).collect()
}

/// Unweighted mean of the four class F1 values; degenerate when the matrix
/// holds no cases at all.
pub fn macro_f1(cm: &ConfusionMatrix) -> Score {
    let sum: f64 = per_class(cm).iter().map(|c| c.f1.value).sum();
    Score { value: sum / 4.0, degenerate: cm.scored() == 0 }
}

/// Support-weighted mean of class F1 values.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Score {
    let classes = per_class(cm);
    let num: f64 = classes.iter().map(|c| c.f1.value * c.support as f64).sum();
    let den: u64 = classes.iter().map(|c| c.support).sum();
    Score::ratio(num, den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeverityDirection {
    pub over_staged: u64,
    pub under_staged: u64,
}

pub fn severity_direction(cm: &ConfusionMatrix) -> SeverityDirection {
    let mut dir = SeverityDirection { over_staged: 0, under_staged: 0 };
    for t in 0..4 {
        for p in 0..4 {
            if p > t {
                dir.over_staged += cm.counts[t][p];
            } else if p < t {
                dir.under_staged += cm.counts[t][p];
            }
        }
    }
    dir
}

/// Mean and sample standard deviation; the flag is false when n < 2, in
/// which case the deviation is reported as 0.
pub fn mean_stdev(samples: &[f64]) -> (f64, f64, bool) {
    let n = samples.len();
    if n == 0 {
        return (0.0, 0.0, false);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0, false);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt(), true)
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    /// 1-based.
    pub fold_id: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Per class: shuffle with a seeded PRNG, cut into `k` test chunks of
/// `floor(n / k)` and give the remainder to the last chunk. Classes are
/// processed in stage order from one PRNG stream. Ids within a fold keep
/// manifest order. `k = 1` puts every case in the single test set.
pub fn stratified_kfold(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<Fold>, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    for stage in StageLabel::ALL {
        let n = manifest.count(stage);
        // an absent class is simply absent from every fold
        if n > 0 && n < k {
            return Err(MetricsError::ClassTooSmall { stage, count: n, k });
        }
    }
    let position: HashMap<&str, usize> =
        manifest.cases().iter().enumerate().map(|(i, c)| (c.case_id.as_str(), i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; manifest.len()];
    for stage in StageLabel::ALL {
        let mut ids: Vec<usize> = manifest
            .cases()
            .iter()
            .filter(|c| c.true_stage == stage)
            .map(|c| position[c.case_id.as_str()])
            .collect();
        ids.shuffle(&mut rng);
        let chunk = ids.len() / k;
        for (j, idx) in ids.into_iter().enumerate() {
            fold_of[idx] = (j / chunk.max(1)).min(k - 1);
        }
    }
    let folds = (0..k)
        .map(|f| {
            let (mut train_ids, mut test_ids) = (Vec::new(), Vec::new());
            for (i, case) in manifest.cases().iter().enumerate() {
                if fold_of[i] == f {
                    test_ids.push(case.case_id.clone());
                } else {
                    train_ids.push(case.case_id.clone());
                }
            }
            Fold { fold_id: f + 1, train_ids, test_ids }
        })
        .collect();
    Ok(folds)
}

/// `(train, test)` per stage per fold.
pub fn fold_table(manifest: &DatasetManifest, folds: &[Fold]) -> BTreeMap<StageLabel, Vec<(usize, usize)>> {
    let stage_of: HashMap<&str, StageLabel> =
        manifest.cases().iter().map(|c| (c.case_id.as_str(), c.true_stage)).collect();
    let count = |ids: &[String], stage: StageLabel| ids.iter().filter(|id| stage_of.get(id.as_str()) == Some(&stage)).count();
    StageLabel::ALL
        .iter()
        .map(|s| (*s, folds.iter().map(|f| (count(&f.train_ids, *s), count(&f.test_ids, *s))).collect()))
        .collect()
}

pub fn render_fold_table(manifest: &DatasetManifest, folds: &[Fold]) -> String {
    let table = fold_table(manifest, folds);
    let mut out = format!("{:<10}{:>7}", "Stage", "Total");
    for f in folds {
        let _ = write!(out, "{:>14}", format!("Fold {}", f.fold_id));
    }
    out.push('\n');
    let mut totals = vec![(0, 0); folds.len()];
    for (stage, cells) in &table {
        let _ = write!(out, "{:<10}{:>7}", stage.to_string(), manifest.count(*stage));
        for (i, (train, test)) in cells.iter().enumerate() {
            totals[i].0 += train;
            totals[i].1 += test;
            let _ = write!(out, "{:>14}", format!("{train} / {test}"));
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<10}{:>7}", "Total", manifest.len());
    for (train, test) in totals {
        let _ = write!(out, "{:>14}", format!("{train} / {test}"));
    }
    out.push('\n');
    out
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold_id: usize,
    pub confusion: ConfusionMatrix,
    pub accuracy: Score,
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: Score,
    pub weighted_f1: Score,
    pub severity: SeverityDirection,
}

impl FoldMetrics {
    pub fn from_confusion(fold_id: usize, confusion: ConfusionMatrix) -> Self {
        Self {
            fold_id,
            accuracy: accuracy(&confusion),
            per_class: per_class(&confusion),
            macro_f1: macro_f1(&confusion),
            weighted_f1: weighted_f1(&confusion),
            severity: severity_direction(&confusion),
            confusion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub stdev: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(samples: &[f64]) -> Self {
        let (mean, stdev, _) = mean_stdev(samples);
        MeanStd { mean, stdev, n: samples.len() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    pub weighted_f1: MeanStd,
    pub per_class_f1: BTreeMap<StageLabel, MeanStd>,
    pub unparseable_total: u64,
}

impl Aggregate {
    /// Means over per-fold values, not pooled counts.
    pub fn from_folds(folds: &[FoldMetrics]) -> Self {
        let collect = |f: &dyn Fn(&FoldMetrics) -> f64| MeanStd::of(&folds.iter().map(f).collect::<Vec<_>>());
        Self {
            accuracy: collect(&|m| m.accuracy.value),
            macro_f1: collect(&|m| m.macro_f1.value),
            weighted_f1: collect(&|m| m.weighted_f1.value),
            per_class_f1: StageLabel::ALL
                .iter()
                .map(|s| (*s, collect(&|m| m.per_class[s.index()].f1.value)))
                .collect(),
            unparseable_total: folds.iter().map(|m| m.confusion.unparseable_count()).sum(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub mode: String,
    pub config_snapshot: String,
    pub started_at: String,
    pub finished_at: String,
    pub backend_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_fold: Vec<FoldMetrics>,
    pub aggregate: Aggregate,
    pub run_metadata: RunMetadata,
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

impl EvalReport {
    pub fn new(per_fold: Vec<FoldMetrics>, run_metadata: RunMetadata) -> Self {
        let aggregate = Aggregate::from_folds(&per_fold);
        Self { per_fold, aggregate, run_metadata }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Plain-text table; a pure function of the report contents.
    pub fn render_text(&self) -> String {
        let meta = &self.run_metadata;
        let mut out = String::new();
        let _ = writeln!(out, "mode: {}", meta.mode);
        let _ = writeln!(out, "backends: {}", meta.backend_ids.join(", "));
        let _ = writeln!(out, "started: {}  finished: {}", meta.started_at, meta.finished_at);
        out.push('\n');
        let _ = writeln!(
            out,
            "{:<6}{:>10}{:>10}{:>13}{:>13}{:>7}{:>7}",
            "fold", "acc(%)", "F1(%)", "wF1(%)", "unparseable", "over", "under"
        );
        for f in &self.per_fold {
            let _ = writeln!(
                out,
                "{:<6}{:>10}{:>10}{:>13}{:>13}{:>7}{:>7}",
                f.fold_id,
                pct(f.accuracy.value),
                pct(f.macro_f1.value),
                pct(f.weighted_f1.value),
                f.confusion.unparseable_count(),
                f.severity.over_staged,
                f.severity.under_staged
            );
        }
        let a = &self.aggregate;
        out.push('\n');
        let _ = writeln!(out, "accuracy   {} ± {} %", pct(a.accuracy.mean), pct(a.accuracy.stdev));
        let _ = writeln!(out, "macro F1   {} ± {} %", pct(a.macro_f1.mean), pct(a.macro_f1.stdev));
        let _ = writeln!(out, "weighted F1 {} ± {} %", pct(a.weighted_f1.mean), pct(a.weighted_f1.stdev));
        for (stage, m) in &a.per_class_f1 {
            let _ = writeln!(out, "  F1 {:<10} {} ± {} %", stage.to_string(), pct(m.mean), pct(m.stdev));
        }
        for f in &self.per_fold {
            let _ = writeln!(out, "\nconfusion matrix, fold {} (rows true, columns predicted)", f.fold_id);
            out.push_str(&f.confusion.to_csv());
        }
        out
    }
}
