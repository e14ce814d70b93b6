//! Low-rank adaptation at desk scale.
//!
//! A [`LoraLayer`] holds a frozen weight `W` and trainable factors `A`
//! (`r x d_in`) and `B` (`d_out x r`); its output is `Wx + s * B(Ax)`.
//! The rest of the module is what is needed to check that math: a merged
//! forward pass, the autoregressive LM loss, central finite-difference
//! gradient checks and a small AdamW training loop on a toy next-token task.
//!
//! Checkpoint layout (all little-endian):
//!
//! ```text
//! u32 header_len | header_len bytes of JSON | u64 d_out | u64 d_in | u64 rank
//! | f64 W (d_out*d_in) | f64 A (rank*d_in) | f64 B (d_out*rank)
//! ```
//!
//! Matrices are row-major.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities are clamped to this before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_RANK: usize = 8;

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("rank must be positive")]
    ZeroRank,
    #[error("rank {rank} exceeds min(d_out, d_in) = {max}")]
    RankTooLarge { rank: usize, max: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("epsilon must be positive and finite")]
    InvalidEpsilon,
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LoraError> {
        if data.len() != rows * cols {
            return Err(LoraError::DimensionMismatch(format!("{} values for {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, LoraError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LoraError::DimensionMismatch("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    /// Entries uniform in `[-scale, scale)`.
    pub fn random(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension");
        self.data.chunks(self.cols.max(1)).take(self.rows).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    /// `self^T y`.
    pub fn t_matvec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "t_matvec dimension");
        let mut out = vec![0.0; self.cols];
        for (r, yr) in y.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += self.get(r, c) * yr;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    /// `self += alpha * u v^T`.
    fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        for (i, ui) in u.iter().enumerate() {
            for (j, vj) in v.iter().enumerate() {
                self.data[i * self.cols + j] += alpha * ui * vj;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    w: Matrix,
    a: Matrix,
    b: Matrix,
    rank: usize,
    scaling: f64,
}

impl LoraLayer {
    /// Random `A`, zero `B`, scaling 1.
    pub fn new(w: Matrix, rank: usize, rng: &mut impl Rng) -> Result<Self, LoraError> {
        check_rank(rank, w.rows, w.cols)?;
        let a = Matrix::random(rank, w.cols, 1.0 / (w.cols as f64).sqrt(), rng);
        let b = Matrix::zeros(w.rows, rank);
        Ok(Self { w, a, b, rank, scaling: 1.0 })
    }

    pub fn from_parts(w: Matrix, a: Matrix, b: Matrix, scaling: f64) -> Result<Self, LoraError> {
        let rank = a.rows;
        check_rank(rank, w.rows, w.cols)?;
        if a.cols != w.cols || b.rows != w.rows || b.cols != rank {
            return Err(LoraError::DimensionMismatch(format!(
                "W {}x{}, A {}x{}, B {}x{}",
                w.rows, w.cols, a.rows, a.cols, b.rows, b.cols
            )));
        }
        Ok(Self { w, a, b, rank, scaling })
    }

    pub fn with_scaling(mut self, scaling: f64) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn d_in(&self) -> usize {
        self.w.cols
    }

    pub fn d_out(&self) -> usize {
        self.w.rows
    }

    pub fn trainable_params(&self) -> usize {
        self.a.data.len() + self.b.data.len()
    }

    /// `Wx + s * B(Ax)` without forming `BA`.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let ax = self.a.matvec(x);
        let bax = self.b.matvec(&ax);
        self.w.matvec(x).into_iter().zip(bax).map(|(h, d)| h + self.scaling * d).collect()
    }

    /// `W + s * BA`.
    pub fn merge(&self) -> Matrix {
        let mut merged = self.w.clone();
        let ba = self.b.matmul(&self.a);
        for (m, d) in merged.data.iter_mut().zip(&ba.data) {
            *m += self.scaling * d;
        }
        merged
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            d_out: self.d_out(),
            d_in: self.d_in(),
            rank: self.rank,
            scaling: self.scaling,
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for dim in [self.d_out(), self.d_in(), self.rank] {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for m in [&self.w, &self.a, &self.b] {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LoraError> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let header_len = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap()) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(cursor.take(header_len)?).map_err(|e| LoraError::Checkpoint(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT || header.version != 1 {
            return Err(LoraError::Checkpoint(format!("unsupported {} v{}", header.format, header.version)));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = u64::from_le_bytes(cursor.take(8)?.try_into().unwrap()) as usize;
        }
        if dims != [header.d_out, header.d_in, header.rank] {
            return Err(LoraError::Checkpoint("header and binary dims disagree".into()));
        }
        let [d_out, d_in, rank] = dims;
        let mut read = |rows: usize, cols: usize| -> Result<Matrix, LoraError> {
            let n = rows.checked_mul(cols).ok_or_else(|| LoraError::Checkpoint("dims overflow".into()))?;
            let raw = cursor.take(n.checked_mul(8).ok_or_else(|| LoraError::Checkpoint("dims overflow".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Matrix::from_vec(rows, cols, data)
        };
        let w = read(d_out, d_in)?;
        let a = read(rank, d_in)?;
        let b = read(d_out, rank)?;
        if cursor.pos != bytes.len() {
            return Err(LoraError::Checkpoint("trailing bytes".into()));
        }
        Self::from_parts(w, a, b, header.scaling)
    }

    pub fn save(&self, path: &Path) -> Result<(), LoraError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LoraError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn check_rank(rank: usize, d_out: usize, d_in: usize) -> Result<(), LoraError> {
    if rank == 0 {
        return Err(LoraError::ZeroRank);
    }
    let max = d_out.min(d_in);
    if rank > max {
        return Err(LoraError::RankTooLarge { rank, max });
    }
    Ok(())
}

const CHECKPOINT_FORMAT: &str = "lora-layer";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    d_out: usize,
    d_in: usize,
    rank: usize,
    scaling: f64,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LoraError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| LoraError::Checkpoint("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySequenceBatch {
    sequences: Vec<Vec<usize>>,
    vocab_size: usize,
}

impl ToySequenceBatch {
    pub fn new(sequences: Vec<Vec<usize>>, vocab_size: usize) -> Result<Self, LoraError> {
        if vocab_size == 0 {
            return Err(LoraError::InvalidBatch("vocab_size must be positive".into()));
        }
        if sequences.is_empty() || sequences.iter().any(|s| s.is_empty()) {
            return Err(LoraError::InvalidBatch("sequences must be non-empty".into()));
        }
        if let Some(t) = sequences.iter().flatten().find(|t| **t >= vocab_size) {
            return Err(LoraError::InvalidBatch(format!("token {t} >= vocab_size {vocab_size}")));
        }
        Ok(Self { sequences, vocab_size })
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

/// Sum over tokens of `-ln p(y_t | y_<t)`, averaged over sequences.
/// `probs` maps a prefix to a distribution over the vocabulary.
pub fn lm_loss<F>(mut probs: F, batch: &ToySequenceBatch) -> f64
where
    F: FnMut(&[usize]) -> Vec<f64>,
{
    let total: f64 = batch
        .sequences
        .iter()
        .map(|seq| (0..seq.len()).map(|t| -probs(&seq[..t])[seq[t]].max(PROB_FLOOR).ln()).sum::<f64>())
        .sum();
    total / batch.sequences.len() as f64
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// A scalar loss of a layer's trainable factors with analytic gradients.
pub trait DifferentiableLoss {
    fn loss(&self, layer: &LoraLayer) -> f64;
    /// Gradients with respect to `A` and `B`.
    fn gradients(&self, layer: &LoraLayer) -> (Matrix, Matrix);
}

/// Accumulates the gradient of one output-gradient `g` at input `x`.
fn accumulate(layer: &LoraLayer, x: &[f64], g: &[f64], weight: f64, da: &mut Matrix, db: &mut Matrix) {
    let s = layer.scaling * weight;
    let ax = layer.a.matvec(x);
    db.add_outer(s, g, &ax);
    let btg = layer.b.t_matvec(g);
    da.add_outer(s, &btg, x);
}

/// `0.5 * |h(x) - target|^2`, summed over examples.
#[derive(Debug, Clone)]
pub struct QuadraticLoss {
    pub examples: Vec<(Vec<f64>, Vec<f64>)>,
}

impl DifferentiableLoss for QuadraticLoss {
    fn loss(&self, layer: &LoraLayer) -> f64 {
        self.examples
            .iter()
            .map(|(x, t)| 0.5 * layer.forward(x).iter().zip(t).map(|(h, t)| (h - t).powi(2)).sum::<f64>())
            .sum()
    }

    fn gradients(&self, layer: &LoraLayer) -> (Matrix, Matrix) {
        let mut da = Matrix::zeros(layer.a.rows, layer.a.cols);
        let mut db = Matrix::zeros(layer.b.rows, layer.b.cols);
        for (x, t) in &self.examples {
            let g: Vec<f64> = layer.forward(x).iter().zip(t).map(|(h, t)| h - t).collect();
            accumulate(layer, x, &g, 1.0, &mut da, &mut db);
        }
        (da, db)
    }
}

/// Next-token model over a tiny vocabulary: the input at step `t` is a fixed
/// embedding of the previous token (a start vector at `t = 0`), the layer
/// maps it to logits, and a softmax gives the distribution.
#[derive(Debug, Clone)]
pub struct ToyLm {
    /// `d_in x (vocab + 1)`; the last column is the start vector.
    embeddings: Matrix,
    batch: ToySequenceBatch,
}

impl ToyLm {
    pub fn new(embeddings: Matrix, batch: ToySequenceBatch) -> Result<Self, LoraError> {
        if embeddings.cols != batch.vocab_size + 1 {
            return Err(LoraError::DimensionMismatch(format!(
                "embeddings have {} columns, need vocab + 1 = {}",
                embeddings.cols,
                batch.vocab_size + 1
            )));
        }
        Ok(Self { embeddings, batch })
    }

    /// A separable task: each sequence is `[c, label(c)]` over a vocabulary
    /// of `2 * classes` tokens, with random embeddings of width `d_in`.
    pub fn classification_task(classes: usize, repeats: usize, d_in: usize, seed: u64) -> Result<Self, LoraError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = 2 * classes;
        let sequences = (0..repeats).flat_map(|_| (0..classes).map(|c| vec![c, classes + (c + 1) % classes])).collect();
        let batch = ToySequenceBatch::new(sequences, vocab)?;
        Self::new(Matrix::random(d_in, vocab + 1, 1.0, &mut rng), batch)
    }

    pub fn batch(&self) -> &ToySequenceBatch {
        &self.batch
    }

    pub fn d_in(&self) -> usize {
        self.embeddings.rows
    }

    pub fn vocab_size(&self) -> usize {
        self.batch.vocab_size
    }

    fn input(&self, prefix: &[usize]) -> Vec<f64> {
        let col = prefix.last().copied().unwrap_or(self.batch.vocab_size);
        (0..self.embeddings.rows).map(|r| self.embeddings.get(r, col)).collect()
    }

    pub fn probs(&self, layer: &LoraLayer, prefix: &[usize]) -> Vec<f64> {
        softmax(&layer.forward(&self.input(prefix)))
    }
}

impl DifferentiableLoss for ToyLm {
    fn loss(&self, layer: &LoraLayer) -> f64 {
        lm_loss(|prefix| self.probs(layer, prefix), &self.batch)
    }

    fn gradients(&self, layer: &LoraLayer) -> (Matrix, Matrix) {
        let mut da = Matrix::zeros(layer.a.rows, layer.a.cols);
        let mut db = Matrix::zeros(layer.b.rows, layer.b.cols);
        let weight = 1.0 / self.batch.sequences.len() as f64;
        for seq in &self.batch.sequences {
            for t in 0..seq.len() {
                let x = self.input(&seq[..t]);
                let mut g = softmax(&layer.forward(&x));
                g[seq[t]] -= 1.0;
                accumulate(layer, &x, &g, weight, &mut da, &mut db);
            }
        }
        (da, db)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub entries_checked: usize,
}

fn param_mut(layer: &mut LoraLayer, target: u8, offset: usize) -> &mut f64 {
    if target == 0 {
        &mut layer.a.data[offset]
    } else {
        &mut layer.b.data[offset]
    }
}

/// Compares analytic gradients with central differences on sampled entries
/// of `A` and `B` (at least 20, or all of them when there are fewer).
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(
    layer: &LoraLayer,
    loss: &impl DifferentiableLoss,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport, LoraError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(LoraError::InvalidEpsilon);
    }
    let (da, db) = loss.gradients(layer);
    let n_a = layer.a.data.len();
    let total = n_a + layer.b.data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, total, samples.max(20).min(total));
    let mut probe = layer.clone();
    let mut worst = 0.0f64;
    for flat in picks.iter() {
        let (analytic, target) = if flat < n_a { (da.data[flat], 0) } else { (db.data[flat - n_a], 1) };
        let offset = if target == 0 { flat } else { flat - n_a };
        let original = *param_mut(&mut probe, target, offset);
        *param_mut(&mut probe, target, offset) = original + epsilon;
        let plus = loss.loss(&probe);
        *param_mut(&mut probe, target, offset) = original - epsilon;
        let minus = loss.loss(&probe);
        *param_mut(&mut probe, target, offset) = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(GradCheckReport { max_relative_error: worst, entries_checked: picks.len() })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 200, lr: 2e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Cosine decay from `lr` at step 0 towards 0 at `steps`.
pub fn cosine_lr(base: f64, step: usize, steps: usize) -> f64 {
    if steps == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos())
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: usize, cfg: &TrainConfig) {
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grads[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
        }
    }
}

/// AdamW with cosine decay on `A` and `B` only. Returns the loss measured
/// before each step.
pub fn toy_train(layer: &mut LoraLayer, task: &impl DifferentiableLoss, config: &TrainConfig) -> Vec<f64> {
    let mut adam_a = AdamState::new(layer.a.data.len());
    let mut adam_b = AdamState::new(layer.b.data.len());
    let mut trajectory = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        trajectory.push(task.loss(layer));
        let (da, db) = task.gradients(layer);
        let lr = cosine_lr(config.lr, step, config.steps);
        adam_a.step(&mut layer.a.data, &da.data, lr, step + 1, config);
        adam_b.step(&mut layer.b.data, &db.data, lr, step + 1, config);
    }
    trajectory
}

pub fn trajectory_csv(trajectory: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in trajectory.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}
