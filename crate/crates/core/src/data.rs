//! Synthetic sequence-labelling tasks with planted structure, held-out
//! splitting, and the `SYND` dataset file format.
//!
//! Two task kinds are provided:
//!
//! * **context**: labels depend only on frames `t − k_L` and `t + k_R`, so a
//!   network can only fit them if its receptive field covers those offsets;
//! * **rank**: labels come from a rank-`r` linear map of the current frame, so
//!   any bottleneck of width `≥ r` suffices and narrower ones cannot.

use std::fs;
use std::path::Path;

use crate::error::{NasError, Result};
use crate::numeric::{dot, Matrix, Rng, SeqTensor};

const MAGIC: &[u8; 4] = b"SYND";
const VERSION: u32 = 1;

/// Which planted structure a synthetic task carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Context,
    Rank,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "context" | "planted-context" => Some(TaskKind::Context),
            "rank" | "planted-rank" => Some(TaskKind::Rank),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Context => "context",
            TaskKind::Rank => "rank",
        }
    }
}

/// Parameters of a synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub num_sequences: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub left_offset: usize,
    pub right_offset: usize,
    pub rank: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            kind: TaskKind::Context,
            num_sequences: 200,
            frames: 20,
            feature_dim: 4,
            num_classes: 4,
            left_offset: 2,
            right_offset: 3,
            rank: 2,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_sequences == 0 || self.frames == 0 || self.feature_dim == 0 || self.num_classes < 2 {
            return Err(NasError::value(
                "task needs at least one sequence, one frame, one feature and two classes",
            ));
        }
        if self.kind == TaskKind::Rank && (self.rank == 0 || self.rank > self.feature_dim) {
            return Err(NasError::value(format!(
                "rank {} must lie in 1..={}",
                self.rank, self.feature_dim
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(NasError::value("noise must be finite and non-negative"));
        }
        Ok(())
    }

    /// Generates the task from its own seed.
    pub fn generate(&self) -> Result<Dataset> {
        let mut rng = Rng::new(self.seed, crate::numeric::streams::DATA);
        match self.kind {
            TaskKind::Context => gen_context_task(self, &mut rng),
            TaskKind::Rank => gen_rank_task(self, &mut rng),
        }
    }
}

/// One labelled sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub features: SeqTensor,
    pub labels: Vec<usize>,
}

/// A list of labelled sequences sharing feature dimension and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(sequences: Vec<Sequence>, num_classes: usize) -> Result<Self> {
        let d = Dataset { sequences, num_classes };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.sequences.first() else {
            return Ok(());
        };
        let dim = first.features.dim();
        for (i, s) in self.sequences.iter().enumerate() {
            if s.features.dim() != dim {
                return Err(NasError::shape(format!("feature dim {dim}"), format!("sequence {i} dim {}", s.features.dim())));
            }
            if s.labels.len() != s.features.frames() {
                return Err(NasError::shape(
                    format!("{} frames", s.features.frames()),
                    format!("{} labels in sequence {i}", s.labels.len()),
                ));
            }
            if let Some(&bad) = s.labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(NasError::value(format!("label {bad} outside 0..{}", self.num_classes)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Feature dimension, or 0 for an empty dataset.
    pub fn feature_dim(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.features.dim())
    }

    pub fn num_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.labels.len()).sum()
    }

    /// Sub-dataset with the given sequence indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }
}

fn random_frames(frames: usize, dim: usize, rng: &mut Rng) -> SeqTensor {
    let data = (0..frames * dim).map(|_| rng.draw_normal()).collect();
    SeqTensor::from_vec(frames, dim, data).expect("positive sizes")
}

fn unit_rows(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::random_normal(rows, cols, 1.0, rng);
    for i in 0..rows {
        let norm = dot(m.row(i), m.row(i)).sqrt();
        m.row_mut(i).iter_mut().for_each(|v| *v /= norm);
    }
    m
}

fn argmax_projection(w: &Matrix, x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for k in 0..w.rows() {
        let v = dot(w.row(k), x);
        if v > best_v {
            best = k;
            best_v = v;
        }
    }
    best
}

/// Labels are the argmax of fixed unit-norm projections of `[x_{t−k_L}; x_{t+k_R}]`
/// (edge frames replicated).
pub fn gen_context_task(spec: &SyntheticTaskSpec, rng: &mut Rng) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.feature_dim;
    let proj = unit_rows(spec.num_classes, 2 * d, rng);
    let mut sequences = Vec::with_capacity(spec.num_sequences);
    let mut spliced = vec![0.0; 2 * d];
    for _ in 0..spec.num_sequences {
        let x = random_frames(spec.frames, d, rng);
        let last = spec.frames - 1;
        let labels = (0..spec.frames)
            .map(|t| {
                let tl = t.saturating_sub(spec.left_offset);
                let tr = (t + spec.right_offset).min(last);
                spliced[..d].copy_from_slice(x.frame(tl));
                spliced[d..].copy_from_slice(x.frame(tr));
                argmax_projection(&proj, &spliced)
            })
            .collect();
        sequences.push(Sequence { features: x, labels });
    }
    Dataset::new(sequences, spec.num_classes)
}

/// Labels are the argmax of `V Uᵀ x_t + b + σ·ε` with `U` of size `D×r`.
pub fn gen_rank_task(spec: &SyntheticTaskSpec, rng: &mut Rng) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.feature_dim;
    let r = spec.rank;
    let k = spec.num_classes;
    let u = Matrix::random_normal(r, d, 1.0 / (d as f64).sqrt(), rng);
    let v = Matrix::random_normal(k, r, 2.0, rng);
    let b: Vec<f64> = (0..k).map(|_| 0.1 * rng.draw_normal()).collect();
    let mut sequences = Vec::with_capacity(spec.num_sequences);
    let mut code = vec![0.0; r];
    let mut logits = vec![0.0; k];
    for _ in 0..spec.num_sequences {
        let x = random_frames(spec.frames, d, rng);
        let labels = (0..spec.frames)
            .map(|t| {
                for (j, c) in code.iter_mut().enumerate() {
                    *c = dot(u.row(j), x.frame(t));
                }
                for (i, l) in logits.iter_mut().enumerate() {
                    *l = dot(v.row(i), &code) + b[i] + spec.noise * rng.draw_normal();
                }
                crate::numeric::argmax(&logits)
            })
            .collect();
        sequences.push(Sequence { features: x, labels });
    }
    Dataset::new(sequences, k)
}

/// Uniform random partition by sequence into (train, held-out). The held-out
/// part has `round(fraction · N)` sequences; both parts keep the original order.
pub fn split_heldout(d: &Dataset, fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(NasError::value(format!("held-out fraction {fraction} must lie in (0, 1)")));
    }
    let n = d.len();
    let held = (fraction * n as f64).round() as usize;
    if held == 0 || held >= n {
        return Err(NasError::value(format!(
            "fraction {fraction} of {n} sequences leaves an empty part"
        )));
    }
    let perm = rng.permutation(n);
    let mut is_held = vec![false; n];
    for &i in &perm[..held] {
        is_held[i] = true;
    }
    let train: Vec<usize> = (0..n).filter(|&i| !is_held[i]).collect();
    let heldout: Vec<usize> = (0..n).filter(|&i| is_held[i]).collect();
    Ok((d.subset(&train), d.subset(&heldout)))
}

/// Serialises a dataset in the `SYND` format.
pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>> {
    d.validate()?;
    let frames = d.sequences.first().map_or(0, |s| s.labels.len());
    if d.sequences.iter().any(|s| s.labels.len() != frames) {
        return Err(NasError::value("all sequences must have the same length to be saved"));
    }
    let dim = d.feature_dim();
    let mut out = Vec::with_capacity(24 + d.len() * frames * (dim * 8 + 4));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for count in [d.len(), frames, dim, d.num_classes] {
        let c = u32::try_from(count).map_err(|_| NasError::value(format!("count {count} exceeds u32")))?;
        out.extend_from_slice(&c.to_le_bytes());
    }
    for s in &d.sequences {
        for v in s.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &s.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(NasError::Format {
                offset: self.pos,
                reason: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a `SYND` byte buffer.
pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(NasError::Format {
            offset: 0,
            reason: "bad magic, expected SYND".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(NasError::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let n = r.u32("sequence count")? as usize;
    let frames = r.u32("frame count")? as usize;
    let dim = r.u32("feature dim")? as usize;
    let classes = r.u32("class count")? as usize;
    if n > 0 && (frames == 0 || dim == 0) {
        return Err(NasError::Format {
            offset: 12,
            reason: "zero frames or features".into(),
        });
    }
    let mut sequences = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        let mut data = Vec::with_capacity(frames * dim);
        for _ in 0..frames * dim {
            let start = r.pos;
            let v = r.f64(&format!("features of sequence {i}"))?;
            if !v.is_finite() {
                return Err(NasError::Format {
                    offset: start,
                    reason: "non-finite feature".into(),
                });
            }
            data.push(v);
        }
        let mut labels = Vec::with_capacity(frames);
        for _ in 0..frames {
            let start = r.pos;
            let l = r.u32(&format!("labels of sequence {i}"))? as usize;
            if l >= classes {
                return Err(NasError::Format {
                    offset: start,
                    reason: format!("label {l} outside 0..{classes}"),
                });
            }
            labels.push(l);
        }
        let features = SeqTensor::from_vec(frames, dim, data).expect("checked sizes");
        sequences.push(Sequence { features, labels });
    }
    if r.pos != bytes.len() {
        return Err(NasError::Format {
            offset: r.pos,
            reason: "trailing bytes".into(),
        });
    }
    Dataset::new(sequences, classes)
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(d)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
