//! Frame-level cross-entropy, momentum SGD, candidate retraining, evaluation,
//! and the `TDNF` checkpoint format.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{Dataset, Sequence};
use crate::error::{NasError, Result};
use crate::layer::{FactoredLayer, LayerChoice, ContextBlock};
use crate::numeric::{mix_seed, streams, Matrix, Rng, RngState, SeqTensor};
use crate::supernet::{
    CandidateArchitecture, CandidateNetwork, Classifier, NetworkGrads, NetworkShape, SearchSpaceSpec,
};

const MAGIC: &[u8; 4] = b"TDNF";
const VERSION: u32 = 1;

/// Optimiser and schedule settings shared by search and retraining.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_layers: f64,
    pub lr_arch: f64,
    pub momentum: f64,
    /// Sequences per minibatch.
    pub batch_size: usize,
    /// Epochs used when retraining candidates.
    pub epochs: usize,
    pub seed: u64,
    /// Apply the semi-orthogonal step after every this many layer updates.
    pub orth_period: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_layers: 0.05,
            lr_arch: 0.01,
            momentum: 0.9,
            batch_size: 8,
            epochs: 3,
            seed: 0,
            orth_period: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_layers > 0.0 && self.lr_arch > 0.0) || !self.lr_layers.is_finite() || !self.lr_arch.is_finite() {
            return Err(NasError::value("learning rates must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NasError::value(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(NasError::value("batch size must be at least 1"));
        }
        Ok(())
    }

    /// Minibatches of sequence indices for one epoch; `salt` separates
    /// schedules that share a seed.
    pub fn epoch_batches(&self, n: usize, salt: u64) -> Vec<Vec<usize>> {
        let order = Rng::new(mix_seed(self.seed, salt), streams::ORDER).permutation(n);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Mean over frames of `−log softmax(logits)[label]`, and its gradient
/// `(softmax − onehot) / frames`.
pub fn cross_entropy_loss(logits: &SeqTensor, labels: &[usize]) -> Result<(f64, SeqTensor)> {
    if labels.len() != logits.frames() {
        return Err(NasError::shape(
            format!("{} frames", logits.frames()),
            format!("{} labels", labels.len()),
        ));
    }
    let k = logits.dim();
    let frames = logits.frames() as f64;
    let mut grad = SeqTensor::zeros(logits.frames(), k);
    let mut total = 0.0;
    for (t, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(NasError::value(format!("label {label} outside 0..{k}")));
        }
        let z = logits.frame(t);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_norm = max + sum.ln();
        total += log_norm - z[label];
        for (g, v) in grad.frame_mut(t).iter_mut().zip(z) {
            *g = (v - log_norm).exp() / frames;
        }
        grad.frame_mut(t)[label] -= 1.0 / frames;
    }
    Ok((total / frames, grad))
}

/// `m ← μ·m + g; p ← p − lr·m`, array by array.
pub fn sgd_momentum_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    momenta: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != momenta.len() {
        return Err(NasError::shape(
            format!("{} parameter arrays", params.len()),
            format!("{} gradients, {} momenta", grads.len(), momenta.len()),
        ));
    }
    for (i, ((p, g), m)) in params.iter_mut().zip(grads).zip(momenta.iter_mut()).enumerate() {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(NasError::shape(
                format!("array {i} of {}", p.len()),
                format!("gradient {} / momentum {}", g.len(), m.len()),
            ));
        }
        for ((p, g), m) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()) {
            *m = momentum * *m + g;
            *p -= lr * *m;
        }
    }
    Ok(())
}

/// Zero momentum buffers shaped like the given gradients.
pub fn zero_momenta(grads: &NetworkGrads) -> Vec<Vec<f64>> {
    grads.slices().iter().map(|s| vec![0.0; s.len()]).collect()
}

/// Anything that maps a feature sequence to per-frame class logits.
pub trait Model: Sync {
    fn logits(&self, x: &SeqTensor) -> Result<SeqTensor>;
}

impl Model for CandidateNetwork {
    fn logits(&self, x: &SeqTensor) -> Result<SeqTensor> {
        self.forward(x)
    }
}

/// Mean frame loss and frame accuracy; sequences are scored in parallel and
/// summed in index order.
pub fn evaluate<M: Model>(model: &M, data: &Dataset) -> Result<(f64, f64)> {
    let per_seq: Vec<(f64, usize, usize)> = data
        .sequences
        .par_iter()
        .map(|s| {
            let logits = model.logits(&s.features)?;
            let (loss, _) = cross_entropy_loss(&logits, &s.labels)?;
            let correct = (0..logits.frames())
                .filter(|&t| crate::numeric::argmax(logits.frame(t)) == s.labels[t])
                .count();
            Ok((loss * s.labels.len() as f64, correct, s.labels.len()))
        })
        .collect::<Result<_>>()?;
    let (mut loss, mut correct, mut frames) = (0.0, 0usize, 0usize);
    for (l, c, f) in per_seq {
        loss += l;
        correct += c;
        frames += f;
    }
    if frames == 0 {
        return Err(NasError::value("cannot evaluate on an empty dataset"));
    }
    Ok((loss / frames as f64, correct as f64 / frames as f64))
}

/// Frame-weighted mean loss of a minibatch and the gradient scale to apply to
/// each sequence's `cross_entropy_loss` gradient.
pub(crate) fn batch_weights(batch: &[&Sequence]) -> (f64, Vec<f64>) {
    let total: usize = batch.iter().map(|s| s.labels.len()).sum();
    let weights = batch.iter().map(|s| s.labels.len() as f64 / total as f64).collect();
    (total as f64, weights)
}

/// Loss and parameter gradients of a standalone network on one minibatch.
pub fn candidate_batch_gradient(net: &CandidateNetwork, batch: &[&Sequence]) -> Result<(f64, NetworkGrads)> {
    let (_, weights) = batch_weights(batch);
    let mut loss = 0.0;
    let mut acc: Option<NetworkGrads> = None;
    for (s, w) in batch.iter().zip(weights) {
        let (logits, cache) = net.forward_with_cache(&s.features)?;
        let (l, mut d) = cross_entropy_loss(&logits, &s.labels)?;
        d.data_mut().iter_mut().for_each(|v| *v *= w);
        loss += w * l;
        let g = net.backward(&cache, &d)?;
        match acc.as_mut() {
            Some(a) => a.add_scaled(&g, 1.0),
            None => acc = Some(g),
        }
    }
    let grads = acc.ok_or_else(|| NasError::value("empty minibatch"))?;
    Ok((loss, grads))
}

/// Applies the semi-orthogonal step to every layer's linear factor.
pub fn constrain_layers(layers: &mut [FactoredLayer]) -> Result<()> {
    for l in layers {
        l.semi_orthogonal_step()?;
    }
    Ok(())
}

/// A retrained candidate and its held-out loss.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrainResult {
    pub network: CandidateNetwork,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Trains a candidate from a fresh seeded initialisation and scores it on `val`.
pub fn retrain_candidate(
    cand: &CandidateArchitecture,
    space: &SearchSpaceSpec,
    shape: NetworkShape,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<RetrainResult> {
    cfg.validate()?;
    if train.is_empty() && cfg.epochs > 0 {
        return Err(NasError::Training {
            step: 0,
            reason: "empty training data".into(),
        });
    }
    let mut rng = Rng::new(cfg.seed, streams::RETRAIN);
    let mut net = CandidateNetwork::random(cand, space, shape, &mut rng)?;
    let mut momenta: Option<Vec<Vec<f64>>> = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for batch in cfg.epoch_batches(train.len(), epoch as u64) {
            let seqs: Vec<&Sequence> = batch.iter().map(|&i| &train.sequences[i]).collect();
            let (loss, grads) = candidate_batch_gradient(&net, &seqs)?;
            if !loss.is_finite() {
                return Err(NasError::Training {
                    step,
                    reason: format!("non-finite loss {loss}"),
                });
            }
            let m = momenta.get_or_insert_with(|| zero_momenta(&grads));
            sgd_momentum_step(&mut net.param_slices_mut(), &grads.slices(), m, cfg.lr_layers, cfg.momentum)?;
            step += 1;
            if cfg.orth_period > 0 && step.is_multiple_of(cfg.orth_period) {
                constrain_layers(&mut net.layers)?;
            }
        }
    }
    let (val_loss, val_accuracy) = evaluate(&net, val)?;
    if !val_loss.is_finite() {
        return Err(NasError::Training {
            step,
            reason: "non-finite validation loss".into(),
        });
    }
    Ok(RetrainResult {
        network: net,
        val_loss,
        val_accuracy,
    })
}

/// A bag of named `f64` arrays, stored as `TDNF` files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    arrays: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    /// Appends an array, or replaces the values of one with the same name.
    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) {
        let name = name.into();
        match self.arrays.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = values,
            None => self.arrays.push((name, values)),
        }
    }

    /// Integers are stored bit-for-bit inside the `f64` slots.
    pub fn push_u64s(&mut self, name: impl Into<String>, values: &[u64]) {
        self.push(name, values.iter().map(|&v| f64::from_bits(v)).collect());
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| NasError::State(format!("checkpoint has no array `{name}`")))
    }

    pub fn get_u64s(&self, name: &str) -> Result<Vec<u64>> {
        Ok(self.get(name)?.iter().map(|v| v.to_bits()).collect())
    }

    pub fn get_usizes(&self, name: &str) -> Result<Vec<usize>> {
        self.get_u64s(name)?
            .into_iter()
            .map(|v| usize::try_from(v).map_err(|_| NasError::State(format!("`{name}` entry {v} too large"))))
            .collect()
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        match self.get(name)? {
            [v] => Ok(*v),
            other => Err(NasError::State(format!("`{name}` has {} entries, expected 1", other.len()))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, values) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(NasError::Format {
                    offset: pos,
                    reason: format!("truncated {what}"),
                });
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4, "magic")? != MAGIC {
            return Err(NasError::Format {
                offset: 0,
                reason: "bad magic, expected TDNF".into(),
            });
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(NasError::Format {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let count = u32::from_le_bytes(take(4, "array count")?.try_into().expect("4 bytes"));
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(take(4, "name length")?.try_into().expect("4 bytes")) as usize;
            let name = std::str::from_utf8(take(len, "name")?)
                .map_err(|_| NasError::Format {
                    offset: 0,
                    reason: "array name is not UTF-8".into(),
                })?
                .to_string();
            let n = u64::from_le_bytes(take(8, "value count")?.try_into().expect("8 bytes"));
            let n = usize::try_from(n).ok().filter(|n| n.checked_mul(8).is_some()).ok_or(NasError::Format {
                offset: 0,
                reason: format!("array `{name}` too large"),
            })?;
            let raw = take(n * 8, &format!("values of `{name}`"))?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if ck.get(&name).is_ok() {
                return Err(NasError::Format {
                    offset: 0,
                    reason: format!("duplicate array `{name}`"),
                });
            }
            ck.push(name, values);
        }
        if pos != bytes.len() {
            return Err(NasError::Format {
                offset: pos,
                reason: "trailing bytes".into(),
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::decode(&fs::read(path)?)
    }

    pub fn push_rng(&mut self, name: &str, rng: &Rng) {
        let s = rng.state();
        self.push_u64s(name, &[s.seed, s.stream, s.word_pos as u64, (s.word_pos >> 64) as u64]);
    }

    pub fn get_rng(&self, name: &str) -> Result<Rng> {
        match self.get_u64s(name)?.as_slice() {
            &[seed, stream, lo, hi] => Ok(Rng::from_state(RngState {
                seed,
                stream,
                word_pos: (lo as u128) | ((hi as u128) << 64),
            })),
            other => Err(NasError::State(format!("rng `{name}` has {} entries", other.len()))),
        }
    }

    pub fn push_space(&mut self, space: &SearchSpaceSpec) {
        let mut v = vec![
            space.num_layers as u64,
            space.d_left as u64,
            space.d_right as u64,
            space.search_contexts as u64,
            space.search_dims as u64,
            space.dim_choices.len() as u64,
        ];
        v.extend(space.dim_choices.iter().map(|&d| d as u64));
        v.extend(choices_to_u64s(&space.pinned));
        self.push_u64s("space", &v);
    }

    pub fn get_space(&self) -> Result<SearchSpaceSpec> {
        let v = self.get_usizes("space")?;
        let bad = || NasError::State("malformed `space` array".into());
        let (head, rest) = v.split_at_checked(6).ok_or_else(bad)?;
        let nd = head[5];
        let (dims, pinned) = rest.split_at_checked(nd).ok_or_else(bad)?;
        let space = SearchSpaceSpec {
            num_layers: head[0],
            d_left: head[1],
            d_right: head[2],
            search_contexts: head[3] != 0,
            search_dims: head[4] != 0,
            dim_choices: dims.to_vec(),
            pinned: choices_from_usizes(pinned).ok_or_else(bad)?,
        };
        space.validate()?;
        Ok(space)
    }

    pub fn push_shape(&mut self, shape: NetworkShape) {
        self.push_u64s(
            "shape",
            &[shape.input_dim as u64, shape.hidden_dim as u64, shape.num_classes as u64],
        );
    }

    pub fn get_shape(&self) -> Result<NetworkShape> {
        match self.get_usizes("shape")?.as_slice() {
            &[input_dim, hidden_dim, num_classes] => Ok(NetworkShape {
                input_dim,
                hidden_dim,
                num_classes,
            }),
            _ => Err(NasError::State("malformed `shape` array".into())),
        }
    }

    /// Stores a layer stack and classifier under `prefix`.
    pub fn push_network(&mut self, prefix: &str, layers: &[FactoredLayer], classifier: &Classifier) {
        self.push_u64s(format!("{prefix}.num_layers"), &[layers.len() as u64]);
        for (l, layer) in layers.iter().enumerate() {
            let mut meta = vec![
                layer.in_dim() as u64,
                layer.out_dim() as u64,
                layer.bottleneck() as u64,
                layer.linear.len() as u64,
                layer.affine.len() as u64,
            ];
            meta.extend(layer.linear.iter().map(|b| b.offset as u64));
            meta.extend(layer.affine.iter().map(|b| b.offset as u64));
            self.push_u64s(format!("{prefix}.layer{l}.meta"), &meta);
            for (j, b) in layer.linear.iter().enumerate() {
                self.push(format!("{prefix}.layer{l}.linear{j}"), b.weight.data().to_vec());
            }
            for (j, b) in layer.affine.iter().enumerate() {
                self.push(format!("{prefix}.layer{l}.affine{j}"), b.weight.data().to_vec());
            }
            self.push(format!("{prefix}.layer{l}.bias"), layer.bias.clone());
        }
        self.push_u64s(
            format!("{prefix}.classifier.shape"),
            &[classifier.weight.rows() as u64, classifier.weight.cols() as u64],
        );
        self.push(format!("{prefix}.classifier.weight"), classifier.weight.data().to_vec());
        self.push(format!("{prefix}.classifier.bias"), classifier.bias.clone());
    }

    pub fn get_network(&self, prefix: &str) -> Result<(Vec<FactoredLayer>, Classifier)> {
        let bad = |what: &str| NasError::State(format!("malformed `{prefix}` {what}"));
        let n = match self.get_usizes(&format!("{prefix}.num_layers"))?.as_slice() {
            &[n] => n,
            _ => return Err(bad("layer count")),
        };
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            let meta = self.get_usizes(&format!("{prefix}.layer{l}.meta"))?;
            if meta.len() < 5 || meta.len() != 5 + meta[3] + meta[4] {
                return Err(bad("layer metadata"));
            }
            let (din, dout, nb, nl) = (meta[0], meta[1], meta[2], meta[3]);
            let offsets = &meta[5..];
            let block = |name: String, rows: usize, cols: usize, offset: usize| -> Result<ContextBlock> {
                let weight = Matrix::from_vec(rows, cols, self.get(&name)?.to_vec())?;
                Ok(ContextBlock { offset, weight })
            };
            let linear = offsets[..nl]
                .iter()
                .enumerate()
                .map(|(j, &o)| block(format!("{prefix}.layer{l}.linear{j}"), nb, din, o))
                .collect::<Result<Vec<_>>>()?;
            let affine = offsets[nl..]
                .iter()
                .enumerate()
                .map(|(j, &o)| block(format!("{prefix}.layer{l}.affine{j}"), dout, nb, o))
                .collect::<Result<Vec<_>>>()?;
            let bias = self.get(&format!("{prefix}.layer{l}.bias"))?.to_vec();
            if bias.len() != dout {
                return Err(bad("bias"));
            }
            layers.push(FactoredLayer { linear, affine, bias });
        }
        let (rows, cols) = match self.get_usizes(&format!("{prefix}.classifier.shape"))?.as_slice() {
            &[r, c] => (r, c),
            _ => return Err(bad("classifier shape")),
        };
        let weight = Matrix::from_vec(rows, cols, self.get(&format!("{prefix}.classifier.weight"))?.to_vec())?;
        let bias = self.get(&format!("{prefix}.classifier.bias"))?.to_vec();
        if bias.len() != rows {
            return Err(bad("classifier bias"));
        }
        Ok((layers, Classifier { weight, bias }))
    }
}

pub(crate) fn choices_to_u64s(choices: &[LayerChoice]) -> Vec<u64> {
    choices
        .iter()
        .flat_map(|c| [c.left as u64, c.right as u64, c.dim_index as u64])
        .collect()
}

pub(crate) fn choices_from_usizes(v: &[usize]) -> Option<Vec<LayerChoice>> {
    v.len().is_multiple_of(3).then(|| v.chunks(3).map(|c| LayerChoice::new(c[0], c[1], c[2])).collect())
}

/// Checkpoint of a retrained candidate.
pub fn candidate_checkpoint(result: &RetrainResult, space: &SearchSpaceSpec, shape: NetworkShape) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.push_space(space);
    ck.push_shape(shape);
    ck.push_u64s("candidate", &choices_to_u64s(&result.network.candidate.layers));
    ck.push_network("net", &result.network.layers, &result.network.classifier);
    ck.push("val_loss", vec![result.val_loss]);
    ck.push("val_accuracy", vec![result.val_accuracy]);
    ck
}

/// Inverse of [`candidate_checkpoint`].
pub fn candidate_from_checkpoint(ck: &Checkpoint) -> Result<(RetrainResult, SearchSpaceSpec, NetworkShape)> {
    let space = ck.get_space()?;
    let shape = ck.get_shape()?;
    let layers = choices_from_usizes(&ck.get_usizes("candidate")?)
        .ok_or_else(|| NasError::State("malformed candidate".into()))?;
    let candidate = CandidateArchitecture { layers };
    candidate.validate(&space)?;
    let (layers, classifier) = ck.get_network("net")?;
    let network = CandidateNetwork {
        candidate,
        dims: space.dim_choices.clone(),
        layers,
        classifier,
    };
    let result = RetrainResult {
        network,
        val_loss: ck.get_scalar("val_loss")?,
        val_accuracy: ck.get_scalar("val_accuracy")?,
    };
    Ok((result, space, shape))
}
