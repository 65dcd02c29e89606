//! Differentiable architecture search: Softmax and Gumbel-Softmax relaxations,
//! their log α gradients, temperature annealing, the parameter-count penalty,
//! and the joint and pipelined search loops.
//!
//! For one choice group with sensitivities `v_i = ∂L/∂λ_i` the gradients are
//!
//! ```text
//! softmax:  ∂L/∂log α_k = λ_k (v_k − Σ_i λ_i v_i)
//! gumbel:   ∂L/∂log α_k = (1/J) Σ_j λ^j_k (v^j_k − Σ_i λ^j_i v^j_i) / T
//! ```
//!
//! with `λ^j = softmax((log α + G^j) / T)` and `G^j` the retained Gumbel draws.

use std::fmt;
use std::str::FromStr;

use crate::data::{Dataset, Sequence};
use crate::error::{NasError, Result};
use crate::layer::{choice_param_count, LayerChoice};
use crate::numeric::{argmax, mix_seed, stable_softmax, streams, Rng, SeqTensor};
use crate::supernet::{
    gates_for_candidate, gates_for_network, lambda_sensitivities, network_param_count, sample_onehot_uniform,
    ArchitectureWeights, Attribute, CandidateArchitecture, LayerLambdas, NetworkGrads, NetworkShape,
    SearchSpaceSpec, SuperNetwork,
};
use crate::train::{
    batch_weights, constrain_layers, cross_entropy_loss, retrain_candidate, sgd_momentum_step, Checkpoint,
    TrainConfig,
};

/// The four search variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Softmax,
    Gumbel,
    PipeSoftmax,
    PipeGumbel,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Softmax, Method::Gumbel, Method::PipeSoftmax, Method::PipeGumbel];

    pub fn name(self) -> &'static str {
        match self {
            Method::Softmax => "softmax",
            Method::Gumbel => "gumbel",
            Method::PipeSoftmax => "pipe-softmax",
            Method::PipeGumbel => "pipe-gumbel",
        }
    }

    pub fn is_pipelined(self) -> bool {
        matches!(self, Method::PipeSoftmax | Method::PipeGumbel)
    }

    pub fn uses_gumbel(self) -> bool {
        matches!(self, Method::Gumbel | Method::PipeGumbel)
    }
}

impl FromStr for Method {
    type Err = NasError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| NasError::value(format!("unknown method `{s}` (softmax, gumbel, pipe-softmax, pipe-gumbel)")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How parameter counts are scaled before entering the penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyUnit {
    /// Raw parameter counts.
    Params,
    /// Counts divided by the layer's largest candidate count.
    LayerFraction,
}

impl FromStr for PenaltyUnit {
    type Err = NasError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "params" => Ok(PenaltyUnit::Params),
            "layer-fraction" => Ok(PenaltyUnit::LayerFraction),
            _ => Err(NasError::value(format!("unknown penalty unit `{s}` (params, layer-fraction)"))),
        }
    }
}

/// Linear temperature schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule { start: 1.0, end: 0.03 }
    }
}

/// `T = start + (end − start)·step/total`.
pub fn anneal_temperature(schedule: TemperatureSchedule, step: usize, total_steps: usize) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(NasError::value(format!("step {step} outside 0..={total_steps}")));
    }
    if step == total_steps {
        return Ok(schedule.end);
    }
    Ok(schedule.start + (schedule.end - schedule.start) * step as f64 / total_steps as f64)
}

/// Search settings.
#[derive(Debug, Clone, PartialEq)]
pub struct NasConfig {
    pub method: Method,
    /// Gumbel samples per minibatch.
    pub gumbel_samples: usize,
    pub temperature: TemperatureSchedule,
    pub eta: f64,
    pub penalty_unit: PenaltyUnit,
    pub heldout_fraction: f64,
    /// Epochs of joint search, or of stage 1 for pipelined methods.
    pub search_epochs: usize,
    /// Epochs of architecture-only training for pipelined methods.
    pub stage2_epochs: usize,
    pub top_n: usize,
}

impl Default for NasConfig {
    fn default() -> Self {
        NasConfig {
            method: Method::PipeGumbel,
            gumbel_samples: 1,
            temperature: TemperatureSchedule::default(),
            eta: 0.0,
            penalty_unit: PenaltyUnit::LayerFraction,
            heldout_fraction: 0.05,
            search_epochs: 3,
            stage2_epochs: 3,
            top_n: 3,
        }
    }
}

impl NasConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(NasError::value(format!("held-out fraction {} outside (0, 1)", self.heldout_fraction)));
        }
        if self.gumbel_samples == 0 {
            return Err(NasError::value("gumbel_samples must be at least 1"));
        }
        if !(self.temperature.start > 0.0 && self.temperature.end > 0.0) {
            return Err(NasError::value("temperatures must be positive"));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(NasError::value(format!("eta {} must be finite and non-negative", self.eta)));
        }
        if self.top_n == 0 {
            return Err(NasError::value("top_n must be at least 1"));
        }
        Ok(())
    }
}

/// `softmax(log α)`.
pub fn softmax_lambda(log_alpha: &[f64]) -> Result<Vec<f64>> {
    stable_softmax(log_alpha)
}

/// `λ_k (v_k − Σ_i λ_i v_i)`.
pub fn softmax_arch_grad(lambda: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if lambda.len() != v.len() {
        return Err(NasError::shape(format!("λ of {}", lambda.len()), format!("v of {}", v.len())));
    }
    let mean: f64 = lambda.iter().zip(v).map(|(l, v)| l * v).sum();
    Ok(lambda.iter().zip(v).map(|(l, v)| l * (v - mean)).collect())
}

/// `softmax((log α + G) / T)` for given Gumbel draws.
pub fn gumbel_lambda_with_noise(log_alpha: &[f64], noise: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(NasError::value(format!("temperature {temperature} must be positive")));
    }
    if noise.len() != log_alpha.len() {
        return Err(NasError::shape(format!("log α of {}", log_alpha.len()), format!("noise of {}", noise.len())));
    }
    let z: Vec<f64> = log_alpha.iter().zip(noise).map(|(a, g)| (a + g) / temperature).collect();
    stable_softmax(&z)
}

/// Draws fresh Gumbel noise and returns `(λ, G)`.
pub fn gumbel_lambda(log_alpha: &[f64], temperature: f64, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(NasError::value(format!("temperature {temperature} must be positive")));
    }
    let noise: Vec<f64> = log_alpha.iter().map(|_| rng.draw_gumbel()).collect();
    Ok((gumbel_lambda_with_noise(log_alpha, &noise, temperature)?, noise))
}

/// Average over samples `(λ^j, v^j)` of the softmax gradient, divided by `T`.
pub fn gumbel_arch_grad(samples: &[(Vec<f64>, Vec<f64>)], temperature: f64) -> Result<Vec<f64>> {
    let Some(first) = samples.first() else {
        return Err(NasError::value("gumbel gradient needs at least one sample"));
    };
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(NasError::value(format!("temperature {temperature} must be positive")));
    }
    let j = samples.len() as f64;
    let mut out = vec![0.0; first.0.len()];
    for (lambda, v) in samples {
        let g = softmax_arch_grad(lambda, v)?;
        if g.len() != out.len() {
            return Err(NasError::shape(format!("group of {}", out.len()), format!("sample of {}", g.len())));
        }
        for (o, g) in out.iter_mut().zip(g) {
            *o += g / (temperature * j);
        }
    }
    Ok(out)
}

/// Top-1 candidate: per-group argmax of log α, pinned values elsewhere.
pub fn current_choice(space: &SearchSpaceSpec, weights: &ArchitectureWeights) -> CandidateArchitecture {
    let layers = space
        .pinned
        .iter()
        .enumerate()
        .map(|(l, pin)| {
            let mut c = *pin;
            for attr in space.searched_attributes() {
                if let Some(v) = weights.group(l, attr) {
                    attr.set(&mut c, argmax(v));
                }
            }
            c
        })
        .collect();
    CandidateArchitecture { layers }
}

/// Per-choice parameter costs `C_i^l`, each conditioned on the other groups of
/// the layer at their current argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyTable {
    /// Same layout as the λ arrays.
    pub costs: Vec<LayerLambdas>,
}

impl PenaltyTable {
    pub fn compute(
        space: &SearchSpaceSpec,
        shape: NetworkShape,
        weights: &ArchitectureWeights,
        unit: PenaltyUnit,
    ) -> Result<Self> {
        weights.check(space)?;
        let base = current_choice(space, weights);
        let costs = base
            .layers
            .iter()
            .enumerate()
            .map(|(l, &choice)| {
                let (din, dout) = shape.layer_dims(l);
                let scale = match unit {
                    PenaltyUnit::Params => 1.0,
                    PenaltyUnit::LayerFraction => {
                        let widest = LayerChoice::new(space.d_left, space.d_right, space.dim_choices.len() - 1);
                        choice_param_count(din, dout, widest, &space.dim_choices) as f64
                    }
                };
                let mut out = LayerLambdas {
                    left: None,
                    right: None,
                    dim: None,
                };
                for attr in space.searched_attributes() {
                    let v = (0..space.group_size(attr))
                        .map(|i| {
                            let mut c = choice;
                            attr.set(&mut c, i);
                            choice_param_count(din, dout, c, &space.dim_choices) as f64 / scale
                        })
                        .collect();
                    out.set(attr, v);
                }
                out
            })
            .collect();
        Ok(PenaltyTable { costs })
    }

    pub fn cost(&self, layer: usize, attr: Attribute) -> Option<&[f64]> {
        self.costs.get(layer).and_then(|c| c.get(attr))
    }
}

/// `task_loss + η Σ_{l, group, i} λ_i C_i`.
pub fn penalized_loss(task_loss: f64, lambdas: &[LayerLambdas], penalties: &PenaltyTable, eta: f64) -> f64 {
    if eta == 0.0 {
        return task_loss;
    }
    let mut penalty = 0.0;
    for (lam, cost) in lambdas.iter().zip(&penalties.costs) {
        for attr in Attribute::ALL {
            if let (Some(l), Some(c)) = (lam.get(attr), cost.get(attr)) {
                penalty += l.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    task_loss + eta * penalty
}

/// How architecture weights become λ for one evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Relaxation<'a> {
    Softmax,
    /// One flat noise vector (in [`ArchitectureWeights::to_flat`] layout) per sample.
    Gumbel { noise: &'a [Vec<f64>], temperature: f64 },
}

/// Value and gradients of the (penalized) minibatch objective.
#[derive(Debug, Clone)]
pub struct ArchObjective {
    /// Penalized loss averaged over samples.
    pub loss: f64,
    pub task_loss: f64,
    /// Gradient over log α in flat layout.
    pub arch_grad: Vec<f64>,
    /// Layer-parameter gradients averaged over samples.
    pub net_grads: NetworkGrads,
}

/// Evaluates the relaxed super-network on a minibatch and returns loss and
/// gradients for both parameter groups.
pub fn arch_objective(
    net: &SuperNetwork,
    weights: &ArchitectureWeights,
    batch: &[&Sequence],
    relax: Relaxation<'_>,
    penalties: Option<&PenaltyTable>,
    eta: f64,
) -> Result<ArchObjective> {
    let space = &net.space;
    weights.check(space)?;
    if batch.is_empty() {
        return Err(NasError::value("empty minibatch"));
    }
    let base = weights.to_flat();
    let (samples, scale): (Vec<Vec<f64>>, f64) = match relax {
        Relaxation::Softmax => (vec![base.clone()], 1.0),
        Relaxation::Gumbel { noise, temperature } => {
            if noise.is_empty() {
                return Err(NasError::value("gumbel relaxation needs at least one noise sample"));
            }
            if temperature.is_nan() || temperature <= 0.0 {
                return Err(NasError::value(format!("temperature {temperature} must be positive")));
            }
            let mut s = Vec::with_capacity(noise.len());
            for g in noise {
                if g.len() != base.len() {
                    return Err(NasError::shape(format!("{} log α entries", base.len()), format!("noise of {}", g.len())));
                }
                s.push(base.iter().zip(g).map(|(a, g)| (a + g) / temperature).collect());
            }
            (s, 1.0 / temperature)
        }
    };
    let j = samples.len() as f64;
    let (_, seq_weights) = batch_weights(batch);
    let mut scaled = weights.clone();
    let mut arch_grad = vec![0.0; base.len()];
    let mut net_grads: Option<NetworkGrads> = None;
    let (mut loss, mut task_loss) = (0.0, 0.0);
    for sample in &samples {
        scaled.set_flat(sample)?;
        let lambdas = scaled.softmax_lambdas()?;
        let gates = gates_for_network(&lambdas, space)?;
        let mut sample_task = 0.0;
        let mut sample_grads: Option<NetworkGrads> = None;
        for (s, w) in batch.iter().zip(&seq_weights) {
            let (logits, cache) = net.forward(&gates, &s.features)?;
            let (l, mut d) = cross_entropy_loss(&logits, &s.labels)?;
            sample_task += w * l;
            d.data_mut().iter_mut().for_each(|v| *v *= w);
            let g = net.backward(&gates, &cache, &d)?;
            match sample_grads.as_mut() {
                Some(a) => a.add_scaled(&g, 1.0),
                None => sample_grads = Some(g),
            }
        }
        let sample_grads = sample_grads.expect("non-empty batch");
        let mut pos = 0;
        for (l, layer_grads) in sample_grads.layers.iter().enumerate() {
            for attr in Attribute::ALL {
                let Some(lam) = lambdas[l].get(attr) else { continue };
                let mut v = lambda_sensitivities(layer_grads, space, attr);
                if let Some(c) = penalties.and_then(|p| p.cost(l, attr)) {
                    for (v, c) in v.iter_mut().zip(c) {
                        *v += eta * c;
                    }
                }
                for (o, g) in arch_grad[pos..pos + lam.len()].iter_mut().zip(softmax_arch_grad(lam, &v)?) {
                    *o += scale * g / j;
                }
                pos += lam.len();
            }
        }
        let penalized = match penalties {
            Some(p) => penalized_loss(sample_task, &lambdas, p, eta),
            None => sample_task,
        };
        loss += penalized / j;
        task_loss += sample_task / j;
        match net_grads.as_mut() {
            Some(a) => a.add_scaled(&sample_grads, 1.0 / j),
            None => {
                let mut g = sample_grads;
                g.scale(1.0 / j);
                net_grads = Some(g);
            }
        }
    }
    Ok(ArchObjective {
        loss,
        task_loss,
        arch_grad,
        net_grads: net_grads.expect("at least one sample"),
    })
}

/// Which parameter groups a search step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Layers and log α together.
    Joint,
    /// Layers only, on uniformly sampled one-hot paths.
    Layers,
    /// log α only, layers frozen.
    Arch,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Joint => "joint",
            Stage::Layers => "layers",
            Stage::Arch => "arch",
        }
    }
}

/// Training and held-out data for a search.
#[derive(Debug, Clone, Copy)]
pub struct SearchData<'a> {
    pub train: &'a Dataset,
    pub heldout: Option<&'a Dataset>,
}

#[derive(Debug, Clone)]
struct PlannedStep {
    stage: Stage,
    batch: Vec<usize>,
    temperature: f64,
}

/// Mutable state of a search run; everything needed to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub net: SuperNetwork,
    pub weights: ArchitectureWeights,
    pub momenta: Vec<Vec<f64>>,
    /// Completed steps.
    pub step: usize,
    pub rng: Rng,
}

impl SearchState {
    /// Fresh state with uniform λ and zero momenta.
    pub fn new(net: SuperNetwork, train: &TrainConfig) -> Self {
        let weights = ArchitectureWeights::zeros(&net.space);
        let mut probe = net.clone();
        let momenta = probe.param_slices_mut().iter().map(|s| vec![0.0; s.len()]).collect();
        SearchState {
            net,
            weights,
            momenta,
            step: 0,
            rng: Rng::new(train.seed, streams::SEARCH),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_space(&self.net.space);
        ck.push_shape(self.net.shape);
        ck.push_network("supernet", &self.net.layers, &self.net.classifier);
        ck.push("log_alpha", self.weights.to_flat());
        ck.push_u64s("momenta.count", &[self.momenta.len() as u64]);
        for (i, m) in self.momenta.iter().enumerate() {
            ck.push(format!("momenta.{i}"), m.clone());
        }
        ck.push_u64s("step", &[self.step as u64]);
        ck.push_rng("rng", &self.rng);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let space = ck.get_space()?;
        let shape = ck.get_shape()?;
        let (layers, classifier) = ck.get_network("supernet")?;
        let net = SuperNetwork {
            space: space.clone(),
            shape,
            layers,
            classifier,
        };
        let mut weights = ArchitectureWeights::zeros(&space);
        weights.set_flat(ck.get("log_alpha")?)?;
        let count = ck.get_usizes("momenta.count")?.first().copied().unwrap_or(0);
        let momenta = (0..count)
            .map(|i| ck.get(&format!("momenta.{i}")).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        let step = ck.get_usizes("step")?.first().copied().unwrap_or(0);
        Ok(SearchState {
            net,
            weights,
            momenta,
            step,
            rng: ck.get_rng("rng")?,
        })
    }
}

/// λ of every group after a given number of steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub lambdas: Vec<LayerLambdas>,
}

/// Summary of one executed step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub temperature: f64,
}

/// The fixed step schedule of one search configuration.
#[derive(Debug, Clone)]
pub struct SearchRun<'a> {
    nas: NasConfig,
    train_cfg: TrainConfig,
    data: SearchData<'a>,
    plan: Vec<PlannedStep>,
}

impl<'a> SearchRun<'a> {
    pub fn new(nas: &NasConfig, train_cfg: &TrainConfig, data: SearchData<'a>) -> Result<Self> {
        nas.validate()?;
        train_cfg.validate()?;
        if data.train.is_empty() {
            return Err(NasError::Training {
                step: 0,
                reason: "empty training data".into(),
            });
        }
        let mut plan = Vec::new();
        let mut push_stage = |stage: Stage, epochs: usize, n: usize, salt: u64| {
            for e in 0..epochs {
                for batch in train_cfg.epoch_batches(n, salt + e as u64) {
                    plan.push(PlannedStep {
                        stage,
                        batch,
                        temperature: 1.0,
                    });
                }
            }
        };
        let stage_salt = 1 << 32;
        if nas.method.is_pipelined() {
            let heldout = data.heldout.filter(|h| !h.is_empty()).ok_or_else(|| NasError::Training {
                step: 0,
                reason: "pipelined search needs non-empty held-out data".into(),
            })?;
            push_stage(Stage::Layers, nas.search_epochs, data.train.len(), 0);
            push_stage(Stage::Arch, nas.stage2_epochs, heldout.len(), stage_salt);
        } else {
            push_stage(Stage::Joint, nas.search_epochs, data.train.len(), 0);
        }
        if nas.method.uses_gumbel() {
            let annealed: Vec<usize> = (0..plan.len()).filter(|&i| plan[i].stage != Stage::Layers).collect();
            let total = annealed.len().saturating_sub(1).max(1);
            for (k, &i) in annealed.iter().enumerate() {
                plan[i].temperature = anneal_temperature(nas.temperature, k, total)?;
            }
        }
        Ok(SearchRun {
            nas: nas.clone(),
            train_cfg: train_cfg.clone(),
            data,
            plan,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.plan.len()
    }

    pub fn stage_of(&self, step: usize) -> Option<Stage> {
        self.plan.get(step).map(|p| p.stage)
    }

    /// Number of steps before `step` that updated layer parameters.
    fn layer_updates_before(&self, step: usize) -> usize {
        self.plan[..step].iter().filter(|p| p.stage != Stage::Arch).count()
    }

    /// Executes step `state.step` of the schedule.
    pub fn step(&self, state: &mut SearchState) -> Result<StepReport> {
        let s = state.step;
        let planned = self
            .plan
            .get(s)
            .ok_or_else(|| NasError::State(format!("step {s} beyond the {} planned steps", self.plan.len())))?;
        let training_err = |reason: String| NasError::Training { step: s, reason };
        let source = match planned.stage {
            Stage::Arch => self.data.heldout.expect("checked in new"),
            _ => self.data.train,
        };
        let batch: Vec<&Sequence> = planned.batch.iter().map(|&i| &source.sequences[i]).collect();
        let space = state.net.space.clone();

        let loss = match planned.stage {
            Stage::Layers => {
                let cand = sample_onehot_uniform(&space, &mut state.rng);
                let gates = gates_for_candidate(&space, &cand)?;
                let (_, seq_weights) = batch_weights(&batch);
                let mut loss = 0.0;
                let mut grads: Option<NetworkGrads> = None;
                for (seq, w) in batch.iter().zip(seq_weights) {
                    let (logits, cache) = state.net.forward(&gates, &seq.features)?;
                    let (l, mut d) = cross_entropy_loss(&logits, &seq.labels)?;
                    loss += w * l;
                    d.data_mut().iter_mut().for_each(|v| *v *= w);
                    let g = state.net.backward(&gates, &cache, &d)?;
                    match grads.as_mut() {
                        Some(a) => a.add_scaled(&g, 1.0),
                        None => grads = Some(g),
                    }
                }
                if !loss.is_finite() {
                    return Err(training_err(format!("non-finite loss {loss}")));
                }
                let grads = grads.expect("non-empty batch");
                self.update_layers(state, &grads)?;
                loss
            }
            Stage::Joint | Stage::Arch => {
                let noise: Vec<Vec<f64>>;
                let relax = if self.nas.method.uses_gumbel() {
                    let n = state.weights.to_flat().len();
                    noise = (0..self.nas.gumbel_samples)
                        .map(|_| (0..n).map(|_| state.rng.draw_gumbel()).collect())
                        .collect();
                    Relaxation::Gumbel {
                        noise: &noise,
                        temperature: planned.temperature,
                    }
                } else {
                    Relaxation::Softmax
                };
                let table = if self.nas.eta > 0.0 {
                    Some(PenaltyTable::compute(&space, state.net.shape, &state.weights, self.nas.penalty_unit)?)
                } else {
                    None
                };
                let obj = arch_objective(&state.net, &state.weights, &batch, relax, table.as_ref(), self.nas.eta)?;
                if !obj.loss.is_finite() || obj.arch_grad.iter().any(|g| !g.is_finite()) {
                    return Err(training_err(format!("non-finite loss {}", obj.loss)));
                }
                if planned.stage == Stage::Joint {
                    self.update_layers(state, &obj.net_grads)?;
                }
                let mut flat = state.weights.to_flat();
                for (a, g) in flat.iter_mut().zip(&obj.arch_grad) {
                    *a -= self.train_cfg.lr_arch * g;
                }
                state.weights.set_flat(&flat)?;
                obj.loss
            }
        };
        state.step += 1;
        Ok(StepReport {
            step: s,
            stage: planned.stage,
            loss,
            temperature: planned.temperature,
        })
    }

    fn update_layers(&self, state: &mut SearchState, grads: &NetworkGrads) -> Result<()> {
        let s = state.step;
        sgd_momentum_step(
            &mut state.net.param_slices_mut(),
            &grads.slices(),
            &mut state.momenta,
            self.train_cfg.lr_layers,
            self.train_cfg.momentum,
        )?;
        let done = self.layer_updates_before(s) + 1;
        let period = self.train_cfg.orth_period;
        if period > 0 && done.is_multiple_of(period) {
            constrain_layers(&mut state.net.layers)?;
        }
        if state.net.layers.iter().any(|l| l.linear.iter().any(|b| !b.weight.is_finite())) {
            return Err(NasError::Training {
                step: s,
                reason: "non-finite layer parameters".into(),
            });
        }
        Ok(())
    }

    /// Runs the remaining steps, snapshotting λ after each.
    pub fn run_from(&self, state: &mut SearchState, trajectory: &mut Vec<Snapshot>) -> Result<()> {
        self.run_until(state, self.total_steps(), trajectory)
    }

    /// Runs steps until `state.step == until`.
    pub fn run_until(&self, state: &mut SearchState, until: usize, trajectory: &mut Vec<Snapshot>) -> Result<()> {
        let until = until.min(self.total_steps());
        while state.step < until {
            self.step(state)?;
            trajectory.push(Snapshot {
                step: state.step,
                lambdas: state.weights.softmax_lambdas()?,
            });
        }
        Ok(())
    }
}

/// Result of a complete search.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub state: SearchState,
    /// Snapshot 0 is the initial λ, snapshot `k` follows step `k`.
    pub trajectory: Vec<Snapshot>,
}

impl SearchOutcome {
    pub fn weights(&self) -> &ArchitectureWeights {
        &self.state.weights
    }

    pub fn top1(&self) -> CandidateArchitecture {
        current_choice(&self.state.net.space, &self.state.weights)
    }
}

/// Full search from a freshly initialised super-network.
pub fn run_search(net: SuperNetwork, data: SearchData<'_>, nas: &NasConfig, train: &TrainConfig) -> Result<SearchOutcome> {
    let run = SearchRun::new(nas, train, data)?;
    let mut state = SearchState::new(net, train);
    let mut trajectory = vec![Snapshot {
        step: 0,
        lambdas: state.weights.softmax_lambdas()?,
    }];
    run.run_from(&mut state, &mut trajectory)?;
    Ok(SearchOutcome { state, trajectory })
}

/// Contexts first with dims pinned at the default, then dims with the selected
/// contexts pinned.
pub fn run_two_stage_search<F>(
    factory: F,
    space: &SearchSpaceSpec,
    data: SearchData<'_>,
    nas: &NasConfig,
    train: &TrainConfig,
) -> Result<CandidateArchitecture>
where
    F: Fn(SearchSpaceSpec) -> Result<SuperNetwork>,
{
    if !(space.search_contexts && space.search_dims) {
        return Err(NasError::value("two-stage search needs both contexts and dims enabled"));
    }
    let contexts_space = SearchSpaceSpec {
        search_dims: false,
        ..space.clone()
    };
    let contexts = run_search(factory(contexts_space)?, data, nas, train)?.top1();

    let mut dims_space = SearchSpaceSpec {
        search_contexts: false,
        ..space.clone()
    };
    for (pin, found) in dims_space.pinned.iter_mut().zip(&contexts.layers) {
        pin.left = found.left;
        pin.right = found.right;
    }
    let dims = run_search(factory(dims_space)?, data, nas, train)?.top1();
    let layers = contexts
        .layers
        .iter()
        .zip(&dims.layers)
        .map(|(c, d)| LayerChoice::new(c.left, c.right, d.dim_index))
        .collect();
    Ok(CandidateArchitecture { layers })
}

/// One retrained random sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSample {
    pub candidate: CandidateArchitecture,
    pub val_loss: f64,
    pub params: usize,
}

/// Outcome of random search: all samples and the index of the winner.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub samples: Vec<BaselineSample>,
    pub best: usize,
}

impl BaselineResult {
    pub fn winner(&self) -> &BaselineSample {
        &self.samples[self.best]
    }
}

/// Retrains `k` uniformly sampled candidates and keeps the lowest held-out
/// loss; ties go to fewer parameters, then to the earlier sample.
pub fn random_search_baseline(
    space: &SearchSpaceSpec,
    shape: NetworkShape,
    train: &Dataset,
    val: &Dataset,
    k: usize,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<BaselineResult> {
    if k == 0 {
        return Err(NasError::value("random search needs at least one sample"));
    }
    let mut samples = Vec::with_capacity(k);
    for i in 0..k {
        let candidate = sample_onehot_uniform(space, rng);
        let sample_cfg = TrainConfig {
            seed: mix_seed(cfg.seed, i as u64),
            ..cfg.clone()
        };
        let r = retrain_candidate(&candidate, space, shape, train, val, &sample_cfg)?;
        samples.push(BaselineSample {
            params: network_param_count(&candidate, space, shape),
            candidate,
            val_loss: r.val_loss,
        });
    }
    let best = (0..k)
        .min_by(|&a, &b| {
            let (x, y) = (&samples[a], &samples[b]);
            x.val_loss
                .total_cmp(&y.val_loss)
                .then(x.params.cmp(&y.params))
                .then(a.cmp(&b))
        })
        .expect("k >= 1");
    Ok(BaselineResult { samples, best })
}

/// Mean frame loss of the super-network under given λ on a dataset.
pub fn supernet_loss(net: &SuperNetwork, lambdas: &[LayerLambdas], data: &Dataset) -> Result<f64> {
    let gates = gates_for_network(lambdas, &net.space)?;
    let (mut total, mut frames) = (0.0, 0usize);
    for s in &data.sequences {
        let (logits, _): (SeqTensor, _) = net.forward(&gates, &s.features)?;
        total += cross_entropy_loss(&logits, &s.labels)?.0 * s.labels.len() as f64;
        frames += s.labels.len();
    }
    Ok(total / frames.max(1) as f64)
}
