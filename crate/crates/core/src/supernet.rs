//! Weight-sharing super-network over per-layer context offsets and bottleneck
//! dimensions.
//!
//! Every candidate architecture is a sub-path of one stack of
//! [`FactoredLayer`]s: context choices select which linear/affine blocks are
//! active and dim choices select a prefix of the bottleneck units. The mixture
//! over candidates is evaluated in a single gated pass; with per-layer weights
//! `λ^L`, `λ^R`, `λ^dim` the gates are
//!
//! ```text
//! gL_0 = 1,  gL_c = λ^L_c (c ≥ 1)          same for the right side
//! g_k  = Σ_{i : dims[i] > k} λ^dim_i
//! ```
//!
//! which reproduces the λ-weighted sum of all candidate pre-activations exactly.

use std::fmt;

use crate::error::{NasError, Result};
use crate::layer::{extract_layer, choice_param_count, FactoredLayer, GateVector, LayerCache, LayerChoice, LayerGrads};
use crate::numeric::{dot, stable_softmax, Matrix, Rng, SeqTensor};

/// Tolerance used when checking that λ arrays lie on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Which per-layer hyper-parameter a choice group selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    Left,
    Right,
    Dim,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Left, Attribute::Right, Attribute::Dim];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Left => "left",
            Attribute::Right => "right",
            Attribute::Dim => "dim",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "left" => Some(Attribute::Left),
            "right" => Some(Attribute::Right),
            "dim" => Some(Attribute::Dim),
            _ => None,
        }
    }

    pub fn of(self, choice: &LayerChoice) -> usize {
        match self {
            Attribute::Left => choice.left,
            Attribute::Right => choice.right,
            Attribute::Dim => choice.dim_index,
        }
    }

    pub fn set(self, choice: &mut LayerChoice, value: usize) {
        match self {
            Attribute::Left => choice.left = value,
            Attribute::Right => choice.right = value,
            Attribute::Dim => choice.dim_index = value,
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape of the searchable space.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpaceSpec {
    pub num_layers: usize,
    pub d_left: usize,
    pub d_right: usize,
    /// Strictly ascending bottleneck widths; the last is the super-network width.
    pub dim_choices: Vec<usize>,
    pub search_contexts: bool,
    pub search_dims: bool,
    /// Per-layer values used for attributes that are not searched.
    pub pinned: Vec<LayerChoice>,
}

impl SearchSpaceSpec {
    /// Space with unsearched attributes pinned to zero context and the widest dim.
    pub fn new(
        num_layers: usize,
        d_left: usize,
        d_right: usize,
        dim_choices: Vec<usize>,
        search_contexts: bool,
        search_dims: bool,
    ) -> Result<Self> {
        let default = LayerChoice::new(0, 0, dim_choices.len().saturating_sub(1));
        let spec = SearchSpaceSpec {
            num_layers,
            d_left,
            d_right,
            dim_choices,
            search_contexts,
            search_dims,
            pinned: vec![default; num_layers],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Production-scale space: 14 layers, offsets up to ±6, eight widths.
    pub fn full_scale() -> Self {
        SearchSpaceSpec::new(14, 6, 6, vec![25, 50, 80, 100, 120, 160, 200, 240], true, true)
            .expect("static space is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_choices.is_empty() || self.dim_choices[0] == 0 {
            return Err(NasError::value("dim choices must be non-empty and positive"));
        }
        if self.dim_choices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(NasError::value(format!(
                "dim choices must be strictly ascending, got {:?}",
                self.dim_choices
            )));
        }
        if !self.search_contexts && !self.search_dims {
            return Err(NasError::value("at least one attribute must be searched"));
        }
        if self.pinned.len() != self.num_layers {
            return Err(NasError::value(format!(
                "{} pinned choices for {} layers",
                self.pinned.len(),
                self.num_layers
            )));
        }
        for p in &self.pinned {
            if p.left > self.d_left || p.right > self.d_right || p.dim_index >= self.dim_choices.len() {
                return Err(NasError::value(format!("pinned choice {p:?} outside the space")));
            }
        }
        Ok(())
    }

    pub fn n_max(&self) -> usize {
        *self.dim_choices.last().expect("validated non-empty")
    }

    pub fn is_searched(&self, attr: Attribute) -> bool {
        match attr {
            Attribute::Left | Attribute::Right => self.search_contexts,
            Attribute::Dim => self.search_dims,
        }
    }

    pub fn searched_attributes(&self) -> Vec<Attribute> {
        Attribute::ALL.into_iter().filter(|a| self.is_searched(*a)).collect()
    }

    pub fn group_size(&self, attr: Attribute) -> usize {
        match attr {
            Attribute::Left => self.d_left + 1,
            Attribute::Right => self.d_right + 1,
            Attribute::Dim => self.dim_choices.len(),
        }
    }

    /// `(layer, attribute)` of every searched group, layer-major.
    pub fn groups(&self) -> Vec<(usize, Attribute)> {
        let attrs = self.searched_attributes();
        (0..self.num_layers)
            .flat_map(|l| attrs.iter().map(move |&a| (l, a)))
            .collect()
    }

    /// Number of distinct candidates (saturating).
    pub fn space_size(&self) -> u128 {
        self.groups()
            .iter()
            .fold(1u128, |acc, &(_, a)| acc.saturating_mul(self.group_size(a) as u128))
    }
}

/// Feature, hidden and class dimensions of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl NetworkShape {
    pub fn layer_dims(&self, layer: usize) -> (usize, usize) {
        let input = if layer == 0 { self.input_dim } else { self.hidden_dim };
        (input, self.hidden_dim)
    }

    fn input_of(&self, num_layers: usize) -> usize {
        if num_layers == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }
}

/// Learnable log α arrays of one layer; `None` for unsearched attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLogits {
    pub left: Option<Vec<f64>>,
    pub right: Option<Vec<f64>>,
    pub dim: Option<Vec<f64>>,
}

impl LayerLogits {
    pub fn get(&self, attr: Attribute) -> Option<&[f64]> {
        match attr {
            Attribute::Left => self.left.as_deref(),
            Attribute::Right => self.right.as_deref(),
            Attribute::Dim => self.dim.as_deref(),
        }
    }

    pub fn get_mut(&mut self, attr: Attribute) -> Option<&mut Vec<f64>> {
        match attr {
            Attribute::Left => self.left.as_mut(),
            Attribute::Right => self.right.as_mut(),
            Attribute::Dim => self.dim.as_mut(),
        }
    }
}

/// Per-layer architecture parameters (log α), one simplex group per searched
/// attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureWeights {
    pub layers: Vec<LayerLogits>,
}

impl ArchitectureWeights {
    /// All-zero log α, i.e. a uniform distribution over every group.
    pub fn zeros(space: &SearchSpaceSpec) -> Self {
        let make = |attr: Attribute| space.is_searched(attr).then(|| vec![0.0; space.group_size(attr)]);
        ArchitectureWeights {
            layers: (0..space.num_layers)
                .map(|_| LayerLogits {
                    left: make(Attribute::Left),
                    right: make(Attribute::Right),
                    dim: make(Attribute::Dim),
                })
                .collect(),
        }
    }

    pub fn group(&self, layer: usize, attr: Attribute) -> Option<&[f64]> {
        self.layers.get(layer).and_then(|l| l.get(attr))
    }

    pub fn group_mut(&mut self, layer: usize, attr: Attribute) -> Option<&mut Vec<f64>> {
        self.layers.get_mut(layer).and_then(|l| l.get_mut(attr))
    }

    /// Checks that the arrays present match `space` exactly.
    pub fn check(&self, space: &SearchSpaceSpec) -> Result<()> {
        if self.layers.len() != space.num_layers {
            return Err(NasError::value(format!(
                "weights for {} layers, space has {}",
                self.layers.len(),
                space.num_layers
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for attr in Attribute::ALL {
                match (layer.get(attr), space.is_searched(attr)) {
                    (Some(v), true) if v.len() == space.group_size(attr) => {
                        if v.iter().any(|x| !x.is_finite()) {
                            return Err(NasError::value(format!("non-finite log α at layer {l} {attr}")));
                        }
                    }
                    (None, false) => {}
                    _ => {
                        return Err(NasError::value(format!(
                            "log α for layer {l} {attr} does not match the space"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// All log α entries, group by group in [`SearchSpaceSpec::groups`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for attr in Attribute::ALL {
                if let Some(v) = layer.get(attr) {
                    out.extend_from_slice(v);
                }
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut pos = 0;
        for layer in &mut self.layers {
            for attr in Attribute::ALL {
                if let Some(v) = layer.get_mut(attr) {
                    let end = pos + v.len();
                    if end > flat.len() {
                        return Err(NasError::shape(format!("{} log α entries", end), format!("{} given", flat.len())));
                    }
                    v.copy_from_slice(&flat[pos..end]);
                    pos = end;
                }
            }
        }
        if pos != flat.len() {
            return Err(NasError::shape(format!("{pos} log α entries"), format!("{} given", flat.len())));
        }
        Ok(())
    }

    /// Softmax λ for every searched group.
    pub fn softmax_lambdas(&self) -> Result<Vec<LayerLambdas>> {
        let sm = |v: Option<&[f64]>| v.map(stable_softmax).transpose();
        self.layers
            .iter()
            .map(|l| {
                Ok(LayerLambdas {
                    left: sm(l.get(Attribute::Left))?,
                    right: sm(l.get(Attribute::Right))?,
                    dim: sm(l.get(Attribute::Dim))?,
                })
            })
            .collect()
    }
}

/// λ arrays of one layer, same layout as [`LayerLogits`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLambdas {
    pub left: Option<Vec<f64>>,
    pub right: Option<Vec<f64>>,
    pub dim: Option<Vec<f64>>,
}

impl LayerLambdas {
    pub fn get(&self, attr: Attribute) -> Option<&[f64]> {
        match attr {
            Attribute::Left => self.left.as_deref(),
            Attribute::Right => self.right.as_deref(),
            Attribute::Dim => self.dim.as_deref(),
        }
    }

    pub fn set(&mut self, attr: Attribute, v: Vec<f64>) {
        match attr {
            Attribute::Left => self.left = Some(v),
            Attribute::Right => self.right = Some(v),
            Attribute::Dim => self.dim = Some(v),
        }
    }

    /// λ arrays for a single candidate: indicator at each searched choice.
    pub fn one_hot(space: &SearchSpaceSpec, choice: &LayerChoice) -> Self {
        let hot = |attr: Attribute| {
            space.is_searched(attr).then(|| {
                let mut v = vec![0.0; space.group_size(attr)];
                v[attr.of(choice)] = 1.0;
                v
            })
        };
        LayerLambdas {
            left: hot(Attribute::Left),
            right: hot(Attribute::Right),
            dim: hot(Attribute::Dim),
        }
    }
}

/// Per-layer choice of a concrete architecture.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CandidateArchitecture {
    pub layers: Vec<LayerChoice>,
}

impl CandidateArchitecture {
    pub fn validate(&self, space: &SearchSpaceSpec) -> Result<()> {
        if self.layers.len() != space.num_layers {
            return Err(NasError::value(format!(
                "candidate has {} layers, space has {}",
                self.layers.len(),
                space.num_layers
            )));
        }
        for (l, c) in self.layers.iter().enumerate() {
            if c.left > space.d_left || c.right > space.d_right || c.dim_index >= space.dim_choices.len() {
                return Err(NasError::value(format!("layer {l} choice {c:?} outside the space")));
            }
        }
        Ok(())
    }

    /// Every layer at its pinned default.
    pub fn pinned(space: &SearchSpaceSpec) -> Self {
        CandidateArchitecture {
            layers: space.pinned.clone(),
        }
    }
}

fn check_simplex(lambda: &[f64], expected: usize, what: &str) -> Result<()> {
    if lambda.len() != expected {
        return Err(NasError::shape(format!("{what} group of {expected}"), format!("λ of {}", lambda.len())));
    }
    let sum: f64 = lambda.iter().sum();
    if lambda.iter().any(|v| !v.is_finite() || *v < -SIMPLEX_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(NasError::value(format!("{what} λ is not on the simplex (sum {sum})")));
    }
    Ok(())
}

/// Gate values of one layer from its λ arrays. Attributes passed as `None` use
/// the layer's pinned choice.
pub fn gates_from_lambda(
    lambda_left: Option<&[f64]>,
    lambda_right: Option<&[f64]>,
    lambda_dim: Option<&[f64]>,
    space: &SearchSpaceSpec,
    layer: usize,
) -> Result<GateVector> {
    let pinned = space
        .pinned
        .get(layer)
        .ok_or_else(|| NasError::value(format!("layer {layer} outside the space")))?;
    let context = |lambda: Option<&[f64]>, d: usize, pin: usize, what: &str| -> Result<Vec<f64>> {
        let mut g = vec![0.0; d + 1];
        match lambda {
            Some(l) => {
                check_simplex(l, d + 1, what)?;
                g[1..].copy_from_slice(&l[1..]);
            }
            None => g[pin] = 1.0,
        }
        g[0] = 1.0;
        Ok(g)
    };
    let left = context(lambda_left, space.d_left, pinned.left, "left")?;
    let right = context(lambda_right, space.d_right, pinned.right, "right")?;

    let dims = &space.dim_choices;
    let n_max = space.n_max();
    let mut dim = vec![0.0; n_max];
    match lambda_dim {
        Some(l) => {
            check_simplex(l, dims.len(), "dim")?;
            for (k, g) in dim.iter_mut().enumerate() {
                *g = dims.iter().zip(l).filter(|(&n, _)| n > k).map(|(_, &v)| v).sum();
            }
        }
        None => {
            for g in &mut dim[..dims[pinned.dim_index]] {
                *g = 1.0;
            }
        }
    }
    Ok(GateVector { left, right, dim })
}

/// Gates for every layer from per-layer λ arrays.
pub fn gates_for_network(lambdas: &[LayerLambdas], space: &SearchSpaceSpec) -> Result<Vec<GateVector>> {
    lambdas
        .iter()
        .enumerate()
        .map(|(l, lam)| gates_from_lambda(lam.left.as_deref(), lam.right.as_deref(), lam.dim.as_deref(), space, l))
        .collect()
}

/// Indicator gates of one candidate in every layer.
pub fn gates_for_candidate(space: &SearchSpaceSpec, cand: &CandidateArchitecture) -> Result<Vec<GateVector>> {
    cand.validate(space)?;
    let lambdas: Vec<LayerLambdas> = cand.layers.iter().map(|c| LayerLambdas::one_hot(space, c)).collect();
    let mut gates = gates_for_network(&lambdas, space)?;
    // Unsearched attributes take the pinned value; override with the candidate's.
    for (g, c) in gates.iter_mut().zip(&cand.layers) {
        if !space.search_contexts {
            g.left.iter_mut().for_each(|v| *v = 0.0);
            g.left[0] = 1.0;
            g.left[c.left] = 1.0;
            g.right.iter_mut().for_each(|v| *v = 0.0);
            g.right[0] = 1.0;
            g.right[c.right] = 1.0;
        }
        if !space.search_dims {
            let n = space.dim_choices[c.dim_index];
            for (k, v) in g.dim.iter_mut().enumerate() {
                *v = if k < n { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(gates)
}

/// Final per-frame affine classifier (never gated or searched).
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Classifier {
    pub fn random(in_dim: usize, classes: usize, rng: &mut Rng) -> Self {
        Classifier {
            weight: Matrix::random_normal(classes, in_dim, 1.0 / (in_dim as f64).sqrt(), rng),
            bias: vec![0.0; classes],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, h: &SeqTensor) -> Result<SeqTensor> {
        if h.dim() != self.weight.cols() {
            return Err(NasError::shape(
                format!("classifier input {}", self.weight.cols()),
                format!("tensor dim {}", h.dim()),
            ));
        }
        let classes = self.bias.len();
        let mut out = SeqTensor::zeros(h.frames(), classes);
        for t in 0..h.frames() {
            let src = h.frame(t);
            for (k, o) in out.frame_mut(t).iter_mut().enumerate() {
                *o = dot(self.weight.row(k), src) + self.bias[k];
            }
        }
        Ok(out)
    }

    /// Returns (weight grad, bias grad, input grad).
    pub fn backward(&self, h: &SeqTensor, d_out: &SeqTensor) -> (Matrix, Vec<f64>, SeqTensor) {
        let classes = self.bias.len();
        let mut dw = Matrix::zeros(classes, h.dim());
        let mut db = vec![0.0; classes];
        let mut dh = SeqTensor::zeros(h.frames(), h.dim());
        for t in 0..h.frames() {
            let ht = h.frame(t);
            for (k, &d) in d_out.frame(t).iter().enumerate() {
                db[k] += d;
                if d == 0.0 {
                    continue;
                }
                for (w, x) in dw.row_mut(k).iter_mut().zip(ht) {
                    *w += d * x;
                }
                for (g, w) in dh.frame_mut(t).iter_mut().zip(self.weight.row(k)) {
                    *g += d * w;
                }
            }
        }
        (dw, db, dh)
    }
}

/// Forward intermediates of a whole stack.
#[derive(Debug, Clone)]
pub struct NetworkCache {
    layers: Vec<LayerCache>,
    hidden: SeqTensor,
}

/// Gradients of every network parameter, plus per-layer gate gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<LayerGrads>,
    pub classifier_weight: Matrix,
    pub classifier_bias: Vec<f64>,
}

impl NetworkGrads {
    /// Parameter gradients in the order of [`param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.extend(l.linear.iter().map(|m| m.data()));
            out.extend(l.affine.iter().map(|m| m.data()));
            out.push(&l.bias);
        }
        out.push(self.classifier_weight.data());
        out.push(&self.classifier_bias);
        out
    }

    /// `self += other * scale`, parameters and gates alike.
    pub fn add_scaled(&mut self, other: &NetworkGrads, scale: f64) {
        fn axpy(a: &mut [f64], b: &[f64], s: f64) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.linear.iter_mut().zip(&b.linear) {
                axpy(x.data_mut(), y.data(), scale);
            }
            for (x, y) in a.affine.iter_mut().zip(&b.affine) {
                axpy(x.data_mut(), y.data(), scale);
            }
            axpy(&mut a.bias, &b.bias, scale);
            axpy(&mut a.gate_left, &b.gate_left, scale);
            axpy(&mut a.gate_right, &b.gate_right, scale);
            axpy(&mut a.gate_dim, &b.gate_dim, scale);
        }
        axpy(self.classifier_weight.data_mut(), other.classifier_weight.data(), scale);
        axpy(&mut self.classifier_bias, &other.classifier_bias, scale);
    }

    pub fn scale(&mut self, s: f64) {
        let zero = self.clone();
        self.add_scaled(&zero, s - 1.0);
    }
}

/// Mutable views of every parameter array, layer by layer then the classifier.
pub fn param_slices_mut<'a>(layers: &'a mut [FactoredLayer], classifier: &'a mut Classifier) -> Vec<&'a mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    for l in layers.iter_mut() {
        out.extend(l.linear.iter_mut().map(|b| b.weight.data_mut()));
        out.extend(l.affine.iter_mut().map(|b| b.weight.data_mut()));
        out.push(&mut l.bias);
    }
    out.push(classifier.weight.data_mut());
    out.push(&mut classifier.bias);
    out
}

pub(crate) fn stack_forward(
    layers: &[FactoredLayer],
    classifier: &Classifier,
    gates: &[GateVector],
    x: &SeqTensor,
) -> Result<(SeqTensor, NetworkCache)> {
    if gates.len() != layers.len() {
        return Err(NasError::shape(format!("{} layers", layers.len()), format!("{} gate vectors", gates.len())));
    }
    let mut h = x.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for (layer, g) in layers.iter().zip(gates) {
        let (out, cache) = layer.forward(g, &h, true)?;
        caches.push(cache);
        h = out;
    }
    let logits = classifier.forward(&h)?;
    Ok((logits, NetworkCache { layers: caches, hidden: h }))
}

pub(crate) fn stack_backward(
    layers: &[FactoredLayer],
    classifier: &Classifier,
    gates: &[GateVector],
    cache: &NetworkCache,
    d_logits: &SeqTensor,
) -> Result<NetworkGrads> {
    if cache.layers.len() != layers.len() || gates.len() != layers.len() {
        return Err(NasError::State(format!(
            "forward cache holds {} layers, network has {}",
            cache.layers.len(),
            layers.len()
        )));
    }
    if d_logits.frames() != cache.hidden.frames() || d_logits.dim() != classifier.bias.len() {
        return Err(NasError::shape(
            format!("logits {}x{}", cache.hidden.frames(), classifier.bias.len()),
            format!("gradient {}x{}", d_logits.frames(), d_logits.dim()),
        ));
    }
    let (classifier_weight, classifier_bias, mut d) = classifier.backward(&cache.hidden, d_logits);
    let mut grads = Vec::with_capacity(layers.len());
    for ((layer, g), c) in layers.iter().zip(gates).zip(&cache.layers).rev() {
        let (lg, d_in) = layer.backward(g, c, &d)?;
        grads.push(lg);
        d = d_in;
    }
    grads.reverse();
    Ok(NetworkGrads {
        layers: grads,
        classifier_weight,
        classifier_bias,
    })
}

/// Stack of super-network layers plus the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperNetwork {
    pub space: SearchSpaceSpec,
    pub shape: NetworkShape,
    pub layers: Vec<FactoredLayer>,
    pub classifier: Classifier,
}

impl SuperNetwork {
    /// Fresh network, entries N(0, 1/fan_in), zero biases.
    pub fn new(space: SearchSpaceSpec, shape: NetworkShape, rng: &mut Rng) -> Result<Self> {
        space.validate()?;
        let layers = (0..space.num_layers)
            .map(|l| {
                let (i, o) = shape.layer_dims(l);
                FactoredLayer::random(i, o, space.n_max(), space.d_left, space.d_right, rng)
            })
            .collect();
        let classifier = Classifier::random(shape.input_of(space.num_layers), shape.num_classes, rng);
        Ok(SuperNetwork {
            space,
            shape,
            layers,
            classifier,
        })
    }

    /// Gated mixture forward; returns per-frame class logits.
    pub fn forward(&self, gates: &[GateVector], x: &SeqTensor) -> Result<(SeqTensor, NetworkCache)> {
        stack_forward(&self.layers, &self.classifier, gates, x)
    }

    /// Exact reverse-mode gradients of [`SuperNetwork::forward`].
    pub fn backward(&self, gates: &[GateVector], cache: &NetworkCache, d_logits: &SeqTensor) -> Result<NetworkGrads> {
        stack_backward(&self.layers, &self.classifier, gates, cache, d_logits)
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        param_slices_mut(&mut self.layers, &mut self.classifier)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(FactoredLayer::param_count).sum::<usize>() + self.classifier.param_count()
    }
}

/// Per-choice sensitivities `v_i = ∂L/∂λ_i` of one layer, derived from its gate
/// gradients. Entries are only meaningful up to a common additive constant, which
/// the softmax Jacobian removes.
pub fn lambda_sensitivities(grads: &LayerGrads, space: &SearchSpaceSpec, attr: Attribute) -> Vec<f64> {
    match attr {
        Attribute::Left | Attribute::Right => {
            let g = if attr == Attribute::Left { &grads.gate_left } else { &grads.gate_right };
            let mut v = g.clone();
            v[0] = 0.0;
            v
        }
        Attribute::Dim => space
            .dim_choices
            .iter()
            .map(|&n| grads.gate_dim[..n].iter().sum())
            .collect(),
    }
}

/// Draws every searched attribute of every layer uniformly; unsearched
/// attributes keep their pinned values.
pub fn sample_onehot_uniform(space: &SearchSpaceSpec, rng: &mut Rng) -> CandidateArchitecture {
    let layers = space
        .pinned
        .iter()
        .map(|pin| {
            let mut c = *pin;
            for attr in space.searched_attributes() {
                attr.set(&mut c, rng.below(space.group_size(attr)));
            }
            c
        })
        .collect();
    CandidateArchitecture { layers }
}

/// A standalone candidate network extracted from (or shaped like) a super-network.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateNetwork {
    pub candidate: CandidateArchitecture,
    pub dims: Vec<usize>,
    pub layers: Vec<FactoredLayer>,
    pub classifier: Classifier,
}

impl CandidateNetwork {
    /// Freshly initialised candidate of the given shape.
    pub fn random(
        cand: &CandidateArchitecture,
        space: &SearchSpaceSpec,
        shape: NetworkShape,
        rng: &mut Rng,
    ) -> Result<Self> {
        cand.validate(space)?;
        let layers = cand
            .layers
            .iter()
            .enumerate()
            .map(|(l, c)| {
                let (i, o) = shape.layer_dims(l);
                let mut left = vec![0];
                if c.left > 0 {
                    left.push(c.left);
                }
                let mut right = vec![0];
                if c.right > 0 {
                    right.push(c.right);
                }
                FactoredLayer::random_with_offsets(i, o, space.dim_choices[c.dim_index], &left, &right, rng)
            })
            .collect();
        let classifier = Classifier::random(shape.input_of(space.num_layers), shape.num_classes, rng);
        Ok(CandidateNetwork {
            candidate: cand.clone(),
            dims: space.dim_choices.clone(),
            layers,
            classifier,
        })
    }

    pub(crate) fn dense_gates(&self) -> Vec<GateVector> {
        self.layers
            .iter()
            .map(|l| GateVector::dense(l.linear.len(), l.affine.len(), l.bottleneck()))
            .collect()
    }

    pub fn forward(&self, x: &SeqTensor) -> Result<SeqTensor> {
        Ok(stack_forward(&self.layers, &self.classifier, &self.dense_gates(), x)?.0)
    }

    pub fn forward_with_cache(&self, x: &SeqTensor) -> Result<(SeqTensor, NetworkCache)> {
        stack_forward(&self.layers, &self.classifier, &self.dense_gates(), x)
    }

    pub fn backward(&self, cache: &NetworkCache, d_logits: &SeqTensor) -> Result<NetworkGrads> {
        stack_backward(&self.layers, &self.classifier, &self.dense_gates(), cache, d_logits)
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        param_slices_mut(&mut self.layers, &mut self.classifier)
    }

    /// Scalars actually allocated by this network.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(FactoredLayer::param_count).sum::<usize>() + self.classifier.param_count()
    }
}

/// Copies one candidate's sub-matrices out of the super-network.
pub fn extract_network(net: &SuperNetwork, cand: &CandidateArchitecture) -> Result<CandidateNetwork> {
    cand.validate(&net.space)?;
    let layers = net
        .layers
        .iter()
        .zip(&cand.layers)
        .map(|(layer, &c)| extract_layer(layer, c, &net.space.dim_choices))
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateNetwork {
        candidate: cand.clone(),
        dims: net.space.dim_choices.clone(),
        layers,
        classifier: net.classifier.clone(),
    })
}

/// Σ_l candidate_param_count + classifier size.
pub fn network_param_count(cand: &CandidateArchitecture, space: &SearchSpaceSpec, shape: NetworkShape) -> usize {
    let hidden: usize = cand
        .layers
        .iter()
        .enumerate()
        .map(|(l, &c)| {
            let (i, o) = shape.layer_dims(l);
            choice_param_count(i, o, c, &space.dim_choices)
        })
        .sum();
    hidden + shape.num_classes * shape.input_of(cand.layers.len()) + shape.num_classes
}
