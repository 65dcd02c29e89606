//! Factored TDNN layer: context splicing, gated forward/backward, candidate
//! extraction, parameter counting and the semi-orthogonal constraint.
//!
//! A layer maps `h` (T×D_in) to `T×D_out` in two stages:
//!
//! ```text
//! z_t  = Σ_c gL_c · B_c h_{t-c}          linear stage, B_c: n × D_in
//! z̃_t  = g ⊙ z_t                          bottleneck gate, g: length n
//! y_t  = Σ_r gR_r · A_r z̃_{t+r} + bias    affine stage, A_r: D_out × n
//! ```
//!
//! Out-of-range frames are replaced by the nearest boundary frame. A super-network
//! layer holds blocks for every offset `0..=d` on each side; an extracted
//! candidate holds only the blocks it uses, truncated to its bottleneck width,
//! and runs with every gate equal to one.

use crate::error::{NasError, Result};
use crate::numeric::{dot, Matrix, Rng, SeqTensor};

/// Weight block applied at one time offset.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBlock {
    pub offset: usize,
    pub weight: Matrix,
}

/// One concrete per-layer assignment: left offset `-left`, right offset
/// `+right`, and an index into the bottleneck dim choice list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerChoice {
    pub left: usize,
    pub right: usize,
    pub dim_index: usize,
}

impl LayerChoice {
    pub fn new(left: usize, right: usize, dim_index: usize) -> Self {
        LayerChoice {
            left,
            right,
            dim_index,
        }
    }
}

/// Gate values for one layer.
///
/// `left[c]` scales the linear block at offset `-c`, `right[r]` the affine block
/// at offset `+r`, and `dim[k]` bottleneck unit `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub dim: Vec<f64>,
}

impl GateVector {
    /// All gates open.
    pub fn dense(left: usize, right: usize, dim: usize) -> Self {
        GateVector {
            left: vec![1.0; left],
            right: vec![1.0; right],
            dim: vec![1.0; dim],
        }
    }

    /// Indicator gates of a single candidate inside a super-network layer.
    pub fn one_hot(layer: &FactoredLayer, choice: LayerChoice, dims: &[usize]) -> Result<Self> {
        layer.check_choice(choice, dims)?;
        let mut g = GateVector {
            left: vec![0.0; layer.linear.len()],
            right: vec![0.0; layer.affine.len()],
            dim: vec![0.0; layer.bottleneck()],
        };
        g.left[0] = 1.0;
        g.left[choice.left] = 1.0;
        g.right[0] = 1.0;
        g.right[choice.right] = 1.0;
        for v in &mut g.dim[..dims[choice.dim_index]] {
            *v = 1.0;
        }
        Ok(g)
    }
}

/// Gradients of one layer's parameters and gates.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub linear: Vec<Matrix>,
    pub affine: Vec<Matrix>,
    pub bias: Vec<f64>,
    pub gate_left: Vec<f64>,
    pub gate_right: Vec<f64>,
    pub gate_dim: Vec<f64>,
}

/// Intermediates kept by [`FactoredLayer::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    input: SeqTensor,
    linear_out: Vec<SeqTensor>,
    z: SeqTensor,
    z_gated: SeqTensor,
    affine_out: Vec<SeqTensor>,
    pre_activation: SeqTensor,
    activate: bool,
}

impl LayerCache {
    pub fn pre_activation(&self) -> &SeqTensor {
        &self.pre_activation
    }
}

#[inline]
fn shifted(t: usize, offset: isize, frames: usize) -> usize {
    (t as isize + offset).clamp(0, frames as isize - 1) as usize
}

/// Frame `t` of the output is frame `clamp(t + offset, 0, T-1)` of the input.
pub fn splice(h: &SeqTensor, offset: isize) -> SeqTensor {
    let frames = h.frames();
    let mut out = SeqTensor::zeros(frames, h.dim());
    for t in 0..frames {
        out.frame_mut(t).copy_from_slice(h.frame(shifted(t, offset, frames)));
    }
    out
}

/// Shared parameters of one factored layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredLayer {
    pub linear: Vec<ContextBlock>,
    pub affine: Vec<ContextBlock>,
    pub bias: Vec<f64>,
}

impl FactoredLayer {
    /// Super-network layer with blocks for offsets `0..=d_left` and `0..=d_right`,
    /// entries drawn from N(0, 1/fan_in), zero bias.
    pub fn random(
        in_dim: usize,
        out_dim: usize,
        bottleneck: usize,
        d_left: usize,
        d_right: usize,
        rng: &mut Rng,
    ) -> Self {
        let offsets = |d: usize| 0..=d;
        Self::random_with_offsets(
            in_dim,
            out_dim,
            bottleneck,
            &offsets(d_left).collect::<Vec<_>>(),
            &offsets(d_right).collect::<Vec<_>>(),
            rng,
        )
    }

    pub(crate) fn random_with_offsets(
        in_dim: usize,
        out_dim: usize,
        bottleneck: usize,
        left: &[usize],
        right: &[usize],
        rng: &mut Rng,
    ) -> Self {
        let lin_scale = 1.0 / (in_dim as f64).sqrt();
        let aff_scale = 1.0 / (bottleneck as f64).sqrt();
        let linear = left
            .iter()
            .map(|&offset| ContextBlock {
                offset,
                weight: Matrix::random_normal(bottleneck, in_dim, lin_scale, rng),
            })
            .collect();
        let affine = right
            .iter()
            .map(|&offset| ContextBlock {
                offset,
                weight: Matrix::random_normal(out_dim, bottleneck, aff_scale, rng),
            })
            .collect();
        FactoredLayer {
            linear,
            affine,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.linear[0].weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    /// Number of bottleneck units (rows of each linear block).
    pub fn bottleneck(&self) -> usize {
        self.linear[0].weight.rows()
    }

    pub fn max_left(&self) -> usize {
        self.linear.iter().map(|b| b.offset).max().unwrap_or(0)
    }

    pub fn max_right(&self) -> usize {
        self.affine.iter().map(|b| b.offset).max().unwrap_or(0)
    }

    /// Scalars held by this layer.
    pub fn param_count(&self) -> usize {
        self.linear.iter().map(|b| b.weight.len()).sum::<usize>()
            + self.affine.iter().map(|b| b.weight.len()).sum::<usize>()
            + self.bias.len()
    }

    /// Whether blocks sit at offsets `0, 1, ..., d` on both sides.
    pub fn is_contiguous(&self) -> bool {
        self.linear.iter().enumerate().all(|(i, b)| b.offset == i)
            && self.affine.iter().enumerate().all(|(i, b)| b.offset == i)
    }

    pub(crate) fn check_choice(&self, choice: LayerChoice, dims: &[usize]) -> Result<()> {
        if !self.is_contiguous() {
            return Err(NasError::value("candidate choices need a super-network layer"));
        }
        if choice.left > self.max_left() || choice.right > self.max_right() {
            return Err(NasError::value(format!(
                "context choice (-{}, +{}) outside (-{}, +{})",
                choice.left,
                choice.right,
                self.max_left(),
                self.max_right()
            )));
        }
        match dims.get(choice.dim_index) {
            Some(&n) if n >= 1 && n <= self.bottleneck() => Ok(()),
            Some(&n) => Err(NasError::value(format!(
                "bottleneck dim {n} outside 1..={}",
                self.bottleneck()
            ))),
            None => Err(NasError::value(format!(
                "dim index {} out of range for {} choices",
                choice.dim_index,
                dims.len()
            ))),
        }
    }

    fn check_gates(&self, gates: &GateVector) -> Result<()> {
        if gates.left.len() != self.linear.len()
            || gates.right.len() != self.affine.len()
            || gates.dim.len() != self.bottleneck()
        {
            return Err(NasError::shape(
                format!(
                    "layer gates ({}, {}, {})",
                    self.linear.len(),
                    self.affine.len(),
                    self.bottleneck()
                ),
                format!(
                    "given gates ({}, {}, {})",
                    gates.left.len(),
                    gates.right.len(),
                    gates.dim.len()
                ),
            ));
        }
        Ok(())
    }

    /// Gated forward pass; returns the output (ReLU unless `activate` is false)
    /// and the intermediates needed by [`FactoredLayer::backward`].
    pub fn forward(
        &self,
        gates: &GateVector,
        h: &SeqTensor,
        activate: bool,
    ) -> Result<(SeqTensor, LayerCache)> {
        if h.dim() != self.in_dim() {
            return Err(NasError::shape(
                format!("layer input dim {}", self.in_dim()),
                format!("tensor dim {}", h.dim()),
            ));
        }
        self.check_gates(gates)?;
        let frames = h.frames();
        let n = self.bottleneck();
        let out_dim = self.out_dim();

        let mut linear_out = Vec::with_capacity(self.linear.len());
        let mut z = SeqTensor::zeros(frames, n);
        for (block, &g) in self.linear.iter().zip(&gates.left) {
            let mut u = SeqTensor::zeros(frames, n);
            for t in 0..frames {
                let src = h.frame(shifted(t, -(block.offset as isize), frames));
                let dst = u.frame_mut(t);
                for (k, d) in dst.iter_mut().enumerate() {
                    *d = dot(block.weight.row(k), src);
                }
            }
            for (zv, uv) in z.data_mut().iter_mut().zip(u.data()) {
                *zv += g * uv;
            }
            linear_out.push(u);
        }

        let mut z_gated = z.clone();
        for t in 0..frames {
            for (v, g) in z_gated.frame_mut(t).iter_mut().zip(&gates.dim) {
                *v *= g;
            }
        }

        let mut affine_out = Vec::with_capacity(self.affine.len());
        let mut y = SeqTensor::zeros(frames, out_dim);
        for (block, &g) in self.affine.iter().zip(&gates.right) {
            let mut v = SeqTensor::zeros(frames, out_dim);
            for t in 0..frames {
                let src = z_gated.frame(shifted(t, block.offset as isize, frames));
                let dst = v.frame_mut(t);
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = dot(block.weight.row(j), src);
                }
            }
            for (yv, vv) in y.data_mut().iter_mut().zip(v.data()) {
                *yv += g * vv;
            }
            affine_out.push(v);
        }
        for t in 0..frames {
            for (yv, b) in y.frame_mut(t).iter_mut().zip(&self.bias) {
                *yv += b;
            }
        }

        let out = if activate { crate::numeric::relu(&y) } else { y.clone() };
        let cache = LayerCache {
            input: h.clone(),
            linear_out,
            z,
            z_gated,
            affine_out,
            pre_activation: y,
            activate,
        };
        Ok((out, cache))
    }

    /// Forward with every gate open; the natural pass of an extracted candidate.
    pub fn forward_dense(&self, h: &SeqTensor, activate: bool) -> Result<SeqTensor> {
        let gates = GateVector::dense(self.linear.len(), self.affine.len(), self.bottleneck());
        Ok(self.forward(&gates, h, activate)?.0)
    }

    /// Reverse-mode gradients of the gated forward pass.
    ///
    /// `d_out` is the loss gradient at the layer output. Returns the parameter and
    /// gate gradients plus the gradient at the layer input.
    pub fn backward(
        &self,
        gates: &GateVector,
        cache: &LayerCache,
        d_out: &SeqTensor,
    ) -> Result<(LayerGrads, SeqTensor)> {
        self.check_gates(gates)?;
        let frames = cache.input.frames();
        if d_out.frames() != frames || d_out.dim() != self.out_dim() {
            return Err(NasError::shape(
                format!("{}x{}", frames, self.out_dim()),
                format!("upstream {}x{}", d_out.frames(), d_out.dim()),
            ));
        }
        let n = self.bottleneck();
        let in_dim = self.in_dim();
        let out_dim = self.out_dim();

        let mut dy = d_out.clone();
        if cache.activate {
            for (d, &y) in dy.data_mut().iter_mut().zip(cache.pre_activation.data()) {
                if y <= 0.0 {
                    *d = 0.0;
                }
            }
        }

        let mut bias = vec![0.0; out_dim];
        for t in 0..frames {
            for (b, d) in bias.iter_mut().zip(dy.frame(t)) {
                *b += d;
            }
        }

        let mut d_zg = SeqTensor::zeros(frames, n);
        let mut affine = Vec::with_capacity(self.affine.len());
        let mut gate_right = Vec::with_capacity(self.affine.len());
        for ((block, &g), v) in self.affine.iter().zip(&gates.right).zip(&cache.affine_out) {
            gate_right.push(dot(dy.data(), v.data()));
            let mut grad = Matrix::zeros(out_dim, n);
            for t in 0..frames {
                let s = shifted(t, block.offset as isize, frames);
                let dyt = dy.frame(t);
                let zs = cache.z_gated.frame(s);
                for (j, &dj) in dyt.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    let gd = g * dj;
                    for (gv, zk) in grad.row_mut(j).iter_mut().zip(zs) {
                        *gv += gd * zk;
                    }
                    let wrow = block.weight.row(j);
                    for (dz, w) in d_zg.frame_mut(s).iter_mut().zip(wrow) {
                        *dz += gd * w;
                    }
                }
            }
            affine.push(grad);
        }

        let mut gate_dim = vec![0.0; n];
        let mut dz = d_zg.clone();
        for t in 0..frames {
            let zt = cache.z.frame(t);
            for k in 0..n {
                gate_dim[k] += d_zg.frame(t)[k] * zt[k];
            }
            for (d, g) in dz.frame_mut(t).iter_mut().zip(&gates.dim) {
                *d *= g;
            }
        }

        let mut d_in = SeqTensor::zeros(frames, in_dim);
        let mut linear = Vec::with_capacity(self.linear.len());
        let mut gate_left = Vec::with_capacity(self.linear.len());
        for ((block, &g), u) in self.linear.iter().zip(&gates.left).zip(&cache.linear_out) {
            gate_left.push(dot(dz.data(), u.data()));
            let mut grad = Matrix::zeros(n, in_dim);
            for t in 0..frames {
                let s = shifted(t, -(block.offset as isize), frames);
                let dzt = dz.frame(t);
                let hs = cache.input.frame(s);
                for (k, &dk) in dzt.iter().enumerate() {
                    if dk == 0.0 {
                        continue;
                    }
                    let gd = g * dk;
                    for (gv, x) in grad.row_mut(k).iter_mut().zip(hs) {
                        *gv += gd * x;
                    }
                    let wrow = block.weight.row(k);
                    for (di, w) in d_in.frame_mut(s).iter_mut().zip(wrow) {
                        *di += gd * w;
                    }
                }
            }
            linear.push(grad);
        }

        Ok((
            LayerGrads {
                linear,
                affine,
                bias,
                gate_left,
                gate_right,
                gate_dim,
            },
            d_in,
        ))
    }

    /// Horizontal concatenation `[B_0 | B_1 | ...]` of the linear blocks.
    pub fn linear_stack(&self) -> Matrix {
        let n = self.bottleneck();
        let d = self.in_dim();
        let blocks = self.linear.len();
        Matrix::from_fn(n, blocks * d, |i, j| self.linear[j / d].weight.get(i, j % d))
    }

    fn set_linear_stack(&mut self, m: &Matrix) {
        let d = self.in_dim();
        for (b, block) in self.linear.iter_mut().enumerate() {
            for i in 0..block.weight.rows() {
                for j in 0..d {
                    block.weight.set(i, j, m.get(i, b * d + j));
                }
            }
        }
    }

    /// `‖M Mᵀ - αI‖_F` of the linear stack, with `α = tr(PPᵀ)/tr(P)`.
    pub fn orthogonality_residual(&self) -> f64 {
        orthogonality_residual(&self.linear_stack())
    }

    /// One floating-scale semi-orthogonal update of the linear stack.
    pub fn semi_orthogonal_step(&mut self) -> Result<()> {
        let updated = semi_orthogonal_update(&self.linear_stack())?;
        self.set_linear_stack(&updated);
        Ok(())
    }
}

fn gram_and_scale(m: &Matrix) -> (Matrix, f64, f64) {
    let p = m
        .mat_mul_transposed(m)
        .expect("M·Mᵀ is always well-shaped");
    let tr_p = p.trace();
    // P is symmetric, so tr(P Pᵀ) is the squared Frobenius norm.
    let tr_ppt: f64 = p.data().iter().map(|v| v * v).sum();
    (p, tr_p, tr_ppt)
}

/// `‖M Mᵀ - αI‖_F` with `α = tr(PPᵀ)/tr(P)`; zero for an all-zero matrix.
pub fn orthogonality_residual(m: &Matrix) -> f64 {
    let (mut p, tr_p, tr_ppt) = gram_and_scale(m);
    if tr_p == 0.0 {
        return 0.0;
    }
    let alpha = tr_ppt / tr_p;
    for i in 0..p.rows() {
        let v = p.get(i, i) - alpha;
        p.set(i, i, v);
    }
    p.frobenius_norm()
}

/// `M - ½ (P - αI) M / α` with `P = M Mᵀ`, `α = tr(PPᵀ)/tr(P)`.
pub fn semi_orthogonal_update(m: &Matrix) -> Result<Matrix> {
    let (mut p, tr_p, tr_ppt) = gram_and_scale(m);
    if tr_p == 0.0 {
        return Err(NasError::Degenerate(
            "linear blocks are all zero; trace(M Mᵀ) = 0".into(),
        ));
    }
    let alpha = tr_ppt / tr_p;
    for i in 0..p.rows() {
        let v = p.get(i, i) - alpha;
        p.set(i, i, v);
    }
    let correction = p.mat_mul(m)?;
    let scale = 0.5 / alpha;
    let data = m
        .data()
        .iter()
        .zip(correction.data())
        .map(|(a, c)| a - scale * c)
        .collect();
    Matrix::from_vec(m.rows(), m.cols(), data)
}

/// The standalone layer of one candidate: `B_0` and `B_c` truncated to their
/// first `n` rows, `A_0` and `A_r` truncated to their first `n` columns.
pub fn extract_layer(layer: &FactoredLayer, choice: LayerChoice, dims: &[usize]) -> Result<FactoredLayer> {
    layer.check_choice(choice, dims)?;
    let n = dims[choice.dim_index];
    let mut left = vec![0];
    if choice.left > 0 {
        left.push(choice.left);
    }
    let mut right = vec![0];
    if choice.right > 0 {
        right.push(choice.right);
    }
    let linear = left
        .iter()
        .map(|&c| ContextBlock {
            offset: c,
            weight: layer.linear[c].weight.top_rows(n),
        })
        .collect();
    let affine = right
        .iter()
        .map(|&r| ContextBlock {
            offset: r,
            weight: layer.affine[r].weight.left_cols(n),
        })
        .collect();
    Ok(FactoredLayer {
        linear,
        affine,
        bias: layer.bias.clone(),
    })
}

/// Forward pass of a single candidate of a super-network layer.
pub fn layer_forward_onehot(
    layer: &FactoredLayer,
    choice: LayerChoice,
    dims: &[usize],
    h: &SeqTensor,
    activate: bool,
) -> Result<SeqTensor> {
    extract_layer(layer, choice, dims)?.forward_dense(h, activate)
}

/// `n·D_in·(1 + [c>0]) + D_out·n·(1 + [r>0]) + D_out` for `n = dims[dim_index]`.
pub fn candidate_param_count(layer: &FactoredLayer, choice: LayerChoice, dims: &[usize]) -> usize {
    choice_param_count(layer.in_dim(), layer.out_dim(), choice, dims)
}

pub(crate) fn choice_param_count(in_dim: usize, out_dim: usize, choice: LayerChoice, dims: &[usize]) -> usize {
    let n = dims[choice.dim_index];
    let lin = 1 + usize::from(choice.left > 0);
    let aff = 1 + usize::from(choice.right > 0);
    n * in_dim * lin + out_dim * n * aff + out_dim
}
