//! Decoder-style transformer with masked ReLU-score attention.
//!
//! Attention here is deliberately nonstandard: raw inner-product scores pass
//! through a ReLU (no softmax, no 1/sqrt(d) scale) and the value sum over the
//! causal prefix j <= i is averaged with weight 1/i. Every layer is residual.
//! An optional per-column l2 clip bounds token norms between layers.

pub mod embed;
pub mod head;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use embed::EmbeddingSpec;
use head::HeadMode;
use serde::{Deserialize, Serialize};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![T::zero(); self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = T::zero();
            for (w, v) in row.iter().zip(x) {
                acc += *w * *v;
            }
            y[r] = acc;
        }
        y
    }

    /// Transpose-vector product M^T x.
    pub fn t_matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (out, w) in y.iter_mut().zip(row) {
                *out += *w * x[r];
            }
        }
        y
    }

    /// Spectral norm by power iteration on M^T M: 200 rounds or relative
    /// change below 1e-10, deterministic start vector.
    pub fn op_norm(&self) -> T {
        if self.rows == 0 || self.cols == 0 {
            return T::zero();
        }
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x9e37_79b9_7f4a_7c15);
        let mut v: Vec<T> = (0..self.cols).map(|_| T::of(rng.random::<f64>() * 2.0 - 1.0)).collect();
        let norm = |x: &[T]| x.iter().fold(T::zero(), |acc, &e| acc + e * e).sqrt();
        let nv = norm(&v);
        if nv == T::zero() {
            return T::zero();
        }
        for e in v.iter_mut() {
            *e /= nv;
        }
        let mut sigma = T::zero();
        for _ in 0..200 {
            let y = self.matvec(&v);
            let next_sigma = norm(&y);
            if next_sigma == T::zero() {
                return T::zero();
            }
            let z = self.t_matvec(&y);
            let nz = norm(&z);
            if nz == T::zero() {
                return next_sigma;
            }
            for (e, &zi) in v.iter_mut().zip(&z) {
                *e = zi / nz;
            }
            let rel = ((next_sigma - sigma) / next_sigma).abs();
            sigma = next_sigma;
            if rel < T::of(1e-10) {
                break;
            }
        }
        sigma
    }
}

/// Sequence of token columns, stored column-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMatrix<T> {
    pub d: usize,
    data: Vec<T>,
}

impl<T: Scalar> TokenMatrix<T> {
    pub fn new(d: usize) -> Self {
        TokenMatrix { d, data: Vec::new() }
    }

    pub fn from_cols(d: usize, cols: &[Vec<T>]) -> Self {
        let mut m = TokenMatrix::new(d);
        for c in cols {
            m.push_col(c);
        }
        m
    }

    pub fn zeros(d: usize, n: usize) -> Self {
        TokenMatrix { d, data: vec![T::zero(); d * n] }
    }

    pub fn n(&self) -> usize {
        if self.d == 0 {
            0
        } else {
            self.data.len() / self.d
        }
    }

    pub fn col(&self, i: usize) -> &[T] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn col_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn push_col(&mut self, col: &[T]) {
        assert_eq!(col.len(), self.d, "column length must equal d");
        self.data.extend_from_slice(col);
    }
}

/// One attention head's square parameter matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnHead<T> {
    pub q: Mat<T>,
    pub k: Mat<T>,
    pub v: Mat<T>,
}

impl<T: Scalar> AttnHead<T> {
    pub fn zeros(d: usize) -> Self {
        AttnHead { q: Mat::zeros(d, d), k: Mat::zeros(d, d), v: Mat::zeros(d, d) }
    }
}

/// Elementwise ReLU or whole-vector softmax on the MLP hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
}

/// Residual two-matrix MLP: h + W2 sigma(W1 h).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpLayer<T> {
    pub w1: Mat<T>,
    pub w2: Mat<T>,
    pub activation: Activation,
}

impl<T: Scalar> MlpLayer<T> {
    pub fn zeros(d: usize, hidden: usize, activation: Activation) -> Self {
        MlpLayer { w1: Mat::zeros(hidden, d), w2: Mat::zeros(d, hidden), activation }
    }
}

/// One attention + MLP block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfLayer<T> {
    pub heads: Vec<AttnHead<T>>,
    pub mlp: MlpLayer<T>,
}

/// What the model's token columns mean: structured trajectory embeddings
/// with a designated output block, or raw d-dimensional tokens whose entire
/// final column serves as the output logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelIo {
    Structured(EmbeddingSpec),
    Raw { dim: usize },
}

impl ModelIo {
    pub fn dim(&self) -> usize {
        match self {
            ModelIo::Structured(spec) => spec.dim(),
            ModelIo::Raw { dim } => *dim,
        }
    }

    /// Coordinate range of the final token read out as logits.
    pub fn logit_range(&self) -> std::ops::Range<usize> {
        match self {
            ModelIo::Structured(spec) => spec.part_c(),
            ModelIo::Raw { dim } => 0..*dim,
        }
    }

    /// The embedding layout, for models that consume trajectory prompts.
    pub fn embedding_spec(&self) -> Result<&EmbeddingSpec> {
        match self {
            ModelIo::Structured(spec) => Ok(spec),
            ModelIo::Raw { .. } => Err(Error::invalid(
                "model works on raw tokens and cannot embed trajectory prompts",
            )),
        }
    }
}

/// Full model: layer stack, optional clip radius, output head, and the
/// token layout it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerParams<T> {
    pub layers: Vec<TfLayer<T>>,
    pub clip: Option<T>,
    pub head: HeadMode,
    pub io: ModelIo,
    /// Fixed diagonal input standardization applied to embedded tokens
    /// before the first layer (empty = identity). Trained models store the
    /// reciprocal RMS of each embedding coordinate over their pretraining
    /// set so that raw position coordinates (i, i^2, g) enter at O(1) and
    /// per-coordinate optimizer steps stay well conditioned; hand-built
    /// models consume raw coordinates and leave this empty. Not a trainable
    /// parameter: excluded from `flatten`/`assign_from_flat`.
    #[serde(default)]
    pub input_scale: Vec<f64>,
}

impl<T: Scalar> TransformerParams<T> {
    pub fn dim(&self) -> usize {
        self.io.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (l, layer) in self.layers.iter().enumerate() {
            for (m, head) in layer.heads.iter().enumerate() {
                for (name, mat) in [("Q", &head.q), ("K", &head.k), ("V", &head.v)] {
                    if mat.rows != d || mat.cols != d {
                        return Err(Error::dims(format!(
                            "layer {l} head {m} {name}: {}x{} but d = {d}",
                            mat.rows, mat.cols
                        )));
                    }
                }
            }
            let mlp = &layer.mlp;
            if mlp.w1.cols != d || mlp.w2.rows != d || mlp.w1.rows != mlp.w2.cols {
                return Err(Error::dims(format!("layer {l} mlp shapes inconsistent with d = {d}")));
            }
        }
        if let Some(r) = self.clip {
            if !(r > T::zero()) {
                return Err(Error::invalid("clip radius must be positive"));
            }
        }
        if let HeadMode::Zeta(z) = self.head {
            if !(0.0 < z && z <= 1.0) {
                return Err(Error::invalid(format!("zeta {z} outside (0, 1]")));
            }
        }
        if !self.input_scale.is_empty() {
            if self.input_scale.len() != d {
                return Err(Error::dims(format!(
                    "input scale has {} entries but d = {d}",
                    self.input_scale.len()
                )));
            }
            if self.input_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::invalid("input scale entries must be finite and positive"));
            }
        }
        Ok(())
    }

    /// Same shapes, all matrices zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for layer in &mut out.layers {
            for head in &mut layer.heads {
                for m in [&mut head.q, &mut head.k, &mut head.v] {
                    m.data.iter_mut().for_each(|x| *x = T::zero());
                }
            }
            layer.mlp.w1.data.iter_mut().for_each(|x| *x = T::zero());
            layer.mlp.w2.data.iter_mut().for_each(|x| *x = T::zero());
        }
        out
    }

    /// Flattens every parameter matrix in a fixed order (layers, then heads
    /// Q/K/V, then W1/W2).
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for head in &layer.heads {
                out.extend_from_slice(&head.q.data);
                out.extend_from_slice(&head.k.data);
                out.extend_from_slice(&head.v.data);
            }
            out.extend_from_slice(&layer.mlp.w1.data);
            out.extend_from_slice(&layer.mlp.w2.data);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten); lengths must match.
    pub fn assign_from_flat(&mut self, flat: &[T]) {
        let mut k = 0;
        let mut take = |dst: &mut Vec<T>| {
            let len = dst.len();
            dst.copy_from_slice(&flat[k..k + len]);
            k += len;
        };
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                take(&mut head.q.data);
                take(&mut head.k.data);
                take(&mut head.v.data);
            }
            take(&mut layer.mlp.w1.data);
            take(&mut layer.mlp.w2.data);
        }
        assert_eq!(k, flat.len(), "flat parameter length mismatch");
    }
}

fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Masked multi-head attention: out_i = h_i + sum_m (1/i) sum_{j<=i}
/// relu(<Q_m h_i, K_m h_j>) V_m h_j, with i counted from 1.
pub fn attn_forward<T: Scalar>(heads: &[AttnHead<T>], h: &TokenMatrix<T>) -> Result<TokenMatrix<T>> {
    let d = h.d;
    for head in heads {
        for m in [&head.q, &head.k, &head.v] {
            if m.rows != d || m.cols != d {
                return Err(Error::dims(format!("head matrix {}x{} does not match d = {d}", m.rows, m.cols)));
            }
        }
    }
    let n = h.n();
    let mut out = h.clone();
    for head in heads {
        let mut qh = TokenMatrix::zeros(d, n);
        let mut kh = TokenMatrix::zeros(d, n);
        let mut vh = TokenMatrix::zeros(d, n);
        for i in 0..n {
            qh.col_mut(i).copy_from_slice(&head.q.matvec(h.col(i)));
            kh.col_mut(i).copy_from_slice(&head.k.matvec(h.col(i)));
            vh.col_mut(i).copy_from_slice(&head.v.matvec(h.col(i)));
        }
        for i in 0..n {
            let w = T::one() / T::of_usize(i + 1);
            let qi = qh.col(i);
            let mut acc = vec![T::zero(); d];
            for j in 0..=i {
                let mut score = T::zero();
                for (qq, kk) in qi.iter().zip(kh.col(j)) {
                    score += *qq * *kk;
                }
                let score = relu(score);
                if score > T::zero() {
                    for (a, &vv) in acc.iter_mut().zip(vh.col(j)) {
                        *a += score * vv;
                    }
                }
            }
            for (o, a) in out.col_mut(i).iter_mut().zip(&acc) {
                *o += w * *a;
            }
        }
    }
    Ok(out)
}

/// Residual MLP applied per column.
pub fn mlp_forward<T: Scalar>(mlp: &MlpLayer<T>, h: &TokenMatrix<T>) -> Result<TokenMatrix<T>> {
    if mlp.w1.cols != h.d || mlp.w2.rows != h.d || mlp.w1.rows != mlp.w2.cols {
        return Err(Error::dims("mlp shapes do not match token dimension"));
    }
    let mut out = h.clone();
    for i in 0..h.n() {
        let u = mlp.w1.matvec(h.col(i));
        let z = match mlp.activation {
            Activation::Relu => u.into_iter().map(relu).collect::<Vec<_>>(),
            Activation::Softmax => crate::util::softmax(&u),
        };
        let add = mlp.w2.matvec(&z);
        for (o, a) in out.col_mut(i).iter_mut().zip(&add) {
            *o += *a;
        }
    }
    Ok(out)
}

/// Multiplies every token coordinate by the model's fixed input
/// standardization (no-op for an empty scale). Callers that embed prompts
/// for a trained model apply this between embedding and the forward pass;
/// staged token matrices for hand-built weights are consumed raw.
pub fn apply_input_scale<T: Scalar>(h: &mut TokenMatrix<T>, scale: &[f64]) {
    if scale.is_empty() {
        return;
    }
    assert_eq!(h.d, scale.len(), "input scale length must match token dimension");
    for i in 0..h.n() {
        for (x, &s) in h.col_mut(i).iter_mut().zip(scale) {
            *x *= T::of(s);
        }
    }
}

/// Projects each column onto the l2 ball of radius `r`.
pub fn clip_columns<T: Scalar>(h: &mut TokenMatrix<T>, r: T) {
    for i in 0..h.n() {
        let col = h.col_mut(i);
        let norm = col.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt();
        if norm > r {
            let scale = r / norm;
            col.iter_mut().for_each(|x| *x *= scale);
        }
    }
}

/// Full forward pass: clip (if set), then attention + MLP + clip per layer.
pub fn tf_forward<T: Scalar>(params: &TransformerParams<T>, h: &TokenMatrix<T>) -> Result<TokenMatrix<T>> {
    let mut x = h.clone();
    if let Some(r) = params.clip {
        clip_columns(&mut x, r);
    }
    for layer in &params.layers {
        x = attn_forward(&layer.heads, &x)?;
        x = mlp_forward(&layer.mlp, &x)?;
        if let Some(r) = params.clip {
            clip_columns(&mut x, r);
        }
    }
    Ok(x)
}

/// Per-layer intermediates kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    /// Layer input tokens.
    pub input: TokenMatrix<T>,
    /// Per head: Q h_i, K h_i, V h_i columns.
    pub qh: Vec<TokenMatrix<T>>,
    pub kh: Vec<TokenMatrix<T>>,
    pub vh: Vec<TokenMatrix<T>>,
    /// Per head: raw (pre-ReLU) scores, row-major [i * n + j], j <= i.
    pub scores: Vec<Vec<T>>,
    /// Tokens after attention (MLP input).
    pub post_attn: TokenMatrix<T>,
    /// MLP hidden pre-activation and activation output, d' x n.
    pub pre_act: TokenMatrix<T>,
    pub act_out: TokenMatrix<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub layers: Vec<LayerCache<T>>,
    pub output: TokenMatrix<T>,
}

/// Forward pass that records everything the reverse pass needs. Clipping is
/// not differentiated here, so a clip radius is rejected.
pub fn tf_forward_cached<T: Scalar>(params: &TransformerParams<T>, h: &TokenMatrix<T>) -> Result<ForwardCache<T>> {
    if params.clip.is_some() {
        return Err(Error::invalid("cached forward (training) does not support a clip radius"));
    }
    let d = h.d;
    let n = h.n();
    let mut x = h.clone();
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let input = x.clone();
        let heads = &layer.heads;
        let mut qh = Vec::with_capacity(heads.len());
        let mut kh = Vec::with_capacity(heads.len());
        let mut vh = Vec::with_capacity(heads.len());
        let mut scores = Vec::with_capacity(heads.len());
        let mut post_attn = x.clone();
        for head in heads {
            if head.q.rows != d || head.q.cols != d {
                return Err(Error::dims("head matrix does not match token dimension"));
            }
            let mut qm = TokenMatrix::zeros(d, n);
            let mut km = TokenMatrix::zeros(d, n);
            let mut vm = TokenMatrix::zeros(d, n);
            for i in 0..n {
                qm.col_mut(i).copy_from_slice(&head.q.matvec(x.col(i)));
                km.col_mut(i).copy_from_slice(&head.k.matvec(x.col(i)));
                vm.col_mut(i).copy_from_slice(&head.v.matvec(x.col(i)));
            }
            let mut sc = vec![T::zero(); n * n];
            for i in 0..n {
                let w = T::one() / T::of_usize(i + 1);
                let qi = qm.col(i);
                let mut acc = vec![T::zero(); d];
                for j in 0..=i {
                    let mut s = T::zero();
                    for (qq, kk) in qi.iter().zip(km.col(j)) {
                        s += *qq * *kk;
                    }
                    sc[i * n + j] = s;
                    if s > T::zero() {
                        for (a, &vv) in acc.iter_mut().zip(vm.col(j)) {
                            *a += s * vv;
                        }
                    }
                }
                for (o, a) in post_attn.col_mut(i).iter_mut().zip(&acc) {
                    *o += w * *a;
                }
            }
            qh.push(qm);
            kh.push(km);
            vh.push(vm);
            scores.push(sc);
        }
        let hidden = layer.mlp.w1.rows;
        if layer.mlp.w1.cols != d || layer.mlp.w2.rows != d || layer.mlp.w2.cols != hidden {
            return Err(Error::dims("mlp shapes do not match token dimension"));
        }
        let mut pre_act = TokenMatrix::zeros(hidden, n);
        let mut act_out = TokenMatrix::zeros(hidden, n);
        let mut next = post_attn.clone();
        for i in 0..n {
            let u = layer.mlp.w1.matvec(post_attn.col(i));
            let z = match layer.mlp.activation {
                Activation::Relu => u.iter().map(|&x| relu(x)).collect::<Vec<_>>(),
                Activation::Softmax => crate::util::softmax(&u),
            };
            pre_act.col_mut(i).copy_from_slice(&u);
            act_out.col_mut(i).copy_from_slice(&z);
            let add = layer.mlp.w2.matvec(&z);
            for (o, a) in next.col_mut(i).iter_mut().zip(&add) {
                *o += *a;
            }
        }
        layers.push(LayerCache { input, qh, kh, vh, scores, post_attn, pre_act, act_out });
        x = next;
    }
    Ok(ForwardCache { layers, output: x })
}

/// Model norm: max over layers of
/// max_m max(|Q_m|, |K_m|) + sum_m |V_m| + |W1| + |W2| in operator norm.
pub fn param_norm<T: Scalar>(params: &TransformerParams<T>) -> T {
    let mut best = T::zero();
    for layer in &params.layers {
        let mut qk = T::zero();
        let mut vsum = T::zero();
        for head in &layer.heads {
            qk = qk.max(head.q.op_norm().max(head.k.op_norm()));
            vsum += head.v.op_norm();
        }
        let total = qk + vsum + layer.mlp.w1.op_norm() + layer.mlp.w2.op_norm();
        best = best.max(total);
    }
    best
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    params: TransformerParams<f64>,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Writes a versioned JSON checkpoint.
pub fn save_checkpoint(path: &std::path::Path, params: &TransformerParams<f64>) -> Result<()> {
    let file = CheckpointFile { version: CHECKPOINT_VERSION, params: params.clone() };
    let buf = serde_json::to_vec(&file)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a checkpoint, rejecting unknown versions.
pub fn load_checkpoint(path: &std::path::Path) -> Result<TransformerParams<f64>> {
    let buf = std::fs::read(path)?;
    let file: CheckpointFile = serde_json::from_slice(&buf)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Parse { line: 0, msg: format!("unsupported checkpoint version {}", file.version) });
    }
    file.params.validate()?;
    Ok(file.params)
}
