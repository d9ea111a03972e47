//! Supervised pretraining of the sequence model on augmented trajectory
//! datasets, with hand-written reverse-mode gradients, and in-context
//! inference with frozen parameters.
//!
//! Training examples are (own-view prefix, query state, target action)
//! triples read off the augmented dataset: at every global time t and every
//! state s, the target is the action the data-generating algorithm sampled
//! at (t, s). The loss is the mean negative log-likelihood of the targets
//! under the model's softmax head.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DecentralizedView, PlayerTag, TrajectoryRecord};
use crate::equilibrium::{joint_marginals, StagePolicy};
use crate::error::{Error, Result};
use crate::game::{EpisodeStep, MarkovGame};
use crate::transformer::embed::{EmbedStep, EmbeddingSpec, QueryPos, ViewMode};
use crate::transformer::head::{apply_head, HeadMode};
use crate::transformer::{
    tf_forward, tf_forward_cached, Activation, AttnHead, Mat, MlpLayer, ModelIo, TfLayer,
    TokenMatrix, TransformerParams,
};
use crate::util::{derive_seed, sample_categorical};

/// Optimizer family for the parameter updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerTag {
    Sgd,
    /// Per-parameter adaptive step sizes from first/second moment
    /// accumulators (decay 0.9 / 0.999, epsilon 1e-8), bias-corrected.
    Adaptive,
}

/// Training hyperparameters and model dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerTag,
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    /// MLP hidden width d'.
    pub hidden: usize,
    /// Maximum prompt length in tokens; `None` keeps full prefixes. A window
    /// of W tokens keeps the most recent (W - 1) / 2 steps plus the query.
    pub window: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 5e-4,
            optimizer: OptimizerTag::Adaptive,
            seed: 0,
            layers: 2,
            heads: 4,
            hidden: 32,
            window: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.layers == 0 || self.heads == 0 || self.hidden == 0 {
            return Err(Error::invalid("epochs, batch size, layers, heads, and hidden width must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive and finite"));
        }
        if let Some(w) = self.window {
            if w == 0 {
                return Err(Error::invalid("token window must be positive"));
            }
        }
        Ok(())
    }

    /// Steps of history that fit a token window (2 tokens per step + query).
    pub fn window_steps(window: Option<usize>) -> Option<usize> {
        window.map(|w| w.saturating_sub(1) / 2)
    }
}

/// Gradient-check outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRecord {
    pub max_rel_err: f64,
    pub probes: usize,
}

/// Loss trace of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean NLL over the evaluation subset before any update.
    pub initial_nll: f64,
    /// Mean training NLL per epoch (average of batch losses).
    pub epoch_nll: Vec<f64>,
    pub epoch_secs: Vec<f64>,
    /// Mean NLL over the evaluation subset after the last epoch.
    pub final_nll: f64,
    pub grad_check: Option<GradCheckRecord>,
}

/// One training example: a prompt prefix, the query position, and the
/// index of the action the data-generating algorithm actually drew there.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub steps: &'a [EmbedStep],
    pub query: QueryPos,
    pub target: usize,
}

#[derive(Debug, Clone, Copy)]
struct TargetRef {
    rec: u32,
    t: u32,
    s: u32,
    action: u32,
}

/// A dataset converted to embeddable form: per-record step sequences plus
/// the flat list of (record, t, s, target) supervision points.
#[derive(Debug, Clone)]
pub struct TrainSet {
    spec: EmbeddingSpec,
    records: Vec<Vec<EmbedStep>>,
    targets: Vec<TargetRef>,
}

impl TrainSet {
    /// Build from one player's views (the two players train separately).
    pub fn from_decentralized(views: &[DecentralizedView]) -> Result<Self> {
        let first = views.first().ok_or_else(|| Error::invalid("empty dataset"))?;
        let mode = match first.player {
            PlayerTag::Max => ViewMode::DecentralizedMax,
            PlayerTag::Min => ViewMode::DecentralizedMin,
        };
        let spec = EmbeddingSpec::new(mode, first.dims);
        let horizon = first.dims.horizon;
        let mut records = Vec::with_capacity(views.len());
        let mut targets = Vec::new();
        for (ri, view) in views.iter().enumerate() {
            if view.player != first.player || view.dims != first.dims {
                return Err(Error::invalid("views mix players or game dimensions"));
            }
            let steps: Vec<EmbedStep> = view
                .steps
                .iter()
                .map(|st| EmbedStep {
                    g: st.g,
                    h: st.h,
                    t: (st.g - 1) * horizon + st.h,
                    s: st.s,
                    a: st.a,
                    b: None,
                    r: st.r,
                })
                .collect();
            for ag in &view.aug {
                targets.push(TargetRef { rec: ri as u32, t: ag.t as u32, s: ag.s as u32, action: ag.a as u32 });
            }
            records.push(steps);
        }
        Ok(TrainSet { spec, records, targets })
    }

    /// Build from full records for the centralized controller; targets are
    /// joint action indices a * B + b.
    pub fn from_centralized(records_in: &[TrajectoryRecord]) -> Result<Self> {
        let first = records_in.first().ok_or_else(|| Error::invalid("empty dataset"))?;
        let spec = EmbeddingSpec::new(ViewMode::Centralized, first.dims);
        let horizon = first.dims.horizon;
        let b_count = first.dims.min_actions;
        let mut records = Vec::with_capacity(records_in.len());
        let mut targets = Vec::new();
        for (ri, record) in records_in.iter().enumerate() {
            if record.dims != first.dims {
                return Err(Error::invalid("records mix game dimensions"));
            }
            let steps: Vec<EmbedStep> = record
                .base_steps
                .iter()
                .map(|st| EmbedStep {
                    g: st.g,
                    h: st.h,
                    t: st.time(horizon),
                    s: st.s,
                    a: st.a,
                    b: Some(st.b),
                    r: st.r,
                })
                .collect();
            for ag in &record.augmented {
                targets.push(TargetRef {
                    rec: ri as u32,
                    t: ag.t as u32,
                    s: ag.s as u32,
                    action: (ag.a * b_count + ag.b) as u32,
                });
            }
            records.push(steps);
        }
        Ok(TrainSet { spec, records, targets })
    }

    pub fn spec(&self) -> &EmbeddingSpec {
        &self.spec
    }

    /// Number of supervision points (records x T x S).
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Materialize example `k`, truncating the prefix to the window.
    pub fn example(&self, k: usize, window: Option<usize>) -> Example<'_> {
        let tr = self.targets[k];
        let horizon = self.spec.dims.horizon;
        let t = tr.t as usize;
        let prefix = &self.records[tr.rec as usize][..t - 1];
        let prefix = truncate_prefix(prefix, window);
        let query = QueryPos {
            g: (t - 1) / horizon + 1,
            h: (t - 1) % horizon + 1,
            t,
            s: tr.s as usize,
        };
        Example { steps: prefix, query, target: tr.action as usize }
    }
}

/// Keep only the most recent steps that fit the token window.
pub fn truncate_prefix(prefix: &[EmbedStep], window: Option<usize>) -> &[EmbedStep] {
    match TrainConfig::window_steps(window) {
        Some(k) if prefix.len() > k => &prefix[prefix.len() - k..],
        _ => prefix,
    }
}

fn logits_of(params: &TransformerParams<f64>, out: &TokenMatrix<f64>) -> Vec<f64> {
    let range = params.io.logit_range();
    out.col(out.n() - 1)[range].to_vec()
}

/// Negative log-likelihood of `target` given raw logits, for the model's
/// head. Softmax uses a max-subtracted log-sum-exp.
fn head_nll(head: HeadMode, logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::invalid(format!("target {target} outside {} outputs", logits.len())));
    }
    match head {
        HeadMode::Simplex => Err(Error::invalid(
            "simplex head is not differentiable; train and evaluate likelihoods with the softmax or biased head",
        )),
        HeadMode::Softmax => {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            Ok(lse - logits[target])
        }
        HeadMode::Zeta(_) => {
            let p = apply_head(head, logits)?;
            Ok(-p[target].ln())
        }
    }
}

/// Mean NLL of a raw token prompt (logits read from the final column).
pub fn mle_loss_tokens(params: &TransformerParams<f64>, tokens: &TokenMatrix<f64>, target: usize) -> Result<f64> {
    let out = tf_forward(params, tokens)?;
    head_nll(params.head, &logits_of(params, &out), target)
}

/// Mean NLL of a batch of examples under the model's head.
pub fn mle_loss(params: &TransformerParams<f64>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let spec = params.io.embedding_spec()?;
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|ex| {
            let mut tokens = crate::transformer::embed::embed::<f64>(spec, ex.steps, &ex.query)?;
            crate::transformer::apply_input_scale(&mut tokens, &params.input_scale);
            mle_loss_tokens(params, &tokens, ex.target)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn outer_acc(mat: &mut Mat<f64>, g: &[f64], x: &[f64]) {
    debug_assert_eq!(mat.rows, g.len());
    debug_assert_eq!(mat.cols, x.len());
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        let row = &mut mat.data[r * x.len()..(r + 1) * x.len()];
        for (w, &xv) in row.iter_mut().zip(x) {
            *w += gr * xv;
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Reverse-mode gradient of the softmax-head NLL for one token prompt.
/// Returns the gradient in the same structure as the parameters plus the
/// sample loss.
pub fn grad_tokens(
    params: &TransformerParams<f64>,
    tokens: &TokenMatrix<f64>,
    target: usize,
) -> Result<(TransformerParams<f64>, f64)> {
    if params.head != HeadMode::Softmax {
        return Err(Error::invalid("gradients are defined for the softmax head only"));
    }
    let cache = tf_forward_cached(params, tokens)?;
    let d = tokens.d;
    let n = tokens.n();
    let range = params.io.logit_range();
    let logits = logits_of(params, &cache.output);
    let loss = head_nll(HeadMode::Softmax, &logits, target)?;
    let probs = crate::util::softmax(&logits);

    let mut grad = params.zeros_like();
    // d loss / d output tokens: softmax cross-entropy on the final column's
    // logit coordinates, zero elsewhere.
    let mut g_x = TokenMatrix::<f64>::zeros(d, n);
    {
        let col = g_x.col_mut(n - 1);
        for (k, idx) in range.enumerate() {
            col[idx] = probs[k] - if k == target { 1.0 } else { 0.0 };
        }
    }

    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let lc = &cache.layers[l];
        let glayer = &mut grad.layers[l];
        let hidden = layer.mlp.w1.rows;

        // MLP backward: out_i = mid_i + W2 act(W1 mid_i), mid = post_attn.
        let mut g_mid = g_x.clone();
        for i in 0..n {
            let g_out = g_x.col(i);
            let z = lc.act_out.col(i);
            outer_acc(&mut glayer.mlp.w2, g_out, z);
            let g_z = layer.mlp.w2.t_matvec(g_out);
            let g_u: Vec<f64> = match layer.mlp.activation {
                Activation::Relu => {
                    let u = lc.pre_act.col(i);
                    (0..hidden).map(|j| if u[j] > 0.0 { g_z[j] } else { 0.0 }).collect()
                }
                Activation::Softmax => {
                    // Jacobian of softmax: diag(z) - z z^T.
                    let dot: f64 = z.iter().zip(&g_z).map(|(a, b)| a * b).sum();
                    (0..hidden).map(|j| z[j] * (g_z[j] - dot)).collect()
                }
            };
            outer_acc(&mut glayer.mlp.w1, &g_u, lc.post_attn.col(i));
            axpy(g_mid.col_mut(i), &layer.mlp.w1.t_matvec(&g_u));
        }

        // Attention backward:
        // mid_i = in_i + sum_m (1/i) sum_{j<=i} relu(s^m_ij) V_m in_j,
        // s^m_ij = <Q_m in_i, K_m in_j>.
        let mut g_in = g_mid.clone();
        for (m, head) in layer.heads.iter().enumerate() {
            let (qh, kh, vh) = (&lc.qh[m], &lc.kh[m], &lc.vh[m]);
            let sc = &lc.scores[m];
            let mut g_qh = TokenMatrix::<f64>::zeros(d, n);
            let mut g_kh = TokenMatrix::<f64>::zeros(d, n);
            let mut g_vh = TokenMatrix::<f64>::zeros(d, n);
            for i in 0..n {
                let w = 1.0 / (i + 1) as f64;
                let g_out = g_mid.col(i);
                for j in 0..=i {
                    let s = sc[i * n + j];
                    if s <= 0.0 {
                        continue;
                    }
                    let ws = w * s;
                    let vj = vh.col(j);
                    let mut ds = 0.0;
                    {
                        let gv = g_vh.col_mut(j);
                        for r in 0..d {
                            gv[r] += ws * g_out[r];
                            ds += g_out[r] * vj[r];
                        }
                    }
                    let ds = w * ds;
                    let kj = kh.col(j);
                    let gq = g_qh.col_mut(i);
                    for r in 0..d {
                        gq[r] += ds * kj[r];
                    }
                    let qi = qh.col(i);
                    let gk = g_kh.col_mut(j);
                    for r in 0..d {
                        gk[r] += ds * qi[r];
                    }
                }
            }
            let ghead = &mut glayer.heads[m];
            for i in 0..n {
                let x_i = lc.input.col(i);
                outer_acc(&mut ghead.q, g_qh.col(i), x_i);
                outer_acc(&mut ghead.k, g_kh.col(i), x_i);
                outer_acc(&mut ghead.v, g_vh.col(i), x_i);
                axpy(g_in.col_mut(i), &head.q.t_matvec(g_qh.col(i)));
                axpy(g_in.col_mut(i), &head.k.t_matvec(g_kh.col(i)));
                axpy(g_in.col_mut(i), &head.v.t_matvec(g_vh.col(i)));
            }
        }
        g_x = g_in;
    }
    Ok((grad, loss))
}

/// Mean gradient over a batch of examples (softmax head). Per-sample
/// gradients are computed in parallel and reduced in index order, so the
/// result is deterministic.
pub fn grad(
    params: &TransformerParams<f64>,
    examples: &[Example],
) -> Result<(TransformerParams<f64>, f64)> {
    if examples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let spec = params.io.embedding_spec()?;
    let per_sample: Vec<(Vec<f64>, f64)> = examples
        .par_iter()
        .map(|ex| {
            let mut tokens = crate::transformer::embed::embed::<f64>(spec, ex.steps, &ex.query)?;
            crate::transformer::apply_input_scale(&mut tokens, &params.input_scale);
            let (g, loss) = grad_tokens(params, &tokens, ex.target)?;
            Ok((g.flatten(), loss))
        })
        .collect::<Result<_>>()?;
    let n = per_sample.len() as f64;
    let mut flat = vec![0.0; per_sample[0].0.len()];
    let mut loss = 0.0;
    for (g, l) in &per_sample {
        axpy(&mut flat, g);
        loss += l;
    }
    flat.iter_mut().for_each(|x| *x /= n);
    let mut out = params.zeros_like();
    out.assign_from_flat(&flat);
    Ok((out, loss / n))
}

/// Central-difference check of `grad_tokens` on `probes` random coordinates.
/// Relative error uses max(|analytic|, |numeric|, 1e-6) as denominator.
pub fn grad_check_tokens(
    params: &TransformerParams<f64>,
    tokens: &TokenMatrix<f64>,
    target: usize,
    probes: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckRecord> {
    let (analytic, _) = grad_tokens(params, tokens, target)?;
    let analytic = analytic.flatten();
    let theta = params.flatten();
    let mut probe_params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..probes {
        let k = rng.random_range(0..theta.len());
        let mut t_plus = theta.clone();
        t_plus[k] += eps;
        probe_params.assign_from_flat(&t_plus);
        let up = mle_loss_tokens(&probe_params, tokens, target)?;
        let mut t_minus = theta.clone();
        t_minus[k] -= eps;
        probe_params.assign_from_flat(&t_minus);
        let down = mle_loss_tokens(&probe_params, tokens, target)?;
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic[k].abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max((analytic[k] - numeric).abs() / denom);
    }
    Ok(GradCheckRecord { max_rel_err: max_rel, probes })
}

/// Random init: plain Gaussian entries. Input conditioning is handled by
/// the model's fixed `input_scale` — the reciprocal RMS of each embedding
/// coordinate over a probe of the dataset — so large-magnitude position
/// coordinates (i, i^2, g) enter the network at O(1) and per-coordinate
/// optimizer steps are uniformly well scaled.
pub fn init_params(config: &TrainConfig, set: &TrainSet) -> Result<TransformerParams<f64>> {
    config.validate()?;
    if set.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let d = set.spec.dim();
    let input_scale = coordinate_scales(set, config.window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x5eed));
    let mut normal = |sigma: f64| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        z * sigma
    };
    let s_attn = 0.5 / (d as f64).sqrt();
    let s_in = 1.0 / (d as f64).sqrt();
    let s_out = 0.5 / (config.hidden as f64).sqrt();
    let layers = (0..config.layers)
        .map(|_| TfLayer {
            heads: (0..config.heads)
                .map(|_| AttnHead {
                    q: Mat::from_fn(d, d, |_, _| normal(s_attn)),
                    k: Mat::from_fn(d, d, |_, _| normal(s_attn)),
                    v: Mat::from_fn(d, d, |_, _| normal(s_attn)),
                })
                .collect(),
            mlp: MlpLayer {
                w1: Mat::from_fn(config.hidden, d, |_, _| normal(s_in)),
                w2: Mat::from_fn(d, config.hidden, |_, _| normal(s_out)),
                activation: Activation::Relu,
            },
        })
        .collect();
    Ok(TransformerParams {
        layers,
        clip: None,
        head: HeadMode::Softmax,
        io: ModelIo::Structured(set.spec),
        input_scale,
    })
}

/// Per-coordinate reciprocal RMS over a strided probe of embedded examples,
/// floored at 1 so small coordinates are never amplified.
fn coordinate_scales(set: &TrainSet, window: Option<usize>) -> Result<Vec<f64>> {
    let d = set.spec.dim();
    let probe = 64.min(set.len());
    let stride = (set.len() / probe).max(1);
    let mut sumsq = vec![0.0f64; d];
    let mut count = 0usize;
    for p in 0..probe {
        let ex = set.example((p * stride) % set.len(), window);
        let tokens = crate::transformer::embed::embed::<f64>(set.spec(), ex.steps, &ex.query)?;
        for i in 0..tokens.n() {
            for (k, x) in tokens.col(i).iter().enumerate() {
                sumsq[k] += x * x;
            }
            count += 1;
        }
    }
    Ok(sumsq
        .into_iter()
        .map(|ss| {
            let rms = (ss / count as f64).sqrt();
            1.0 / rms.max(1.0)
        })
        .collect())
}

struct Optimizer {
    tag: OptimizerTag,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    fn new(tag: OptimizerTag, len: usize) -> Self {
        Optimizer { tag, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64], g: &[f64], lr: f64) {
        match self.tag {
            OptimizerTag::Sgd => {
                for (w, gk) in theta.iter_mut().zip(g) {
                    *w -= lr * gk;
                }
            }
            OptimizerTag::Adaptive => {
                self.t += 1;
                let b1 = 0.9f64;
                let b2 = 0.999f64;
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                for k in 0..theta.len() {
                    self.m[k] = b1 * self.m[k] + (1.0 - b1) * g[k];
                    self.v[k] = b2 * self.v[k] + (1.0 - b2) * g[k] * g[k];
                    let mh = self.m[k] / c1;
                    let vh = self.v[k] / c2;
                    theta[k] -= lr * mh / (vh.sqrt() + 1e-8);
                }
            }
        }
    }
}

/// Evaluation NLL over a capped, strided subset (full set when small).
fn eval_nll(params: &TransformerParams<f64>, set: &TrainSet, window: Option<usize>) -> Result<f64> {
    const CAP: usize = 4096;
    let n = set.len();
    let take = n.min(CAP);
    let stride = (n / take).max(1);
    let examples: Vec<Example> = (0..take).map(|j| set.example((j * stride) % n, window)).collect();
    mle_loss(params, &examples)
}

/// Mini-batched MLE training over all supervision points. Deterministic
/// given the config seed: shuffling, init, and batch reduction order are all
/// fixed.
pub fn train(config: &TrainConfig, set: &TrainSet) -> Result<(TransformerParams<f64>, LossReport)> {
    config.validate()?;
    if set.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut params = init_params(config, set)?;
    let mut theta = params.flatten();
    let mut opt = Optimizer::new(config.optimizer, theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x7a17));

    let initial_nll = eval_nll(&params, set, config.window)?;
    let mut epoch_nll = Vec::with_capacity(config.epochs);
    let mut epoch_secs = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..set.len()).collect();
    for _ in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let examples: Vec<Example> = chunk.iter().map(|&k| set.example(k, config.window)).collect();
            let (g, loss) = grad(&params, &examples)?;
            opt.step(&mut theta, &g.flatten(), config.learning_rate);
            params.assign_from_flat(&theta);
            loss_sum += loss * examples.len() as f64;
        }
        epoch_nll.push(loss_sum / set.len() as f64);
        epoch_secs.push(started.elapsed().as_secs_f64());
    }
    let final_nll = eval_nll(&params, set, config.window)?;
    let report = LossReport { initial_nll, epoch_nll, epoch_secs, final_nll, grad_check: None };
    Ok((params, report))
}

/// Convert an executed step to one player's embeddable view (the minimizing
/// player sees its own action and the complemented reward; neither view
/// carries the opponent's action).
pub fn dec_embed_step(step: &EpisodeStep, player: PlayerTag, horizon: usize) -> EmbedStep {
    let (a, r) = match player {
        PlayerTag::Max => (step.a, step.r),
        PlayerTag::Min => (step.b, 1.0 - step.r),
    };
    EmbedStep { g: step.g, h: step.h, t: step.time(horizon), s: step.s, a, b: None, r }
}

/// Convert an executed step to the centralized controller's view.
pub fn cen_embed_step(step: &EpisodeStep, horizon: usize) -> EmbedStep {
    EmbedStep { g: step.g, h: step.h, t: step.time(horizon), s: step.s, a: step.a, b: Some(step.b), r: step.r }
}

/// The frozen models that play an inference game.
pub enum InferenceActors<'a> {
    Decentralized {
        max: &'a TransformerParams<f64>,
        min: &'a TransformerParams<f64>,
    },
    Centralized(&'a TransformerParams<f64>),
}

/// Per-episode policy tables (marginals at every (h, s)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodePolicies {
    pub max: StagePolicy,
    pub min: StagePolicy,
}

/// An inference rollout: all executed steps, per-episode policy tables for
/// equilibrium evaluation, and per-episode attention-score evaluation counts
/// (a machine-independent runtime measure).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRun {
    pub steps: Vec<EpisodeStep>,
    pub episode_policies: Vec<EpisodePolicies>,
    pub score_evals: Vec<u64>,
}

fn check_actor(
    params: &TransformerParams<f64>,
    expected_mode: ViewMode,
    game: &MarkovGame,
) -> Result<()> {
    let spec = params.io.embedding_spec()?;
    if spec.dims != game.dims {
        return Err(Error::dims(format!(
            "checkpoint expects dims {:?}, game has {:?}",
            spec.dims, game.dims
        )));
    }
    if spec.mode != expected_mode {
        return Err(Error::invalid(format!(
            "checkpoint view mode {:?} does not fit this role (expected {:?})",
            spec.mode, expected_mode
        )));
    }
    params.validate()
}

fn policy_with(
    params: &TransformerParams<f64>,
    hist: &[EmbedStep],
    window: Option<usize>,
    query: &QueryPos,
    evals: &mut u64,
) -> Result<Vec<f64>> {
    let prefix = truncate_prefix(hist, window);
    let n = (2 * prefix.len() + 1) as u64;
    let head_count: u64 = params.layers.iter().map(|l| l.heads.len() as u64).sum();
    *evals += head_count * n * n;
    crate::transformer::head::induced_policy(params, prefix, query)
}

/// Plays `episodes` games with frozen parameters: at every (t, s) the model
/// is prompted with its growing own-view prefix (truncated to the window)
/// and the induced policies are recorded for every state, visited or not.
pub fn infer_play<R: Rng + ?Sized>(
    actors: &InferenceActors,
    game: &MarkovGame,
    episodes: usize,
    window: Option<usize>,
    rng: &mut R,
) -> Result<InferenceRun> {
    let d = game.dims;
    match actors {
        InferenceActors::Decentralized { max, min } => {
            check_actor(max, ViewMode::DecentralizedMax, game)?;
            check_actor(min, ViewMode::DecentralizedMin, game)?;
        }
        InferenceActors::Centralized(joint) => check_actor(joint, ViewMode::Centralized, game)?,
    }
    let mut steps = Vec::with_capacity(d.total_steps(episodes));
    let mut episode_policies = Vec::with_capacity(episodes);
    let mut score_evals = Vec::with_capacity(episodes);
    let mut max_hist: Vec<EmbedStep> = Vec::new();
    let mut min_hist: Vec<EmbedStep> = Vec::new();
    let mut cen_hist: Vec<EmbedStep> = Vec::new();

    for g in 1..=episodes {
        let mut evals = 0u64;
        let mut max_tab = vec![vec![Vec::new(); d.states]; d.horizon];
        let mut min_tab = vec![vec![Vec::new(); d.states]; d.horizon];
        let mut s = game.initial_state;
        for h in 1..=d.horizon {
            let t = (g - 1) * d.horizon + h;
            let mut acting_joint: Option<Vec<f64>> = None;
            for sq in 0..d.states {
                let query = QueryPos { g, h, t, s: sq };
                match actors {
                    InferenceActors::Decentralized { max, min } => {
                        max_tab[h - 1][sq] = policy_with(max, &max_hist, window, &query, &mut evals)?;
                        min_tab[h - 1][sq] = policy_with(min, &min_hist, window, &query, &mut evals)?;
                    }
                    InferenceActors::Centralized(joint_model) => {
                        let joint = policy_with(joint_model, &cen_hist, window, &query, &mut evals)?;
                        let (mu, nu) = joint_marginals(&joint, d.max_actions, d.min_actions);
                        max_tab[h - 1][sq] = mu;
                        min_tab[h - 1][sq] = nu;
                        if sq == s {
                            acting_joint = Some(joint);
                        }
                    }
                }
            }
            let (a, b) = match actors {
                InferenceActors::Decentralized { .. } => {
                    let a = sample_categorical(&max_tab[h - 1][s], rng);
                    let b = sample_categorical(&min_tab[h - 1][s], rng);
                    (a, b)
                }
                InferenceActors::Centralized(_) => {
                    let joint = acting_joint.expect("joint policy recorded for the realized state");
                    let k = sample_categorical(&joint, rng);
                    (k / d.min_actions, k % d.min_actions)
                }
            };
            let r = game.reward_at(h, s, a, b);
            let s_next = sample_categorical(game.transition_row(h, s, a, b), rng);
            let step = EpisodeStep { g, h, s, a, b, r };
            match actors {
                InferenceActors::Decentralized { .. } => {
                    max_hist.push(dec_embed_step(&step, PlayerTag::Max, d.horizon));
                    min_hist.push(dec_embed_step(&step, PlayerTag::Min, d.horizon));
                }
                InferenceActors::Centralized(_) => cen_hist.push(cen_embed_step(&step, d.horizon)),
            }
            steps.push(step);
            s = s_next;
        }
        episode_policies.push(EpisodePolicies {
            max: StagePolicy::from_fn(d.horizon, d.states, d.max_actions, |h, sq| max_tab[h - 1][sq].clone()),
            min: StagePolicy::from_fn(d.horizon, d.states, d.min_actions, |h, sq| min_tab[h - 1][sq].clone()),
        });
        score_evals.push(evals);
    }
    Ok(InferenceRun { steps, episode_policies, score_evals })
}
