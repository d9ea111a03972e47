//! Hand-constructed attention weights that reproduce three planning
//! sub-steps on staged token matrices: the multiplicative-weights
//! equilibrium iteration, value aggregation (policy-weighted payoff
//! averages), and policy lookup by (step, state) key. Each construction is
//! an ordinary [`TransformerParams`] usable by `tf_forward` with no special
//! cases, and [`verify_realization`] checks it against the direct
//! implementation on random stagings.
//!
//! Staging convention: instances occupy alternating tokens. Data tokens sit
//! at odd 1-based positions i = 2k+1 with flag v = 1 and pair index
//! tp = k+1; between them sit inert filler tokens (even i, v = 0, tp = i/2)
//! carrying only positional coordinates. Attention scores take the form
//! payload + mask, where the mask is a multiple of (tp_j - tp_i) plus a
//! filler gate, so each data token attends exactly to itself; the value
//! path reads the token-index coordinate so the 1/i attention average
//! cancels against score * i.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::GameDims;
use crate::no_regret::mwu_cce;
use crate::transformer::head::HeadMode;
use crate::transformer::{
    param_norm, tf_forward, Activation, AttnHead, Mat, MlpLayer, ModelIo, TfLayer, TokenMatrix,
    TransformerParams,
};
use crate::util::derive_seed;

/// Head-count and width budget per layer: 16 * H * S^2 * A * B.
pub fn layer_budget(dims: &GameDims) -> usize {
    16 * dims.horizon * dims.states * dims.states * dims.max_actions * dims.min_actions
}

/// Coordinate map for the equilibrium-iteration fragment. One instance per
/// data token: loss matrices, cumulative per-action losses, current
/// iterates, the running joint average, and scratch blocks the fragment
/// clears before finishing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MwuMap {
    pub max_actions: usize,
    pub min_actions: usize,
    /// Max player's loss matrix (H - Q_upper)/H, row-major (a, b).
    pub lbar: usize,
    /// Min player's loss matrix Q_lower/H, row-major (a, b).
    pub lunder: usize,
    /// Cumulative per-action losses for each player.
    pub opos: usize,
    pub oneg: usize,
    /// Current iterates mu_n, nu_n.
    pub mu: usize,
    pub nu: usize,
    /// Running average of mu_tau x nu_tau over rounds played so far.
    pub run: usize,
    /// Scratch: outer product, per-round losses, fresh iterates.
    pub sc_out: usize,
    pub sc_op: usize,
    pub sc_on: usize,
    pub mu_new: usize,
    pub nu_new: usize,
    /// Positional coordinates: pair index, filler flag, token index, one.
    pub tp: usize,
    pub v: usize,
    pub idx: usize,
    pub one: usize,
    pub d: usize,
}

impl MwuMap {
    fn new(dims: &GameDims) -> Self {
        let (a, b) = (dims.max_actions, dims.min_actions);
        let ab = a * b;
        let mut at = 0usize;
        let mut claim = |len: usize| {
            let start = at;
            at += len;
            start
        };
        MwuMap {
            max_actions: a,
            min_actions: b,
            lbar: claim(ab),
            lunder: claim(ab),
            opos: claim(a),
            oneg: claim(b),
            mu: claim(a),
            nu: claim(b),
            run: claim(ab),
            sc_out: claim(ab),
            sc_op: claim(a),
            sc_on: claim(b),
            mu_new: claim(a),
            nu_new: claim(b),
            tp: claim(1),
            v: claim(1),
            idx: claim(1),
            one: claim(1),
            d: at,
        }
    }
}

/// Coordinate map for the value-aggregation fragment: per-(h, s) policy and
/// payoff-bound blocks plus the scalar value slots they fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueMap {
    pub horizon: usize,
    pub states: usize,
    pub joint: usize,
    /// pi^h(.,.|s) blocks, AB wide each, ordered by (h-1) * S + s.
    pub pi: usize,
    pub q_up: usize,
    pub q_lo: usize,
    /// Scalar value slots, one per (h, s).
    pub v_up: usize,
    pub v_lo: usize,
    pub tp: usize,
    pub v: usize,
    pub idx: usize,
    pub one: usize,
    pub d: usize,
}

impl ValueMap {
    fn new(dims: &GameDims) -> Self {
        let hs = dims.horizon * dims.states;
        let ab = dims.joint_actions();
        let mut at = 0usize;
        let mut claim = |len: usize| {
            let start = at;
            at += len;
            start
        };
        ValueMap {
            horizon: dims.horizon,
            states: dims.states,
            joint: ab,
            pi: claim(hs * ab),
            q_up: claim(hs * ab),
            q_lo: claim(hs * ab),
            v_up: claim(hs),
            v_lo: claim(hs),
            tp: claim(1),
            v: claim(1),
            idx: claim(1),
            one: claim(1),
            d: at,
        }
    }

    /// Offset of a per-(h, s) block of width `width`; h is 1-based.
    fn block(&self, base: usize, width: usize, h: usize, s: usize) -> usize {
        base + ((h - 1) * self.states + s) * width
    }
}

/// Coordinate map for the policy-lookup fragment: the full table set, the
/// query keys (one-hot state and step), and the output slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupMap {
    pub horizon: usize,
    pub states: usize,
    pub joint: usize,
    /// pi^h(.,.|s) tables, AB wide each, ordered by (h-1) * S + s.
    pub tables: usize,
    /// One-hot current state (data tokens only).
    pub state: usize,
    /// One-hot current step (data tokens only).
    pub eh: usize,
    /// Output slot the matched table is copied into.
    pub out: usize,
    pub tp: usize,
    pub v: usize,
    pub idx: usize,
    /// Squared token index, staged so a linear map can score i^2 - i.
    pub isq: usize,
    pub one: usize,
    pub d: usize,
}

impl LookupMap {
    fn new(dims: &GameDims) -> Self {
        let hs = dims.horizon * dims.states;
        let ab = dims.joint_actions();
        let mut at = 0usize;
        let mut claim = |len: usize| {
            let start = at;
            at += len;
            start
        };
        LookupMap {
            horizon: dims.horizon,
            states: dims.states,
            joint: ab,
            tables: claim(hs * ab),
            state: claim(dims.states),
            eh: claim(dims.horizon),
            out: claim(ab),
            tp: claim(1),
            v: claim(1),
            idx: claim(1),
            isq: claim(1),
            one: claim(1),
            d: at,
        }
    }

    fn table(&self, h: usize, s: usize) -> usize {
        self.tables + ((h - 1) * self.states + s) * self.joint
    }
}

/// The three fragments' coordinate maps for one game size and round budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedLayout {
    pub dims: GameDims,
    /// Number of equilibrium rounds the iteration fragment is stacked for;
    /// also bounds the token positions the lookup masks must dominate.
    pub rounds: usize,
    pub mwu: MwuMap,
    pub value: ValueMap,
    pub lookup: LookupMap,
}

impl StagedLayout {
    pub fn new(dims: GameDims, rounds: usize) -> Result<Self> {
        if dims.horizon == 0 || dims.states == 0 || dims.max_actions == 0 || dims.min_actions == 0 {
            return Err(Error::invalid("all game dimensions must be positive"));
        }
        if rounds == 0 {
            return Err(Error::invalid("round count must be positive"));
        }
        let layout = StagedLayout {
            dims,
            rounds,
            mwu: MwuMap::new(&dims),
            value: ValueMap::new(&dims),
            lookup: LookupMap::new(&dims),
        };
        let budget = layer_budget(&dims);
        for (name, d) in [("iteration", layout.mwu.d), ("aggregation", layout.value.d), ("lookup", layout.lookup.d)] {
            if d > budget {
                return Err(Error::contract(format!(
                    "{name} layout needs {d} coordinates, over the budget {budget}"
                )));
            }
        }
        Ok(layout)
    }
}

/// Clip radius for constructed weights: far above any staged column norm,
/// so clipping never fires, while keeping the fragment well-formed even for
/// callers that enable it.
pub const REALIZE_CLIP: f64 = 1e6;

fn fragment(layers: Vec<TfLayer<f64>>, dims: &GameDims, d: usize) -> Result<TransformerParams<f64>> {
    let budget = layer_budget(dims);
    for layer in &layers {
        if layer.heads.len() > budget {
            return Err(Error::contract(format!(
                "layer uses {} heads, over the budget {budget}",
                layer.heads.len()
            )));
        }
    }
    let params = TransformerParams {
        layers,
        clip: Some(REALIZE_CLIP),
        head: HeadMode::Softmax,
        io: ModelIo::Raw { dim: d },
        input_scale: Vec::new(),
    };
    params.validate()?;
    Ok(params)
}

fn mlp_noop(d: usize) -> MlpLayer<f64> {
    MlpLayer::zeros(d, 1, Activation::Relu)
}

/// One multiplicative-weights round as a five-layer stack. Per application,
/// every data token: (1) adds mu_n x nu_n / rounds into its running joint
/// average, (2) adds each player's expected loss vector into the cumulative
/// losses, (3, 4) forms the fresh iterates softmax(-eta * cumulative) in
/// scratch, (5) swaps them in and clears the scratch. Applying the returned
/// fragment `rounds` times from a freshly staged matrix reproduces the
/// direct solver.
pub fn build_mwu_iteration(layout: &StagedLayout) -> Result<TransformerParams<f64>> {
    let m = &layout.mwu;
    let (na, nb) = (m.max_actions, m.min_actions);
    let d = m.d;
    let hf = layout.dims.horizon as f64;
    let n_rounds = layout.rounds as f64;
    let eta_a = ((na as f64).ln() / n_rounds).sqrt();
    let eta_b = ((nb as f64).ln() / n_rounds).sqrt();

    // Layer 1: outer product mu_n(a) nu_n(b) into scratch, then move the
    // scratch into the running average scaled by 1/rounds. Mask components
    // come first so they cancel exactly before the payload accumulates.
    let mut l1_heads = Vec::with_capacity(na * nb);
    for a in 0..na {
        for b in 0..nb {
            let mut q = Mat::<f64>::zeros(d, d);
            let mut k = Mat::<f64>::zeros(d, d);
            let mut v = Mat::<f64>::zeros(d, d);
            *q.at_mut(0, m.tp) = 1.0;
            *k.at_mut(0, m.one) = -1.0;
            *q.at_mut(1, m.one) = 1.0;
            *k.at_mut(1, m.tp) = 1.0;
            *q.at_mut(2, m.mu + a) = 1.0;
            *k.at_mut(2, m.nu + b) = 1.0;
            *v.at_mut(m.sc_out + a * nb + b, m.idx) = 1.0;
            l1_heads.push(AttnHead { q, k, v });
        }
    }
    let mut l1_w1 = Mat::<f64>::zeros(na * nb, d);
    let mut l1_w2 = Mat::<f64>::zeros(d, na * nb);
    for ab in 0..na * nb {
        *l1_w1.at_mut(ab, m.sc_out + ab) = 1.0;
        *l1_w2.at_mut(m.run + ab, ab) = 1.0 / n_rounds;
        *l1_w2.at_mut(m.sc_out + ab, ab) = -1.0;
    }
    let layer1 = TfLayer {
        heads: l1_heads,
        mlp: MlpLayer { w1: l1_w1, w2: l1_w2, activation: Activation::Relu },
    };

    // Layer 2: per-action expected losses. Head a scores
    // H(v_i - 1) + H(tp_j - tp_i) + <nu_n^(i), lbar^(j)(a, .)>, so only a
    // data token's self-score survives and equals the direct dot product.
    let mut l2_heads = Vec::with_capacity(na + nb);
    for a in 0..na {
        let mut q = Mat::<f64>::zeros(d, d);
        let mut k = Mat::<f64>::zeros(d, d);
        let mut v = Mat::<f64>::zeros(d, d);
        *q.at_mut(0, m.v) = hf;
        *q.at_mut(0, m.one) = -hf;
        *k.at_mut(0, m.one) = 1.0;
        *q.at_mut(1, m.tp) = 1.0;
        *k.at_mut(1, m.one) = -hf;
        *q.at_mut(2, m.one) = hf;
        *k.at_mut(2, m.tp) = 1.0;
        for r in 0..nb {
            *q.at_mut(3 + r, m.nu + r) = 1.0;
            *k.at_mut(3 + r, m.lbar + a * nb + r) = 1.0;
        }
        *v.at_mut(m.sc_op + a, m.idx) = 1.0;
        l2_heads.push(AttnHead { q, k, v });
    }
    for b in 0..nb {
        let mut q = Mat::<f64>::zeros(d, d);
        let mut k = Mat::<f64>::zeros(d, d);
        let mut v = Mat::<f64>::zeros(d, d);
        *q.at_mut(0, m.v) = hf;
        *q.at_mut(0, m.one) = -hf;
        *k.at_mut(0, m.one) = 1.0;
        *q.at_mut(1, m.tp) = 1.0;
        *k.at_mut(1, m.one) = -hf;
        *q.at_mut(2, m.one) = hf;
        *k.at_mut(2, m.tp) = 1.0;
        for r in 0..na {
            *q.at_mut(3 + r, m.mu + r) = 1.0;
            *k.at_mut(3 + r, m.lunder + r * nb + b) = 1.0;
        }
        *v.at_mut(m.sc_on + b, m.idx) = 1.0;
        l2_heads.push(AttnHead { q, k, v });
    }
    let mut l2_w1 = Mat::<f64>::zeros(na + nb, d);
    let mut l2_w2 = Mat::<f64>::zeros(d, na + nb);
    for a in 0..na {
        *l2_w1.at_mut(a, m.sc_op + a) = 1.0;
        *l2_w2.at_mut(m.opos + a, a) = 1.0;
        *l2_w2.at_mut(m.sc_op + a, a) = -1.0;
    }
    for b in 0..nb {
        *l2_w1.at_mut(na + b, m.sc_on + b) = 1.0;
        *l2_w2.at_mut(m.oneg + b, na + b) = 1.0;
        *l2_w2.at_mut(m.sc_on + b, na + b) = -1.0;
    }
    let layer2 = TfLayer {
        heads: l2_heads,
        mlp: MlpLayer { w1: l2_w1, w2: l2_w2, activation: Activation::Relu },
    };

    // Layers 3 and 4: fresh iterates via softmax MLPs with the learning
    // rate baked into W1. Filler tokens get softmax(0) = uniform garbage in
    // the scratch, removed by layer 5's gated cleanup head.
    let mut l3_w1 = Mat::<f64>::zeros(na, d);
    let mut l3_w2 = Mat::<f64>::zeros(d, na);
    for a in 0..na {
        *l3_w1.at_mut(a, m.opos + a) = -eta_a;
        *l3_w2.at_mut(m.mu_new + a, a) = 1.0;
    }
    let layer3 = TfLayer {
        heads: Vec::new(),
        mlp: MlpLayer { w1: l3_w1, w2: l3_w2, activation: Activation::Softmax },
    };
    let mut l4_w1 = Mat::<f64>::zeros(nb, d);
    let mut l4_w2 = Mat::<f64>::zeros(d, nb);
    for b in 0..nb {
        *l4_w1.at_mut(b, m.oneg + b) = -eta_b;
        *l4_w2.at_mut(m.nu_new + b, b) = 1.0;
    }
    let layer4 = TfLayer {
        heads: Vec::new(),
        mlp: MlpLayer { w1: l4_w1, w2: l4_w2, activation: Activation::Softmax },
    };

    // Layer 5 attention: subtract the uniform garbage from filler tokens.
    // Both query and key carry (1 - v); an ungated key would double-count
    // the preceding data token, which shares the filler's pair index.
    let mut q = Mat::<f64>::zeros(d, d);
    let mut k = Mat::<f64>::zeros(d, d);
    let mut v = Mat::<f64>::zeros(d, d);
    *q.at_mut(0, m.one) = 1.0;
    *q.at_mut(0, m.v) = -1.0;
    *k.at_mut(0, m.one) = 1.0;
    *k.at_mut(0, m.v) = -1.0;
    *q.at_mut(1, m.tp) = 1.0;
    *k.at_mut(1, m.one) = -1.0;
    *q.at_mut(2, m.one) = 1.0;
    *k.at_mut(2, m.tp) = 1.0;
    for a in 0..na {
        *v.at_mut(m.mu_new + a, m.idx) = -1.0 / na as f64;
    }
    for b in 0..nb {
        *v.at_mut(m.nu_new + b, m.idx) = -1.0 / nb as f64;
    }
    let cleanup = AttnHead { q, k, v };
    // Layer 5 MLP: replace the iterates with the fresh ones and clear the
    // scratch, using that probabilities pass through ReLU unchanged.
    let mut l5_w1 = Mat::<f64>::zeros(2 * (na + nb), d);
    let mut l5_w2 = Mat::<f64>::zeros(d, 2 * (na + nb));
    for a in 0..na {
        *l5_w1.at_mut(2 * a, m.mu_new + a) = 1.0;
        *l5_w1.at_mut(2 * a + 1, m.mu + a) = 1.0;
        *l5_w2.at_mut(m.mu + a, 2 * a) = 1.0;
        *l5_w2.at_mut(m.mu_new + a, 2 * a) = -1.0;
        *l5_w2.at_mut(m.mu + a, 2 * a + 1) = -1.0;
    }
    for b in 0..nb {
        let r = 2 * na + 2 * b;
        *l5_w1.at_mut(r, m.nu_new + b) = 1.0;
        *l5_w1.at_mut(r + 1, m.nu + b) = 1.0;
        *l5_w2.at_mut(m.nu + b, r) = 1.0;
        *l5_w2.at_mut(m.nu_new + b, r) = -1.0;
        *l5_w2.at_mut(m.nu + b, r + 1) = -1.0;
    }
    let layer5 = TfLayer {
        heads: vec![cleanup],
        mlp: MlpLayer { w1: l5_w1, w2: l5_w2, activation: Activation::Relu },
    };

    fragment(vec![layer1, layer2, layer3, layer4, layer5], &layout.dims, d)
}

/// One attention layer with 2HS heads writing the policy-weighted payoff
/// bounds v_up(h, s) = <pi(h,s), q_up(h,s)> and the v_lo analogue.
pub fn build_value_aggregation(layout: &StagedLayout) -> Result<TransformerParams<f64>> {
    let vm = &layout.value;
    let d = vm.d;
    let ab = vm.joint;
    let hf = layout.dims.horizon as f64;
    let mut heads = Vec::with_capacity(2 * vm.horizon * vm.states);
    for h in 1..=vm.horizon {
        for s in 0..vm.states {
            for (q_base, v_base) in [(vm.q_up, vm.v_up), (vm.q_lo, vm.v_lo)] {
                let mut q = Mat::<f64>::zeros(d, d);
                let mut k = Mat::<f64>::zeros(d, d);
                let mut v = Mat::<f64>::zeros(d, d);
                *q.at_mut(0, vm.tp) = 1.0;
                *k.at_mut(0, vm.one) = -hf;
                *q.at_mut(1, vm.one) = hf;
                *k.at_mut(1, vm.tp) = 1.0;
                let pi0 = vm.block(vm.pi, ab, h, s);
                let q0 = vm.block(q_base, ab, h, s);
                for r in 0..ab {
                    *q.at_mut(2 + r, pi0 + r) = 1.0;
                    *k.at_mut(2 + r, q0 + r) = 1.0;
                }
                *v.at_mut(vm.block(v_base, 1, h, s), vm.idx) = 1.0;
                heads.push(AttnHead { q, k, v });
            }
        }
    }
    let layer = TfLayer { heads, mlp: mlp_noop(d) };
    fragment(vec![layer], &layout.dims, d)
}

/// Two attention layers: HS keyed heads copy the table matching the data
/// token's own (step, state) into the output slot, scaled by the 1/i
/// attention average; a final head de-averages with score i^2 - i, which
/// together with the residual restores the exact table. A score linear in
/// i would leave the output scaled by 2/i instead.
pub fn build_policy_lookup(layout: &StagedLayout) -> Result<TransformerParams<f64>> {
    let lm = &layout.lookup;
    let d = lm.d;
    let ab = lm.joint;
    let mut key_heads = Vec::with_capacity(lm.horizon * lm.states);
    for h in 1..=lm.horizon {
        for s in 0..lm.states {
            let mut q = Mat::<f64>::zeros(d, d);
            let mut k = Mat::<f64>::zeros(d, d);
            let mut v = Mat::<f64>::zeros(d, d);
            *q.at_mut(0, lm.tp) = 1.0;
            *k.at_mut(0, lm.one) = -1.0;
            *q.at_mut(1, lm.one) = 1.0;
            *k.at_mut(1, lm.tp) = 1.0;
            *q.at_mut(2, lm.one) = 1.0;
            *k.at_mut(2, lm.one) = -1.0;
            *q.at_mut(3, lm.state + s) = 1.0;
            *k.at_mut(3, lm.one) = 1.0;
            *q.at_mut(4, lm.eh + h - 1) = 1.0;
            *k.at_mut(4, lm.one) = 1.0;
            let t0 = lm.table(h, s);
            for r in 0..ab {
                *v.at_mut(lm.out + r, t0 + r) = 1.0;
            }
            key_heads.push(AttnHead { q, k, v });
        }
    }
    let layer_a = TfLayer { heads: key_heads, mlp: mlp_noop(d) };

    // De-averaging head. The mask scale dominates every achievable i^2, and
    // the filler gate keeps even tokens from picking up the data token that
    // shares their pair index.
    let big = ((2 * layout.rounds * layout.dims.horizon + 1) as f64).powi(2);
    let mut q = Mat::<f64>::zeros(d, d);
    let mut k = Mat::<f64>::zeros(d, d);
    let mut v = Mat::<f64>::zeros(d, d);
    *q.at_mut(0, lm.tp) = 1.0;
    *k.at_mut(0, lm.one) = -big;
    *q.at_mut(1, lm.one) = big;
    *k.at_mut(1, lm.tp) = 1.0;
    *q.at_mut(2, lm.v) = big;
    *q.at_mut(2, lm.one) = -big;
    *k.at_mut(2, lm.one) = 1.0;
    *q.at_mut(3, lm.isq) = 1.0;
    *k.at_mut(3, lm.one) = 1.0;
    *q.at_mut(4, lm.idx) = 1.0;
    *k.at_mut(4, lm.one) = -1.0;
    for r in 0..ab {
        *v.at_mut(lm.out + r, lm.out + r) = 1.0;
    }
    let layer_b = TfLayer { heads: vec![AttnHead { q, k, v }], mlp: mlp_noop(d) };
    fragment(vec![layer_a, layer_b], &layout.dims, lm.d)
}

fn push_pos(col: &mut [f64], tp: usize, v: usize, idx: usize, one: usize, pair: usize, data: bool, i: usize) {
    col[tp] = pair as f64;
    col[v] = if data { 1.0 } else { 0.0 };
    col[idx] = i as f64;
    col[one] = 1.0;
}

/// One staged equilibrium instance: the payoff bound matrices, both in
/// [0, H], row-major (a, b).
#[derive(Debug, Clone, PartialEq)]
pub struct MwuInstance {
    pub q_upper: Vec<f64>,
    pub q_lower: Vec<f64>,
}

/// Stage instances on alternating data/filler tokens with zero cumulative
/// losses, uniform iterates, and zero running average.
pub fn stage_mwu(layout: &StagedLayout, instances: &[MwuInstance]) -> Result<TokenMatrix<f64>> {
    let m = &layout.mwu;
    let (na, nb) = (m.max_actions, m.min_actions);
    let hf = layout.dims.horizon as f64;
    if instances.is_empty() {
        return Err(Error::invalid("no instances staged"));
    }
    let mut tokens = TokenMatrix::new(m.d);
    for (kk, inst) in instances.iter().enumerate() {
        if inst.q_upper.len() != na * nb || inst.q_lower.len() != na * nb {
            return Err(Error::dims(format!("expected {} payoff cells", na * nb)));
        }
        for &qv in inst.q_upper.iter().chain(&inst.q_lower) {
            if !(0.0..=hf).contains(&qv) {
                return Err(Error::contract(format!("payoff {qv} outside [0, {hf}]")));
            }
        }
        if kk > 0 {
            let mut filler = vec![0.0; m.d];
            push_pos(&mut filler, m.tp, m.v, m.idx, m.one, kk, false, 2 * kk);
            tokens.push_col(&filler);
        }
        let mut col = vec![0.0; m.d];
        for (r, &qv) in inst.q_upper.iter().enumerate() {
            col[m.lbar + r] = (hf - qv) / hf;
        }
        for (r, &qv) in inst.q_lower.iter().enumerate() {
            col[m.lunder + r] = qv / hf;
        }
        for a in 0..na {
            col[m.mu + a] = 1.0 / na as f64;
        }
        for b in 0..nb {
            col[m.nu + b] = 1.0 / nb as f64;
        }
        push_pos(&mut col, m.tp, m.v, m.idx, m.one, kk + 1, true, 2 * kk + 1);
        tokens.push_col(&col);
    }
    Ok(tokens)
}

/// State read back from one staged instance after running the fragment.
#[derive(Debug, Clone, PartialEq)]
pub struct MwuReadout {
    /// Averaged joint policy accumulated so far.
    pub joint: Vec<f64>,
    /// Current iterates.
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
}

pub fn read_mwu(layout: &StagedLayout, tokens: &TokenMatrix<f64>, instance: usize) -> MwuReadout {
    let m = &layout.mwu;
    let col = tokens.col(2 * instance);
    MwuReadout {
        joint: col[m.run..m.run + m.max_actions * m.min_actions].to_vec(),
        mu: col[m.mu..m.mu + m.max_actions].to_vec(),
        nu: col[m.nu..m.nu + m.min_actions].to_vec(),
    }
}

/// One staged aggregation instance: per-(h, s) policies (nonnegative, each
/// block summing to at most 1) and payoff bounds in [0, H].
#[derive(Debug, Clone, PartialEq)]
pub struct ValueInstance {
    pub pi: Vec<f64>,
    pub q_upper: Vec<f64>,
    pub q_lower: Vec<f64>,
}

pub fn stage_value(layout: &StagedLayout, instances: &[ValueInstance]) -> Result<TokenMatrix<f64>> {
    let vm = &layout.value;
    let hs = vm.horizon * vm.states;
    let cells = hs * vm.joint;
    let hf = layout.dims.horizon as f64;
    if instances.is_empty() {
        return Err(Error::invalid("no instances staged"));
    }
    let mut tokens = TokenMatrix::new(vm.d);
    for (kk, inst) in instances.iter().enumerate() {
        if inst.pi.len() != cells || inst.q_upper.len() != cells || inst.q_lower.len() != cells {
            return Err(Error::dims(format!("expected {cells} staged cells")));
        }
        for block in inst.pi.chunks(vm.joint) {
            if block.iter().any(|&p| p < 0.0) || block.iter().sum::<f64>() > 1.0 + 1e-12 {
                return Err(Error::contract("each policy block must be a sub-distribution"));
            }
        }
        for &qv in inst.q_upper.iter().chain(&inst.q_lower) {
            if !(0.0..=hf).contains(&qv) {
                return Err(Error::contract(format!("payoff {qv} outside [0, {hf}]")));
            }
        }
        if kk > 0 {
            let mut filler = vec![0.0; vm.d];
            push_pos(&mut filler, vm.tp, vm.v, vm.idx, vm.one, kk, false, 2 * kk);
            tokens.push_col(&filler);
        }
        let mut col = vec![0.0; vm.d];
        col[vm.pi..vm.pi + cells].copy_from_slice(&inst.pi);
        col[vm.q_up..vm.q_up + cells].copy_from_slice(&inst.q_upper);
        col[vm.q_lo..vm.q_lo + cells].copy_from_slice(&inst.q_lower);
        push_pos(&mut col, vm.tp, vm.v, vm.idx, vm.one, kk + 1, true, 2 * kk + 1);
        tokens.push_col(&col);
    }
    Ok(tokens)
}

/// The (v_up, v_lo) vectors of one instance, each H*S long in (h, s) order.
pub fn read_value(layout: &StagedLayout, tokens: &TokenMatrix<f64>, instance: usize) -> (Vec<f64>, Vec<f64>) {
    let vm = &layout.value;
    let hs = vm.horizon * vm.states;
    let col = tokens.col(2 * instance);
    (col[vm.v_up..vm.v_up + hs].to_vec(), col[vm.v_lo..vm.v_lo + hs].to_vec())
}

/// One staged lookup instance: the full table set plus the query key the
/// data token carries (1-based step, 0-based state).
#[derive(Debug, Clone, PartialEq)]
pub struct LookupInstance {
    pub tables: Vec<f64>,
    pub state: usize,
    pub step: usize,
}

pub fn stage_lookup(layout: &StagedLayout, instances: &[LookupInstance]) -> Result<TokenMatrix<f64>> {
    let lm = &layout.lookup;
    let cells = lm.horizon * lm.states * lm.joint;
    if instances.is_empty() {
        return Err(Error::invalid("no instances staged"));
    }
    if instances.len() > layout.rounds * layout.dims.horizon + 1 {
        return Err(Error::contract(format!(
            "at most {} instances fit under the de-averaging mask",
            layout.rounds * layout.dims.horizon + 1
        )));
    }
    let mut tokens = TokenMatrix::new(lm.d);
    for (kk, inst) in instances.iter().enumerate() {
        if inst.tables.len() != cells {
            return Err(Error::dims(format!("expected {cells} table cells")));
        }
        if inst.state >= lm.states || inst.step == 0 || inst.step > lm.horizon {
            return Err(Error::invalid("query key out of range"));
        }
        if kk > 0 {
            let mut filler = vec![0.0; lm.d];
            push_pos(&mut filler, lm.tp, lm.v, lm.idx, lm.one, kk, false, 2 * kk);
            filler[lm.isq] = (2 * kk * (2 * kk)) as f64;
            tokens.push_col(&filler);
        }
        let mut col = vec![0.0; lm.d];
        col[lm.tables..lm.tables + cells].copy_from_slice(&inst.tables);
        col[lm.state + inst.state] = 1.0;
        col[lm.eh + inst.step - 1] = 1.0;
        let i = 2 * kk + 1;
        push_pos(&mut col, lm.tp, lm.v, lm.idx, lm.one, kk + 1, true, i);
        col[lm.isq] = (i * i) as f64;
        tokens.push_col(&col);
    }
    Ok(tokens)
}

pub fn read_lookup(layout: &StagedLayout, tokens: &TokenMatrix<f64>, instance: usize) -> Vec<f64> {
    let lm = &layout.lookup;
    let col = tokens.col(2 * instance);
    col[lm.out..lm.out + lm.joint].to_vec()
}

/// Verification outcome of one constructed fragment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubStepReport {
    pub name: String,
    pub trials: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub layers: usize,
    pub max_heads: usize,
    pub head_budget: usize,
    pub param_norm: f64,
}

/// Machine-readable verification report across all constructed fragments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizeReport {
    pub dims: GameDims,
    pub rounds: usize,
    pub trials: usize,
    pub seed: u64,
    pub perturbed: bool,
    pub sub_steps: Vec<SubStepReport>,
    pub all_pass: bool,
    pub notes: Vec<String>,
}

impl RealizeReport {
    /// Human-readable table, one line per sub-step.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "constructed-weight check: H={} S={} A={} B={} rounds={} trials={} seed={}{}\n",
            self.dims.horizon,
            self.dims.states,
            self.dims.max_actions,
            self.dims.min_actions,
            self.rounds,
            self.trials,
            self.seed,
            if self.perturbed { " (perturbed weights)" } else { "" },
        ));
        for s in &self.sub_steps {
            out.push_str(&format!(
                "  [{}] {:<22} max deviation {:.3e} (tolerance {:.0e}, {} layers, {} heads <= budget {}, norm {:.3})\n",
                if s.pass { "PASS" } else { "FAIL" },
                s.name,
                s.max_deviation,
                s.tolerance,
                s.layers,
                s.max_heads,
                s.head_budget,
                s.param_norm,
            ));
        }
        for n in &self.notes {
            out.push_str(&format!("  note: {n}\n"));
        }
        out.push_str(if self.all_pass { "  all sub-steps pass\n" } else { "  FAILURES PRESENT\n" });
        out
    }
}

pub const MWU_TOLERANCE: f64 = 1e-9;
pub const VALUE_TOLERANCE: f64 = 1e-10;
pub const LOOKUP_TOLERANCE: f64 = 1e-8;

const NOTES: [&str; 3] = [
    "iteration cleanup head gates both query and key by one-minus-filler-flag; an ungated key would double-count the data token sharing the filler's pair index",
    "de-averaging head scores i^2 - i from a squared-index coordinate; a score linear in i would return the table scaled by 2/i",
    "the min player's staged loss block is its payoff bound over H (the quantity it descends), mirroring the direct solver",
];

fn sub_report(
    name: &str,
    params: &TransformerParams<f64>,
    dims: &GameDims,
    trials: usize,
    max_deviation: f64,
    tolerance: f64,
) -> SubStepReport {
    SubStepReport {
        name: name.to_string(),
        trials,
        max_deviation,
        tolerance,
        pass: max_deviation <= tolerance,
        layers: params.layers.len(),
        max_heads: params.layers.iter().map(|l| l.heads.len()).max().unwrap_or(0),
        head_budget: layer_budget(dims),
        param_norm: param_norm(params),
    }
}

/// Add 1 to one value-path weight in the given layer, chosen so the defect
/// reaches every staged instance beyond the first token.
fn perturb_value_path(params: &mut TransformerParams<f64>, layer: usize) {
    let head = &mut params.layers[layer].heads[0];
    if let Some(w) = head.v.data.iter_mut().find(|w| **w != 0.0) {
        *w += 1.0;
    }
}

fn uniform_vec<R: Rng + ?Sized>(len: usize, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

fn normalized_blocks<R: Rng + ?Sized>(blocks: usize, width: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(blocks * width);
    for _ in 0..blocks {
        let raw: Vec<f64> = (0..width).map(|_| rng.random_range(1e-3..1.0)).collect();
        let z: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|x| x / z));
    }
    out
}

/// Instances staged per trial; at least two so perturbations that spare the
/// first token are still caught.
const TRIAL_INSTANCES: usize = 3;

fn mwu_deviation(layout: &StagedLayout, params: &TransformerParams<f64>, seed: u64) -> Result<f64> {
    let (na, nb) = (layout.dims.max_actions, layout.dims.min_actions);
    let hf = layout.dims.horizon as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances: Vec<MwuInstance> = (0..TRIAL_INSTANCES)
        .map(|_| MwuInstance {
            q_upper: uniform_vec(na * nb, 0.0, hf, &mut rng),
            q_lower: uniform_vec(na * nb, 0.0, hf, &mut rng),
        })
        .collect();
    let mut tokens = stage_mwu(layout, &instances)?;
    for _ in 0..layout.rounds {
        tokens = tf_forward(params, &tokens)?;
    }
    let mut dev = 0.0f64;
    for (kk, inst) in instances.iter().enumerate() {
        let direct = mwu_cce(&inst.q_upper, &inst.q_lower, na, nb, hf, layout.rounds)?;
        let got = read_mwu(layout, &tokens, kk);
        for (g, e) in got
            .joint
            .iter()
            .zip(&direct.joint)
            .chain(got.mu.iter().zip(&direct.final_mu))
            .chain(got.nu.iter().zip(&direct.final_nu))
        {
            dev = dev.max((g - e).abs());
        }
    }
    Ok(dev)
}

fn value_deviation(layout: &StagedLayout, params: &TransformerParams<f64>, seed: u64) -> Result<f64> {
    let vm = &layout.value;
    let hs = vm.horizon * vm.states;
    let cells = hs * vm.joint;
    let hf = layout.dims.horizon as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances: Vec<ValueInstance> = (0..TRIAL_INSTANCES)
        .map(|_| ValueInstance {
            pi: normalized_blocks(hs, vm.joint, &mut rng),
            q_upper: uniform_vec(cells, 0.0, hf, &mut rng),
            q_lower: uniform_vec(cells, 0.0, hf, &mut rng),
        })
        .collect();
    let out = tf_forward(params, &stage_value(layout, &instances)?)?;
    let mut dev = 0.0f64;
    for (kk, inst) in instances.iter().enumerate() {
        let (v_up, v_lo) = read_value(layout, &out, kk);
        for block in 0..hs {
            let lo = block * vm.joint;
            let hi = lo + vm.joint;
            let mut up = 0.0;
            let mut dn = 0.0;
            for r in lo..hi {
                up += inst.pi[r] * inst.q_upper[r];
                dn += inst.pi[r] * inst.q_lower[r];
            }
            dev = dev.max((v_up[block] - up).abs()).max((v_lo[block] - dn).abs());
        }
    }
    Ok(dev)
}

fn lookup_deviation(layout: &StagedLayout, params: &TransformerParams<f64>, seed: u64) -> Result<f64> {
    let lm = &layout.lookup;
    let hs = lm.horizon * lm.states;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances: Vec<LookupInstance> = (0..TRIAL_INSTANCES)
        .map(|_| LookupInstance {
            tables: normalized_blocks(hs, lm.joint, &mut rng),
            state: rng.random_range(0..lm.states),
            step: rng.random_range(1..=lm.horizon),
        })
        .collect();
    let out = tf_forward(params, &stage_lookup(layout, &instances)?)?;
    let mut dev = 0.0f64;
    for (kk, inst) in instances.iter().enumerate() {
        let got = read_lookup(layout, &out, kk);
        let t0 = ((inst.step - 1) * lm.states + inst.state) * lm.joint;
        for (g, e) in got.iter().zip(&inst.tables[t0..t0 + lm.joint]) {
            dev = dev.max((g - e).abs());
        }
    }
    Ok(dev)
}

fn max_deviation_over_trials(
    layout: &StagedLayout,
    params: &TransformerParams<f64>,
    trials: usize,
    seed: u64,
    f: fn(&StagedLayout, &TransformerParams<f64>, u64) -> Result<f64>,
) -> Result<f64> {
    let devs: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| f(layout, params, derive_seed(seed, t as u64)))
        .collect::<Result<_>>()?;
    Ok(devs.into_iter().fold(0.0, f64::max))
}

fn run_verification(
    dims: GameDims,
    rounds: usize,
    trials: usize,
    seed: u64,
    perturb: bool,
) -> Result<RealizeReport> {
    let layout = StagedLayout::new(dims, rounds)?;
    let mut mwu = build_mwu_iteration(&layout)?;
    let mut value = build_value_aggregation(&layout)?;
    let mut lookup = build_policy_lookup(&layout)?;
    if perturb {
        perturb_value_path(&mut mwu, 0);
        perturb_value_path(&mut value, 0);
        // The lookup's first layer only fires for instances whose key
        // matches the perturbed head; the de-averaging layer fires for
        // every instance past the first token.
        perturb_value_path(&mut lookup, 1);
    }
    let sub_steps = if trials == 0 {
        Vec::new()
    } else {
        let mwu_dev = max_deviation_over_trials(&layout, &mwu, trials, seed, mwu_deviation)?;
        let value_dev = max_deviation_over_trials(&layout, &value, trials, seed, value_deviation)?;
        let lookup_dev = max_deviation_over_trials(&layout, &lookup, trials, seed, lookup_deviation)?;
        vec![
            sub_report("equilibrium-iteration", &mwu, &dims, trials, mwu_dev, MWU_TOLERANCE),
            sub_report("value-aggregation", &value, &dims, trials, value_dev, VALUE_TOLERANCE),
            sub_report("policy-lookup", &lookup, &dims, trials, lookup_dev, LOOKUP_TOLERANCE),
        ]
    };
    Ok(RealizeReport {
        dims,
        rounds,
        trials,
        seed,
        perturbed: perturb,
        all_pass: sub_steps.iter().all(|s| s.pass),
        sub_steps,
        notes: NOTES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Build all three fragments and compare them against the direct
/// implementations on `trials` random stagings.
pub fn verify_realization(dims: GameDims, rounds: usize, trials: usize, seed: u64) -> Result<RealizeReport> {
    run_verification(dims, rounds, trials, seed, false)
}

/// Same check with one value-path weight of each fragment perturbed by 1,
/// demonstrating the verification flags defective weights.
pub fn verify_realization_perturbed(
    dims: GameDims,
    rounds: usize,
    trials: usize,
    seed: u64,
) -> Result<RealizeReport> {
    run_verification(dims, rounds, trials, seed, true)
}
