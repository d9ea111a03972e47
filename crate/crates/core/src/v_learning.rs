//! Decentralized V-learning: optimistic value updates with a bonus
//! schedule, exponential weights driven by importance-weighted losses, and
//! the history-replay output policy.
//!
//! The exponential-weights exponent is maintained through the stabilized
//! accumulator L_n = sum_{tau<=n} (omega_tau / omega_n) loss_tau via
//! L_n = loss_n + (alpha_{n-1}(1-alpha_n)/alpha_n) L_{n-1}; the raw omega_n
//! weights overflow quickly while the ratio telescopes.

use crate::error::{Error, Result};
use crate::util::{sample_categorical, softmax};
use rand::Rng;

/// Learning-rate triple at visit count n.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedules {
    /// Value-mixing weight (H+1)/(H+n).
    pub alpha: f64,
    /// Optimism bonus c sqrt(H^3 A ln(HSAG/delta) / n).
    pub beta: f64,
    /// Shared exploration smoothing and step size sqrt(H ln A / (A n)).
    pub gamma_eta: f64,
}

/// Evaluates the three schedules at visit count `n >= 1`.
pub fn schedules(
    n: usize,
    horizon: usize,
    actions: usize,
    states: usize,
    episodes: usize,
    c: f64,
    delta: f64,
) -> Result<Schedules> {
    if n == 0 {
        return Err(Error::invalid("schedules need n >= 1"));
    }
    let (nf, hf, af) = (n as f64, horizon as f64, actions as f64);
    let iota = (hf * states as f64 * af * episodes as f64 / delta).ln();
    Ok(Schedules {
        alpha: (hf + 1.0) / (hf + nf),
        beta: c * (hf.powi(3) * af * iota / nf).sqrt(),
        gamma_eta: (hf * af.ln() / (af * nf)).sqrt(),
    })
}

/// Weights alpha_{n,i} = alpha_i prod_{j=i+1..n} (1 - alpha_j) over the n
/// visits; they sum to one exactly because alpha_1 = 1 telescopes.
pub fn alpha_weights(n: usize, horizon: usize) -> Vec<f64> {
    assert!(n >= 1, "alpha_weights needs n >= 1");
    let hf = horizon as f64;
    let alpha = |i: usize| (hf + 1.0) / (hf + i as f64);
    let mut w = vec![0.0; n];
    let mut suffix = 1.0;
    for i in (1..=n).rev() {
        w[i - 1] = alpha(i) * suffix;
        suffix *= 1.0 - alpha(i);
    }
    w
}

/// Per-(h, s) visit log: episode index and the policy snapshot taken right
/// after that visit's update.
#[derive(Debug, Clone)]
pub struct PolicyHistory {
    horizon: usize,
    states: usize,
    entries: Vec<Vec<(usize, Vec<f64>)>>,
}

impl PolicyHistory {
    pub fn new(horizon: usize, states: usize) -> Self {
        PolicyHistory { horizon, states, entries: vec![Vec::new(); horizon * states] }
    }

    fn idx(&self, h: usize, s: usize) -> usize {
        (h - 1) * self.states + s
    }

    pub fn push(&mut self, h: usize, s: usize, g: usize, policy: Vec<f64>) {
        let idx = self.idx(h, s);
        let cell = &mut self.entries[idx];
        debug_assert!(cell.last().map_or(true, |(prev, _)| *prev < g), "episode indices must increase");
        cell.push((g, policy));
    }

    /// Number of visits to (h, s) in episodes strictly before `g`.
    pub fn visits_before(&self, h: usize, s: usize, g: usize) -> usize {
        self.entries[self.idx(h, s)].partition_point(|(gi, _)| *gi < g)
    }

    /// i-th visit (0-based) at (h, s): episode index and snapshot.
    pub fn visit(&self, h: usize, s: usize, i: usize) -> &(usize, Vec<f64>) {
        &self.entries[self.idx(h, s)][i]
    }

    pub fn visit_count(&self, h: usize, s: usize) -> usize {
        self.entries[self.idx(h, s)].len()
    }
}

/// One player's V-learning state.
#[derive(Debug, Clone)]
pub struct VLearner {
    pub horizon: usize,
    pub states: usize,
    pub actions: usize,
    c: f64,
    delta: f64,
    episodes: usize,
    /// Rows h = 1..H+1 of V^h(s); the boundary row stays zero.
    v: Vec<f64>,
    vtilde: Vec<f64>,
    counts: Vec<u64>,
    /// Stabilized loss accumulator per (h, s, a).
    loss: Vec<f64>,
    policy: Vec<f64>,
}

impl VLearner {
    pub fn new(horizon: usize, states: usize, actions: usize, episodes: usize, c: f64, delta: f64) -> Result<Self> {
        if horizon == 0 || states == 0 || actions == 0 || episodes == 0 {
            return Err(Error::invalid("dimensions and episode budget must be positive"));
        }
        if !(0.0 < delta && delta < 1.0) {
            return Err(Error::invalid(format!("delta {delta} outside (0, 1)")));
        }
        let mut v = vec![0.0; (horizon + 1) * states];
        let mut vtilde = vec![0.0; horizon * states];
        for h in 1..=horizon {
            for s in 0..states {
                v[(h - 1) * states + s] = (horizon + 1 - h) as f64;
                vtilde[(h - 1) * states + s] = (horizon + 1 - h) as f64;
            }
        }
        Ok(VLearner {
            horizon,
            states,
            actions,
            c,
            delta,
            episodes,
            v,
            vtilde,
            counts: vec![0; horizon * states],
            loss: vec![0.0; horizon * states * actions],
            policy: vec![1.0 / actions as f64; horizon * states * actions],
        })
    }

    fn cell(&self, h: usize, s: usize) -> usize {
        (h - 1) * self.states + s
    }

    /// V^h(s) with h up to H+1 (boundary zero).
    pub fn value(&self, h: usize, s: usize) -> f64 {
        if h == self.horizon + 1 {
            0.0
        } else {
            self.v[(h - 1) * self.states + s]
        }
    }

    /// Current policy row at (h, s).
    pub fn policy_at(&self, h: usize, s: usize) -> &[f64] {
        let base = self.cell(h, s) * self.actions;
        &self.policy[base..base + self.actions]
    }

    /// Samples the current policy; returns the action and the policy row it
    /// was drawn from (the caller needs the probability for the update).
    pub fn act<R: Rng + ?Sized>(&self, h: usize, s: usize, rng: &mut R) -> (usize, Vec<f64>) {
        let p = self.policy_at(h, s).to_vec();
        (sample_categorical(&p, rng), p)
    }

    /// One visit at (h, s): optimistic value mixing, the importance-weighted
    /// loss on the taken action, the stabilized accumulator step, and the
    /// policy refresh. Appends the new policy to `history` under episode `g`.
    pub fn update(
        &mut self,
        history: &mut PolicyHistory,
        g: usize,
        h: usize,
        s: usize,
        a: usize,
        r: f64,
        s_next: usize,
    ) -> Result<()> {
        if h == 0 || h > self.horizon || s >= self.states || a >= self.actions || s_next >= self.states {
            return Err(Error::invalid("index out of range in v-learning update"));
        }
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::contract(format!("reward {r} outside [0, 1]")));
        }
        let cell = self.cell(h, s);
        self.counts[cell] += 1;
        let n = self.counts[cell] as usize;
        let sched = schedules(n, self.horizon, self.actions, self.states, self.episodes, self.c, self.delta)?;
        let v_next = self.value(h + 1, s_next);
        let hf = self.horizon as f64;

        self.vtilde[cell] = (1.0 - sched.alpha) * self.vtilde[cell] + sched.alpha * (r + v_next + sched.beta);
        self.v[cell] = self.vtilde[cell].min(hf + 1.0 - h as f64);

        let base = cell * self.actions;
        let mu_a = self.policy[base + a];
        let step_loss = ((hf - r - v_next) / hf) / (mu_a + sched.gamma_eta);
        if n == 1 {
            for k in 0..self.actions {
                self.loss[base + k] = 0.0;
            }
        } else {
            let alpha_prev = (hf + 1.0) / (hf + (n - 1) as f64);
            let factor = alpha_prev * (1.0 - sched.alpha) / sched.alpha;
            for k in 0..self.actions {
                self.loss[base + k] *= factor;
            }
        }
        self.loss[base + a] += step_loss;

        let logits: Vec<f64> = (0..self.actions).map(|k| -sched.gamma_eta * self.loss[base + k]).collect();
        let mu = softmax(&logits);
        self.policy[base..base + self.actions].copy_from_slice(&mu);
        history.push(h, s, g, mu);
        Ok(())
    }
}

/// Output-policy executor: carries the episode pointer that the replay rule
/// rewinds as it walks down the horizon.
#[derive(Debug, Clone, Copy)]
pub struct OutputExecutor {
    pub g: usize,
}

impl OutputExecutor {
    /// Fresh executor with g drawn uniformly from [1, episodes].
    pub fn sample<R: Rng + ?Sized>(episodes: usize, rng: &mut R) -> Self {
        OutputExecutor { g: rng.random_range(1..=episodes) }
    }
}

/// One action from the output policy: with n prior visits at (h, s) before
/// episode g, replays visit i with probability alpha_{n,i} and rewinds the
/// executor to that episode; unvisited states act uniformly and leave the
/// pointer unchanged.
pub fn output_act<R: Rng + ?Sized>(
    history: &PolicyHistory,
    h: usize,
    s: usize,
    actions: usize,
    exec: &mut OutputExecutor,
    rng: &mut R,
) -> usize {
    let n = history.visits_before(h, s, exec.g);
    if n == 0 {
        return rng.random_range(0..actions);
    }
    let w = alpha_weights(n, history.horizon);
    let i = sample_categorical(&w, rng);
    let (gi, snapshot) = history.visit(h, s, i);
    exec.g = *gi;
    sample_categorical(snapshot, rng)
}

/// Expected output policy at (h, s) as seen from episode cutoff `g`:
/// the alpha-weighted mixture of the first n snapshots. Used to evaluate
/// decentralized runs as a Markov product policy.
pub fn averaged_output_policy(history: &PolicyHistory, h: usize, s: usize, actions: usize, g: usize) -> Vec<f64> {
    let n = history.visits_before(h, s, g);
    if n == 0 {
        return vec![1.0 / actions as f64; actions];
    }
    let w = alpha_weights(n, history.horizon);
    let mut out = vec![0.0; actions];
    for i in 0..n {
        let (_, snap) = history.visit(h, s, i);
        for (o, &p) in out.iter_mut().zip(snap) {
            *o += w[i] * p;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_hand_values() {
        // alpha_1 = 1 for any H; alpha_3 at H=2 is 3/5.
        assert_eq!(schedules(1, 2, 5, 4, 300, 1.0, 0.1).unwrap().alpha, 1.0);
        assert!((schedules(3, 2, 5, 4, 300, 1.0, 0.1).unwrap().alpha - 0.6).abs() < 1e-15);
        // eta_1 at H=2, A=5: sqrt(2 ln 5 / 5).
        let eta = schedules(1, 2, 5, 4, 300, 1.0, 0.1).unwrap().gamma_eta;
        assert!((eta - (2.0 * 5.0_f64.ln() / 5.0).sqrt()).abs() < 1e-15);
        assert!((eta - 0.8024).abs() < 1e-4);
        // beta_1 for H=2, A=5, S=4, G=300, delta=0.1: sqrt(40 ln 120000).
        let beta = schedules(1, 2, 5, 4, 300, 1.0, 0.1).unwrap().beta;
        assert!((beta - (40.0 * 120_000.0_f64.ln()).sqrt()).abs() < 1e-12);
        assert!((beta - 21.63).abs() < 5e-3);
        assert!(schedules(0, 2, 5, 4, 300, 1.0, 0.1).is_err());
    }

    #[test]
    fn alpha_weight_hand_values_and_normalization() {
        assert_eq!(alpha_weights(1, 2), vec![1.0]);
        let w = alpha_weights(2, 2);
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
        for h in [1usize, 2, 3] {
            for n in [1usize, 2, 5, 50, 10_000] {
                let w = alpha_weights(n, h);
                assert!(w.iter().all(|&x| x >= 0.0));
                let sum: f64 = w.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12, "n={n} H={h}: sum {sum}");
            }
        }
    }

    #[test]
    fn first_update_hand_values() {
        // H=2, h=1, r=0.5, c=1, A=5, S=4, G=300, delta=0.1. V^2 init = 1.
        let mut learner = VLearner::new(2, 4, 5, 300, 1.0, 0.1).unwrap();
        let mut hist = PolicyHistory::new(2, 4);
        learner.update(&mut hist, 1, 1, 0, 0, 0.5, 1).unwrap();
        // Vtilde = 0.5 + 1 + beta_1 ~ 23.13 clamps to H = 2.
        assert_eq!(learner.value(1, 0), 2.0);
        assert!((learner.vtilde[0] - 23.13).abs() < 0.005);
        // Loss on the taken action: ((2 - 0.5 - 1)/2) / (0.2 + eta_1) ~ 0.2494.
        let eta = schedules(1, 2, 5, 4, 300, 1.0, 0.1).unwrap().gamma_eta;
        let expect = 0.25 / (0.2 + eta);
        assert!((learner.loss[0] - expect).abs() < 1e-12);
        assert!((expect - 0.2494).abs() < 1e-4);
        for k in 1..5 {
            assert_eq!(learner.loss[k], 0.0);
        }
        // Policy refreshed and snapshotted.
        assert_eq!(hist.visit_count(1, 0), 1);
        crate::util::check_distribution(learner.policy_at(1, 0), 1e-12, "policy").unwrap();
        assert!(learner.policy_at(1, 0)[0] < 0.2);
    }

    #[test]
    fn zero_numerator_leaves_policy_uniform() {
        // r = H - V^{h+1}(s_next): loss numerator vanishes, policy stays put.
        let mut learner = VLearner::new(2, 2, 3, 100, 1.0, 0.1).unwrap();
        let mut hist = PolicyHistory::new(2, 2);
        // At h=1, V^2 init = 1, so r = 2 - 1 = 1 zeroes the numerator.
        learner.update(&mut hist, 1, 1, 0, 1, 1.0, 0).unwrap();
        for &p in learner.policy_at(1, 0) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn value_stays_clamped_under_many_updates() {
        let mut learner = VLearner::new(3, 2, 2, 500, 1.0, 0.05).unwrap();
        let mut hist = PolicyHistory::new(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for g in 1..=200 {
            for h in 1..=3 {
                let s = rng.random_range(0..2);
                let (a, _) = learner.act(h, s, &mut rng);
                let r: f64 = rng.random();
                let s2 = rng.random_range(0..2);
                learner.update(&mut hist, g, h, s, a, r, s2).unwrap();
                let v = learner.value(h, s);
                assert!(v >= 0.0 && v <= (3 + 1 - h) as f64);
            }
        }
    }

    /// Literal weighted-sum form of the accumulator, evaluated in exact
    /// rationals on rational losses: L_n = sum_{tau<=n} (omega_tau/omega_n)
    /// loss_tau with omega_tau = alpha_tau / prod_{j=2..tau} (1 - alpha_j).
    /// The ratio omega_tau/omega_n is a product of rationals, so the whole
    /// sum stays exact.
    fn literal_accumulator(losses_num: &[i64], losses_den: i64, horizon: i64) -> f64 {
        use num_bigint::BigInt;
        use num_rational::BigRational;
        let n = losses_num.len();
        let rat = |p: i64, q: i64| BigRational::new(BigInt::from(p), BigInt::from(q));
        let alpha = |i: usize| rat(horizon + 1, horizon + i as i64);
        let mut total = BigRational::new(BigInt::from(0), BigInt::from(1));
        for tau in 1..=n {
            // omega_tau / omega_n = (alpha_tau / alpha_n) prod_{j=tau+1..n} (1 - alpha_j).
            let mut ratio = alpha(tau) / alpha(n);
            for j in tau + 1..=n {
                let one = rat(1, 1);
                ratio *= one - alpha(j);
            }
            total += ratio * rat(losses_num[tau - 1], losses_den);
        }
        let num: f64 = total.numer().to_string().parse().unwrap();
        let den: f64 = total.denom().to_string().parse().unwrap();
        num / den
    }

    #[test]
    fn stabilized_recurrence_matches_exact_rational_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for h in [1usize, 2, 3] {
            let hf = h as f64;
            let mut acc = 0.0_f64;
            let mut losses = Vec::new();
            for n in 1..=20usize {
                // Rational losses on a 1/256 grid keep the oracle exact.
                let num = rng.random_range(0..512i64);
                losses.push(num);
                let step = num as f64 / 256.0;
                if n == 1 {
                    acc = step;
                } else {
                    let alpha_prev = (hf + 1.0) / (hf + (n - 1) as f64);
                    let alpha_n = (hf + 1.0) / (hf + n as f64);
                    acc = step + alpha_prev * (1.0 - alpha_n) / alpha_n * acc;
                }
                let exact = literal_accumulator(&losses, 256, h as i64);
                assert!((acc - exact).abs() <= 1e-9, "H={h} n={n}: {acc} vs {exact}");
            }
        }
    }

    #[test]
    fn output_act_replays_single_snapshot() {
        let mut hist = PolicyHistory::new(1, 1);
        hist.push(1, 1 - 1, 3, vec![0.0, 1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut exec = OutputExecutor { g: 10 };
        for _ in 0..32 {
            let mut e = exec;
            assert_eq!(output_act(&hist, 1, 0, 3, &mut e, &mut rng), 1);
            assert_eq!(e.g, 3);
        }
        // Before the only visit, the rule falls back to uniform and keeps g.
        exec.g = 2;
        let mut seen = [false; 3];
        for _ in 0..64 {
            let mut e = exec;
            seen[output_act(&hist, 1, 0, 3, &mut e, &mut rng)] = true;
            assert_eq!(e.g, 2);
        }
        assert!(seen.iter().all(|&x| x));
    }

    #[test]
    fn output_marginal_matches_alpha_mixture() {
        let mut hist = PolicyHistory::new(2, 1);
        hist.push(1, 0, 1, vec![0.7, 0.2, 0.1]);
        hist.push(1, 0, 4, vec![0.1, 0.8, 0.1]);
        hist.push(1, 0, 9, vec![0.2, 0.2, 0.6]);
        let g = 10;
        let expect = averaged_output_policy(&hist, 1, 0, 3, g);
        let w = alpha_weights(3, 2);
        for k in 0..3 {
            let direct =
                w[0] * hist.visit(1, 0, 0).1[k] + w[1] * hist.visit(1, 0, 1).1[k] + w[2] * hist.visit(1, 0, 2).1[k];
            assert!((expect[k] - direct).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let trials = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..trials {
            let mut exec = OutputExecutor { g };
            counts[output_act(&hist, 1, 0, 3, &mut exec, &mut rng)] += 1;
        }
        for k in 0..3 {
            let freq = counts[k] as f64 / trials as f64;
            let sigma = (expect[k] * (1.0 - expect[k]) / trials as f64).sqrt();
            assert!((freq - expect[k]).abs() < 4.0 * sigma, "arm {k}: {freq} vs {}", expect[k]);
        }
    }

    #[test]
    fn matrix_self_play_gap_decays() {
        // H=1 reduces V-learning to exponential weights with gamma
        // smoothing; averaged policies should approach the equilibrium.
        let games = 10;
        let episodes = 3000;
        let mut ratios = Vec::new();
        let mut first_means = Vec::new();
        let mut last_means = Vec::new();
        for seed in 0..games {
            let game = crate::game::sample_matrix_game(5, 5, 1000 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut maxp = VLearner::new(1, 1, 5, episodes, 1.0, 0.1).unwrap();
            let mut minp = VLearner::new(1, 1, 5, episodes, 1.0, 0.1).unwrap();
            let mut hist_max = PolicyHistory::new(1, 1);
            let mut hist_min = PolicyHistory::new(1, 1);
            let mut gaps = Vec::with_capacity(episodes);
            for g in 1..=episodes as usize {
                let (a, _) = maxp.act(1, 0, &mut rng);
                let (b, _) = minp.act(1, 0, &mut rng);
                let r = game.reward_at(1, 0, a, b);
                maxp.update(&mut hist_max, g, 1, 0, a, r, 0).unwrap();
                minp.update(&mut hist_min, g, 1, 0, b, 1.0 - r, 0).unwrap();
                // Gap of the replay-weighted output policies given everything
                // up to and including episode g.
                let mu_bar = averaged_output_policy(&hist_max, 1, 0, 5, g + 1);
                let nu_bar = averaged_output_policy(&hist_min, 1, 0, 5, g + 1);
                gaps.push(crate::equilibrium::matrix_ne_gap(&game.reward, 5, 5, &mu_bar, &nu_bar));
            }
            let tenth = episodes as usize / 10;
            let first = crate::util::mean(&gaps[..tenth]);
            let last = crate::util::mean(&gaps[episodes as usize - tenth..]);
            first_means.push(first);
            last_means.push(last);
            ratios.push(last / first);
        }
        let first = crate::util::mean(&first_means);
        let last = crate::util::mean(&last_means);
        assert!(last < 0.25 * first, "decay ratio {} (first {first}, last {last})", last / first);
    }
}
