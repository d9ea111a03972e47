//! Best responses, Nash-equilibrium gap, and policy averaging.
//!
//! The responder to a fixed Markov policy faces a single-agent MDP, so best
//! responses are computed by backward induction and attained by a
//! deterministic policy; `ne_gap` is the sum of both players' incentives to
//! deviate and is nonnegative up to floating-point rounding.

use crate::error::{Error, Result};
use crate::game::MarkovGame;
use serde::{Deserialize, Serialize};

/// Per-(h, s) probability table for one player.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePolicy {
    pub horizon: usize,
    pub states: usize,
    pub actions: usize,
    /// Row-major (h, s, action) probabilities, h 0-based internally.
    pub probs: Vec<f64>,
}

impl StagePolicy {
    pub fn uniform(horizon: usize, states: usize, actions: usize) -> Self {
        StagePolicy {
            horizon,
            states,
            actions,
            probs: vec![1.0 / actions as f64; horizon * states * actions],
        }
    }

    pub fn from_fn(horizon: usize, states: usize, actions: usize, mut f: impl FnMut(usize, usize) -> Vec<f64>) -> Self {
        let mut probs = Vec::with_capacity(horizon * states * actions);
        for h in 1..=horizon {
            for s in 0..states {
                let row = f(h, s);
                assert_eq!(row.len(), actions);
                probs.extend_from_slice(&row);
            }
        }
        StagePolicy { horizon, states, actions, probs }
    }

    /// Distribution over actions at (h, s); h is 1-based.
    pub fn at(&self, h: usize, s: usize) -> &[f64] {
        let base = ((h - 1) * self.states + s) * self.actions;
        &self.probs[base..base + self.actions]
    }

    pub fn at_mut(&mut self, h: usize, s: usize) -> &mut [f64] {
        let base = ((h - 1) * self.states + s) * self.actions;
        &mut self.probs[base..base + self.actions]
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.len() != self.horizon * self.states * self.actions {
            return Err(Error::dims("policy table size mismatch"));
        }
        for h in 1..=self.horizon {
            for s in 0..self.states {
                crate::util::check_distribution(self.at(h, s), 1e-9, "stage policy")?;
            }
        }
        Ok(())
    }
}

/// Marginals of a joint distribution over A x B (row-major a * B + b).
pub fn joint_marginals(joint: &[f64], max_actions: usize, min_actions: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(joint.len(), max_actions * min_actions);
    let mut mu = vec![0.0; max_actions];
    let mut nu = vec![0.0; min_actions];
    for a in 0..max_actions {
        for b in 0..min_actions {
            let p = joint[a * min_actions + b];
            mu[a] += p;
            nu[b] += p;
        }
    }
    (mu, nu)
}

fn check_policy_shape(game: &MarkovGame, policy: &StagePolicy, actions: usize, who: &str) -> Result<()> {
    let d = &game.dims;
    if policy.horizon != d.horizon || policy.states != d.states || policy.actions != actions {
        return Err(Error::dims(format!(
            "{who} policy shaped ({}, {}, {}), game expects ({}, {}, {actions})",
            policy.horizon, policy.states, policy.actions, d.horizon, d.states
        )));
    }
    Ok(())
}

/// Value V at the initial state when the max player commits to `mu` and the
/// min player best-responds.
pub fn best_response_value_vs_max(game: &MarkovGame, mu: &StagePolicy) -> Result<f64> {
    check_policy_shape(game, mu, game.dims.max_actions, "max")?;
    let d = &game.dims;
    let mut v_next = vec![0.0; d.states];
    for h in (1..=d.horizon).rev() {
        let mut v_here = vec![0.0; d.states];
        for s in 0..d.states {
            let mu_row = mu.at(h, s);
            let mut best = f64::INFINITY;
            for b in 0..d.min_actions {
                let mut q = 0.0;
                for a in 0..d.max_actions {
                    let p = mu_row[a];
                    if p == 0.0 {
                        continue;
                    }
                    let mut cont = game.reward_at(h, s, a, b);
                    let row = game.transition_row(h, s, a, b);
                    for (s2, &pr) in row.iter().enumerate() {
                        if pr > 0.0 {
                            cont += pr * v_next[s2];
                        }
                    }
                    q += p * cont;
                }
                if q < best {
                    best = q;
                }
            }
            v_here[s] = best;
        }
        v_next = v_here;
    }
    Ok(v_next[game.initial_state])
}

/// Value V at the initial state when the min player commits to `nu` and the
/// max player best-responds.
pub fn best_response_value_vs_min(game: &MarkovGame, nu: &StagePolicy) -> Result<f64> {
    check_policy_shape(game, nu, game.dims.min_actions, "min")?;
    let d = &game.dims;
    let mut v_next = vec![0.0; d.states];
    for h in (1..=d.horizon).rev() {
        let mut v_here = vec![0.0; d.states];
        for s in 0..d.states {
            let nu_row = nu.at(h, s);
            let mut best = f64::NEG_INFINITY;
            for a in 0..d.max_actions {
                let mut q = 0.0;
                for b in 0..d.min_actions {
                    let p = nu_row[b];
                    if p == 0.0 {
                        continue;
                    }
                    let mut cont = game.reward_at(h, s, a, b);
                    let row = game.transition_row(h, s, a, b);
                    for (s2, &pr) in row.iter().enumerate() {
                        if pr > 0.0 {
                            cont += pr * v_next[s2];
                        }
                    }
                    q += p * cont;
                }
                if q > best {
                    best = q;
                }
            }
            v_here[s] = best;
        }
        v_next = v_here;
    }
    Ok(v_next[game.initial_state])
}

/// Nash-equilibrium gap of a product policy pair: the best-responding
/// opponent's value against each side, differenced. Nonnegative up to
/// rounding for any (mu, nu).
pub fn ne_gap(game: &MarkovGame, mu: &StagePolicy, nu: &StagePolicy) -> Result<f64> {
    Ok(best_response_value_vs_min(game, nu)? - best_response_value_vs_max(game, mu)?)
}

/// Matrix-game gap max_a (R nu)_a - min_b (mu^T R)_b for a one-shot payoff
/// matrix stored row-major (a, b).
pub fn matrix_ne_gap(reward: &[f64], max_actions: usize, min_actions: usize, mu: &[f64], nu: &[f64]) -> f64 {
    debug_assert_eq!(reward.len(), max_actions * min_actions);
    debug_assert_eq!(mu.len(), max_actions);
    debug_assert_eq!(nu.len(), min_actions);
    let mut best_row = f64::NEG_INFINITY;
    for a in 0..max_actions {
        let mut val = 0.0;
        for b in 0..min_actions {
            val += reward[a * min_actions + b] * nu[b];
        }
        best_row = best_row.max(val);
    }
    let mut best_col = f64::INFINITY;
    for b in 0..min_actions {
        let mut val = 0.0;
        for a in 0..max_actions {
            val += reward[a * min_actions + b] * mu[a];
        }
        best_col = best_col.min(val);
    }
    best_row - best_col
}

/// Incremental mean of probability vectors; `push` returns the mean so far.
#[derive(Debug, Clone)]
pub struct RunningMean {
    n: usize,
    mean: Vec<f64>,
}

impl RunningMean {
    pub fn new(len: usize) -> Self {
        RunningMean { n: 0, mean: vec![0.0; len] }
    }

    pub fn push(&mut self, x: &[f64]) -> &[f64] {
        debug_assert_eq!(x.len(), self.mean.len());
        self.n += 1;
        let w = 1.0 / self.n as f64;
        for (m, &v) in self.mean.iter_mut().zip(x) {
            *m += (v - *m) * w;
        }
        &self.mean
    }

    pub fn value(&self) -> &[f64] {
        &self.mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{sample_markov_game, GameDims, MarkovGame};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent trajectory-enumeration evaluator: value of (mu, det response)
    /// by naive recursion with no memoization, used as the oracle.
    fn eval_vs_det_min(game: &MarkovGame, mu: &StagePolicy, det: &[usize], h: usize, s: usize) -> f64 {
        if h > game.dims.horizon {
            return 0.0;
        }
        let b = det[(h - 1) * game.dims.states + s];
        let mut total = 0.0;
        for a in 0..game.dims.max_actions {
            let p = mu.at(h, s)[a];
            if p == 0.0 {
                continue;
            }
            let mut cont = game.reward_at(h, s, a, b);
            for (s2, &pr) in game.transition_row(h, s, a, b).iter().enumerate() {
                if pr > 0.0 {
                    cont += pr * eval_vs_det_min(game, mu, det, h + 1, s2);
                }
            }
            total += p * cont;
        }
        total
    }

    fn eval_vs_det_max(game: &MarkovGame, nu: &StagePolicy, det: &[usize], h: usize, s: usize) -> f64 {
        if h > game.dims.horizon {
            return 0.0;
        }
        let a = det[(h - 1) * game.dims.states + s];
        let mut total = 0.0;
        for b in 0..game.dims.min_actions {
            let p = nu.at(h, s)[b];
            if p == 0.0 {
                continue;
            }
            let mut cont = game.reward_at(h, s, a, b);
            for (s2, &pr) in game.transition_row(h, s, a, b).iter().enumerate() {
                if pr > 0.0 {
                    cont += pr * eval_vs_det_max(game, nu, det, h + 1, s2);
                }
            }
            total += p * cont;
        }
        total
    }

    fn all_det_policies(cells: usize, actions: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![0; cells]];
        for c in 0..cells {
            let mut next = Vec::new();
            for partial in out {
                for k in 0..actions {
                    let mut p = partial.clone();
                    p[c] = k;
                    next.push(p);
                }
            }
            out = next;
        }
        out
    }

    fn random_policy(rng: &mut ChaCha8Rng, horizon: usize, states: usize, actions: usize) -> StagePolicy {
        StagePolicy::from_fn(horizon, states, actions, |_, _| {
            let raw: Vec<f64> = (0..actions).map(|_| rng.random::<f64>() + 1e-3).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / sum).collect()
        })
    }

    #[test]
    fn one_shot_hand_values() {
        // R = [[1, 0], [0, 1]].
        let dims = GameDims::new(1, 1, 2, 2);
        let game = MarkovGame {
            dims,
            transition: vec![1.0; 4],
            reward: vec![1.0, 0.0, 0.0, 1.0],
            initial_state: 0,
        };
        let uniform = StagePolicy::uniform(1, 1, 2);
        // Min best-responds to uniform max: both columns give 0.5.
        assert!((best_response_value_vs_max(&game, &uniform).unwrap() - 0.5).abs() < 1e-15);
        // Max best-responds to nu = e_1: top row yields 1.
        let nu = StagePolicy::from_fn(1, 1, 2, |_, _| vec![1.0, 0.0]);
        assert!((best_response_value_vs_min(&game, &nu).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_induction_matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for seed in 0..50u64 {
            let game = sample_markov_game(3, 3, 2, 2, seed);
            let mu = random_policy(&mut rng, 2, 2, 3);
            let nu = random_policy(&mut rng, 2, 2, 3);

            let fast = best_response_value_vs_max(&game, &mu).unwrap();
            let dets = all_det_policies(4, 3);
            let brute = dets
                .iter()
                .map(|det| eval_vs_det_min(&game, &mu, det, 1, game.initial_state))
                .fold(f64::INFINITY, f64::min);
            assert!((fast - brute).abs() <= 1e-12, "seed {seed}: min side {fast} vs {brute}");

            let fast = best_response_value_vs_min(&game, &nu).unwrap();
            let brute = dets
                .iter()
                .map(|det| eval_vs_det_max(&game, &nu, det, 1, game.initial_state))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((fast - brute).abs() <= 1e-12, "seed {seed}: max side {fast} vs {brute}");
        }
    }

    #[test]
    fn gap_is_nonnegative_for_random_policy_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..40u64 {
            let game = sample_markov_game(4, 3, 3, 2, seed);
            let mu = random_policy(&mut rng, 2, 3, 4);
            let nu = random_policy(&mut rng, 2, 3, 3);
            let gap = ne_gap(&game, &mu, &nu).unwrap();
            assert!(gap >= -1e-9, "seed {seed}: gap {gap}");
        }
    }

    #[test]
    fn two_by_two_interior_equilibrium_has_tiny_gap() {
        // Closed-form mixed equilibrium of a 2x2 game without a saddle
        // point, verified through the gap decomposition. Grid refinement
        // over each side's single free parameter reaches the same point.
        for seed in 0..20u64 {
            let game = crate::game::sample_matrix_game(2, 2, seed);
            let r = &game.reward;
            let (r11, r12, r21, r22) = (r[0], r[1], r[2], r[3]);
            let denom = r11 - r12 - r21 + r22;
            let saddle_free = denom.abs() > 1e-9;
            let (p, q) = if saddle_free {
                (((r22 - r21) / denom).clamp(0.0, 1.0), ((r22 - r12) / denom).clamp(0.0, 1.0))
            } else {
                (0.5, 0.5)
            };
            // Refine each side independently: the matrix gap decomposes into
            // convex per-player terms, so coordinate grid descent is exact.
            let refine = |init: f64, eval: &dyn Fn(f64) -> f64| {
                let mut lo = 0.0_f64;
                let mut hi = 1.0_f64;
                let mut best = init.clamp(0.0, 1.0);
                for _ in 0..8 {
                    let step = (hi - lo) / 100.0;
                    let mut best_val = f64::INFINITY;
                    let mut arg = best;
                    for k in 0..=100 {
                        let x = lo + step * k as f64;
                        let v = eval(x);
                        if v < best_val {
                            best_val = v;
                            arg = x;
                        }
                    }
                    best = arg;
                    lo = (best - step).max(0.0);
                    hi = (best + step).min(1.0);
                }
                best
            };
            let row_term = |q: f64| {
                let col = [q, 1.0 - q];
                (0..2)
                    .map(|a| r[a * 2] * col[0] + r[a * 2 + 1] * col[1])
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let col_term = |p: f64| {
                let row = [p, 1.0 - p];
                -(0..2)
                    .map(|b| r[b] * row[0] + r[2 + b] * row[1])
                    .fold(f64::INFINITY, f64::min)
            };
            let q_star = refine(q, &row_term);
            let p_star = refine(p, &col_term);
            let gap = matrix_ne_gap(r, 2, 2, &[p_star, 1.0 - p_star], &[q_star, 1.0 - q_star]);
            assert!(gap.abs() <= 1e-6, "seed {seed}: gap {gap}");
        }
    }

    #[test]
    fn matrix_gap_decreases_toward_equilibrium_mixture() {
        // Uniform play on matching-pennies-style payoffs is the equilibrium.
        let r = vec![1.0, 0.0, 0.0, 1.0];
        let uniform = vec![0.5, 0.5];
        let skew = vec![0.9, 0.1];
        assert!(matrix_ne_gap(&r, 2, 2, &uniform, &uniform).abs() < 1e-12);
        assert!(matrix_ne_gap(&r, 2, 2, &skew, &skew) > 0.1);
    }

    #[test]
    fn running_mean_averages_prefixes() {
        let mut rm = RunningMean::new(2);
        rm.push(&[1.0, 0.0]);
        let m = rm.push(&[0.0, 1.0]).to_vec();
        assert!((m[0] - 0.5).abs() < 1e-15 && (m[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn joint_marginals_sum_rows_and_columns() {
        let joint = vec![0.1, 0.2, 0.3, 0.4];
        let (mu, nu) = joint_marginals(&joint, 2, 2);
        assert!((mu[0] - 0.3).abs() < 1e-15 && (mu[1] - 0.7).abs() < 1e-15);
        assert!((nu[0] - 0.4).abs() < 1e-15 && (nu[1] - 0.6).abs() < 1e-15);
    }
}
