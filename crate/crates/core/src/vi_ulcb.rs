//! Centralized optimistic value iteration: upper/lower confidence Q-values
//! over an empirical model, with a joint coarse-correlated-equilibrium
//! policy per state solved by exponential weights.
//!
//! Planning runs a backward pass each episode; unvisited cells keep the
//! initialization (Q_upper = H, Q_lower = 0) rather than dividing by a zero
//! count, so fresh states plan the uniform joint policy.

use crate::equilibrium::StagePolicy;
use crate::error::{Error, Result};
use crate::game::GameDims;
use crate::no_regret::mwu_cce;
use crate::util::sample_categorical;
use rand::Rng;

/// Log factor ln(S·A·B·T/δ) with T = G·H.
pub fn iota(dims: &GameDims, episodes: usize, delta: f64) -> f64 {
    let t = (episodes * dims.horizon) as f64;
    (dims.states as f64 * dims.max_actions as f64 * dims.min_actions as f64 * t / delta).ln()
}

/// Confidence width c·sqrt(H²·S·ι/n).
pub fn bonus(c: f64, horizon: usize, states: usize, iota: f64, n: u64) -> f64 {
    c * ((horizon * horizon * states) as f64 * iota / n as f64).sqrt()
}

/// Centralized learner state: empirical model, confidence Q-tables, and the
/// per-episode joint policies.
#[derive(Debug, Clone)]
pub struct ViUlcbState {
    pub dims: GameDims,
    c: f64,
    delta: f64,
    n_mwu: Option<usize>,
    counts: Vec<u64>,
    next_counts: Vec<u64>,
    r_hat: Vec<f64>,
    p_hat: Vec<f64>,
    q_upper: Vec<f64>,
    q_lower: Vec<f64>,
    /// Rows h = 1..H+1; the boundary row stays zero.
    v_upper: Vec<f64>,
    v_lower: Vec<f64>,
    policy: Vec<f64>,
    /// Full joint-policy table recorded at each planning pass.
    pub policy_history: Vec<Vec<f64>>,
    planned: bool,
}

impl ViUlcbState {
    /// `n_mwu = None` lets each planning pass default the solver budget to
    /// the episode budget it is given.
    pub fn new(dims: GameDims, c: f64, delta: f64, n_mwu: Option<usize>) -> Result<Self> {
        if dims.horizon == 0 || dims.states == 0 || dims.max_actions == 0 || dims.min_actions == 0 {
            return Err(Error::invalid("dimensions must be positive"));
        }
        if !(0.0 < delta && delta < 1.0) {
            return Err(Error::invalid(format!("delta {delta} outside (0, 1)")));
        }
        let cells = dims.horizon * dims.states * dims.max_actions * dims.min_actions;
        let hf = dims.horizon as f64;
        Ok(ViUlcbState {
            dims,
            c,
            delta,
            n_mwu,
            counts: vec![0; cells],
            next_counts: vec![0; cells * dims.states],
            r_hat: vec![0.0; cells],
            p_hat: vec![0.0; cells * dims.states],
            q_upper: vec![hf; cells],
            q_lower: vec![0.0; cells],
            v_upper: vec![0.0; (dims.horizon + 1) * dims.states],
            v_lower: vec![0.0; (dims.horizon + 1) * dims.states],
            policy: vec![
                1.0 / (dims.max_actions * dims.min_actions) as f64;
                dims.horizon * dims.states * dims.max_actions * dims.min_actions
            ],
            policy_history: Vec::new(),
            planned: false,
        })
    }

    fn cell(&self, h: usize, s: usize, a: usize, b: usize) -> usize {
        ((h - 1) * self.dims.states + s) * self.dims.max_actions * self.dims.min_actions
            + a * self.dims.min_actions
            + b
    }

    pub fn q_upper_at(&self, h: usize, s: usize, a: usize, b: usize) -> f64 {
        self.q_upper[self.cell(h, s, a, b)]
    }

    pub fn q_lower_at(&self, h: usize, s: usize, a: usize, b: usize) -> f64 {
        self.q_lower[self.cell(h, s, a, b)]
    }

    pub fn v_upper_at(&self, h: usize, s: usize) -> f64 {
        self.v_upper[(h - 1) * self.dims.states + s]
    }

    pub fn v_lower_at(&self, h: usize, s: usize) -> f64 {
        self.v_lower[(h - 1) * self.dims.states + s]
    }

    pub fn transition_estimate(&self, h: usize, s: usize, a: usize, b: usize) -> &[f64] {
        let base = self.cell(h, s, a, b) * self.dims.states;
        &self.p_hat[base..base + self.dims.states]
    }

    pub fn visit_count(&self, h: usize, s: usize, a: usize, b: usize) -> u64 {
        self.counts[self.cell(h, s, a, b)]
    }

    /// Current joint policy at (h, s), row-major over (a, b).
    pub fn policy_at(&self, h: usize, s: usize) -> &[f64] {
        let ab = self.dims.max_actions * self.dims.min_actions;
        let base = ((h - 1) * self.dims.states + s) * ab;
        &self.policy[base..base + ab]
    }

    /// Backward planning pass: refresh both confidence Q-tables from the
    /// empirical model, solve the per-state joint policy, and roll the V
    /// bounds back one step. Records the resulting policy table.
    pub fn plan(&mut self, episodes: usize) -> Result<()> {
        if episodes == 0 {
            return Err(Error::invalid("episode budget must be positive"));
        }
        let d = self.dims;
        let (na, nb, ns) = (d.max_actions, d.min_actions, d.states);
        let hf = d.horizon as f64;
        let iota = iota(&d, episodes, self.delta);
        let n_mwu = self.n_mwu.unwrap_or(episodes);
        for h in (1..=d.horizon).rev() {
            for s in 0..ns {
                for a in 0..na {
                    for b in 0..nb {
                        let idx = self.cell(h, s, a, b);
                        let n = self.counts[idx];
                        if n == 0 {
                            self.q_upper[idx] = hf;
                            self.q_lower[idx] = 0.0;
                            continue;
                        }
                        let width = bonus(self.c, d.horizon, ns, iota, n);
                        let row = &self.p_hat[idx * ns..(idx + 1) * ns];
                        let mut up = self.r_hat[idx] + width;
                        let mut lo = self.r_hat[idx] - width;
                        for s2 in 0..ns {
                            up += row[s2] * self.v_upper[h * ns + s2];
                            lo += row[s2] * self.v_lower[h * ns + s2];
                        }
                        self.q_upper[idx] = up.min(hf);
                        self.q_lower[idx] = lo.max(0.0);
                    }
                }
            }
            for s in 0..ns {
                let base = self.cell(h, s, 0, 0);
                let qu = &self.q_upper[base..base + na * nb];
                let ql = &self.q_lower[base..base + na * nb];
                let out = mwu_cce(qu, ql, na, nb, hf, n_mwu)?;
                let mut vu = 0.0;
                let mut vl = 0.0;
                for k in 0..na * nb {
                    vu += out.joint[k] * qu[k];
                    vl += out.joint[k] * ql[k];
                }
                self.policy[base..base + na * nb].copy_from_slice(&out.joint);
                self.v_upper[(h - 1) * ns + s] = vu;
                self.v_lower[(h - 1) * ns + s] = vl;
            }
        }
        self.policy_history.push(self.policy.clone());
        self.planned = true;
        Ok(())
    }

    /// Samples the planned joint policy at (h, s).
    pub fn act<R: Rng + ?Sized>(&self, h: usize, s: usize, rng: &mut R) -> Result<(usize, usize)> {
        if !self.planned {
            return Err(Error::contract("act called before any planning pass"));
        }
        let k = sample_categorical(self.policy_at(h, s), rng);
        Ok((k / self.dims.min_actions, k % self.dims.min_actions))
    }

    /// Folds one transition into the empirical model.
    pub fn update(&mut self, h: usize, s: usize, a: usize, b: usize, r: f64, s_next: usize) -> Result<()> {
        let d = self.dims;
        if h == 0 || h > d.horizon || s >= d.states || a >= d.max_actions || b >= d.min_actions || s_next >= d.states {
            return Err(Error::invalid("index out of range in update"));
        }
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::contract(format!("reward {r} outside [0, 1]")));
        }
        let idx = self.cell(h, s, a, b);
        self.counts[idx] += 1;
        self.next_counts[idx * d.states + s_next] += 1;
        let n = self.counts[idx] as f64;
        self.r_hat[idx] += (r - self.r_hat[idx]) / n;
        for s2 in 0..d.states {
            self.p_hat[idx * d.states + s2] = self.next_counts[idx * d.states + s2] as f64 / n;
        }
        Ok(())
    }

    /// Output pair: marginals of two independently drawn recorded policy
    /// tables — row sums for the max player, column sums for the min player.
    pub fn output<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(StagePolicy, StagePolicy)> {
        if self.policy_history.is_empty() {
            return Err(Error::contract("output requires at least one recorded episode policy"));
        }
        let d = self.dims;
        let g_max = rng.random_range(0..self.policy_history.len());
        let g_min = rng.random_range(0..self.policy_history.len());
        let (na, nb, ns) = (d.max_actions, d.min_actions, d.states);
        let table_mu = &self.policy_history[g_max];
        let table_nu = &self.policy_history[g_min];
        let mu = StagePolicy::from_fn(d.horizon, ns, na, |h, s| {
            let base = ((h - 1) * ns + s) * na * nb;
            let (rows, _) = crate::equilibrium::joint_marginals(&table_mu[base..base + na * nb], na, nb);
            rows
        });
        let nu = StagePolicy::from_fn(d.horizon, ns, nb, |h, s| {
            let base = ((h - 1) * ns + s) * na * nb;
            let (_, cols) = crate::equilibrium::joint_marginals(&table_nu[base..base + na * nb], na, nb);
            cols
        });
        Ok((mu, nu))
    }

    /// Marginal product pair of the policy table recorded at episode index
    /// `g` (0-based). Used to trace per-episode equilibrium quality.
    pub fn episode_marginals(&self, g: usize) -> (StagePolicy, StagePolicy) {
        let d = self.dims;
        let (na, nb, ns) = (d.max_actions, d.min_actions, d.states);
        let table = &self.policy_history[g];
        let mu = StagePolicy::from_fn(d.horizon, ns, na, |h, s| {
            let base = ((h - 1) * ns + s) * na * nb;
            crate::equilibrium::joint_marginals(&table[base..base + na * nb], na, nb).0
        });
        let nu = StagePolicy::from_fn(d.horizon, ns, nb, |h, s| {
            let base = ((h - 1) * ns + s) * na * nb;
            crate::equilibrium::joint_marginals(&table[base..base + na * nb], na, nb).1
        });
        (mu, nu)
    }
}

/// Runs one self-play episode: plan, then act/update through the horizon.
/// Returns the visited steps.
pub fn self_play_episode<R: Rng + ?Sized>(
    state: &mut ViUlcbState,
    game: &crate::game::MarkovGame,
    g: usize,
    episodes: usize,
    rng: &mut R,
) -> Result<Vec<crate::game::EpisodeStep>> {
    state.plan(episodes)?;
    let d = game.dims;
    let mut steps = Vec::with_capacity(d.horizon);
    let mut s = game.initial_state;
    for h in 1..=d.horizon {
        let (a, b) = state.act(h, s, rng)?;
        let r = game.reward_at(h, s, a, b);
        let s_next = sample_categorical(game.transition_row(h, s, a, b), rng);
        state.update(h, s, a, b, r, s_next)?;
        steps.push(crate::game::EpisodeStep { g, h, s, a, b, r });
        s = s_next;
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::sample_markov_game;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(h: usize, s: usize, a: usize, b: usize) -> GameDims {
        GameDims { horizon: h, states: s, max_actions: a, min_actions: b }
    }

    #[test]
    fn fresh_state_initialization_and_bad_delta() {
        let st = ViUlcbState::new(dims(2, 3, 2, 2), 1.0, 0.1, None).unwrap();
        for h in 1..=2 {
            for s in 0..3 {
                for a in 0..2 {
                    for b in 0..2 {
                        assert_eq!(st.q_upper_at(h, s, a, b), 2.0);
                        assert_eq!(st.q_lower_at(h, s, a, b), 0.0);
                    }
                }
            }
        }
        assert!(ViUlcbState::new(dims(2, 3, 2, 2), 1.0, 0.0, None).is_err());
        assert!(ViUlcbState::new(dims(2, 3, 2, 2), 1.0, 1.0, None).is_err());
    }

    #[test]
    fn fresh_plan_yields_uniform_policies_and_flat_bounds() {
        let mut st = ViUlcbState::new(dims(2, 3, 2, 3), 1.0, 0.1, Some(40)).unwrap();
        st.plan(50).unwrap();
        for h in 1..=2 {
            for s in 0..3 {
                for &p in st.policy_at(h, s) {
                    assert!((p - 1.0 / 6.0).abs() < 1e-12);
                }
                // Constant Q tables make the bounds the constants themselves.
                assert!((st.v_upper_at(h, s) - 2.0).abs() < 1e-12);
                assert!(st.v_lower_at(h, s).abs() < 1e-12);
            }
        }
        assert_eq!(st.policy_history.len(), 1);
    }

    #[test]
    fn bonus_hand_value_clips_q_to_horizon() {
        // H=2, S=4, A=B=5, G=300, delta=0.1, c=1, one visit:
        // width = sqrt(4 * 4 * ln(4*5*5*600/0.1)) = 4 sqrt(ln 600000) ~ 14.59.
        let d = dims(2, 4, 5, 5);
        let i = iota(&d, 300, 0.1);
        assert!((i - 600_000.0_f64.ln()).abs() < 1e-12);
        let w = bonus(1.0, 2, 4, i, 1);
        assert!((w - 4.0 * 600_000.0_f64.ln().sqrt()).abs() < 1e-12);
        assert!((w - 14.59).abs() < 5e-3);

        let mut st = ViUlcbState::new(d, 1.0, 0.1, Some(10)).unwrap();
        st.update(1, 0, 2, 3, 0.7, 1).unwrap();
        st.plan(300).unwrap();
        assert_eq!(st.q_upper_at(1, 0, 2, 3), 2.0);
        assert_eq!(st.q_lower_at(1, 0, 2, 3), 0.0);
    }

    #[test]
    fn update_builds_count_ratio_transitions() {
        let mut st = ViUlcbState::new(dims(1, 4, 2, 2), 1.0, 0.1, None).unwrap();
        st.update(1, 0, 1, 1, 0.5, 2).unwrap();
        assert_eq!(st.transition_estimate(1, 0, 1, 1), &[0.0, 0.0, 1.0, 0.0]);
        st.update(1, 0, 1, 1, 0.5, 2).unwrap();
        assert_eq!(st.transition_estimate(1, 0, 1, 1), &[0.0, 0.0, 1.0, 0.0]);
        st.update(1, 0, 1, 1, 0.5, 2).unwrap();
        st.update(1, 0, 1, 1, 0.5, 3).unwrap();
        assert_eq!(st.transition_estimate(1, 0, 1, 1), &[0.0, 0.0, 0.75, 0.25]);
        assert_eq!(st.visit_count(1, 0, 1, 1), 4);
        // Running mean of a constant reward is the constant.
        assert!((st.r_hat[st.cell(1, 0, 1, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn act_requires_a_plan_and_samples_the_joint() {
        let mut st = ViUlcbState::new(dims(1, 1, 2, 3), 1.0, 0.1, Some(20)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(st.act(1, 0, &mut rng).is_err());
        st.plan(50).unwrap();
        let trials = 100_000;
        let mut counts = vec![0usize; 6];
        for _ in 0..trials {
            let (a, b) = st.act(1, 0, &mut rng).unwrap();
            counts[a * 3 + b] += 1;
        }
        let p = 1.0 / 6.0;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / trials as f64;
            assert!((freq - p).abs() < 4.0 * sigma, "pair frequency {freq}");
        }
        // Seeded determinism.
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            assert_eq!(st.act(1, 0, &mut r1).unwrap(), st.act(1, 0, &mut r2).unwrap());
        }
    }

    #[test]
    fn planning_preserves_confidence_ordering() {
        let game = sample_markov_game(3, 3, 2, 2, 77);
        let mut st = ViUlcbState::new(game.dims, 0.2, 0.05, Some(50)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for g in 1..=60 {
            self_play_episode(&mut st, &game, g, 60, &mut rng).unwrap();
        }
        let d = st.dims;
        for h in 1..=d.horizon {
            for s in 0..d.states {
                assert!(st.v_lower_at(h, s) <= st.v_upper_at(h, s) + 1e-12);
                crate::util::check_distribution(st.policy_at(h, s), 1e-9, "joint policy").unwrap();
                for a in 0..d.max_actions {
                    for b in 0..d.min_actions {
                        let (qu, ql) = (st.q_upper_at(h, s, a, b), st.q_lower_at(h, s, a, b));
                        assert!(ql <= qu + 1e-12 && (0.0..=2.0 + 1e-12).contains(&qu) && ql >= 0.0);
                        if st.visit_count(h, s, a, b) > 0 {
                            let row = st.transition_estimate(h, s, a, b);
                            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn output_marginalizes_recorded_tables() {
        let mut st = ViUlcbState::new(dims(1, 1, 2, 2), 1.0, 0.1, Some(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(st.output(&mut rng).is_err());
        // Synthetic point-mass table: all mass on (a=1, b=0).
        st.policy_history.push(vec![0.0, 0.0, 1.0, 0.0]);
        let (mu, nu) = st.output(&mut rng).unwrap();
        assert_eq!(mu.at(1, 0), &[0.0, 1.0]);
        assert_eq!(nu.at(1, 0), &[1.0, 0.0]);
        mu.validate().unwrap();
        nu.validate().unwrap();
    }

    #[test]
    fn confidence_width_shrinks_in_median_over_seeds() {
        // One-state game: every episode visits (1, 0), so widths at the
        // checkpoints only see growing counts.
        let checkpoints = [20usize, 60, 150, 300];
        let mut widths: Vec<Vec<f64>> = vec![Vec::new(); checkpoints.len()];
        for seed in 0..20u64 {
            let game = sample_markov_game(2, 2, 1, 1, 900 + seed);
            let mut st = ViUlcbState::new(game.dims, 1.0, 0.1, Some(30)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for g in 1..=300 {
                self_play_episode(&mut st, &game, g, 300, &mut rng).unwrap();
                if let Some(k) = checkpoints.iter().position(|&c| c == g) {
                    widths[k].push(st.v_upper_at(1, 0) - st.v_lower_at(1, 0));
                }
            }
        }
        let median = |xs: &[f64]| {
            let mut v = xs.to_vec();
            v.sort_by(|x, y| x.partial_cmp(y).unwrap());
            v[v.len() / 2]
        };
        let meds: Vec<f64> = widths.iter().map(|w| median(w)).collect();
        for k in 1..meds.len() {
            assert!(meds[k] <= meds[k - 1] + 1e-12, "medians {meds:?} not shrinking");
        }
    }

    #[test]
    fn self_play_gap_trends_down() {
        // Mean per-episode gap of the recorded-policy marginals over the
        // last tenth of episodes must drop below the first tenth, averaged
        // over ten sampled games. The bonus scale is tuned for this budget;
        // at c=1 the widths clip every Q-value to the extremes for far more
        // than 300 episodes and the policies never move off uniform.
        let episodes = 300usize;
        let mut firsts = Vec::new();
        let mut lasts = Vec::new();
        for seed in 0..10u64 {
            let game = sample_markov_game(3, 3, 2, 2, 4200 + seed);
            let mut st = ViUlcbState::new(game.dims, 0.05, 1.0 / (episodes * 2) as f64, Some(60)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut gaps = Vec::with_capacity(episodes);
            for g in 1..=episodes {
                self_play_episode(&mut st, &game, g, episodes, &mut rng).unwrap();
                let (mu, nu) = st.episode_marginals(g - 1);
                gaps.push(crate::equilibrium::ne_gap(&game, &mu, &nu).unwrap());
            }
            let tenth = episodes / 10;
            firsts.push(crate::util::mean(&gaps[..tenth]));
            lasts.push(crate::util::mean(&gaps[episodes - tenth..]));
        }
        let first = crate::util::mean(&firsts);
        let last = crate::util::mean(&lasts);
        assert!(last < first, "gap means first {first} -> last {last} did not decrease");
    }
}
