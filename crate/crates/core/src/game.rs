//! Finite-horizon two-player zero-sum Markov games with deterministic
//! rewards in [0, 1] and a fixed initial state.

use crate::error::{Error, Result};
use crate::util::sample_categorical;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Shape of a game: horizon H, state count S, and per-player action counts.
/// `max_actions` belongs to the maximizing player, `min_actions` to the
/// minimizing player.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameDims {
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "S")]
    pub states: usize,
    #[serde(rename = "A")]
    pub max_actions: usize,
    #[serde(rename = "B")]
    pub min_actions: usize,
}

impl GameDims {
    pub fn new(horizon: usize, states: usize, max_actions: usize, min_actions: usize) -> Self {
        GameDims { horizon, states, max_actions, min_actions }
    }

    pub fn joint_actions(&self) -> usize {
        self.max_actions * self.min_actions
    }

    /// Total steps over `episodes` episodes.
    pub fn total_steps(&self, episodes: usize) -> usize {
        self.horizon * episodes
    }
}

/// One executed step. `g`, `h`, and the derived global time are 1-based to
/// match the positional encoding; states and actions are 0-based indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub g: usize,
    pub h: usize,
    pub s: usize,
    pub a: usize,
    pub b: usize,
    pub r: f64,
}

impl EpisodeStep {
    /// Global time t = (g-1)H + h, 1-based.
    pub fn time(&self, horizon: usize) -> usize {
        (self.g - 1) * horizon + self.h
    }
}

/// Tabular game. Transition rows and rewards are indexed by (h, s, a, b)
/// with h 1-based at call sites and stored densely 0-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkovGame {
    pub dims: GameDims,
    /// Row-major (h, s, a, b, s') transition probabilities.
    pub transition: Vec<f64>,
    /// Row-major (h, s, a, b) deterministic rewards in [0, 1].
    pub reward: Vec<f64>,
    pub initial_state: usize,
}

impl MarkovGame {
    fn rew_idx(&self, h: usize, s: usize, a: usize, b: usize) -> usize {
        let d = &self.dims;
        (((h - 1) * d.states + s) * d.max_actions + a) * d.min_actions + b
    }

    pub fn reward_at(&self, h: usize, s: usize, a: usize, b: usize) -> f64 {
        self.reward[self.rew_idx(h, s, a, b)]
    }

    /// Transition row P(. | h, s, a, b) of length S.
    pub fn transition_row(&self, h: usize, s: usize, a: usize, b: usize) -> &[f64] {
        let base = self.rew_idx(h, s, a, b) * self.dims.states;
        &self.transition[base..base + self.dims.states]
    }

    /// Checks stochasticity of transition rows, reward range, and the
    /// initial state index.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if d.horizon == 0 || d.states == 0 || d.max_actions == 0 || d.min_actions == 0 {
            return Err(Error::invalid("game dimensions must be positive"));
        }
        let cells = d.horizon * d.states * d.joint_actions();
        if self.reward.len() != cells {
            return Err(Error::dims(format!("reward table has {} cells, expected {cells}", self.reward.len())));
        }
        if self.transition.len() != cells * d.states {
            return Err(Error::dims(format!(
                "transition table has {} cells, expected {}",
                self.transition.len(),
                cells * d.states
            )));
        }
        if self.initial_state >= d.states {
            return Err(Error::invalid(format!("initial state {} out of range", self.initial_state)));
        }
        for (i, &r) in self.reward.iter().enumerate() {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::contract(format!("reward {r} at cell {i} outside [0, 1]")));
            }
        }
        for row in self.transition.chunks(d.states) {
            let mut sum = 0.0;
            for &p in row {
                if p < 0.0 {
                    return Err(Error::contract(format!("negative transition probability {p}")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::contract(format!("transition row sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// Rejection-samples a standard normal truncated to [0, 1].
fn truncated_normal_01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let x: f64 = StandardNormal.sample(rng);
        if (0.0..=1.0).contains(&x) {
            return x;
        }
    }
}

/// One-shot matrix game (H = 1, S = 1) with i.i.d. truncated-normal payoffs.
pub fn sample_matrix_game(max_actions: usize, min_actions: usize, seed: u64) -> MarkovGame {
    let dims = GameDims::new(1, 1, max_actions, min_actions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = dims.joint_actions();
    let reward: Vec<f64> = (0..cells).map(|_| truncated_normal_01(&mut rng)).collect();
    let game = MarkovGame { dims, transition: vec![1.0; cells], reward, initial_state: 0 };
    debug_assert!(game.validate().is_ok());
    game
}

/// Markov game family used throughout: the state advances cyclically when
/// the players match actions and stays put otherwise; rewards are fresh
/// truncated normals per (h, s, a, b), sampled in (h, s, a, b) order.
pub fn sample_markov_game(
    max_actions: usize,
    min_actions: usize,
    states: usize,
    horizon: usize,
    seed: u64,
) -> MarkovGame {
    let dims = GameDims::new(horizon, states, max_actions, min_actions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = horizon * states * dims.joint_actions();
    let mut reward = Vec::with_capacity(cells);
    let mut transition = vec![0.0; cells * states];
    let mut cell = 0;
    for _h in 0..horizon {
        for s in 0..states {
            for a in 0..max_actions {
                for b in 0..min_actions {
                    reward.push(truncated_normal_01(&mut rng));
                    let next = if a == b { (s + 1) % states } else { s };
                    transition[cell * states + next] = 1.0;
                    cell += 1;
                }
            }
        }
    }
    let game = MarkovGame { dims, transition, reward, initial_state: 0 };
    debug_assert!(game.validate().is_ok());
    game
}

/// Plays one episode. `act` receives (h, s) with h 1-based and returns the
/// joint action; transitions are drawn from the game's rows.
pub fn run_episode<R, F>(game: &MarkovGame, g: usize, mut act: F, rng: &mut R) -> Result<Vec<EpisodeStep>>
where
    R: Rng + ?Sized,
    F: FnMut(usize, usize) -> (usize, usize),
{
    let d = &game.dims;
    let mut steps = Vec::with_capacity(d.horizon);
    let mut s = game.initial_state;
    for h in 1..=d.horizon {
        let (a, b) = act(h, s);
        if a >= d.max_actions || b >= d.min_actions {
            return Err(Error::contract(format!("action pair ({a}, {b}) out of range at (h={h}, s={s})")));
        }
        let r = game.reward_at(h, s, a, b);
        let next = sample_categorical(game.transition_row(h, s, a, b), rng);
        steps.push(EpisodeStep { g, h, s, a, b, r });
        s = next;
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_games_validate_and_are_seed_deterministic() {
        let g1 = sample_matrix_game(5, 5, 42);
        let g2 = sample_matrix_game(5, 5, 42);
        let g3 = sample_matrix_game(5, 5, 43);
        assert!(g1.validate().is_ok());
        assert_eq!(g1.reward, g2.reward);
        assert_ne!(g1.reward, g3.reward);

        let m1 = sample_markov_game(5, 5, 4, 2, 7);
        let m2 = sample_markov_game(5, 5, 4, 2, 7);
        assert!(m1.validate().is_ok());
        assert_eq!(m1.reward, m2.reward);
        assert_eq!(m1.transition, m2.transition);
    }

    #[test]
    fn markov_transitions_follow_the_match_rule() {
        let g = sample_markov_game(5, 5, 4, 2, 123);
        // Matching actions advance the state cyclically: (s=3, a=2, b=2) -> 0.
        let row = g.transition_row(1, 3, 2, 2);
        assert_eq!(row, &[1.0, 0.0, 0.0, 0.0]);
        // Mismatched actions stay: (s=1, a=0, b=3) -> 1.
        let row = g.transition_row(2, 1, 0, 3);
        assert_eq!(row, &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn rewards_lie_in_unit_interval_with_interior_mass() {
        let g = sample_markov_game(5, 5, 4, 2, 9);
        assert!(g.reward.iter().all(|&r| (0.0..=1.0).contains(&r)));
        // Truncated standard normal on [0, 1] has mean ~0.46; the sample
        // mean over 800 draws should land well inside (0.3, 0.6).
        let m = g.reward.iter().sum::<f64>() / g.reward.len() as f64;
        assert!(m > 0.3 && m < 0.6, "sample mean {m}");
    }

    #[test]
    fn run_episode_has_horizon_steps_from_initial_state() {
        let g = sample_markov_game(3, 3, 4, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let steps = run_episode(&g, 1, |_, _| (0, 0), &mut rng).unwrap();
        assert_eq!(steps.len(), 2);
        assert_eq!(steps[0].s, g.initial_state);
        assert_eq!(steps[0].h, 1);
        assert_eq!(steps[1].h, 2);
        assert_eq!(steps[0].time(2), 1);
        assert_eq!(steps[1].time(2), 2);
        // a == b advances 0 -> 1.
        assert_eq!(steps[1].s, 1);
    }

    #[test]
    fn run_episode_rejects_out_of_range_actions() {
        let g = sample_matrix_game(3, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(run_episode(&g, 1, |_, _| (3, 0), &mut rng).is_err());
    }

    #[test]
    fn stochastic_rows_are_sampled_with_matching_frequencies() {
        // Hand-built 2-step game whose h=1 row at the initial state is
        // stochastic; the h=2 state observed in the trace reveals the draw.
        let dims = GameDims::new(2, 3, 1, 1);
        let row = [0.2, 0.5, 0.3];
        let mut transition = Vec::new();
        for h in 0..2 {
            for s in 0..3 {
                if h == 0 && s == 0 {
                    transition.extend_from_slice(&row);
                } else {
                    let mut stay = [0.0; 3];
                    stay[s] = 1.0;
                    transition.extend_from_slice(&stay);
                }
            }
        }
        let game = MarkovGame { dims, transition, reward: vec![0.5; 6], initial_state: 0 };
        game.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 10_000;
        let mut counts = [0usize; 3];
        for g in 0..n {
            let steps = run_episode(&game, g + 1, |_, _| (0, 0), &mut rng).unwrap();
            counts[steps[1].s] += 1;
        }
        for (i, &expect) in row.iter().enumerate() {
            let freq = counts[i] as f64 / n as f64;
            assert!((freq - expect).abs() < 3.0 / (n as f64).sqrt(), "state {i}: {freq} vs {expect}");
        }
    }

    #[test]
    fn validate_flags_bad_rows() {
        let dims = GameDims::new(1, 2, 1, 1);
        let bad = MarkovGame {
            dims,
            transition: vec![0.6, 0.6, 0.5, 0.5],
            reward: vec![0.1, 0.2],
            initial_state: 0,
        };
        assert!(bad.validate().is_err());
        let bad_reward = MarkovGame {
            dims,
            transition: vec![1.0, 0.0, 0.0, 1.0],
            reward: vec![0.1, 1.5],
            initial_state: 0,
        };
        assert!(bad_reward.validate().is_err());
    }
}
