//! Pretraining-data pipeline: runs a context algorithm on sampled games,
//! records trajectories with a per-state action augmentation, splits them
//! into single-player views, and serializes everything as JSONL.
//!
//! The augmentation exists so that a later consumer can condition on *any*
//! state at a given time, not only the state that actually occurred: at every
//! global time `t` and every state `s`, one extra action (pair) is drawn from
//! the algorithm's in-force policy at `(t, s)` without advancing the
//! environment or the learner.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::joint_marginals;
use crate::error::{Error, Result};
use crate::game::{sample_markov_game, EpisodeStep, GameDims, MarkovGame};
use crate::no_regret::Exp3Learner;
use crate::util::{derive_seed, sample_categorical};
use crate::v_learning::{PolicyHistory, VLearner};
use crate::vi_ulcb::ViUlcbState;

/// Which context algorithm generates the trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextAlgorithm {
    Exp3,
    VLearning,
    ViUlcb,
}

impl ContextAlgorithm {
    pub fn tag(self) -> &'static str {
        match self {
            ContextAlgorithm::Exp3 => "exp3",
            ContextAlgorithm::VLearning => "v_learning",
            ContextAlgorithm::ViUlcb => "vi_ulcb",
        }
    }
}

impl FromStr for ContextAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp3" => Ok(ContextAlgorithm::Exp3),
            "v_learning" => Ok(ContextAlgorithm::VLearning),
            "vi_ulcb" => Ok(ContextAlgorithm::ViUlcb),
            other => Err(Error::invalid(format!(
                "unknown context algorithm '{other}' (expected exp3 | v_learning | vi_ulcb)"
            ))),
        }
    }
}

/// Environment family to sample records from: game dimensions plus the
/// per-record episode budget G.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameFamily {
    pub dims: GameDims,
    pub episodes: usize,
}

impl GameFamily {
    pub fn new(dims: GameDims, episodes: usize) -> Self {
        GameFamily { dims, episodes }
    }
}

/// Hyperparameters of the context algorithms. `None` entries fall back to
/// each algorithm's own default (budget-tuned learning rate for the bandit
/// learner, delta = 1/T elsewhere, planner equilibrium rounds = G).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmParams {
    pub exp3_eta: Option<f64>,
    pub vl_c: f64,
    pub vl_delta: Option<f64>,
    pub ulcb_c: f64,
    pub ulcb_delta: Option<f64>,
    pub ulcb_n_mwu: Option<usize>,
}

impl Default for AlgorithmParams {
    fn default() -> Self {
        AlgorithmParams {
            exp3_eta: None,
            vl_c: 1.0,
            vl_delta: None,
            ulcb_c: 1.0,
            ulcb_delta: None,
            ulcb_n_mwu: None,
        }
    }
}

/// One augmented draw: at global time `t` (1-based), conditioned on state
/// `s`, the in-force policy produced the action pair `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedAction {
    pub t: usize,
    pub s: usize,
    pub a: usize,
    pub b: usize,
}

/// Per-(t, s) policy distributions retained for debugging; for the
/// centralized planner these are the marginals of the sampled joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub t: usize,
    pub s: usize,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
}

/// One collected game: every executed step plus one augmented action (pair)
/// per (time, state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub game_seed: u64,
    pub dims: GameDims,
    #[serde(rename = "steps")]
    pub base_steps: Vec<EpisodeStep>,
    #[serde(rename = "aug")]
    pub augmented: Vec<AugmentedAction>,
    #[serde(rename = "snapshots", skip_serializing_if = "Option::is_none", default)]
    pub policy_snapshots: Option<Vec<PolicySnapshot>>,
}

impl TrajectoryRecord {
    /// Structural invariants: T base steps in episode order, T*S augmented
    /// entries, and every index within the declared dimensions.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let t_total = self.base_steps.len();
        if t_total == 0 || t_total % d.horizon != 0 {
            return Err(Error::contract(format!(
                "{} base steps is not a whole number of length-{} episodes",
                t_total, d.horizon
            )));
        }
        if self.augmented.len() != t_total * d.states {
            return Err(Error::contract(format!(
                "expected {} augmented entries ({} steps x {} states), found {}",
                t_total * d.states,
                t_total,
                d.states,
                self.augmented.len()
            )));
        }
        for (k, step) in self.base_steps.iter().enumerate() {
            let (g, h) = (k / d.horizon + 1, k % d.horizon + 1);
            if step.g != g || step.h != h {
                return Err(Error::contract(format!(
                    "step {k} labeled (g={}, h={}), expected (g={g}, h={h})",
                    step.g, step.h
                )));
            }
            if step.s >= d.states || step.a >= d.max_actions || step.b >= d.min_actions {
                return Err(Error::contract(format!("step {k} index out of range")));
            }
            if !(0.0..=1.0).contains(&step.r) {
                return Err(Error::contract(format!("step {k} reward {} outside [0, 1]", step.r)));
            }
        }
        for (k, aug) in self.augmented.iter().enumerate() {
            let expected_t = k / d.states + 1;
            let expected_s = k % d.states;
            if aug.t != expected_t || aug.s != expected_s {
                return Err(Error::contract(format!(
                    "augmented entry {k} labeled (t={}, s={}), expected (t={expected_t}, s={expected_s})",
                    aug.t, aug.s
                )));
            }
            if aug.a >= d.max_actions || aug.b >= d.min_actions {
                return Err(Error::contract(format!("augmented entry {k} action out of range")));
            }
        }
        Ok(())
    }

    /// Round every reward to two decimals, mirroring a serialization format
    /// that limits rewards to two decimal digits.
    pub fn round_rewards_2dp(&mut self) {
        for step in &mut self.base_steps {
            step.r = (step.r * 100.0).round() / 100.0;
        }
    }
}

/// Player identity of a single-player view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlayerTag {
    Max,
    Min,
}

/// One executed step as seen by one player: own action and own-view reward
/// only. There is deliberately no field for the opponent's action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecStep {
    pub g: usize,
    pub h: usize,
    pub s: usize,
    pub a: usize,
    pub r: f64,
}

/// One augmented draw as seen by one player.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecAug {
    pub t: usize,
    pub s: usize,
    pub a: usize,
}

/// A trajectory restricted to what one player can observe: its own actions
/// and, for the minimizing player, the complemented reward 1 - r.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecentralizedView {
    pub player: PlayerTag,
    pub game_seed: u64,
    pub dims: GameDims,
    pub steps: Vec<DecStep>,
    pub aug: Vec<DecAug>,
}

/// Split a record into the two per-player views. The max view keeps
/// (s, a, r); the min view keeps (s, b, 1 - r); neither retains the
/// opponent's actions.
pub fn split_decentralized(record: &TrajectoryRecord) -> (DecentralizedView, DecentralizedView) {
    let max_view = DecentralizedView {
        player: PlayerTag::Max,
        game_seed: record.game_seed,
        dims: record.dims,
        steps: record
            .base_steps
            .iter()
            .map(|st| DecStep { g: st.g, h: st.h, s: st.s, a: st.a, r: st.r })
            .collect(),
        aug: record.augmented.iter().map(|ag| DecAug { t: ag.t, s: ag.s, a: ag.a }).collect(),
    };
    let min_view = DecentralizedView {
        player: PlayerTag::Min,
        game_seed: record.game_seed,
        dims: record.dims,
        steps: record
            .base_steps
            .iter()
            .map(|st| DecStep { g: st.g, h: st.h, s: st.s, a: st.b, r: 1.0 - st.r })
            .collect(),
        aug: record.augmented.iter().map(|ag| DecAug { t: ag.t, s: ag.s, a: ag.b }).collect(),
    };
    (max_view, min_view)
}

/// Regenerate the family's game for a stored record seed.
pub fn family_game(family: &GameFamily, game_seed: u64) -> MarkovGame {
    let d = &family.dims;
    sample_markov_game(d.max_actions, d.min_actions, d.states, d.horizon, game_seed)
}

/// Collect `n_records` independent trajectories of `family.episodes` episodes
/// each. Per-record seeds are derived from `seed` by stream index, so the
/// result is deterministic and records are independent; collection runs in
/// parallel across records.
pub fn collect_pretraining(
    family: &GameFamily,
    context: ContextAlgorithm,
    n_records: usize,
    seed: u64,
    params: &AlgorithmParams,
    keep_snapshots: bool,
) -> Result<Vec<TrajectoryRecord>> {
    if n_records == 0 {
        return Err(Error::invalid("need at least one record"));
    }
    if family.episodes == 0 {
        return Err(Error::invalid("need at least one episode per record"));
    }
    if context == ContextAlgorithm::Exp3 && (family.dims.horizon != 1 || family.dims.states != 1) {
        return Err(Error::invalid(
            "the bandit learner only plays matrix games (H = 1, S = 1); use v_learning or vi_ulcb",
        ));
    }
    (0..n_records)
        .into_par_iter()
        .map(|i| {
            let rec_seed = derive_seed(seed, i as u64);
            collect_one(family, context, rec_seed, params, keep_snapshots)
        })
        .collect()
}

fn collect_one(
    family: &GameFamily,
    context: ContextAlgorithm,
    rec_seed: u64,
    params: &AlgorithmParams,
    keep_snapshots: bool,
) -> Result<TrajectoryRecord> {
    let game_seed = derive_seed(rec_seed, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rec_seed, 1));
    let game = family_game(family, game_seed);
    let d = family.dims;
    let episodes = family.episodes;
    let t_total = d.total_steps(episodes);

    let mut base_steps = Vec::with_capacity(t_total);
    let mut augmented = Vec::with_capacity(t_total * d.states);
    let mut snapshots = if keep_snapshots { Some(Vec::with_capacity(t_total * d.states)) } else { None };

    // Draw one augmented pair for every state from the two in-force
    // marginals (decoupled learners) and record the executed step afterwards.
    let record_time = |t: usize,
                           augmented: &mut Vec<AugmentedAction>,
                           snapshots: &mut Option<Vec<PolicySnapshot>>,
                           rng: &mut ChaCha8Rng,
                           policies: &mut dyn FnMut(usize) -> (Vec<f64>, Vec<f64>, bool)| {
        for s in 0..d.states {
            let (mu, nu, joint) = policies(s);
            let (a, b) = if joint {
                let k = sample_categorical(&mu, rng);
                (k / d.min_actions, k % d.min_actions)
            } else {
                (sample_categorical(&mu, rng), sample_categorical(&nu, rng))
            };
            augmented.push(AugmentedAction { t, s, a, b });
            if let Some(snaps) = snapshots {
                let (mu, nu) = if joint { joint_marginals(&mu, d.max_actions, d.min_actions) } else { (mu, nu) };
                snaps.push(PolicySnapshot { t, s, mu, nu });
            }
        }
    };

    match context {
        ContextAlgorithm::Exp3 => {
            let eta_a = params.exp3_eta.unwrap_or_else(|| Exp3Learner::eta_for_budget(d.max_actions, episodes));
            let eta_b = params.exp3_eta.unwrap_or_else(|| Exp3Learner::eta_for_budget(d.min_actions, episodes));
            let mut max = Exp3Learner::new(d.max_actions, eta_a)?;
            let mut min = Exp3Learner::new(d.min_actions, eta_b)?;
            for g in 1..=episodes {
                record_time(g, &mut augmented, &mut snapshots, &mut rng, &mut |_s| {
                    (max.policy(), min.policy(), false)
                });
                let (a, mu) = max.act(&mut rng);
                let (b, nu) = min.act(&mut rng);
                let r = game.reward_at(1, 0, a, b);
                max.update(a, r, mu[a])?;
                min.update(b, 1.0 - r, nu[b])?;
                base_steps.push(EpisodeStep { g, h: 1, s: 0, a, b, r });
            }
        }
        ContextAlgorithm::VLearning => {
            let delta = params.vl_delta.unwrap_or(1.0 / t_total as f64);
            let mut max = VLearner::new(d.horizon, d.states, d.max_actions, episodes, params.vl_c, delta)?;
            let mut min = VLearner::new(d.horizon, d.states, d.min_actions, episodes, params.vl_c, delta)?;
            let mut hist_max = PolicyHistory::new(d.horizon, d.states);
            let mut hist_min = PolicyHistory::new(d.horizon, d.states);
            for g in 1..=episodes {
                let mut s = game.initial_state;
                for h in 1..=d.horizon {
                    let t = (g - 1) * d.horizon + h;
                    record_time(t, &mut augmented, &mut snapshots, &mut rng, &mut |sq| {
                        (max.policy_at(h, sq).to_vec(), min.policy_at(h, sq).to_vec(), false)
                    });
                    let (a, _) = max.act(h, s, &mut rng);
                    let (b, _) = min.act(h, s, &mut rng);
                    let r = game.reward_at(h, s, a, b);
                    let s_next = sample_categorical(game.transition_row(h, s, a, b), &mut rng);
                    max.update(&mut hist_max, g, h, s, a, r, s_next)?;
                    min.update(&mut hist_min, g, h, s, b, 1.0 - r, s_next)?;
                    base_steps.push(EpisodeStep { g, h, s, a, b, r });
                    s = s_next;
                }
            }
        }
        ContextAlgorithm::ViUlcb => {
            let t_budget = d.total_steps(episodes);
            let delta = params.ulcb_delta.unwrap_or(1.0 / t_budget as f64);
            let mut planner = ViUlcbState::new(d, params.ulcb_c, delta, params.ulcb_n_mwu)?;
            for g in 1..=episodes {
                planner.plan(episodes)?;
                let mut s = game.initial_state;
                for h in 1..=d.horizon {
                    let t = (g - 1) * d.horizon + h;
                    record_time(t, &mut augmented, &mut snapshots, &mut rng, &mut |sq| {
                        (planner.policy_at(h, sq).to_vec(), Vec::new(), true)
                    });
                    let (a, b) = planner.act(h, s, &mut rng)?;
                    let r = game.reward_at(h, s, a, b);
                    let s_next = sample_categorical(game.transition_row(h, s, a, b), &mut rng);
                    planner.update(h, s, a, b, r, s_next)?;
                    base_steps.push(EpisodeStep { g, h, s, a, b, r });
                    s = s_next;
                }
            }
        }
    }

    let record = TrajectoryRecord {
        game_seed,
        dims: d,
        base_steps,
        augmented,
        policy_snapshots: snapshots,
    };
    debug_assert!(record.validate().is_ok());
    Ok(record)
}

/// Write one record per line.
pub fn write_jsonl(records: &[TrajectoryRecord], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read records back; any malformed or invalid line fails with its 1-based
/// line number.
pub fn read_jsonl(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let record: TrajectoryRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        record
            .validate()
            .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::sample_matrix_game;
    use std::io::Read;

    fn matrix_family(actions: usize, episodes: usize) -> GameFamily {
        GameFamily::new(GameDims::new(1, 1, actions, actions), episodes)
    }

    fn markov_family() -> GameFamily {
        GameFamily::new(GameDims::new(2, 4, 5, 5), 300)
    }

    #[test]
    fn unknown_tag_rejected_and_known_tags_parse() {
        assert!("exp3".parse::<ContextAlgorithm>().is_ok());
        assert!("v_learning".parse::<ContextAlgorithm>().is_ok());
        assert!("vi_ulcb".parse::<ContextAlgorithm>().is_ok());
        assert!("ucb".parse::<ContextAlgorithm>().is_err());
        assert_eq!("exp3".parse::<ContextAlgorithm>().unwrap().tag(), "exp3");
    }

    #[test]
    fn bandit_collection_has_full_shape() {
        let family = matrix_family(5, 3000);
        let records = collect_pretraining(
            &family,
            ContextAlgorithm::Exp3,
            10,
            41,
            &AlgorithmParams::default(),
            false,
        )
        .unwrap();
        assert_eq!(records.len(), 10);
        for record in &records {
            assert_eq!(record.base_steps.len(), 3000);
            assert_eq!(record.augmented.len(), 3000);
            record.validate().unwrap();
            assert!(record.policy_snapshots.is_none());
        }
        // Records are independent: different seeds, different play.
        assert_ne!(records[0].game_seed, records[1].game_seed);
        assert_ne!(records[0].base_steps, records[1].base_steps);
    }

    #[test]
    fn markov_collection_counts_time_state_grid() {
        let family = markov_family();
        let records = collect_pretraining(
            &family,
            ContextAlgorithm::VLearning,
            20,
            42,
            &AlgorithmParams::default(),
            false,
        )
        .unwrap();
        assert_eq!(records.len(), 20);
        for record in &records {
            assert_eq!(record.base_steps.len(), 600);
            assert_eq!(record.augmented.len(), 2400);
            record.validate().unwrap();
        }
    }

    #[test]
    fn bandit_rejects_markov_family() {
        let err = collect_pretraining(
            &markov_family(),
            ContextAlgorithm::Exp3,
            1,
            7,
            &AlgorithmParams::default(),
            false,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        assert!(collect_pretraining(
            &matrix_family(3, 10),
            ContextAlgorithm::Exp3,
            0,
            7,
            &AlgorithmParams::default(),
            false
        )
        .is_err());
    }

    #[test]
    fn planner_collection_is_deterministic_and_joint_sampled() {
        let family = GameFamily::new(GameDims::new(2, 3, 3, 3), 20);
        let params = AlgorithmParams { ulcb_c: 0.1, ulcb_n_mwu: Some(30), ..Default::default() };
        let a = collect_pretraining(&family, ContextAlgorithm::ViUlcb, 2, 99, &params, true).unwrap();
        let b = collect_pretraining(&family, ContextAlgorithm::ViUlcb, 2, 99, &params, true).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let snaps = a[0].policy_snapshots.as_ref().unwrap();
        assert_eq!(snaps.len(), a[0].augmented.len());
        for snap in snaps {
            assert_eq!(snap.mu.len(), 3);
            assert_eq!(snap.nu.len(), 3);
            assert!((snap.mu.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((snap.nu.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_twice_is_byte_identical() {
        let family = matrix_family(4, 50);
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for run in 0..2 {
            let records = collect_pretraining(
                &family,
                ContextAlgorithm::Exp3,
                3,
                1234,
                &AlgorithmParams::default(),
                false,
            )
            .unwrap();
            let path = dir.path().join(format!("run{run}.jsonl"));
            write_jsonl(&records, &path).unwrap();
            let mut buf = Vec::new();
            File::open(&path).unwrap().read_to_end(&mut buf).unwrap();
            bytes.push(buf);
        }
        assert_eq!(bytes[0], bytes[1]);
        assert!(!bytes[0].is_empty());
    }

    #[test]
    fn split_views_strip_opponent_and_complement_reward() {
        let family = matrix_family(5, 40);
        let record = &collect_pretraining(
            &family,
            ContextAlgorithm::Exp3,
            1,
            5,
            &AlgorithmParams::default(),
            false,
        )
        .unwrap()[0];
        let (max_view, min_view) = split_decentralized(record);
        assert_eq!(max_view.player, PlayerTag::Max);
        assert_eq!(min_view.player, PlayerTag::Min);
        for (k, step) in record.base_steps.iter().enumerate() {
            assert_eq!(max_view.steps[k].a, step.a);
            assert_eq!(min_view.steps[k].a, step.b);
            assert!((max_view.steps[k].r - step.r).abs() < 1e-15);
            assert!((min_view.steps[k].r - (1.0 - step.r)).abs() < 1e-15);
            assert_eq!(max_view.steps[k].s, step.s);
        }
        for (k, aug) in record.augmented.iter().enumerate() {
            assert_eq!(max_view.aug[k].a, aug.a);
            assert_eq!(min_view.aug[k].a, aug.b);
        }
        // Schema-level: a serialized view has no opponent-action field.
        let json = serde_json::to_string(&min_view).unwrap();
        assert!(!json.contains("\"b\""));
        let json = serde_json::to_string(&max_view).unwrap();
        assert!(!json.contains("\"b\""));
    }

    #[test]
    fn matched_actions_make_views_mirror_each_other() {
        // Hand-build a record where a_t = b_t at every step.
        let dims = GameDims::new(1, 1, 3, 3);
        let record = TrajectoryRecord {
            game_seed: 17,
            dims,
            base_steps: (1..=4)
                .map(|g| EpisodeStep { g, h: 1, s: 0, a: g % 3, b: g % 3, r: 0.25 * g as f64 / 4.0 })
                .collect(),
            augmented: (1..=4).map(|t| AugmentedAction { t, s: 0, a: t % 3, b: t % 3 }).collect(),
            policy_snapshots: None,
        };
        record.validate().unwrap();
        let (max_view, min_view) = split_decentralized(&record);
        for k in 0..4 {
            assert_eq!(max_view.steps[k].a, min_view.steps[k].a);
            assert!((max_view.steps[k].r + min_view.steps[k].r - 1.0).abs() < 1e-15);
            assert_eq!(max_view.aug[k].a, min_view.aug[k].a);
        }
    }

    #[test]
    fn min_view_reward_is_complement() {
        let dims = GameDims::new(1, 1, 2, 2);
        let record = TrajectoryRecord {
            game_seed: 0,
            dims,
            base_steps: vec![EpisodeStep { g: 1, h: 1, s: 0, a: 0, b: 1, r: 0.37 }],
            augmented: vec![AugmentedAction { t: 1, s: 0, a: 0, b: 0 }],
            policy_snapshots: None,
        };
        let (_, min_view) = split_decentralized(&record);
        assert!((min_view.steps[0].r - 0.63).abs() < 1e-15);
    }

    #[test]
    fn join_of_views_reconstructs_base_steps() {
        let family = markov_family();
        let record = &collect_pretraining(
            &family,
            ContextAlgorithm::VLearning,
            1,
            8,
            &AlgorithmParams::default(),
            false,
        )
        .unwrap()[0];
        let (max_view, min_view) = split_decentralized(record);
        let rebuilt: Vec<EpisodeStep> = max_view
            .steps
            .iter()
            .zip(&min_view.steps)
            .map(|(mx, mn)| EpisodeStep { g: mx.g, h: mx.h, s: mx.s, a: mx.a, b: mn.a, r: mx.r })
            .collect();
        assert_eq!(rebuilt, record.base_steps);
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");

        write_jsonl(&[], &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 0);
        assert!(read_jsonl(&path).unwrap().is_empty());

        let family = GameFamily::new(GameDims::new(2, 3, 4, 3), 25);
        let records = collect_pretraining(
            &family,
            ContextAlgorithm::VLearning,
            3,
            77,
            &AlgorithmParams::default(),
            true,
        )
        .unwrap();
        write_jsonl(&records, &path).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn truncated_line_errors_with_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.jsonl");
        let family = matrix_family(3, 10);
        let records = collect_pretraining(
            &family,
            ContextAlgorithm::Exp3,
            2,
            3,
            &AlgorithmParams::default(),
            false,
        )
        .unwrap();
        write_jsonl(&records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let truncated = format!("{}\n{}\n", lines[0], &lines[1][..lines[1].len() / 2]);
        std::fs::write(&path, truncated).unwrap();
        match read_jsonl(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_line_errors_with_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad-index.jsonl");
        let family = matrix_family(3, 5);
        let mut records = collect_pretraining(
            &family,
            ContextAlgorithm::Exp3,
            1,
            3,
            &AlgorithmParams::default(),
            false,
        )
        .unwrap();
        records[0].base_steps[2].a = 99;
        let json = serde_json::to_string(&records[0]).unwrap();
        std::fs::write(&path, format!("{json}\n")).unwrap();
        match read_jsonl(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rounding_limits_rewards_to_two_decimals() {
        let family = matrix_family(4, 30);
        let mut record = collect_pretraining(
            &family,
            ContextAlgorithm::Exp3,
            1,
            21,
            &AlgorithmParams::default(),
            false,
        )
        .unwrap()
        .remove(0);
        record.round_rewards_2dp();
        for step in &record.base_steps {
            let scaled = step.r * 100.0;
            assert!((scaled - scaled.round()).abs() < 1e-9, "reward {} not on 0.01 grid", step.r);
        }
        record.validate().unwrap();
    }

    /// Two-sample chi-square homogeneity statistic for a 2 x K count table.
    fn chi_square_homogeneity(counts_a: &[u64], counts_b: &[u64]) -> f64 {
        let total_a: u64 = counts_a.iter().sum();
        let total_b: u64 = counts_b.iter().sum();
        let grand = (total_a + total_b) as f64;
        let mut stat = 0.0;
        for k in 0..counts_a.len() {
            let col = (counts_a[k] + counts_b[k]) as f64;
            if col == 0.0 {
                continue;
            }
            let exp_a = col * total_a as f64 / grand;
            let exp_b = col * total_b as f64 / grand;
            stat += (counts_a[k] as f64 - exp_a).powi(2) / exp_a;
            stat += (counts_b[k] as f64 - exp_b).powi(2) / exp_b;
        }
        stat
    }

    #[test]
    fn augmented_action_matches_base_action_distribution() {
        // At the time of each base action, the augmented draw at the realized
        // state comes from the same in-force policy, so across many seeded
        // collections the two actions at a fixed mid-run time are identically
        // distributed. Two-sample chi-square on a 5-action bandit, df = 4;
        // critical value at significance 1e-3 is 18.4668.
        let family = matrix_family(5, 150);
        let probe_t = 120;
        let mut base_counts = [0u64; 5];
        let mut aug_counts = [0u64; 5];
        let records = collect_pretraining(
            &family,
            ContextAlgorithm::Exp3,
            10_000,
            2024,
            &AlgorithmParams::default(),
            false,
        )
        .unwrap();
        for record in &records {
            base_counts[record.base_steps[probe_t - 1].a] += 1;
            aug_counts[record.augmented[probe_t - 1].a] += 1;
            assert_eq!(record.augmented[probe_t - 1].t, probe_t);
        }
        let stat = chi_square_homogeneity(&base_counts, &aug_counts);
        assert!(
            stat < 18.4668,
            "chi-square statistic {stat:.3} rejects homogeneity: base {base_counts:?} vs augmented {aug_counts:?}"
        );
        assert_eq!(base_counts.iter().sum::<u64>(), 10_000);
        assert_eq!(aug_counts.iter().sum::<u64>(), 10_000);
    }

    #[test]
    fn augmentation_policy_is_in_force_policy() {
        // With snapshots on, replaying the learner manually must give the
        // same per-time policies the augmentation sampled from.
        let family = matrix_family(3, 25);
        let record = &collect_pretraining(
            &family,
            ContextAlgorithm::Exp3,
            1,
            11,
            &AlgorithmParams::default(),
            true,
        )
        .unwrap()[0];
        let snaps = record.policy_snapshots.as_ref().unwrap();
        let eta = Exp3Learner::eta_for_budget(3, 25);
        let mut max = Exp3Learner::new(3, eta).unwrap();
        let mut min = Exp3Learner::new(3, eta).unwrap();
        let game = sample_matrix_game(3, 3, record.game_seed);
        for (k, step) in record.base_steps.iter().enumerate() {
            let mu = max.policy();
            let nu = min.policy();
            for (p, q) in mu.iter().zip(&snaps[k].mu) {
                assert!((p - q).abs() < 1e-15);
            }
            for (p, q) in nu.iter().zip(&snaps[k].nu) {
                assert!((p - q).abs() < 1e-15);
            }
            let r = game.reward_at(1, 0, step.a, step.b);
            assert!((r - step.r).abs() < 1e-15);
            max.update(step.a, r, mu[step.a]).unwrap();
            min.update(step.b, 1.0 - r, nu[step.b]).unwrap();
        }
    }
}
