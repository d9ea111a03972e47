//! Manifest-driven experiment pipeline: collect trajectories, pretrain one
//! model family per corpus size, play fresh inference games, and evaluate
//! equilibrium-gap curves.
//!
//! Every artifact is a pure function of (config, master seed): reruns write
//! byte-identical files, and a stage whose manifest flag is already set is
//! skipped without touching disk. The single exception is
//! `training-times.csv` (wall-clock seconds per epoch), which is inherently
//! machine-dependent and therefore listed nowhere in the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use icgp_core::dataset::{
    collect_pretraining, read_jsonl, split_decentralized, write_jsonl, ContextAlgorithm, GameFamily,
};
use icgp_core::equilibrium::{matrix_ne_gap, ne_gap, RunningMean, StagePolicy};
use icgp_core::game::{sample_markov_game, MarkovGame};
use icgp_core::no_regret::Exp3Learner;
use icgp_core::pretrain::{
    infer_play, train, EpisodePolicies, InferenceActors, LossReport, TrainSet,
};
use icgp_core::transformer::{load_checkpoint, save_checkpoint, TransformerParams};
use icgp_core::util::{derive_seed, mean, sample_categorical, stderr};
use icgp_core::v_learning::{averaged_output_policy, PolicyHistory, VLearner};
use icgp_core::vi_ulcb::{self_play_episode, ViUlcbState};
use icgp_core::{Error, Result};

use crate::config::{ExperimentConfig, Mode};

// Seed-stream tags. Each pipeline consumer of randomness hangs off its own
// tag so the namespaces never collide (inference games are disjoint from
// collection games by construction).
const STREAM_COLLECT: u64 = 0x11;
const STREAM_TRAIN: u64 = 0x22;
const STREAM_INFER_GAMES: u64 = 0x33;
const STREAM_INFER_PLAY: u64 = 0x44;

/// Folds the parts into the master seed one derivation at a time.
fn chain(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(seed, |s, &p| derive_seed(s, p))
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hash of the experiment identity. The output location is not part of the
/// identity, so the same experiment in two directories hashes equally.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir = None;
    format!("{:016x}", fnv1a64(c.canonical_json().as_bytes()))
}

/// Well-known file locations inside one output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: PathBuf) -> Self {
        Paths { root }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }

    pub fn checkpoint(&self, n: usize, k: usize, role: &str) -> PathBuf {
        self.root.join(format!("ckpt-N{n}-s{k}-{role}.bin"))
    }

    pub fn training_log(&self) -> PathBuf {
        self.root.join("training-log.csv")
    }

    pub fn training_times(&self) -> PathBuf {
        self.root.join("training-times.csv")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    /// `prefix` is "context" or "transformer-N{n}-s{k}".
    pub fn run_file(&self, prefix: &str, game: usize) -> PathBuf {
        self.runs_dir().join(format!("{prefix}-game{game}.json"))
    }

    pub fn curves_csv(&self) -> PathBuf {
        self.root.join("curves.csv")
    }

    pub fn curves_svg(&self) -> PathBuf {
        self.root.join("curves.svg")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlags {
    pub collect: bool,
    pub train: bool,
    pub infer: bool,
    pub eval: bool,
}

/// The experiment's ground truth on disk: config echo, identity hash, and
/// which stages have completed. Contains no timestamps or host details so
/// its bytes are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub context_algorithm: String,
    /// Prompt truncation window in force at inference (None = full prompt).
    pub truncation_window: Option<usize>,
    pub collect_episodes: usize,
    pub infer_episodes: usize,
    pub stages: StageFlags,
    /// Relative paths of completed-stage outputs, in creation order.
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let mut config = cfg.clone();
        config.output_dir = None;
        Manifest {
            config_hash: config_hash(&config),
            context_algorithm: config.context_algorithm().tag().to_string(),
            truncation_window: config.window,
            collect_episodes: config.episodes,
            infer_episodes: config.infer_episodes,
            config,
            stages: StageFlags::default(),
            artifacts: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::invalid(format!("cannot read manifest {}: {e}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    fn add_artifact(&mut self, rel: String) {
        if !self.artifacts.contains(&rel) {
            self.artifacts.push(rel);
        }
    }
}

/// Whether a stage did work or was already complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

impl StageOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            StageOutcome::Ran => "ran",
            StageOutcome::Skipped => "skipped (already complete)",
        }
    }
}

/// One inference rollout as stored on disk. `output_policies` says whether
/// `episodes[g]` is already the certified output policy for episode g+1
/// (evaluated directly) or a raw acting policy the evaluator must still
/// aggregate across episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRun {
    pub series: String,
    pub game_index: usize,
    pub game_seed: u64,
    pub output_policies: bool,
    pub episodes: Vec<EpisodePolicies>,
}

impl StoredRun {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::invalid(format!("cannot read run {}: {e}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }
}

/// Orchestrates the four stages inside one output directory.
pub struct Pipeline {
    cfg: ExperimentConfig,
    paths: Paths,
}

impl Pipeline {
    /// `out` is created if absent. The config's own `output_dir` is ignored
    /// here (the caller resolves it) and normalized away so that the same
    /// experiment run in two directories produces identical artifacts.
    pub fn new(mut cfg: ExperimentConfig, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        cfg.output_dir = None;
        fs::create_dir_all(&out)?;
        Ok(Pipeline { cfg, paths: Paths::new(out) })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn paths(&self) -> &Paths {
        &self.paths
    }

    /// Loads the manifest if present (erroring when it belongs to a
    /// different experiment) or initializes a fresh one.
    fn manifest_or_init(&self) -> Result<Manifest> {
        let path = self.paths.manifest();
        if path.exists() {
            let m = Manifest::load(&path)?;
            let expected = config_hash(&self.cfg);
            if m.config_hash != expected {
                return Err(Error::invalid(format!(
                    "output directory {} holds a different experiment (config hash {} != {}); \
                     point --out at a fresh directory",
                    self.paths.root.display(),
                    m.config_hash,
                    expected
                )));
            }
            Ok(m)
        } else {
            Ok(Manifest::new(&self.cfg))
        }
    }

    /// Samples the largest requested corpus; smaller corpora are prefixes
    /// (per-record seeds depend only on the record index).
    pub fn stage_collect(&self) -> Result<StageOutcome> {
        let mut m = self.manifest_or_init()?;
        if m.stages.collect {
            return Ok(StageOutcome::Skipped);
        }
        let n_max = *self.cfg.n_pretrain.last().expect("validated non-empty");
        let family = GameFamily::new(self.cfg.dims(), self.cfg.episodes);
        let mut records = collect_pretraining(
            &family,
            self.cfg.context_algorithm(),
            n_max,
            chain(self.cfg.seed, &[STREAM_COLLECT]),
            &self.cfg.algorithm_params(),
            false,
        )?;
        if self.cfg.round2 {
            for r in &mut records {
                r.round_rewards_2dp();
            }
        }
        write_jsonl(&records, &self.paths.dataset())?;
        m.stages.collect = true;
        m.add_artifact("dataset.jsonl".to_string());
        m.save(&self.paths.manifest())?;
        Ok(StageOutcome::Ran)
    }

    /// Trains one model set per (corpus size, training seed): max and min
    /// single-player models in decentralized mode, one joint model in
    /// centralized mode.
    pub fn stage_train(&self) -> Result<StageOutcome> {
        let mut m = self.manifest_or_init()?;
        if m.stages.train {
            return Ok(StageOutcome::Skipped);
        }
        if !m.stages.collect {
            return Err(Error::contract("training needs the dataset; run the collect stage first"));
        }
        let records = read_jsonl(&self.paths.dataset())?;
        let n_max = *self.cfg.n_pretrain.last().expect("validated non-empty");
        if records.len() < n_max {
            return Err(Error::contract(format!(
                "dataset holds {} records but n_pretrain asks for {n_max}",
                records.len()
            )));
        }
        let mut log = String::from("model,epoch,nll\n");
        let mut times = String::from("model,epoch,secs\n");
        let mut new_files: Vec<String> = Vec::new();
        for &n in &self.cfg.n_pretrain {
            let subset = &records[..n];
            for k in 0..self.cfg.train_seeds {
                let seed_nk = chain(self.cfg.seed, &[STREAM_TRAIN, n as u64, k as u64]);
                match self.cfg.mode {
                    Mode::Decentralized => {
                        let (max_views, min_views): (Vec<_>, Vec<_>) =
                            subset.iter().map(split_decentralized).unzip();
                        for (role, role_tag) in [("max", 0u64), ("min", 1u64)] {
                            let set = if role == "max" {
                                TrainSet::from_decentralized(&max_views)?
                            } else {
                                TrainSet::from_decentralized(&min_views)?
                            };
                            let tc = self.cfg.to_train_config(derive_seed(seed_nk, role_tag));
                            let (params, report) = train(&tc, &set)?;
                            save_checkpoint(&self.paths.checkpoint(n, k, role), &params)?;
                            append_loss_rows(&mut log, &mut times, &format!("N{n}-s{k}-{role}"), &report);
                            new_files.push(format!("ckpt-N{n}-s{k}-{role}.bin"));
                        }
                    }
                    Mode::Centralized => {
                        let set = TrainSet::from_centralized(subset)?;
                        let tc = self.cfg.to_train_config(derive_seed(seed_nk, 2));
                        let (params, report) = train(&tc, &set)?;
                        save_checkpoint(&self.paths.checkpoint(n, k, "joint"), &params)?;
                        append_loss_rows(&mut log, &mut times, &format!("N{n}-s{k}-joint"), &report);
                        new_files.push(format!("ckpt-N{n}-s{k}-joint.bin"));
                    }
                }
            }
        }
        fs::write(self.paths.training_log(), log)?;
        // Wall-clock times are machine-dependent; written for inspection but
        // never recorded as an artifact.
        fs::write(self.paths.training_times(), times)?;
        m.stages.train = true;
        for f in new_files {
            m.add_artifact(f);
        }
        m.add_artifact("training-log.csv".to_string());
        m.save(&self.paths.manifest())?;
        Ok(StageOutcome::Ran)
    }

    /// The shared inference games: fresh seeds disjoint from collection by
    /// stream tag, identical across all series so curves are comparable.
    pub fn inference_games(&self) -> Vec<(u64, MarkovGame)> {
        let d = self.cfg.dims();
        (0..self.cfg.inference_games)
            .map(|i| {
                let gs = chain(self.cfg.seed, &[STREAM_INFER_GAMES, i as u64]);
                (gs, sample_markov_game(d.max_actions, d.min_actions, d.states, d.horizon, gs))
            })
            .collect()
    }

    /// Plays the context-algorithm baseline and every trained model on the
    /// shared inference games. Games run in parallel; run files are written
    /// sequentially in index order.
    pub fn stage_infer(&self) -> Result<StageOutcome> {
        let mut m = self.manifest_or_init()?;
        if m.stages.infer {
            return Ok(StageOutcome::Skipped);
        }
        if !m.stages.train {
            return Err(Error::contract("inference needs checkpoints; run the train stage first"));
        }
        fs::create_dir_all(self.paths.runs_dir())?;
        let games = self.inference_games();
        let episodes = self.cfg.infer_episodes;
        let alg = self.cfg.context_algorithm();
        let ap = self.cfg.algorithm_params();
        let mut new_files: Vec<String> = Vec::new();

        let baseline: Vec<StoredRun> = games
            .par_iter()
            .enumerate()
            .map(|(i, (gs, game))| {
                let seed = chain(self.cfg.seed, &[STREAM_INFER_PLAY, 0, 0, i as u64]);
                let (eps, output) = match alg {
                    ContextAlgorithm::Exp3 => {
                        (run_exp3_baseline(game, episodes, ap.exp3_eta, seed)?, false)
                    }
                    ContextAlgorithm::VLearning => {
                        (run_vlearning_baseline(game, episodes, ap.vl_c, ap.vl_delta, seed)?, true)
                    }
                    ContextAlgorithm::ViUlcb => (
                        run_viulcb_baseline(game, episodes, ap.ulcb_c, ap.ulcb_delta, ap.ulcb_n_mwu, seed)?,
                        true,
                    ),
                };
                Ok(StoredRun {
                    series: "context-alg".to_string(),
                    game_index: i,
                    game_seed: *gs,
                    output_policies: output,
                    episodes: eps,
                })
            })
            .collect::<Result<_>>()?;
        for (i, run) in baseline.iter().enumerate() {
            run.save(&self.paths.run_file("context", i))?;
            new_files.push(format!("runs/context-game{i}.json"));
        }

        for &n in &self.cfg.n_pretrain {
            for k in 0..self.cfg.train_seeds {
                let (first, second): (TransformerParams<f64>, Option<TransformerParams<f64>>) =
                    match self.cfg.mode {
                        Mode::Decentralized => (
                            load_checkpoint(&self.paths.checkpoint(n, k, "max"))?,
                            Some(load_checkpoint(&self.paths.checkpoint(n, k, "min"))?),
                        ),
                        Mode::Centralized => {
                            (load_checkpoint(&self.paths.checkpoint(n, k, "joint"))?, None)
                        }
                    };
                let runs: Vec<StoredRun> = games
                    .par_iter()
                    .enumerate()
                    .map(|(i, (gs, game))| {
                        let actors = match &second {
                            Some(min_p) => InferenceActors::Decentralized { max: &first, min: min_p },
                            None => InferenceActors::Centralized(&first),
                        };
                        let mut rng = ChaCha8Rng::seed_from_u64(chain(
                            self.cfg.seed,
                            &[STREAM_INFER_PLAY, 1 + n as u64, 1 + k as u64, i as u64],
                        ));
                        let run = infer_play(&actors, game, episodes, self.cfg.window, &mut rng)?;
                        Ok(StoredRun {
                            series: format!("transformer-N{n}-s{k}"),
                            game_index: i,
                            game_seed: *gs,
                            output_policies: self.cfg.mode == Mode::Centralized,
                            episodes: run.episode_policies,
                        })
                    })
                    .collect::<Result<_>>()?;
                for (i, run) in runs.iter().enumerate() {
                    run.save(&self.paths.run_file(&format!("transformer-N{n}-s{k}"), i))?;
                    new_files.push(format!("runs/transformer-N{n}-s{k}-game{i}.json"));
                }
            }
        }

        m.stages.infer = true;
        for f in new_files {
            m.add_artifact(f);
        }
        m.save(&self.paths.manifest())?;
        Ok(StageOutcome::Ran)
    }

    /// Turns stored runs into one gap curve per series (mean and standard
    /// error over runs at every episode) and writes curves.csv / curves.svg.
    pub fn stage_eval(&self) -> Result<StageOutcome> {
        let mut m = self.manifest_or_init()?;
        if m.stages.eval {
            return Ok(StageOutcome::Skipped);
        }
        if !m.stages.infer {
            return Err(Error::contract("evaluation needs inference runs; run the infer stage first"));
        }
        let games = self.inference_games();
        let mut series: Vec<(String, Vec<PathBuf>)> = Vec::new();
        series.push((
            "context-alg".to_string(),
            (0..self.cfg.inference_games).map(|i| self.paths.run_file("context", i)).collect(),
        ));
        for &n in &self.cfg.n_pretrain {
            let mut files = Vec::new();
            for k in 0..self.cfg.train_seeds {
                for i in 0..self.cfg.inference_games {
                    files.push(self.paths.run_file(&format!("transformer-N{n}-s{k}"), i));
                }
            }
            series.push((format!("transformer-N{n}"), files));
        }

        let mut csv = String::from("series,episode,mean_gap,stderr\n");
        let mut plotted: Vec<(String, Vec<f64>)> = Vec::new();
        for (label, files) in &series {
            let per_run: Vec<Vec<f64>> = files
                .par_iter()
                .map(|f| {
                    let run = StoredRun::load(f)?;
                    if run.game_index >= games.len() {
                        return Err(Error::contract(format!(
                            "run {} references game {} outside the configured {}",
                            f.display(),
                            run.game_index,
                            games.len()
                        )));
                    }
                    run_gap_curve(&run, &games[run.game_index].1)
                })
                .collect::<Result<_>>()?;
            let episodes = self.cfg.infer_episodes;
            for curve in &per_run {
                if curve.len() != episodes {
                    return Err(Error::contract(format!(
                        "series {label}: run has {} episodes, expected {episodes}",
                        curve.len()
                    )));
                }
            }
            let mut means = Vec::with_capacity(episodes);
            for ep in 0..episodes {
                let vals: Vec<f64> = per_run.iter().map(|c| c[ep]).collect();
                let mu = mean(&vals);
                csv.push_str(&format!("{label},{},{mu},{}\n", ep + 1, stderr(&vals)));
                means.push(mu);
            }
            plotted.push((label.clone(), means));
        }
        fs::write(self.paths.curves_csv(), csv)?;
        fs::write(self.paths.curves_svg(), render_curves_svg(&plotted))?;
        m.stages.eval = true;
        m.add_artifact("curves.csv".to_string());
        m.add_artifact("curves.svg".to_string());
        m.save(&self.paths.manifest())?;
        Ok(StageOutcome::Ran)
    }

    pub fn run_all(&self) -> Result<[(&'static str, StageOutcome); 4]> {
        Ok([
            ("collect", self.stage_collect()?),
            ("train", self.stage_train()?),
            ("infer", self.stage_infer()?),
            ("eval", self.stage_eval()?),
        ])
    }
}

fn append_loss_rows(log: &mut String, times: &mut String, model: &str, report: &LossReport) {
    // Epoch 0 is the evaluation NLL before any update; epochs 1..=E are the
    // per-epoch training NLLs; epoch E+1 is the evaluation NLL afterwards.
    log.push_str(&format!("{model},0,{}\n", report.initial_nll));
    for (e, nll) in report.epoch_nll.iter().enumerate() {
        log.push_str(&format!("{model},{},{nll}\n", e + 1));
    }
    log.push_str(&format!("{model},{},{}\n", report.epoch_nll.len() + 1, report.final_nll));
    for (e, secs) in report.epoch_secs.iter().enumerate() {
        times.push_str(&format!("{model},{},{secs}\n", e + 1));
    }
}

/// Self-play of two adversarial-bandit learners on a matrix game, recording
/// the acting policy pair of every episode (before that episode's update).
pub fn run_exp3_baseline(
    game: &MarkovGame,
    episodes: usize,
    eta: Option<f64>,
    seed: u64,
) -> Result<Vec<EpisodePolicies>> {
    let d = game.dims;
    if d.horizon != 1 || d.states != 1 {
        return Err(Error::invalid("the bandit baseline only plays matrix games (H = 1, S = 1)"));
    }
    let eta_a = eta.unwrap_or_else(|| Exp3Learner::eta_for_budget(d.max_actions, episodes));
    let eta_b = eta.unwrap_or_else(|| Exp3Learner::eta_for_budget(d.min_actions, episodes));
    let mut max = Exp3Learner::new(d.max_actions, eta_a)?;
    let mut min = Exp3Learner::new(d.min_actions, eta_b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let (a, mu) = max.act(&mut rng);
        let (b, nu) = min.act(&mut rng);
        out.push(EpisodePolicies {
            max: StagePolicy { horizon: 1, states: 1, actions: d.max_actions, probs: mu.clone() },
            min: StagePolicy { horizon: 1, states: 1, actions: d.min_actions, probs: nu.clone() },
        });
        let r = game.reward_at(1, 0, a, b);
        max.update(a, r, mu[a])?;
        min.update(b, 1.0 - r, nu[b])?;
    }
    Ok(out)
}

/// Decentralized V-learning self-play; entry g (0-based) is the certified
/// output policy pair after episodes 1..=g+1: the alpha-weighted mixture
/// over each cell's visit history up to that point.
pub fn run_vlearning_baseline(
    game: &MarkovGame,
    episodes: usize,
    c: f64,
    delta: Option<f64>,
    seed: u64,
) -> Result<Vec<EpisodePolicies>> {
    let d = game.dims;
    let delta = delta.unwrap_or(1.0 / d.total_steps(episodes) as f64);
    let mut max = VLearner::new(d.horizon, d.states, d.max_actions, episodes, c, delta)?;
    let mut min = VLearner::new(d.horizon, d.states, d.min_actions, episodes, c, delta)?;
    let mut hist_max = PolicyHistory::new(d.horizon, d.states);
    let mut hist_min = PolicyHistory::new(d.horizon, d.states);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(episodes);
    for g in 1..=episodes {
        let mut s = game.initial_state;
        for h in 1..=d.horizon {
            let (a, _) = max.act(h, s, &mut rng);
            let (b, _) = min.act(h, s, &mut rng);
            let r = game.reward_at(h, s, a, b);
            let s_next = sample_categorical(game.transition_row(h, s, a, b), &mut rng);
            max.update(&mut hist_max, g, h, s, a, r, s_next)?;
            min.update(&mut hist_min, g, h, s, b, 1.0 - r, s_next)?;
            s = s_next;
        }
        out.push(EpisodePolicies {
            max: StagePolicy::from_fn(d.horizon, d.states, d.max_actions, |h, sq| {
                averaged_output_policy(&hist_max, h, sq, d.max_actions, g + 1)
            }),
            min: StagePolicy::from_fn(d.horizon, d.states, d.min_actions, |h, sq| {
                averaged_output_policy(&hist_min, h, sq, d.min_actions, g + 1)
            }),
        });
    }
    Ok(out)
}

/// Centralized optimistic-planner self-play; entry g is the marginal pair of
/// the joint policy planned for episode g+1.
pub fn run_viulcb_baseline(
    game: &MarkovGame,
    episodes: usize,
    c: f64,
    delta: Option<f64>,
    n_mwu: Option<usize>,
    seed: u64,
) -> Result<Vec<EpisodePolicies>> {
    let d = game.dims;
    let delta = delta.unwrap_or(1.0 / d.total_steps(episodes) as f64);
    let mut planner = ViUlcbState::new(d, c, delta, n_mwu)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(episodes);
    for g in 1..=episodes {
        self_play_episode(&mut planner, game, g, episodes, &mut rng)?;
        let (mu, nu) = planner.episode_marginals(g - 1);
        out.push(EpisodePolicies { max: mu, min: nu });
    }
    Ok(out)
}

/// Matrix-game curve: gap of the running-average policy pair after each
/// episode (the standard no-regret-to-equilibrium certificate).
pub fn matrix_gap_curve(game: &MarkovGame, episodes: &[EpisodePolicies]) -> Vec<f64> {
    let d = game.dims;
    let mut avg_mu = RunningMean::new(d.max_actions);
    let mut avg_nu = RunningMean::new(d.min_actions);
    episodes
        .iter()
        .map(|ep| {
            let mu = avg_mu.push(ep.max.at(1, 0)).to_vec();
            let nu = avg_nu.push(ep.min.at(1, 0));
            matrix_ne_gap(&game.reward, d.max_actions, d.min_actions, &mu, nu).max(0.0)
        })
        .collect()
}

/// Per-episode curve: each entry is already an output policy pair; take its
/// gap directly.
pub fn per_episode_gap_curve(game: &MarkovGame, episodes: &[EpisodePolicies]) -> Result<Vec<f64>> {
    episodes.iter().map(|ep| Ok(ne_gap(game, &ep.max, &ep.min)?.max(0.0))).collect()
}

/// Markov-game curve for raw acting policies: fold them into the same
/// alpha-weighted mixture the decentralized learner certifies
/// (mixed_g = (1 - alpha_g) mixed_{g-1} + alpha_g pi_g with
/// alpha_g = (H + 1) / (H + g)), then take the gap of each mixture.
pub fn mixed_gap_curve(game: &MarkovGame, episodes: &[EpisodePolicies]) -> Result<Vec<f64>> {
    let d = game.dims;
    if episodes.is_empty() {
        return Err(Error::invalid("need at least one episode to evaluate"));
    }
    let hf = d.horizon as f64;
    let mut mixed_max = vec![0.0; d.horizon * d.states * d.max_actions];
    let mut mixed_min = vec![0.0; d.horizon * d.states * d.min_actions];
    let mut out = Vec::with_capacity(episodes.len());
    for (gi, ep) in episodes.iter().enumerate() {
        let alpha = (hf + 1.0) / (hf + (gi + 1) as f64);
        for (m, &p) in mixed_max.iter_mut().zip(&ep.max.probs) {
            *m = (1.0 - alpha) * *m + alpha * p;
        }
        for (m, &p) in mixed_min.iter_mut().zip(&ep.min.probs) {
            *m = (1.0 - alpha) * *m + alpha * p;
        }
        let mu = StagePolicy {
            horizon: d.horizon,
            states: d.states,
            actions: d.max_actions,
            probs: mixed_max.clone(),
        };
        let nu = StagePolicy {
            horizon: d.horizon,
            states: d.states,
            actions: d.min_actions,
            probs: mixed_min.clone(),
        };
        out.push(ne_gap(game, &mu, &nu)?.max(0.0));
    }
    Ok(out)
}

/// Dispatch on run kind: matrix runs of acting policies use the
/// running-average rule, certified output policies are scored directly, and
/// Markov-game acting policies are alpha-mixed first.
pub fn run_gap_curve(run: &StoredRun, game: &MarkovGame) -> Result<Vec<f64>> {
    let d = game.dims;
    if d.horizon == 1 && d.states == 1 && !run.output_policies {
        Ok(matrix_gap_curve(game, &run.episodes))
    } else if run.output_policies {
        per_episode_gap_curve(game, &run.episodes)
    } else {
        mixed_gap_curve(game, &run.episodes)
    }
}

const SVG_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Minimal self-contained line plot: one polyline per series, left axis
/// labeled with the gap range, legend in the right margin.
pub fn render_curves_svg(curves: &[(String, Vec<f64>)]) -> String {
    let (w, h) = (800.0, 500.0);
    let (ml, mr, mt, mb) = (70.0, 170.0, 30.0, 50.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let n_eps = curves.iter().map(|c| c.1.len()).max().unwrap_or(0).max(1);
    let y_max = curves
        .iter()
        .flat_map(|c| c.1.iter())
        .fold(0.0f64, |a, &b| a.max(b))
        .max(1e-12);
    let x_of = |ep: usize| {
        if n_eps == 1 {
            ml + pw / 2.0
        } else {
            ml + pw * ep as f64 / (n_eps - 1) as f64
        }
    };
    let y_of = |v: f64| mt + ph * (1.0 - v / y_max);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"13\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    // Axes.
    s.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{0}\" x2=\"{}\" y2=\"{0}\" stroke=\"black\"/>\n",
        mt + ph,
        ml + pw
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">episode</text>\n",
        ml + pw / 2.0,
        h - 12.0
    ));
    s.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">mean NE gap</text>\n",
        mt + ph / 2.0,
        mt + ph / 2.0
    ));
    // Tick labels: y extremes and x extremes.
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.4}</text>\n",
        ml - 6.0,
        mt + 5.0,
        y_max
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">0</text>\n",
        ml - 6.0,
        mt + ph + 5.0
    ));
    s.push_str(&format!(
        "<text x=\"{ml}\" y=\"{}\" text-anchor=\"middle\">1</text>\n",
        mt + ph + 18.0
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{n_eps}</text>\n",
        ml + pw,
        mt + ph + 18.0
    ));
    for (idx, (label, vals)) in curves.iter().enumerate() {
        let color = SVG_COLORS[idx % SVG_COLORS.len()];
        if !vals.is_empty() {
            let pts: Vec<String> = vals
                .iter()
                .enumerate()
                .map(|(e, &v)| format!("{:.2},{:.2}", x_of(e), y_of(v)))
                .collect();
            s.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
        }
        let ly = mt + 16.0 + 20.0 * idx as f64;
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"3\"/>\n",
            ml + pw + 12.0,
            ly - 4.0,
            ml + pw + 34.0,
            ly - 4.0
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{label}</text>\n",
            ml + pw + 40.0,
            ly
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use icgp_core::game::sample_matrix_game;

    #[test]
    fn uniform_policies_on_symmetric_game_give_flat_zero_curve() {
        // A game whose row/column structure makes the uniform pair exactly
        // optimal: constant payoff matrix.
        let mut game = sample_matrix_game(3, 3, 7);
        for r in game.reward.iter_mut() {
            *r = 0.5;
        }
        let eps: Vec<EpisodePolicies> = (0..20)
            .map(|_| EpisodePolicies {
                max: StagePolicy::uniform(1, 1, 3),
                min: StagePolicy::uniform(1, 1, 3),
            })
            .collect();
        let curve = matrix_gap_curve(&game, &eps);
        assert_eq!(curve.len(), 20);
        for g in curve {
            assert!(g.abs() <= 1e-12, "gap {g} should vanish");
        }
    }

    #[test]
    fn matrix_curve_matches_manual_running_average() {
        let game = sample_matrix_game(2, 2, 3);
        let p1 = EpisodePolicies {
            max: StagePolicy { horizon: 1, states: 1, actions: 2, probs: vec![1.0, 0.0] },
            min: StagePolicy { horizon: 1, states: 1, actions: 2, probs: vec![0.0, 1.0] },
        };
        let p2 = EpisodePolicies {
            max: StagePolicy { horizon: 1, states: 1, actions: 2, probs: vec![0.0, 1.0] },
            min: StagePolicy { horizon: 1, states: 1, actions: 2, probs: vec![1.0, 0.0] },
        };
        let curve = matrix_gap_curve(&game, &[p1, p2]);
        let expect1 = matrix_ne_gap(&game.reward, 2, 2, &[1.0, 0.0], &[0.0, 1.0]).max(0.0);
        let expect2 = matrix_ne_gap(&game.reward, 2, 2, &[0.5, 0.5], &[0.5, 0.5]).max(0.0);
        assert!((curve[0] - expect1).abs() < 1e-15);
        assert!((curve[1] - expect2).abs() < 1e-15);
    }

    #[test]
    fn mixed_curve_first_entry_equals_direct_gap() {
        // alpha_1 = 1, so the first mixture is the first acting policy.
        let game = sample_markov_game(2, 2, 2, 2, 11);
        let ep = EpisodePolicies {
            max: StagePolicy::uniform(2, 2, 2),
            min: StagePolicy::uniform(2, 2, 2),
        };
        let mixed = mixed_gap_curve(&game, std::slice::from_ref(&ep)).unwrap();
        let direct = per_episode_gap_curve(&game, std::slice::from_ref(&ep)).unwrap();
        assert!((mixed[0] - direct[0]).abs() < 1e-15);
    }

    #[test]
    fn bandit_baseline_curve_decays_on_a_matrix_game() {
        let game = sample_matrix_game(5, 5, 42);
        let eps = run_exp3_baseline(&game, 1500, None, 9).unwrap();
        let curve = matrix_gap_curve(&game, &eps);
        let early = mean(&curve[..150]);
        let late = mean(&curve[1350..]);
        assert!(late < early, "late {late} should beat early {early}");
    }

    #[test]
    fn svg_renderer_is_deterministic_and_wellformed() {
        let curves = vec![
            ("context-alg".to_string(), vec![0.5, 0.4, 0.3]),
            ("transformer-N10".to_string(), vec![0.6, 0.5, 0.45]),
        ];
        let a = render_curves_svg(&curves);
        let b = render_curves_svg(&curves);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.contains("context-alg"));
        assert!(a.contains("transformer-N10"));
    }

    #[test]
    fn config_hash_ignores_output_dir() {
        let text = "mode = decentralized\nmax_actions = 3\nmin_actions = 3\nepisodes = 10\nn_pretrain = 2\n";
        let a = ExperimentConfig::from_str(text).unwrap();
        let mut b = a.clone();
        b.output_dir = Some(PathBuf::from("/elsewhere"));
        assert_eq!(config_hash(&a), config_hash(&b));
        let mut c = a.clone();
        c.seed = 1;
        assert_ne!(config_hash(&a), config_hash(&c));
    }
}
