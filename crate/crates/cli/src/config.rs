//! Flat `key = value` experiment configuration. Every key mirrors one
//! [`ExperimentConfig`] field; unknown or duplicate keys are errors so a
//! typo cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use icgp_core::dataset::{AlgorithmParams, ContextAlgorithm};
use icgp_core::game::GameDims;
use icgp_core::pretrain::{OptimizerTag, TrainConfig};
use icgp_core::{Error, Result};

/// Who the trained models control at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Two models, each prompted with its own view (opponent actions
    /// hidden). Matrix games imitate the adversarial-bandit learner;
    /// multi-state games imitate the decentralized V-learner.
    Decentralized,
    /// One model over joint actions, imitating the centralized planner.
    Centralized,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Decentralized => "decentralized",
            Mode::Centralized => "centralized",
        }
    }
}

/// Full experiment description; the manifest embeds a copy so an output
/// directory is self-describing and reruns can detect mismatches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub horizon: usize,
    pub states: usize,
    pub max_actions: usize,
    pub min_actions: usize,
    /// Episodes per collected pretraining game.
    pub episodes: usize,
    /// Episodes played at inference; defaults to `episodes` so token
    /// positions stay inside the pretraining range.
    pub infer_episodes: usize,
    /// Pretraining corpus sizes to train and compare (strictly increasing).
    pub n_pretrain: Vec<usize>,
    pub inference_games: usize,
    /// Independent training runs per corpus size.
    pub train_seeds: usize,
    pub seed: u64,
    /// Round collected rewards to 2 decimal places.
    pub round2: bool,
    pub exp3_eta: Option<f64>,
    pub vl_c: f64,
    pub vl_delta: Option<f64>,
    pub ulcb_c: f64,
    pub ulcb_delta: Option<f64>,
    pub ulcb_n_mwu: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerTag,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Prompt truncation window in tokens; None keeps full prefixes.
    pub window: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

fn base_config(mode: Mode) -> ExperimentConfig {
    let t = TrainConfig::default();
    ExperimentConfig {
        mode,
        horizon: 1,
        states: 1,
        max_actions: 0,
        min_actions: 0,
        episodes: 0,
        infer_episodes: 0,
        n_pretrain: Vec::new(),
        inference_games: 10,
        train_seeds: 2,
        seed: 0,
        round2: false,
        exp3_eta: None,
        vl_c: 1.0,
        vl_delta: None,
        ulcb_c: 1.0,
        ulcb_delta: None,
        ulcb_n_mwu: None,
        epochs: t.epochs,
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        optimizer: t.optimizer,
        layers: t.layers,
        heads: t.heads,
        hidden: t.hidden,
        window: None,
        output_dir: None,
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::invalid(format!("config key '{key}': cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::invalid(format!("config key '{key}': expected true or false, got '{value}'"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| parse_num::<usize>(key, part.trim()))
        .collect()
}

impl ExperimentConfig {
    /// Parses the flat text format: one `key = value` per line, `#` starts
    /// a comment, blank lines ignored. `mode`, the game dimensions,
    /// `episodes`, and `n_pretrain` are required.
    pub fn from_str(text: &str) -> Result<Self> {
        let mut mode = None;
        let mut entries: Vec<(String, String)> = Vec::new();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if value.is_empty() {
                return Err(Error::invalid(format!("config line {}: key '{key}' has no value", lineno + 1)));
            }
            if seen.contains(&key) {
                return Err(Error::invalid(format!("config line {}: duplicate key '{key}'", lineno + 1)));
            }
            seen.push(key.clone());
            if key == "mode" {
                mode = Some(match value.as_str() {
                    "decentralized" => Mode::Decentralized,
                    "centralized" => Mode::Centralized,
                    other => {
                        return Err(Error::invalid(format!(
                            "config key 'mode': expected decentralized or centralized, got '{other}'"
                        )))
                    }
                });
            } else {
                entries.push((key, value));
            }
        }
        let mode = mode.ok_or_else(|| Error::invalid("config is missing required key 'mode'"))?;
        let mut cfg = base_config(mode);
        let mut infer_episodes_set = false;
        for (key, value) in &entries {
            let v = value.as_str();
            match key.as_str() {
                "horizon" => cfg.horizon = parse_num(key, v)?,
                "states" => cfg.states = parse_num(key, v)?,
                "max_actions" => cfg.max_actions = parse_num(key, v)?,
                "min_actions" => cfg.min_actions = parse_num(key, v)?,
                "episodes" => cfg.episodes = parse_num(key, v)?,
                "infer_episodes" => {
                    cfg.infer_episodes = parse_num(key, v)?;
                    infer_episodes_set = true;
                }
                "n_pretrain" => cfg.n_pretrain = parse_list(key, v)?,
                "inference_games" => cfg.inference_games = parse_num(key, v)?,
                "train_seeds" => cfg.train_seeds = parse_num(key, v)?,
                "seed" => cfg.seed = parse_num(key, v)?,
                "round2" => cfg.round2 = parse_bool(key, v)?,
                "exp3_eta" => cfg.exp3_eta = Some(parse_num(key, v)?),
                "vl_c" => cfg.vl_c = parse_num(key, v)?,
                "vl_delta" => cfg.vl_delta = Some(parse_num(key, v)?),
                "ulcb_c" => cfg.ulcb_c = parse_num(key, v)?,
                "ulcb_delta" => cfg.ulcb_delta = Some(parse_num(key, v)?),
                "ulcb_n_mwu" => cfg.ulcb_n_mwu = Some(parse_num(key, v)?),
                "epochs" => cfg.epochs = parse_num(key, v)?,
                "batch_size" => cfg.batch_size = parse_num(key, v)?,
                "learning_rate" => cfg.learning_rate = parse_num(key, v)?,
                "optimizer" => {
                    cfg.optimizer = match v {
                        "sgd" => OptimizerTag::Sgd,
                        "adaptive" => OptimizerTag::Adaptive,
                        other => {
                            return Err(Error::invalid(format!(
                                "config key 'optimizer': expected sgd or adaptive, got '{other}'"
                            )))
                        }
                    }
                }
                "layers" => cfg.layers = parse_num(key, v)?,
                "heads" => cfg.heads = parse_num(key, v)?,
                "hidden" => cfg.hidden = parse_num(key, v)?,
                "window" => {
                    cfg.window = if v == "full" { None } else { Some(parse_num(key, v)?) };
                }
                "output_dir" => cfg.output_dir = Some(PathBuf::from(v)),
                other => return Err(Error::invalid(format!("unknown config key '{other}'"))),
            }
        }
        if !infer_episodes_set {
            cfg.infer_episodes = cfg.episodes;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.states == 0 || self.max_actions == 0 || self.min_actions == 0 {
            return Err(Error::invalid(
                "horizon, states, max_actions, and min_actions must all be set and positive",
            ));
        }
        if self.episodes == 0 || self.infer_episodes == 0 {
            return Err(Error::invalid("episodes and infer_episodes must be positive"));
        }
        if self.n_pretrain.is_empty() {
            return Err(Error::invalid("n_pretrain must list at least one corpus size"));
        }
        if self.n_pretrain.windows(2).any(|w| w[0] >= w[1]) || self.n_pretrain[0] == 0 {
            return Err(Error::invalid("n_pretrain must be positive and strictly increasing"));
        }
        if self.inference_games == 0 || self.train_seeds == 0 {
            return Err(Error::invalid("inference_games and train_seeds must be positive"));
        }
        for (name, c) in [("vl_c", self.vl_c), ("ulcb_c", self.ulcb_c)] {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive and finite")));
            }
        }
        if let Some(eta) = self.exp3_eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::invalid("exp3_eta must be positive and finite"));
            }
        }
        self.to_train_config(0).validate()
    }

    pub fn dims(&self) -> GameDims {
        GameDims::new(self.horizon, self.states, self.max_actions, self.min_actions)
    }

    /// Which algorithm generates the pretraining data and the baseline
    /// curve: the bandit learner on single-state matrix games, the
    /// decentralized V-learner otherwise, and the centralized planner in
    /// centralized mode.
    pub fn context_algorithm(&self) -> ContextAlgorithm {
        match self.mode {
            Mode::Centralized => ContextAlgorithm::ViUlcb,
            Mode::Decentralized => {
                if self.horizon == 1 && self.states == 1 {
                    ContextAlgorithm::Exp3
                } else {
                    ContextAlgorithm::VLearning
                }
            }
        }
    }

    pub fn algorithm_params(&self) -> AlgorithmParams {
        AlgorithmParams {
            exp3_eta: self.exp3_eta,
            vl_c: self.vl_c,
            vl_delta: self.vl_delta,
            ulcb_c: self.ulcb_c,
            ulcb_delta: self.ulcb_delta,
            ulcb_n_mwu: self.ulcb_n_mwu,
        }
    }

    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            seed,
            layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
            window: self.window,
        }
    }

    /// Canonical serialization used for the manifest echo and config hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
mode = decentralized
max_actions = 5
min_actions = 5
episodes = 100
n_pretrain = 10, 20
";

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.mode, Mode::Decentralized);
        assert_eq!(cfg.horizon, 1);
        assert_eq!(cfg.states, 1);
        assert_eq!(cfg.infer_episodes, 100);
        assert_eq!(cfg.n_pretrain, vec![10, 20]);
        assert_eq!(cfg.inference_games, 10);
        assert_eq!(cfg.train_seeds, 2);
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.learning_rate, 5e-4);
        assert_eq!(cfg.optimizer, OptimizerTag::Adaptive);
        assert_eq!(cfg.context_algorithm(), ContextAlgorithm::Exp3);
        assert!(cfg.window.is_none());
        assert!(!cfg.round2);
    }

    #[test]
    fn comments_blank_lines_and_inline_comments_parse() {
        let text = format!("# experiment\n\n{MINIMAL}window = 64  # tokens\nseed = 7\n");
        let cfg = ExperimentConfig::from_str(&text).unwrap();
        assert_eq!(cfg.window, Some(64));
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let text = format!("{MINIMAL}learning_rte = 0.1\n");
        let err = ExperimentConfig::from_str(&text).unwrap_err().to_string();
        assert!(err.contains("learning_rte"), "{err}");
    }

    #[test]
    fn duplicate_key_is_an_error() {
        let text = format!("{MINIMAL}seed = 1\nseed = 2\n");
        let err = ExperimentConfig::from_str(&text).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn missing_required_keys_are_errors() {
        assert!(ExperimentConfig::from_str("max_actions = 2\nmin_actions = 2\nepisodes = 5\nn_pretrain = 1\n").is_err());
        assert!(ExperimentConfig::from_str("mode = centralized\n").is_err());
        let no_list = "mode = centralized\nhorizon = 2\nstates = 2\nmax_actions = 2\nmin_actions = 2\nepisodes = 5\n";
        assert!(ExperimentConfig::from_str(no_list).is_err());
    }

    #[test]
    fn n_pretrain_must_increase() {
        let text = "mode = decentralized\nmax_actions = 2\nmin_actions = 2\nepisodes = 5\nn_pretrain = 20, 10\n";
        assert!(ExperimentConfig::from_str(text).is_err());
        let text = "mode = decentralized\nmax_actions = 2\nmin_actions = 2\nepisodes = 5\nn_pretrain = 10, 10\n";
        assert!(ExperimentConfig::from_str(text).is_err());
    }

    #[test]
    fn window_full_and_mode_selection() {
        let text = "mode = centralized\nhorizon = 2\nstates = 4\nmax_actions = 5\nmin_actions = 5\n\
                    episodes = 300\nn_pretrain = 10, 20\nwindow = full\n";
        let cfg = ExperimentConfig::from_str(text).unwrap();
        assert!(cfg.window.is_none());
        assert_eq!(cfg.context_algorithm(), ContextAlgorithm::ViUlcb);
        let text = "mode = decentralized\nhorizon = 2\nstates = 2\nmax_actions = 3\nmin_actions = 3\n\
                    episodes = 50\nn_pretrain = 5\n";
        let cfg = ExperimentConfig::from_str(text).unwrap();
        assert_eq!(cfg.context_algorithm(), ContextAlgorithm::VLearning);
    }

    #[test]
    fn bad_values_are_rejected() {
        for bad in [
            format!("{MINIMAL}round2 = yes\n"),
            format!("{MINIMAL}optimizer = adam\n"),
            format!("{MINIMAL}learning_rate = -1\n"),
            format!("{MINIMAL}vl_c = 0\n"),
            format!("{MINIMAL}exp3_eta = nope\n"),
            format!("{MINIMAL}window = 0\n"),
        ] {
            assert!(ExperimentConfig::from_str(&bad).is_err(), "accepted: {bad}");
        }
    }

    #[test]
    fn canonical_json_round_trips() {
        let cfg = ExperimentConfig::from_str(MINIMAL).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&cfg.canonical_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
