//! Measures training and inference wall time at candidate experiment scales
//! so the acceptance configuration can be pinned with evidence. Not part of
//! the shipped pipeline.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use icgp_core::dataset::{
    collect_pretraining, split_decentralized, AlgorithmParams, ContextAlgorithm, GameFamily,
};
use icgp_core::game::{sample_markov_game, GameDims};
use icgp_core::pretrain::{infer_play, train, InferenceActors, TrainConfig, TrainSet};
use icgp_core::transformer::embed::{EmbeddingSpec, ViewMode};
use icgp_core::transformer::ModelIo;

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "matrix".to_string());
    match mode.as_str() {
        "matrix" => probe_matrix(),
        "central" => probe_central(),
        "exp3" => probe_exp3_eta(),
        "ulcb" => probe_ulcb_decay(),
        "ulcb2" => probe_ulcb_pipeline_dims(),
        other => eprintln!("unknown probe '{other}': use matrix | central | exp3 | ulcb"),
    }
}

/// Teacher decay at the centralized pipeline dims (S = 2, G = 60).
fn probe_ulcb_pipeline_dims() {
    use icgp_cli::pipeline::{per_episode_gap_curve, run_viulcb_baseline};
    use icgp_core::util::mean;

    let episodes = 60usize;
    for (c, n_mwu) in [(1.0, None), (0.02, Some(3000)), (0.05, Some(3000))] {
        let mut earlys = Vec::new();
        let mut lates = Vec::new();
        for i in 0u64..10 {
            let game = sample_markov_game(3, 3, 2, 2, i);
            let eps = run_viulcb_baseline(&game, episodes, c, None, n_mwu, 2000 + i).unwrap();
            let curve = per_episode_gap_curve(&game, &eps).unwrap();
            earlys.push(mean(&curve[0..6]));
            lates.push(mean(&curve[54..60]));
        }
        let early = mean(&earlys);
        let late = mean(&lates);
        println!(
            "ulcb2 c={c} n_mwu={n_mwu:?}: first6 {early:.4}, last6 {late:.4}, ratio {:.3}",
            late / early
        );
    }
}

/// Per-episode gap decay of the centralized planner at verification dims.
fn probe_ulcb_decay() {
    use icgp_cli::pipeline::{per_episode_gap_curve, run_viulcb_baseline};
    use icgp_core::util::mean;

    let episodes = 300usize;
    for (acts, c) in [(3usize, 0.02), (3, 0.05), (5, 0.02)] {
        for (gs0, ps0) in [(0u64, 2000u64), (50, 7000), (300, 9000)] {
            let t0 = Instant::now();
            let mut earlys = Vec::new();
            let mut lates = Vec::new();
            for i in 0u64..10 {
                let game = sample_markov_game(acts, acts, 4, 2, gs0 + i);
                let eps =
                    run_viulcb_baseline(&game, episodes, c, None, Some(3000), ps0 + i).unwrap();
                let curve = per_episode_gap_curve(&game, &eps).unwrap();
                earlys.push(mean(&curve[0..30]));
                lates.push(mean(&curve[270..300]));
            }
            let early = mean(&earlys);
            let late = mean(&lates);
            println!(
                "ulcb A=B={acts} c={c} seeds {gs0}/{ps0}: early {early:.4}, late {late:.4}, \
                 ratio {:.3} ({:.0}s)",
                late / early,
                t0.elapsed().as_secs_f64()
            );
        }
    }
}

/// Late/early gap-ratio of bandit self-play across learning rates, on
/// tuning games disjoint from any verification seeds.
fn probe_exp3_eta() {
    use icgp_cli::pipeline::{matrix_gap_curve, run_exp3_baseline};
    use icgp_core::util::mean;

    let episodes = 3000usize;
    let default_eta = (2.0 * 5f64.ln() / (5.0 * episodes as f64)).sqrt();
    // Low-noise tuning estimate: 40 games x 3 play seeds, all disjoint from
    // the 10 verification games (seeds 0..10, one run each).
    for eta in [default_eta, 0.018, 0.02, 0.022, 0.025, 0.028, 0.032, 0.04] {
        let mut earlys = Vec::new();
        let mut lates = Vec::new();
        for i in 100u64..140 {
            let game = sample_markov_game(5, 5, 1, 1, i);
            for rep in 0..3u64 {
                let eps = run_exp3_baseline(&game, episodes, Some(eta), 1000 + 10 * i + rep).unwrap();
                let curve = matrix_gap_curve(&game, &eps);
                earlys.push(mean(&curve[0..300]));
                lates.push(mean(&curve[2699..3000]));
            }
        }
        let early = mean(&earlys);
        let late = mean(&lates);
        println!("tune eta {eta:.4}: early {early:.4}, late {late:.4}, ratio {:.3}", late / early);
    }
}

fn probe_matrix() {
    for (episodes, window) in [(150usize, 16usize), (150, 32), (300, 16), (300, 32)] {
        let dims = GameDims::new(1, 1, 5, 5);
        let family = GameFamily::new(dims, episodes);
        let t0 = Instant::now();
        let records = collect_pretraining(
            &family,
            ContextAlgorithm::Exp3,
            20,
            1,
            &AlgorithmParams::default(),
            false,
        )
        .unwrap();
        let collect_secs = t0.elapsed().as_secs_f64();

        let views: Vec<_> = records.iter().map(|r| split_decentralized(r).0).collect();
        let set = TrainSet::from_decentralized(&views).unwrap();
        let probe_epochs = 2usize;
        let tc = TrainConfig { epochs: probe_epochs, window: Some(window), seed: 7, ..TrainConfig::default() };
        let t0 = Instant::now();
        let (params, report) = train(&tc, &set).unwrap();
        let per_epoch = t0.elapsed().as_secs_f64() / probe_epochs as f64;

        let game = sample_markov_game(5, 5, 1, 1, 99);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Timing only: reuse the max-view weights as the min player (the
        // embedding is symmetric when A = B).
        let mut min_params = params.clone();
        min_params.io = ModelIo::Structured(EmbeddingSpec::new(ViewMode::DecentralizedMin, dims));
        let actors = InferenceActors::Decentralized { max: &params, min: &min_params };
        let t0 = Instant::now();
        let run = infer_play(&actors, &game, episodes, Some(window), &mut rng).unwrap();
        let infer_secs = t0.elapsed().as_secs_f64();

        let n_examples = set.len();
        let full_train = per_epoch * 100.0;
        // Matrix decentralized: 2 roles x 2 corpus sizes x 2 seeds = 8 models;
        // training examples scale ~linearly in N so N=10 models cost half.
        // 8 models but half are N=10: 4 * full + 4 * full/2 = 6 * full.
        let total_train = 6.0 * full_train;
        // Inference: 10 games x (2 corpus x 2 seeds) transformer runs; the
        // probe already plays both roles per game.
        let total_infer = infer_secs * 10.0 * 4.0;
        println!(
            "matrix G={episodes} W={window}: {n_examples} examples, collect {collect_secs:.1}s, \
             epoch {per_epoch:.2}s, one-model train {full_train:.0}s, all-train {total_train:.0}s, \
             one-game infer {infer_secs:.2}s, all-infer {total_infer:.0}s, nll0 {:.3}, nll2 {:.3}, evals {}",
            report.initial_nll,
            report.epoch_nll.last().unwrap(),
            run.score_evals.iter().sum::<u64>(),
        );
    }
}

fn probe_central() {
    for (episodes, window) in [(40usize, 16usize), (40, 32), (80, 16)] {
        let dims = GameDims::new(2, 2, 3, 3);
        let family = GameFamily::new(dims, episodes);
        let t0 = Instant::now();
        let records = collect_pretraining(
            &family,
            ContextAlgorithm::ViUlcb,
            20,
            1,
            &AlgorithmParams::default(),
            false,
        )
        .unwrap();
        let collect_secs = t0.elapsed().as_secs_f64();

        let set = TrainSet::from_centralized(&records).unwrap();
        let probe_epochs = 2usize;
        let tc = TrainConfig { epochs: probe_epochs, window: Some(window), seed: 7, ..TrainConfig::default() };
        let t0 = Instant::now();
        let (params, report) = train(&tc, &set).unwrap();
        let per_epoch = t0.elapsed().as_secs_f64() / probe_epochs as f64;

        let game = sample_markov_game(3, 3, 2, 2, 99);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let actors = InferenceActors::Centralized(&params);
        let t0 = Instant::now();
        let run = infer_play(&actors, &game, episodes, Some(window), &mut rng).unwrap();
        let infer_secs = t0.elapsed().as_secs_f64();

        let n_examples = set.len();
        let full_train = per_epoch * 100.0;
        // Centralized: 1 role x 2 corpus sizes x 2 seeds = 4 models -> 3x.
        let total_train = 3.0 * full_train;
        let total_infer = infer_secs * 10.0 * 4.0;
        println!(
            "central G={episodes} W={window}: {n_examples} examples, collect {collect_secs:.1}s, \
             epoch {per_epoch:.2}s, one-model train {full_train:.0}s, all-train {total_train:.0}s, \
             one-game infer {infer_secs:.2}s, all-infer {total_infer:.0}s, nll0 {:.3}, nll2 {:.3}, evals {}",
            report.initial_nll,
            report.epoch_nll.last().unwrap(),
            run.score_evals.iter().sum::<u64>(),
        );
    }
}
