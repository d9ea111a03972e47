//! Scratch probe: distribution of the 10-game EXP3 decay ratio across seed sets.

use icgp_core::equilibrium::{matrix_ne_gap, RunningMean};
use icgp_core::game::sample_matrix_game;
use icgp_core::no_regret::Exp3Learner;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn set_ratio(base: u64, eta_scale: f64) -> (f64, f64, f64) {
    let (a, b, episodes) = (5usize, 5usize, 3000usize);
    let eta = eta_scale * Exp3Learner::eta_for_budget(a, episodes);
    let mut first = vec![0.0; 10];
    let mut last = vec![0.0; 10];
    for gi in 0..10 {
        let game = sample_matrix_game(a, b, base + gi as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(base + 777 + gi as u64);
        let mut max = Exp3Learner::new(a, eta).unwrap();
        let mut min = Exp3Learner::new(b, eta).unwrap();
        let mut mu_avg = RunningMean::new(a);
        let mut nu_avg = RunningMean::new(b);
        let (mut f_sum, mut l_sum) = (0.0, 0.0);
        for g in 0..episodes {
            let (ai, mu) = max.act(&mut rng);
            let (bi, nu) = min.act(&mut rng);
            let r = game.reward_at(1, 0, ai, bi);
            max.update(ai, r, mu[ai]).unwrap();
            min.update(bi, 1.0 - r, nu[bi]).unwrap();
            let mu_bar = mu_avg.push(&mu).to_vec();
            let nu_bar = nu_avg.push(&nu).to_vec();
            let gap = matrix_ne_gap(&game.reward, a, b, &mu_bar, &nu_bar);
            if g < 300 {
                f_sum += gap;
            }
            if g >= 2700 {
                l_sum += gap;
            }
        }
        first[gi] = f_sum / 300.0;
        last[gi] = l_sum / 300.0;
    }
    let fm = first.iter().sum::<f64>() / 10.0;
    let lm = last.iter().sum::<f64>() / 10.0;
    (fm, lm, lm / fm)
}

fn main() {
    for &scale in &[1.0f64, 2.5] {
        println!("== eta scale {scale} ==");
        for base in (0..10).map(|k| k * 1000u64) {
            let (f, l, r) = set_ratio(base, scale);
            println!("  seeds {base:>5}..+10: first {f:.4}  last {l:.4}  ratio {r:.3}");
        }
    }
}
