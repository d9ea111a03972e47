//! No-regret learners on one-shot payoff matrices: the exponential-weights
//! pair used as a coarse-correlated-equilibrium (CCE) subroutine, and EXP3
//! with importance-weighted losses for bandit self-play.

use crate::error::{Error, Result};
use crate::util::{sample_categorical, softmax};
use rand::Rng;

/// Output of [`mwu_cce`]: the averaged joint policy and the final iterates.
#[derive(Debug, Clone)]
pub struct MwuOutput {
    /// Row-major (a, b) joint distribution: the average of mu_n x nu_n.
    pub joint: Vec<f64>,
    pub final_mu: Vec<f64>,
    pub final_nu: Vec<f64>,
}

/// Exponential-weights CCE solver state, stepped one round at a time.
///
/// Both players run multiplicative weights over normalized losses in
/// [0, 1]: the max player on (H - Q_upper)/H so it ascends Q_upper, the min
/// player on Q_lower/H so it descends Q_lower. Learning rates are
/// sqrt(ln K / N) per player.
#[derive(Debug, Clone)]
pub struct MwuCce {
    max_actions: usize,
    min_actions: usize,
    eta_a: f64,
    eta_b: f64,
    n_rounds: usize,
    loss_up: Vec<f64>,
    loss_lo: Vec<f64>,
    cum_up: Vec<f64>,
    cum_lo: Vec<f64>,
    joint: Vec<f64>,
    round: usize,
}

impl MwuCce {
    pub fn new(
        q_upper: &[f64],
        q_lower: &[f64],
        max_actions: usize,
        min_actions: usize,
        h_scale: f64,
        n_rounds: usize,
    ) -> Result<Self> {
        let cells = max_actions * min_actions;
        if q_upper.len() != cells || q_lower.len() != cells {
            return Err(Error::dims(format!("expected {cells} payoff cells")));
        }
        if n_rounds == 0 {
            return Err(Error::invalid("n_rounds must be positive"));
        }
        if h_scale <= 0.0 {
            return Err(Error::invalid("h_scale must be positive"));
        }
        for &q in q_upper.iter().chain(q_lower) {
            if !(0.0..=h_scale).contains(&q) {
                return Err(Error::contract(format!("payoff {q} outside [0, {h_scale}]")));
            }
        }
        let loss_up: Vec<f64> = q_upper.iter().map(|&q| (h_scale - q) / h_scale).collect();
        let loss_lo: Vec<f64> = q_lower.iter().map(|&q| q / h_scale).collect();
        Ok(MwuCce {
            max_actions,
            min_actions,
            eta_a: ((max_actions as f64).ln() / n_rounds as f64).sqrt(),
            eta_b: ((min_actions as f64).ln() / n_rounds as f64).sqrt(),
            n_rounds,
            loss_up,
            loss_lo,
            cum_up: vec![0.0; max_actions],
            cum_lo: vec![0.0; min_actions],
            joint: vec![0.0; cells],
            round: 0,
        })
    }

    /// Current max-player iterate mu_n = softmax(-eta_A * cumulative loss).
    pub fn current_mu(&self) -> Vec<f64> {
        softmax(&self.cum_up.iter().map(|&x| -self.eta_a * x).collect::<Vec<_>>())
    }

    pub fn current_nu(&self) -> Vec<f64> {
        softmax(&self.cum_lo.iter().map(|&x| -self.eta_b * x).collect::<Vec<_>>())
    }

    /// Plays one round: forms the iterates, accumulates each player's
    /// expected loss vector against the other's iterate, and adds the outer
    /// product into the running average.
    pub fn step(&mut self) {
        let mu = self.current_mu();
        let nu = self.current_nu();
        let (na, nb) = (self.max_actions, self.min_actions);
        for a in 0..na {
            let mut o = 0.0;
            for b in 0..nb {
                o += nu[b] * self.loss_up[a * nb + b];
            }
            self.cum_up[a] += o;
        }
        for b in 0..nb {
            let mut o = 0.0;
            for a in 0..na {
                o += mu[a] * self.loss_lo[a * nb + b];
            }
            self.cum_lo[b] += o;
        }
        let w = 1.0 / self.n_rounds as f64;
        for a in 0..na {
            for b in 0..nb {
                self.joint[a * nb + b] += mu[a] * nu[b] * w;
            }
        }
        self.round += 1;
    }

    pub fn finish(mut self) -> MwuOutput {
        while self.round < self.n_rounds {
            self.step();
        }
        let final_mu = self.current_mu();
        let final_nu = self.current_nu();
        MwuOutput { joint: self.joint, final_mu, final_nu }
    }
}

/// Runs the full solver: N rounds of paired exponential weights, returning
/// the averaged joint policy.
pub fn mwu_cce(
    q_upper: &[f64],
    q_lower: &[f64],
    max_actions: usize,
    min_actions: usize,
    h_scale: f64,
    n_rounds: usize,
) -> Result<MwuOutput> {
    Ok(MwuCce::new(q_upper, q_lower, max_actions, min_actions, h_scale, n_rounds)?.finish())
}

/// Deviation gaps certifying the CCE property of a joint policy:
/// how much the max player gains by deviating to its best fixed row of
/// `q_upper`, and the min player by deviating to its best fixed column of
/// `q_lower`. Both are at most H sqrt(ln(A+B)/N) for the solver's output.
pub fn cce_deviation_gaps(
    joint: &[f64],
    q_upper: &[f64],
    q_lower: &[f64],
    max_actions: usize,
    min_actions: usize,
) -> (f64, f64) {
    let (mu_marg, nu_marg) = crate::equilibrium::joint_marginals(joint, max_actions, min_actions);
    let mut mean_up = 0.0;
    let mut mean_lo = 0.0;
    for a in 0..max_actions {
        for b in 0..min_actions {
            let p = joint[a * min_actions + b];
            mean_up += p * q_upper[a * min_actions + b];
            mean_lo += p * q_lower[a * min_actions + b];
        }
    }
    let mut best_row = f64::NEG_INFINITY;
    for a in 0..max_actions {
        let mut v = 0.0;
        for b in 0..min_actions {
            v += nu_marg[b] * q_upper[a * min_actions + b];
        }
        best_row = best_row.max(v);
    }
    let mut best_col = f64::INFINITY;
    for b in 0..min_actions {
        let mut v = 0.0;
        for a in 0..max_actions {
            v += mu_marg[a] * q_lower[a * min_actions + b];
        }
        best_col = best_col.min(v);
    }
    (best_row - mean_up, mean_lo - best_col)
}

/// EXP3 with importance-weighted loss estimates and exponential weights;
/// no explicit exploration mixing.
#[derive(Debug, Clone)]
pub struct Exp3Learner {
    actions: usize,
    eta: f64,
    cum_loss: Vec<f64>,
}

impl Exp3Learner {
    pub fn new(actions: usize, eta: f64) -> Result<Self> {
        if actions == 0 {
            return Err(Error::invalid("need at least one action"));
        }
        if !(eta > 0.0) {
            return Err(Error::invalid("eta must be positive"));
        }
        Ok(Exp3Learner { actions, eta, cum_loss: vec![0.0; actions] })
    }

    /// Horizon-tuned learning rate sqrt(2 ln A / (A G)) for a G-episode run.
    pub fn eta_for_budget(actions: usize, episodes: usize) -> f64 {
        (2.0 * (actions as f64).ln() / (actions as f64 * episodes as f64)).sqrt()
    }

    /// Current policy: exponential weights on the negated cumulative loss
    /// estimates, shifted by the minimum for stability.
    pub fn policy(&self) -> Vec<f64> {
        let m = self.cum_loss.iter().cloned().fold(f64::INFINITY, f64::min);
        softmax(&self.cum_loss.iter().map(|&l| -self.eta * (l - m)).collect::<Vec<_>>())
    }

    /// Samples an action; returns it with the policy it was drawn from.
    pub fn act<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<f64>) {
        let p = self.policy();
        (sample_categorical(&p, rng), p)
    }

    /// Importance-weighted update: adds (1 - r) / prob to the played arm's
    /// loss estimate. `prob` must be the probability the arm was played with.
    pub fn update(&mut self, action: usize, reward: f64, prob: f64) -> Result<()> {
        if action >= self.actions {
            return Err(Error::invalid(format!("action {action} out of range")));
        }
        if !(0.0..=1.0).contains(&reward) {
            return Err(Error::contract(format!("reward {reward} outside [0, 1]")));
        }
        if !(prob > 0.0) {
            return Err(Error::contract(format!("sampling probability {prob} must be positive")));
        }
        self.cum_loss[action] += (1.0 - reward) / prob;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_payoffs(rng: &mut ChaCha8Rng, cells: usize, h: f64) -> Vec<f64> {
        (0..cells).map(|_| rng.random::<f64>() * h).collect()
    }

    #[test]
    fn constant_payoffs_give_uniform_joint() {
        // Q_upper = Q_lower = H everywhere: constant losses for both
        // players keep every iterate uniform.
        let q = vec![2.0; 9];
        let out = mwu_cce(&q, &q, 3, 3, 2.0, 50).unwrap();
        for &p in &out.joint {
            assert!((p - 1.0 / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let qu = random_payoffs(&mut rng, 25, 2.0);
            let ql = random_payoffs(&mut rng, 25, 2.0);
            let out = mwu_cce(&qu, &ql, 5, 5, 2.0, 100).unwrap();
            crate::util::check_distribution(&out.joint, 1e-9, "mwu joint").unwrap();
        }
    }

    #[test]
    fn deviation_gaps_within_closed_form_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 300;
        let eps = 2.0 * (10.0_f64.ln() / n as f64).sqrt();
        for _ in 0..20 {
            let qu = random_payoffs(&mut rng, 25, 2.0);
            let ql = random_payoffs(&mut rng, 25, 2.0);
            let out = mwu_cce(&qu, &ql, 5, 5, 2.0, n).unwrap();
            let (g_up, g_lo) = cce_deviation_gaps(&out.joint, &qu, &ql, 5, 5);
            assert!(g_up <= eps, "max-player deviation {g_up} > {eps}");
            assert!(g_lo <= eps, "min-player deviation {g_lo} > {eps}");
        }
    }

    #[test]
    fn gap_medians_do_not_increase_with_rounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut medians = Vec::new();
        let instances: Vec<(Vec<f64>, Vec<f64>)> =
            (0..20).map(|_| (random_payoffs(&mut rng, 25, 2.0), random_payoffs(&mut rng, 25, 2.0))).collect();
        for &n in &[30usize, 300, 3000] {
            let mut gaps: Vec<f64> = instances
                .iter()
                .map(|(qu, ql)| {
                    let out = mwu_cce(qu, ql, 5, 5, 2.0, n).unwrap();
                    let (a, b) = cce_deviation_gaps(&out.joint, qu, ql, 5, 5);
                    a.max(b)
                })
                .collect();
            gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(gaps[gaps.len() / 2]);
        }
        assert!(medians[0] >= medians[1] && medians[1] >= medians[2], "medians {medians:?}");
    }

    #[test]
    fn rejects_out_of_range_payoffs() {
        let q = vec![2.5, 0.0, 0.0, 0.0];
        assert!(mwu_cce(&q, &q, 2, 2, 2.0, 10).is_err());
    }

    #[test]
    fn exp3_importance_weighted_update() {
        let mut learner = Exp3Learner::new(2, 0.1).unwrap();
        learner.update(0, 0.5, 0.2).unwrap();
        // (1 - 0.5) / 0.2 = 2.5 lands on the played arm only.
        assert!((learner.cum_loss[0] - 2.5).abs() < 1e-15);
        assert_eq!(learner.cum_loss[1], 0.0);
    }

    #[test]
    fn exp3_sequential_updates_add() {
        let mut a = Exp3Learner::new(3, 0.2).unwrap();
        a.update(1, 0.25, 0.5).unwrap();
        a.update(1, 0.75, 0.25).unwrap();
        let mut b = Exp3Learner::new(3, 0.2).unwrap();
        b.cum_loss[1] = (1.0 - 0.25) / 0.5 + (1.0 - 0.75) / 0.25;
        assert!((a.cum_loss[1] - b.cum_loss[1]).abs() < 1e-15);
        let (pa, pb) = (a.policy(), b.policy());
        for (x, y) in pa.iter().zip(&pb) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn exp3_policy_is_valid_and_tilts_to_low_loss() {
        let mut learner = Exp3Learner::new(3, 0.5).unwrap();
        learner.update(2, 0.0, 0.3).unwrap();
        let p = learner.policy();
        crate::util::check_distribution(&p, 1e-12, "exp3 policy").unwrap();
        assert!(p[2] < p[0] && (p[0] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn exp3_budget_eta_hand_value() {
        // sqrt(2 ln 5 / (5 * 3000)).
        let eta = Exp3Learner::eta_for_budget(5, 3000);
        assert!((eta - (2.0 * 5.0_f64.ln() / 15000.0).sqrt()).abs() < 1e-15);
        assert!((eta - 0.0146489).abs() < 1e-6);
    }
}
