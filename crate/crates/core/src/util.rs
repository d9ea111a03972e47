//! Small numeric helpers shared across modules.

use crate::scalar::Scalar;
use rand::Rng;

/// Numerically stable softmax: shifts by the maximum before exponentiating.
pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    assert!(!z.is_empty(), "softmax of empty slice");
    let m = z.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = z.iter().map(|&x| (x - m).exp()).collect();
    let sum = out.iter().cloned().fold(T::zero(), |a, b| a + b);
    for x in &mut out {
        *x = *x / sum;
    }
    out
}

/// Euclidean projection onto the probability simplex by sorted thresholding.
///
/// Finds the largest k with z_(k) + (1 - sum of top k) / k > 0 and clips
/// every coordinate at that shifted threshold.
pub fn proj_simplex<T: Scalar>(z: &[T]) -> Vec<T> {
    assert!(!z.is_empty(), "projection of empty slice");
    let mut sorted: Vec<T> = z.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite entries"));
    let mut cum = T::zero();
    let mut tau = T::zero();
    let mut found = false;
    for (j, &v) in sorted.iter().enumerate() {
        cum += v;
        let cand = (T::one() - cum) / T::of_usize(j + 1);
        if v + cand > T::zero() {
            tau = cand;
            found = true;
        }
    }
    debug_assert!(found, "simplex projection threshold always exists");
    let _ = found;
    z.iter().map(|&v| (v + tau).max(T::zero())).collect()
}

/// Draws an index from an (unnormalized is tolerated, nonnegative) weight
/// vector. The final bucket absorbs rounding slack so the draw always lands.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    debug_assert!(!probs.is_empty());
    let total: f64 = probs.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// SplitMix64 step; used to derive independent per-record seeds from one
/// master seed without coupling nearby streams.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a stream seed from a master seed and a stream tag.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream))
}

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean (sample standard deviation over sqrt n);
/// zero for fewer than two samples.
pub fn stderr(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Asserts a probability vector: nonnegative entries summing to one within
/// `tol`.
pub fn check_distribution(p: &[f64], tol: f64, what: &str) -> crate::Result<()> {
    if p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(crate::Error::contract(format!("{what}: negative or non-finite probability")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(crate::Error::contract(format!("{what}: probabilities sum to {s}, expected 1")));
    }
    Ok(())
}
