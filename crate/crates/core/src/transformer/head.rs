//! Output heads: turning the last token's policy slot into a distribution.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::transformer::embed::{embed, EmbedStep, QueryPos};
use crate::transformer::{tf_forward, TokenMatrix, TransformerParams};
use crate::util::{proj_simplex, softmax};
use serde::{Deserialize, Serialize};

/// How raw policy-slot values become probabilities: Euclidean projection
/// onto the simplex, softmax, or the projection mixed with uniform weight
/// zeta (every entry then at least zeta/K).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Simplex,
    Softmax,
    Zeta(f64),
}

/// Reads the policy slot (part c) of the last token.
pub fn extract_logits<T: Scalar>(params: &TransformerParams<T>, out: &TokenMatrix<T>) -> Vec<f64> {
    let range = params.io.logit_range();
    let last = out.col(out.n() - 1);
    last[range].iter().map(|x| x.as_f64()).collect()
}

/// Applies a head to raw slot values.
pub fn apply_head(mode: HeadMode, z: &[f64]) -> Result<Vec<f64>> {
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("policy slot contains non-finite values"));
    }
    Ok(match mode {
        HeadMode::Simplex => proj_simplex(z),
        HeadMode::Softmax => softmax(z),
        HeadMode::Zeta(zeta) => {
            if !(0.0 < zeta && zeta <= 1.0) {
                return Err(Error::invalid(format!("zeta {zeta} outside (0, 1]")));
            }
            let k = z.len() as f64;
            proj_simplex(z).into_iter().map(|p| (1.0 - zeta) * p + zeta / k).collect()
        }
    })
}

/// End-to-end induced policy: embed the prompt, apply the model's input
/// standardization, run the model, apply the head to the last token's
/// policy slot.
pub fn induced_policy<T: Scalar>(
    params: &TransformerParams<T>,
    steps: &[EmbedStep],
    query: &QueryPos,
) -> Result<Vec<f64>> {
    let mut h = embed::<T>(params.io.embedding_spec()?, steps, query)?;
    crate::transformer::apply_input_scale(&mut h, &params.input_scale);
    let out = tf_forward(params, &h)?;
    apply_head(params.head, &extract_logits(params, &out))
}
