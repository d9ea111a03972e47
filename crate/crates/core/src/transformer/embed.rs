//! Trajectory-to-token embedding.
//!
//! A prompt of t-1 completed steps plus the current state becomes 2t-1
//! columns: state tokens at odd local positions (one-hot state, v = 1) and
//! action tokens at even positions (one-hot action(s) plus reward, v = 0).
//! Every column carries the positional block [g, h, t, e_h, v, i, i^2, 1]
//! with i the 1-based local position; g, h, t stay absolute so a truncated
//! window keeps its real episode coordinates.

use crate::error::{Error, Result};
use crate::game::GameDims;
use crate::scalar::Scalar;
use crate::transformer::TokenMatrix;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Which actions a prompt encodes: the joint pair, or one player's own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    Centralized,
    DecentralizedMax,
    DecentralizedMin,
}

/// Fixed coordinate layout: action/reward block, state one-hot, policy
/// output slot, positional block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub mode: ViewMode,
    pub dims: GameDims,
}

impl EmbeddingSpec {
    pub fn new(mode: ViewMode, dims: GameDims) -> Self {
        EmbeddingSpec { mode, dims }
    }

    /// Width of the action one-hot block (both one-hots when centralized).
    pub fn act_width(&self) -> usize {
        match self.mode {
            ViewMode::Centralized => self.dims.max_actions + self.dims.min_actions,
            ViewMode::DecentralizedMax => self.dims.max_actions,
            ViewMode::DecentralizedMin => self.dims.min_actions,
        }
    }

    /// Arity of the policy the model outputs at this view.
    pub fn output_arity(&self) -> usize {
        match self.mode {
            ViewMode::Centralized => self.dims.max_actions * self.dims.min_actions,
            ViewMode::DecentralizedMax => self.dims.max_actions,
            ViewMode::DecentralizedMin => self.dims.min_actions,
        }
    }

    pub fn part_a(&self) -> Range<usize> {
        0..self.act_width() + 1
    }

    pub fn part_b(&self) -> Range<usize> {
        let a = self.part_a().end;
        a..a + self.dims.states
    }

    pub fn part_c(&self) -> Range<usize> {
        let b = self.part_b().end;
        b..b + self.output_arity()
    }

    pub fn part_pos(&self) -> Range<usize> {
        let c = self.part_c().end;
        c..c + self.dims.horizon + 7
    }

    pub fn dim(&self) -> usize {
        self.part_pos().end
    }

    pub fn reward_coord(&self) -> usize {
        self.act_width()
    }

    pub fn pos_g(&self) -> usize {
        self.part_pos().start
    }

    pub fn pos_h(&self) -> usize {
        self.part_pos().start + 1
    }

    pub fn pos_t(&self) -> usize {
        self.part_pos().start + 2
    }

    pub fn pos_eh(&self, h: usize) -> usize {
        self.part_pos().start + 3 + (h - 1)
    }

    pub fn pos_v(&self) -> usize {
        self.part_pos().start + 3 + self.dims.horizon
    }

    pub fn pos_i(&self) -> usize {
        self.part_pos().start + 4 + self.dims.horizon
    }

    pub fn pos_i_sq(&self) -> usize {
        self.part_pos().start + 5 + self.dims.horizon
    }

    pub fn pos_one(&self) -> usize {
        self.part_pos().start + 6 + self.dims.horizon
    }
}

/// One completed step as a view sees it: `a` is the encoded action — the
/// max player's own, the min player's own, or paired with `b` when
/// centralized. Decentralized views never read `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedStep {
    pub g: usize,
    pub h: usize,
    pub t: usize,
    pub s: usize,
    pub a: usize,
    pub b: Option<usize>,
    pub r: f64,
}

/// Position of the query: the state the policy is being asked at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryPos {
    pub g: usize,
    pub h: usize,
    pub t: usize,
    pub s: usize,
}

fn write_pos<T: Scalar>(col: &mut [T], spec: &EmbeddingSpec, g: usize, h: usize, t: usize, v: bool, i: usize) {
    col[spec.pos_g()] = T::of_usize(g);
    col[spec.pos_h()] = T::of_usize(h);
    col[spec.pos_t()] = T::of_usize(t);
    col[spec.pos_eh(h)] = T::one();
    col[spec.pos_v()] = if v { T::one() } else { T::zero() };
    col[spec.pos_i()] = T::of_usize(i);
    col[spec.pos_i_sq()] = T::of_usize(i * i);
    col[spec.pos_one()] = T::one();
}

/// Builds the 2t-1 token prompt for `steps` followed by the query state.
pub fn embed<T: Scalar>(spec: &EmbeddingSpec, steps: &[EmbedStep], query: &QueryPos) -> Result<TokenMatrix<T>> {
    let d = spec.dim();
    let dims = &spec.dims;
    let own = match spec.mode {
        ViewMode::Centralized | ViewMode::DecentralizedMax => dims.max_actions,
        ViewMode::DecentralizedMin => dims.min_actions,
    };
    let mut out = TokenMatrix::zeros(d, 2 * steps.len() + 1);
    for (k, step) in steps.iter().enumerate() {
        if step.h == 0 || step.h > dims.horizon || step.s >= dims.states || step.a >= own || step.g == 0 || step.t == 0
        {
            return Err(Error::invalid(format!("step {k} indices out of range")));
        }
        if !(0.0..=1.0).contains(&step.r) {
            return Err(Error::contract(format!("reward {} outside [0, 1]", step.r)));
        }
        {
            let col = out.col_mut(2 * k);
            col[spec.part_b().start + step.s] = T::one();
            write_pos(col, spec, step.g, step.h, step.t, true, 2 * k + 1);
        }
        {
            let col = out.col_mut(2 * k + 1);
            col[step.a] = T::one();
            if spec.mode == ViewMode::Centralized {
                let b = step.b.ok_or_else(|| Error::invalid("centralized step needs the min action"))?;
                if b >= dims.min_actions {
                    return Err(Error::invalid(format!("step {k} min action out of range")));
                }
                col[dims.max_actions + b] = T::one();
            }
            col[spec.reward_coord()] = T::of(step.r);
            write_pos(col, spec, step.g, step.h, step.t, false, 2 * k + 2);
        }
    }
    if query.h == 0 || query.h > dims.horizon || query.s >= dims.states || query.g == 0 || query.t == 0 {
        return Err(Error::invalid("query indices out of range"));
    }
    let i = 2 * steps.len();
    let col = out.col_mut(i);
    col[spec.part_b().start + query.s] = T::one();
    write_pos(col, spec, query.g, query.h, query.t, true, i + 1);
    Ok(out)
}
