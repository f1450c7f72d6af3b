use rand::Rng;

use super::{matrix, maybe_ln, project, LnParams, Regime};
use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Layer-normalized MLP attention:
/// `score_ij = v · tanh(LN(s_i W_as) + LN(h_j W_ah))`.
#[derive(Clone, Debug)]
pub struct MlpAttention {
    pub d: usize,
    pub w_as: ParamId,
    pub ln_as: Option<LnParams>,
    pub w_ah: ParamId,
    pub ln_ah: Option<LnParams>,
    pub v: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `(Tq·B)×d` weighted sums of memory rows.
    pub context: Var,
    /// `(Tq·B)×Tk` attention distributions.
    pub weights: Var,
}

impl MlpAttention {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, prefix: &str, d: usize, layer_norm: bool, rng: &mut R) -> Result<Self> {
        let w_as = matrix(store, format!("{prefix}.w_as"), d, d, rng)?;
        let ln_as = maybe_ln(store, &format!("{prefix}.ln_as"), d, layer_norm)?;
        let w_ah = matrix(store, format!("{prefix}.w_ah"), d, d, rng)?;
        let ln_ah = maybe_ln(store, &format!("{prefix}.ln_ah"), d, layer_norm)?;
        let v = store.add(format!("{prefix}.v"), Tensor::zeros(&[d]))?;
        Ok(MlpAttention { d, w_as, ln_as, w_ah, ln_ah, v })
    }

    /// Memory-side term `LN(H W_ah)`; computed once per source batch and
    /// shared by every target step.
    pub fn keys<F: Scalar>(&self, tape: &mut Tape<F>, bound: &Bound, memory: Var, regime: Regime) -> Result<Var> {
        project(tape, bound, memory, self.w_ah, self.ln_ah.as_ref(), regime)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn attend<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        query: Var,
        keys: Var,
        memory: Var,
        batch: usize,
        src_valid: &[bool],
        regime: Regime,
    ) -> Result<AttentionOutput> {
        let rows = tape.shape(query)[0];
        let tk = tape.shape(memory)[0] / batch;
        if src_valid.len() != tk * batch || tape.shape(keys) != tape.shape(memory) {
            return Err(dim_err("attention memory", tape.shape(memory), &[src_valid.len()]));
        }
        let q = project(tape, bound, query, self.w_as, self.ln_as.as_ref(), regime)?;
        let scores = tape.pair_scores(q, keys, bound[self.v], batch)?;
        let mask = attention_mask(src_valid, batch, rows);
        let weights = tape.softmax_rows(scores, Some(&mask))?;
        let context = tape.attend(weights, memory, batch)?;
        Ok(AttentionOutput { context, weights })
    }
}

/// Expands a time-major source mask (`Tk·batch`) to a `rows×Tk` score mask.
pub fn attention_mask(src_valid: &[bool], batch: usize, rows: usize) -> Vec<bool> {
    let tk = src_valid.len() / batch;
    let mut mask = Vec::with_capacity(rows * tk);
    for r in 0..rows {
        let b = r % batch;
        mask.extend((0..tk).map(|j| src_valid[j * batch + b]));
    }
    mask
}

/// One-shot attention of `queries` over `memory` for a single sequence pair.
pub fn mlp_attention<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    params: &MlpAttention,
    queries: Var,
    memory: Var,
    src_valid: &[bool],
) -> Result<AttentionOutput> {
    let keys = params.keys(tape, bound, memory, Regime::inference())?;
    params.attend(tape, bound, queries, keys, memory, 1, src_valid, Regime::inference())
}
