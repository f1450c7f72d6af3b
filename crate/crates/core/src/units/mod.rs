//! Layers of the weakly-recurrent architecture and the LSTM baseline.
//!
//! All sequence tensors are time-major: a batch of `B` sequences of length
//! `T` is a `(T·B)×width` matrix whose row `t·B + b` holds step `t` of
//! sequence `b`. Parameter matmuls therefore run once over all timesteps.

mod attention;
mod decoder;
mod encoder;
mod lstm;

use rand::Rng;

pub use attention::{attention_mask, mlp_attention, AttentionOutput, MlpAttention};
pub use decoder::{DecoderAttention, DecoderLayer, DecoderOutputs, LayerMemory};
pub use encoder::{EncoderLayer, EncoderStates};
pub use lstm::{LstmLayer, LstmState};

use crate::autodiff::{Direction, Tape, Var};
use crate::error::{dim_err, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Dropout setting for one pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Regime {
    pub dropout: f64,
    pub training: bool,
}

impl Regime {
    pub fn train(dropout: f64) -> Self {
        Regime { dropout, training: true }
    }

    pub fn inference() -> Self {
        Regime { dropout: 0.0, training: false }
    }
}

/// Gain and bias of one layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct LnParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LnParams {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, width: usize) -> Result<Self> {
        Ok(LnParams {
            gain: store.add(format!("{prefix}.gain"), Tensor::ones(&[width]))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[width]))?,
        })
    }

    pub fn apply<F: Scalar>(&self, tape: &mut Tape<F>, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound[self.gain], bound[self.bias], F::from_f64(LN_EPS))
    }
}

pub(crate) fn maybe_ln<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, width: usize, enabled: bool) -> Result<Option<LnParams>> {
    enabled.then(|| LnParams::new(store, prefix, width)).transpose()
}

/// `LN(dropout(x) · W)`, or the bare product when `ln` is absent.
pub fn project<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    x: Var,
    w: ParamId,
    ln: Option<&LnParams>,
    regime: Regime,
) -> Result<Var> {
    let x = tape.dropout(x, regime.dropout, regime.training)?;
    let y = tape.matmul(x, bound[w])?;
    match ln {
        Some(ln) => ln.apply(tape, bound, y),
        None => Ok(y),
    }
}

/// `(1 - σ(z)) ⊙ candidate + σ(z) ⊙ input`.
pub fn highway<F: Scalar>(tape: &mut Tape<F>, candidate: Var, input: Var, z: Var) -> Result<Var> {
    let gate = tape.sigmoid(z);
    let carry = tape.one_minus(gate);
    let a = tape.mul(carry, candidate)?;
    let b = tape.mul(gate, input)?;
    tape.add(a, b)
}

/// Dynamic average pooling: `h_t = (1 - σ(g_t)) ⊙ h_{t-1} + σ(g_t) ⊙ x_t`
/// over a time-major batch, starting from `h0` (`batch×k`).
pub fn dynamic_average_pool<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    g: Var,
    h0: Var,
    batch: usize,
    direction: Direction,
) -> Result<Var> {
    tape.scan(x, g, h0, batch, direction, None)
}

pub(crate) fn zeros<F: Scalar>(tape: &mut Tape<F>, rows: usize, cols: usize) -> Var {
    tape.constant(&Tensor::zeros(&[rows, cols]))
}

pub(crate) fn check_input<F: Scalar>(tape: &Tape<F>, x: Var, width: usize, batch: usize) -> Result<usize> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != width || batch == 0 || s[0] % batch != 0 {
        return Err(dim_err("layer input", s, &[batch, width]));
    }
    Ok(s[0] / batch)
}

pub(crate) fn matrix<F: Scalar, R: Rng>(store: &mut ParamStore<F>, name: String, rows: usize, cols: usize, rng: &mut R) -> Result<ParamId> {
    store.add_matrix(name, rows, cols, rng)
}
