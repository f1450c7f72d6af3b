use rand::Rng;

use super::{check_input, highway, matrix, maybe_ln, project, zeros, LnParams, Regime};
use crate::autodiff::{Direction, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Scalar;

/// Bidirectional weakly-recurrent encoder layer.
///
/// One fused projection `LN(x W)` yields `[→x, ←x, →g, ←g, z]` with widths
/// `[d/2, d/2, d/2, d/2, d]`; the `z` slice is absent without highway.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub d: usize,
    pub w: ParamId,
    pub ln: Option<LnParams>,
    pub highway: bool,
}

/// Directional scan states and final output of one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct EncoderStates {
    pub forward: Var,
    pub backward: Var,
    pub output: Var,
}

impl EncoderLayer {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d: usize,
        layer_norm: bool,
        highway: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if d < 2 || d % 2 != 0 {
            return Err(Error::Config(format!("encoder width must be even, got {d}")));
        }
        let width = if highway { 3 * d } else { 2 * d };
        let w = matrix(store, format!("{prefix}.w"), d, width, rng)?;
        let ln = maybe_ln(store, &format!("{prefix}.ln"), width, layer_norm)?;
        Ok(EncoderLayer { d, w, ln, highway })
    }

    pub fn fused_width(&self) -> usize {
        if self.highway {
            3 * self.d
        } else {
            2 * self.d
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
        batch: usize,
        valid: Option<&[bool]>,
        regime: Regime,
    ) -> Result<Var> {
        Ok(self.forward_states(tape, bound, x, batch, valid, regime)?.output)
    }

    /// `valid` marks real (non-padding) rows; the backward scan restarts from
    /// the zero state at padding so padded steps never reach real ones.
    pub fn forward_states<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
        batch: usize,
        valid: Option<&[bool]>,
        regime: Regime,
    ) -> Result<EncoderStates> {
        check_input(tape, x, self.d, batch)?;
        let half = self.d / 2;
        let fused = project(tape, bound, x, self.w, self.ln.as_ref(), regime)?;
        let mut widths = vec![half; 4];
        if self.highway {
            widths.push(self.d);
        }
        let parts = tape.split(fused, 1, &widths)?;
        let h0 = zeros(tape, batch, half);
        let forward = tape.scan(parts[0], parts[2], h0, batch, Direction::Forward, valid)?;
        let backward = tape.scan(parts[1], parts[3], h0, batch, Direction::Backward, valid)?;
        let candidate = tape.concat(&[forward, backward], 1)?;
        let output = if self.highway {
            highway(tape, candidate, x, parts[4])?
        } else {
            candidate
        };
        Ok(EncoderStates { forward, backward, output })
    }
}
