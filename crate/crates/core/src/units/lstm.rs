use rand::Rng;

use super::{matrix, Regime};
use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Standard LSTM layer, gate blocks ordered `[input, forget, output, cell]`.
/// Both matmuls run inside the time loop.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub d_in: usize,
    pub d: usize,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmLayer {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, prefix: &str, d_in: usize, d: usize, rng: &mut R) -> Result<Self> {
        let w_x = matrix(store, format!("{prefix}.w_x"), d_in, 4 * d, rng)?;
        let w_h = matrix(store, format!("{prefix}.w_h"), d, 4 * d, rng)?;
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[4 * d]))?;
        Ok(LstmLayer { d_in, d, w_x, w_h, b })
    }

    pub fn zero_state<F: Scalar>(&self, tape: &mut Tape<F>, batch: usize) -> LstmState {
        let z = tape.constant(&Tensor::zeros(&[batch, self.d]));
        LstmState { h: z, c: z }
    }

    /// Runs the recurrence over a time-major `(T·B)×d_in` input; returns the
    /// `(T·B)×d` hidden states and the final state. Dropout touches only the
    /// input (vertical) connection.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
        init: LstmState,
        batch: usize,
        regime: Regime,
    ) -> Result<(Var, LstmState)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.d_in || batch == 0 || s[0] % batch != 0 {
            return Err(dim_err("lstm input", &s, &[batch, self.d_in]));
        }
        let steps = s[0] / batch;
        let mut state = init;
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let x_t = tape.slice(x, 0, t * batch, batch)?;
            state = self.step(tape, bound, x_t, state, regime)?;
            outputs.push(state.h);
        }
        let out = if outputs.len() == 1 { outputs[0] } else { tape.concat(&outputs, 0)? };
        Ok((out, state))
    }

    pub fn step<F: Scalar>(&self, tape: &mut Tape<F>, bound: &Bound, x_t: Var, state: LstmState, regime: Regime) -> Result<LstmState> {
        let d = self.d;
        let xd = tape.dropout(x_t, regime.dropout, regime.training)?;
        let from_x = tape.matmul(xd, bound[self.w_x])?;
        let from_h = tape.matmul(state.h, bound[self.w_h])?;
        let sum = tape.add(from_x, from_h)?;
        let gates = tape.add_bias(sum, bound[self.b])?;
        let parts = tape.split(gates, 1, &[d, d, d, d])?;
        let i = tape.sigmoid(parts[0]);
        let f = tape.sigmoid(parts[1]);
        let o = tape.sigmoid(parts[2]);
        let g = tape.tanh(parts[3]);
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}
