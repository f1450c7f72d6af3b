use rand::Rng;

use super::{check_input, highway, matrix, maybe_ln, project, zeros, LnParams, MlpAttention, Regime};
use crate::autodiff::{Direction, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Scalar;

/// Attention sub-block of a decoder layer: the MLP attention plus the
/// projection `W_c` applied to its scaled context.
#[derive(Clone, Debug)]
pub struct DecoderAttention {
    pub w_c: ParamId,
    pub ln_c: Option<LnParams>,
    pub mlp: MlpAttention,
}

/// Unidirectional weakly-recurrent decoder layer.
///
/// `[ỹ, g, z] = LN(y W)`, `s̃ = scan(ỹ, g)`, `c = attn(s̃, H) / √d`,
/// `o = tanh(LN(s̃ W_s) + LN(c W_c))`, `s = (1 - σ(z)) ⊙ o + σ(z) ⊙ y`.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub d: usize,
    pub w: ParamId,
    pub ln: Option<LnParams>,
    pub w_s: ParamId,
    pub ln_s: Option<LnParams>,
    pub attention: Option<DecoderAttention>,
    pub highway: bool,
}

/// Encoder output as seen by one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerMemory<'a> {
    /// `(Tk·B)×d` last encoder layer output.
    pub states: Var,
    /// Precomputed `LN(H W_ah)` for this layer's attention.
    pub keys: Var,
    pub batch: usize,
    pub valid: &'a [bool],
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutputs {
    /// Scan states `s̃`.
    pub scan: Var,
    pub output: Var,
    pub weights: Option<Var>,
}

impl DecoderLayer {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d: usize,
        layer_norm: bool,
        attention: bool,
        highway: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if d < 2 {
            return Err(Error::Config(format!("decoder width must be at least 2, got {d}")));
        }
        let width = if highway { 3 * d } else { 2 * d };
        let w = matrix(store, format!("{prefix}.w"), d, width, rng)?;
        let ln = maybe_ln(store, &format!("{prefix}.ln"), width, layer_norm)?;
        let w_s = matrix(store, format!("{prefix}.w_s"), d, d, rng)?;
        let ln_s = maybe_ln(store, &format!("{prefix}.ln_s"), d, layer_norm)?;
        let attention = if attention {
            let w_c = matrix(store, format!("{prefix}.w_c"), d, d, rng)?;
            let ln_c = maybe_ln(store, &format!("{prefix}.ln_c"), d, layer_norm)?;
            let mlp = MlpAttention::new(store, &format!("{prefix}.attn"), d, layer_norm, rng)?;
            Some(DecoderAttention { w_c, ln_c, mlp })
        } else {
            None
        };
        Ok(DecoderLayer { d, w, ln, w_s, ln_s, attention, highway })
    }

    /// Teacher-forced forward over all target steps at once.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        y: Var,
        memory: Option<LayerMemory<'_>>,
        batch: usize,
        regime: Regime,
    ) -> Result<DecoderOutputs> {
        let h0 = zeros(tape, batch, self.d);
        self.run(tape, bound, y, h0, memory, batch, regime)
    }

    /// One incremental step: `y_t` and `s̃_prev` are `B×d`. Returns
    /// `(s_t, s̃_t)`.
    pub fn step<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        y_t: Var,
        scan_prev: Var,
        memory: Option<LayerMemory<'_>>,
        regime: Regime,
    ) -> Result<(Var, Var)> {
        let batch = tape.shape(y_t)[0];
        let out = self.run(tape, bound, y_t, scan_prev, memory, batch, regime)?;
        Ok((out.output, out.scan))
    }

    #[allow(clippy::too_many_arguments)]
    fn run<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        y: Var,
        h0: Var,
        memory: Option<LayerMemory<'_>>,
        batch: usize,
        regime: Regime,
    ) -> Result<DecoderOutputs> {
        check_input(tape, y, self.d, batch)?;
        let d = self.d;
        let fused = project(tape, bound, y, self.w, self.ln.as_ref(), regime)?;
        let widths: &[usize] = if self.highway { &[d, d, d] } else { &[d, d] };
        let parts = tape.split(fused, 1, widths)?;
        let scan = tape.scan(parts[0], parts[1], h0, batch, Direction::Forward, None)?;
        let hidden = project(tape, bound, scan, self.w_s, self.ln_s.as_ref(), regime)?;
        let (pre, weights) = match &self.attention {
            Some(att) => {
                let mem = memory.ok_or_else(|| Error::Contract("decoder layer with attention needs encoder memory".into()))?;
                let out = att.mlp.attend(tape, bound, scan, mem.keys, mem.states, mem.batch, mem.valid, regime)?;
                let c = tape.scale(out.context, F::from_f64(1.0 / (d as f64).sqrt()));
                let cproj = project(tape, bound, c, att.w_c, att.ln_c.as_ref(), regime)?;
                (tape.add(hidden, cproj)?, Some(out.weights))
            }
            None => (hidden, None),
        };
        let o = tape.tanh(pre);
        let output = if self.highway {
            highway(tape, o, y, parts[2])?
        } else {
            o
        };
        Ok(DecoderOutputs { scan, output, weights })
    }
}
