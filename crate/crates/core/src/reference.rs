//! Per-timestep reference implementations of the layers.
//!
//! These evaluate one row at a time with elementwise tape ops and never call
//! the fused scan, pairwise-score or attend kernels, so they serve as
//! independent oracles for the time-parallel paths.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::Bound;
use crate::tensor::{Scalar, Tensor};
use crate::units::{EncoderLayer, LnParams, MlpAttention};
use crate::units::DecoderLayer;

fn proj<F: Scalar>(tape: &mut Tape<F>, bound: &Bound, x: Var, w: crate::params::ParamId, ln: Option<&LnParams>) -> Result<Var> {
    let y = tape.matmul(x, bound[w])?;
    match ln {
        Some(ln) => ln.apply(tape, bound, y),
        None => Ok(y),
    }
}

/// `(1 - σ(g)) ⊙ prev + σ(g) ⊙ x` from elementwise ops.
pub fn scan_step<F: Scalar>(tape: &mut Tape<F>, x: Var, g: Var, prev: Var) -> Result<Var> {
    let s = tape.sigmoid(g);
    let keep = tape.one_minus(s);
    let a = tape.mul(keep, prev)?;
    let b = tape.mul(s, x)?;
    tape.add(a, b)
}

/// Loop form of the gated scan over a single `T×k` sequence.
pub fn scan_loop<F: Scalar>(tape: &mut Tape<F>, x: Var, g: Var, h0: Var, reverse: bool) -> Result<Vec<Var>> {
    let steps = tape.shape(x)[0];
    let mut out: Vec<Option<Var>> = vec![None; steps];
    let mut prev = h0;
    let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
    for t in order {
        let xt = tape.slice(x, 0, t, 1)?;
        let gt = tape.slice(g, 0, t, 1)?;
        prev = scan_step(tape, xt, gt, prev)?;
        out[t] = Some(prev);
    }
    Ok(out.into_iter().map(|v| v.expect("every step visited")).collect())
}

fn highway<F: Scalar>(tape: &mut Tape<F>, cand: Var, input: Var, z: Var) -> Result<Var> {
    let s = tape.sigmoid(z);
    let keep = tape.one_minus(s);
    let a = tape.mul(keep, cand)?;
    let b = tape.mul(s, input)?;
    tape.add(a, b)
}

/// Encoder layer on one unpadded `T×d` sequence, projecting each timestep
/// separately. Returns the `T×d` output.
pub fn encoder_layer<F: Scalar>(tape: &mut Tape<F>, bound: &Bound, layer: &EncoderLayer, x: Var) -> Result<Var> {
    let steps = tape.shape(x)[0];
    let half = layer.d / 2;
    let mut slices = Vec::with_capacity(steps);
    for t in 0..steps {
        let row = tape.slice(x, 0, t, 1)?;
        let fused = proj(tape, bound, row, layer.w, layer.ln.as_ref())?;
        let mut widths = vec![half; 4];
        if layer.highway {
            widths.push(layer.d);
        }
        slices.push((row, tape.split(fused, 1, &widths)?));
    }
    let zero = tape.constant(&Tensor::zeros(&[1, half]));
    let mut fwd = Vec::with_capacity(steps);
    let mut prev = zero;
    for (_, p) in &slices {
        prev = scan_step(tape, p[0], p[2], prev)?;
        fwd.push(prev);
    }
    let mut bwd = vec![zero; steps];
    let mut prev = zero;
    for t in (0..steps).rev() {
        let p = &slices[t].1;
        prev = scan_step(tape, p[1], p[3], prev)?;
        bwd[t] = prev;
    }
    let mut rows = Vec::with_capacity(steps);
    for t in 0..steps {
        let cand = tape.concat(&[fwd[t], bwd[t]], 1)?;
        let (row, p) = &slices[t];
        rows.push(if layer.highway { highway(tape, cand, *row, p[4])? } else { cand });
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        tape.concat(&rows, 0)
    }
}

/// Attention of a single `1×d` query over an unpadded `Tk×d` memory, using
/// per-candidate elementwise scores and a matmul for the weighted sum.
/// Returns `(context, weights)`.
pub fn attention_step<F: Scalar>(tape: &mut Tape<F>, bound: &Bound, att: &MlpAttention, query: Var, memory: Var) -> Result<(Var, Var)> {
    let tk = tape.shape(memory)[0];
    let d = att.d;
    let q = proj(tape, bound, query, att.w_as, att.ln_as.as_ref())?;
    let v = tape.reshape(bound[att.v], &[1, d])?;
    let mut scores = Vec::with_capacity(tk);
    for j in 0..tk {
        let hj = tape.slice(memory, 0, j, 1)?;
        let kj = proj(tape, bound, hj, att.w_ah, att.ln_ah.as_ref())?;
        let pre = tape.add(q, kj)?;
        let u = tape.tanh(pre);
        let vu = tape.mul(v, u)?;
        scores.push(tape.sum(vu));
    }
    let flat = if tk == 1 { scores[0] } else { tape.concat(&scores, 0)? };
    let row = tape.reshape(flat, &[1, tk])?;
    let weights = tape.softmax_rows(row, None)?;
    let context = tape.matmul(weights, memory)?;
    Ok((context, weights))
}

/// Decoder layer on one unpadded `T×d` target sequence, step by step.
pub fn decoder_layer<F: Scalar>(tape: &mut Tape<F>, bound: &Bound, layer: &DecoderLayer, y: Var, memory: Option<Var>) -> Result<Var> {
    let d = layer.d;
    let steps = tape.shape(y)[0];
    let mut prev = tape.constant(&Tensor::zeros(&[1, d]));
    let mut rows = Vec::with_capacity(steps);
    for t in 0..steps {
        let yt = tape.slice(y, 0, t, 1)?;
        let fused = proj(tape, bound, yt, layer.w, layer.ln.as_ref())?;
        let widths: &[usize] = if layer.highway { &[d, d, d] } else { &[d, d] };
        let p = tape.split(fused, 1, widths)?;
        prev = scan_step(tape, p[0], p[1], prev)?;
        let hidden = proj(tape, bound, prev, layer.w_s, layer.ln_s.as_ref())?;
        let pre = match (&layer.attention, memory) {
            (Some(att), Some(mem)) => {
                let (ctx, _) = attention_step(tape, bound, &att.mlp, prev, mem)?;
                let c = tape.scale(ctx, F::from_f64(1.0 / (d as f64).sqrt()));
                let cp = proj(tape, bound, c, att.w_c, att.ln_c.as_ref())?;
                tape.add(hidden, cp)?
            }
            _ => hidden,
        };
        let o = tape.tanh(pre);
        rows.push(if layer.highway { highway(tape, o, yt, p[2])? } else { o });
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        tape.concat(&rows, 0)
    }
}
