use rand::Rng;

use super::kernels::{self, sigmoid};
use super::{Direction, GradSink, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    OneMinus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

pub(crate) enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Binary { op: BinaryOp, a: Var, b: Var },
    Unary { op: UnaryOp, x: Var },
    Scale { x: Var, c: F },
    AddBias { x: Var, bias: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Softmax { x: Var, cols: usize },
    Slice { x: Var, outer: usize, axis_len: usize, inner: usize, start: usize, len: usize },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    Dropout { x: Var, mask: Vec<F> },
    Sum { x: Var },
    Reshape { x: Var },
    Gather { table: Var, ids: Vec<usize>, cols: usize },
    Scan { x: Var, g: Var, h0: Var, batch: usize, dir: Direction, valid: Option<Vec<bool>> },
    PairScores { q: Var, k: Var, v: Var, batch: usize, tk: usize },
    Attend { w: Var, mem: Var, batch: usize, tk: usize },
    CrossEntropy { logits: Var, gold: Vec<Option<usize>>, probs: Vec<F>, count: usize },
}

impl<F: Scalar> Op<F> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Binary { .. } => "binary",
            Op::Unary { .. } => "unary",
            Op::Scale { .. } => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Dropout { .. } => "dropout",
            Op::Sum { .. } => "sum",
            Op::Reshape { .. } => "reshape",
            Op::Gather { .. } => "gather",
            Op::Scan { .. } => "scan",
            Op::PairScores { .. } => "pair_scores",
            Op::Attend { .. } => "attend",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    /// Propagates `gout` (gradient of this node's output `out`) into the
    /// gradient slots of the inputs.
    pub fn backward(&self, values: &[Vec<F>], out: &[F], gout: &[F], sink: &mut GradSink<'_, F>) {
        match self {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if sink.wants(*a) {
                    let bt = kernels::transpose(&values[b.0], k, n);
                    let da = kernels::matmul(gout, &bt, m, n, k);
                    sink.add(*a, &da);
                }
                if sink.wants(*b) {
                    let at = kernels::transpose(&values[a.0], m, k);
                    let db = kernels::matmul(&at, gout, k, m, n);
                    sink.add(*b, &db);
                }
            }
            Op::Binary { op, a, b } => {
                let (av, bv) = (&values[a.0], &values[b.0]);
                match op {
                    BinaryOp::Add => {
                        sink.add(*a, gout);
                        sink.add(*b, gout);
                    }
                    BinaryOp::Sub => {
                        sink.add(*a, gout);
                        if let Some(g) = sink.slot(*b) {
                            for (gi, &d) in g.iter_mut().zip(gout) {
                                *gi = *gi - d;
                            }
                        }
                    }
                    BinaryOp::Mul => {
                        if sink.wants(*a) {
                            let da: Vec<F> = gout.iter().zip(bv).map(|(&d, &y)| d * y).collect();
                            sink.add(*a, &da);
                        }
                        if sink.wants(*b) {
                            let db: Vec<F> = gout.iter().zip(av).map(|(&d, &x)| d * x).collect();
                            sink.add(*b, &db);
                        }
                    }
                }
            }
            Op::Unary { op, x } => {
                if let Some(g) = sink.slot(*x) {
                    let one = F::one();
                    for ((gi, &d), &y) in g.iter_mut().zip(gout).zip(out) {
                        let local = match op {
                            UnaryOp::Sigmoid => y * (one - y),
                            UnaryOp::Tanh => one - y * y,
                            UnaryOp::OneMinus => -one,
                        };
                        *gi = *gi + d * local;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(g) = sink.slot(*x) {
                    for (gi, &d) in g.iter_mut().zip(gout) {
                        *gi = *gi + d * *c;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                sink.add(*x, gout);
                if let Some(g) = sink.slot(*bias) {
                    let n = g.len();
                    for row in gout.chunks(n) {
                        kernels::add_assign(g, row);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = &values[gain.0];
                let k = gv.len();
                if sink.wants(*x) {
                    let kf = F::from_f64(k as f64);
                    let mut dx = vec![F::zero(); gout.len()];
                    for (r, ((drow, xh), dxr)) in gout
                        .chunks(k)
                        .zip(xhat.chunks(k))
                        .zip(dx.chunks_mut(k))
                        .enumerate()
                    {
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for c in 0..k {
                            let dxh = drow[c] * gv[c];
                            mean_d = mean_d + dxh;
                            mean_dx = mean_dx + dxh * xh[c];
                        }
                        mean_d = mean_d / kf;
                        mean_dx = mean_dx / kf;
                        for c in 0..k {
                            let dxh = drow[c] * gv[c];
                            dxr[c] = rstd[r] * (dxh - mean_d - xh[c] * mean_dx);
                        }
                    }
                    sink.add(*x, &dx);
                }
                if let Some(g) = sink.slot(*gain) {
                    for (drow, xh) in gout.chunks(k).zip(xhat.chunks(k)) {
                        for c in 0..k {
                            g[c] = g[c] + drow[c] * xh[c];
                        }
                    }
                }
                if let Some(g) = sink.slot(*bias) {
                    for drow in gout.chunks(k) {
                        kernels::add_assign(g, drow);
                    }
                }
            }
            Op::Softmax { x, cols } => {
                if let Some(g) = sink.slot(*x) {
                    for ((grow, drow), yrow) in g.chunks_mut(*cols).zip(gout.chunks(*cols)).zip(out.chunks(*cols)) {
                        let dot: F = drow.iter().zip(yrow).map(|(&d, &y)| d * y).sum();
                        for c in 0..*cols {
                            grow[c] = grow[c] + yrow[c] * (drow[c] - dot);
                        }
                    }
                }
            }
            Op::Slice { x, outer, axis_len, inner, start, len } => {
                if let Some(g) = sink.slot(*x) {
                    for o in 0..*outer {
                        let src = &gout[o * len * inner..(o + 1) * len * inner];
                        let dst_off = (o * axis_len + start) * inner;
                        kernels::add_assign(&mut g[dst_off..dst_off + len * inner], src);
                    }
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(v, len) in parts {
                    if let Some(g) = sink.slot(v) {
                        for o in 0..*outer {
                            let src_off = (o * total + offset) * inner;
                            kernels::add_assign(
                                &mut g[o * len * inner..(o + 1) * len * inner],
                                &gout[src_off..src_off + len * inner],
                            );
                        }
                    }
                    offset += len;
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(g) = sink.slot(*x) {
                    for ((gi, &d), &m) in g.iter_mut().zip(gout).zip(mask) {
                        *gi = *gi + d * m;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(g) = sink.slot(*x) {
                    for gi in g.iter_mut() {
                        *gi = *gi + gout[0];
                    }
                }
            }
            Op::Reshape { x } => sink.add(*x, gout),
            Op::Gather { table, ids, cols } => {
                if let Some(g) = sink.slot(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::add_assign(&mut g[id * cols..(id + 1) * cols], &gout[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Scan { x, g, h0, batch, dir, valid } => {
                scan_backward(values, out, gout, sink, (*x, *g, *h0), *batch, *dir, valid.as_deref());
            }
            Op::PairScores { q, k, v, batch, tk } => {
                pair_scores_backward(values, gout, sink, (*q, *k, *v), *batch, *tk);
            }
            Op::Attend { w, mem, batch, tk } => {
                let (b, tk) = (*batch, *tk);
                let wv = &values[w.0];
                let mv = &values[mem.0];
                let d = mv.len() / (tk * b);
                let rows = wv.len() / tk;
                if sink.wants(*w) {
                    let mut dw = vec![F::zero(); wv.len()];
                    for r in 0..rows {
                        let bi = r % b;
                        let dr = &gout[r * d..(r + 1) * d];
                        for j in 0..tk {
                            let mr = &mv[(j * b + bi) * d..(j * b + bi + 1) * d];
                            dw[r * tk + j] = dr.iter().zip(mr).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    sink.add(*w, &dw);
                }
                if let Some(gm) = sink.slot(*mem) {
                    for r in 0..rows {
                        let bi = r % b;
                        let dr = &gout[r * d..(r + 1) * d];
                        for j in 0..tk {
                            let a = wv[r * tk + j];
                            let mrow = &mut gm[(j * b + bi) * d..(j * b + bi + 1) * d];
                            for c in 0..d {
                                mrow[c] = mrow[c] + a * dr[c];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, gold, probs, count } => {
                if let Some(g) = sink.slot(*logits) {
                    let v = probs.len() / gold.len();
                    let scale = gout[0] / F::from_f64(*count as f64);
                    for (r, target) in gold.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for c in 0..v {
                            let onehot = if c == t { F::one() } else { F::zero() };
                            g[r * v + c] = g[r * v + c] + (probs[r * v + c] - onehot) * scale;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn scan_backward<F: Scalar>(
    values: &[Vec<F>],
    out: &[F],
    gout: &[F],
    sink: &mut GradSink<'_, F>,
    (x, g, h0): (Var, Var, Var),
    batch: usize,
    dir: Direction,
    valid: Option<&[bool]>,
) {
    let (xv, gv, h0v) = (&values[x.0], &values[g.0], &values[h0.0]);
    let k = h0v.len() / batch;
    let steps = xv.len() / (batch * k);
    let mut dx = vec![F::zero(); xv.len()];
    let mut dg = vec![F::zero(); gv.len()];
    let mut dh0 = vec![F::zero(); h0v.len()];
    let mut carry = vec![F::zero(); h0v.len()];
    let order: Vec<usize> = match dir {
        Direction::Forward => (0..steps).collect(),
        Direction::Backward => (0..steps).rev().collect(),
    };
    let one = F::one();
    for (pos, &t) in order.iter().enumerate().rev() {
        for b in 0..batch {
            let row = t * batch + b;
            let cr = &mut carry[b * k..(b + 1) * k];
            if valid.is_some_and(|m| !m[row]) {
                for c in 0..k {
                    let gh = gout[row * k + c] + cr[c];
                    dh0[b * k + c] = dh0[b * k + c] + gh;
                    cr[c] = F::zero();
                }
                continue;
            }
            let prev: &[F] = if pos == 0 {
                &h0v[b * k..(b + 1) * k]
            } else {
                let pr = order[pos - 1] * batch + b;
                &out[pr * k..(pr + 1) * k]
            };
            for c in 0..k {
                let i = row * k + c;
                let gh = gout[i] + cr[c];
                let s = sigmoid(gv[i]);
                dx[i] = gh * s;
                dg[i] = gh * (xv[i] - prev[c]) * s * (one - s);
                cr[c] = gh * (one - s);
            }
        }
    }
    kernels::add_assign(&mut dh0, &carry);
    sink.add(x, &dx);
    sink.add(g, &dg);
    sink.add(h0, &dh0);
}

fn pair_scores_backward<F: Scalar>(
    values: &[Vec<F>],
    gout: &[F],
    sink: &mut GradSink<'_, F>,
    (q, k, v): (Var, Var, Var),
    batch: usize,
    tk: usize,
) {
    let (qv, kv, vv) = (&values[q.0], &values[k.0], &values[v.0]);
    let d = vv.len();
    let rows = qv.len() / d;
    let mut dq = vec![F::zero(); qv.len()];
    let mut dk = vec![F::zero(); kv.len()];
    let mut dv = vec![F::zero(); d];
    let one = F::one();
    for r in 0..rows {
        let b = r % batch;
        let qr = &qv[r * d..(r + 1) * d];
        for j in 0..tk {
            let gs = gout[r * tk + j];
            let kr_off = (j * batch + b) * d;
            let kr = &kv[kr_off..kr_off + d];
            for c in 0..d {
                let u = (qr[c] + kr[c]).tanh();
                dv[c] = dv[c] + gs * u;
                let t = gs * vv[c] * (one - u * u);
                dq[r * d + c] = dq[r * d + c] + t;
                dk[kr_off + c] = dk[kr_off + c] + t;
            }
        }
    }
    sink.add(q, &dq);
    sink.add(k, &dk);
    sink.add(v, &dv);
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(dim_err(op, a, b));
    }
    Ok(())
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
fn around_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Contract(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("rank >= 1");
    (shape.iter().product::<usize>() / cols, cols)
}

impl<F: Scalar> Tape<F> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.values(a), self.values(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        same_shape("elementwise", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.values(a), self.values(b));
        let out: Vec<F> = match op {
            BinaryOp::Add => av.iter().zip(bv).map(|(&x, &y)| x + y).collect(),
            BinaryOp::Sub => av.iter().zip(bv).map(|(&x, &y)| x - y).collect(),
            BinaryOp::Mul => av.iter().zip(bv).map(|(&x, &y)| x * y).collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, Op::Binary { op, a, b }, rg))
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let out: Vec<F> = self
            .values(x)
            .iter()
            .map(|&v| match op {
                UnaryOp::Sigmoid => sigmoid(v),
                UnaryOp::Tanh => v.tanh(),
                UnaryOp::OneMinus => F::one() - v,
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(shape, out, Op::Unary { op, x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::OneMinus, x)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.values(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(shape, out, Op::Scale { x, c }, rg)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let (_, n) = rows_cols(&sx);
        if sb != [n] {
            return Err(dim_err("add_bias", &sx, &sb));
        }
        let bv = self.values(bias);
        let mut out = self.values(x).to_vec();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o = *o + b;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(sx, out, Op::AddBias { x, bias }, rg))
    }

    /// Row-wise layer normalization followed by `⊙gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (rows, k) = rows_cols(&sx);
        if k < 2 {
            return Err(Error::Config(format!("layer_norm needs row width >= 2, got {k}")));
        }
        same_shape("layer_norm gain", self.shape(gain), &[k])?;
        same_shape("layer_norm bias", self.shape(bias), &[k])?;
        let (xv, gv, bv) = (self.values(x), self.values(gain), self.values(bias));
        let kf = F::from_f64(k as f64);
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * k..(r + 1) * k];
            let mean = row.iter().copied().sum::<F>() / kf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / kf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..k {
                let h = (row[c] - mean) * rs;
                xhat[r * k + c] = h;
                out[r * k + c] = h * gv[c] + bv[c];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(sx, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Row softmax. `valid[i]` false forces probability zero at that entry.
    pub fn softmax_rows(&mut self, x: Var, valid: Option<&[bool]>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&sx);
        if let Some(m) = valid {
            if m.len() != rows * cols {
                return Err(dim_err("softmax mask", &sx, &[m.len()]));
            }
        }
        let xv = self.values(x);
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let ok = |c: usize| valid.map_or(true, |m| m[r * cols + c]);
            let row = &xv[r * cols..(r + 1) * cols];
            let max = (0..cols)
                .filter(|&c| ok(c))
                .map(|c| row[c])
                .fold(None, |acc: Option<F>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or(Error::InvalidMask { row: r })?;
            let mut total = F::zero();
            for c in 0..cols {
                if ok(c) {
                    let e = (row[c] - max).exp();
                    out[r * cols + c] = e;
                    total = total + e;
                }
            }
            for c in 0..cols {
                out[r * cols + c] = out[r * cols + c] / total;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(sx, out, Op::Softmax { x, cols }, rg))
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (outer, axis_len, inner) = around_axis(&sx, axis)?;
        if len == 0 || start + len > axis_len {
            return Err(dim_err("slice", &sx, &[start, len]));
        }
        let xv = self.values(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * axis_len + start) * inner;
            out.extend_from_slice(&xv[off..off + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape, out, Op::Slice { x, outer, axis_len, inner, start, len }, rg))
    }

    /// Splits along `axis` into consecutive pieces of the given widths.
    pub fn split(&mut self, x: Var, axis: usize, widths: &[usize]) -> Result<Vec<Var>> {
        let sx = self.shape(x).to_vec();
        let (_, axis_len, _) = around_axis(&sx, axis)?;
        if widths.iter().sum::<usize>() != axis_len || widths.contains(&0) {
            return Err(dim_err("split", &sx, widths));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(widths.len());
        for &w in widths {
            parts.push(self.slice(x, axis, start, w)?);
            start += w;
        }
        Ok(parts)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?).to_vec();
        let (outer, _, inner) = around_axis(&first, axis)?;
        let mut parts = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let (o, len, i) = around_axis(s, axis)?;
            if o != outer || i != inner || s.len() != first.len() {
                return Err(dim_err("concat", &first, s));
            }
            parts.push((v, len));
        }
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(v, len) in &parts {
                out.extend_from_slice(&self.values(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(xs);
        Ok(self.push(shape, out, Op::Concat { parts, outer, inner }, rg))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`, so inference is
    /// the identity. Returns `x` itself when inactive.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must be in [0,1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let n = self.values(x).len();
        let keep = F::from_f64(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..n)
            .map(|_| if self.rng().gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let out = self.values(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape, out, Op::Dropout { x, mask }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.values(x).iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(vec![1], vec![total], Op::Sum { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        crate::tensor::check_shape(shape)?;
        if shape.iter().product::<usize>() != self.values(x).len() {
            return Err(dim_err("reshape", self.shape(x), shape));
        }
        let out = self.values(x).to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x }, rg))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(dim_err("gather_rows", &st, &[ids.len()]));
        }
        let cols = st[1];
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= st[0]) {
            return Err(Error::Vocabulary { id: bad as u32, size: st[0] });
        }
        let tv = self.values(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(vec![ids.len(), cols], out, Op::Gather { table, ids: ids.to_vec(), cols }, rg))
    }

    /// Gated elementwise scan `h_t = (1 - σ(g_t)) ⊙ h_prev + σ(g_t) ⊙ x_t`.
    ///
    /// `x` and `g` are `(T·batch)×k` in time-major order (row `t·batch + b`),
    /// `h0` is `batch×k` and seeds the scan. Rows whose `valid` entry is false
    /// output `h0` and restart the recurrence from it.
    pub fn scan(&mut self, x: Var, g: Var, h0: Var, batch: usize, dir: Direction, valid: Option<&[bool]>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        same_shape("scan gate", &sx, self.shape(g))?;
        let (rows, k) = rows_cols(&sx);
        if batch == 0 || rows % batch != 0 || self.shape(h0) != [batch, k] {
            return Err(dim_err("scan initial state", &sx, self.shape(h0)));
        }
        if let Some(m) = valid {
            if m.len() != rows {
                return Err(dim_err("scan mask", &sx, &[m.len()]));
            }
        }
        let steps = rows / batch;
        let (xv, gv, hv) = (self.values(x), self.values(g), self.values(h0));
        let mut out = vec![F::zero(); xv.len()];
        let one = F::one();
        let order: Box<dyn Iterator<Item = usize>> = match dir {
            Direction::Forward => Box::new(0..steps),
            Direction::Backward => Box::new((0..steps).rev()),
        };
        let mut prev_t: Option<usize> = None;
        for t in order {
            for b in 0..batch {
                let row = t * batch + b;
                if valid.is_some_and(|m| !m[row]) {
                    out[row * k..(row + 1) * k].copy_from_slice(&hv[b * k..(b + 1) * k]);
                    continue;
                }
                for c in 0..k {
                    let i = row * k + c;
                    let prev = match prev_t {
                        None => hv[b * k + c],
                        Some(p) => out[(p * batch + b) * k + c],
                    };
                    let s = sigmoid(gv[i]);
                    out[i] = (one - s) * prev + s * xv[i];
                }
            }
            prev_t = Some(t);
        }
        let rg = self.any_grad(&[x, g, h0]);
        let valid = valid.map(<[bool]>::to_vec);
        Ok(self.push(sx, out, Op::Scan { x, g, h0, batch, dir, valid }, rg))
    }

    /// Additive attention scores `out[(i,b), j] = Σ_c v_c tanh(q[(i,b),c] + k[(j,b),c])`.
    ///
    /// `q` is `(Tq·batch)×d`, `k` is `(Tk·batch)×d`, both time-major; `v` has
    /// length `d`. The result is `(Tq·batch)×Tk`.
    pub fn pair_scores(&mut self, q: Var, k: Var, v: Var, batch: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let (rq, d) = rows_cols(&sq);
        let (rk, dk) = rows_cols(&sk);
        if d != dk || sv != [d] || batch == 0 || rq % batch != 0 || rk % batch != 0 {
            return Err(dim_err("pair_scores", &sq, &sk));
        }
        let tk = rk / batch;
        let (qv, kv, vv) = (self.values(q), self.values(k), self.values(v));
        let mut out = vec![F::zero(); rq * tk];
        for r in 0..rq {
            let b = r % batch;
            let qr = &qv[r * d..(r + 1) * d];
            for j in 0..tk {
                let kr = &kv[(j * batch + b) * d..(j * batch + b + 1) * d];
                let mut s = F::zero();
                for c in 0..d {
                    s = s + vv[c] * (qr[c] + kr[c]).tanh();
                }
                out[r * tk + j] = s;
            }
        }
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(vec![rq, tk], out, Op::PairScores { q, k, v, batch, tk }, rg))
    }

    /// Weighted sum of memory rows: `out[(i,b)] = Σ_j w[(i,b), j] · mem[(j,b)]`.
    pub fn attend(&mut self, w: Var, mem: Var, batch: usize) -> Result<Var> {
        let (sw, sm) = (self.shape(w).to_vec(), self.shape(mem).to_vec());
        let (rows, tk) = rows_cols(&sw);
        let (rm, d) = rows_cols(&sm);
        if batch == 0 || rm != tk * batch || rows % batch != 0 {
            return Err(dim_err("attend", &sw, &sm));
        }
        let (wv, mv) = (self.values(w), self.values(mem));
        let mut out = vec![F::zero(); rows * d];
        for r in 0..rows {
            let b = r % batch;
            let orow = &mut out[r * d..(r + 1) * d];
            for j in 0..tk {
                let a = wv[r * tk + j];
                let mrow = &mv[(j * batch + b) * d..(j * batch + b + 1) * d];
                for c in 0..d {
                    orow[c] = orow[c] + a * mrow[c];
                }
            }
        }
        let rg = self.any_grad(&[w, mem]);
        Ok(self.push(vec![rows, d], out, Op::Attend { w, mem, batch, tk }, rg))
    }

    /// Mean negative log-likelihood over rows whose gold id is not `pad`.
    pub fn cross_entropy(&mut self, logits: Var, gold: &[u32], pad: u32) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let (rows, v) = rows_cols(&sl);
        if gold.len() != rows {
            return Err(dim_err("cross_entropy", &sl, &[gold.len()]));
        }
        let targets: Vec<Option<usize>> = gold
            .iter()
            .map(|&g| if g == pad { Ok(None) } else if (g as usize) < v { Ok(Some(g as usize)) } else { Err(Error::Vocabulary { id: g, size: v }) })
            .collect::<Result<_>>()?;
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let lv = self.values(logits);
        let mut probs = vec![F::zero(); lv.len()];
        let mut total = 0.0f64;
        for (r, target) in targets.iter().enumerate() {
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for c in 0..v {
                let e = (row[c] - max).exp();
                probs[r * v + c] = e;
                z = z + e;
            }
            for c in 0..v {
                probs[r * v + c] = probs[r * v + c] / z;
            }
            if let Some(t) = *target {
                total += (max + z.ln() - row[t]).as_f64();
            }
        }
        let loss = F::from_f64(total / count as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits, gold: targets, probs, count }, rg))
    }
}
