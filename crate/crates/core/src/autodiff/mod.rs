//! Tape-based reverse-mode automatic differentiation.
//!
//! Values live in an arena owned by [`Tape`]; a [`Var`] is an index into it.
//! Every operation appends one node, so record order is a topological order
//! and backward simply walks the arena from the loss down to index zero.

pub mod kernels;
mod ops;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use ops::{BinaryOp, UnaryOp};
pub(crate) use ops::Op;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Time direction for the gated scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

pub struct Tape<F> {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<F>>,
    grads: Vec<Option<Vec<F>>>,
    requires_grad: Vec<bool>,
    ops: Vec<Op<F>>,
    rng: ChaCha8Rng,
    fault: Option<(&'static str, F)>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// The seed drives dropout masks; two tapes with the same seed and the
    /// same op sequence produce identical values.
    pub fn with_seed(seed: u64) -> Self {
        Tape {
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            requires_grad: Vec::new(),
            ops: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Bytes held by recorded values and gradients.
    pub fn memory_bytes(&self) -> usize {
        let vals: usize = self.values.iter().map(Vec::len).sum();
        let grads: usize = self.grads.iter().flatten().map(Vec::len).sum();
        (vals + grads) * F::BYTES
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, true)
    }

    /// Records a leaf with no gradient.
    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], values: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(t.shape().to_vec(), t.into_values(), Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    pub fn values(&self, v: Var) -> &[F] {
        &self.values[v.0]
    }

    pub fn value(&self, v: Var) -> Tensor<F> {
        Tensor::new(&self.shapes[v.0], self.values[v.0].clone()).expect("recorded shape")
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.ops[v.0].name()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("recorded shape"))
    }

    /// Resets every gradient to absent.
    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Test hook: multiplies the upstream gradient of every node produced by
    /// the named op by `scale` during backward.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, op: &'static str, scale: F) {
        self.fault = Some((op, scale));
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, values: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.shapes.push(shape);
        self.values.push(values);
        self.grads.push(None);
        self.requires_grad.push(requires_grad);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad[v.0])
    }

    /// Populates gradients of every grad-requiring node reachable from `loss`.
    /// Gradients accumulate across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shapes[loss.0]
            )));
        }
        if !self.requires_grad[loss.0] {
            return Ok(());
        }
        {
            let g = self.grads[loss.0].get_or_insert_with(|| vec![F::zero()]);
            g[0] = g[0] + F::one();
        }
        for i in (0..=loss.0).rev() {
            if !self.requires_grad[i] {
                continue;
            }
            let Some(mut gout) = self.grads[i].take() else {
                continue;
            };
            if let Some((name, scale)) = self.fault {
                if self.ops[i].name() == name {
                    gout.iter_mut().for_each(|g| *g = *g * scale);
                }
            }
            let mut ctx = GradSink {
                grads: &mut self.grads,
                requires_grad: &self.requires_grad,
                shapes: &self.shapes,
            };
            self.ops[i].backward(&self.values, &self.values[i], &gout, &mut ctx);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }
}

/// Mutable view over gradient slots handed to backward rules.
pub(crate) struct GradSink<'a, F> {
    grads: &'a mut [Option<Vec<F>>],
    requires_grad: &'a [bool],
    shapes: &'a [Vec<usize>],
}

impl<F: Scalar> GradSink<'_, F> {
    pub fn wants(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Zero-initialized gradient slot for `v`, or `None` when `v` needs no
    /// gradient.
    pub fn slot(&mut self, v: Var) -> Option<&mut Vec<F>> {
        if !self.requires_grad[v.0] {
            return None;
        }
        let n: usize = self.shapes[v.0].iter().product();
        Some(self.grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    pub fn add(&mut self, v: Var, contribution: &[F]) {
        if let Some(g) = self.slot(v) {
            kernels::add_assign(g, contribution);
        }
    }
}
