use std::cell::RefCell;
use std::fmt;

use super::{invalid, Result, Tensor, TensorError};

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink<'_>)>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Records operations in execution order; node ids are positions, so every
/// node's parents precede it.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a recorded value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
}

impl GradSink<'_> {
    pub fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Mutable gradient buffer of node `id`, zero-initialized on first use.
    pub fn slot(&mut self, id: usize) -> &mut [f64] {
        let n = self.nodes[id].value.numel();
        self.grads[id].get_or_insert_with(|| vec![0.0; n])
    }

    /// `grad[id] += g` elementwise.
    pub fn accumulate(&mut self, id: usize, g: &[f64]) {
        if !self.wants(id) {
            return;
        }
        for (d, s) in self.slot(id).iter_mut().zip(g) {
            *d += s;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf. Leaves with `requires_grad` collect gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.record(value, requires_grad, None)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub(crate) fn record(
        &self,
        value: Tensor,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var { tape: self, id }
    }

    /// Record an op output whose parents are `parents`.
    pub(crate) fn push<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&[f64], &mut GradSink<'_>) + 'static,
    {
        let requires = parents.iter().any(|p| p.requires_grad());
        let bw: Option<BackwardFn> = if requires {
            Some(Box::new(backward))
        } else {
            None
        };
        self.record(value, requires, bw)
    }

    /// Reverse sweep from a scalar `loss`. Fails on non-scalar losses and on
    /// a second call without [`Tape::reset_grads`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::Contract("loss belongs to another tape".into()));
        }
        let mut guard = self.inner.borrow_mut();
        let inner = &mut *guard;
        if inner.backward_done {
            return Err(TensorError::Contract(
                "backward() already ran on this tape; reset_grads() first".into(),
            ));
        }
        let n_loss = inner.nodes[loss.id].value.numel();
        if n_loss != 1 {
            return Err(TensorError::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                inner.nodes[loss.id].value.shape()
            )));
        }
        inner.backward_done = true;
        inner.grads = (0..inner.nodes.len()).map(|_| None).collect();
        if !inner.nodes[loss.id].requires_grad {
            return Ok(());
        }
        inner.grads[loss.id] = Some(vec![1.0]);
        let nodes = &inner.nodes;
        for id in (0..=loss.id).rev() {
            let Some(bw) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(g) = inner.grads[id].take() else {
                continue;
            };
            let mut sink = GradSink {
                grads: &mut inner.grads,
                nodes,
            };
            bw(&g, &mut sink);
            inner.grads[id] = Some(g);
        }
        Ok(())
    }

    /// Drop accumulated gradients so `backward` may run again.
    pub fn reset_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.grads.clear();
        inner.backward_done = false;
    }

    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let g = inner.grads.get(v.id)?.as_ref()?;
        Some(
            Tensor::new(inner.nodes[v.id].value.shape(), g.clone())
                .unwrap_or_else(|_| Tensor::scalar(g[0])),
        )
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.inner.borrow().nodes[id].value.clone()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Scalar value; errors if not a single element.
    pub fn item(&self) -> Result<f64> {
        let v = self.value();
        if v.numel() != 1 {
            return Err(invalid("item", format!("shape {:?}", v.shape())));
        }
        Ok(v.data()[0])
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::Contract("operands live on different tapes".into()))
        }
    }
}
