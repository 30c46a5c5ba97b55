//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Define-by-run: every operation records its inputs and a backward rule on
//! the produced node. [`Tensor::backward`] walks the graph from a scalar
//! loss in reverse creation order, so gradient accumulation order is fixed
//! and two runs over the same graph are bit-identical.
//!
//! No broadcasting beyond scalar-with-tensor and the explicit row-vector
//! ops; each rule stays small enough to audit by hand and is checked against
//! central finite differences in the test suite.

mod checkpoint;
mod finite_diff;
mod ops;

pub use checkpoint::{load_params, load_params_into, save_params, CHECKPOINT_VERSION};
pub use finite_diff::finite_diff_check;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub(crate) use ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// A dense double-precision array participating in a backward graph.
///
/// Cloning is cheap (shared node). A graph is confined to one thread;
/// distinct graphs may live on distinct threads.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
    requires_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new_node(shape: Vec<usize>, data: Vec<f64>, op: Option<Op>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                op,
                requires_grad,
            }),
        }
    }

    /// A leaf that never receives gradients.
    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::new_node(shape, data, None, false))
    }

    /// A trainable leaf.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::new_node(shape, data, None, true))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new_node(vec![], vec![v], None, false)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Tensor::new_node(shape, vec![0.0; n], None, false)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::invalid("from_rows needs at least one row"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("from_rows requires equal-length rows"));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::constant(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow of the raw values (row-major).
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Copy of the raw values.
    pub fn value(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Overwrites the values in place; used by the optimizer and the
    /// finite-difference probe. Graph structure is unaffected.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::invalid(format!(
                "set_data length {} does not match shape {:?}",
                values.len(),
                self.shape()
            )));
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn nudge(&self, index: usize, delta: f64) {
        self.inner.data.borrow_mut()[index] += delta;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Two handles to the same node.
    pub fn same(a: &Tensor, b: &Tensor) -> bool {
        Rc::ptr_eq(&a.inner, &b.inner)
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b += c;
                }
            }
            None => *g = Some(contrib.to_vec()),
        }
    }

    /// Populates gradients of every reachable grad-requiring leaf with
    /// d(self)/d(leaf). Gradients accumulate additively across calls until
    /// [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.requires_grad {
            return Ok(());
        }

        // Reverse creation order is a topological order: an op's output
        // always has a larger id than its inputs.
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.inner.requires_grad || !seen.insert(t.inner.id) {
                continue;
            }
            if let Some(op) = &t.inner.op {
                for p in op.parents() {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        // Interior grads are scratch space for this pass; only leaves
        // accumulate across backward calls.
        for n in &nodes {
            if n.inner.op.is_some() {
                *n.inner.grad.borrow_mut() = None;
            }
        }

        self.accumulate_grad(&[1.0]);
        for node in &nodes {
            let Some(op) = &node.inner.op else { continue };
            let grad = match node.inner.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            op.backprop(node, &grad);
        }
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("data", &self.inner.data.borrow())
            .finish()
    }
}

/// A named trainable tensor; each name appears once in a model registry.
#[derive(Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Parameter> {
        Ok(Parameter {
            name: name.into(),
            tensor: Tensor::param(shape, data)?,
        })
    }
}

/// Rejects duplicate parameter names.
pub fn validate_registry(params: &[Parameter]) -> Result<()> {
    let mut seen = HashSet::new();
    for p in params {
        if !seen.insert(p.name.as_str()) {
            return Err(Error::invalid(format!(
                "parameter {} registered twice",
                p.name
            )));
        }
    }
    Ok(())
}
