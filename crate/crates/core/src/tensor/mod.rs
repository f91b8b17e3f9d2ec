//! Dense tensors with a dynamic reverse-mode tape.
//!
//! Every op result holds a reference to the inputs it was computed from, so
//! the graph is rebuilt on each forward pass and freed when the last handle
//! is dropped. Node ids come from a monotone per-thread counter, which makes
//! id order a topological order of the graph.

mod float;
pub mod gradcheck;
pub mod io;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

pub use float::{DType, Float};
pub use ops::{huber_elem, Op};

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether ops currently record graph nodes.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

struct GradGuard(bool);

impl Drop for GradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.0));
    }
}

/// Run `f` with graph recording disabled.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = GradGuard(GRAD_ENABLED.with(|c| c.replace(false)));
    f()
}

pub(crate) struct Inner<F: Float> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<F>>>,
    op: Option<Op<F>>,
}

/// A dense row-major array plus, when it was produced by a recorded op, its
/// node in the computation graph.
pub struct Tensor<F: Float>(Rc<Inner<F>>);

impl<F: Float> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<F: Float> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<F> = self.0.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data[..8]", &head)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Float> Tensor<F> {
    fn build(shape: Vec<usize>, data: Vec<F>, requires_grad: bool, op: Option<Op<F>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    /// A constant (never accumulates gradient).
    pub fn new(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// A trainable leaf.
    pub fn param(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(t.into_param())
    }

    /// Rewrap the same values as a fresh trainable leaf with no gradient.
    pub fn into_param(self) -> Self {
        let Inner { shape, data, .. } = match Rc::try_unwrap(self.0) {
            Ok(inner) => inner,
            Err(rc) => Inner {
                id: 0,
                shape: rc.shape.clone(),
                data: rc.data.clone(),
                requires_grad: false,
                grad: RefCell::new(None),
                op: None,
            },
        };
        Self::build(shape, data, true, None)
    }

    /// Same values, cut off from the graph, `requires_grad = false`.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![F::zero(); numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: F) -> Self {
        Self::build(Vec::new(), vec![value], false, None)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| F::of(v)).collect(), shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.0.data.clone()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.0.data.len(), 1);
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when this tensor was produced by a recorded op.
    pub fn has_node(&self) -> bool {
        self.0.op.is_some()
    }

    pub fn op(&self) -> Option<&Op<F>> {
        self.0.op.as_ref()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<F>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().expect("checked")))
        } else {
            None
        }
    }

    pub fn grad_vec(&self) -> Option<Vec<F>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    #[cfg(test)]
    pub(crate) fn set_grad(&self, g: Vec<F>) {
        *self.0.grad.borrow_mut() = Some(g);
    }

    pub fn same_node(&self, other: &Tensor<F>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn accumulate(&self, g: &[F]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar root. Gradients of trainable leaves
    /// accumulate additively into their `grad` slots.
    pub fn backward(&self) -> Result<()> {
        if !self.0.shape.is_empty() {
            return Err(Error::NonScalarRoot(self.0.shape.clone()));
        }
        if !self.0.requires_grad {
            return Ok(());
        }
        let order = self.graph();
        let mut grads: HashMap<u64, Vec<F>> = HashMap::new();
        grads.insert(self.0.id, vec![F::one()]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.0.id) else {
                continue;
            };
            match &node.0.op {
                None => node.accumulate(&g),
                Some(op) => {
                    for (input, ig) in op.backward(node, &g) {
                        if !input.0.requires_grad {
                            continue;
                        }
                        match grads.get_mut(&input.0.id) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(ig) {
                                    *a += b;
                                }
                            }
                            None => {
                                grads.insert(input.0.id, ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Every grad-requiring node reachable from `self`, in ascending id
    /// (topological) order. Each node appears once.
    pub fn graph(&self) -> Vec<Tensor<F>> {
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.0.requires_grad || !seen.insert(t.0.id) {
                continue;
            }
            if let Some(op) = &t.0.op {
                stack.extend(op.inputs().into_iter().cloned());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| t.0.id);
        nodes
    }
}

pub(crate) fn check_finite<F: Float>(op: &'static str, ts: &[&Tensor<F>]) -> Result<()> {
    if cfg!(debug_assertions) {
        for t in ts {
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_must_agree() {
        assert!(Tensor::<f64>::new(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::<f64>::new(vec![1.0; 6], &[2, 3]).is_ok());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.backward(), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn constants_never_accumulate() {
        let c = Tensor::<f64>::new(vec![1.0, 2.0], &[2]).unwrap();
        let p = Tensor::<f64>::param(vec![3.0, 4.0], &[2]).unwrap();
        let y = c.mul(&p).unwrap().sum().unwrap();
        y.backward().unwrap();
        assert!(c.grad().is_none());
        assert_eq!(*p.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let p = Tensor::<f64>::param(vec![3.0, 4.0], &[2]).unwrap();
        let y = no_grad(|| p.mul(&p).unwrap().sum().unwrap());
        assert!(!y.requires_grad());
        assert!(!y.has_node());
        assert!(grad_enabled());
    }

    #[test]
    fn graph_ids_are_topological() {
        let x = Tensor::<f64>::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let a = x.mul(&x).unwrap();
        let b = a.add(&x).unwrap();
        let y = b.sum().unwrap();
        let g = y.graph();
        assert_eq!(g.len(), 4);
        for w in g.windows(2) {
            assert!(w[0].id() < w[1].id());
        }
        for node in &g {
            if let Some(op) = node.op() {
                for input in op.inputs() {
                    assert!(input.id() < node.id());
                }
            }
        }
    }
}
