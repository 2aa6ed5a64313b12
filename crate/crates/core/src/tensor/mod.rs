//! Minimal reverse-mode differentiable tensor engine.
//!
//! Tensors are dense, row-major, double precision. Every operation that has
//! at least one gradient-tracking input records itself in the output node, so
//! the graph is built implicitly while the forward pass runs. Calling
//! [`Tensor::backward`] on a scalar walks the graph once in reverse
//! topological order and accumulates gradients into the leaves.

mod gemm;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

pub(crate) use gemm::{gemm, MatMut, MatRef};
pub use ops::Function;
pub(crate) use ops::{sigmoid, Op};

/// Variance epsilon used by [`Tensor::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct Node {
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// Shared handle to a graph node. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_shape(data_len: usize, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::contract(format!(
            "shape {shape:?} must be a non-empty list of positive integers"
        )));
    }
    let n: usize = shape.iter().product();
    if n != data_len {
        return Err(Error::contract(format!(
            "shape {shape:?} holds {n} values but {data_len} were given"
        )));
    }
    Ok(())
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor(Arc::new(Node {
            shape,
            data: RwLock::new(data),
            requires_grad,
            grad: Mutex::new(None),
            op,
        }))
    }

    /// Constant tensor that never receives a gradient.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(data.len(), shape)?;
        Ok(Tensor::build(data, shape.to_vec(), false, None))
    }

    /// Gradient-tracking leaf.
    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(data.len(), shape)?;
        Ok(Tensor::build(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(vec![0.0; n], shape).expect("zeros: invalid shape")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(vec![value], vec![1], false, None)
    }

    /// Output of an operation. Records `op` only when gradients can flow.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
        let track = is_grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        if track {
            Tensor::build(data, shape, true, Some(op))
        } else {
            Tensor::build(data, shape, false, None)
        }
    }

    /// Output of a user-defined differentiable [`Function`].
    pub fn from_function(
        data: Vec<f64>,
        shape: &[usize],
        inputs: Vec<Tensor>,
        func: Box<dyn Function>,
    ) -> Result<Tensor> {
        check_shape(data.len(), shape)?;
        Ok(Tensor::from_op(
            data,
            shape.to_vec(),
            Op::Custom { inputs, func },
        ))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::contract(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on a tensor with {} elements", d.len());
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Overwrites the gradient buffer (used by clipping).
    pub fn set_grad(&self, grad: Option<Vec<f64>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.numel(), "gradient length mismatch");
        }
        *self.0.grad.lock().expect("grad lock poisoned") = grad;
    }

    /// In-place update of a leaf's values.
    pub fn update_data<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        assert!(self.is_leaf(), "only leaf tensors can be updated in place");
        let mut guard = self.0.data.write().expect("tensor data lock poisoned");
        f(&mut guard)
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.to_vec(), self.shape().to_vec(), false, None)
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    fn parents(&self) -> Vec<Tensor> {
        self.0.op.as_ref().map(|op| op.parents()).unwrap_or_default()
    }

    /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across
    /// calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Post-order DFS: every node lands after all of its inputs.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            let parents = t.parents();
            stack.push((t, true));
            for p in parents {
                if p.requires_grad() && !visited.contains(&p.key()) {
                    stack.push((p, false));
                }
            }
        }

        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            match &t.0.op {
                None => {
                    let mut slot = t.0.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let out = t.data();
                    op.backward(&out, t.shape(), &g, &mut |parent: &Tensor, pg: Vec<f64>| {
                        if !parent.requires_grad() {
                            return;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        match grads.get_mut(&parent.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(parent.key(), pg);
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}
