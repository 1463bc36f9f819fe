//! Dense row-major tensors with a define-by-run gradient tape.
//!
//! Every op that has at least one input with `requires_grad` records its
//! parents and a backward closure on the output node. The graph is owned by
//! the output tensors, so dropping the loss drops the tape. Only leaves
//! (tensors created directly, typically parameters) accumulate `grad`;
//! intermediate gradients live in a scratch map for the duration of one
//! [`Tensor::backward`] call.
//!
//! Leaves that are not reachable from the loss keep whatever `grad` they had
//! before the call: absent if never zeroed, zeros if the caller zeroed them.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use super::Scalar;
use crate::error::{bail, Result};

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct Origin<T: Scalar> {
    pub(crate) parents: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

pub(crate) struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: Mutex<Option<Vec<T>>>,
    requires_grad: bool,
    origin: Option<Origin<T>>,
}

#[derive(Clone)]
pub struct Tensor<T: Scalar = f32>(Arc<Node<T>>);

thread_local! {
    static GRAD_DISABLED: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` without recording any tape on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_DISABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_DISABLED.with(|g| g.replace(true));
    let _restore = Restore(prev);
    f()
}

pub(crate) fn grad_enabled() -> bool {
    !GRAD_DISABLED.with(|g| g.get())
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            bail!(
                Argument,
                "shape {shape:?} has a zero extent but {} values",
                data.len()
            );
        }
        if numel(shape) != data.len() {
            bail!(
                Argument,
                "data length {} does not match shape {shape:?}",
                data.len()
            );
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// A leaf that participates in gradient accumulation.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(Self::leaf(t.to_vec(), shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![T::zero(); numel(shape)], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(vec![value; numel(shape)], shape.to_vec(), false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![value], Vec::new(), false)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::lit(v)).collect(), shape)
    }

    fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Node {
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad,
            origin: None,
        }))
    }

    /// Builds an op output. The tape entry is only kept when some parent
    /// requires a gradient and recording is enabled.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let origin = requires_grad.then(|| Origin {
            parents,
            backward: Box::new(backward),
        });
        Tensor(Arc::new(Node {
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad,
            origin,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.origin.is_none()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => bail!(Argument, "expected a matrix, got shape {s:?}"),
        }
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        let d = self.data();
        if d.len() != 1 {
            bail!(Argument, "item() on tensor with {} elements", d.len());
        }
        Ok(d[0])
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        let shape = self.shape();
        if index.len() != shape.len() || index.iter().zip(shape).any(|(i, d)| i >= d) {
            bail!(
                Argument,
                "index {index:?} out of bounds for shape {shape:?}"
            );
        }
        let flat = index
            .iter()
            .zip(shape)
            .fold(0usize, |acc, (&i, &d)| acc * d + i);
        Ok(self.data()[flat])
    }

    /// Overwrites the values of a leaf in place (optimizer updates, loading).
    pub fn set_data(&self, values: Vec<T>) -> Result<()> {
        if !self.is_leaf() {
            bail!(Usage, "set_data on a non-leaf tensor");
        }
        if values.len() != self.numel() {
            bail!(
                Argument,
                "set_data length {} does not match shape {:?}",
                values.len(),
                self.shape()
            );
        }
        *self.0.data.write().expect("tensor data lock poisoned") = values;
        Ok(())
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [T])) {
        let mut d = self.0.data.write().expect("tensor data lock poisoned");
        f(&mut d);
    }

    /// Same values, no tape history, no gradient.
    pub fn detach(&self) -> Self {
        Self::leaf(self.to_vec(), self.shape().to_vec(), false)
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = Some(vec![T::zero(); self.numel()]);
    }

    pub fn clear_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => *slot = Some(g.to_vec()),
        }
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Identity of the underlying node, stable while any clone is alive.
    pub fn id(&self) -> usize {
        self.key() as usize
    }

    fn key(&self) -> *const Node<T> {
        Arc::as_ptr(&self.0)
    }

    /// Reverse-mode sweep from a single-element loss.
    ///
    /// Every `requires_grad` leaf reachable from `self` gets its gradient
    /// added to `grad` exactly once.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            bail!(
                Argument,
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            );
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Node<T>, Vec<T>> = HashMap::new();
        grads.insert(self.key(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            match &node.0.origin {
                None => node.accumulate_grad(&g),
                Some(origin) => {
                    let parent_grads = (origin.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), origin.parents.len());
                    for (parent, pg) in origin.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        match grads.get_mut(&parent.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                            None => {
                                grads.insert(parent.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes that require grad (parents before children).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashMap<*const Node<T>, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if visited.insert(node.key(), ()).is_some() {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(origin) = &node.0.origin {
                for p in &origin.parents {
                    if p.requires_grad() && !visited.contains_key(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.data();
        let preview: Vec<_> = d.iter().take(8).collect();
        write!(
            f,
            "Tensor<{}>{:?} {:?}{}",
            T::NAME,
            self.shape(),
            preview,
            if d.len() > 8 { " ..." } else { "" }
        )
    }
}
