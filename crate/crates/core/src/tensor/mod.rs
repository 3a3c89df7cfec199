//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are cheap-to-clone handles onto shared storage. Differentiable
//! operations live on [`Graph`], which records one entry per op in
//! construction order; [`Graph::backward`] replays the records in reverse,
//! so every node is visited exactly once and gradient accumulation order is
//! fixed by topological index. A tensor's persistent `grad` buffer
//! accumulates across backward calls until [`Tensor::zero_grad`].

mod kernels;
mod ops;

pub mod gradcheck;

pub use gradcheck::grad_check;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

struct TensorInner {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    /// Index of the graph record that produced this tensor, if any.
    node: Option<usize>,
}

/// Shared handle to an n-dimensional row-major f32 array.
#[derive(Clone)]
pub struct Tensor {
    uid: u64,
    inner: Rc<RefCell<TensorInner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            inner: Rc::new(RefCell::new(TensorInner {
                shape,
                data,
                requires_grad,
                grad: None,
                node: None,
            })),
        }
    }

    /// Build a tensor from raw data; errors if the extents do not multiply
    /// out to the data length or any extent is zero.
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dim(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor::from_parts(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; numel], false)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; numel], false)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_parts(vec![1], vec![value], false)
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f32, stream: &mut RngStream) -> Tensor {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| stream.normal() * std).collect();
        Tensor::from_parts(shape.to_vec(), data, false)
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Mark the tensor trainable (or not). Returns self for chaining.
    pub fn with_requires_grad(self, flag: bool) -> Tensor {
        self.set_requires_grad(flag);
        self
    }

    pub fn set_requires_grad(&self, flag: bool) {
        let mut inner = self.inner.borrow_mut();
        inner.requires_grad = flag;
        if !flag {
            inner.grad = None;
        }
    }

    pub fn data(&self) -> Ref<'_, [f32]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.borrow().data.clone()
    }

    /// Replace the stored values. Shape must be preserved.
    pub fn set_data(&self, data: Vec<f32>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(Error::Dim(format!(
                "set_data length {} != {}",
                data.len(),
                inner.data.len()
            )));
        }
        inner.data = data;
        Ok(())
    }

    /// Mutate values in place (used by optimizers).
    pub fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.inner.borrow_mut().data);
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.borrow().grad.clone()
    }

    /// Mutate the gradient buffer in place, if present.
    pub fn update_grad(&self, f: impl FnOnce(&mut [f32])) {
        if let Some(g) = self.inner.borrow_mut().grad.as_mut() {
            f(g);
        }
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Extract the single value of a scalar tensor.
    pub fn item(&self) -> Result<f32> {
        let inner = self.inner.borrow();
        if inner.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                inner.shape
            )));
        }
        Ok(inner.data[0])
    }

    /// Detached copy: same values, fresh storage, no graph history.
    pub fn detached(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::from_parts(inner.shape.clone(), inner.data.clone(), false)
    }

    fn set_node(&self, idx: usize) {
        self.inner.borrow_mut().node = Some(idx);
    }

    pub(crate) fn node(&self) -> Option<usize> {
        self.inner.borrow().node
    }

    fn accumulate_persistent_grad(&self, contribution: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        match inner.grad.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => inner.grad = Some(contribution.to_vec()),
        }
    }
}

/// Pass-local gradient buffers, keyed by tensor uid.
///
/// Contributions accumulate here during a backward sweep and are flushed
/// into each tensor's persistent `grad` at the end, so repeated backward
/// calls add up rather than interfere.
pub struct GradStore {
    bufs: HashMap<u64, Vec<f32>>,
    touched: Vec<Tensor>,
}

impl GradStore {
    fn new() -> Self {
        GradStore {
            bufs: HashMap::new(),
            touched: Vec::new(),
        }
    }

    /// Gradient of `t` accumulated so far in this pass, if any consumer
    /// contributed one.
    pub fn grad_of(&self, t: &Tensor) -> Option<&[f32]> {
        self.bufs.get(&t.uid).map(|v| v.as_slice())
    }

    /// Add a contribution to `t`'s pass-local gradient. No-op for tensors
    /// that do not require grad.
    pub fn accumulate(&mut self, t: &Tensor, contribution: &[f32]) {
        if !t.requires_grad() {
            return;
        }
        debug_assert_eq!(contribution.len(), t.numel());
        match self.bufs.get_mut(&t.uid) {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contribution) {
                    *b += c;
                }
            }
            None => {
                self.bufs.insert(t.uid, contribution.to_vec());
                self.touched.push(t.clone());
            }
        }
    }

    fn flush(self) {
        for t in &self.touched {
            if let Some(buf) = self.bufs.get(&t.uid) {
                t.accumulate_persistent_grad(buf);
            }
        }
    }
}

type BackwardFn = Box<dyn Fn(&mut GradStore)>;

struct Record {
    backward: BackwardFn,
}

/// Tape of differentiable operations for one forward pass.
pub struct Graph {
    records: Vec<Record>,
    grad_enabled: bool,
    stochastic: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            records: Vec::new(),
            grad_enabled: true,
            stochastic: false,
        }
    }

    /// Graph that records nothing; forward values only.
    pub fn no_grad() -> Graph {
        Graph {
            records: Vec::new(),
            grad_enabled: false,
            stochastic: false,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// True once any stochastic op (active dropout) was recorded or executed.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub(crate) fn mark_stochastic(&mut self) {
        self.stochastic = true;
    }

    /// Record a custom operation. The closure receives the pass-local store,
    /// reads the output's gradient via [`GradStore::grad_of`], and accumulates
    /// into the inputs. Recording is skipped when no input requires grad.
    pub(crate) fn push(
        &mut self,
        any_input_requires: bool,
        out: &Tensor,
        backward: impl Fn(&mut GradStore) + 'static,
    ) {
        if self.grad_enabled && any_input_requires {
            out.set_requires_grad(true);
            out.set_node(self.records.len());
            self.records.push(Record {
                backward: Box::new(backward),
            });
        }
    }

    /// Reverse sweep from a scalar loss. Seeds the loss gradient with 1.0,
    /// visits each recorded op exactly once in reverse topological order,
    /// then adds the pass-local gradients into each reachable
    /// `requires_grad` tensor's persistent buffer.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut store = GradStore::new();
        store.accumulate(loss, &[1.0]);
        let upto = match loss.node() {
            Some(idx) => idx + 1,
            None => 0,
        };
        for rec in self.records[..upto].iter().rev() {
            (rec.backward)(&mut store);
        }
        store.flush();
        Ok(())
    }
}

#[cfg(test)]
mod tests;
