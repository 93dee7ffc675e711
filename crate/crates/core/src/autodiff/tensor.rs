//! Dense 64-bit tensors and shared parameter handles.

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit reals.
///
/// A tensor created with [`Tensor::with_grad`] carries a same-shape gradient
/// accumulator; everything else is a plain value.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::dim(
                "tensor",
                format!("data length {} != product of shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Fill with independent draws from `U(-range, range)`.
    pub fn uniform(shape: Vec<usize>, range: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-range..range)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Xavier-style uniform init for a `[fan_out, fan_in]` linear map.
    pub fn xavier(fan_out: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(vec![fan_out, fan_in], a, rng)
    }

    /// Attach a gradient accumulator, marking this tensor trainable.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        if let Some(g) = self.grad.as_mut() {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
    }
}

/// Shared handle to a trainable tensor.
///
/// Model structs hold `Param`s; a tape binds them as leaves for one forward
/// pass and `backward` accumulates into their grad buffers. Not thread-safe:
/// graph construction and backward are single-threaded by contract.
#[derive(Clone)]
pub struct Param(Rc<RefCell<Tensor>>);

impl Param {
    pub fn new(t: Tensor) -> Self {
        Param(Rc::new(RefCell::new(t.with_grad())))
    }

    /// A frozen parameter: participates in forwards, never receives grads.
    pub fn frozen(t: Tensor) -> Self {
        Param(Rc::new(RefCell::new(t)))
    }

    pub fn borrow(&self) -> Ref<'_, Tensor> {
        self.0.borrow()
    }

    pub fn borrow_mut(&self) -> RefMut<'_, Tensor> {
        self.0.borrow_mut()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().numel()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().zero_grad();
    }

    /// Snapshot of the gradient buffer (zeros if never touched).
    pub fn grad_vec(&self) -> Vec<f64> {
        let t = self.0.borrow();
        t.grad()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }

    pub fn data_vec(&self) -> Vec<f64> {
        self.0.borrow().data().to_vec()
    }

    pub fn set_data(&self, data: &[f64]) {
        let mut t = self.0.borrow_mut();
        assert_eq!(data.len(), t.numel(), "set_data length mismatch");
        t.data_mut().copy_from_slice(data);
    }

    /// Pointer identity, used to dedupe leaves bound twice to one tape.
    pub(crate) fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let t = self.0.borrow();
        write!(f, "Param{:?}", t.shape())
    }
}
