use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A trainable tensor with its gradient accumulator and optimizer state.
///
/// Cloning yields another handle to the same parameter; graphs hold handles
/// so `backward` can accumulate into it. Confined to one thread.
#[derive(Clone)]
pub struct Parameter(Rc<RefCell<ParamData>>);

pub(crate) struct ParamData {
    pub id: u64,
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub velocity: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub steps: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.len();
        Parameter(Rc::new(RefCell::new(ParamData {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            steps: 0,
        })))
    }

    /// Process-unique identity of the underlying parameter.
    pub fn id(&self) -> u64 {
        self.0.borrow().id
    }

    pub fn name(&self) -> String {
        self.0.borrow().name.clone()
    }

    pub fn value(&self) -> Tensor {
        self.0.borrow().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set_value(&self, value: Tensor) -> Result<()> {
        let mut p = self.0.borrow_mut();
        if value.shape() != p.value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Adds `delta` to the value in place (used by direct tabular updates).
    pub fn add_to_value(&self, index: usize, delta: f64) {
        self.0.borrow_mut().value.data_mut()[index] += delta;
    }

    pub fn grad(&self) -> Vec<f64> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn accumulate_grad(&self, delta: &[f64]) {
        let mut p = self.0.borrow_mut();
        debug_assert_eq!(p.grad.len(), delta.len());
        for (g, d) in p.grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Sum of values, used as a cheap change detector in tests.
    pub fn checksum(&self) -> f64 {
        self.0.borrow().value.data().iter().sum()
    }

    pub(crate) fn with_data_mut<R>(&self, f: impl FnOnce(&mut ParamData) -> R) -> R {
        f(&mut self.0.borrow_mut())
    }
}

impl std::fmt::Debug for Parameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p = self.0.borrow();
        f.debug_struct("Parameter")
            .field("id", &p.id)
            .field("name", &p.name)
            .field("shape", &p.value.shape())
            .finish()
    }
}
