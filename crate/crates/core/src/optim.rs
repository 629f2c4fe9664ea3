//! Plain stochastic gradient descent.

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
}

impl Sgd {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate }
    }

    /// `p <- p - lr * grad(p)` for every parameter, then zeroes the
    /// gradients. Fails before touching anything if a parameter has no
    /// gradient buffer.
    pub fn step<'a, I>(&self, params: I) -> Result<(), TensorError>
    where
        I: IntoIterator<Item = &'a mut Tensor>,
    {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if let Some(index) = params.iter().position(|p| p.grad().is_none()) {
            return Err(TensorError::MissingGradient { index });
        }
        for p in params.iter_mut() {
            p.descend(self.learning_rate);
        }
        Ok(())
    }
}
