use crate::tensor::Tensor;
use crate::Float;

/// A named trainable tensor with its most recent gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Float> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
