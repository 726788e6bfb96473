use std::marker::PhantomData;

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    /// Exponential linear unit with alpha = 1.
    Elu,
}

/// Element-wise nonlinearity. Caches its output, which is all either
/// derivative needs: relu passes where `y > 0`, elu scales by `y + 1` where `y <= 0`.
#[derive(Clone, Debug)]
pub struct Activation<T = f32> {
    kind: ActivationKind,
    output: Option<Tensor<T>>,
    _marker: PhantomData<T>,
}

impl<T: Real> Activation<T> {
    pub fn new(kind: ActivationKind) -> Self {
        Self {
            kind,
            output: None,
            _marker: PhantomData,
        }
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn apply(kind: ActivationKind, v: T) -> T {
        match kind {
            ActivationKind::Relu => v.max(T::zero()),
            ActivationKind::Elu => {
                if v > T::zero() {
                    v
                } else {
                    v.exp_minus_one()
                }
            }
        }
    }

    pub fn forward(&mut self, mut input: Tensor<T>) -> Result<Tensor<T>> {
        let kind = self.kind;
        input.data_mut().iter_mut().for_each(|v| *v = Self::apply(kind, *v));
        self.output = Some(input.clone());
        Ok(input)
    }

    pub fn backward(&mut self, mut grad: Tensor<T>) -> Result<Tensor<T>> {
        let Some(y) = self.output.take() else {
            return shape_err("activation backward called before forward");
        };
        if y.shape() != grad.shape() {
            return shape_err(format!("activation grad has shape {:?}", grad.shape()));
        }
        let zero = T::zero();
        match self.kind {
            ActivationKind::Relu => grad.data_mut().iter_mut().zip(y.data()).for_each(|(g, &y)| {
                if y <= zero {
                    *g = zero
                }
            }),
            ActivationKind::Elu => grad.data_mut().iter_mut().zip(y.data()).for_each(|(g, &y)| {
                if y <= zero {
                    *g *= y + T::one()
                }
            }),
        }
        Ok(grad)
    }
}
