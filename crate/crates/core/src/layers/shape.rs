use super::dims4;
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// `[N, C, H, W] -> [N, C]` by spatial averaging.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Real>(&mut self, input: Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = dims4(&input, "global_avg_pool")?;
        let plane = h * w;
        let inv = T::lit(1.0 / plane as f64);
        let out = input
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.input_shape = Some(input.shape().to_vec());
        Ok(Tensor::from_parts(vec![n, c], out))
    }

    pub fn backward<T: Real>(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        let Some(shape) = self.input_shape.take() else {
            return shape_err("global_avg_pool backward called before forward");
        };
        let plane = shape[2] * shape[3];
        if grad.shape() != [shape[0], shape[1]] {
            return shape_err(format!("global_avg_pool grad has shape {:?}", grad.shape()));
        }
        let inv = T::lit(1.0 / plane as f64);
        let dx = grad
            .data()
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * inv, plane))
            .collect();
        Ok(Tensor::from_parts(shape, dx))
    }
}

/// `[N, ...] -> [N, prod(...)]`.
#[derive(Clone, Debug, Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Real>(&mut self, input: Tensor<T>) -> Result<Tensor<T>> {
        let Some(&n) = input.shape().first() else {
            return shape_err("flatten of a scalar");
        };
        let rest = input.shape()[1..].iter().product::<usize>();
        self.input_shape = Some(input.shape().to_vec());
        input.reshape(&[n, rest])
    }

    pub fn backward<T: Real>(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        let Some(shape) = self.input_shape.take() else {
            return shape_err("flatten backward called before forward");
        };
        grad.reshape(&shape)
    }
}
