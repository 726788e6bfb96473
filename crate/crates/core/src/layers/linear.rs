use rand::Rng;

use super::{he_uniform, Param};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Fully connected layer `y = x W + b` with `W: [in_dim, out_dim]`.
#[derive(Clone, Debug)]
pub struct Linear<T = f32> {
    in_dim: usize,
    out_dim: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: Param::new(format!("{name}.weight"), he_uniform(&[in_dim, out_dim], in_dim, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&mut self, input: Tensor<T>) -> Result<Tensor<T>> {
        let n = match *input.shape() {
            [n, d] if d == self.in_dim => n,
            _ => return shape_err(format!("linear expects [N, {}], got {:?}", self.in_dim, input.shape())),
        };
        let mut out: Vec<T> = (0..n).flat_map(|_| self.bias.value.data().iter().copied()).collect();
        gemm(
            false,
            false,
            n,
            self.out_dim,
            self.in_dim,
            T::one(),
            input.data(),
            self.weight.value.data(),
            T::one(),
            &mut out,
        );
        self.cache = Some(input);
        Ok(Tensor::from_parts(vec![n, self.out_dim], out))
    }

    pub fn backward(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        let Some(x) = self.cache.take() else {
            return shape_err("linear backward called before forward");
        };
        let n = x.shape()[0];
        if grad.shape() != [n, self.out_dim] {
            return shape_err(format!("linear grad has shape {:?}", grad.shape()));
        }
        for row in grad.data().chunks(self.out_dim) {
            self.bias
                .grad
                .data_mut()
                .iter_mut()
                .zip(row)
                .for_each(|(b, &g)| *b += g);
        }
        gemm(
            true,
            false,
            self.in_dim,
            self.out_dim,
            n,
            T::one(),
            x.data(),
            grad.data(),
            T::one(),
            self.weight.grad.data_mut(),
        );
        let mut dx = vec![T::zero(); n * self.in_dim];
        gemm(
            false,
            true,
            n,
            self.in_dim,
            self.out_dim,
            T::one(),
            grad.data(),
            self.weight.value.data(),
            T::zero(),
            &mut dx,
        );
        Ok(Tensor::from_parts(vec![n, self.in_dim], dx))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l = Linear::<f64>::new("l", 3, 3, &mut rng);
        l.weight.value = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let x = Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
        assert_eq!(l.forward(x.clone()).unwrap(), x);
    }

    #[test]
    fn ones_weights_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l = Linear::<f32>::new("l", 3, 1, &mut rng);
        l.weight.value.fill(1.0);
        let y = l.forward(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn parameter_count_three_to_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::<f32>::new("l", 3, 2, &mut rng);
        assert_eq!(l.weight.len() + l.bias.len(), 8);
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l = Linear::<f32>::new("l", 3, 2, &mut rng);
        assert!(l.forward(Tensor::zeros(&[2, 4])).is_err());
    }
}
