use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LayerMode;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Inverted dropout: train mode zeroes each element with probability `p` and
/// scales survivors by `1 / (1 - p)`; eval mode is the identity.
///
/// The mask stream comes from the layer's own seeded generator, so a model
/// built from a fixed seed drops the same units on every run.
#[derive(Clone, Debug)]
pub struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<bool>>,
    frozen: bool,
    last_mode: LayerMode,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return invalid(format!("dropout probability {p} outside [0, 1)"));
        }
        Ok(Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
            frozen: false,
            last_mode: LayerMode::Eval,
        })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// While frozen, train-mode forward passes reuse the previous mask (used by
    /// the gradient checker, which needs a deterministic function).
    pub fn freeze_mask(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn forward<T: Real>(&mut self, mut input: Tensor<T>, mode: LayerMode) -> Result<Tensor<T>> {
        self.last_mode = mode;
        if mode == LayerMode::Eval || self.p == 0.0 {
            self.mask = None;
            return Ok(input);
        }
        let reuse = self.frozen && self.mask.as_ref().is_some_and(|m| m.len() == input.len());
        if !reuse {
            let p = self.p;
            let rng = &mut self.rng;
            self.mask = Some((0..input.len()).map(|_| rng.gen::<f64>() >= p).collect());
        }
        let scale = T::lit(1.0 / (1.0 - self.p));
        let mask = self.mask.as_ref().expect("mask set above");
        input
            .data_mut()
            .iter_mut()
            .zip(mask)
            .for_each(|(v, &keep)| *v = if keep { *v * scale } else { T::zero() });
        Ok(input)
    }

    pub fn backward<T: Real>(&mut self, mut grad: Tensor<T>) -> Result<Tensor<T>> {
        let Some(mask) = &self.mask else {
            return Ok(grad);
        };
        if mask.len() != grad.len() {
            return shape_err("dropout grad does not match cached mask");
        }
        let scale = T::lit(1.0 / (1.0 - self.p));
        grad.data_mut()
            .iter_mut()
            .zip(mask)
            .for_each(|(g, &keep)| *g = if keep { *g * scale } else { T::zero() });
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_probability_is_identity() {
        let x = Tensor::<f32>::from_fn(&[3, 4], |i| i as f32);
        let mut d = Dropout::new(0.0, 1).unwrap();
        assert_eq!(d.forward(x.clone(), LayerMode::Train).unwrap(), x);
        assert_eq!(d.forward(x.clone(), LayerMode::Eval).unwrap(), x);
    }

    #[test]
    fn eval_is_identity() {
        let x = Tensor::<f32>::from_fn(&[10], |i| i as f32);
        let mut d = Dropout::new(0.9, 1).unwrap();
        assert_eq!(d.forward(x.clone(), LayerMode::Eval).unwrap(), x);
    }

    #[test]
    fn survivor_fraction() {
        let mut d = Dropout::new(0.25, 7).unwrap();
        let y = d
            .forward(Tensor::<f32>::filled(&[100_000], 1.0), LayerMode::Train)
            .unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        assert!((kept - 0.75).abs() < 0.01, "kept {kept}");
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-6));
    }

    #[test]
    fn backward_reuses_mask() {
        let mut d = Dropout::new(0.5, 3).unwrap();
        let y = d.forward(Tensor::<f64>::filled(&[64], 1.0), LayerMode::Train).unwrap();
        let g = d.backward(Tensor::filled(&[64], 1.0)).unwrap();
        assert_eq!(y, g);
    }

    #[test]
    fn rejects_bad_probability() {
        assert!(Dropout::new(1.0, 0).is_err());
        assert!(Dropout::new(-0.1, 0).is_err());
    }
}
