use crate::error::{Error, Result};
use crate::layers::Param;
use crate::models::Model;
use crate::tensor::Real;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// Applies one bias-corrected update to each parameter and zeroes its
    /// gradient. Nothing is modified if any gradient is non-finite.
    pub fn step<T: Real>(&self, params: &mut [&mut Param<T>]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
        for p in params.iter_mut() {
            self.update(p);
        }
        Ok(())
    }

    /// Steps every parameter of a model.
    pub fn step_model<T: Real>(&self, model: &mut Model<T>) -> Result<()> {
        let mut bad = None;
        model.visit_params_ref(&mut |p| {
            if bad.is_none() && !p.grad.is_finite() {
                bad = Some(p.name.clone());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        model.visit_params(&mut |p| self.update(p));
        Ok(())
    }

    fn update<T: Real>(&self, p: &mut Param<T>) {
        p.step_count += 1;
        let t = p.step_count as f64;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powf(t));
        let c2 = T::lit(1.0 - self.beta2.powf(t));
        let (alpha, eps) = (T::lit(self.alpha), T::lit(self.eps));
        let one = T::one();
        let value = p.value.data_mut();
        let (m, v) = (p.adam_m.data_mut(), p.adam_v.data_mut());
        for (i, g) in p.grad.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (one - b1) * *g;
            v[i] = b2 * v[i] + (one - b2) * *g * *g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            value[i] -= alpha * m_hat / (v_hat.sqrt() + eps);
            *g = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn scalar(v: f64) -> Param<f64> {
        Param::new("theta", Tensor::filled(&[1], v))
    }

    #[test]
    fn first_step_moves_by_alpha() {
        let mut p = Param::new("w", Tensor::<f64>::filled(&[4], 0.5));
        p.grad.fill(1.0);
        Adam::default().step(&mut [&mut p]).unwrap();
        for &v in p.value.data() {
            assert!((0.5 - v - 1e-3).abs() < 1e-8);
        }
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = scalar(0.3);
        Adam::default().step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data()[0], 0.3);
    }

    #[test]
    fn minimises_a_parabola() {
        let mut p = scalar(1.0);
        let adam = Adam {
            alpha: 0.05,
            ..Adam::default()
        };
        for _ in 0..100 {
            let theta = p.value.data()[0];
            p.grad.fill(2.0 * theta);
            adam.step(&mut [&mut p]).unwrap();
        }
        assert!(p.value.data()[0].abs() < 0.1, "{}", p.value.data()[0]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut a = scalar(1.0);
        let mut b = scalar(2.0);
        a.grad.fill(1.0);
        b.grad.fill(f64::NAN);
        assert!(Adam::default().step(&mut [&mut a, &mut b]).is_err());
        assert_eq!(a.value.data()[0], 1.0);
    }
}
