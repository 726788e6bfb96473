use super::{LayerMode, Param};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Per-channel batch normalisation over `[N, C, H, W]` (or `[N, C]`) inputs.
///
/// Train mode normalises with the batch mean and biased variance and folds the
/// batch statistics into the running estimates as
/// `running = (1 - momentum) * running + momentum * batch` (the running variance
/// uses the unbiased batch estimate). Eval mode normalises with the running
/// statistics only, so each sample's output is independent of its batch mates.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T = f32> {
    channels: usize,
    eps: f64,
    momentum: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    name: String,
    cache: Option<Cache<T>>,
}

#[derive(Clone, Debug)]
struct Cache<T> {
    shape: Vec<usize>,
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Real> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self::with_hyper(name, channels, BN_EPS, BN_MOMENTUM)
    }

    pub fn with_hyper(name: &str, channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            channels,
            eps,
            momentum,
            gamma: Param::new(format!("{name}.gamma"), Tensor::filled(&[channels], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
            name: name.to_string(),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn layout(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 2 && s.len() != 4 {
            return shape_err(format!("batchnorm expects [N,C] or [N,C,H,W], got {s:?}"));
        }
        if s[1] != self.channels {
            return shape_err(format!("batchnorm expects {} channels, got {}", self.channels, s[1]));
        }
        let spatial = s[2..].iter().product::<usize>();
        Ok((s[0], spatial))
    }

    pub fn forward(&mut self, input: Tensor<T>, mode: LayerMode) -> Result<Tensor<T>> {
        let (n, spatial) = self.layout(&input)?;
        let c = self.channels;
        let x = input.data();
        let eps = T::lit(self.eps);
        let (mean, var, batch_stats) = match mode {
            LayerMode::Train => {
                if n < 2 {
                    return invalid("batchnorm needs a batch of at least 2 in train mode");
                }
                let count = T::lit((n * spatial) as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for s in 0..n {
                        let base = (s * c + ch) * spatial;
                        acc += x[base..base + spatial].iter().copied().sum::<T>();
                    }
                    let m = acc / count;
                    let mut sq = T::zero();
                    for s in 0..n {
                        let base = (s * c + ch) * spatial;
                        for &v in &x[base..base + spatial] {
                            sq += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / count;
                }
                let mom = T::lit(self.momentum);
                let unbias = T::lit((n * spatial) as f64 / ((n * spatial) as f64 - 1.0).max(1.0));
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (T::one() - mom) * *rm + mom * mean[ch];
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
                }
                (mean, var, true)
            }
            LayerMode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
                false,
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut x_hat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                for i in base..base + spatial {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    x_hat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let shape = input.shape().to_vec();
        self.cache = Some(Cache {
            shape: shape.clone(),
            x_hat,
            inv_std,
            batch_stats,
        });
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn backward(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        let Some(cache) = self.cache.take() else {
            return shape_err("batchnorm backward called before forward");
        };
        if grad.shape() != cache.shape.as_slice() {
            return shape_err(format!("batchnorm grad has shape {:?}", grad.shape()));
        }
        let c = self.channels;
        let n = cache.shape[0];
        let spatial = cache.shape[2..].iter().product::<usize>();
        let m = T::lit((n * spatial) as f64);
        let dy = grad.data();
        let xh = &cache.x_hat;
        let mut dx = vec![T::zero(); dy.len()];
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for i in base..base + spatial {
                    sum_dy += dy[i];
                    sum_dy_xh += dy[i] * xh[i];
                }
            }
            self.gamma.grad.data_mut()[ch] += sum_dy_xh;
            self.beta.grad.data_mut()[ch] += sum_dy;
            let g = self.gamma.value.data()[ch];
            let scale = g * cache.inv_std[ch];
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for i in base..base + spatial {
                    dx[i] = if cache.batch_stats {
                        scale / m * (m * dy[i] - sum_dy - xh[i] * sum_dy_xh)
                    } else {
                        scale * dy[i]
                    };
                }
            }
        }
        Ok(Tensor::from_parts(cache.shape, dx))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{}.running_mean", self.name), &mut self.running_mean);
        f(&format!("{}.running_var", self.name), &mut self.running_var);
    }
}
