use rand::Rng;

use super::{add_into, dims4, Activation, ActivationKind, Conv2d, Param};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Channel widths of a Fire module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FireSpec {
    pub in_channels: usize,
    pub squeeze_channels: usize,
    pub expand1_channels: usize,
    pub expand3_channels: usize,
}

impl FireSpec {
    pub fn new(in_channels: usize, squeeze: usize, expand1: usize, expand3: usize) -> Result<Self> {
        if squeeze == 0 || expand1 == 0 || expand3 == 0 || in_channels == 0 {
            return invalid("fire channel counts must be positive");
        }
        if squeeze >= expand1 + expand3 {
            return invalid(format!(
                "fire squeeze width {squeeze} must be below expand width {}",
                expand1 + expand3
            ));
        }
        Ok(Self {
            in_channels,
            squeeze_channels: squeeze,
            expand1_channels: expand1,
            expand3_channels: expand3,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.expand1_channels + self.expand3_channels
    }

    /// Trainable scalars: three convolutions with biases.
    pub fn param_count(&self) -> usize {
        let s = self.squeeze_channels;
        (self.in_channels * s + s)
            + (s * self.expand1_channels + self.expand1_channels)
            + (9 * s * self.expand3_channels + self.expand3_channels)
    }
}

/// Squeeze 1x1 conv, activation, then parallel 1x1 and 3x3 (padding 1) expand
/// convs, each activated, concatenated along channels. Spatial size is kept.
#[derive(Clone, Debug)]
pub struct Fire<T = f32> {
    spec: FireSpec,
    pub squeeze: Conv2d<T>,
    pub expand1: Conv2d<T>,
    pub expand3: Conv2d<T>,
    squeeze_act: Activation<T>,
    expand1_act: Activation<T>,
    expand3_act: Activation<T>,
}

impl<T: Real> Fire<T> {
    pub fn new(name: &str, spec: FireSpec, act: ActivationKind, rng: &mut impl Rng) -> Self {
        let s = spec.squeeze_channels;
        Self {
            spec,
            squeeze: Conv2d::new(&format!("{name}.squeeze"), spec.in_channels, s, 1, 1, 0, rng),
            expand1: Conv2d::new(&format!("{name}.expand1"), s, spec.expand1_channels, 1, 1, 0, rng),
            expand3: Conv2d::new(&format!("{name}.expand3"), s, spec.expand3_channels, 3, 1, 1, rng),
            squeeze_act: Activation::new(act),
            expand1_act: Activation::new(act),
            expand3_act: Activation::new(act),
        }
    }

    pub fn spec(&self) -> FireSpec {
        self.spec
    }

    pub fn forward(&mut self, input: Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, _, _) = dims4(&input, "fire")?;
        if c != self.spec.in_channels {
            return shape_err(format!(
                "fire expects {} input channels, got {c}",
                self.spec.in_channels
            ));
        }
        let s = self.squeeze_act.forward(self.squeeze.forward(input)?)?;
        let a = self.expand1_act.forward(self.expand1.forward(s.clone())?)?;
        let b = self.expand3_act.forward(self.expand3.forward(s)?)?;
        Ok(concat_batch_channels(&a, &b))
    }

    pub fn backward(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        let (ga, gb) = split_batch_channels(&grad, self.spec.expand1_channels)?;
        let ds1 = self.expand1.backward(self.expand1_act.backward(ga)?)?;
        let mut ds = self.expand3.backward(self.expand3_act.backward(gb)?)?;
        add_into(&mut ds, &ds1);
        self.squeeze.backward(self.squeeze_act.backward(ds)?)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.squeeze.visit_params(f);
        self.expand1.visit_params(f);
        self.expand3.visit_params(f);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.squeeze.visit_params_ref(f);
        self.expand1.visit_params_ref(f);
        self.expand3.visit_params_ref(f);
    }
}

/// Concatenates two `[N, C_i, H, W]` tensors along channels.
pub(crate) fn concat_batch_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    let n = sa[0];
    let (ca, cb) = (a.len() / n, b.len() / n);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        out.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    Tensor::from_parts(vec![n, sa[1] + sb[1], sa[2], sa[3]], out)
}

/// Splits `[N, C, H, W]` into the first `first` channels and the rest.
pub(crate) fn split_batch_channels<T: Real>(t: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = dims4(t, "channel split")?;
    if first > c {
        return shape_err(format!("cannot split {first} channels from {c}"));
    }
    let plane = h * w;
    let (la, lb) = (first * plane, (c - first) * plane);
    let mut a = Vec::with_capacity(n * la);
    let mut b = Vec::with_capacity(n * lb);
    for chunk in t.data().chunks(c * plane) {
        a.extend_from_slice(&chunk[..la]);
        b.extend_from_slice(&chunk[la..]);
    }
    Ok((
        Tensor::from_parts(vec![n, first, h, w], a),
        Tensor::from_parts(vec![n, c - first, h, w], b),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_arithmetic() {
        let spec = FireSpec::new(16, 8, 16, 16).unwrap();
        assert_eq!(spec.param_count(), 1448);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fire = Fire::<f32>::new("f", spec, ActivationKind::Elu, &mut rng);
        let mut n = 0;
        fire.visit_params_ref(&mut |p| n += p.len());
        assert_eq!(n, 1448);
    }

    #[test]
    fn output_channels_and_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (i, s, e1, e3) in [(4, 2, 3, 5), (8, 3, 2, 2), (3, 1, 4, 1)] {
            let spec = FireSpec::new(i, s, e1, e3).unwrap();
            let mut fire = Fire::<f32>::new("f", spec, ActivationKind::Relu, &mut rng);
            let y = fire.forward(Tensor::zeros(&[2, i, 5, 6])).unwrap();
            assert_eq!(y.shape(), &[2, e1 + e3, 5, 6]);
        }
    }

    #[test]
    fn spec_invariants() {
        assert!(FireSpec::new(16, 32, 16, 16).is_err());
        assert!(FireSpec::new(16, 0, 16, 16).is_err());
    }

    #[test]
    fn channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = FireSpec::new(4, 2, 3, 5).unwrap();
        let mut fire = Fire::<f32>::new("f", spec, ActivationKind::Relu, &mut rng);
        assert!(fire.forward(Tensor::zeros(&[1, 5, 3, 3])).is_err());
    }

    #[test]
    fn split_inverts_concat() {
        let a = Tensor::<f32>::from_fn(&[2, 2, 2, 3], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[2, 3, 2, 3], |i| -(i as f32));
        let c = concat_batch_channels(&a, &b);
        let (a2, b2) = split_batch_channels(&c, 2).unwrap();
        assert_eq!((a2, b2), (a, b));
    }
}
