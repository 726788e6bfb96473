//! Differentiable feedforward building blocks with hand-written backward passes.
//!
//! Every layer caches what it needs during `forward` and consumes that cache in
//! the following `backward`, which returns the input gradient and accumulates
//! parameter gradients into [`Param::grad`].

mod activation;
mod batchnorm;
mod conv;
mod dropout;
mod fire;
mod linear;
mod pool;
mod shape;

pub use activation::{Activation, ActivationKind};
pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use dropout::Dropout;
pub use fire::{Fire, FireSpec};
pub use linear::Linear;
pub use pool::{Pool, PoolKind};
pub use shape::{Flatten, GlobalAvgPool};

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Switches BatchNorm and Dropout between batch statistics / random masks and
/// their deterministic inference behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerMode {
    Train,
    Eval,
}

/// A trainable tensor together with its gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct Param<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            step_count: 0,
            value,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// He-uniform initialisation: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

/// Any feedforward layer.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Layer<T = f32> {
    Conv2d(Conv2d<T>),
    Pool(Pool),
    BatchNorm2d(BatchNorm2d<T>),
    Activation(Activation<T>),
    Dropout(Dropout),
    Linear(Linear<T>),
    Fire(Fire<T>),
    GlobalAvgPool(GlobalAvgPool),
    Flatten(Flatten),
}

macro_rules! dispatch {
    ($self:ident, $l:ident => $e:expr) => {
        match $self {
            Layer::Conv2d($l) => $e,
            Layer::Pool($l) => $e,
            Layer::BatchNorm2d($l) => $e,
            Layer::Activation($l) => $e,
            Layer::Dropout($l) => $e,
            Layer::Linear($l) => $e,
            Layer::Fire($l) => $e,
            Layer::GlobalAvgPool($l) => $e,
            Layer::Flatten($l) => $e,
        }
    };
}

impl<T: Real> Layer<T> {
    pub fn forward(&mut self, input: Tensor<T>, mode: LayerMode) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => l.forward(input),
            Layer::Pool(l) => l.forward(input),
            Layer::BatchNorm2d(l) => l.forward(input, mode),
            Layer::Activation(l) => l.forward(input),
            Layer::Dropout(l) => l.forward(input, mode),
            Layer::Linear(l) => l.forward(input),
            Layer::Fire(l) => l.forward(input),
            Layer::GlobalAvgPool(l) => l.forward(input),
            Layer::Flatten(l) => l.forward(input),
        }
    }

    pub fn backward(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        dispatch!(self, l => l.backward(grad))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Layer::Conv2d(l) => l.visit_params(f),
            Layer::BatchNorm2d(l) => l.visit_params(f),
            Layer::Linear(l) => l.visit_params(f),
            Layer::Fire(l) => l.visit_params(f),
            _ => {}
        }
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            Layer::Conv2d(l) => l.visit_params_ref(f),
            Layer::BatchNorm2d(l) => l.visit_params_ref(f),
            Layer::Linear(l) => l.visit_params_ref(f),
            Layer::Fire(l) => l.visit_params_ref(f),
            _ => {}
        }
    }

    /// Non-trainable state that must survive a checkpoint round trip.
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Layer::BatchNorm2d(l) = self {
            l.visit_buffers(f);
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Pool(p) => match p.kind() {
                PoolKind::Max => "maxpool",
                PoolKind::Avg => "avgpool",
            },
            Layer::BatchNorm2d(_) => "batchnorm2d",
            Layer::Activation(a) => match a.kind() {
                ActivationKind::Relu => "relu",
                ActivationKind::Elu => "elu",
            },
            Layer::Dropout(_) => "dropout",
            Layer::Linear(_) => "linear",
            Layer::Fire(_) => "fire",
            Layer::GlobalAvgPool(_) => "global_avg_pool",
            Layer::Flatten(_) => "flatten",
        }
    }
}

macro_rules! impl_from {
    ($($v:ident),*) => {$(
        impl<T> From<$v<T>> for Layer<T> {
            fn from(l: $v<T>) -> Self { Layer::$v(l) }
        }
    )*};
}
impl_from!(Conv2d, BatchNorm2d, Activation, Linear, Fire);

impl<T> From<Pool> for Layer<T> {
    fn from(l: Pool) -> Self {
        Layer::Pool(l)
    }
}
impl<T> From<Dropout> for Layer<T> {
    fn from(l: Dropout) -> Self {
        Layer::Dropout(l)
    }
}
impl<T> From<GlobalAvgPool> for Layer<T> {
    fn from(l: GlobalAvgPool) -> Self {
        Layer::GlobalAvgPool(l)
    }
}
impl<T> From<Flatten> for Layer<T> {
    fn from(l: Flatten) -> Self {
        Layer::Flatten(l)
    }
}

/// Layers applied in order.
#[derive(Clone, Debug, Default)]
pub struct Sequential<T = f32> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Into<Layer<T>>) {
        self.layers.push(layer.into());
    }

    pub fn forward(&mut self, mut x: Tensor<T>, mode: LayerMode) -> Result<Tensor<T>> {
        for layer in &mut self.layers {
            x = layer.forward(x, mode)?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, mut grad: Tensor<T>) -> Result<Tensor<T>> {
        for layer in self.layers.iter_mut().rev() {
            grad = layer.backward(grad)?;
        }
        Ok(grad)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_params(f));
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.iter().for_each(|l| l.visit_params_ref(f));
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_buffers(f));
    }

    pub fn count_params(&self) -> usize {
        let mut n = 0;
        self.visit_params_ref(&mut |p| n += p.len());
        n
    }
}

/// Element-wise `dst += src`.
pub(crate) fn add_into<T: Real>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    debug_assert_eq!(dst.shape(), src.shape());
    dst.data_mut().iter_mut().zip(src.data()).for_each(|(d, &s)| *d += s);
}

/// Checks rank-4 input and returns `(n, c, h, w)`.
pub(crate) fn dims4<T: Real>(x: &Tensor<T>, layer: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => crate::error::shape_err(format!("{layer} expects [N,C,H,W], got {:?}", x.shape())),
    }
}

/// Output extent of a strided window: `floor((size + 2p - k) / s) + 1`.
pub fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}
