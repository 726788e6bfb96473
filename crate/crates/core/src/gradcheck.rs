//! Finite-difference verification of every backward pass.
//!
//! Each check runs a module in `f64`, contracts its output with a fixed random
//! weight tensor `w` to get the scalar `L = sum(w * y)`, and compares the
//! analytic gradients from `backward(w)` against [`finite_diff_grad`] of `L`,
//! for the input and for the parameters.

use rand::{seq::index::sample, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{
    Activation, ActivationKind, BatchNorm2d, Conv2d, Dropout, Fire, FireSpec, Flatten, GlobalAvgPool, Layer, LayerMode,
    Linear, Param, Pool, PoolKind,
};
use crate::models::{Model, ModelConfig, ModelKind};
use crate::recurrent::{Decoder, Encoder, LstmCell, LstmState};
use crate::tensor::{finite_diff_grad, Tensor};
use crate::training::mse_loss;

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Anything with a forward/backward pair over `f64` tensors.
pub trait Differentiable: Clone {
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>>;
    fn backward(&mut self, grad: Tensor<f64>) -> Result<Tensor<f64>>;
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f64>));
}

/// A single layer evaluated in a fixed mode.
#[derive(Clone, Debug)]
pub struct LayerUnderTest {
    pub layer: Layer<f64>,
    pub mode: LayerMode,
}

impl Differentiable for LayerUnderTest {
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.layer.forward(x.clone(), self.mode)
    }

    fn backward(&mut self, grad: Tensor<f64>) -> Result<Tensor<f64>> {
        self.layer.backward(grad)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.layer.visit_params(f)
    }
}

/// Encoder followed by a zero-input decoder: `[N, T_in, I] -> [N, T_out, H]`.
#[derive(Clone, Debug)]
pub struct EncoderDecoder {
    pub encoder: Encoder<f64>,
    pub decoder: Decoder<f64>,
}

impl EncoderDecoder {
    pub fn new(input: usize, hidden: usize, t_in: usize, t_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(LstmCell::new("enc", input, hidden, rng), t_in),
            decoder: Decoder::new(LstmCell::new("dec", input, hidden, rng), t_out)?,
        })
    }
}

/// `[N, T, D]` -> T tensors of `[N, D]`.
pub(crate) fn unstack_time(x: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    (0..t)
        .map(|s| {
            let mut v = Vec::with_capacity(n * d);
            for i in 0..n {
                v.extend_from_slice(&x.data()[(i * t + s) * d..(i * t + s + 1) * d]);
            }
            Tensor::from_parts(vec![n, d], v)
        })
        .collect()
}

pub(crate) fn stack_time(xs: &[Tensor<f64>]) -> Tensor<f64> {
    let (t, n, d) = (xs.len(), xs[0].shape()[0], xs[0].shape()[1]);
    let mut v = vec![0.0; n * t * d];
    for (s, x) in xs.iter().enumerate() {
        for i in 0..n {
            v[(i * t + s) * d..(i * t + s + 1) * d].copy_from_slice(&x.data()[i * d..(i + 1) * d]);
        }
    }
    Tensor::from_parts(vec![n, t, d], v)
}

impl Differentiable for EncoderDecoder {
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let n = x.shape()[0];
        let init = LstmState::zeros(n, self.encoder.cell.hidden_dim());
        let state = self.encoder.encode(&unstack_time(x), &init)?;
        Ok(stack_time(&self.decoder.decode(&state)?))
    }

    fn backward(&mut self, grad: Tensor<f64>) -> Result<Tensor<f64>> {
        let d_init = self.decoder.backward(&unstack_time(&grad))?;
        let (dxs, _) = self.encoder.backward(&d_init)?;
        Ok(stack_time(&dxs))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.encoder.cell.visit_params(f);
        self.decoder.cell.visit_params(f);
    }
}

/// A whole network followed by the MSE loss against a fixed target; the
/// output is the one-element loss.
#[derive(Clone, Debug)]
pub struct ModelUnderTest {
    pub model: Model<f64>,
    pub target: Tensor<f64>,
    loss_grad: Option<Tensor<f64>>,
}

impl ModelUnderTest {
    /// Puts the model in train mode with dropout masks frozen after the first pass.
    pub fn new(mut model: Model<f64>, target: Tensor<f64>) -> Self {
        model.set_mode(LayerMode::Train);
        model.freeze_dropout(true);
        Self {
            model,
            target,
            loss_grad: None,
        }
    }
}

impl Differentiable for ModelUnderTest {
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let y = self.model.forward(x)?;
        let (loss, grad) = mse_loss(&y, &self.target)?;
        self.loss_grad = Some(grad);
        Ok(Tensor::from_parts(vec![1], vec![loss]))
    }

    fn backward(&mut self, grad: Tensor<f64>) -> Result<Tensor<f64>> {
        let g = self.loss_grad.take().expect("forward before backward");
        self.model.backward(&g.map(|v| v * grad.data()[0]))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.model.visit_params(f);
    }
}

/// Which parameter entries to verify.
#[derive(Clone, Copy, Debug)]
pub enum ParamSelection {
    All,
    /// `count` entries drawn uniformly across all parameters.
    Random {
        count: usize,
        seed: u64,
    },
}

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub input_error: f64,
    pub param_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.input_error.max(self.param_error)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= self.tolerance
    }
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn nth_param(m: &mut impl Differentiable, idx: usize, f: impl FnOnce(&mut Param<f64>)) {
    let mut f = Some(f);
    let mut k = 0;
    m.visit_params(&mut |p| {
        if k == idx {
            if let Some(f) = f.take() {
                f(p);
            }
        }
        k += 1;
    });
}

/// Runs the analytic-vs-numeric comparison for one module and input.
pub fn check<M: Differentiable>(
    name: &str,
    module: &M,
    input: &Tensor<f64>,
    selection: ParamSelection,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheck> {
    check_sampled(name, module, input, ParamSelection::All, selection, tolerance, seed)
}

/// Like [`check`], but the input gradient is also compared only on the
/// entries picked by `input_selection`.
pub fn check_sampled<M: Differentiable>(
    name: &str,
    module: &M,
    input: &Tensor<f64>,
    input_selection: ParamSelection,
    selection: ParamSelection,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheck> {
    // One warm-up forward so stateful layers (a frozen dropout mask) settle
    // before the module is snapshotted.
    let mut base = module.clone();
    let y = base.forward(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(y.shape(), |_| rng.gen_range(-1.0..1.0));

    let mut analytic = base.clone();
    analytic.visit_params(&mut |p| p.zero_grad());
    analytic.forward(input)?;
    let dx = analytic.backward(w.clone())?;

    let objective = |m: &M, x: &Tensor<f64>| -> f64 {
        let mut m = m.clone();
        match m.forward(x) {
            Ok(y) => dot(&y, &w),
            Err(_) => f64::NAN,
        }
    };

    let input_error = match input_selection {
        ParamSelection::All => {
            let numeric_dx = finite_diff_grad(|x| objective(&base, x), input, GRADCHECK_EPS)?;
            relative_error(dx.data(), numeric_dx.data())
        }
        ParamSelection::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = sample(&mut rng, input.len(), count.min(input.len())).into_vec();
            let x0 = Tensor::from_parts(vec![idx.len()], idx.iter().map(|&i| input.data()[i]).collect());
            let numeric = finite_diff_grad(
                |vals| {
                    let mut x = input.clone();
                    for (&i, &v) in idx.iter().zip(vals.data()) {
                        x.data_mut()[i] = v;
                    }
                    objective(&base, &x)
                },
                &x0,
                GRADCHECK_EPS,
            )?;
            let exact: Vec<f64> = idx.iter().map(|&i| dx.data()[i]).collect();
            relative_error(&exact, numeric.data())
        }
    };

    let mut sizes = Vec::new();
    let mut grads = Vec::new();
    analytic.visit_params(&mut |p| {
        sizes.push(p.len());
        grads.push(p.grad.data().to_vec());
    });
    let total: usize = sizes.iter().sum();
    let picks: Vec<(usize, usize)> = match selection {
        ParamSelection::All => sizes
            .iter()
            .enumerate()
            .flat_map(|(j, &s)| (0..s).map(move |e| (j, e)))
            .collect(),
        ParamSelection::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, total, count.min(total))
                .into_iter()
                .map(|mut flat| {
                    let mut j = 0;
                    while flat >= sizes[j] {
                        flat -= sizes[j];
                        j += 1;
                    }
                    (j, flat)
                })
                .collect()
        }
    };

    let mut param_error = 0.0;
    if !picks.is_empty() {
        let mut start = Vec::with_capacity(picks.len());
        for &(j, e) in &picks {
            let mut v = 0.0;
            nth_param(&mut base.clone(), j, |p| v = p.value.data()[e]);
            start.push(v);
        }
        let x0 = Tensor::from_parts(vec![picks.len()], start);
        let numeric = finite_diff_grad(
            |vals| {
                let mut m = base.clone();
                for (&(j, e), &v) in picks.iter().zip(vals.data()) {
                    nth_param(&mut m, j, |p| p.value.data_mut()[e] = v);
                }
                objective(&m, input)
            },
            &x0,
            GRADCHECK_EPS,
        )?;
        let exact: Vec<f64> = picks.iter().map(|&(j, e)| grads[j][e]).collect();
        param_error = relative_error(&exact, numeric.data());
    }

    Ok(GradCheck {
        name: name.to_string(),
        input_shape: input.shape().to_vec(),
        input_error,
        param_error,
        tolerance,
    })
}

/// Zero-initialised biases put ReLU pre-activations exactly on the kink
/// wherever all inputs are dead; shift them off it.
fn jitter_biases(m: &mut impl Differentiable, rng: &mut ChaCha8Rng) {
    m.visit_params(&mut |p| {
        if p.name.ends_with("bias") || p.name.contains(".b_") {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.gen_range(-0.5..0.5));
        }
    });
}

fn random_input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Every suite entry name, in run order.
pub const SUITE: [&str; 13] = [
    "conv2d",
    "maxpool",
    "avgpool",
    "batchnorm2d",
    "relu",
    "elu",
    "dropout",
    "linear",
    "fire",
    "global_avg_pool",
    "flatten",
    "lstm",
    "model",
];

fn layer_cases(name: &str, rng: &mut ChaCha8Rng) -> Result<Vec<(LayerUnderTest, Vec<usize>)>> {
    let t = |layer: Layer<f64>, shape: &[usize]| {
        (
            LayerUnderTest {
                layer,
                mode: LayerMode::Train,
            },
            shape.to_vec(),
        )
    };
    let cases = match name {
        "conv2d" => vec![
            t(Conv2d::new("c", 2, 3, 3, 1, 1, rng).into(), &[2, 2, 5, 6]),
            t(Conv2d::new("c", 3, 2, 3, 2, 1, rng).into(), &[1, 3, 7, 5]),
            t(Conv2d::new("c", 1, 2, 1, 1, 0, rng).into(), &[2, 1, 4, 4]),
            t(Conv2d::new("c", 2, 2, 5, 1, 2, rng).into(), &[3, 2, 4, 5]),
        ],
        "maxpool" | "avgpool" => {
            let kind = if name == "maxpool" {
                PoolKind::Max
            } else {
                PoolKind::Avg
            };
            vec![
                t(Pool::halving(kind).into(), &[2, 2, 5, 7]),
                t(Pool::halving(kind).into(), &[1, 3, 6, 6]),
                t(Pool::halving(kind).into(), &[2, 1, 9, 4]),
                t(Pool::new(kind, 2, 2, 0).into(), &[1, 2, 4, 6]),
            ]
        }
        "batchnorm2d" => {
            let mut cases = vec![
                t(BatchNorm2d::new("bn", 3).into(), &[4, 3, 2, 3]),
                t(BatchNorm2d::new("bn", 2).into(), &[2, 2, 3, 3]),
                t(BatchNorm2d::new("bn", 1).into(), &[5, 1, 2, 2]),
            ];
            let mut bn = BatchNorm2d::<f64>::new("bn", 2);
            bn.running_mean = random_input(&[2], rng);
            bn.running_var = Tensor::from_fn(&[2], |_| rng.gen_range(0.5..2.0));
            bn.gamma.value = Tensor::from_fn(&[2], |_| rng.gen_range(0.5..1.5));
            let mut eval = t(bn.into(), &[3, 2, 2, 2]);
            eval.0.mode = LayerMode::Eval;
            cases.push(eval);
            cases
        }
        "relu" | "elu" => {
            let kind = if name == "relu" {
                ActivationKind::Relu
            } else {
                ActivationKind::Elu
            };
            vec![
                t(Activation::new(kind).into(), &[2, 3, 4, 4]),
                t(Activation::new(kind).into(), &[5, 7]),
                t(Activation::new(kind).into(), &[1, 2, 3, 9]),
            ]
        }
        "dropout" => [(vec![2, 3, 4], 0.25), (vec![6, 5], 0.5), (vec![1, 2, 3, 4], 0.1)]
            .into_iter()
            .map(|(shape, p)| -> Result<_> {
                let mut d = Dropout::new(p, rng.gen())?;
                d.freeze_mask(true);
                Ok(t(d.into(), &shape))
            })
            .collect::<Result<Vec<_>>>()?,
        "linear" => vec![
            t(Linear::new("l", 4, 2, rng).into(), &[3, 4]),
            t(Linear::new("l", 5, 5, rng).into(), &[1, 5]),
            t(Linear::new("l", 2, 6, rng).into(), &[4, 2]),
        ],
        "fire" => vec![
            t(
                Fire::new("f", FireSpec::new(4, 2, 3, 3)?, ActivationKind::Elu, rng).into(),
                &[2, 4, 5, 5],
            ),
            t(
                Fire::new("f", FireSpec::new(3, 2, 2, 3)?, ActivationKind::Elu, rng).into(),
                &[1, 3, 4, 6],
            ),
            t(
                Fire::new("f", FireSpec::new(6, 3, 4, 2)?, ActivationKind::Relu, rng).into(),
                &[2, 6, 3, 3],
            ),
        ],
        "global_avg_pool" => vec![
            t(GlobalAvgPool::new().into(), &[2, 3, 4, 5]),
            t(GlobalAvgPool::new().into(), &[1, 2, 1, 1]),
            t(GlobalAvgPool::new().into(), &[3, 1, 2, 7]),
        ],
        "flatten" => vec![
            t(Flatten::new().into(), &[2, 3, 4, 5]),
            t(Flatten::new().into(), &[4, 6]),
            t(Flatten::new().into(), &[1, 2, 3]),
        ],
        _ => Vec::new(),
    };
    Ok(cases)
}

/// Runs the whole oracle suite, or just the entries whose name equals `only`.
pub fn run_suite(only: Option<&str>) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut out = Vec::new();
    for name in SUITE {
        if only.is_some_and(|o| o != name) {
            continue;
        }
        if name == "lstm" {
            // 6 encoder steps + 12 decoder steps
            for &(n, input, hidden) in &[(2, 3, 4), (1, 4, 3), (3, 2, 5)] {
                let mut module = EncoderDecoder::new(input, hidden, 6, 12, &mut rng)?;
                jitter_biases(&mut module, &mut rng);
                let x = random_input(&[n, 6, input], &mut rng);
                out.push(check(
                    name,
                    &module,
                    &x,
                    ParamSelection::All,
                    LAYER_TOLERANCE,
                    rng.gen(),
                )?);
            }
            continue;
        }
        if name == "model" {
            for (kind, (h, w)) in [
                (ModelKind::Fcn, (8, 10)),
                (ModelKind::SqueezeFcn, (8, 10)),
                (ModelKind::Frfcn, (8, 10)),
                (ModelKind::Baseline, (36, 36)),
            ] {
                let config = ModelConfig {
                    input_height: h,
                    input_width: w,
                    baseline_pad: true,
                    ..ModelConfig::default()
                };
                let mut model = Model::<f64>::build(kind, &config, rng.gen())?;
                // one jittered copy per kind keeps ReLUs off their kinks
                model.visit_params(&mut |p| {
                    if p.name.ends_with("bias") {
                        p.value
                            .data_mut()
                            .iter_mut()
                            .for_each(|v| *v += rng.gen_range(-0.1..0.1));
                    }
                });
                let x = random_input(&model.input_shape(2), &mut rng);
                let target = Tensor::from_fn(&[2, config.steps_out, 2], |_| rng.gen_range(0.0..1.0));
                let module = ModelUnderTest::new(model, target);
                let input_pick = ParamSelection::Random {
                    count: 8,
                    seed: rng.gen(),
                };
                let param_pick = ParamSelection::Random {
                    count: 8,
                    seed: rng.gen(),
                };
                out.push(check_sampled(
                    name,
                    &module,
                    &x,
                    input_pick,
                    param_pick,
                    MODEL_TOLERANCE,
                    rng.gen(),
                )?);
            }
            continue;
        }
        for (mut module, shape) in layer_cases(name, &mut rng)? {
            jitter_biases(&mut module, &mut rng);
            let x = random_input(&shape, &mut rng);
            out.push(check(
                name,
                &module,
                &x,
                ParamSelection::All,
                LAYER_TOLERANCE,
                rng.gen(),
            )?);
        }
    }
    Ok(out)
}
