//! LSTM cell, sequence encoder and decoder with backpropagation through time.
//!
//! All tensors are batched: states are `[N, hidden]`, inputs `[N, input]`.
//! Every gate reads the concatenation `z = [h_{t-1}, x_t]`:
//!
//! ```text
//! f = sigmoid(W_f z + b_f)    i = sigmoid(W_i z + b_i)
//! g = tanh(W_c z + b_c)       o = sigmoid(W_o z + b_o)
//! c_t = f * c_{t-1} + i * g   h_t = o * tanh(c_t)
//! ```

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::layers::Param;
use crate::tensor::{gemm, Real, Tensor};

/// Hidden and cell state, both `[N, hidden]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<T = f32> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Real> LstmState<T> {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[batch, hidden]),
            c: Tensor::zeros(&[batch, hidden]),
        }
    }

    pub fn batch(&self) -> usize {
        self.h.shape()[0]
    }
}

const GATES: [&str; 4] = ["f", "i", "c", "o"];

#[derive(Clone, Debug)]
pub struct LstmCell<T = f32> {
    input_dim: usize,
    hidden_dim: usize,
    /// Gate weights in order forget, input, candidate, output; each `[hidden, hidden + input]`.
    pub weights: [Param<T>; 4],
    pub biases: [Param<T>; 4],
}

/// Everything one step needs for its backward pass.
#[derive(Clone, Debug)]
struct StepCache<T> {
    z: Vec<T>,
    f: Vec<T>,
    i: Vec<T>,
    g: Vec<T>,
    o: Vec<T>,
    c_prev: Vec<T>,
    tanh_c: Vec<T>,
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Real> LstmCell<T> {
    /// Weights uniform in `±1/sqrt(hidden)`, biases zero except the forget gate at 1.
    pub fn new(name: &str, input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let cols = hidden_dim + input_dim;
        let weights = GATES.map(|g| {
            Param::new(
                format!("{name}.w_{g}"),
                Tensor::from_fn(&[hidden_dim, cols], |_| T::lit(rng.gen_range(-bound..bound))),
            )
        });
        let biases = GATES.map(|g| {
            let init = if g == "f" { T::one() } else { T::zero() };
            Param::new(format!("{name}.b_{g}"), Tensor::filled(&[hidden_dim], init))
        });
        Self {
            input_dim,
            hidden_dim,
            weights,
            biases,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn check(&self, state: &LstmState<T>, x: &Tensor<T>) -> Result<usize> {
        let n = state.batch();
        let hd = [n, self.hidden_dim];
        if state.h.shape() != hd || state.c.shape() != hd {
            return shape_err(format!(
                "lstm state must be [{n}, {}], got h {:?} c {:?}",
                self.hidden_dim,
                state.h.shape(),
                state.c.shape()
            ));
        }
        if x.shape() != [n, self.input_dim] {
            return shape_err(format!(
                "lstm input must be [{n}, {}], got {:?}",
                self.input_dim,
                x.shape()
            ));
        }
        Ok(n)
    }

    fn step_cached(&self, state: &LstmState<T>, x: &Tensor<T>) -> Result<(LstmState<T>, StepCache<T>)> {
        let n = self.check(state, x)?;
        let (hd, id) = (self.hidden_dim, self.input_dim);
        let cols = hd + id;
        let mut z = Vec::with_capacity(n * cols);
        for r in 0..n {
            z.extend_from_slice(&state.h.data()[r * hd..(r + 1) * hd]);
            z.extend_from_slice(&x.data()[r * id..(r + 1) * id]);
        }
        let mut pre: [Vec<T>; 4] = Default::default();
        for (k, out) in pre.iter_mut().enumerate() {
            *out = (0..n)
                .flat_map(|_| self.biases[k].value.data().iter().copied())
                .collect();
            gemm(
                false,
                true,
                n,
                hd,
                cols,
                T::one(),
                &z,
                self.weights[k].value.data(),
                T::one(),
                out,
            );
        }
        let [pf, pi, pg, po] = pre;
        let f: Vec<T> = pf.into_iter().map(sigmoid).collect();
        let i: Vec<T> = pi.into_iter().map(sigmoid).collect();
        let g: Vec<T> = pg.into_iter().map(|v| v.tanh()).collect();
        let o: Vec<T> = po.into_iter().map(sigmoid).collect();
        let c_prev = state.c.data().to_vec();
        let c: Vec<T> = (0..n * hd).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
        let tanh_c: Vec<T> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<T> = (0..n * hd).map(|j| o[j] * tanh_c[j]).collect();
        let next = LstmState {
            h: Tensor::from_parts(vec![n, hd], h),
            c: Tensor::from_parts(vec![n, hd], c),
        };
        Ok((
            next,
            StepCache {
                z,
                f,
                i,
                g,
                o,
                c_prev,
                tanh_c,
            },
        ))
    }

    /// One recurrence step without caching.
    pub fn step(&self, state: &LstmState<T>, x: &Tensor<T>) -> Result<LstmState<T>> {
        Ok(self.step_cached(state, x)?.0)
    }

    /// Backward through one step; returns `(dh_prev, dc_prev, dx)` and
    /// accumulates parameter gradients.
    fn step_backward(&mut self, cache: &StepCache<T>, dh: &[T], dc: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (hd, id) = (self.hidden_dim, self.input_dim);
        let cols = hd + id;
        let n = dh.len() / hd;
        let one = T::one();
        let mut da: [Vec<T>; 4] = std::array::from_fn(|_| vec![T::zero(); n * hd]);
        let mut dc_prev = vec![T::zero(); n * hd];
        for j in 0..n * hd {
            let (f, i, g, o, tc) = (cache.f[j], cache.i[j], cache.g[j], cache.o[j], cache.tanh_c[j]);
            let d_o = dh[j] * tc;
            let dct = dc[j] + dh[j] * o * (one - tc * tc);
            da[0][j] = dct * cache.c_prev[j] * f * (one - f);
            da[1][j] = dct * g * i * (one - i);
            da[2][j] = dct * i * (one - g * g);
            da[3][j] = d_o * o * (one - o);
            dc_prev[j] = dct * f;
        }
        let mut dz = vec![T::zero(); n * cols];
        for (k, d) in da.iter().enumerate() {
            for row in d.chunks(hd) {
                self.biases[k]
                    .grad
                    .data_mut()
                    .iter_mut()
                    .zip(row)
                    .for_each(|(b, &v)| *b += v);
            }
            gemm(
                true,
                false,
                hd,
                cols,
                n,
                one,
                d,
                &cache.z,
                one,
                self.weights[k].grad.data_mut(),
            );
            gemm(
                false,
                false,
                n,
                cols,
                hd,
                one,
                d,
                self.weights[k].value.data(),
                one,
                &mut dz,
            );
        }
        let mut dh_prev = Vec::with_capacity(n * hd);
        let mut dx = Vec::with_capacity(n * id);
        for row in dz.chunks(cols) {
            dh_prev.extend_from_slice(&row[..hd]);
            dx.extend_from_slice(&row[hd..]);
        }
        (dh_prev, dc_prev, dx)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.weights.iter_mut().for_each(&mut *f);
        self.biases.iter_mut().for_each(f);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.weights.iter().for_each(&mut *f);
        self.biases.iter().for_each(f);
    }

    pub fn count_params(&self) -> usize {
        let mut n = 0;
        self.visit_params_ref(&mut |p| n += p.len());
        n
    }
}

/// An unrolled run of a cell with the caches BPTT needs.
#[derive(Clone, Debug)]
struct Unrolled<T> {
    steps: Vec<StepCache<T>>,
    batch: usize,
}

impl<T: Real> Unrolled<T> {
    fn run(cell: &LstmCell<T>, init: &LstmState<T>, inputs: &[Tensor<T>]) -> Result<(Self, Vec<LstmState<T>>)> {
        let mut state = init.clone();
        let mut steps = Vec::with_capacity(inputs.len());
        let mut states = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (next, cache) = cell.step_cached(&state, x)?;
            steps.push(cache);
            states.push(next.clone());
            state = next;
        }
        Ok((
            Self {
                steps,
                batch: init.batch(),
            },
            states,
        ))
    }

    /// `dh_steps[t]` is the loss gradient w.r.t. `h_t` from outside the recurrence;
    /// `d_final` adds gradient on the last state. Returns input and initial-state gradients.
    fn backward(
        &self,
        cell: &mut LstmCell<T>,
        dh_steps: Option<&[Tensor<T>]>,
        d_final: Option<&LstmState<T>>,
    ) -> (Vec<Tensor<T>>, LstmState<T>) {
        let (n, hd, id) = (self.batch, cell.hidden_dim, cell.input_dim);
        let mut dh = d_final.map_or_else(|| vec![T::zero(); n * hd], |s| s.h.data().to_vec());
        let mut dc = d_final.map_or_else(|| vec![T::zero(); n * hd], |s| s.c.data().to_vec());
        let mut dxs = vec![Tensor::zeros(&[n, id]); self.steps.len()];
        for t in (0..self.steps.len()).rev() {
            if let Some(ext) = dh_steps {
                dh.iter_mut().zip(ext[t].data()).for_each(|(a, &b)| *a += b);
            }
            let (dhp, dcp, dx) = cell.step_backward(&self.steps[t], &dh, &dc);
            dxs[t] = Tensor::from_parts(vec![n, id], dx);
            dh = dhp;
            dc = dcp;
        }
        (
            dxs,
            LstmState {
                h: Tensor::from_parts(vec![n, hd], dh),
                c: Tensor::from_parts(vec![n, hd], dc),
            },
        )
    }
}

/// Consumes a fixed-length input sequence and returns the final state.
#[derive(Clone, Debug)]
pub struct Encoder<T = f32> {
    pub cell: LstmCell<T>,
    seq_len: usize,
    cache: Option<Unrolled<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn new(cell: LstmCell<T>, seq_len: usize) -> Self {
        Self {
            cell,
            seq_len,
            cache: None,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn encode(&mut self, inputs: &[Tensor<T>], init: &LstmState<T>) -> Result<LstmState<T>> {
        if inputs.len() != self.seq_len {
            return invalid(format!("encoder expects {} inputs, got {}", self.seq_len, inputs.len()));
        }
        let (unrolled, states) = Unrolled::run(&self.cell, init, inputs)?;
        self.cache = Some(unrolled);
        Ok(states.last().cloned().unwrap_or_else(|| init.clone()))
    }

    /// Gradients w.r.t. each input and the initial state, given the gradient on
    /// the final state.
    pub fn backward(&mut self, d_final: &LstmState<T>) -> Result<(Vec<Tensor<T>>, LstmState<T>)> {
        let Some(unrolled) = self.cache.take() else {
            return shape_err("encoder backward called before encode");
        };
        Ok(unrolled.backward(&mut self.cell, None, Some(d_final)))
    }
}

/// Runs the cell for a fixed number of steps on zero inputs from a handed-off
/// state, emitting every hidden vector.
#[derive(Clone, Debug)]
pub struct Decoder<T = f32> {
    pub cell: LstmCell<T>,
    steps: usize,
    cache: Option<Unrolled<T>>,
}

impl<T: Real> Decoder<T> {
    pub fn new(cell: LstmCell<T>, steps: usize) -> Result<Self> {
        if steps < 1 {
            return invalid("decoder needs at least one step");
        }
        Ok(Self {
            cell,
            steps,
            cache: None,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn decode(&mut self, init: &LstmState<T>) -> Result<Vec<Tensor<T>>> {
        let n = init.batch();
        let zeros = vec![Tensor::zeros(&[n, self.cell.input_dim]); self.steps];
        let (unrolled, states) = Unrolled::run(&self.cell, init, &zeros)?;
        self.cache = Some(unrolled);
        Ok(states.into_iter().map(|s| s.h).collect())
    }

    /// Gradient w.r.t. the initial state given per-step gradients on the outputs.
    pub fn backward(&mut self, d_outputs: &[Tensor<T>]) -> Result<LstmState<T>> {
        let Some(unrolled) = self.cache.take() else {
            return shape_err("decoder backward called before decode");
        };
        if d_outputs.len() != self.steps {
            return shape_err(format!(
                "decoder expects {} output gradients, got {}",
                self.steps,
                d_outputs.len()
            ));
        }
        Ok(unrolled.backward(&mut self.cell, Some(d_outputs), None).1)
    }
}

/// Number of occurrences of `h_0` in the fully unrolled expressions for `h_t`
/// and `c_t`.
///
/// Each `h_t` reads `h_{t-1}` through four gate functions and `c_{t-1}` once;
/// each `c_t` reads `h_{t-1}` three times (forget, input, candidate) and
/// `c_{t-1}` once. Hence `A_h(t) = 4 A_h(t-1) + A_c(t-1)`,
/// `A_c(t) = 3 A_h(t-1) + A_c(t-1)` from `(1, 0)`. Returns `None` on overflow.
pub fn feedback_path_count(t: u32) -> Option<(u128, u128)> {
    let (mut ah, mut ac) = (1u128, 0u128);
    for _ in 0..t {
        let nh = ah.checked_mul(4)?.checked_add(ac)?;
        let nc = ah.checked_mul(3)?.checked_add(ac)?;
        ah = nh;
        ac = nc;
    }
    Some((ah, ac))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_cell_gives_zero_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cell = LstmCell::<f64>::new("l", 3, 4, &mut rng);
        cell.visit_params(&mut |p| p.value.fill(0.0));
        let s = cell.step(&LstmState::zeros(2, 4), &Tensor::zeros(&[2, 3])).unwrap();
        assert!(s.h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_preserves_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cell = LstmCell::<f64>::new("l", 3, 4, &mut rng);
        cell.visit_params(&mut |p| p.value.fill(0.0));
        cell.biases[0].value.fill(50.0);
        cell.biases[1].value.fill(-50.0);
        let init = LstmState {
            h: rand_tensor(&[2, 4], &mut rng),
            c: rand_tensor(&[2, 4], &mut rng),
        };
        let s = cell.step(&init, &rand_tensor(&[2, 3], &mut rng)).unwrap();
        for (a, b) in s.c.data().iter().zip(init.c.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = LstmCell::<f32>::new("l", 16, 64, &mut rng);
        assert!(cell.biases[0].value.data().iter().all(|&v| v == 1.0));
        for w in &cell.weights {
            assert_eq!(w.value.shape(), &[64, 80]);
        }
        assert_eq!(cell.count_params(), 4 * 64 * 80 + 4 * 64);
    }

    #[test]
    fn encoder_length_one_equals_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell = LstmCell::<f64>::new("l", 3, 5, &mut rng);
        let x = rand_tensor(&[2, 3], &mut rng);
        let init = LstmState::zeros(2, 5);
        let expect = cell.step(&init, &x).unwrap();
        let mut enc = Encoder::new(cell, 1);
        assert_eq!(enc.encode(&[x], &init).unwrap(), expect);
    }

    #[test]
    fn encoder_rejects_wrong_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut enc = Encoder::new(LstmCell::<f32>::new("l", 2, 3, &mut rng), 6);
        assert!(enc.encode(&[Tensor::zeros(&[1, 2])], &LstmState::zeros(1, 3)).is_err());
    }

    #[test]
    fn encoder_order_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut enc = Encoder::new(LstmCell::<f64>::new("l", 4, 6, &mut rng), 6);
        let xs: Vec<_> = (0..6).map(|_| rand_tensor(&[1, 4], &mut rng)).collect();
        let init = LstmState::zeros(1, 6);
        let a = enc.encode(&xs, &init).unwrap();
        let mut rev = xs.clone();
        rev.reverse();
        let b = enc.encode(&rev, &init).unwrap();
        assert_ne!(a.h, b.h);
    }

    #[test]
    fn first_input_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut enc = Encoder::new(LstmCell::<f64>::new("l", 4, 6, &mut rng), 6);
        let xs: Vec<_> = (0..6).map(|_| rand_tensor(&[1, 4], &mut rng)).collect();
        let fin = enc.encode(&xs, &LstmState::zeros(1, 6)).unwrap();
        let d = LstmState {
            h: Tensor::filled(fin.h.shape(), 1.0),
            c: Tensor::zeros(fin.c.shape()),
        };
        let (dxs, _) = enc.backward(&d).unwrap();
        assert!(dxs[0].data().iter().any(|&v| v.abs() > 1e-8));
    }

    #[test]
    fn decoder_steps_and_init_dependence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cell = LstmCell::<f64>::new("l", 4, 6, &mut rng);
        assert!(Decoder::new(cell.clone(), 0).is_err());
        let mut one = Decoder::new(cell.clone(), 1).unwrap();
        assert_eq!(one.decode(&LstmState::zeros(2, 6)).unwrap().len(), 1);
        let mut dec = Decoder::new(cell, 12).unwrap();
        let a = LstmState {
            h: rand_tensor(&[1, 6], &mut rng),
            c: rand_tensor(&[1, 6], &mut rng),
        };
        let b = LstmState {
            h: rand_tensor(&[1, 6], &mut rng),
            c: rand_tensor(&[1, 6], &mut rng),
        };
        let ha = dec.decode(&a).unwrap();
        let hb = dec.decode(&b).unwrap();
        assert_eq!(ha.len(), 12);
        for t in 0..12 {
            assert_ne!(ha[t], hb[t]);
        }
        assert_eq!(dec.decode(&a).unwrap(), ha);
    }

    #[test]
    fn path_count_values() {
        assert_eq!(feedback_path_count(0), Some((1, 0)));
        assert_eq!(feedback_path_count(1), Some((4, 3)));
        assert_eq!(feedback_path_count(2), Some((19, 15)));
        for t in 0..=12u32 {
            let (ah, ac) = feedback_path_count(t).unwrap();
            assert!(ah >= 4u128.pow(t));
            let (nh, nc) = feedback_path_count(t + 1).unwrap();
            assert_eq!(nh, 4 * ah + ac);
            assert_eq!(nc, 3 * ah + ac);
            assert!(nh > ah);
        }
        assert_eq!(feedback_path_count(200), None);
    }
}
