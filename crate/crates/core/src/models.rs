//! The four driving architectures and their shared forward/backward driver.
//!
//! Feedforward kinds read the six frames stacked along channels,
//! `[N, frames * channels, H, W]`; the recurrent F-RFCN reads
//! `[N, frames, channels, H, W]` (the same memory layout). Every kind emits
//! `[N, steps_out, 2]` with `(steering, motor)` per future step.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::layers::{
    Activation, ActivationKind, BatchNorm2d, Conv2d, Dropout, Fire, FireSpec, Flatten, GlobalAvgPool, Layer, LayerMode,
    Linear, Param, Pool, PoolKind, Sequential,
};
use crate::recurrent::{Decoder, Encoder, LstmCell, LstmState};
use crate::tensor::{Real, Tensor};

/// Controls predicted per time step: steering and motor.
pub const CONTROLS_PER_STEP: usize = 2;
/// Output size every model must produce per sample.
pub const OUTPUT_SIZE: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Fcn,
    SqueezeFcn,
    Frfcn,
    Baseline,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [Self::Fcn, Self::SqueezeFcn, Self::Frfcn, Self::Baseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fcn => "fcn",
            Self::SqueezeFcn => "squeezefcn",
            Self::Frfcn => "frfcn",
            Self::Baseline => "baseline",
        }
    }

    /// Tag byte used in checkpoint files.
    pub fn tag(self) -> u8 {
        match self {
            Self::Fcn => 0,
            Self::SqueezeFcn => 1,
            Self::Frfcn => 2,
            Self::Baseline => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    pub fn is_recurrent(self) -> bool {
        self == Self::Frfcn
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model kind '{s}'")))
    }
}

/// Squeeze / expand-1x1 / expand-3x3 widths of one Fire module; the input
/// width follows from the previous layer.
pub type FireWidths = (usize, usize, usize);

/// Input geometry and channel ladders.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub channels_per_frame: usize,
    pub frames_in: usize,
    pub steps_out: usize,
    pub embedding_dim: usize,
    pub lstm_hidden: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    /// Conv widths per FCN stage; the last width of the last stage is the output.
    pub fcn_stages: Vec<Vec<usize>>,
    pub squeeze_entry: Vec<usize>,
    /// Fire modules grouped between pooling layers.
    pub squeeze_fires: Vec<Vec<FireWidths>>,
    /// Exit conv widths; the last is the output (or the embedding for F-RFCN).
    pub squeeze_exit: Vec<usize>,
    pub baseline_fc: Vec<usize>,
    /// Pad the baseline's 3x3 convs by one pixel so small inputs still fit.
    pub baseline_pad: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_height: 94,
            input_width: 168,
            channels_per_frame: 2,
            frames_in: 6,
            steps_out: 12,
            embedding_dim: 16,
            lstm_hidden: 64,
            head_hidden: 32,
            dropout: 0.25,
            fcn_stages: vec![vec![16, 16, 16], vec![32, 32], vec![40, 40], vec![40, 32, 24, 24]],
            squeeze_entry: vec![16, 16, 16],
            squeeze_fires: vec![
                vec![(8, 16, 16), (16, 32, 32)],
                vec![(16, 32, 32), (24, 48, 48)],
                vec![(24, 48, 48)],
            ],
            squeeze_exit: vec![32, 24, 24],
            baseline_fc: vec![51, 50, 10],
            baseline_pad: false,
        }
    }
}

impl ModelConfig {
    pub fn output_size(&self) -> usize {
        self.steps_out * CONTROLS_PER_STEP
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_size() != OUTPUT_SIZE {
            return invalid(format!(
                "steps_out {} x {CONTROLS_PER_STEP} controls must equal {OUTPUT_SIZE} outputs",
                self.steps_out
            ));
        }
        if self.input_height == 0 || self.input_width == 0 || self.channels_per_frame == 0 || self.frames_in == 0 {
            return invalid("input extents must be positive");
        }
        if self.fcn_stages.iter().any(Vec::is_empty) || self.fcn_stages.is_empty() {
            return invalid("every fcn stage needs at least one conv");
        }
        if self.fcn_stages.last().and_then(|s| s.last()) != Some(&OUTPUT_SIZE) {
            return invalid(format!("last fcn conv must have {OUTPUT_SIZE} channels"));
        }
        if self.squeeze_entry.is_empty() || self.squeeze_exit.is_empty() {
            return invalid("squeeze entry and exit need at least one conv");
        }
        if self.squeeze_exit.last() != Some(&OUTPUT_SIZE) {
            return invalid(format!("last squeeze exit conv must have {OUTPUT_SIZE} channels"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.embedding_dim != 16 {
            log::warn!("embedding dimension overridden to {}", self.embedding_dim);
        }
        Ok(())
    }

    pub fn stacked_channels(&self) -> usize {
        self.frames_in * self.channels_per_frame
    }

    /// Elements of one sample's input.
    pub fn sample_len(&self) -> usize {
        self.stacked_channels() * self.input_height * self.input_width
    }
}

/// Where a probe-able stage begins and which layers it spans.
#[derive(Clone, Debug)]
pub struct ProbeStage {
    pub name: String,
    pub in_channels: usize,
    pub layers: Sequential<f64>,
}

fn conv_block<T: Real>(
    seq: &mut Sequential<T>,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    act: ActivationKind,
    rng: &mut ChaCha8Rng,
) {
    seq.push(Conv2d::new(name, in_ch, out_ch, 3, stride, 1, rng));
    seq.push(Activation::new(act));
    seq.push(BatchNorm2d::new(&format!("{name}.bn"), out_ch));
}

/// 3x3 conv stack; the first conv uses `first_stride`. With `linear_tail` the
/// last conv is left without activation and BatchNorm.
#[allow(clippy::too_many_arguments)]
fn conv_stack<T: Real>(
    seq: &mut Sequential<T>,
    prefix: &str,
    mut in_ch: usize,
    widths: &[usize],
    first_stride: usize,
    act: ActivationKind,
    linear_tail: bool,
    rng: &mut ChaCha8Rng,
) -> usize {
    for (i, &w) in widths.iter().enumerate() {
        let stride = if i == 0 { first_stride } else { 1 };
        let name = format!("{prefix}.conv{i}");
        if linear_tail && i + 1 == widths.len() {
            seq.push(Conv2d::new(&name, in_ch, w, 3, stride, 1, rng));
        } else {
            conv_block(seq, &name, in_ch, w, stride, act, rng);
        }
        in_ch = w;
    }
    in_ch
}

fn fcn_stage_layers<T: Real>(
    config: &ModelConfig,
    index: usize,
    in_ch: usize,
    first_stride: usize,
    linear_tail: bool,
    rng: &mut ChaCha8Rng,
) -> (Sequential<T>, usize) {
    let mut seq = Sequential::new();
    let out = conv_stack(
        &mut seq,
        &format!("stage{index}"),
        in_ch,
        &config.fcn_stages[index],
        first_stride,
        ActivationKind::Relu,
        linear_tail,
        rng,
    );
    (seq, out)
}

fn build_fcn<T: Real>(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Sequential<T>> {
    let mut net = Sequential::new();
    let mut ch = config.stacked_channels();
    let stages = config.fcn_stages.len();
    for s in 0..stages {
        if s > 0 {
            net.push(Pool::halving(PoolKind::Max));
        }
        if s + 1 == stages {
            net.push(Dropout::new(config.dropout, rand::Rng::gen(rng))?);
        }
        let stride = if s == 0 { 2 } else { 1 };
        let (stage, out) = fcn_stage_layers::<T>(config, s, ch, stride, s + 1 == stages, rng);
        net.layers.extend(stage.layers);
        ch = out;
    }
    net.push(GlobalAvgPool::new());
    Ok(net)
}

/// SqueezeNet-style trunk: entry convs, pooled Fire groups, exit convs, global
/// average pool. `out_width` overrides the last exit conv width.
fn build_squeeze_trunk<T: Real>(
    config: &ModelConfig,
    in_ch: usize,
    out_width: usize,
    with_dropout: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Sequential<T>> {
    let act = ActivationKind::Elu;
    let mut net = Sequential::new();
    let mut ch = conv_stack(&mut net, "entry", in_ch, &config.squeeze_entry, 2, act, false, rng);
    let mut fire_idx = 0;
    for group in &config.squeeze_fires {
        net.push(Pool::halving(PoolKind::Avg));
        for &(s, e1, e3) in group {
            let spec = FireSpec::new(ch, s, e1, e3)?;
            let name = format!("fire{fire_idx}");
            net.push(Fire::new(&name, spec, act, rng));
            net.push(BatchNorm2d::new(&format!("{name}.bn"), spec.out_channels()));
            ch = spec.out_channels();
            fire_idx += 1;
        }
    }
    if with_dropout {
        net.push(Dropout::new(config.dropout, rand::Rng::gen(rng))?);
    }
    let mut exit = config.squeeze_exit.clone();
    *exit.last_mut().expect("validated non-empty") = out_width;
    conv_stack(&mut net, "exit", ch, &exit, 1, act, true, rng);
    net.push(GlobalAvgPool::new());
    Ok(net)
}

/// Output-layer init relative to He.
const BASELINE_OUT_SCALE: f64 = 0.1;

const BASELINE_CONVS: [(usize, usize, usize); 5] = [(24, 5, 2), (36, 5, 2), (48, 5, 2), (64, 3, 1), (64, 3, 1)];

fn build_baseline<T: Real>(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Sequential<T>> {
    let mut net = Sequential::new();
    let (mut ch, mut h, mut w) = (config.stacked_channels(), config.input_height, config.input_width);
    for (i, &(out, k, s)) in BASELINE_CONVS.iter().enumerate() {
        let pad = usize::from(config.baseline_pad && k == 3);
        let conv = Conv2d::new(&format!("conv{i}"), ch, out, k, s, pad, rng);
        let Some((ho, wo)) = conv.output_hw(h, w) else {
            return invalid(format!(
                "baseline input {}x{} too small for its conv stack",
                config.input_height, config.input_width
            ));
        };
        net.push(conv);
        net.push(Activation::new(ActivationKind::Relu));
        net.push(BatchNorm2d::new(&format!("conv{i}.bn"), out));
        (ch, h, w) = (out, ho, wo);
    }
    net.push(Flatten::new());
    net.push(Dropout::new(config.dropout, rand::Rng::gen(rng))?);
    let mut dim = ch * h * w;
    for (i, &width) in config.baseline_fc.iter().enumerate() {
        net.push(Linear::new(&format!("fc{i}"), dim, width, rng));
        net.push(Activation::new(ActivationKind::Relu));
        dim = width;
    }
    // A full-scale He init puts the first predictions far from the targets and
    // the narrow ReLU ladder dies while unwinding them.
    let mut out = Linear::new("out", dim, config.output_size(), rng);
    out.weight
        .value
        .data_mut()
        .iter_mut()
        .for_each(|v| *v *= T::lit(BASELINE_OUT_SCALE));
    net.push(out);
    Ok(net)
}

/// Per-frame embedder, LSTM encoder/decoder and per-step head.
#[derive(Clone, Debug)]
pub struct RecurrentNet<T = f32> {
    pub embedder: Sequential<T>,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub dropout: Dropout,
    pub head: Sequential<T>,
    batch: usize,
}

#[derive(Clone, Debug)]
pub enum Network<T = f32> {
    Feedforward(Sequential<T>),
    Recurrent(Box<RecurrentNet<T>>),
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    kind: ModelKind,
    config: ModelConfig,
    net: Network<T>,
    mode: LayerMode,
}

/// Builds a model of the given kind with weights drawn from `seed`.
pub fn build_model<T: Real>(kind: ModelKind, config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    Model::build(kind, config, seed)
}

impl<T: Real> Model<T> {
    pub fn build(kind: ModelKind, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = match kind {
            ModelKind::Fcn => Network::Feedforward(build_fcn(config, &mut rng)?),
            ModelKind::SqueezeFcn => Network::Feedforward(build_squeeze_trunk(
                config,
                config.stacked_channels(),
                config.output_size(),
                true,
                &mut rng,
            )?),
            ModelKind::Baseline => Network::Feedforward(build_baseline(config, &mut rng)?),
            ModelKind::Frfcn => {
                let embedder =
                    build_squeeze_trunk(config, config.channels_per_frame, config.embedding_dim, false, &mut rng)?;
                let (e, h) = (config.embedding_dim, config.lstm_hidden);
                let encoder = Encoder::new(LstmCell::new("encoder", e, h, &mut rng), config.frames_in);
                let decoder = Decoder::new(LstmCell::new("decoder", e, h, &mut rng), config.steps_out)?;
                let dropout = Dropout::new(config.dropout, rand::Rng::gen(&mut rng))?;
                let mut head = Sequential::new();
                head.push(Linear::new("head.fc0", h, config.head_hidden, &mut rng));
                head.push(Activation::new(ActivationKind::Elu));
                head.push(Linear::new("head.fc1", config.head_hidden, CONTROLS_PER_STEP, &mut rng));
                Network::Recurrent(Box::new(RecurrentNet {
                    embedder,
                    encoder,
                    decoder,
                    dropout,
                    head,
                    batch: 0,
                }))
            }
        };
        Ok(Self {
            kind,
            config: config.clone(),
            net,
            mode: LayerMode::Train,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    pub fn mode(&self) -> LayerMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: LayerMode) {
        self.mode = mode;
    }

    /// Expected input shape for a batch of `n`.
    pub fn input_shape(&self, n: usize) -> Vec<usize> {
        let c = &self.config;
        if self.kind.is_recurrent() {
            vec![n, c.frames_in, c.channels_per_frame, c.input_height, c.input_width]
        } else {
            vec![n, c.stacked_channels(), c.input_height, c.input_width]
        }
    }

    pub fn forward(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let n = batch.shape().first().copied().unwrap_or(0);
        if batch.shape() != self.input_shape(n).as_slice() || n == 0 {
            return shape_err(format!(
                "{} expects input {:?}, got {:?}",
                self.kind,
                self.input_shape(n.max(1)),
                batch.shape()
            ));
        }
        let mode = self.mode;
        let steps = self.config.steps_out;
        let out = match &mut self.net {
            Network::Feedforward(seq) => seq.forward(batch.clone(), mode)?,
            Network::Recurrent(rnn) => {
                let c = &self.config;
                let frames =
                    batch
                        .clone()
                        .reshape(&[n * c.frames_in, c.channels_per_frame, c.input_height, c.input_width])?;
                let emb = rnn.embedder.forward(frames, mode)?;
                rnn.forward_from_embeddings(emb, n, mode)?
            }
        };
        let out = out.reshape(&[n, steps, CONTROLS_PER_STEP])?;
        out.ensure_finite(&format!("{} forward", self.kind))?;
        Ok(out)
    }

    /// Backpropagates `d loss / d predictions` (`[N, steps, 2]`) through the
    /// last forward pass, accumulating parameter gradients. Returns the input gradient.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let n = grad.shape().first().copied().unwrap_or(0);
        let shape = self.input_shape(n);
        match &mut self.net {
            Network::Feedforward(seq) => {
                let g = match seq.layers.last() {
                    Some(Layer::GlobalAvgPool(_)) | Some(Layer::Linear(_)) => {
                        grad.clone().reshape(&[n, OUTPUT_SIZE])?
                    }
                    _ => return shape_err("unexpected feedforward head"),
                };
                seq.backward(g)?.reshape(&shape)
            }
            Network::Recurrent(rnn) => {
                let d_emb = rnn.backward_to_embeddings(grad)?;
                rnn.embedder.backward(d_emb)?.reshape(&shape)
            }
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match &mut self.net {
            Network::Feedforward(seq) => seq.visit_params(f),
            Network::Recurrent(rnn) => {
                rnn.embedder.visit_params(f);
                rnn.encoder.cell.visit_params(f);
                rnn.decoder.cell.visit_params(f);
                rnn.head.visit_params(f);
            }
        }
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        match &self.net {
            Network::Feedforward(seq) => seq.visit_params_ref(f),
            Network::Recurrent(rnn) => {
                rnn.embedder.visit_params_ref(f);
                rnn.encoder.cell.visit_params_ref(f);
                rnn.decoder.cell.visit_params_ref(f);
                rnn.head.visit_params_ref(f);
            }
        }
    }

    /// BatchNorm running statistics.
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match &mut self.net {
            Network::Feedforward(seq) => seq.visit_buffers(f),
            Network::Recurrent(rnn) => {
                rnn.embedder.visit_buffers(f);
                rnn.head.visit_buffers(f);
            }
        }
    }

    /// Makes every dropout layer reuse its last mask in train mode.
    pub fn freeze_dropout(&mut self, frozen: bool) {
        let seqs: Vec<&mut Sequential<T>> = match &mut self.net {
            Network::Feedforward(seq) => vec![seq],
            Network::Recurrent(rnn) => {
                rnn.dropout.freeze_mask(frozen);
                vec![&mut rnn.embedder, &mut rnn.head]
            }
        };
        for seq in seqs {
            for layer in &mut seq.layers {
                if let Layer::Dropout(d) = layer {
                    d.freeze_mask(frozen);
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    /// Total trainable scalars (BatchNorm running statistics excluded).
    pub fn count_params(&self) -> usize {
        let mut n = 0;
        self.visit_params_ref(&mut |p| n += p.len());
        n
    }

    /// Hash of every parameter value's bit pattern and every running statistic.
    pub fn state_hash(&mut self) -> u64 {
        let mut h = DefaultHasher::new();
        self.visit_params_ref(&mut |p| {
            p.name.hash(&mut h);
            for v in p.value.data() {
                v.to_f64().unwrap_or(f64::NAN).to_bits().hash(&mut h);
            }
        });
        self.visit_buffers(&mut |name, t| {
            name.hash(&mut h);
            for v in t.data() {
                v.to_f64().unwrap_or(f64::NAN).to_bits().hash(&mut h);
            }
        });
        h.finish()
    }

    /// F-RFCN only: embeds `[K, C, H, W]` frames independently (eval-mode use).
    pub fn embed_frames(&mut self, frames: Tensor<T>) -> Result<Tensor<T>> {
        let mode = self.mode;
        match &mut self.net {
            Network::Recurrent(rnn) => rnn.embedder.forward(frames, mode),
            Network::Feedforward(_) => invalid(format!("{} has no frame embedder", self.kind)),
        }
    }

    /// F-RFCN only: predictions from per-frame embeddings `[N * frames, E]`
    /// (sample-major).
    pub fn predict_from_embeddings(&mut self, emb: Tensor<T>) -> Result<Tensor<T>> {
        let mode = self.mode;
        let (frames, steps) = (self.config.frames_in, self.config.steps_out);
        match &mut self.net {
            Network::Recurrent(rnn) => {
                let n = emb.shape()[0] / frames;
                rnn.forward_from_embeddings(emb, n, mode)?
                    .reshape(&[n, steps, CONTROLS_PER_STEP])
            }
            Network::Feedforward(_) => invalid(format!("{} has no recurrent core", self.kind)),
        }
    }
}

impl<T: Real> RecurrentNet<T> {
    fn forward_from_embeddings(&mut self, emb: Tensor<T>, n: usize, mode: LayerMode) -> Result<Tensor<T>> {
        let e = self.encoder.cell.input_dim();
        let frames = self.encoder.seq_len();
        if emb.shape() != [n * frames, e] {
            return shape_err(format!(
                "embeddings must be [{}, {e}], got {:?}",
                n * frames,
                emb.shape()
            ));
        }
        let inputs: Vec<Tensor<T>> = (0..frames)
            .map(|t| {
                let mut v = Vec::with_capacity(n * e);
                for i in 0..n {
                    let row = i * frames + t;
                    v.extend_from_slice(&emb.data()[row * e..(row + 1) * e]);
                }
                Tensor::from_parts(vec![n, e], v)
            })
            .collect();
        let hidden = self.encoder.cell.hidden_dim();
        let state = self.encoder.encode(&inputs, &LstmState::zeros(n, hidden))?;
        let hs = self.decoder.decode(&state)?;
        let steps = hs.len();
        // [N * steps, hidden], sample-major
        let mut stacked = vec![T::zero(); n * steps * hidden];
        for (t, h) in hs.iter().enumerate() {
            for i in 0..n {
                let dst = (i * steps + t) * hidden;
                stacked[dst..dst + hidden].copy_from_slice(&h.data()[i * hidden..(i + 1) * hidden]);
            }
        }
        let x = self
            .dropout
            .forward(Tensor::from_parts(vec![n * steps, hidden], stacked), mode)?;
        self.batch = n;
        self.head.forward(x, mode)
    }

    fn backward_to_embeddings(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.batch;
        let steps = self.decoder.steps();
        let hidden = self.decoder.cell.hidden_dim();
        if grad.shape() != [n, steps, CONTROLS_PER_STEP] {
            return shape_err(format!("prediction grad has shape {:?}", grad.shape()));
        }
        let g = grad.clone().reshape(&[n * steps, CONTROLS_PER_STEP])?;
        let dx = self.dropout.backward(self.head.backward(g)?)?;
        let d_hs: Vec<Tensor<T>> = (0..steps)
            .map(|t| {
                let mut v = Vec::with_capacity(n * hidden);
                for i in 0..n {
                    let row = i * steps + t;
                    v.extend_from_slice(&dx.data()[row * hidden..(row + 1) * hidden]);
                }
                Tensor::from_parts(vec![n, hidden], v)
            })
            .collect();
        let d_init = self.decoder.backward(&d_hs)?;
        let (d_inputs, _) = self.encoder.backward(&d_init)?;
        let frames = d_inputs.len();
        let e = self.encoder.cell.input_dim();
        let mut d_emb = vec![T::zero(); n * frames * e];
        for (t, d) in d_inputs.iter().enumerate() {
            for i in 0..n {
                let dst = (i * frames + t) * e;
                d_emb[dst..dst + e].copy_from_slice(&d.data()[i * e..(i + 1) * e]);
            }
        }
        Ok(Tensor::from_parts(vec![n * frames, e], d_emb))
    }
}

/// Stride-1, pool-free copies of the stages whose receptive fields are
/// documented: the FCN's four stages, and the SqueezeFCN entry and exit triplets.
pub fn probe_stages(kind: ModelKind, config: &ModelConfig) -> Result<Vec<ProbeStage>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    match kind {
        ModelKind::Fcn => {
            let mut ch = config.stacked_channels();
            let mut stages = Vec::new();
            for s in 0..config.fcn_stages.len() {
                let (layers, out) = fcn_stage_layers::<f64>(config, s, ch, 1, false, &mut rng);
                stages.push(ProbeStage {
                    name: format!("stage{s}"),
                    in_channels: ch,
                    layers,
                });
                ch = out;
            }
            Ok(stages)
        }
        ModelKind::SqueezeFcn => {
            let act = ActivationKind::Elu;
            let mut entry = Sequential::new();
            conv_stack(
                &mut entry,
                "entry",
                config.stacked_channels(),
                &config.squeeze_entry,
                1,
                act,
                false,
                &mut rng,
            );
            let exit_in = config
                .squeeze_fires
                .iter()
                .flatten()
                .last()
                .map_or(*config.squeeze_entry.last().expect("validated"), |&(_, e1, e3)| e1 + e3);
            let mut exit = Sequential::new();
            conv_stack(
                &mut exit,
                "exit",
                exit_in,
                &config.squeeze_exit,
                1,
                act,
                false,
                &mut rng,
            );
            Ok(vec![
                ProbeStage {
                    name: "entry".into(),
                    in_channels: config.stacked_channels(),
                    layers: entry,
                },
                ProbeStage {
                    name: "exit".into(),
                    in_channels: exit_in,
                    layers: exit,
                },
            ])
        }
        _ => invalid(format!("no probe stages defined for {kind}")),
    }
}

/// Inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BoundingBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }
}

/// Input region whose gradient is nonzero when only output pixel `(h, w)` of
/// channel 0 carries loss.
///
/// Runs on a copy whose conv weights are replaced by their magnitudes and whose
/// input is all ones, so every activation is in its linear regime and the
/// support is purely structural.
pub fn receptive_field_probe(
    stage: &ProbeStage,
    spatial: (usize, usize),
    pixel: (usize, usize),
) -> Result<BoundingBox> {
    let mut layers = stage.layers.clone();
    layers.visit_params(&mut |p| {
        if p.name.ends_with(".weight") {
            p.value.data_mut().iter_mut().for_each(|v| *v = v.abs() + 1e-3);
        }
    });
    let x = Tensor::<f64>::filled(&[1, stage.in_channels, spatial.0, spatial.1], 1.0);
    let y = layers.forward(x, LayerMode::Eval)?;
    let (c, ho, wo) = (y.shape()[1], y.shape()[2], y.shape()[3]);
    if pixel.0 >= ho || pixel.1 >= wo {
        return invalid(format!("pixel {pixel:?} outside output {ho}x{wo}"));
    }
    let mut g = Tensor::zeros(&[1, c, ho, wo]);
    g.set(&[0, 0, pixel.0, pixel.1], 1.0);
    let dx = layers.backward(g)?;
    let (h, w) = spatial;
    let mut bbox: Option<BoundingBox> = None;
    for r in 0..h {
        for col in 0..w {
            let live = (0..stage.in_channels).any(|ch| dx.get(&[0, ch, r, col]) != 0.0);
            if live {
                let b = bbox.get_or_insert(BoundingBox {
                    top: r,
                    left: col,
                    bottom: r,
                    right: col,
                });
                b.top = b.top.min(r);
                b.left = b.left.min(col);
                b.bottom = b.bottom.max(r);
                b.right = b.right.max(col);
            }
        }
    }
    bbox.ok_or_else(|| Error::InvalidArgument("probe found no gradient support".into()))
}
