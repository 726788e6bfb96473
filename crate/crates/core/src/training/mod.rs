//! Adam, the MSE loss, augmentation, checkpoints and the validation-epoch loop.

mod checkpoint;
mod loss;
mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::PathBuf;

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use loss::mse_loss;
pub use optim::Adam;

use crate::data::{assemble_batch, Dataset, Split, WindowRef};
use crate::error::{invalid, shape_err, Error, Result};
use crate::layers::LayerMode;
use crate::models::Model;
use crate::tensor::{flip_width, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Full,
    /// Draw only from a fixed, seed-chosen fraction of the training windows.
    Sparse {
        fraction: f64,
    },
}

impl Sampling {
    pub const SPARSE_DEFAULT: Sampling = Sampling::Sparse { fraction: 0.10 };
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: Adam,
    pub batch_size: usize,
    pub sampling: Sampling,
    pub epoch_unit_fraction: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: Adam::default(),
            batch_size: 32,
            sampling: Sampling::Full,
            epoch_unit_fraction: 0.001,
            max_epochs: 300,
            seed: 0,
            checkpoint: None,
            metrics: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if !(self.epoch_unit_fraction > 0.0 && self.epoch_unit_fraction <= 1.0) {
            return invalid(format!(
                "epoch unit fraction {} outside (0, 1]",
                self.epoch_unit_fraction
            ));
        }
        if let Sampling::Sparse { fraction } = self.sampling {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return invalid(format!("sparse fraction {fraction} outside (0, 1]"));
            }
        }
        let a = &self.adam;
        if !(a.alpha > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return invalid("adam hyperparameters out of range");
        }
        Ok(())
    }

    /// Batches in one validation epoch for `train_windows` training windows.
    pub fn batches_per_epoch(&self, train_windows: usize) -> usize {
        let windows = (self.epoch_unit_fraction * train_windows as f64).ceil() as usize;
        windows.div_ceil(self.batch_size).max(1)
    }
}

/// Validation loss per epoch, epochs numbered from 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<(usize, f64)>,
}

impl LossCurve {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    /// Earliest epoch attaining the minimum loss.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.points
            .iter()
            .copied()
            .fold(None, |best: Option<(usize, f64)>, p| match best {
                Some(b) if b.1 <= p.1 => Some(b),
                _ => Some(p),
            })
    }

    pub fn last(&self) -> Option<(usize, f64)> {
        self.points.last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,val_loss\n");
        for (e, l) in &self.points {
            s.push_str(&format!("{e},{l:e}\n"));
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with("epoch")) {
                continue;
            }
            let (e, l) = line
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("metrics line {}: expected 'epoch,val_loss'", i + 1)))?;
            let epoch = e
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("metrics line {}: bad epoch '{e}'", i + 1)))?;
            let loss = l
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("metrics line {}: bad loss '{l}'", i + 1)))?;
            points.push((epoch, loss));
        }
        Ok(Self { points })
    }
}

/// Mirrors a window: each `[C, H, W]` frame of `frames` (`[F, C, H, W]`) is
/// flipped left-right with its stereo channels swapped, and steering `s`
/// becomes `1 - s`. Motor is untouched.
pub fn augment_flip<T: Real>(frames: &Tensor<T>, controls: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let &[f, c, h, w] = frames.shape() else {
        return shape_err(format!("frames must be [F, C, H, W], got {:?}", frames.shape()));
    };
    if controls.rank() != 2 || controls.shape()[1] != 2 {
        return shape_err(format!("controls must be [T, 2], got {:?}", controls.shape()));
    }
    let frame_len = c * h * w;
    let mut out = Vec::with_capacity(frames.len());
    for i in 0..f {
        let frame = Tensor::new(&[c, h, w], frames.data()[i * frame_len..(i + 1) * frame_len].to_vec())?;
        let flipped = flip_width(&frame)?;
        let plane = h * w;
        for ch in (0..c).rev() {
            out.extend_from_slice(&flipped.data()[ch * plane..(ch + 1) * plane]);
        }
    }
    let mut ctl = controls.clone();
    for pair in ctl.data_mut().chunks_exact_mut(2) {
        pair[0] = T::one() - pair[0];
    }
    Ok((Tensor::new(frames.shape(), out)?, ctl))
}

/// Mean MSE over `windows`, in eval mode, without touching parameters.
pub fn validation_loss(
    model: &mut Model<f32>,
    dataset: &Dataset,
    windows: &[WindowRef],
    batch_size: usize,
) -> Result<f64> {
    if windows.is_empty() {
        return invalid("empty validation set");
    }
    let saved = model.mode();
    model.set_mode(LayerMode::Eval);
    let mut total = 0.0;
    let mut result = Ok(());
    for chunk in windows.chunks(batch_size.max(1)) {
        let step = assemble_batch(dataset, chunk).and_then(|(x, y)| {
            let x = x.reshape(&model.input_shape(chunk.len()))?;
            let pred = model.forward(&x)?;
            mse_loss(&pred, &y)
        });
        match step {
            Ok((loss, _)) => total += f64::from(loss) * chunk.len() as f64,
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }
    model.set_mode(saved);
    result?;
    Ok(total / windows.len() as f64)
}

/// Everything a training run produced besides the model itself.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub curve: LossCurve,
    /// Training windows the sampler may draw from (the sparse subset, or all).
    pub pool: Vec<usize>,
    /// Every training-window index drawn, in order.
    pub sampled: Vec<usize>,
    pub steps: usize,
}

struct Sampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(train_len: usize, sampling: Sampling, seed: u64) -> Result<Self> {
        if train_len == 0 {
            return invalid("no training windows");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a4d_504c);
        let pool = match sampling {
            Sampling::Full => (0..train_len).collect(),
            Sampling::Sparse { fraction } => {
                let k = ((train_len as f64 * fraction).round() as usize).clamp(1, train_len);
                let mut p = sample(&mut rng, train_len, k).into_vec();
                p.sort_unstable();
                p
            }
        };
        Ok(Self {
            order: Vec::new(),
            cursor: 0,
            pool,
            rng,
        })
    }

    /// Next index from a reshuffled pass over the pool.
    fn draw(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = self.pool.clone();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

fn open_metrics(config: &TrainConfig) -> Result<Option<BufWriter<File>>> {
    config
        .metrics
        .as_ref()
        .map(|p| -> Result<_> {
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "epoch,val_loss")?;
            w.flush()?;
            Ok(w)
        })
        .transpose()
}

/// Runs `max_epochs` validation epochs. Each epoch takes
/// `batches_per_epoch` Adam steps on windows drawn from the sampling pool,
/// then scores the validation windows; every new minimum is checkpointed.
pub fn train(model: &mut Model<f32>, dataset: &Dataset, split: &Split, config: &TrainConfig) -> Result<TrainReport> {
    train_with(model, dataset, split, config, |_, _| ControlFlow::Continue(()))
}

/// [`train`] with a callback invoked after each epoch with `(epoch, val_loss)`;
/// returning `Break` ends training after that epoch.
pub fn train_with(
    model: &mut Model<f32>,
    dataset: &Dataset,
    split: &Split,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64) -> ControlFlow<()>,
) -> Result<TrainReport> {
    config.validate()?;
    let train = &split.train;
    let mut sampler = Sampler::new(train.len(), config.sampling, config.seed)?;
    if split.val.is_empty() {
        return invalid("no validation windows");
    }
    let mut metrics = open_metrics(config)?;
    let mut report = TrainReport {
        pool: sampler.pool.clone(),
        ..TrainReport::default()
    };
    let batches = config.batches_per_epoch(train.len());
    let mut best = f64::INFINITY;
    model.set_mode(LayerMode::Train);
    for epoch in 1..=config.max_epochs {
        for _ in 0..batches {
            let picks: Vec<usize> = (0..config.batch_size).map(|_| sampler.draw()).collect();
            log::trace!("epoch {epoch} batch indices {picks:?}");
            let windows: Vec<WindowRef> = picks.iter().map(|&i| train[i]).collect();
            report.sampled.extend_from_slice(&picks);
            let (x, y) = assemble_batch(dataset, &windows)?;
            let x = x.reshape(&model.input_shape(windows.len()))?;
            let step = model.forward(&x).and_then(|pred| mse_loss(&pred, &y));
            let (loss, grad) = match step {
                Ok(v) if v.0.is_finite() => v,
                Ok(v) => {
                    return Err(Error::Diverged {
                        epoch,
                        reason: format!("training loss {}", v.0),
                    })
                }
                Err(Error::NonFinite(what)) => return Err(Error::Diverged { epoch, reason: what }),
                Err(e) => return Err(e),
            };
            log::trace!("epoch {epoch} train loss {loss:.6}");
            model.backward(&grad)?;
            config.adam.step_model(model).map_err(|e| Error::Diverged {
                epoch,
                reason: e.to_string(),
            })?;
            report.steps += 1;
        }
        let val = match validation_loss(model, dataset, &split.val, config.batch_size) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("validation loss {v}"),
                })
            }
            Err(Error::NonFinite(what)) => return Err(Error::Diverged { epoch, reason: what }),
            Err(e) => return Err(e),
        };
        report.curve.points.push((epoch, val));
        if let Some(w) = metrics.as_mut() {
            writeln!(w, "{epoch},{val:e}")?;
            w.flush()?;
        }
        log::info!("epoch {epoch}/{} val_loss {val:.6}", config.max_epochs);
        if val < best {
            best = val;
            if let Some(path) = &config.checkpoint {
                save_checkpoint(model, path, Some((epoch, val)))?;
            }
        }
        if on_epoch(epoch, val).is_break() {
            break;
        }
    }
    Ok(report)
}

/// True when every drawn index lies in the sampling pool.
pub fn sampled_within_pool(report: &TrainReport) -> bool {
    let mut pool = report.pool.clone();
    pool.sort_unstable();
    report.sampled.iter().all(|i| pool.binary_search(i).is_ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelConfig, ModelKind};
    use proptest::prelude::*;

    #[test]
    fn epoch_batch_arithmetic() {
        let c = TrainConfig::default();
        assert_eq!(c.batches_per_epoch(46_640), 2);
        assert_eq!(c.batches_per_epoch(10), 1);
        assert_eq!(c.batches_per_epoch(1_000_000), 32);
    }

    #[test]
    fn defaults_match_the_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.adam.alpha, c.adam.beta1, c.adam.beta2, c.adam.eps),
            (1e-3, 0.9, 0.999, 1e-8)
        );
        assert_eq!(c.batch_size, 32);
        assert_eq!(Sampling::SPARSE_DEFAULT, Sampling::Sparse { fraction: 0.1 });
    }

    #[test]
    fn sparse_pool_is_fixed_fraction() {
        let mut s = Sampler::new(1000, Sampling::SPARSE_DEFAULT, 3).unwrap();
        assert_eq!(s.pool.len(), 100);
        let pool = s.pool.clone();
        for _ in 0..500 {
            assert!(pool.binary_search(&s.draw()).is_ok());
        }
        let again = Sampler::new(1000, Sampling::SPARSE_DEFAULT, 3).unwrap();
        assert_eq!(again.pool, pool);
    }

    #[test]
    fn curve_best_prefers_earliest() {
        let c = LossCurve {
            points: vec![(1, 0.5), (2, 0.2), (3, 0.2), (4, 0.3)],
        };
        assert_eq!(c.best(), Some((2, 0.2)));
        assert_eq!(LossCurve::parse_csv(&c.to_csv()).unwrap(), c);
    }

    #[test]
    fn flip_of_straight_is_straight() {
        let frames = Tensor::<f32>::from_fn(&[2, 2, 3, 4], |i| i as f32);
        let ctl = Tensor::<f32>::from_fn(&[12, 2], |i| if i % 2 == 0 { 0.5 } else { 0.7 });
        let (_, c) = augment_flip(&frames, &ctl).unwrap();
        assert_eq!(c, ctl);
    }

    #[test]
    fn flip_swaps_stereo_channels() {
        let frames = Tensor::<f32>::from_fn(&[1, 2, 1, 3], |i| i as f32);
        let ctl = Tensor::<f32>::zeros(&[12, 2]);
        let (f, _) = augment_flip(&frames, &ctl).unwrap();
        assert_eq!(f.data(), &[5.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn flip_is_an_involution(seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = Tensor::<f32>::from_fn(&[3, 2, 4, 5], |_| rng.gen());
            let ctl = Tensor::<f32>::from_fn(&[12, 2], |_| rng.gen());
            let (f1, c1) = augment_flip(&frames, &ctl).unwrap();
            let (f2, c2) = augment_flip(&f1, &c1).unwrap();
            prop_assert_eq!(f2, frames);
            for (a, b) in c2.data().iter().zip(ctl.data()) {
                prop_assert!((a - b).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn zero_epochs_yield_empty_curve() {
        let ds = tiny_dataset();
        let split = crate::data::split_train_val(&ds, 1, 1.0, 1, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("m.ckpt");
        let cfg = TrainConfig {
            max_epochs: 0,
            checkpoint: Some(ckpt.clone()),
            ..TrainConfig::default()
        };
        let mut m = Model::<f32>::build(ModelKind::Fcn, &tiny_model(), 0).unwrap();
        let r = train(&mut m, &ds, &split, &cfg).unwrap();
        assert!(r.curve.is_empty());
        assert!(!ckpt.exists());
    }

    #[test]
    fn validation_leaves_parameters_untouched() {
        let ds = tiny_dataset();
        let split = crate::data::split_train_val(&ds, 1, 1.0, 1, 0).unwrap();
        let mut m = Model::<f32>::build(ModelKind::SqueezeFcn, &tiny_model(), 0).unwrap();
        let before = m.state_hash();
        validation_loss(&mut m, &ds, &split.val, 4).unwrap();
        assert_eq!(m.state_hash(), before);
    }

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            input_height: 12,
            input_width: 16,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn tiny_dataset() -> Dataset {
        use crate::data::Episode;
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = (0..3)
            .map(|_| {
                let n = 24;
                let frames = (0..n * 2 * 12 * 16).map(|_| rng.gen()).collect();
                let controls = (0..n)
                    .map(|_| [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)])
                    .collect();
                Episode::new(12, 16, 2, frames, controls).unwrap()
            })
            .collect();
        Dataset::new(eps).unwrap()
    }
}
