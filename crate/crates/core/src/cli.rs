//! Command-line front end. Each subcommand is also exposed as a plain
//! function so the pipeline can be driven from code.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{split_train_val, with_flips, write_episode, write_manifest, Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::gradcheck::{run_suite, GradCheck, SUITE};
use crate::metrics::{convergence_stats, write_report, ReportRow};
use crate::models::{Model, ModelKind};
use crate::sim::{closed_loop_eval, record_episode, write_eval_csv, EvalReport, ModelDriver, SimConfig};
use crate::training::{load_checkpoint, train, validation_loss, LossCurve, Sampling, TrainReport};

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Parser, Debug)]
#[command(
    name = "frfcn",
    version,
    about = "Train and evaluate small end-to-end driving networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record expert episodes on seeded tracks and write a manifest.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        episodes: usize,
        /// Seconds per episode.
        #[arg(long)]
        duration: f64,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration supplying frame size and simulator settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model, checkpointing every new validation minimum.
    Train {
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Draw batches from a fixed random subset of the training windows.
        #[arg(long)]
        sparse: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Print the validation MSE of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Must match the training configuration to reproduce its split.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Drive a checkpoint closed loop on a generated track.
    Simulate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Track seed.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        duration: f64,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare every backward pass against finite differences.
    Gradcheck {
        #[arg(long)]
        layer: Option<String>,
    },
    /// Convergence statistics for one or more `epoch,val_loss` files.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        /// Checkpoints supplying model names and parameter counts, in the
        /// same order as `--metrics`.
        #[arg(long, num_args = 1..)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

/// Track (and recording-noise) seed of episode `index` in data set `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(10_000).wrapping_add(index as u64)
}

/// Records `episodes` expert drives into `out` and returns the manifest path.
pub fn gen_data(seed: u64, episodes: usize, duration_s: f64, sim: &SimConfig, out: &Path) -> Result<PathBuf> {
    if episodes == 0 {
        return invalid("at least one episode is required");
    }
    fs::create_dir_all(out)?;
    let mut paths = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let s = episode_seed(seed, i);
        let ep = record_episode(&sim.track(s), duration_s, sim, s)?;
        let path = out.join(format!("episode_{i:04}.bin"));
        write_episode(&ep, &path)?;
        log::info!(
            "episode {}/{episodes}: {} frames -> {}",
            i + 1,
            ep.len(),
            path.display()
        );
        paths.push(path);
    }
    let manifest = out.join(MANIFEST_NAME);
    write_manifest(&paths, &manifest)?;
    Ok(manifest)
}

/// Train/validation windows exactly as `train` uses them.
pub fn prepare_split(dataset: &Dataset, cfg: &RunConfig) -> Result<Split> {
    let mut split = split_train_val(
        dataset,
        cfg.val_runs,
        cfg.val_fraction,
        cfg.window_stride,
        cfg.train.seed,
    )?;
    if cfg.augment {
        split.train = with_flips(&split.train);
    }
    Ok(split)
}

fn check_frames(dataset: &Dataset, cfg: &RunConfig) -> Result<()> {
    let m = &cfg.model;
    match dataset.frame_dims() {
        Some(dims) if dims == (m.input_height, m.input_width, m.channels_per_frame) => Ok(()),
        Some((h, w, c)) => Err(Error::Shape(format!(
            "data frames are {c}x{h}x{w}, model expects {}x{}x{}",
            m.channels_per_frame, m.input_height, m.input_width
        ))),
        None => invalid("empty data set"),
    }
}

/// Builds a model from `cfg` and trains it; returns the loss curve and sampling record.
pub fn train_run(
    kind: ModelKind,
    dataset: &Dataset,
    cfg: &RunConfig,
    sparse: bool,
    ckpt: &Path,
    metrics: &Path,
) -> Result<TrainReport> {
    check_frames(dataset, cfg)?;
    let split = prepare_split(dataset, cfg)?;
    let mut model = Model::<f32>::build(kind, &cfg.model, cfg.train.seed)?;
    log::info!(
        "{kind}: {} parameters, {} training / {} validation windows",
        model.count_params(),
        split.train.len(),
        split.val.len()
    );
    let mut tc = cfg.train.clone();
    tc.sampling = if sparse { cfg.sparse() } else { Sampling::Full };
    tc.checkpoint = Some(ckpt.to_path_buf());
    tc.metrics = Some(metrics.to_path_buf());
    train(&mut model, dataset, &split, &tc)
}

/// Validation MSE of a checkpoint on the split `cfg` defines.
pub fn eval_run(ckpt: &Path, dataset: &Dataset, cfg: &RunConfig) -> Result<f64> {
    let mut model = load_checkpoint(ckpt)?.model;
    let cfg = RunConfig {
        model: model.config().clone(),
        ..cfg.clone()
    };
    check_frames(dataset, &cfg)?;
    let split = prepare_split(dataset, &cfg)?;
    validation_loss(&mut model, dataset, &split.val, cfg.train.batch_size)
}

pub fn simulate_run(ckpt: &Path, track_seed: u64, duration_s: f64, sim: &SimConfig) -> Result<EvalReport> {
    let model = load_checkpoint(ckpt)?.model;
    let c = model.config();
    let sim = SimConfig {
        render_height: c.input_height,
        render_width: c.input_width,
        ..sim.clone()
    };
    let track = sim.track(track_seed);
    closed_loop_eval(&mut ModelDriver::new(model), &track, duration_s, &sim)
}

pub fn report_run(metrics: &[PathBuf], ckpts: &[PathBuf], out: &Path) -> Result<Vec<ReportRow>> {
    if !ckpts.is_empty() && ckpts.len() != metrics.len() {
        return invalid(format!(
            "{} checkpoints for {} metrics files",
            ckpts.len(),
            metrics.len()
        ));
    }
    let mut rows = Vec::with_capacity(metrics.len());
    for (i, path) in metrics.iter().enumerate() {
        let curve = LossCurve::parse_csv(&fs::read_to_string(path)?)?;
        let stats = convergence_stats(&curve)?;
        let (model, params) = match ckpts.get(i) {
            Some(c) => {
                let m = load_checkpoint(c)?.model;
                (m.kind().to_string(), m.count_params())
            }
            None => (
                path.file_stem()
                    .map_or_else(|| format!("run{i}"), |s| s.to_string_lossy().into_owned()),
                0,
            ),
        };
        rows.push(ReportRow { model, params, stats });
    }
    write_report(&rows, out)?;
    Ok(rows)
}

fn print_gradchecks(results: &[GradCheck]) -> bool {
    let mut ok = true;
    for r in results {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        ok &= r.passed();
        println!(
            "{verdict} {:<16} {:?} input {:.2e} params {:.2e} (tol {:.0e})",
            r.name, r.input_shape, r.input_error, r.param_error, r.tolerance
        );
    }
    ok
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::GenData {
            seed,
            episodes,
            duration,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let manifest = gen_data(seed, episodes, duration, &cfg.sim_config(), &out)?;
            println!("{}", manifest.display());
        }
        Command::Train {
            model,
            data,
            config,
            sparse,
            out,
            metrics,
        } => {
            let cfg = load_config(config.as_deref())?;
            let dataset = Dataset::from_manifest(&data)?;
            let report = train_run(model, &dataset, &cfg, sparse, &out, &metrics)?;
            if let Some((epoch, loss)) = report.curve.best() {
                println!("best val_loss {loss:.6e} at epoch {epoch}");
            }
        }
        Command::Eval { ckpt, data, config } => {
            let cfg = load_config(config.as_deref())?;
            let dataset = Dataset::from_manifest(&data)?;
            println!("{:.9e}", eval_run(&ckpt, &dataset, &cfg)?);
        }
        Command::Simulate {
            ckpt,
            seed,
            duration,
            report,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let r = simulate_run(&ckpt, seed, duration, &cfg.sim)?;
            write_eval_csv(&mut fs::File::create(&report)?, std::slice::from_ref(&r))?;
            println!(
                "autonomy {:.4} failures {} over {} s",
                r.autonomy, r.failures, r.duration_s
            );
        }
        Command::Gradcheck { layer } => {
            if let Some(name) = &layer {
                if !SUITE.contains(&name.as_str()) {
                    return Err(Error::InvalidArgument(format!(
                        "unknown layer '{name}'; choose one of {}",
                        SUITE.join(", ")
                    )));
                }
            }
            return Ok(print_gradchecks(&run_suite(layer.as_deref())?));
        }
        Command::Report { metrics, ckpt, out } => {
            for row in report_run(&metrics, &ckpt, &out)? {
                let s = &row.stats;
                println!(
                    "{}: r {:.4} sigma_r {:.4} min {:.3e} at epoch {}",
                    row.model, s.r, s.sigma_r, s.min_loss, s.epoch_min
                );
            }
        }
    }
    Ok(true)
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 1 when a check or contract fails, 2 on
/// bad usage.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["frfcn"]), 2);
        assert_eq!(run(["frfcn", "fly"]), 2);
        assert_eq!(run(["frfcn", "train", "--model", "alexnet"]), 2);
        assert_eq!(run(["frfcn", "gradcheck", "--bogus"]), 2);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["frfcn", "--help"]), 0);
    }

    #[test]
    fn gradcheck_single_layer() {
        assert_eq!(run(["frfcn", "gradcheck", "--layer", "linear"]), 0);
        assert_eq!(run(["frfcn", "gradcheck", "--layer", "nope"]), 1);
    }

    #[test]
    fn episode_seeds_are_distinct() {
        assert_ne!(episode_seed(1, 0), episode_seed(0, 10_000 - 1));
        assert_eq!(episode_seed(3, 7), 30_007);
    }
}
