use std::collections::VecDeque;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::render::render_observation;
use super::track::Track;
use super::vehicle::{step_vehicle, VehicleState, DT, MAX_STEER, WHEELBASE};
use super::SimConfig;
use crate::data::{normalize_pixel, Episode, Source, FRAMES_IN};
use crate::error::{invalid, shape_err, Error, Result};
use crate::layers::LayerMode;
use crate::metrics::autonomy;
use crate::models::Model;
use crate::tensor::Tensor;

/// Pure-pursuit expert: steers toward the centreline point `cfg.lookahead`
/// metres ahead of the rear axle's projection, and slows for the sharpest
/// curvature within the next metre.
pub fn expert_control(track: &Track, state: &VehicleState, cfg: &SimConfig) -> (f64, f64) {
    let proj = track.project(state.position());
    let (target, _) = track.pose_at(proj.s + cfg.lookahead);
    let d = [target[0] - state.x, target[1] - state.y];
    let (f, r) = (state.forward(), state.right());
    let ahead = d[0] * f[0] + d[1] * f[1];
    let lateral = d[0] * r[0] + d[1] * r[1];
    let ld2 = (ahead * ahead + lateral * lateral).max(1e-9);
    let kappa = 2.0 * lateral / ld2;
    let delta = (kappa * WHEELBASE).atan();
    let steer = (0.5 + delta / (2.0 * MAX_STEER)).clamp(0.0, 1.0);
    let curve = (0..=4)
        .map(|k| track.curvature_at(proj.s + 0.25 * k as f64))
        .fold(0.0, f64::max);
    let motor = (1.0 - 2.0 * curve * WHEELBASE).clamp(0.3, 1.0);
    (steer, motor)
}

/// Both front wheels farther than the half width from the centreline.
fn failed(track: &Track, state: &VehicleState) -> bool {
    state
        .front_wheels()
        .iter()
        .all(|&w| track.distance(w) > track.half_width)
}

/// Nearest centreline pose, aligned with the track, at rest.
fn reset_pose(track: &Track, state: &VehicleState) -> VehicleState {
    let p = track.project(state.position());
    VehicleState::new(p.point, p.heading)
}

/// An expert drive together with the states it visited.
#[derive(Clone, Debug)]
pub struct Recording {
    pub episode: Episode,
    pub start: VehicleState,
    /// `states[i]` is the pose frame `i` was rendered from.
    pub states: Vec<VehicleState>,
    /// Frame indices at which the vehicle was reset after leaving the track.
    pub resets: Vec<usize>,
}

/// Ornstein-Uhlenbeck process with stationary deviation `sigma`.
struct OuNoise {
    value: f64,
    sigma: f64,
    tau: f64,
}

impl OuNoise {
    fn step(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        if self.sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            let a = (-DT / self.tau).exp();
            self.value = a * self.value + self.sigma * (1.0 - a * a).sqrt() * z;
        }
        self.value
    }
}

/// Drives the expert with correlated control noise for `duration_s` and logs
/// each rendered frame with the control actually applied from it. The noise
/// makes the vehicle wander off the racing line so the data shows recoveries.
pub fn record_drive(track: &Track, duration_s: f64, cfg: &SimConfig, seed: u64) -> Result<Recording> {
    if duration_s.is_nan() || duration_s < 2.0 {
        return invalid(format!("episode duration {duration_s} s is shorter than 2 s"));
    }
    if cfg.noise_tau.is_nan() || cfg.noise_tau <= 0.0 {
        return Err(Error::Config("noise_tau must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s0 = rand::Rng::gen_range(&mut rng, 0.0..track.length());
    let (p, h) = track.pose_at(s0);
    let start = VehicleState::new(p, h);
    let mut state = start;
    let mut steer_noise = OuNoise {
        value: 0.0,
        sigma: cfg.steer_noise,
        tau: cfg.noise_tau,
    };
    let mut motor_noise = OuNoise {
        value: 0.0,
        sigma: cfg.motor_noise,
        tau: cfg.noise_tau,
    };
    let steps = (duration_s / DT).round() as usize;
    let mut frames = Vec::with_capacity(steps * cfg.frame_len());
    let mut controls = Vec::with_capacity(steps);
    let mut states = Vec::with_capacity(steps);
    let mut resets = Vec::new();
    for i in 0..steps {
        frames.extend(render_observation(track, &state, cfg));
        states.push(state);
        let (s, m) = expert_control(track, &state, cfg);
        // round through f32 so the stored controls replay exactly
        let s = (s + steer_noise.step(&mut rng)).clamp(0.0, 1.0) as f32;
        let m = (m + motor_noise.step(&mut rng)).clamp(0.0, 1.0) as f32;
        controls.push([s, m]);
        state = step_vehicle(&state, f64::from(s), f64::from(m), DT)?;
        if failed(track, &state) {
            state = reset_pose(track, &state);
            resets.push(i + 1);
        }
    }
    let mut episode = Episode::new(cfg.render_height, cfg.render_width, 2, frames, controls)?;
    episode.fps = (1.0 / DT) as f32;
    episode.seed = Some(seed);
    episode.source = Source::Simulated;
    Ok(Recording {
        episode,
        start,
        states,
        resets,
    })
}

pub fn record_episode(track: &Track, duration_s: f64, cfg: &SimConfig, seed: u64) -> Result<Episode> {
    record_drive(track, duration_s, cfg, seed).map(|r| r.episode)
}

/// Integrates logged controls open loop from `start`; `out[i]` is the pose
/// before control `i`.
pub fn replay(start: VehicleState, controls: &[[f32; 2]]) -> Result<Vec<VehicleState>> {
    let mut state = start;
    let mut out = Vec::with_capacity(controls.len());
    for &[s, m] in controls {
        out.push(state);
        state = step_vehicle(&state, f64::from(s), f64::from(m), DT)?;
    }
    Ok(out)
}

/// A closed-loop controller fed one stereo frame per step.
pub trait Driver {
    /// Starts a fresh history from the frame at a (re)start pose.
    fn restart(&mut self, frame: &[u8]) -> Result<()>;
    fn observe(&mut self, frame: &[u8]) -> Result<()>;
    /// `(steer, motor)` for the current history.
    fn act(&mut self, track: &Track, state: &VehicleState) -> Result<(f64, f64)>;
}

/// Ignores the frames and drives from ground truth.
pub struct ExpertDriver {
    pub config: SimConfig,
}

impl Driver for ExpertDriver {
    fn restart(&mut self, _frame: &[u8]) -> Result<()> {
        Ok(())
    }

    fn observe(&mut self, _frame: &[u8]) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, track: &Track, state: &VehicleState) -> Result<(f64, f64)> {
        Ok(expert_control(track, state, &self.config))
    }
}

/// Runs a trained network on the last six frames and applies the first
/// predicted control pair. For the recurrent model each frame is embedded once
/// and the embeddings are reused while it stays in the window.
pub struct ModelDriver {
    model: Model<f32>,
    frames: VecDeque<Vec<f32>>,
    embeddings: VecDeque<Vec<f32>>,
}

impl ModelDriver {
    pub fn new(mut model: Model<f32>) -> Self {
        model.set_mode(LayerMode::Eval);
        Self {
            model,
            frames: VecDeque::with_capacity(FRAMES_IN),
            embeddings: VecDeque::with_capacity(FRAMES_IN),
        }
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    fn frame_shape(&self) -> [usize; 3] {
        let c = self.model.config();
        [c.channels_per_frame, c.input_height, c.input_width]
    }

    fn push(&mut self, frame: &[u8]) -> Result<()> {
        let shape = self.frame_shape();
        if frame.len() != shape.iter().product::<usize>() {
            return shape_err(format!(
                "frame of {} bytes for a model expecting {shape:?}",
                frame.len()
            ));
        }
        let data: Vec<f32> = frame.iter().map(|&v| normalize_pixel(v)).collect();
        if self.model.kind().is_recurrent() {
            let emb = self
                .model
                .embed_frames(Tensor::new(&[1, shape[0], shape[1], shape[2]], data)?)?;
            if self.embeddings.len() == FRAMES_IN {
                self.embeddings.pop_front();
            }
            self.embeddings.push_back(emb.data().to_vec());
        } else {
            if self.frames.len() == FRAMES_IN {
                self.frames.pop_front();
            }
            self.frames.push_back(data);
        }
        Ok(())
    }
}

impl Driver for ModelDriver {
    fn restart(&mut self, frame: &[u8]) -> Result<()> {
        self.frames.clear();
        self.embeddings.clear();
        self.push(frame)?;
        let copy = |q: &mut VecDeque<Vec<f32>>| {
            if let Some(first) = q.front().cloned() {
                while q.len() < FRAMES_IN {
                    q.push_back(first.clone());
                }
            }
        };
        copy(&mut self.frames);
        copy(&mut self.embeddings);
        Ok(())
    }

    fn observe(&mut self, frame: &[u8]) -> Result<()> {
        self.push(frame)
    }

    fn act(&mut self, _track: &Track, _state: &VehicleState) -> Result<(f64, f64)> {
        let out = if self.model.kind().is_recurrent() {
            let e = self.embeddings.front().map_or(0, Vec::len);
            let data = self.embeddings.iter().flatten().copied().collect();
            self.model
                .predict_from_embeddings(Tensor::new(&[self.embeddings.len(), e], data)?)?
        } else {
            let [c, h, w] = self.frame_shape();
            let data = self.frames.iter().flatten().copied().collect();
            self.model
                .forward(&Tensor::new(&[1, self.frames.len() * c, h, w], data)?)?
        };
        let p = out.data();
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(Error::NonFinite("model control prediction".into()));
        }
        Ok((f64::from(p[0]).clamp(0.0, 1.0), f64::from(p[1]).clamp(0.0, 1.0)))
    }
}

pub const EVAL_CSV_HEADER: &str =
    "track_seed,duration_s,failures,autonomy,avg_time_to_failure_s,avg_distance_to_failure_m";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub track_seed: u64,
    pub duration_s: f64,
    pub failures: u32,
    /// Mean seconds between failures; the full duration when there were none.
    pub avg_time_to_failure_s: f64,
    /// Mean path length driven between failures.
    pub avg_distance_to_failure_m: f64,
    pub autonomy: f64,
}

impl EvalReport {
    pub fn from_counts(track_seed: u64, duration_s: f64, failures: u32, distance_m: f64) -> Self {
        let per = f64::from(failures.max(1));
        Self {
            track_seed,
            duration_s,
            failures,
            avg_time_to_failure_s: duration_s / per,
            avg_distance_to_failure_m: distance_m / per,
            autonomy: autonomy(duration_s, failures),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.track_seed,
            self.duration_s,
            self.failures,
            self.autonomy,
            self.avg_time_to_failure_s,
            self.avg_distance_to_failure_m
        )
    }
}

pub fn write_eval_csv<W: Write>(out: &mut W, reports: &[EvalReport]) -> Result<()> {
    writeln!(out, "{EVAL_CSV_HEADER}")?;
    for r in reports {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Drives `driver` around `track` from arc length 0 for `duration_s`,
/// resetting onto the centreline after every failure.
pub fn closed_loop_eval(
    driver: &mut dyn Driver,
    track: &Track,
    duration_s: f64,
    cfg: &SimConfig,
) -> Result<EvalReport> {
    if duration_s.is_nan() || duration_s <= 0.0 {
        return invalid(format!("evaluation duration {duration_s} must be positive"));
    }
    let (p, h) = track.pose_at(0.0);
    let mut state = VehicleState::new(p, h);
    driver.restart(&render_observation(track, &state, cfg))?;
    let steps = (duration_s / DT).round() as usize;
    let mut failures = 0u32;
    let mut distance = 0.0;
    for _ in 0..steps {
        let (s, m) = driver.act(track, &state)?;
        state = step_vehicle(&state, s, m, DT)?;
        distance += state.speed * DT;
        if failed(track, &state) {
            failures += 1;
            state = reset_pose(track, &state);
            driver.restart(&render_observation(track, &state, cfg))?;
        } else {
            driver.observe(&render_observation(track, &state, cfg))?;
        }
    }
    Ok(EvalReport::from_counts(track.seed, duration_s, failures, distance))
}
