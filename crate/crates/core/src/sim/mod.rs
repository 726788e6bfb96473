//! Synthetic closed-track world: track generation, a kinematic bicycle,
//! a top-down stereo renderer, a pure-pursuit expert, episode recording and
//! closed-loop evaluation.

mod drive;
mod render;
mod track;
mod vehicle;

pub use drive::{
    closed_loop_eval, expert_control, record_drive, record_episode, replay, write_eval_csv, Driver, EvalReport,
    ExpertDriver, ModelDriver, Recording, EVAL_CSV_HEADER,
};
pub use render::{render_observation, render_view, GROUND_SHADE, TRACK_SHADE};
pub use track::{generate_track, Point, Projection, Track, DEFAULT_HALF_WIDTH};
pub use vehicle::{steer_angle, step_vehicle, VehicleState, DT, HALF_TRACK, MAX_STEER, V_MAX, WHEELBASE};

use std::str::FromStr;

use crate::error::{Error, Result};

/// Renderer, expert and recording-noise settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub render_height: usize,
    pub render_width: usize,
    /// Metres spanned by the image width; the pixel size follows from it.
    pub view_width_m: f64,
    /// Lateral distance of each stereo camera from the vehicle axis.
    pub stereo_offset: f64,
    pub half_width: f64,
    pub lookahead: f64,
    /// Stationary standard deviation of the Ornstein-Uhlenbeck noise added to
    /// the expert's steering while recording.
    pub steer_noise: f64,
    pub motor_noise: f64,
    /// Noise correlation time in seconds.
    pub noise_tau: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            render_height: 94,
            render_width: 168,
            view_width_m: 3.36,
            stereo_offset: 0.02,
            half_width: DEFAULT_HALF_WIDTH,
            lookahead: 0.5,
            steer_noise: 0.05,
            motor_noise: 0.03,
            noise_tau: 0.5,
        }
    }
}

impl SimConfig {
    pub fn meters_per_pixel(&self) -> f64 {
        self.view_width_m / self.render_width as f64
    }

    pub fn frame_len(&self) -> usize {
        2 * self.render_height * self.render_width
    }

    /// Sets one field; `Ok(false)` when the key is not a simulator key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
        }
        match key {
            "view_width_m" => self.view_width_m = num(key, value)?,
            "stereo_offset" => self.stereo_offset = num(key, value)?,
            "half_width" => self.half_width = num(key, value)?,
            "lookahead" => self.lookahead = num(key, value)?,
            "steer_noise" => self.steer_noise = num(key, value)?,
            "motor_noise" => self.motor_noise = num(key, value)?,
            "noise_tau" => self.noise_tau = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// A track for `seed` using this configuration's half width.
    pub fn track(&self, seed: u64) -> Track {
        let mut t = generate_track(seed);
        t.half_width = self.half_width;
        t
    }
}
