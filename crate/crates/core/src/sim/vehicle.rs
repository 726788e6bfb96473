use crate::error::{invalid, Result};

use super::track::Point;

pub const WHEELBASE: f64 = 0.25;
pub const HALF_TRACK: f64 = 0.08;
pub const V_MAX: f64 = 3.0;
pub const MAX_STEER: f64 = std::f64::consts::PI / 6.0;
/// Seconds per simulation step (10 frames per second).
pub const DT: f64 = 0.1;

/// Kinematic bicycle state; `(x, y)` is the rear axle centre.
///
/// The world frame has `y` pointing down, so a positive heading change is a
/// clockwise (right) turn and steering above 0.5 turns right.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl VehicleState {
    pub fn new(position: Point, heading: f64) -> Self {
        Self {
            x: position[0],
            y: position[1],
            heading,
            speed: 0.0,
        }
    }

    pub fn position(&self) -> Point {
        [self.x, self.y]
    }

    pub fn forward(&self) -> Point {
        [self.heading.cos(), self.heading.sin()]
    }

    pub fn right(&self) -> Point {
        [-self.heading.sin(), self.heading.cos()]
    }

    /// Left and right front wheel contact points.
    pub fn front_wheels(&self) -> [Point; 2] {
        let (f, r) = (self.forward(), self.right());
        let axle = [self.x + WHEELBASE * f[0], self.y + WHEELBASE * f[1]];
        [
            [axle[0] - HALF_TRACK * r[0], axle[1] - HALF_TRACK * r[1]],
            [axle[0] + HALF_TRACK * r[0], axle[1] + HALF_TRACK * r[1]],
        ]
    }
}

/// Maps steering in `[0, 1]` to a wheel angle in `[-30°, 30°]`.
pub fn steer_angle(steer: f64) -> f64 {
    ((steer - 0.5) * 2.0 * MAX_STEER).clamp(-MAX_STEER, MAX_STEER)
}

pub fn step_vehicle(state: &VehicleState, steer: f64, motor: f64, dt: f64) -> Result<VehicleState> {
    if !(0.0..=1.0).contains(&steer) || !(0.0..=1.0).contains(&motor) {
        return invalid(format!("controls ({steer}, {motor}) outside [0, 1]"));
    }
    let delta = steer_angle(steer);
    let v = motor * V_MAX;
    Ok(VehicleState {
        x: state.x + v * state.heading.cos() * dt,
        y: state.y + v * state.heading.sin() * dt,
        heading: state.heading + v / WHEELBASE * delta.tan() * dt,
        speed: v,
    })
}
