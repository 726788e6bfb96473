use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vehicle::WHEELBASE;
use crate::error::{invalid, Result};

pub const DEFAULT_HALF_WIDTH: f64 = 0.30;
/// Centerline resampling step in metres.
const SPACING: f64 = 0.1;

pub type Point = [f64; 2];

/// Closed centerline polyline with cumulative arc length.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    points: Vec<Point>,
    /// `arc[i]` is the arc length at `points[i]`; `arc[n]` is the loop length.
    arc: Vec<f64>,
    pub half_width: f64,
    pub seed: u64,
}

/// Nearest centerline location to a query point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub s: f64,
    pub point: Point,
    pub heading: f64,
    pub distance: f64,
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

impl Track {
    /// Builds a track from a closed loop of points (the last point connects
    /// back to the first).
    pub fn from_points(points: Vec<Point>, half_width: f64, seed: u64) -> Result<Self> {
        if points.len() < 3 {
            return invalid("a track needs at least three points");
        }
        if half_width.is_nan() || half_width <= 0.0 {
            return invalid("track half width must be positive");
        }
        let mut arc = Vec::with_capacity(points.len() + 1);
        arc.push(0.0);
        for i in 0..points.len() {
            let d = norm(sub(points[(i + 1) % points.len()], points[i]));
            if d == 0.0 {
                return invalid("repeated centerline point");
            }
            arc.push(arc[i] + d);
        }
        Ok(Self {
            points,
            arc,
            half_width,
            seed,
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        self.arc[self.points.len()]
    }

    fn segment(&self, i: usize) -> (Point, Point) {
        (self.points[i], self.points[(i + 1) % self.points.len()])
    }

    /// Position and heading at arc length `s` (wrapped onto the loop).
    pub fn pose_at(&self, s: f64) -> (Point, f64) {
        let s = s.rem_euclid(self.length());
        let i = match self.arc.binary_search_by(|a| a.total_cmp(&s)) {
            Ok(i) => i.min(self.points.len() - 1),
            Err(i) => i - 1,
        };
        let (a, b) = self.segment(i);
        let t = (s - self.arc[i]) / (self.arc[i + 1] - self.arc[i]);
        let d = sub(b, a);
        ([a[0] + t * d[0], a[1] + t * d[1]], d[1].atan2(d[0]))
    }

    pub fn project(&self, p: Point) -> Projection {
        let mut best = Projection {
            s: 0.0,
            point: self.points[0],
            heading: 0.0,
            distance: f64::INFINITY,
        };
        for i in 0..self.points.len() {
            let (a, b) = self.segment(i);
            let d = sub(b, a);
            let len2 = dot(d, d);
            let t = (dot(sub(p, a), d) / len2).clamp(0.0, 1.0);
            let q = [a[0] + t * d[0], a[1] + t * d[1]];
            let dist = norm(sub(p, q));
            if dist < best.distance {
                best = Projection {
                    s: self.arc[i] + t * len2.sqrt(),
                    point: q,
                    heading: d[1].atan2(d[0]),
                    distance: dist,
                };
            }
        }
        best
    }

    /// Distance from `p` to the centerline.
    pub fn distance(&self, p: Point) -> f64 {
        self.project(p).distance
    }

    /// Unsigned curvature at arc length `s`: the inverse circumradius of the
    /// vertex nearest `s` and the vertices roughly 0.25 m either side of it.
    pub fn curvature_at(&self, s: f64) -> f64 {
        let n = self.points.len();
        let s = s.rem_euclid(self.length());
        let i = match self.arc.binary_search_by(|a| a.total_cmp(&s)) {
            Ok(i) => i,
            Err(i) if i > 0 && s - self.arc[i - 1] < self.arc[i] - s => i - 1,
            Err(i) => i,
        } % n;
        let k = ((0.25 * n as f64 / self.length()).round() as usize).clamp(1, (n - 1) / 2);
        let (a, b, c) = (self.points[(i + n - k) % n], self.points[i], self.points[(i + k) % n]);
        let area2 = cross(sub(b, a), sub(c, a)).abs();
        let denom = norm(sub(b, a)) * norm(sub(c, b)) * norm(sub(c, a));
        if denom == 0.0 {
            0.0
        } else {
            2.0 * area2 / denom
        }
    }

    /// Smallest circumradius over consecutive vertex triples.
    pub fn min_curvature_radius(&self) -> f64 {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                let (a, b, c) = (self.points[i], self.points[(i + 1) % n], self.points[(i + 2) % n]);
                let area2 = cross(sub(b, a), sub(c, a)).abs();
                if area2 < 1e-15 {
                    f64::INFINITY
                } else {
                    norm(sub(b, a)) * norm(sub(c, b)) * norm(sub(c, a)) / (2.0 * area2)
                }
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// True when no two non-adjacent segments intersect.
    pub fn is_simple(&self) -> bool {
        let n = self.points.len();
        let boxes: Vec<[f64; 4]> = (0..n)
            .map(|i| {
                let (a, b) = self.segment(i);
                [a[0].min(b[0]), a[1].min(b[1]), a[0].max(b[0]), a[1].max(b[1])]
            })
            .collect();
        for i in 0..n {
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (bi, bj) = (boxes[i], boxes[j]);
                if bi[2] < bj[0] || bj[2] < bi[0] || bi[3] < bj[1] || bj[3] < bi[1] {
                    continue;
                }
                let (a, b) = self.segment(i);
                let (c, d) = self.segment(j);
                let d1 = cross(sub(b, a), sub(c, a));
                let d2 = cross(sub(b, a), sub(d, a));
                let d3 = cross(sub(d, c), sub(a, c));
                let d4 = cross(sub(d, c), sub(b, c));
                if d1 * d2 <= 0.0 && d3 * d4 <= 0.0 {
                    return false;
                }
            }
        }
        true
    }
}

/// Resamples a dense closed polyline to points `SPACING` apart in arc length.
fn resample(dense: &[Point]) -> Vec<Point> {
    let n = dense.len();
    let mut arc = vec![0.0];
    for i in 0..n {
        arc.push(arc[i] + norm(sub(dense[(i + 1) % n], dense[i])));
    }
    let total = arc[n];
    let count = (total / SPACING).round().max(3.0) as usize;
    let step = total / count as f64;
    let mut out = Vec::with_capacity(count);
    let mut j = 0;
    for k in 0..count {
        let s = k as f64 * step;
        while arc[j + 1] < s {
            j += 1;
        }
        let (a, b) = (dense[j], dense[(j + 1) % n]);
        let t = (s - arc[j]) / (arc[j + 1] - arc[j]);
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    out
}

/// Smooth star-shaped loop: a circle whose radius is modulated by a few
/// low harmonics with seeded amplitudes and phases. Candidates are redrawn
/// until the length, curvature and simplicity constraints hold.
pub fn generate_track(seed: u64) -> Track {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let base = rng.gen_range(9.0..21.0);
        let harmonics: Vec<(f64, f64, f64)> = [(2.0, 0.16), (3.0, 0.08), (4.0, 0.04), (5.0, 0.02)]
            .iter()
            .map(|&(k, amp)| (k, rng.gen_range(0.0..amp), rng.gen_range(0.0..TAU)))
            .collect();
        let samples = 4000;
        let dense: Vec<Point> = (0..samples)
            .map(|i| {
                let phi = TAU * i as f64 / samples as f64;
                let r = base * (1.0 + harmonics.iter().map(|(k, a, p)| a * (k * phi + p).cos()).sum::<f64>());
                [r * phi.cos(), r * phi.sin()]
            })
            .collect();
        let Ok(track) = Track::from_points(resample(&dense), DEFAULT_HALF_WIDTH, seed) else {
            continue;
        };
        let len = track.length();
        if (50.0..=150.0).contains(&len) && track.min_curvature_radius() >= 2.0 * WHEELBASE && track.is_simple() {
            return track;
        }
    }
}
