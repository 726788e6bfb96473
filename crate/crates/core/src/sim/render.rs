use super::track::Track;
use super::vehicle::VehicleState;
use super::SimConfig;

pub const TRACK_SHADE: f32 = 200.0;
pub const GROUND_SHADE: f32 = 40.0;

/// Renders one top-down grayscale view. The bottom image edge passes through
/// the rear axle, rows extend forward, and columns span the lateral axis
/// (left to right) centred on the camera, which sits `lateral_offset` metres
/// to the right of the vehicle.
pub fn render_view(track: &Track, state: &VehicleState, lateral_offset: f64, cfg: &SimConfig) -> Vec<u8> {
    let (h, w) = (cfg.render_height, cfg.render_width);
    let mpp = cfg.meters_per_pixel();
    let (f, r) = (state.forward(), state.right());
    let origin = [state.x + lateral_offset * r[0], state.y + lateral_offset * r[1]];
    // view coordinates: (ahead, lateral) in metres
    let to_view = |p: [f64; 2]| {
        let d = [p[0] - origin[0], p[1] - origin[1]];
        (d[0] * f[0] + d[1] * f[1], d[0] * r[0] + d[1] * r[1])
    };
    let view_h = h as f64 * mpp;
    let view_w = w as f64 * mpp;
    let margin = track.half_width + 2.0 * mpp;
    let mut dist = vec![f64::INFINITY; h * w];
    let pts = track.points();
    let n = pts.len();
    let mut prev = to_view(pts[n - 1]);
    for &p in pts {
        let cur = to_view(p);
        let (a, b) = (prev, cur);
        prev = cur;
        let (lo_f, hi_f) = (a.0.min(b.0) - margin, a.0.max(b.0) + margin);
        let (lo_l, hi_l) = (a.1.min(b.1) - margin, a.1.max(b.1) + margin);
        if hi_f < 0.0 || lo_f > view_h || hi_l < -view_w / 2.0 || lo_l > view_w / 2.0 {
            continue;
        }
        // pixel rows: row i covers ahead = (h - i - 0.5) * mpp at its centre
        let row_lo = ((h as f64 - hi_f / mpp - 0.5).floor().max(0.0)) as usize;
        let row_hi = ((h as f64 - lo_f / mpp - 0.5).ceil().min(h as f64 - 1.0)).max(0.0) as usize;
        let col_lo = ((lo_l / mpp + w as f64 / 2.0 - 0.5).floor().max(0.0)) as usize;
        let col_hi = ((hi_l / mpp + w as f64 / 2.0 - 0.5).ceil().min(w as f64 - 1.0)).max(0.0) as usize;
        let d = (b.0 - a.0, b.1 - a.1);
        let len2 = d.0 * d.0 + d.1 * d.1;
        for row in row_lo..=row_hi {
            let ahead = (h - row) as f64 * mpp - 0.5 * mpp;
            for col in col_lo..=col_hi {
                let lateral = (col as f64 + 0.5 - w as f64 / 2.0) * mpp;
                let t = (((ahead - a.0) * d.0 + (lateral - a.1) * d.1) / len2).clamp(0.0, 1.0);
                let (qa, ql) = (a.0 + t * d.0 - ahead, a.1 + t * d.1 - lateral);
                let dd = qa * qa + ql * ql;
                let slot = &mut dist[row * w + col];
                if dd < *slot {
                    *slot = dd;
                }
            }
        }
    }
    dist.into_iter()
        .map(|d2| {
            // one-pixel linear ramp across the track edge
            let cover = ((track.half_width - d2.sqrt()) / mpp + 0.5).clamp(0.0, 1.0) as f32;
            (GROUND_SHADE + (TRACK_SHADE - GROUND_SHADE) * cover).round() as u8
        })
        .collect()
}

/// Left and right camera views, `[2, H, W]` bytes.
pub fn render_observation(track: &Track, state: &VehicleState, cfg: &SimConfig) -> Vec<u8> {
    let mut out = render_view(track, state, -cfg.stereo_offset, cfg);
    out.extend(render_view(track, state, cfg.stereo_offset, cfg));
    out
}
