//! Convergence statistics over validation-loss curves, the autonomy score,
//! and the per-model summary table.
//!
//! For a curve `l_1..l_n` with minimum `L*` first reached at epoch `m`, the
//! per-epoch rate is `(l_e - L*) / (l_{e-1} - L*)`. Terms whose numerator or
//! denominator is not positive are skipped. `r` is the geometric mean of the
//! rates up to `m`, `r_div` the geometric mean after `m`. Each spread is
//! `exp(rms(ln rate - ln mean))`; for `sigma_r` the leading epochs whose loss
//! is still above `warmup_factor * L*` are left out.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::training::LossCurve;

/// Seconds of autonomy charged per failure.
pub const FAILURE_PENALTY_S: f64 = 6.0;
pub const DEFAULT_WARMUP_FACTOR: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceStats {
    pub r: f64,
    pub r_div: Option<f64>,
    pub sigma_r: f64,
    pub sigma_r_div: Option<f64>,
    pub min_loss: f64,
    /// Epoch label of the first minimum.
    pub epoch_min: usize,
    /// Leading epochs left out of `sigma_r`.
    pub warmup_excluded: usize,
}

/// `(index, rate)` for every usable epoch index `e` in `range`.
fn rates(losses: &[f64], min: f64, range: std::ops::Range<usize>) -> Vec<(usize, f64)> {
    range
        .filter_map(|e| {
            let (num, den) = (losses[e] - min, losses[e - 1] - min);
            (num > 0.0 && den > 0.0).then(|| (e, num / den))
        })
        .collect()
}

/// Geometric mean and geometric SD factor.
fn geometric(rates: &[f64]) -> (f64, f64) {
    let logs: Vec<f64> = rates.iter().map(|r| r.ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let ms = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / logs.len() as f64;
    (mean.exp(), ms.sqrt().exp())
}

pub fn convergence_stats(curve: &LossCurve) -> Result<ConvergenceStats> {
    convergence_stats_with(curve, DEFAULT_WARMUP_FACTOR)
}

pub fn convergence_stats_with(curve: &LossCurve, warmup_factor: f64) -> Result<ConvergenceStats> {
    let losses = curve.losses();
    if losses.len() < 3 {
        return invalid(format!("a loss curve needs at least 3 epochs, got {}", losses.len()));
    }
    if let Some(l) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("loss {l} in curve")));
    }
    let (m, min) = losses
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |b, (i, l)| if l < b.1 { (i, l) } else { b });
    let pre = rates(&losses, min, 1..m + 1);
    if pre.is_empty() {
        return invalid("no usable convergence terms before the minimum");
    }
    let warm = losses.iter().position(|&l| l <= warmup_factor * min).unwrap_or(m);
    let (r, _) = geometric(&pre.iter().map(|p| p.1).collect::<Vec<_>>());
    let settled: Vec<f64> = pre.iter().filter(|p| p.0 >= warm).map(|p| p.1).collect();
    let sigma_r = if settled.is_empty() {
        geometric(&pre.iter().map(|p| p.1).collect::<Vec<_>>()).1
    } else {
        geometric(&settled).1
    };
    let post: Vec<f64> = rates(&losses, min, m + 1..losses.len())
        .into_iter()
        .map(|p| p.1)
        .collect();
    let div = (!post.is_empty()).then(|| geometric(&post));
    Ok(ConvergenceStats {
        r,
        r_div: div.map(|d| d.0),
        sigma_r,
        sigma_r_div: div.map(|d| d.1),
        min_loss: min,
        epoch_min: curve.points[m].0,
        warmup_excluded: warm,
    })
}

/// Fraction of `t` seconds driven autonomously with `n` failures, each
/// charged six seconds. Clamped to zero when the penalties exceed `t`.
pub fn autonomy(t: f64, n: u32) -> f64 {
    let a = (t - FAILURE_PENALTY_S * f64::from(n)) / t;
    if a.is_finite() && a >= 0.0 {
        a
    } else {
        log::warn!("{n} failures in {t} s leave no autonomous time; reporting 0");
        0.0
    }
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub params: usize,
    pub stats: ConvergenceStats,
}

pub const REPORT_HEADER: &str = "model,r,r_div,sigma_r,sigma_r_div,min_loss,epoch_min,warmup_excluded,params";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

pub fn format_report(rows: &[ReportRow]) -> Result<String> {
    if rows.is_empty() {
        return invalid("a report needs at least one model");
    }
    let mut out = format!("{REPORT_HEADER}\n");
    for row in rows {
        if row.model.contains([',', '\n']) {
            return invalid(format!("model name {:?} cannot be written to CSV", row.model));
        }
        let s = &row.stats;
        let _ = writeln!(
            out,
            "{},{:e},{},{:e},{},{:e},{},{},{}",
            row.model,
            s.r,
            opt(s.r_div),
            s.sigma_r,
            opt(s.sigma_r_div),
            s.min_loss,
            s.epoch_min,
            s.warmup_excluded,
            row.params
        );
    }
    Ok(out)
}

pub fn write_report(rows: &[ReportRow], path: &Path) -> Result<()> {
    std::fs::write(path, format_report(rows)?)?;
    Ok(())
}

pub fn parse_report(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(REPORT_HEADER) {
        return Err(Error::Corrupt {
            what: "report",
            reason: "missing header".into(),
        });
    }
    let bad = |i: usize, why: &str| Error::Corrupt {
        what: "report",
        reason: format!("row {}: {why}", i + 1),
    };
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 9 {
                return Err(bad(i, "expected 9 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i, "bad number"));
            let maybe = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(i, "bad integer"));
            Ok(ReportRow {
                model: f[0].to_string(),
                stats: ConvergenceStats {
                    r: num(f[1])?,
                    r_div: maybe(f[2])?,
                    sigma_r: num(f[3])?,
                    sigma_r_div: maybe(f[4])?,
                    min_loss: num(f[5])?,
                    epoch_min: int(f[6])?,
                    warmup_excluded: int(f[7])?,
                },
                params: int(f[8])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn curve(losses: &[f64]) -> LossCurve {
        LossCurve {
            points: losses.iter().enumerate().map(|(i, &l)| (i + 1, l)).collect(),
        }
    }

    #[test]
    fn hand_example() {
        let s = convergence_stats(&curve(&[0.9, 0.3, 0.15, 0.1])).unwrap();
        assert!((s.r - 0.25).abs() < 1e-12);
        assert!((s.sigma_r - 1.0).abs() < 1e-12);
        assert_eq!((s.min_loss, s.epoch_min), (0.1, 4));
        assert_eq!(s.r_div, None);
        assert_eq!(s.sigma_r_div, None);
    }

    #[test]
    fn geometric_decay_recovers_rate() {
        let losses: Vec<f64> = (0..40).map(|e| 0.01 + 0.5 * 0.9f64.powi(e)).collect();
        // the loss never reaches 0.01, so append the floor
        let mut l = losses;
        l.push(0.01);
        let s = convergence_stats(&curve(&l)).unwrap();
        // the last step (to the floor) is skipped as a zero-numerator term
        assert!((s.r - 0.9).abs() < 1e-9, "{}", s.r);
        assert!((s.sigma_r - 1.0).abs() < 1e-9);
    }

    #[test]
    fn post_minimum_rise_gives_divergence() {
        let s = convergence_stats(&curve(&[1.0, 0.5, 0.2, 0.1, 0.2, 0.5])).unwrap();
        // only e=6 has both differences positive: (0.5-0.1)/(0.2-0.1)
        assert!((s.r_div.unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(s.sigma_r_div, Some(1.0));
    }

    #[test]
    fn ties_pick_the_earliest_minimum() {
        let s = convergence_stats(&curve(&[1.0, 0.5, 0.2, 0.2, 0.3])).unwrap();
        assert_eq!(s.epoch_min, 3);
    }

    #[test]
    fn errors() {
        assert!(convergence_stats(&curve(&[1.0, 0.5])).is_err());
        // minimum at the first epoch leaves no terms
        assert!(convergence_stats(&curve(&[0.1, 0.5, 0.9])).is_err());
        assert!(convergence_stats(&curve(&[1.0, f64::NAN, 0.1])).is_err());
    }

    #[test]
    fn autonomy_examples() {
        assert_eq!(autonomy(100.0, 0), 1.0);
        assert!((autonomy(100.0, 3) - 0.82).abs() < 1e-12);
        assert_eq!(autonomy(12.0, 2), 0.0);
        assert_eq!(autonomy(12.0, 5), 0.0);
    }

    /// Literal transcription of the definitions with explicit loops.
    fn reference(l: &[f64], factor: f64) -> (f64, Option<f64>, f64, Option<f64>) {
        let mut m = 0;
        for i in 1..l.len() {
            if l[i] < l[m] {
                m = i;
            }
        }
        let min = l[m];
        let w = l.iter().position(|&v| v <= factor * min).unwrap_or(m);
        let mut all = Vec::new();
        let mut late = Vec::new();
        let mut post = Vec::new();
        for e in 1..l.len() {
            let a = l[e] - min;
            let b = l[e - 1] - min;
            if a <= 0.0 || b <= 0.0 {
                continue;
            }
            if e <= m {
                all.push(a / b);
                if e >= w {
                    late.push(a / b);
                }
            } else {
                post.push(a / b);
            }
        }
        let gm = |v: &[f64]| (v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64).exp();
        let gsd = |v: &[f64]| {
            let g = gm(v).ln();
            (v.iter().map(|x| (x.ln() - g) * (x.ln() - g)).sum::<f64>() / v.len() as f64)
                .sqrt()
                .exp()
        };
        let sig = if late.is_empty() { gsd(&all) } else { gsd(&late) };
        let (rd, sd) = if post.is_empty() {
            (None, None)
        } else {
            (Some(gm(&post)), Some(gsd(&post)))
        };
        (gm(&all), rd, sig, sd)
    }

    fn random_curve(rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = rng.gen_range(3..60);
        let mut l = vec![rng.gen_range(0.5..2.0)];
        for _ in 1..n {
            let last = *l.last().unwrap();
            l.push(last * rng.gen_range(0.6..1.15));
        }
        l
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * a.abs().max(1.0)
    }

    #[test]
    fn agrees_with_reference_on_random_curves() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0;
        while checked < 1000 {
            let l = random_curve(&mut rng);
            let Ok(s) = convergence_stats(&curve(&l)) else {
                continue;
            };
            let (r, rd, sig, sd) = reference(&l, 2.0);
            assert!(close(s.r, r) && close(s.sigma_r, sig), "{l:?}");
            assert_eq!(s.r_div.is_some(), rd.is_some());
            if let (Some(a), Some(b)) = (s.r_div, rd) {
                assert!(close(a, b));
                assert!(close(s.sigma_r_div.unwrap(), sd.unwrap()));
            }
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn scale_invariance(seed in any::<u64>(), k in 1e-3f64..1e3) {
            let l = random_curve(&mut ChaCha8Rng::seed_from_u64(seed));
            let scaled: Vec<f64> = l.iter().map(|x| x * k).collect();
            if let (Ok(a), Ok(b)) = (convergence_stats(&curve(&l)), convergence_stats(&curve(&scaled))) {
                prop_assert!((a.r - b.r).abs() < 1e-9);
                prop_assert!((a.sigma_r - b.sigma_r).abs() < 1e-9);
                prop_assert_eq!(a.r_div.is_some(), b.r_div.is_some());
                if let (Some(x), Some(y)) = (a.r_div, b.r_div) {
                    prop_assert!((x - y).abs() < 1e-9 * x.max(1.0));
                    prop_assert!((a.sigma_r_div.unwrap() - b.sigma_r_div.unwrap()).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn shift_invariance_of_rates(ks in prop::collection::vec(1u32..4096, 3..40), j in 0u32..8192) {
            // multiples of 1/1024 keep every difference exact
            let l: Vec<f64> = ks.iter().map(|&k| f64::from(k) / 1024.0).collect();
            let c = f64::from(j) / 1024.0;
            let shifted: Vec<f64> = l.iter().map(|x| x + c).collect();
            let min = l.iter().copied().fold(f64::INFINITY, f64::min);
            let smin = shifted.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(rates(&l, min, 1..l.len()), rates(&shifted, smin, 1..l.len()));
            if let (Ok(a), Ok(b)) = (convergence_stats(&curve(&l)), convergence_stats(&curve(&shifted))) {
                prop_assert_eq!(a.r, b.r);
                prop_assert_eq!(a.r_div, b.r_div);
                prop_assert_eq!(a.epoch_min, b.epoch_min);
            }
        }

        #[test]
        fn sigma_factors_at_least_one(seed in any::<u64>()) {
            let l = random_curve(&mut ChaCha8Rng::seed_from_u64(seed));
            if let Ok(s) = convergence_stats(&curve(&l)) {
                prop_assert!(s.sigma_r >= 1.0);
                prop_assert!(s.sigma_r_div.is_none_or(|v| v >= 1.0));
                prop_assert!(s.r > 0.0);
            }
        }
    }

    #[test]
    fn report_round_trip() {
        let a = convergence_stats(&curve(&[1.0, 0.5, 0.2, 0.1, 0.2, 0.5])).unwrap();
        let b = convergence_stats(&curve(&[0.9, 0.3, 0.15, 0.1])).unwrap();
        let rows = vec![
            ReportRow {
                model: "fcn".into(),
                params: 12345,
                stats: a,
            },
            ReportRow {
                model: "frfcn".into(),
                params: 999,
                stats: b,
            },
        ];
        let text = format_report(&rows).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(parse_report(&text).unwrap(), rows);
        assert!(format_report(&[]).is_err());
        assert!(parse_report("nope\n").is_err());
    }
}
