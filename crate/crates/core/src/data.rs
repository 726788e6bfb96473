//! Episode files, window extraction and the train/validation split.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const EPISODE_MAGIC: &[u8; 8] = b"FRFCNEP1";
pub const EPISODE_VERSION: u16 = 1;

/// Frames consumed per window.
pub const FRAMES_IN: usize = 6;
/// Control pairs predicted per window.
pub const STEPS_OUT: usize = 12;
/// Frames an episode needs to yield one window.
pub const WINDOW_SPAN: usize = FRAMES_IN + STEPS_OUT;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Simulated,
    Imported,
}

/// One recorded drive: `N` stereo frames and the `(steering, motor)` pair
/// logged at each frame, both controls normalised to `[0, 1]`.
///
/// `seed` and `source` live in memory only; the file format has no room for them.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub fps: f32,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames: Vec<u8>,
    pub controls: Vec<[f32; 2]>,
    pub seed: Option<u64>,
    pub source: Source,
}

impl Episode {
    pub fn new(height: usize, width: usize, channels: usize, frames: Vec<u8>, controls: Vec<[f32; 2]>) -> Result<Self> {
        let ep = Self {
            fps: 10.0,
            height,
            width,
            channels,
            frames,
            controls,
            seed: None,
            source: Source::Imported,
        };
        ep.validate()?;
        Ok(ep)
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.frame_len();
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize || self.channels > u8::MAX as usize {
            return invalid("episode frame extents exceed the file format");
        }
        if self.frames.len() != self.len() * self.frame_len() {
            return invalid(format!(
                "{} pixel bytes for {} frames of {} bytes",
                self.frames.len(),
                self.len(),
                self.frame_len()
            ));
        }
        if let Some((i, c)) = self
            .controls
            .iter()
            .enumerate()
            .find(|(_, c)| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return invalid(format!("control {c:?} at frame {i} outside [0, 1]"));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return invalid(format!("fps {} must be positive", self.fps));
        }
        Ok(())
    }
}

pub fn write_episode(episode: &Episode, path: &Path) -> Result<()> {
    episode.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EPISODE_MAGIC)?;
    w.write_all(&EPISODE_VERSION.to_le_bytes())?;
    w.write_all(&(episode.height as u16).to_le_bytes())?;
    w.write_all(&(episode.width as u16).to_le_bytes())?;
    w.write_all(&[episode.channels as u8])?;
    w.write_all(&(episode.len() as u32).to_le_bytes())?;
    w.write_all(&episode.fps.to_le_bytes())?;
    w.write_all(&episode.frames)?;
    for c in &episode.controls {
        w.write_all(&c[0].to_le_bytes())?;
        w.write_all(&c[1].to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn corrupt(reason: impl Into<String>) -> Error {
    Error::Corrupt {
        what: "episode",
        reason: reason.into(),
    }
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => corrupt(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

pub fn read_episode(path: &Path) -> Result<Episode> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 23];
    read_exact_or(&mut r, &mut header, "header")?;
    if &header[..8] != EPISODE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u16_at = |i: usize| u16::from_le_bytes([header[i], header[i + 1]]);
    let version = u16_at(8);
    if version != EPISODE_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let (height, width) = (u16_at(10) as usize, u16_at(12) as usize);
    let channels = header[14] as usize;
    let n = u32::from_le_bytes(header[15..19].try_into().expect("4 bytes")) as usize;
    let fps = f32::from_le_bytes(header[19..23].try_into().expect("4 bytes"));
    let mut frames = vec![0u8; n * channels * height * width];
    read_exact_or(&mut r, &mut frames, "pixels")?;
    let mut raw = vec![0u8; n * 8];
    read_exact_or(&mut r, &mut raw, "controls")?;
    let controls = raw
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_le_bytes(c[..4].try_into().expect("4 bytes")),
                f32::from_le_bytes(c[4..].try_into().expect("4 bytes")),
            ]
        })
        .collect();
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(corrupt("trailing bytes after controls"));
    }
    let ep = Episode {
        fps,
        height,
        width,
        channels,
        frames,
        controls,
        seed: None,
        source: Source::Imported,
    };
    ep.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(ep)
}

/// One training example inside an episode: frames `start..start+6` as input,
/// controls `start+6..start+18` as targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Window {
    pub start: usize,
}

impl Window {
    pub fn inputs(&self) -> std::ops::Range<usize> {
        self.start..self.start + FRAMES_IN
    }

    pub fn targets(&self) -> std::ops::Range<usize> {
        self.start + FRAMES_IN..self.start + WINDOW_SPAN
    }
}

/// Every window of the episode whose start is a multiple of `stride`.
pub fn make_windows(episode: &Episode, stride: usize) -> Vec<Window> {
    let stride = stride.max(1);
    if episode.len() < WINDOW_SPAN {
        return Vec::new();
    }
    (0..=episode.len() - WINDOW_SPAN)
        .step_by(stride)
        .map(|start| Window { start })
        .collect()
}

/// A window of a particular episode in a dataset, optionally mirrored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowRef {
    pub episode: usize,
    pub start: usize,
    pub flipped: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn new(episodes: Vec<Episode>) -> Result<Self> {
        if let Some(first) = episodes.first() {
            let dims = (first.height, first.width, first.channels);
            if episodes.iter().any(|e| (e.height, e.width, e.channels) != dims) {
                return invalid("episodes in a dataset must share frame dimensions");
            }
        }
        Ok(Self { episodes })
    }

    /// Loads every episode listed in a manifest (one path per line, relative
    /// paths resolved against the manifest's directory).
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let episodes = manifest_paths(&text, base)
            .iter()
            .map(|p| read_episode(p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(episodes)
    }

    /// `(height, width, channels)` of every frame, if any episode exists.
    pub fn frame_dims(&self) -> Option<(usize, usize, usize)> {
        self.episodes.first().map(|e| (e.height, e.width, e.channels))
    }
}

fn manifest_paths(text: &str, base: &Path) -> Vec<PathBuf> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect()
}

pub fn write_manifest(paths: &[PathBuf], manifest: &Path) -> Result<()> {
    let base = manifest.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for p in paths {
        let rel = p.strip_prefix(base).unwrap_or(p);
        text.push_str(&rel.to_string_lossy());
        text.push('\n');
    }
    fs::write(manifest, text)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<WindowRef>,
    pub val: Vec<WindowRef>,
    pub val_episodes: Vec<usize>,
}

/// Reserves `val_runs` whole episodes for validation and keeps a uniform
/// `val_fraction` sample of their windows (at least one); all windows of the
/// remaining episodes are training windows.
pub fn split_train_val(
    dataset: &Dataset,
    val_runs: usize,
    val_fraction: f64,
    stride: usize,
    seed: u64,
) -> Result<Split> {
    let n = dataset.episodes.len();
    if n <= val_runs {
        return invalid(format!("{n} episodes cannot spare {val_runs} validation runs"));
    }
    if !(val_fraction > 0.0 && val_fraction <= 1.0) {
        return invalid(format!("validation fraction {val_fraction} outside (0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val_episodes = sample(&mut rng, n, val_runs).into_vec();
    val_episodes.sort_unstable();
    let refs = |e: usize| {
        make_windows(&dataset.episodes[e], stride)
            .into_iter()
            .map(move |w| WindowRef {
                episode: e,
                start: w.start,
                flipped: false,
            })
    };
    let train = (0..n)
        .filter(|e| val_episodes.binary_search(e).is_err())
        .flat_map(refs)
        .collect();
    let pool: Vec<WindowRef> = val_episodes.iter().flat_map(|&e| refs(e)).collect();
    let keep = ((pool.len() as f64 * val_fraction).round() as usize).clamp(pool.len().min(1), pool.len());
    let mut picks = sample(&mut rng, pool.len(), keep).into_vec();
    picks.sort_unstable();
    let val = picks.into_iter().map(|i| pool[i]).collect();
    Ok(Split {
        train,
        val,
        val_episodes,
    })
}

/// Appends a mirrored copy of every window.
pub fn with_flips(windows: &[WindowRef]) -> Vec<WindowRef> {
    windows
        .iter()
        .copied()
        .chain(windows.iter().map(|w| WindowRef { flipped: true, ..*w }))
        .collect()
}

pub fn normalize_pixel(v: u8) -> f32 {
    f32::from(v) / 255.0
}

/// Scales a `[C, H, W]` byte frame to `[0, 1]`.
pub fn normalize_frame(frame: &[u8], channels: usize, height: usize, width: usize) -> Result<Tensor<f32>> {
    Tensor::new(
        &[channels, height, width],
        frame.iter().map(|&v| normalize_pixel(v)).collect(),
    )
}

/// Input `[B, 6 * C, H, W]` (frames stacked in time order) and target
/// `[B, 12, 2]` tensors for a batch of windows.
pub fn assemble_batch(dataset: &Dataset, windows: &[WindowRef]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let Some((h, w, c)) = dataset.frame_dims() else {
        return invalid("empty dataset");
    };
    let frame_len = c * h * w;
    let mut input = Vec::with_capacity(windows.len() * FRAMES_IN * frame_len);
    let mut target = Vec::with_capacity(windows.len() * STEPS_OUT * 2);
    for wr in windows {
        let ep = dataset
            .episodes
            .get(wr.episode)
            .ok_or_else(|| Error::InvalidArgument(format!("no episode {}", wr.episode)))?;
        if wr.start + WINDOW_SPAN > ep.len() {
            return invalid(format!("window at {} exceeds episode of {}", wr.start, ep.len()));
        }
        let win = Window { start: wr.start };
        for f in win.inputs() {
            let frame = ep.frame(f);
            if wr.flipped {
                // mirror each plane and swap the stereo views
                for ch in (0..c).rev() {
                    for row in frame[ch * h * w..(ch + 1) * h * w].chunks_exact(w) {
                        input.extend(row.iter().rev().map(|&v| normalize_pixel(v)));
                    }
                }
            } else {
                input.extend(frame.iter().map(|&v| normalize_pixel(v)));
            }
        }
        for t in win.targets() {
            let [s, m] = ep.controls[t];
            target.push(if wr.flipped { 1.0 - s } else { s });
            target.push(m);
        }
    }
    Ok((
        Tensor::new(&[windows.len(), FRAMES_IN * c, h, w], input)?,
        Tensor::new(&[windows.len(), STEPS_OUT, 2], target)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::augment_flip;
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn random_episode(n: usize, seed: u64) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c) = (3, 5, 2);
        let frames = (0..n * h * w * c).map(|_| rng.gen()).collect();
        let controls = (0..n)
            .map(|_| [rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)])
            .collect();
        Episode::new(h, w, c, frames, controls).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.bin");
        let ep = random_episode(25, 1);
        write_episode(&ep, &path).unwrap();
        assert_eq!(read_episode(&path).unwrap(), ep);
    }

    #[test]
    fn out_of_range_control_rejected() {
        let mut ep = random_episode(3, 2);
        ep.controls[1][0] = 1.5;
        let dir = tempfile::tempdir().unwrap();
        assert!(write_episode(&ep, &dir.path().join("x")).is_err());
    }

    #[test]
    fn truncated_and_bad_magic_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.bin");
        write_episode(&random_episode(20, 3), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_episode(&path), Err(Error::Corrupt { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_episode(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn empty_episode_has_no_windows() {
        let ep = random_episode(0, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e");
        write_episode(&ep, &path).unwrap();
        assert!(make_windows(&read_episode(&path).unwrap(), 1).is_empty());
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&random_episode(18, 0), 1).len(), 1);
        assert_eq!(make_windows(&random_episode(20, 0), 1).len(), 3);
        assert_eq!(make_windows(&random_episode(17, 0), 1).len(), 0);
        assert_eq!(make_windows(&random_episode(40, 0), 5).len(), (40 - 18) / 5 + 1);
    }

    #[test]
    fn targets_follow_inputs() {
        for w in make_windows(&random_episode(30, 0), 1) {
            assert_eq!(w.targets().start, w.inputs().end);
            assert_eq!(w.targets().len(), 12);
        }
    }

    fn dataset(n: usize, frames: usize) -> Dataset {
        Dataset::new((0..n).map(|i| random_episode(frames, i as u64)).collect()).unwrap()
    }

    #[test]
    fn split_counts_and_determinism() {
        let mut eps = Vec::new();
        for i in 0..100 {
            let mut e = random_episode(1000, i);
            e.frames.clear();
            e.height = 0;
            eps.push(e);
        }
        let ds = Dataset { episodes: eps };
        let s = split_train_val(&ds, 20, 0.01, 1, 7).unwrap();
        assert_eq!(s.val.len(), (0.01f64 * 20.0 * 983.0).round() as usize);
        assert_eq!(s.train.len(), 80 * 983);
        assert_eq!(s, split_train_val(&ds, 20, 0.01, 1, 7).unwrap());
    }

    #[test]
    fn too_few_episodes() {
        assert!(split_train_val(&dataset(20, 20), 20, 0.01, 1, 0).is_err());
    }

    #[test]
    fn normalisation() {
        assert_eq!(normalize_pixel(0), 0.0);
        assert_eq!(normalize_pixel(255), 1.0);
        assert_eq!(normalize_pixel(128), 128.0 / 255.0);
        assert!((0..255u8).all(|v| normalize_pixel(v) < normalize_pixel(v + 1)));
    }

    #[test]
    fn flipped_batch_matches_augment_flip() {
        let ds = dataset(1, 20);
        let plain = WindowRef {
            episode: 0,
            start: 1,
            flipped: false,
        };
        let (x, y) = assemble_batch(&ds, &[plain]).unwrap();
        let (xf, yf) = assemble_batch(&ds, &[WindowRef { flipped: true, ..plain }]).unwrap();
        let frames = x.reshape(&[6, 2, 3, 5]).unwrap();
        let (ef, ey) = augment_flip(&frames, &y.reshape(&[12, 2]).unwrap()).unwrap();
        assert_eq!(ef.data(), xf.data());
        assert_eq!(ey.data(), yf.data());
    }

    proptest! {
        #[test]
        fn split_never_shares_episodes(seed in any::<u64>(), n in 21usize..30) {
            let ds = dataset(n, 19);
            let s = split_train_val(&ds, 20, 0.5, 1, seed).unwrap();
            for w in &s.val {
                prop_assert!(s.val_episodes.contains(&w.episode));
            }
            for w in &s.train {
                prop_assert!(!s.val_episodes.contains(&w.episode));
            }
        }
    }
}
