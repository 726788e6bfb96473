//! Flat `key = value` run configuration.
//!
//! Every key is optional; `#` starts a comment. Unknown keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::{FireWidths, ModelConfig};
use crate::sim::SimConfig;
use crate::training::{Sampling, TrainConfig};

/// Everything a CLI run can be configured with.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Fraction used when `--sparse` is given.
    pub sparse_fraction: f64,
    /// Add mirrored copies of every training window.
    pub augment: bool,
    pub val_runs: usize,
    pub val_fraction: f64,
    pub window_stride: usize,
    pub sim: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sparse_fraction: 0.10,
            augment: true,
            val_runs: 20,
            val_fraction: 0.01,
            window_stride: 1,
            sim: SimConfig::default(),
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(v: &str) -> Option<Vec<usize>> {
    v.split(',').map(|x| x.trim().parse().ok()).collect()
}

fn parse_ladder(v: &str) -> Option<Vec<Vec<usize>>> {
    v.split('|').map(parse_list).collect()
}

fn fire_text(groups: &[Vec<FireWidths>]) -> String {
    groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|(s, a, b)| format!("{s}/{a}/{b}"))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("|")
}

fn parse_fires(v: &str) -> Option<Vec<Vec<FireWidths>>> {
    v.split('|')
        .map(|g| {
            g.split(',')
                .map(|f| {
                    let p = parse_slash(f)?;
                    (p.len() == 3).then(|| (p[0], p[1], p[2]))
                })
                .collect()
        })
        .collect()
}

fn parse_slash(v: &str) -> Option<Vec<usize>> {
    v.split('/').map(|x| x.trim().parse().ok()).collect()
}

fn scalar<T: FromStr>(v: &str) -> Option<T> {
    v.parse().ok()
}

impl ModelConfig {
    /// `key = value` lines understood by [`ModelConfig::apply`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input_height = {}", self.input_height);
        let _ = writeln!(s, "input_width = {}", self.input_width);
        let _ = writeln!(s, "channels_per_frame = {}", self.channels_per_frame);
        let _ = writeln!(s, "frames_in = {}", self.frames_in);
        let _ = writeln!(s, "steps_out = {}", self.steps_out);
        let _ = writeln!(s, "embedding_dim = {}", self.embedding_dim);
        let _ = writeln!(s, "lstm_hidden = {}", self.lstm_hidden);
        let _ = writeln!(s, "head_hidden = {}", self.head_hidden);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let stages: Vec<String> = self.fcn_stages.iter().map(|s| list(s)).collect();
        let _ = writeln!(s, "fcn_stages = {}", stages.join("|"));
        let _ = writeln!(s, "squeeze_entry = {}", list(&self.squeeze_entry));
        let _ = writeln!(s, "squeeze_fires = {}", fire_text(&self.squeeze_fires));
        let _ = writeln!(s, "squeeze_exit = {}", list(&self.squeeze_exit));
        let _ = writeln!(s, "baseline_fc = {}", list(&self.baseline_fc));
        let _ = writeln!(s, "baseline_pad = {}", self.baseline_pad);
        s
    }

    /// Sets one field; `Ok(false)` when the key is not a model key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("bad value '{value}' for {key}"));
        match key {
            "input_height" => self.input_height = scalar(value).ok_or_else(bad)?,
            "input_width" => self.input_width = scalar(value).ok_or_else(bad)?,
            "channels_per_frame" => self.channels_per_frame = scalar(value).ok_or_else(bad)?,
            "frames_in" => self.frames_in = scalar(value).ok_or_else(bad)?,
            "steps_out" => self.steps_out = scalar(value).ok_or_else(bad)?,
            "embedding_dim" => self.embedding_dim = scalar(value).ok_or_else(bad)?,
            "lstm_hidden" => self.lstm_hidden = scalar(value).ok_or_else(bad)?,
            "head_hidden" => self.head_hidden = scalar(value).ok_or_else(bad)?,
            "dropout" => self.dropout = scalar(value).ok_or_else(bad)?,
            "fcn_stages" => self.fcn_stages = parse_ladder(value).ok_or_else(bad)?,
            "squeeze_entry" => self.squeeze_entry = parse_list(value).ok_or_else(bad)?,
            "squeeze_fires" => self.squeeze_fires = parse_fires(value).ok_or_else(bad)?,
            "squeeze_exit" => self.squeeze_exit = parse_list(value).ok_or_else(bad)?,
            "baseline_fc" => self.baseline_fc = parse_list(value).ok_or_else(bad)?,
            "baseline_pad" => self.baseline_pad = scalar(value).ok_or_else(bad)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line_no, key, value) in entries(text)? {
            if !cfg.apply(key, value)? {
                return Err(Error::Config(format!("line {line_no}: unknown key '{key}'")));
            }
        }
        Ok(cfg)
    }
}

/// `(line number, key, value)` for every non-blank, non-comment line.
fn entries(text: &str) -> Result<Vec<(usize, &str, &str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
        out.push((i + 1, k.trim(), v.trim()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line_no, key, value) in entries(text)? {
            let bad = || Error::Config(format!("line {line_no}: bad value '{value}' for {key}"));
            if cfg.model.apply(key, value)? || cfg.sim.apply(key, value)? {
                continue;
            }
            let t = &mut cfg.train;
            match key {
                "alpha" => t.adam.alpha = scalar(value).ok_or_else(bad)?,
                "beta1" => t.adam.beta1 = scalar(value).ok_or_else(bad)?,
                "beta2" => t.adam.beta2 = scalar(value).ok_or_else(bad)?,
                "eps" => t.adam.eps = scalar(value).ok_or_else(bad)?,
                "batch_size" => t.batch_size = scalar(value).ok_or_else(bad)?,
                "epoch_unit_fraction" => t.epoch_unit_fraction = scalar(value).ok_or_else(bad)?,
                "max_epochs" => t.max_epochs = scalar(value).ok_or_else(bad)?,
                "seed" => t.seed = scalar(value).ok_or_else(bad)?,
                "sparse_fraction" => cfg.sparse_fraction = scalar(value).ok_or_else(bad)?,
                "augment" => cfg.augment = scalar(value).ok_or_else(bad)?,
                "val_runs" => cfg.val_runs = scalar(value).ok_or_else(bad)?,
                "val_fraction" => cfg.val_fraction = scalar(value).ok_or_else(bad)?,
                "window_stride" => cfg.window_stride = scalar(value).ok_or_else(bad)?,
                _ => return Err(Error::Config(format!("line {line_no}: unknown key '{key}'"))),
            }
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn sparse(&self) -> Sampling {
        Sampling::Sparse {
            fraction: self.sparse_fraction,
        }
    }

    /// The renderer must produce frames the model can read.
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            render_height: self.model.input_height,
            render_width: self.model.input_width,
            ..self.sim.clone()
        }
    }
}
