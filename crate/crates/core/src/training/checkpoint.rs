//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! "FRFCNCKP" u16 version u8 kind
//! u32 len, model config text
//! parameters | adam m | adam v | running stats   (each: u32 count, then records)
//! u32 count, u64 adam step per parameter
//! u8 has_meta [u32 epoch, f64 validation loss]
//! ```
//!
//! A record is `u16 name length, name, u8 rank, u32 extents..., f32 values`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig, ModelKind};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FRFCNCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A loaded model plus the epoch and validation loss it was saved at.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub epoch: Option<usize>,
    pub val_loss: Option<f64>,
}

fn corrupt(reason: impl Into<String>) -> Error {
    Error::Corrupt {
        what: "checkpoint",
        reason: reason.into(),
    }
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_section(out: &mut Vec<u8>, records: &[(String, Tensor<f32>)]) {
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        put_record(out, name, t);
    }
}

/// Writes parameters, Adam moments and step counts, and BatchNorm running
/// statistics. `meta` records the epoch and validation loss being saved.
pub fn save_checkpoint(model: &mut Model<f32>, path: &Path, meta: Option<(usize, f64)>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(model.kind().tag());
    let cfg = model.config().to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());

    let (mut values, mut ms, mut vs, mut steps) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    model.visit_params_ref(&mut |p| {
        values.push((p.name.clone(), p.value.clone()));
        ms.push((p.name.clone(), p.adam_m.clone()));
        vs.push((p.name.clone(), p.adam_v.clone()));
        steps.push(p.step_count);
    });
    let mut buffers = Vec::new();
    model.visit_buffers(&mut |name, t| buffers.push((name.to_string(), t.clone())));
    for section in [&values, &ms, &vs, &buffers] {
        put_section(&mut out, section);
    }
    out.extend_from_slice(&(steps.len() as u32).to_le_bytes());
    for s in steps {
        out.extend_from_slice(&s.to_le_bytes());
    }
    match meta {
        Some((epoch, loss)) => {
            out.push(1);
            out.extend_from_slice(&(epoch as u32).to_le_bytes());
            out.extend_from_slice(&loss.to_le_bytes());
        }
        None => out.push(0),
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&out)?;
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u16("record name length")? as usize;
        let name = String::from_utf8(self.take(len, "record name")?.to_vec())
            .map_err(|_| corrupt("record name is not UTF-8"))?;
        let rank = self.u8("record rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("record extent")? as usize);
        }
        let count: usize = shape.iter().product();
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| corrupt("record too large"))?, &name)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, Tensor::new(&shape, data).map_err(|e| corrupt(e.to_string()))?))
    }

    fn section(&mut self, what: &str) -> Result<Vec<(String, Tensor<f32>)>> {
        let n = self.u32(what)? as usize;
        (0..n).map(|_| self.record()).collect()
    }
}

fn assign(
    target: &mut Tensor<f32>,
    name: &str,
    records: &mut std::vec::IntoIter<(String, Tensor<f32>)>,
    kind: ModelKind,
    errors: &mut Option<Error>,
) {
    if errors.is_some() {
        return;
    }
    match records.next() {
        Some((n, t)) if n == name && t.shape() == target.shape() => *target = t,
        Some((n, t)) => {
            *errors = Some(Error::Shape(format!(
                "checkpoint record {n} {:?} does not fit {kind} tensor {name} {:?}",
                t.shape(),
                target.shape()
            )))
        }
        None => *errors = Some(corrupt(format!("missing record for {name}"))),
    }
}

/// Reads a checkpoint of any kind.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let tag = r.u8("kind")?;
    let kind = ModelKind::from_tag(tag).ok_or_else(|| corrupt(format!("unknown kind tag {tag}")))?;
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?).map_err(|_| corrupt("config is not UTF-8"))?;
    let config = ModelConfig::from_text(cfg_text).map_err(|e| corrupt(e.to_string()))?;
    let mut model = Model::<f32>::build(kind, &config, 0).map_err(|e| corrupt(e.to_string()))?;

    let mut values = r.section("parameters")?.into_iter();
    let mut ms = r.section("adam m")?.into_iter();
    let mut vs = r.section("adam v")?.into_iter();
    let mut buffers = r.section("running stats")?.into_iter();
    let n_steps = r.u32("step count")? as usize;
    let steps = (0..n_steps).map(|_| r.u64("adam step")).collect::<Result<Vec<_>>>()?;

    let mut err = None;
    let mut i = 0;
    model.visit_params(&mut |p| {
        let name = p.name.clone();
        assign(&mut p.value, &name, &mut values, kind, &mut err);
        assign(&mut p.adam_m, &name, &mut ms, kind, &mut err);
        assign(&mut p.adam_v, &name, &mut vs, kind, &mut err);
        match steps.get(i) {
            Some(&s) => p.step_count = s,
            None if err.is_none() => err = Some(corrupt("missing adam step counts")),
            None => {}
        }
        i += 1;
    });
    model.visit_buffers(&mut |name, t| assign(t, name, &mut buffers, kind, &mut err));
    if let Some(e) = err {
        return Err(e);
    }
    if values.next().is_some() || buffers.next().is_some() || steps.len() != i {
        return Err(Error::Shape(format!("checkpoint has more tensors than a {kind} model")));
    }
    let meta = match r.u8("meta flag")? {
        0 => None,
        1 => Some((
            r.u32("epoch")? as usize,
            f64::from_le_bytes(r.take(8, "loss")?.try_into().expect("8 bytes")),
        )),
        f => return Err(corrupt(format!("bad meta flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Checkpoint {
        model,
        epoch: meta.map(|m| m.0),
        val_loss: meta.map(|m| m.1),
    })
}

/// Reads a checkpoint that must hold a model of `expected` kind.
pub fn load_checkpoint_as(path: &Path, expected: ModelKind) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.model.kind() != expected {
        return Err(Error::KindMismatch {
            expected: expected.to_string(),
            found: ckpt.model.kind().to_string(),
        });
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerMode;
    use crate::training::{mse_loss, Adam};

    fn trained(kind: ModelKind) -> Model<f32> {
        let cfg = ModelConfig {
            input_height: 12,
            input_width: 16,
            ..ModelConfig::default()
        };
        let mut m = Model::<f32>::build(kind, &cfg, 5).unwrap();
        let x = Tensor::from_fn(&m.input_shape(3), |i| ((i * 13) % 29) as f32 / 29.0);
        let y = Tensor::filled(&[3, 12, 2], 0.5);
        for _ in 0..2 {
            let p = m.forward(&x).unwrap();
            let (_, g) = mse_loss(&p, &y).unwrap();
            m.backward(&g).unwrap();
            Adam::default().step_model(&mut m).unwrap();
        }
        m
    }

    #[test]
    fn round_trip_reproduces_forward() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [ModelKind::Fcn, ModelKind::Frfcn] {
            let path = dir.path().join(format!("{kind}.ckpt"));
            let mut m = trained(kind);
            save_checkpoint(&mut m, &path, Some((4, 0.25))).unwrap();
            let mut loaded = load_checkpoint(&path).unwrap();
            assert_eq!((loaded.epoch, loaded.val_loss), (Some(4), Some(0.25)));
            assert_eq!(loaded.model.state_hash(), m.state_hash());
            m.set_mode(LayerMode::Eval);
            loaded.model.set_mode(LayerMode::Eval);
            let x = Tensor::from_fn(&m.input_shape(2), |i| (i % 7) as f32 / 7.0);
            assert_eq!(m.forward(&x).unwrap(), loaded.model.forward(&x).unwrap());
            let mut steps = Vec::new();
            loaded.model.visit_params_ref(&mut |p| steps.push(p.step_count));
            assert!(steps.iter().all(|&s| s == 2));
        }
    }

    #[test]
    fn truncation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&mut trained(ModelKind::SqueezeFcn), &path, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [5, 40, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(
                matches!(load_checkpoint(&path), Err(Error::Corrupt { .. })),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn kind_mismatch_names_both() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&mut trained(ModelKind::Fcn), &path, None).unwrap();
        let err = load_checkpoint_as(&path, ModelKind::Frfcn).unwrap_err().to_string();
        assert!(err.contains("fcn") && err.contains("frfcn"), "{err}");
    }
}
