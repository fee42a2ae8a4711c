//! Versioned binary checkpoints.
//!
//! ```text
//! magic[8] version:u32
//! config:str                      (the `key = value` echo)
//! img_dim:u32 num_labels:u32 cameras:u32 epoch:u64
//! n:u32 (name:str rows:u32 cols:u32 f64*rows*cols)*n
//! has_ifn:u16 [d:u32 mean:f64*d var:f64 momentum:f64 eps:f64]
//! adam_step:u64 m:u32 (name:str rows:u32 cols:u32 m:f64* v:f64*)*m
//! ```
//! Strings are a `u32` byte length followed by UTF-8. Integers and floats
//! are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelDims, ModelState, TrainConfig};
use crate::binio::{In, Out};
use crate::error::{DataError, Error, Result};
use crate::generator::IfnState;
use crate::layers::Params;
use crate::numerics::{Moments, Tensor};

pub const MAGIC: &[u8; 8] = b"CCSFGCK\0";
pub const FORMAT_VERSION: u32 = 1;

fn put_tensor(o: &mut Out, t: &Tensor) {
    o.len32(t.rows());
    o.len32(t.cols());
    for &v in t.data() {
        o.f64(v);
    }
}

pub fn write_checkpoint_to<W: Write>(cfg: &TrainConfig, model: &ModelState, mut w: W) -> Result<()> {
    let mut o = Out(Vec::new());
    o.0.extend_from_slice(MAGIC);
    o.u32(FORMAT_VERSION);
    o.string(&cfg.to_text());
    o.len32(model.dims.img_dim);
    o.len32(model.dims.num_labels);
    o.len32(model.dims.cameras);
    o.u64(model.epoch as u64);
    let params = model.nets.named("");
    o.len32(params.len());
    for (name, t) in &params {
        o.string(name);
        put_tensor(&mut o, t);
    }
    match &model.ifn {
        Some(s) => {
            o.u16(1);
            o.len32(s.running_mean.len());
            for &v in &s.running_mean {
                o.f64(v);
            }
            o.f64(s.running_var);
            o.f64(s.momentum);
            o.f64(s.eps);
        }
        None => o.u16(0),
    }
    o.u64(model.adam.step);
    o.len32(model.adam.moments.len());
    for (name, m) in &model.adam.moments {
        o.string(name);
        put_tensor(&mut o, &m.m);
        for &v in m.v.data() {
            o.f64(v);
        }
    }
    w.write_all(&o.0)?;
    Ok(())
}

fn get_values(i: &mut In, n: usize, what: &str) -> Result<Vec<f64>, DataError> {
    (0..n).map(|_| i.f64(what)).collect()
}

fn get_tensor(i: &mut In, what: &str) -> Result<Tensor> {
    let offset = i.pos;
    let rows = i.usize(what)?;
    let cols = i.usize(what)?;
    let data = get_values(i, rows.saturating_mul(cols), what)?;
    Tensor::new(vec![rows, cols], data).map_err(|e| bad(offset, &format!("{what}: {e}")))
}

fn bad(offset: usize, detail: &str) -> Error {
    Error::Checkpoint(format!("byte {offset}: {detail}"))
}

fn parse(buf: &[u8]) -> Result<(TrainConfig, ModelState)> {
    let mut i = In { buf, pos: 0 };
    let magic: [u8; 8] = i.take("magic")?;
    if &magic != MAGIC {
        return Err(bad(0, "bad magic; not a checkpoint"));
    }
    let version = i.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(DataError::Version {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let text = i.string("config")?;
    let cfg = TrainConfig::from_text(&text)?;
    let dims = ModelDims {
        img_dim: i.usize("img_dim")?,
        num_labels: i.usize("num_labels")?,
        cameras: i.usize("cameras")?,
    };
    let mut model = ModelState::init(&cfg, dims);
    model.epoch = i.u64("epoch")? as usize;

    let n = i.usize("parameter count")?;
    let mut stored = BTreeMap::new();
    for _ in 0..n {
        let offset = i.pos;
        let name = i.string("parameter name")?;
        let t = get_tensor(&mut i, "parameter")?;
        if stored.insert(name.clone(), (offset, t)).is_some() {
            return Err(bad(offset, &format!("duplicate parameter `{name}`")));
        }
    }
    let mut slots = model.nets.named_mut("");
    if slots.len() != stored.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameters stored, configuration expects {}",
            stored.len(),
            slots.len()
        )));
    }
    for (name, slot) in slots.iter_mut() {
        let (offset, t) = stored
            .remove(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(bad(
                offset,
                &format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                ),
            ));
        }
        **slot = t;
    }

    let offset = i.pos;
    let has_ifn = i.u16("IFN flag")? == 1;
    if has_ifn != model.ifn.is_some() {
        return Err(bad(offset, "IFN state does not match the configuration"));
    }
    if has_ifn {
        let d = i.usize("IFN dimension")?;
        let running_mean = get_values(&mut i, d, "IFN mean")?;
        model.ifn = Some(IfnState {
            running_mean,
            running_var: i.f64("IFN variance")?,
            momentum: i.f64("IFN momentum")?,
            eps: i.f64("IFN eps")?,
        });
    }
    model.adam.step = i.u64("optimizer step")?;
    let m = i.usize("moment count")?;
    for _ in 0..m {
        let name = i.string("moment name")?;
        let first = get_tensor(&mut i, "first moment")?;
        let v = get_values(&mut i, first.len(), "second moment")?;
        let second = Tensor::from_rows(first.rows(), first.cols(), v);
        model.adam.moments.insert(name, Moments { m: first, v: second });
    }
    if i.pos != buf.len() {
        return Err(bad(i.pos, &format!("{} trailing bytes", buf.len() - i.pos)));
    }
    Ok((cfg, model))
}

pub fn read_checkpoint_from<R: Read>(mut r: R) -> Result<(TrainConfig, ModelState)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    parse(&buf)
}

pub fn save_checkpoint(cfg: &TrainConfig, model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint_to(cfg, model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TrainConfig, ModelState)> {
    parse(&fs::read(path)?)
}
