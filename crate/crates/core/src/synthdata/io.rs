//! Versioned little-endian binary dataset format.
//!
//! ```text
//! magic[8] version:u32 seed:u64
//! train_ids:u32 test_ids:u32 cameras:u16 img_dim:u32 proto_dim:u32
//! samples_per_id:u32 query_per_id:u32 gallery_per_camera:u32
//! noise:f64 camera_specificity:f64 camera_bias:f64 overlap:f64
//! num_labels:u32 n_dup:u32 (original:u32 alias:u32 camera:u16)*n_dup
//! n_train:u32 n_query:u32 n_gallery:u32
//! (y:u32 c:u16 x:f64*img_dim)*(n_train + n_query + n_gallery)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DataConfig, DatasetBundle, DatasetMeta, Duplicate, Sample};
use crate::binio::{In, Out};
use crate::error::DataError;

pub const MAGIC: &[u8; 8] = b"CCSFGDS\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_dataset_to<W: Write>(bundle: &DatasetBundle, mut w: W) -> Result<(), DataError> {
    let m = &bundle.meta;
    let c = &m.config;
    let mut o = Out(Vec::new());
    o.0.extend_from_slice(MAGIC);
    o.u32(FORMAT_VERSION);
    o.u64(m.seed);
    o.len32(c.train_ids);
    o.len32(c.test_ids);
    o.u16(c.cameras as u16);
    o.len32(c.img_dim);
    o.len32(c.proto_dim);
    o.len32(c.samples_per_id);
    o.len32(c.query_per_id);
    o.len32(c.gallery_per_camera);
    o.f64(c.noise);
    o.f64(c.camera_specificity);
    o.f64(c.camera_bias);
    o.f64(m.overlap);
    o.len32(m.num_labels);
    o.len32(m.duplicates.len());
    for d in &m.duplicates {
        o.u32(d.original);
        o.u32(d.alias);
        o.u16(d.camera);
    }
    o.len32(bundle.train.len());
    o.len32(bundle.query.len());
    o.len32(bundle.gallery.len());
    for s in bundle.train.iter().chain(&bundle.query).chain(&bundle.gallery) {
        o.u32(s.y);
        o.u16(s.c);
        for &v in &s.x {
            o.f64(v);
        }
    }
    w.write_all(&o.0)?;
    Ok(())
}

pub fn read_dataset_from<R: Read>(mut r: R) -> Result<DatasetBundle, DataError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    parse(&buf)
}

fn parse(buf: &[u8]) -> Result<DatasetBundle, DataError> {
    let mut i = In { buf, pos: 0 };
    let magic: [u8; 8] = i.take("magic")?;
    if &magic != MAGIC {
        return Err(DataError::Parse {
            offset: 0,
            detail: "bad magic; not a dataset file".into(),
        });
    }
    let version = i.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(DataError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let seed = i.u64("seed")?;
    let config = DataConfig {
        train_ids: i.usize("train_ids")?,
        test_ids: i.usize("test_ids")?,
        cameras: i.u16("cameras")? as usize,
        img_dim: i.usize("img_dim")?,
        proto_dim: i.usize("proto_dim")?,
        samples_per_id: i.usize("samples_per_id")?,
        query_per_id: i.usize("query_per_id")?,
        gallery_per_camera: i.usize("gallery_per_camera")?,
        noise: i.f64("noise")?,
        camera_specificity: i.f64("camera_specificity")?,
        camera_bias: i.f64("camera_bias")?,
    };
    let overlap = i.f64("overlap")?;
    let num_labels = i.usize("num_labels")?;
    let n_dup = i.usize("duplicate count")?;
    let mut duplicates = Vec::with_capacity(n_dup.min(1 << 16));
    for _ in 0..n_dup {
        duplicates.push(Duplicate {
            original: i.u32("duplicate original")?,
            alias: i.u32("duplicate alias")?,
            camera: i.u16("duplicate camera")?,
        });
    }
    let counts = [i.usize("n_train")?, i.usize("n_query")?, i.usize("n_gallery")?];
    let mut sets: [Vec<Sample>; 3] = Default::default();
    for (set, &n) in sets.iter_mut().zip(&counts) {
        for _ in 0..n {
            let y = i.u32("record label")?;
            let c = i.u16("record camera")?;
            let mut x = Vec::with_capacity(config.img_dim);
            for _ in 0..config.img_dim {
                x.push(i.f64("record value")?);
            }
            set.push(Sample { x, y, c });
        }
    }
    if i.pos != buf.len() {
        return Err(DataError::Parse {
            offset: i.pos as u64,
            detail: format!("{} trailing bytes", buf.len() - i.pos),
        });
    }
    let [train, query, gallery] = sets;
    let bundle = DatasetBundle {
        meta: DatasetMeta {
            seed,
            config,
            overlap,
            num_labels,
            duplicates,
        },
        train,
        query,
        gallery,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn write_dataset(bundle: &DatasetBundle, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut buf = Vec::new();
    write_dataset_to(bundle, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<DatasetBundle, DataError> {
    parse(&fs::read(path)?)
}
