//! Synthetic isolated-camera re-identification data.
//!
//! Every identity has a latent prototype `u ∈ R^k`; a camera renders it as
//! `x = A_c u + b_c + η·noise`. Training identities are each assigned to
//! exactly one camera, so no person is ever observed by two cameras during
//! training. Held-out identities are rendered by every camera and split into
//! a query set (one camera per identity) and a gallery (all cameras).

mod io;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::numerics::rng::{derived, normal_vec, SeedRng};
use crate::numerics::Tensor;

pub use io::{read_dataset, read_dataset_from, write_dataset, write_dataset_to, FORMAT_VERSION, MAGIC};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: u32,
    pub c: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Training identities `M`.
    pub train_ids: usize,
    pub test_ids: usize,
    /// Cameras `C`.
    pub cameras: usize,
    /// Observation dimension `d_img`.
    pub img_dim: usize,
    /// Prototype dimension `k`.
    pub proto_dim: usize,
    pub samples_per_id: usize,
    pub query_per_id: usize,
    pub gallery_per_camera: usize,
    /// Observation noise scale η.
    pub noise: f64,
    /// 0 renders every camera through one shared orthogonal frame; 1 gives
    /// each camera an independent random frame.
    pub camera_specificity: f64,
    /// Norm of each per-camera bias.
    pub camera_bias: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_ids: 60,
            test_ids: 20,
            cameras: 4,
            img_dim: 32,
            proto_dim: 8,
            samples_per_id: 8,
            query_per_id: 2,
            gallery_per_camera: 2,
            noise: 0.1,
            camera_specificity: 0.0,
            camera_bias: 1.0,
        }
    }
}

/// Dataset configuration keys, in echo order.
pub const DATA_KEYS: &[&str] = &[
    "train_ids",
    "test_ids",
    "cameras",
    "img_dim",
    "proto_dim",
    "samples_per_id",
    "query_per_id",
    "gallery_per_camera",
    "noise",
    "camera_specificity",
    "camera_bias",
];

impl DataConfig {
    /// Set one key from its textual value; validation is left to [`DataConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), DataError> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, DataError> {
            v.trim()
                .parse()
                .map_err(|_| DataError::InvalidConfig(format!("cannot parse `{}` for key `{key}`", v.trim())))
        }
        match key {
            "train_ids" => self.train_ids = parse(key, value)?,
            "test_ids" => self.test_ids = parse(key, value)?,
            "cameras" => self.cameras = parse(key, value)?,
            "img_dim" => self.img_dim = parse(key, value)?,
            "proto_dim" => self.proto_dim = parse(key, value)?,
            "samples_per_id" => self.samples_per_id = parse(key, value)?,
            "query_per_id" => self.query_per_id = parse(key, value)?,
            "gallery_per_camera" => self.gallery_per_camera = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "camera_specificity" => self.camera_specificity = parse(key, value)?,
            "camera_bias" => self.camera_bias = parse(key, value)?,
            _ => return Err(DataError::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "train_ids" => self.train_ids.to_string(),
            "test_ids" => self.test_ids.to_string(),
            "cameras" => self.cameras.to_string(),
            "img_dim" => self.img_dim.to_string(),
            "proto_dim" => self.proto_dim.to_string(),
            "samples_per_id" => self.samples_per_id.to_string(),
            "query_per_id" => self.query_per_id.to_string(),
            "gallery_per_camera" => self.gallery_per_camera.to_string(),
            "noise" => self.noise.to_string(),
            "camera_specificity" => self.camera_specificity.to_string(),
            "camera_bias" => self.camera_bias.to_string(),
            _ => return None,
        })
    }

    pub fn to_text(&self) -> String {
        DATA_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.cameras < 2 {
            return bad(format!("need at least 2 cameras, got {}", self.cameras));
        }
        if self.train_ids < 2 * self.cameras {
            return bad(format!(
                "need at least 2 training identities per camera (M >= 2C): M={}, C={}",
                self.train_ids, self.cameras
            ));
        }
        if self.samples_per_id < 2 {
            return bad(format!(
                "samples per identity must be >= 2, got {}",
                self.samples_per_id
            ));
        }
        if self.proto_dim == 0 || self.proto_dim > self.img_dim {
            return bad(format!(
                "prototype dim k={} must be in 1..=d_img={}",
                self.proto_dim, self.img_dim
            ));
        }
        if self.test_ids == 0 || self.query_per_id == 0 || self.gallery_per_camera == 0 {
            return bad("test split needs at least one identity, query and gallery sample".into());
        }
        if self.cameras > u16::MAX as usize {
            return bad(format!("too many cameras: {}", self.cameras));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise scale must be finite and >= 0, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.camera_specificity) {
            return bad(format!(
                "camera_specificity must be in [0, 1], got {}",
                self.camera_specificity
            ));
        }
        if !(self.camera_bias >= 0.0 && self.camera_bias.is_finite()) {
            return bad(format!("camera_bias must be finite and >= 0, got {}", self.camera_bias));
        }
        Ok(())
    }
}

/// One training person observed again under a second camera with a fresh label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Duplicate {
    pub original: u32,
    pub alias: u32,
    pub camera: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub config: DataConfig,
    pub overlap: f64,
    /// Size of the training label space (grows with overlap).
    pub num_labels: usize,
    pub duplicates: Vec<Duplicate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub meta: DatasetMeta,
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    /// `[d_img, k]`.
    pub transform: Tensor,
    pub bias: Vec<f64>,
    pub noise: f64,
}

impl CameraModel {
    pub fn render<R: Rng + ?Sized>(&self, proto: &[f64], rng: &mut R) -> Vec<f64> {
        let d = self.transform.rows();
        let eps = normal_vec(rng, d);
        (0..d)
            .map(|i| {
                let row = self.transform.row_slice(i);
                let lin: f64 = row.iter().zip(proto).map(|(a, u)| a * u).sum();
                lin + self.bias[i] + self.noise * eps[i]
            })
            .collect()
    }
}

// Stream tags for independent parts of the generator.
const STREAM_CAMERAS: u64 = 1;
const STREAM_TRAIN_PROTOS: u64 = 2;
const STREAM_TEST_PROTOS: u64 = 3;
const STREAM_TRAIN_OBS: u64 = 4;
const STREAM_TEST_OBS: u64 = 5;
const STREAM_OVERLAP: u64 = 6;

/// Cameras and identity prototypes; a pure function of `(config, seed)`.
#[derive(Debug, Clone)]
pub struct World {
    pub cameras: Vec<CameraModel>,
    pub train_protos: Vec<Vec<f64>>,
    pub test_protos: Vec<Vec<f64>>,
}

impl World {
    pub fn build(cfg: &DataConfig, seed: u64) -> Self {
        let mut rng = derived(seed, STREAM_CAMERAS);
        let (d, k) = (cfg.img_dim, cfg.proto_dim);
        let shared = normal_vec(&mut rng, d * k);
        let s = cfg.camera_specificity;
        let cameras = (0..cfg.cameras)
            .map(|_| {
                let own = normal_vec(&mut rng, d * k);
                let mixed: Vec<f64> = shared.iter().zip(&own).map(|(a, b)| (1.0 - s) * a + s * b).collect();
                let frame = orthonormal_columns(d, k, &mixed);
                let gain = rng.random_range(0.8..=1.2);
                let dir = normal_vec(&mut rng, d);
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                CameraModel {
                    transform: frame.map(|v| v * gain),
                    bias: dir.iter().map(|v| v * cfg.camera_bias / norm).collect(),
                    noise: cfg.noise,
                }
            })
            .collect();
        let mut rng = derived(seed, STREAM_TRAIN_PROTOS);
        let train_protos = (0..cfg.train_ids).map(|_| normal_vec(&mut rng, k)).collect();
        let mut rng = derived(seed, STREAM_TEST_PROTOS);
        let test_protos = (0..cfg.test_ids).map(|_| normal_vec(&mut rng, k)).collect();
        Self {
            cameras,
            train_protos,
            test_protos,
        }
    }
}

/// Gram-Schmidt on the columns of a row-major `[d, k]` matrix (thin QR's Q).
fn orthonormal_columns(d: usize, k: usize, data: &[f64]) -> Tensor {
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| (0..d).map(|i| data[i * k + j]).collect()).collect();
    for j in 0..k {
        for p in 0..j {
            let dot: f64 = cols[j].iter().zip(&cols[p]).map(|(a, b)| a * b).sum();
            let prev = cols[p].clone();
            for (a, b) in cols[j].iter_mut().zip(&prev) {
                *a -= dot * b;
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        for a in &mut cols[j] {
            *a /= norm;
        }
    }
    let mut out = vec![0.0; d * k];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            out[i * k + j] = *v;
        }
    }
    Tensor::from_rows(d, k, out)
}

/// Camera of training identity `y` (round-robin).
pub fn train_camera(y: usize, cameras: usize) -> u16 {
    (y % cameras) as u16
}

/// Query camera of held-out identity `t`.
pub fn query_camera(t: usize, cameras: usize) -> u16 {
    (t % cameras) as u16
}

pub fn generate_dataset(cfg: &DataConfig, seed: u64) -> Result<DatasetBundle, DataError> {
    cfg.validate()?;
    let world = World::build(cfg, seed);
    let c = cfg.cameras;

    let mut rng = derived(seed, STREAM_TRAIN_OBS);
    let mut train = Vec::with_capacity(cfg.train_ids * cfg.samples_per_id);
    for (y, proto) in world.train_protos.iter().enumerate() {
        let cam = train_camera(y, c);
        for _ in 0..cfg.samples_per_id {
            train.push(Sample {
                x: world.cameras[cam as usize].render(proto, &mut rng),
                y: y as u32,
                c: cam,
            });
        }
    }

    let mut rng = derived(seed, STREAM_TEST_OBS);
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for (t, proto) in world.test_protos.iter().enumerate() {
        let label = (cfg.train_ids + t) as u32;
        let qcam = query_camera(t, c);
        for _ in 0..cfg.query_per_id {
            query.push(Sample {
                x: world.cameras[qcam as usize].render(proto, &mut rng),
                y: label,
                c: qcam,
            });
        }
        for (cam, model) in world.cameras.iter().enumerate() {
            for _ in 0..cfg.gallery_per_camera {
                gallery.push(Sample {
                    x: model.render(proto, &mut rng),
                    y: label,
                    c: cam as u16,
                });
            }
        }
    }

    Ok(DatasetBundle {
        meta: DatasetMeta {
            seed,
            config: cfg.clone(),
            overlap: 0.0,
            num_labels: cfg.train_ids,
            duplicates: Vec::new(),
        },
        train,
        query,
        gallery,
    })
}

/// True iff no identity appears under two distinct cameras.
pub fn verify_iscs(train: &[Sample]) -> bool {
    let mut seen: HashMap<u32, u16> = HashMap::new();
    train.iter().all(|s| *seen.entry(s.y).or_insert(s.c) == s.c)
}

/// Re-observe `⌊ρ·M⌋` training persons under a second camera, each under a
/// fresh label, recording the ground-truth duplication map in the metadata.
pub fn apply_overlap(bundle: &DatasetBundle, rho: f64, seed: u64) -> Result<DatasetBundle, DataError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(DataError::InvalidConfig(format!("overlap ratio {rho} outside [0, 1]")));
    }
    let cfg = &bundle.meta.config;
    if cfg.cameras < 2 {
        return Err(DataError::InvalidConfig("overlap needs at least 2 cameras".into()));
    }
    let mut out = bundle.clone();
    out.meta.overlap = rho;
    let count = (rho * cfg.train_ids as f64 + 1e-9).floor() as usize;
    if count == 0 {
        return Ok(out);
    }

    let world = World::build(cfg, bundle.meta.seed);
    let mut rng: SeedRng = derived(seed, STREAM_OVERLAP);
    let mut ids: Vec<usize> = (0..cfg.train_ids).collect();
    ids.shuffle(&mut rng);
    ids.truncate(count);
    ids.sort_unstable();

    let mut next = out.meta.num_labels as u32;
    for y in ids {
        let home = train_camera(y, cfg.cameras) as usize;
        let shift = rng.random_range(1..cfg.cameras);
        let cam = ((home + shift) % cfg.cameras) as u16;
        for _ in 0..cfg.samples_per_id {
            out.train.push(Sample {
                x: world.cameras[cam as usize].render(&world.train_protos[y], &mut rng),
                y: next,
                c: cam,
            });
        }
        out.meta.duplicates.push(Duplicate {
            original: y as u32,
            alias: next,
            camera: cam,
        });
        next += 1;
    }
    out.meta.num_labels = next as usize;
    Ok(out)
}

impl DatasetBundle {
    pub fn img_dim(&self) -> usize {
        self.meta.config.img_dim
    }

    pub fn cameras(&self) -> usize {
        self.meta.config.cameras
    }

    pub fn num_labels(&self) -> usize {
        self.meta.num_labels
    }

    /// Check labels, cameras and dimensions of every record.
    pub fn validate(&self) -> Result<(), DataError> {
        let d = self.img_dim();
        let c = self.cameras();
        let total_ids = self.meta.config.train_ids + self.meta.config.test_ids;
        let sets = [
            (&self.train, self.num_labels()),
            (&self.query, total_ids),
            (&self.gallery, total_ids),
        ];
        let mut record = 0;
        for (set, label_bound) in sets {
            for s in set.iter() {
                if s.c as usize >= c {
                    return Err(DataError::Validation {
                        record,
                        detail: format!("camera index {} out of range (C={c})", s.c),
                    });
                }
                if s.y as usize >= label_bound {
                    return Err(DataError::Validation {
                        record,
                        detail: format!("identity {} out of range ({label_bound})", s.y),
                    });
                }
                if s.x.len() != d || s.x.iter().any(|v| !v.is_finite()) {
                    return Err(DataError::Validation {
                        record,
                        detail: "observation has wrong dimension or non-finite values".into(),
                    });
                }
                record += 1;
            }
        }
        Ok(())
    }
}
