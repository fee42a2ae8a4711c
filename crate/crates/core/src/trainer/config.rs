//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::Conditioning;
use crate::losses::{LossWeights, McnlMargins};
use crate::numerics::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Mix between the estimation and GSNN objectives.
    pub alpha: f64,
    pub weights: LossWeights,
    pub margins: McnlMargins,
    pub lr: f64,
    /// Decay points as fractions of `epochs`.
    pub lr_decay_at: Vec<f64>,
    pub lr_decay_factor: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub p: usize,
    pub k: usize,
    pub feat_dim: usize,
    pub enc_hidden: usize,
    pub gen_hidden: usize,
    pub latent_dim: usize,
    pub emb_dim: usize,
    pub data_seed: u64,
    pub init_seed: u64,
    pub noise_seed: u64,
    /// Train the generator jointly and add the alignment loss. When off, only
    /// the encoder and classifier are trained on the identity and MCNL losses.
    pub joint: bool,
    pub ifn: bool,
    pub ifn_eps: f64,
    pub ifn_momentum: f64,
    pub conditioning: Conditioning,
    pub share_id_latent: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            weights: LossWeights::default(),
            margins: McnlMargins::default(),
            lr: 3.5e-4,
            lr_decay_at: vec![0.6, 0.8],
            lr_decay_factor: 0.1,
            adam: AdamConfig::default(),
            epochs: 100,
            p: 8,
            k: 4,
            feat_dim: 32,
            enc_hidden: 64,
            gen_hidden: 64,
            latent_dim: 16,
            emb_dim: 8,
            data_seed: 0,
            init_seed: 1,
            noise_seed: 2,
            joint: true,
            ifn: true,
            ifn_eps: 1e-10,
            ifn_momentum: 0.9,
            conditioning: Conditioning::default(),
            share_id_latent: false,
        }
    }
}

/// Every configuration key, in echo order.
pub const KEYS: &[&str] = &[
    "alpha",
    "lambda_ccfa",
    "lambda_id",
    "lambda_mcnl",
    "margin_inter",
    "margin_intra",
    "lr",
    "lr_decay_at",
    "lr_decay_factor",
    "weight_decay",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "epochs",
    "p",
    "k",
    "batch_size",
    "feat_dim",
    "enc_hidden",
    "gen_hidden",
    "latent_dim",
    "emb_dim",
    "data_seed",
    "init_seed",
    "noise_seed",
    "joint",
    "ifn",
    "ifn_eps",
    "ifn_momentum",
    "use_id",
    "use_cam",
    "share_id_latent",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "alpha" => self.alpha = parse(key, v)?,
            "lambda_ccfa" => self.weights.ccfa = parse(key, v)?,
            "lambda_id" => self.weights.id = parse(key, v)?,
            "lambda_mcnl" => self.weights.mcnl = parse(key, v)?,
            "margin_inter" => self.margins.m1 = parse(key, v)?,
            "margin_intra" => self.margins.m2 = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_decay_at" => {
                self.lr_decay_at = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?
                }
            }
            "lr_decay_factor" => self.lr_decay_factor = parse(key, v)?,
            "weight_decay" => self.adam.weight_decay = parse(key, v)?,
            "adam_beta1" => self.adam.beta1 = parse(key, v)?,
            "adam_beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "p" => self.p = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "batch_size" => {
                let b: usize = parse(key, v)?;
                if b != self.batch_size() {
                    return Err(Error::Config(format!(
                        "batch_size {b} must equal p * k = {}",
                        self.batch_size()
                    )));
                }
            }
            "feat_dim" => self.feat_dim = parse(key, v)?,
            "enc_hidden" => self.enc_hidden = parse(key, v)?,
            "gen_hidden" => self.gen_hidden = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "emb_dim" => self.emb_dim = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "init_seed" => self.init_seed = parse(key, v)?,
            "noise_seed" => self.noise_seed = parse(key, v)?,
            "joint" => self.joint = parse(key, v)?,
            "ifn" => self.ifn = parse(key, v)?,
            "ifn_eps" => self.ifn_eps = parse(key, v)?,
            "ifn_momentum" => self.ifn_momentum = parse(key, v)?,
            "use_id" => self.conditioning.use_id = parse(key, v)?,
            "use_cam" => self.conditioning.use_cam = parse(key, v)?,
            "share_id_latent" => self.share_id_latent = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Textual value of a key, in a form [`TrainConfig::set`] accepts back.
    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "alpha" => self.alpha.to_string(),
            "lambda_ccfa" => self.weights.ccfa.to_string(),
            "lambda_id" => self.weights.id.to_string(),
            "lambda_mcnl" => self.weights.mcnl.to_string(),
            "margin_inter" => self.margins.m1.to_string(),
            "margin_intra" => self.margins.m2.to_string(),
            "lr" => self.lr.to_string(),
            "lr_decay_at" => self
                .lr_decay_at
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "lr_decay_factor" => self.lr_decay_factor.to_string(),
            "weight_decay" => self.adam.weight_decay.to_string(),
            "adam_beta1" => self.adam.beta1.to_string(),
            "adam_beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.eps.to_string(),
            "epochs" => self.epochs.to_string(),
            "p" => self.p.to_string(),
            "k" => self.k.to_string(),
            "batch_size" => self.batch_size().to_string(),
            "feat_dim" => self.feat_dim.to_string(),
            "enc_hidden" => self.enc_hidden.to_string(),
            "gen_hidden" => self.gen_hidden.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "emb_dim" => self.emb_dim.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "init_seed" => self.init_seed.to_string(),
            "noise_seed" => self.noise_seed.to_string(),
            "joint" => self.joint.to_string(),
            "ifn" => self.ifn.to_string(),
            "ifn_eps" => self.ifn_eps.to_string(),
            "ifn_momentum" => self.ifn_momentum.to_string(),
            "use_id" => self.conditioning.use_id.to_string(),
            "use_cam" => self.conditioning.use_cam.to_string(),
            "share_id_latent" => self.share_id_latent.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Apply `key = value` lines. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Every key with its effective value, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).unwrap_or_default());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        for (name, m) in [("margin_inter", self.margins.m1), ("margin_intra", self.margins.m2)] {
            if !m.is_finite() || m < 0.0 {
                return bad(format!("{name} {m} must be finite and >= 0"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.lr_decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("lr_decay_at entries must be fractions in [0, 1]".into());
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor must be positive".into());
        }
        if self.p < 2 || self.k < 1 {
            return bad(format!("need p >= 2 and k >= 1 (got p={}, k={})", self.p, self.k));
        }
        for (name, v) in [
            ("feat_dim", self.feat_dim),
            ("enc_hidden", self.enc_hidden),
            ("gen_hidden", self.gen_hidden),
            ("latent_dim", self.latent_dim),
            ("emb_dim", self.emb_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.ifn_eps.is_finite() && self.ifn_eps > 0.0) {
            return bad("ifn_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ifn_momentum) {
            return bad("ifn_momentum must lie in [0, 1)".into());
        }
        Ok(())
    }
}
