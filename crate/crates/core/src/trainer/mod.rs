//! Joint optimization of the encoder, classifier and generator.

pub mod checkpoint;
pub mod config;
pub mod probe;
pub mod sampler;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{sigma_hat_rows, var_rows};
use crate::encoder::{ClassifierParams, EncoderParams};
use crate::error::{Error, NumericsError, Result};
use crate::generator::{GenDims, GeneratorParams, IfnBatchStats, IfnMode, IfnState, StepNoise};
use crate::layers::Params;
use crate::losses::{ccfa_nodes, id_loss_nodes, mcnl_nodes};
use crate::numerics::rng::{derived, SeedRng};
use crate::numerics::{AdamState, NodeId, Tape, Tensor};
use crate::synthdata::{DatasetBundle, Sample};

pub use checkpoint::{load_checkpoint, read_checkpoint_from, save_checkpoint, write_checkpoint_to};
pub use config::{TrainConfig, KEYS};
pub use probe::{JointProbe, Objective};
pub use sampler::{pk_sample, IdentityIndex};

const STREAM_ENCODER: u64 = 1;
const STREAM_CLASSIFIER: u64 = 2;
const STREAM_GENERATOR: u64 = 3;
const STREAM_BATCHES: u64 = 11;
const STREAM_LATENTS: u64 = 12;

/// Sizes fixed by the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub img_dim: usize,
    pub num_labels: usize,
    pub cameras: usize,
}

impl ModelDims {
    pub fn of(data: &DatasetBundle) -> Self {
        Self {
            img_dim: data.img_dim(),
            num_labels: data.num_labels(),
            cameras: data.cameras(),
        }
    }
}

/// All trainable networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub encoder: EncoderParams,
    pub classifier: ClassifierParams,
    /// Absent when the encoder is trained alone.
    pub generator: Option<GeneratorParams>,
}

impl Params for Networks {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.encoder.visit(prefix, out);
        self.classifier.visit(prefix, out);
        if let Some(g) = &self.generator {
            g.visit(prefix, out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.encoder.visit_mut(prefix, out);
        self.classifier.visit_mut(prefix, out);
        if let Some(g) = &mut self.generator {
            g.visit_mut(prefix, out);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub dims: ModelDims,
    pub nets: Networks,
    pub ifn: Option<IfnState>,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
}

impl ModelState {
    pub fn init(cfg: &TrainConfig, dims: ModelDims) -> Self {
        let encoder = EncoderParams::init(
            &mut derived(cfg.init_seed, STREAM_ENCODER),
            dims.img_dim,
            cfg.enc_hidden,
            cfg.feat_dim,
        );
        let classifier = ClassifierParams::init(
            &mut derived(cfg.init_seed, STREAM_CLASSIFIER),
            cfg.feat_dim,
            dims.num_labels,
        );
        let generator = cfg.joint.then(|| {
            GeneratorParams::init(
                &mut derived(cfg.init_seed, STREAM_GENERATOR),
                gen_dims(cfg, dims),
                cfg.conditioning,
            )
        });
        Self {
            dims,
            nets: Networks {
                encoder,
                classifier,
                generator,
            },
            ifn: cfg
                .ifn
                .then(|| IfnState::new(cfg.feat_dim, cfg.ifn_momentum, cfg.ifn_eps)),
            adam: AdamState::new(cfg.adam),
            epoch: 0,
        }
    }

    /// Encoder features for a set of samples, used for retrieval.
    pub fn embed(&self, samples: &[Sample]) -> Result<Tensor> {
        let rows: Vec<&[f64]> = samples.iter().map(|s| s.x.as_slice()).collect();
        Ok(self.nets.encoder.encode_values(&Tensor::stack_rows(&rows))?)
    }
}

pub fn gen_dims(cfg: &TrainConfig, dims: ModelDims) -> GenDims {
    GenDims {
        feat_dim: cfg.feat_dim,
        latent_dim: cfg.latent_dim,
        emb_dim: cfg.emb_dim,
        hidden: cfg.gen_hidden,
        num_ids: dims.num_labels,
        num_cams: dims.cameras,
    }
}

/// A training batch: observations with their labels and cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub ids: Vec<usize>,
    pub cams: Vec<usize>,
}

impl Batch {
    pub fn gather(samples: &[Sample], index: &[usize]) -> Self {
        let rows: Vec<&[f64]> = index.iter().map(|&i| samples[i].x.as_slice()).collect();
        Self {
            x: Tensor::stack_rows(&rows),
            ids: index.iter().map(|&i| samples[i].y as usize).collect(),
            cams: index.iter().map(|&i| samples[i].c as usize).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Nodes of one joint forward pass. Generator-side nodes are absent when the
/// encoder is trained alone.
#[derive(Debug)]
pub struct JointForward {
    pub tape: Tape,
    pub f: NodeId,
    pub fbar: NodeId,
    pub est: Option<NodeId>,
    pub gsnn: Option<NodeId>,
    pub generator_total: Option<NodeId>,
    pub recon: Option<NodeId>,
    pub ccfa: Option<NodeId>,
    /// Cross-camera features consumed by CCFA, `[n * C, d]`.
    pub generated: Option<NodeId>,
    pub id: NodeId,
    pub mcnl: NodeId,
    pub total: NodeId,
    pub ifn_stats: Option<IfnBatchStats>,
}

/// Values standing in for the two detached edges of the joint graph: the
/// generator's copy of `f̄` and the CCFA targets. Evaluating with these held
/// fixed gives the surrogate whose gradient the tape computes.
#[derive(Debug, Clone, PartialEq)]
pub struct Held {
    pub fbar: Tensor,
    pub generated: Tensor,
}

impl JointForward {
    pub fn held(&self) -> Option<Held> {
        Some(Held {
            fbar: self.tape.value(self.fbar).clone(),
            generated: self.tape.value(self.generated?).clone(),
        })
    }
}

/// Build the full objective
/// `α·L_EST + (1 − α)·L_GSNN + λ1·L_CCFA + λ2·L_ID + λ3·L_MCNL` on a tape.
pub fn joint_forward(
    nets: &Networks,
    ifn: Option<&IfnState>,
    batch: &Batch,
    cfg: &TrainConfig,
    noise: &StepNoise,
) -> Result<JointForward, NumericsError> {
    joint_forward_held(nets, ifn, batch, cfg, noise, None)
}

/// [`joint_forward`] with the detached edges replaced by `held` values.
pub fn joint_forward_held(
    nets: &Networks,
    ifn: Option<&IfnState>,
    batch: &Batch,
    cfg: &TrainConfig,
    noise: &StepNoise,
    held: Option<&Held>,
) -> Result<JointForward, NumericsError> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.x.clone());
    let f = nets.encoder.encode(&mut tape, x)?;
    let (fbar, ifn_stats) = match ifn {
        Some(state) => state.forward(&mut tape, f, IfnMode::Train)?,
        None => (f, None),
    };
    let logits = nets.classifier.logits(&mut tape, fbar)?;
    let id = id_loss_nodes(&mut tape, logits, &batch.ids)?;
    let mcnl = mcnl_nodes(&mut tape, fbar, &batch.ids, &batch.cams, cfg.margins)?;
    let w = cfg.weights;
    let id_w = tape.scale(id, w.id);
    let mcnl_w = tape.scale(mcnl, w.mcnl);
    let mut total = tape.add(id_w, mcnl_w)?;

    let (mut est, mut gsnn, mut generator_total, mut recon, mut ccfa, mut gen_out) =
        (None, None, None, None, None, None);
    if let Some(gen) = &nets.generator {
        let gen_in = match held {
            Some(h) => tape.constant(h.fbar.clone()),
            None => fbar,
        };
        let gl = gen.loss_generator(
            &mut tape,
            gen_in,
            &batch.ids,
            &batch.cams,
            cfg.alpha,
            &noise.est,
            &noise.gsnn,
        )?;
        let generated = match held {
            Some(h) => tape.constant(h.generated.clone()),
            None => gen.generate_all_cameras(&mut tape, &batch.ids, &noise.generation)?,
        };
        let c = ccfa_nodes(&mut tape, fbar, generated, gen.dims.num_cams)?;
        let c_w = tape.scale(c, w.ccfa);
        total = tape.add(total, gl.total)?;
        total = tape.add(total, c_w)?;
        est = Some(gl.est.loss);
        gsnn = Some(gl.gsnn);
        generator_total = Some(gl.total);
        recon = Some(gl.est.recon);
        ccfa = Some(c);
        gen_out = Some(generated);
    }
    Ok(JointForward {
        tape,
        f,
        fbar,
        est,
        gsnn,
        generator_total,
        recon,
        ccfa,
        generated: gen_out,
        id,
        mcnl,
        total,
        ifn_stats,
    })
}

/// Per-step values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    pub l_est: f64,
    pub l_gsnn: f64,
    pub l_ccfa: f64,
    pub l_id: f64,
    pub l_mcnl: f64,
    pub total: f64,
    /// `(1/d)·mean‖f̄ − g‖²` against the posterior reconstruction; zero when
    /// no generator is trained.
    pub sigma_hat: f64,
    pub var_f: f64,
    pub var_fbar: f64,
    /// Largest absolute per-dimension batch mean of `f̄`.
    pub fbar_mean_max_abs: f64,
    pub skipped: bool,
}

fn rows_of(t: &Tensor) -> Vec<&[f64]> {
    (0..t.rows()).map(|r| t.row_slice(r)).collect()
}

impl JointForward {
    pub fn metrics(&self) -> StepMetrics {
        let v = |n: Option<NodeId>| n.map_or(0.0, |n| self.tape.value(n).item());
        let f = self.tape.value(self.f);
        let fbar = self.tape.value(self.fbar);
        let d = fbar.cols();
        let n = fbar.rows() as f64;
        let fbar_mean_max_abs = (0..d)
            .map(|j| ((0..fbar.rows()).map(|r| fbar.get(r, j)).sum::<f64>() / n).abs())
            .fold(0.0, f64::max);
        StepMetrics {
            l_est: v(self.est),
            l_gsnn: v(self.gsnn),
            l_ccfa: v(self.ccfa),
            l_id: self.tape.value(self.id).item(),
            l_mcnl: self.tape.value(self.mcnl).item(),
            total: self.tape.value(self.total).item(),
            sigma_hat: self.recon.map_or(0.0, |g| {
                sigma_hat_rows(&rows_of(fbar), &rows_of(self.tape.value(g))).unwrap_or(f64::NAN)
            }),
            var_f: var_rows(&rows_of(f)),
            var_fbar: var_rows(&rows_of(fbar)),
            fbar_mean_max_abs,
            skipped: false,
        }
    }
}

/// One optimization step. A non-finite loss or gradient skips the update
/// and leaves the state untouched apart from the returned flag.
pub fn train_step(
    model: &mut ModelState,
    batch: &Batch,
    cfg: &TrainConfig,
    noise: &StepNoise,
    lr: f64,
) -> Result<StepMetrics> {
    let fwd = joint_forward(&model.nets, model.ifn.as_ref(), batch, cfg, noise)?;
    let mut metrics = fwd.metrics();
    let grads = match fwd.tape.backward(fwd.total) {
        Ok(g) => g.named(&fwd.tape),
        Err(NumericsError::NonFinite { .. }) => {
            metrics.skipped = true;
            return Ok(metrics);
        }
        Err(e) => return Err(e.into()),
    };
    let mut named = model.nets.named_mut("");
    let params = named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t));
    match model.adam.step(params, &grads, lr) {
        Ok(()) => {}
        Err(NumericsError::NonFiniteGradient { .. }) => {
            metrics.skipped = true;
            return Ok(metrics);
        }
        Err(e) => return Err(e.into()),
    }
    if let (Some(state), Some(stats)) = (model.ifn.as_mut(), fwd.ifn_stats.as_ref()) {
        state.update(stats);
    }
    Ok(metrics)
}

/// Piecewise-constant schedule: the base rate times `factor` for every decay
/// point already reached. Decay points are fractions of the total epochs.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg
        .lr_decay_at
        .iter()
        .filter(|&&frac| epoch >= (frac * cfg.epochs as f64).round() as usize)
        .count();
    cfg.lr * cfg.lr_decay_factor.powi(passed as i32)
}

/// Per-epoch averages of the step metrics. Skipped steps are included, so
/// non-finite values show up here as they occurred.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    #[serde(with = "float_repr")]
    pub l_est: f64,
    #[serde(with = "float_repr")]
    pub l_gsnn: f64,
    #[serde(with = "float_repr")]
    pub l_ccfa: f64,
    #[serde(with = "float_repr")]
    pub l_id: f64,
    #[serde(with = "float_repr")]
    pub l_mcnl: f64,
    #[serde(with = "float_repr")]
    pub total: f64,
    #[serde(with = "float_repr")]
    pub sigma_hat: f64,
    #[serde(with = "float_repr")]
    pub var_f: f64,
    #[serde(with = "float_repr")]
    pub var_fbar: f64,
    pub lr: f64,
    pub steps: usize,
    pub skipped_steps: usize,
    pub collapse: bool,
}

impl MetricsRecord {
    fn aggregate(epoch: usize, lr: f64, steps: &[StepMetrics]) -> Self {
        let n = steps.len() as f64;
        let mean = |f: fn(&StepMetrics) -> f64| steps.iter().map(f).sum::<f64>() / n;
        let skipped = steps.iter().filter(|s| s.skipped).count();
        Self {
            epoch,
            l_est: mean(|s| s.l_est),
            l_gsnn: mean(|s| s.l_gsnn),
            l_ccfa: mean(|s| s.l_ccfa),
            l_id: mean(|s| s.l_id),
            l_mcnl: mean(|s| s.l_mcnl),
            total: mean(|s| s.total),
            sigma_hat: mean(|s| s.sigma_hat),
            var_f: mean(|s| s.var_f),
            var_fbar: mean(|s| s.var_fbar),
            lr,
            steps: steps.len(),
            skipped_steps: skipped,
            collapse: 2 * skipped >= steps.len() && skipped > 0,
        }
    }

    /// The weighted total recomputed from the logged terms.
    pub fn replay_total(&self, cfg: &TrainConfig) -> f64 {
        let w = cfg.weights;
        let gen = if cfg.joint {
            cfg.alpha * self.l_est + (1.0 - cfg.alpha) * self.l_gsnn
        } else {
            0.0
        };
        gen + w.ccfa * self.l_ccfa + w.id * self.l_id + w.mcnl * self.l_mcnl
    }
}

/// JSON numbers for finite values, strings such as `"NaN"` otherwise.
mod float_repr {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => s.parse().map_err(D::Error::custom),
        }
    }
}

/// Hooks called during [`train_with`].
pub trait TrainObserver {
    fn on_step(&mut self, _epoch: usize, _step: usize, _metrics: &StepMetrics) {}

    fn on_epoch(&mut self, _model: &ModelState, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub log: Vec<MetricsRecord>,
}

pub fn steps_per_epoch(cfg: &TrainConfig, data: &DatasetBundle) -> usize {
    (data.train.len() / cfg.batch_size()).max(1)
}

pub fn train(cfg: &TrainConfig, data: &DatasetBundle) -> Result<TrainOutcome> {
    train_with(cfg, data, &mut ())
}

/// Run `cfg.epochs` epochs from a fresh initialization. Aborts with
/// [`Error::Collapse`] once half of an epoch's steps are non-finite; the
/// observer has seen every record up to and including that epoch.
pub fn train_with(cfg: &TrainConfig, data: &DatasetBundle, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = ModelState::init(cfg, ModelDims::of(data));
    continue_training(cfg, data, model, observer)
}

/// Train an existing state until it has completed `cfg.epochs` epochs.
pub fn continue_training(
    cfg: &TrainConfig,
    data: &DatasetBundle,
    mut model: ModelState,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    if model.dims != ModelDims::of(data) {
        return Err(Error::Invalid(format!(
            "model dimensions {:?} do not match the dataset {:?}",
            model.dims,
            ModelDims::of(data)
        )));
    }
    let index = IdentityIndex::new(&data.train);
    let steps = steps_per_epoch(cfg, data);
    let k = cfg.latent_dim;
    let mut log = Vec::with_capacity(cfg.epochs);
    while model.epoch < cfg.epochs {
        let epoch = model.epoch;
        // Streams are re-derived per epoch so resuming matches a straight run.
        let epoch_seed = cfg.noise_seed ^ ((epoch as u64) << 20);
        let mut batch_rng: SeedRng = derived(epoch_seed, STREAM_BATCHES);
        let mut latent_rng: SeedRng = derived(epoch_seed, STREAM_LATENTS);
        let lr = lr_at(epoch, cfg);
        let mut records = Vec::with_capacity(steps);
        for step in 0..steps {
            let idx = pk_sample(&index, cfg.p, cfg.k, &mut batch_rng)?;
            let batch = Batch::gather(&data.train, &idx);
            let noise = StepNoise::draw(&mut latent_rng, batch.len(), data.cameras(), k, cfg.share_id_latent);
            let m = train_step(&mut model, &batch, cfg, &noise, lr)?;
            observer.on_step(epoch, step, &m);
            records.push(m);
        }
        model.epoch += 1;
        let record = MetricsRecord::aggregate(model.epoch, lr, &records);
        observer.on_epoch(&model, &record)?;
        let collapsed = record.collapse;
        log.push(record);
        if collapsed {
            return Err(Error::Collapse {
                epoch: model.epoch,
                skipped: log.last().map_or(0, |r| r.skipped_steps),
                steps,
            });
        }
    }
    Ok(TrainOutcome { model, log })
}
