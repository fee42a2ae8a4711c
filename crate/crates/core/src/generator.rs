//! The σ-regularized conditional VAE feature generator.
//!
//! Two latents are modelled: `z_y` conditioned on the identity and `z_c`
//! conditioned on the camera. Each has a prior network (condition embedding
//! to a diagonal Gaussian) and a recognition network (normalized feature plus
//! embedding to a diagonal Gaussian). The decoder maps
//! `(z_c, z_y, camera embedding, identity embedding)` back to feature space.
//!
//! The decoder observation variance is fixed to one. Input features pass
//! through [`IfnState`] first, which standardizes them to unit scalar
//! variance; with the inputs pinned at `var = 1` the observation variance
//! that best explains them is also ≈ 1, which is what keeps the
//! reconstruction term from being drowned out as the encoder's features grow.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::NumericsError;
use crate::layers::{join, Linear, Mlp, Params};
use crate::numerics::rng::normal_tensor;
use crate::numerics::{NodeId, Tape, Tensor};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Diagonal Gaussian, parameterized by mean and log-variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianParams {
    pub fn standard(k: usize) -> Self {
        Self {
            mean: vec![0.0; k],
            logvar: vec![0.0; k],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Closed-form `KL(q || p)` for diagonal Gaussians.
pub fn kl_diag_gauss(q: &GaussianParams, p: &GaussianParams) -> Result<f64, NumericsError> {
    let k = q.dim();
    if q.logvar.len() != k || p.dim() != k || p.logvar.len() != k {
        return Err(NumericsError::ShapeMismatch {
            node: "kl_diag_gauss".into(),
            detail: format!("q has dim {k}, p has dim {}", p.dim()),
        });
    }
    Ok((0..k)
        .map(|i| {
            let (mq, lq, mp, lp) = (q.mean[i], q.logvar[i], p.mean[i], p.logvar[i]);
            0.5 * (lp - lq) + (lq.exp() + (mq - mp).powi(2)) / (2.0 * lp.exp()) - 0.5
        })
        .sum())
}

/// Batched Gaussian on the tape: `mean` and `logvar` are `[n, k]`.
#[derive(Debug, Clone, Copy)]
pub struct GaussNodes {
    pub mean: NodeId,
    pub logvar: NodeId,
}

/// Per-row `KL(q || p)` summed over latent dimensions, as `[n, 1]`.
pub fn kl_nodes(tape: &mut Tape, q: GaussNodes, p: GaussNodes) -> Result<NodeId, NumericsError> {
    let dm = tape.sub(q.mean, p.mean)?;
    let dm2 = tape.mul(dm, dm)?;
    let vq = tape.exp(q.logvar);
    let num = tape.add(vq, dm2)?;
    let neg_lp = tape.scale(p.logvar, -1.0);
    let inv_vp = tape.exp(neg_lp);
    let ratio = tape.mul(num, inv_vp)?;
    let ratio = tape.scale(ratio, 0.5);
    let dlv = tape.sub(p.logvar, q.logvar)?;
    let dlv = tape.scale(dlv, 0.5);
    let per_dim = tape.add(dlv, ratio)?;
    let per_dim = tape.add_const(per_dim, -0.5);
    tape.row_sum(per_dim)
}

/// Shared hidden layer with separate mean and log-variance heads.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNet {
    pub hidden: Linear,
    pub mean: Linear,
    pub logvar: Linear,
}

impl GaussianNet {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, hidden: usize, k: usize) -> Self {
        Self {
            hidden: Linear::init(rng, fan_in, hidden),
            mean: Linear::init(rng, hidden, k),
            logvar: Linear::init(rng, hidden, k),
        }
    }

    pub fn zeros(fan_in: usize, hidden: usize, k: usize) -> Self {
        Self {
            hidden: Linear::zeros(fan_in, hidden),
            mean: Linear::zeros(hidden, k),
            logvar: Linear::zeros(hidden, k),
        }
    }

    pub fn forward(&self, tape: &mut Tape, name: &str, x: NodeId) -> Result<GaussNodes, NumericsError> {
        let h = self.hidden.forward(tape, &join(name, "hidden"), x)?;
        let h = tape.tanh(h);
        let mean = self.mean.forward(tape, &join(name, "mean"), h)?;
        let lv = self.logvar.forward(tape, &join(name, "logvar"), h)?;
        let logvar = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        Ok(GaussNodes { mean, logvar })
    }
}

impl Params for GaussianNet {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.hidden.visit(&join(prefix, "hidden"), out);
        self.mean.visit(&join(prefix, "mean"), out);
        self.logvar.visit(&join(prefix, "logvar"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.hidden.visit_mut(&join(prefix, "hidden"), out);
        self.mean.visit_mut(&join(prefix, "mean"), out);
        self.logvar.visit_mut(&join(prefix, "logvar"), out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenDims {
    pub feat_dim: usize,
    pub latent_dim: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub num_ids: usize,
    pub num_cams: usize,
}

/// Which condition variables the generator sees. A disabled condition is
/// replaced by one embedding row shared by every label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conditioning {
    pub use_id: bool,
    pub use_cam: bool,
}

impl Default for Conditioning {
    fn default() -> Self {
        Self {
            use_id: true,
            use_cam: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Identity(usize),
    Camera(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub dims: GenDims,
    pub conditioning: Conditioning,
    /// `[num_ids, e]`, or `[1, e]` when identity conditioning is off.
    pub id_embedding: Tensor,
    /// `[num_cams, e]`, or `[1, e]` when camera conditioning is off.
    pub cam_embedding: Tensor,
    pub prior_id: GaussianNet,
    pub prior_cam: GaussianNet,
    pub recog_id: GaussianNet,
    pub recog_cam: GaussianNet,
    pub decoder: Mlp,
}

/// Reparameterization noise for one pair of latents, `[rows, k]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNoise {
    pub id: Tensor,
    pub cam: Tensor,
}

impl LatentNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, rows: usize, k: usize) -> Self {
        Self {
            id: normal_tensor(rng, rows, k, 1.0),
            cam: normal_tensor(rng, rows, k, 1.0),
        }
    }
}

/// All noise consumed by one joint training step on an `n`-sample batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    /// Posterior samples for the estimation loss, `[n, k]`.
    pub est: LatentNoise,
    /// Prior samples for the GSNN loss, `[n, k]`.
    pub gsnn: LatentNoise,
    /// Prior samples for camera traversal, `[n * C, k]`, sample-major.
    pub generation: LatentNoise,
}

impl StepNoise {
    /// With `share_id_latent`, one `z_y` draw is reused across all cameras of
    /// a sample; otherwise each camera gets a fresh draw.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, n: usize, cams: usize, k: usize, share_id_latent: bool) -> Self {
        let est = LatentNoise::draw(rng, n, k);
        let gsnn = LatentNoise::draw(rng, n, k);
        let mut generation = LatentNoise::draw(rng, n * cams, k);
        if share_id_latent {
            let mut data = Vec::with_capacity(n * cams * k);
            for i in 0..n {
                let row = generation.id.row_slice(i * cams).to_vec();
                for _ in 0..cams {
                    data.extend_from_slice(&row);
                }
            }
            generation.id = Tensor::from_rows(n * cams, k, data);
        }
        Self { est, gsnn, generation }
    }
}

/// Tape nodes of the estimation objective.
#[derive(Debug, Clone, Copy)]
pub struct EstimationTerms {
    pub loss: NodeId,
    pub recon_nll: NodeId,
    pub kl_id: NodeId,
    pub kl_cam: NodeId,
    /// Reconstruction `g` from posterior latents, `[n, d]`.
    pub recon: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorLoss {
    pub total: NodeId,
    pub est: EstimationTerms,
    pub gsnn: NodeId,
}

const P: &str = "gen";

impl GeneratorParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dims: GenDims, conditioning: Conditioning) -> Self {
        let GenDims {
            feat_dim: d,
            latent_dim: k,
            emb_dim: e,
            hidden: h,
            ..
        } = dims;
        let id_rows = if conditioning.use_id { dims.num_ids } else { 1 };
        let cam_rows = if conditioning.use_cam { dims.num_cams } else { 1 };
        Self {
            dims,
            conditioning,
            id_embedding: normal_tensor(rng, id_rows, e, 1.0),
            cam_embedding: normal_tensor(rng, cam_rows, e, 1.0),
            prior_id: GaussianNet::init(rng, e, h, k),
            prior_cam: GaussianNet::init(rng, e, h, k),
            recog_id: GaussianNet::init(rng, d + e, h, k),
            recog_cam: GaussianNet::init(rng, d + e, h, k),
            decoder: Mlp::init(rng, 2 * k + 2 * e, h, d),
        }
    }

    /// All-zero parameters: every prior and posterior is `N(0, I)` and the
    /// decoder outputs zero.
    pub fn zeros(dims: GenDims, conditioning: Conditioning) -> Self {
        let GenDims {
            feat_dim: d,
            latent_dim: k,
            emb_dim: e,
            hidden: h,
            ..
        } = dims;
        let id_rows = if conditioning.use_id { dims.num_ids } else { 1 };
        let cam_rows = if conditioning.use_cam { dims.num_cams } else { 1 };
        Self {
            dims,
            conditioning,
            id_embedding: Tensor::zeros(id_rows, e),
            cam_embedding: Tensor::zeros(cam_rows, e),
            prior_id: GaussianNet::zeros(e, h, k),
            prior_cam: GaussianNet::zeros(e, h, k),
            recog_id: GaussianNet::zeros(d + e, h, k),
            recog_cam: GaussianNet::zeros(d + e, h, k),
            decoder: Mlp::zeros(2 * k + 2 * e, h, d),
        }
    }

    fn rows(&self, labels: &[usize], cond_is_id: bool) -> Result<Vec<usize>, NumericsError> {
        let (bound, enabled, what) = if cond_is_id {
            (self.dims.num_ids, self.conditioning.use_id, "identity")
        } else {
            (self.dims.num_cams, self.conditioning.use_cam, "camera")
        };
        labels
            .iter()
            .map(|&l| {
                if l >= bound {
                    Err(NumericsError::InvalidArgument(format!(
                        "{what} index {l} out of range (< {bound})"
                    )))
                } else {
                    Ok(if enabled { l } else { 0 })
                }
            })
            .collect()
    }

    pub fn embed_ids(&self, tape: &mut Tape, ids: &[usize]) -> Result<NodeId, NumericsError> {
        let rows = self.rows(ids, true)?;
        let table = tape.param_once(&join(P, "id_embedding"), &self.id_embedding);
        tape.gather_rows(table, &rows)
    }

    pub fn embed_cams(&self, tape: &mut Tape, cams: &[usize]) -> Result<NodeId, NumericsError> {
        let rows = self.rows(cams, false)?;
        let table = tape.param_once(&join(P, "cam_embedding"), &self.cam_embedding);
        tape.gather_rows(table, &rows)
    }

    pub fn prior_id_nodes(&self, tape: &mut Tape, ids: &[usize]) -> Result<GaussNodes, NumericsError> {
        let e = self.embed_ids(tape, ids)?;
        self.prior_id.forward(tape, &join(P, "prior_id"), e)
    }

    pub fn prior_cam_nodes(&self, tape: &mut Tape, cams: &[usize]) -> Result<GaussNodes, NumericsError> {
        let e = self.embed_cams(tape, cams)?;
        self.prior_cam.forward(tape, &join(P, "prior_cam"), e)
    }

    pub fn recog_id_nodes(&self, tape: &mut Tape, fbar: NodeId, ids: &[usize]) -> Result<GaussNodes, NumericsError> {
        let e = self.embed_ids(tape, ids)?;
        let inp = tape.concat_cols(&[fbar, e])?;
        self.recog_id.forward(tape, &join(P, "recog_id"), inp)
    }

    pub fn recog_cam_nodes(&self, tape: &mut Tape, fbar: NodeId, cams: &[usize]) -> Result<GaussNodes, NumericsError> {
        let e = self.embed_cams(tape, cams)?;
        let inp = tape.concat_cols(&[fbar, e])?;
        self.recog_cam.forward(tape, &join(P, "recog_cam"), inp)
    }

    pub fn decode_nodes(
        &self,
        tape: &mut Tape,
        z_cam: NodeId,
        z_id: NodeId,
        cams: &[usize],
        ids: &[usize],
    ) -> Result<NodeId, NumericsError> {
        let ec = self.embed_cams(tape, cams)?;
        let ey = self.embed_ids(tape, ids)?;
        let inp = tape.concat_cols(&[z_cam, z_id, ec, ey])?;
        self.decoder.forward(tape, &join(P, "decoder"), inp)
    }

    fn check_batch(&self, tape: &Tape, fbar: NodeId, ids: &[usize], cams: &[usize]) -> Result<(), NumericsError> {
        let v = tape.value(fbar);
        if v.cols() != self.dims.feat_dim || v.rows() != ids.len() || ids.len() != cams.len() {
            return Err(NumericsError::ShapeMismatch {
                node: tape.node_name(fbar),
                detail: format!(
                    "features {:?} with {} identities and {} cameras (d = {})",
                    v.shape(),
                    ids.len(),
                    cams.len(),
                    self.dims.feat_dim
                ),
            });
        }
        Ok(())
    }

    /// `½‖f̄ − g‖²` averaged over rows.
    fn recon_nll(tape: &mut Tape, fbar: NodeId, g: NodeId) -> Result<NodeId, NumericsError> {
        let n = tape.value(fbar).rows();
        let diff = tape.sub(fbar, g)?;
        let ss = tape.sum_sq(diff);
        Ok(tape.scale(ss, 0.5 / n as f64))
    }

    /// Estimation objective: reconstruction through the recognition
    /// posteriors plus the KL of each posterior to its prior, batch-averaged.
    pub fn loss_est(
        &self,
        tape: &mut Tape,
        fbar: NodeId,
        ids: &[usize],
        cams: &[usize],
        noise: &LatentNoise,
    ) -> Result<EstimationTerms, NumericsError> {
        self.check_batch(tape, fbar, ids, cams)?;
        let n = ids.len() as f64;
        let q_id = self.recog_id_nodes(tape, fbar, ids)?;
        let q_cam = self.recog_cam_nodes(tape, fbar, cams)?;
        let p_id = self.prior_id_nodes(tape, ids)?;
        let p_cam = self.prior_cam_nodes(tape, cams)?;
        let z_id = tape.reparam(q_id.mean, q_id.logvar, noise.id.clone())?;
        let z_cam = tape.reparam(q_cam.mean, q_cam.logvar, noise.cam.clone())?;
        let recon = self.decode_nodes(tape, z_cam, z_id, cams, ids)?;
        let recon_nll = Self::recon_nll(tape, fbar, recon)?;
        let kl_id = kl_nodes(tape, q_id, p_id)?;
        let kl_id = tape.sum(kl_id);
        let kl_id = tape.scale(kl_id, 1.0 / n);
        let kl_cam = kl_nodes(tape, q_cam, p_cam)?;
        let kl_cam = tape.sum(kl_cam);
        let kl_cam = tape.scale(kl_cam, 1.0 / n);
        let s = tape.add(recon_nll, kl_id)?;
        let loss = tape.add(s, kl_cam)?;
        Ok(EstimationTerms {
            loss,
            recon_nll,
            kl_id,
            kl_cam,
            recon,
        })
    }

    /// GSNN objective: reconstruction with latents drawn from the priors.
    pub fn loss_gsnn(
        &self,
        tape: &mut Tape,
        fbar: NodeId,
        ids: &[usize],
        cams: &[usize],
        noise: &LatentNoise,
    ) -> Result<NodeId, NumericsError> {
        self.check_batch(tape, fbar, ids, cams)?;
        let p_id = self.prior_id_nodes(tape, ids)?;
        let p_cam = self.prior_cam_nodes(tape, cams)?;
        let z_id = tape.reparam(p_id.mean, p_id.logvar, noise.id.clone())?;
        let z_cam = tape.reparam(p_cam.mean, p_cam.logvar, noise.cam.clone())?;
        let g = self.decode_nodes(tape, z_cam, z_id, cams, ids)?;
        Self::recon_nll(tape, fbar, g)
    }

    /// `α·L_EST + (1 − α)·L_GSNN` on a detached copy of `fbar`, so only
    /// generator parameters receive gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_generator(
        &self,
        tape: &mut Tape,
        fbar: NodeId,
        ids: &[usize],
        cams: &[usize],
        alpha: f64,
        est_noise: &LatentNoise,
        gsnn_noise: &LatentNoise,
    ) -> Result<GeneratorLoss, NumericsError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(NumericsError::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
        }
        let input = tape.detach(fbar);
        let est = self.loss_est(tape, input, ids, cams, est_noise)?;
        let gsnn = self.loss_gsnn(tape, input, ids, cams, gsnn_noise)?;
        let a = tape.scale(est.loss, alpha);
        let b = tape.scale(gsnn, 1.0 - alpha);
        let total = tape.add(a, b)?;
        Ok(GeneratorLoss { total, est, gsnn })
    }

    /// Generate each sample's identity under every camera. Output is
    /// `[n * C, d]`; row `i * C + c` is identity `ids[i]` under camera `c`.
    pub fn generate_all_cameras(
        &self,
        tape: &mut Tape,
        ids: &[usize],
        noise: &LatentNoise,
    ) -> Result<NodeId, NumericsError> {
        let c = self.dims.num_cams;
        let rep_ids: Vec<usize> = ids.iter().flat_map(|&y| std::iter::repeat_n(y, c)).collect();
        let rep_cams: Vec<usize> = (0..ids.len()).flat_map(|_| 0..c).collect();
        let p_id = self.prior_id_nodes(tape, &rep_ids)?;
        let p_cam = self.prior_cam_nodes(tape, &rep_cams)?;
        let z_id = tape.reparam(p_id.mean, p_id.logvar, noise.id.clone())?;
        let z_cam = tape.reparam(p_cam.mean, p_cam.logvar, noise.cam.clone())?;
        self.decode_nodes(tape, z_cam, z_id, &rep_cams, &rep_ids)
    }

    fn gauss_values(tape: &Tape, g: GaussNodes) -> GaussianParams {
        GaussianParams {
            mean: tape.value(g.mean).data().to_vec(),
            logvar: tape.value(g.logvar).data().to_vec(),
        }
    }

    /// Prior over `z_y` (identity condition) or `z_c` (camera condition).
    pub fn prior(&self, cond: Condition) -> Result<GaussianParams, NumericsError> {
        let mut tape = Tape::new();
        let g = match cond {
            Condition::Identity(y) => self.prior_id_nodes(&mut tape, &[y])?,
            Condition::Camera(c) => self.prior_cam_nodes(&mut tape, &[c])?,
        };
        Ok(Self::gauss_values(&tape, g))
    }

    /// Approximate posterior for one normalized feature.
    pub fn recognize(&self, fbar: &[f64], cond: Condition) -> Result<GaussianParams, NumericsError> {
        if fbar.len() != self.dims.feat_dim {
            return Err(NumericsError::ShapeMismatch {
                node: "recognize".into(),
                detail: format!("expected {} features, got {}", self.dims.feat_dim, fbar.len()),
            });
        }
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::row(fbar.to_vec()));
        let g = match cond {
            Condition::Identity(y) => self.recog_id_nodes(&mut tape, f, &[y])?,
            Condition::Camera(c) => self.recog_cam_nodes(&mut tape, f, &[c])?,
        };
        Ok(Self::gauss_values(&tape, g))
    }

    pub fn decode(&self, z_cam: &[f64], z_id: &[f64], cam: usize, id: usize) -> Result<Vec<f64>, NumericsError> {
        let k = self.dims.latent_dim;
        if z_cam.len() != k || z_id.len() != k {
            return Err(NumericsError::ShapeMismatch {
                node: "decode".into(),
                detail: format!("latents must have dimension {k}"),
            });
        }
        let mut tape = Tape::new();
        let zc = tape.constant(Tensor::row(z_cam.to_vec()));
        let zy = tape.constant(Tensor::row(z_id.to_vec()));
        let g = self.decode_nodes(&mut tape, zc, zy, &[cam], &[id])?;
        Ok(tape.value(g).data().to_vec())
    }

    /// Features of identity `y` under every camera, drawing latents from
    /// the priors.
    pub fn generate_for<R: Rng + ?Sized>(
        &self,
        y: usize,
        rng: &mut R,
        share_id_latent: bool,
    ) -> Result<Vec<Vec<f64>>, NumericsError> {
        let c = self.dims.num_cams;
        let noise = StepNoise::draw(rng, 1, c, self.dims.latent_dim, share_id_latent).generation;
        let mut tape = Tape::new();
        let g = self.generate_all_cameras(&mut tape, &[y], &noise)?;
        let v = tape.value(g);
        Ok((0..c).map(|i| v.row_slice(i).to_vec()).collect())
    }
}

impl Params for GeneratorParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        let p = join(prefix, P);
        out.push((join(&p, "id_embedding"), &self.id_embedding));
        out.push((join(&p, "cam_embedding"), &self.cam_embedding));
        self.prior_id.visit(&join(&p, "prior_id"), out);
        self.prior_cam.visit(&join(&p, "prior_cam"), out);
        self.recog_id.visit(&join(&p, "recog_id"), out);
        self.recog_cam.visit(&join(&p, "recog_cam"), out);
        self.decoder.visit(&join(&p, "decoder"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        let p = join(prefix, P);
        out.push((join(&p, "id_embedding"), &mut self.id_embedding));
        out.push((join(&p, "cam_embedding"), &mut self.cam_embedding));
        self.prior_id.visit_mut(&join(&p, "prior_id"), out);
        self.prior_cam.visit_mut(&join(&p, "prior_cam"), out);
        self.recog_id.visit_mut(&join(&p, "recog_id"), out);
        self.recog_cam.visit_mut(&join(&p, "recog_cam"), out);
        self.decoder.visit_mut(&join(&p, "decoder"), out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IfnMode {
    Train,
    Eval,
}

/// Batch statistics observed by a train-mode IFN pass.
#[derive(Debug, Clone, PartialEq)]
pub struct IfnBatchStats {
    pub mean: Vec<f64>,
    pub var: f64,
}

/// Input feature normalization: subtract the per-dimension batch mean and
/// divide by `sqrt(var + ε)`, where `var` is the scalar variance
/// `(1/d)·E‖f − E f‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfnState {
    pub running_mean: Vec<f64>,
    pub running_var: f64,
    pub momentum: f64,
    pub eps: f64,
}

impl IfnState {
    pub fn new(feat_dim: usize, momentum: f64, eps: f64) -> Self {
        Self {
            running_mean: vec![0.0; feat_dim],
            running_var: 1.0,
            momentum,
            eps,
        }
    }

    /// Normalize `f: [n, d]` on the tape. In train mode gradients flow through
    /// the batch statistics, which are returned for [`IfnState::update`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        f: NodeId,
        mode: IfnMode,
    ) -> Result<(NodeId, Option<IfnBatchStats>), NumericsError> {
        let d = tape.value(f).cols();
        if d != self.running_mean.len() {
            return Err(NumericsError::ShapeMismatch {
                node: tape.node_name(f),
                detail: format!("IFN expects {} features, got {d}", self.running_mean.len()),
            });
        }
        match mode {
            IfnMode::Train => {
                let mu = tape.col_mean(f)?;
                let centered = tape.sub_row(f, mu)?;
                let sq = tape.mul(centered, centered)?;
                let var = tape.mean(sq);
                let shifted = tape.add_const(var, self.eps);
                let inv_std = tape.pow(shifted, -0.5);
                let out = tape.scale_by(centered, inv_std)?;
                let stats = IfnBatchStats {
                    mean: tape.value(mu).data().to_vec(),
                    var: tape.value(var).item(),
                };
                Ok((out, Some(stats)))
            }
            IfnMode::Eval => {
                let mu = tape.constant(Tensor::row(self.running_mean.clone()));
                let centered = tape.sub_row(f, mu)?;
                let out = tape.scale(centered, 1.0 / (self.running_var + self.eps).sqrt());
                Ok((out, None))
            }
        }
    }

    /// Fold batch statistics into the running estimates.
    pub fn update(&mut self, stats: &IfnBatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        self.running_var = m * self.running_var + (1.0 - m) * stats.var;
    }

    /// Value-level normalization of a batch of feature vectors.
    pub fn apply(&self, batch: &[Vec<f64>], mode: IfnMode) -> Result<Vec<Vec<f64>>, NumericsError> {
        if batch.is_empty() {
            return Err(NumericsError::InvalidArgument("IFN on an empty batch".into()));
        }
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::stack_rows(batch));
        let (out, _) = self.forward(&mut tape, f, mode)?;
        let v = tape.value(out);
        Ok((0..v.rows()).map(|r| v.row_slice(r).to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded;

    fn dims() -> GenDims {
        GenDims {
            feat_dim: 4,
            latent_dim: 3,
            emb_dim: 2,
            hidden: 5,
            num_ids: 6,
            num_cams: 3,
        }
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
    }

    #[test]
    fn kl_examples() {
        let p = GaussianParams::standard(1);
        assert_eq!(kl_diag_gauss(&p, &p).unwrap(), 0.0);
        let q = GaussianParams {
            mean: vec![1.0],
            logvar: vec![0.0],
        };
        assert_eq!(kl_diag_gauss(&q, &p).unwrap(), 0.5);
        assert!(kl_diag_gauss(&q, &GaussianParams::standard(2)).is_err());
    }

    #[test]
    fn kl_nodes_match_closed_form() {
        let mut rng = seeded(4);
        let t = |rng: &mut _| normal_tensor(rng, 3, 2, 1.0);
        let (mq, lq, mp, lp) = (t(&mut rng), t(&mut rng), t(&mut rng), t(&mut rng));
        let mut tape = Tape::new();
        let q = GaussNodes {
            mean: tape.constant(mq.clone()),
            logvar: tape.constant(lq.clone()),
        };
        let p = GaussNodes {
            mean: tape.constant(mp.clone()),
            logvar: tape.constant(lp.clone()),
        };
        let kl = kl_nodes(&mut tape, q, p).unwrap();
        for r in 0..3 {
            let qa = GaussianParams {
                mean: mq.row_slice(r).to_vec(),
                logvar: lq.row_slice(r).to_vec(),
            };
            let pa = GaussianParams {
                mean: mp.row_slice(r).to_vec(),
                logvar: lp.row_slice(r).to_vec(),
            };
            let expect = kl_diag_gauss(&qa, &pa).unwrap();
            assert!((tape.value(kl).get(r, 0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_generator_is_standard_normal() {
        let g = GeneratorParams::zeros(dims(), Conditioning::default());
        assert_eq!(g.prior(Condition::Camera(2)).unwrap(), GaussianParams::standard(3));
        assert_eq!(g.prior(Condition::Identity(5)).unwrap(), GaussianParams::standard(3));
        assert_eq!(
            g.recognize(&[1.0, 2.0, 3.0, 4.0], Condition::Identity(0)).unwrap(),
            GaussianParams::standard(3)
        );
        assert_eq!(g.decode(&[1.0; 3], &[-1.0; 3], 1, 2).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn out_of_range_conditions_rejected() {
        let g = GeneratorParams::init(&mut seeded(1), dims(), Conditioning::default());
        assert!(g.prior(Condition::Identity(6)).is_err());
        assert!(g.prior(Condition::Camera(3)).is_err());
        assert!(g.decode(&[0.0; 3], &[0.0; 3], 3, 0).is_err());
        assert!(g.decode(&[0.0; 2], &[0.0; 3], 0, 0).is_err());
    }

    #[test]
    fn value_ops_are_deterministic() {
        let g = GeneratorParams::init(&mut seeded(1), dims(), Conditioning::default());
        assert_eq!(
            g.prior(Condition::Camera(1)).unwrap(),
            g.prior(Condition::Camera(1)).unwrap()
        );
        assert_ne!(
            g.prior(Condition::Camera(1)).unwrap(),
            g.prior(Condition::Camera(0)).unwrap()
        );
        let f = [0.3, -0.2, 1.0, 0.0];
        assert_eq!(
            g.recognize(&f, Condition::Identity(3)).unwrap(),
            g.recognize(&f, Condition::Identity(3)).unwrap()
        );
        let z = [0.1, 0.2, 0.3];
        assert_eq!(g.decode(&z, &z, 0, 1).unwrap(), g.decode(&z, &z, 0, 1).unwrap());
    }

    #[test]
    fn disabled_conditions_share_one_row() {
        let cond = Conditioning {
            use_id: false,
            use_cam: true,
        };
        let g = GeneratorParams::init(&mut seeded(1), dims(), cond);
        assert_eq!(g.id_embedding.rows(), 1);
        assert_eq!(
            g.prior(Condition::Identity(0)).unwrap(),
            g.prior(Condition::Identity(4)).unwrap()
        );
        assert!(g.prior(Condition::Identity(6)).is_err());
    }

    #[test]
    fn zero_generator_losses() {
        let g = GeneratorParams::zeros(dims(), Conditioning::default());
        let noise = LatentNoise::draw(&mut seeded(3), 2, 3);
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(2, 4));
        let est = g.loss_est(&mut tape, f, &[0, 1], &[0, 2], &noise).unwrap();
        assert_eq!(tape.value(est.loss).item(), 0.0);
        assert_eq!(tape.value(est.kl_id).item(), 0.0);

        // ‖f̄‖² = 2 for each row, decoder outputs zero.
        let f = tape.constant(Tensor::from_rows(2, 4, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 1.0]));
        let gsnn = g.loss_gsnn(&mut tape, f, &[0, 1], &[0, 2], &noise).unwrap();
        assert_eq!(tape.value(gsnn).item(), 1.0);
    }

    #[test]
    fn alpha_mixes_objectives() {
        let g = GeneratorParams::init(&mut seeded(5), dims(), Conditioning::default());
        let mut rng = seeded(6);
        let (en, gn) = (LatentNoise::draw(&mut rng, 3, 3), LatentNoise::draw(&mut rng, 3, 3));
        let fbar = normal_tensor(&mut rng, 3, 4, 1.0);
        let (ids, cams) = ([0, 4, 5], [0, 1, 2]);
        for alpha in [0.0, 1.0, 0.3] {
            let mut tape = Tape::new();
            let f = tape.constant(fbar.clone());
            let l = g.loss_generator(&mut tape, f, &ids, &cams, alpha, &en, &gn).unwrap();
            let (tot, est, gs) = (
                tape.value(l.total).item(),
                tape.value(l.est.loss).item(),
                tape.value(l.gsnn).item(),
            );
            assert!((tot - (alpha * est + (1.0 - alpha) * gs)).abs() < 1e-12);
            if alpha == 1.0 {
                assert_eq!(tot, est);
            }
            if alpha == 0.0 {
                assert_eq!(tot, gs);
            }
        }
        let mut tape = Tape::new();
        let f = tape.constant(fbar);
        assert!(g.loss_generator(&mut tape, f, &ids, &cams, 1.5, &en, &gn).is_err());
    }

    #[test]
    fn generator_loss_does_not_reach_its_input() {
        let g = GeneratorParams::init(&mut seeded(5), dims(), Conditioning::default());
        let mut rng = seeded(7);
        let (en, gn) = (LatentNoise::draw(&mut rng, 2, 3), LatentNoise::draw(&mut rng, 2, 3));
        let mut tape = Tape::new();
        let f = tape.input("features", normal_tensor(&mut rng, 2, 4, 1.0));
        let l = g.loss_generator(&mut tape, f, &[1, 2], &[0, 1], 0.2, &en, &gn).unwrap();
        let grads = tape.backward(l.total).unwrap();
        assert!(grads.wrt(f).is_none());
        assert!(grads.by_name("gen.decoder.out.weight").is_some());
    }

    #[test]
    fn traversal_lengths_and_determinism() {
        for c in [1, 2, 4, 8] {
            let d = GenDims { num_cams: c, ..dims() };
            let g = GeneratorParams::init(&mut seeded(2), d, Conditioning::default());
            let a = g.generate_for(3, &mut seeded(10), false).unwrap();
            let b = g.generate_for(3, &mut seeded(10), false).unwrap();
            assert_eq!(a.len(), c);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn single_camera_traversal_is_one_decode() {
        let d = GenDims { num_cams: 1, ..dims() };
        let g = GeneratorParams::init(&mut seeded(2), d, Conditioning::default());
        let noise = StepNoise::draw(&mut seeded(11), 1, 1, 3, false).generation;
        let mut tape = Tape::new();
        let out = g.generate_all_cameras(&mut tape, &[4], &noise).unwrap();
        let p_id = g.prior(Condition::Identity(4)).unwrap();
        let p_cam = g.prior(Condition::Camera(0)).unwrap();
        let draw = |p: &GaussianParams, eps: &Tensor| -> Vec<f64> {
            (0..3)
                .map(|i| p.mean[i] + (0.5 * p.logvar[i]).exp() * eps.data()[i])
                .collect()
        };
        let expect = g
            .decode(&draw(&p_cam, &noise.cam), &draw(&p_id, &noise.id), 0, 4)
            .unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn shared_identity_latent_repeats_rows() {
        let n = StepNoise::draw(&mut seeded(1), 2, 3, 4, true);
        assert_eq!(n.generation.id.row_slice(0), n.generation.id.row_slice(2));
        assert_eq!(n.generation.id.row_slice(3), n.generation.id.row_slice(5));
        assert_ne!(n.generation.id.row_slice(0), n.generation.id.row_slice(3));
        let m = StepNoise::draw(&mut seeded(1), 2, 3, 4, false);
        assert_ne!(m.generation.id.row_slice(0), m.generation.id.row_slice(1));
    }

    #[test]
    fn ifn_two_point_batch() {
        let st = IfnState::new(1, 0.9, 1e-8);
        let out = st.apply(&[vec![2.0], vec![4.0]], IfnMode::Train).unwrap();
        assert!((out[0][0] + 1.0).abs() < 1e-4 && (out[1][0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn ifn_constant_batch_is_zero() {
        let st = IfnState::new(1, 0.9, 1e-8);
        let out = st.apply(&[vec![5.0], vec![5.0]], IfnMode::Train).unwrap();
        assert_eq!(out, vec![vec![0.0], vec![0.0]]);
    }

    #[test]
    fn ifn_rejects_empty_batch() {
        let st = IfnState::new(3, 0.9, 1e-8);
        assert!(st.apply(&[], IfnMode::Train).is_err());
    }

    #[test]
    fn ifn_hard_constraint_on_random_batch() {
        let st = IfnState::new(32, 0.9, 1e-10);
        let batch = rows(&normal_tensor(&mut seeded(8), 128, 32, 3.7).map(|v| v + 2.0));
        let out = st.apply(&batch, IfnMode::Train).unwrap();
        // Recompute the scalar variance on the outputs.
        let n = out.len() as f64;
        let mean: Vec<f64> = (0..32).map(|j| out.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let var = out
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(a, m)| (a - m).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (n * 32.0);
        assert!((var - 1.0).abs() < 1e-6);
        assert!(mean.iter().all(|m| m.abs() < 1e-9));
    }

    #[test]
    fn ifn_running_stats_and_eval() {
        let mut st = IfnState::new(1, 0.9, 0.0);
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::from_rows(2, 1, vec![2.0, 4.0]));
        let (_, stats) = st.forward(&mut tape, f, IfnMode::Train).unwrap();
        st.update(&stats.unwrap());
        assert!((st.running_mean[0] - 0.3).abs() < 1e-15);
        assert!((st.running_var - 1.0).abs() < 1e-15);
        let out = st.apply(&[vec![1.3]], IfnMode::Eval).unwrap();
        assert!((out[0][0] - 1.0).abs() < 1e-12);
    }
}
