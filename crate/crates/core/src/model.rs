//! The shared contract every dynamical VAE implements: batched sequences,
//! the per-step generative hooks, the single-pass inference/evaluation
//! routine, and the generic evidence lower bound built on top of it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blocks::{CellState, GaussianHead, LogVarHead};
use crate::distributions::{
    graph_gaussian_log_prob, graph_is_log_prob, graph_kl, graph_kl_standard, graph_reparam, GaussianParams, GaussianVar,
};
use crate::error::{check_dim, DvaeError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Vae,
    Dkf,
    Kvae,
    Storn,
    Vrnn,
    Srnn,
    RvaeCausal,
    RvaeNoncausal,
    Dsae,
}

impl ModelKind {
    pub const ALL: [ModelKind; 9] = [
        ModelKind::Vae,
        ModelKind::Dkf,
        ModelKind::Kvae,
        ModelKind::Storn,
        ModelKind::Vrnn,
        ModelKind::Srnn,
        ModelKind::RvaeCausal,
        ModelKind::RvaeNoncausal,
        ModelKind::Dsae,
    ];

    /// Command-line / config identifier.
    pub fn id(self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::Dkf => "dkf",
            ModelKind::Kvae => "kvae",
            ModelKind::Storn => "storn",
            ModelKind::Vrnn => "vrnn",
            ModelKind::Srnn => "srnn",
            ModelKind::RvaeCausal => "rvae-causal",
            ModelKind::RvaeNoncausal => "rvae-noncausal",
            ModelKind::Dsae => "dsae",
        }
    }

    /// Name used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Vae => "VAE",
            ModelKind::Dkf => "DKF",
            ModelKind::Kvae => "KVAE",
            ModelKind::Storn => "STORN",
            ModelKind::Vrnn => "VRNN",
            ModelKind::Srnn => "SRNN",
            ModelKind::RvaeCausal => "RVAE-Causal",
            ModelKind::RvaeNoncausal => "RVAE-NonCausal",
            ModelKind::Dsae => "DSAE",
        }
    }

    pub fn is_dynamical(self) -> bool {
        self != ModelKind::Vae
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ModelKind {
    type Err = DvaeError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        ModelKind::ALL
            .into_iter()
            .find(|k| k.id() == key || k.display_name().eq_ignore_ascii_case(&key))
            .ok_or_else(|| DvaeError::Config(format!("unknown model `{s}`")))
    }
}

/// Observation likelihood family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationKind {
    /// Non-negative power spectra under the Itakura-Saito (exponential)
    /// likelihood with a predicted variance per bin.
    #[default]
    PowerSpectrum,
    /// Real-valued frames under a diagonal Gaussian.
    Gaussian,
}

/// A batch of `B` sequences of `T` frames with `F` features, stored
/// frame-major (`frames[t]` is `B × F`).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch<T> {
    frames: Vec<Tensor<T>>,
    lengths: Vec<usize>,
    phase: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> SequenceBatch<T> {
    pub fn new(frames: Vec<Tensor<T>>, lengths: Vec<usize>) -> Result<Self> {
        if frames.is_empty() {
            return Err(DvaeError::EmptyInput("sequence batch has no frames".into()));
        }
        let (b, f) = frames[0].shape();
        if b == 0 {
            return Err(DvaeError::EmptyInput("sequence batch has no items".into()));
        }
        for fr in &frames {
            check_dim("frame batch size", b, fr.rows())?;
            check_dim("frame feature size", f, fr.cols())?;
        }
        check_dim("lengths", b, lengths.len())?;
        if let Some(&l) = lengths.iter().find(|&&l| l > frames.len()) {
            return Err(DvaeError::Contract(format!("length {l} exceeds {} frames", frames.len())));
        }
        Ok(Self {
            frames,
            lengths,
            phase: None,
        })
    }

    /// Builds a batch from per-item `T × F` frame lists, zero-padding
    /// shorter items to the longest.
    pub fn from_sequences(seqs: &[Vec<Vec<T>>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(DvaeError::EmptyInput("no sequences".into()));
        }
        let t_max = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let f = seqs
            .iter()
            .find_map(|s| s.first().map(Vec::len))
            .ok_or_else(|| DvaeError::EmptyInput("all sequences are empty".into()))?;
        let mut frames = vec![Tensor::zeros(seqs.len(), f); t_max];
        for (b, s) in seqs.iter().enumerate() {
            for (t, x) in s.iter().enumerate() {
                check_dim("frame feature size", f, x.len())?;
                frames[t].row_mut(b).copy_from_slice(x);
            }
        }
        Self::new(frames, seqs.iter().map(Vec::len).collect())
    }

    pub fn with_phase(mut self, phase: Vec<Tensor<T>>) -> Result<Self> {
        check_dim("phase frames", self.frames.len(), phase.len())?;
        for p in &phase {
            if p.shape() != self.frames[0].shape() {
                return Err(DvaeError::Contract("phase shape differs from data shape".into()));
            }
        }
        self.phase = Some(phase);
        Ok(self)
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames[0].cols()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn frames(&self) -> &[Tensor<T>] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Tensor<T> {
        &self.frames[t]
    }

    pub fn phase(&self) -> Option<&[Tensor<T>]> {
        self.phase.as_deref()
    }

    /// True when no item is padded.
    pub fn is_full(&self) -> bool {
        self.lengths.iter().all(|&l| l == self.frames.len())
    }

    pub fn valid_frames(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// `B × 1` validity indicator of frame `t`.
    pub fn mask(&self, t: usize) -> Tensor<T> {
        Tensor::from_fn(self.batch_size(), 1, |b, _| {
            if t < self.lengths[b] {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Frames of item `b` up to its length.
    pub fn sequence(&self, b: usize) -> Vec<Vec<T>> {
        (0..self.lengths[b]).map(|t| self.frames[t].row(b).to_vec()).collect()
    }

    /// Items `idx` as a new batch.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let pick = |ts: &[Tensor<T>]| -> Vec<Tensor<T>> {
            ts.iter()
                .map(|fr| Tensor::from_fn(idx.len(), fr.cols(), |r, c| fr[(idx[r], c)]))
                .collect()
        };
        let mut out = Self::new(pick(&self.frames), idx.iter().map(|&i| self.lengths[i]).collect())?;
        if let Some(p) = &self.phase {
            out.phase = Some(pick(p));
        }
        Ok(out)
    }

    /// Data frames as graph inputs.
    pub fn inputs(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.frames.iter().map(|f| g.input(f.clone())).collect()
    }

    /// Per-step masks as graph inputs, or `None` when nothing is padded.
    pub fn mask_inputs(&self, g: &mut Graph<T>) -> Option<Vec<Var>> {
        if self.is_full() {
            return None;
        }
        Some((0..self.num_frames()).map(|t| g.input(self.mask(t))).collect())
    }

    pub fn cast<U: Scalar>(&self) -> SequenceBatch<U> {
        SequenceBatch {
            frames: self.frames.iter().map(Tensor::cast).collect(),
            lengths: self.lengths.clone(),
            phase: self.phase.as_ref().map(|p| p.iter().map(Tensor::cast).collect()),
        }
    }
}

/// Source of the standard draws behind every reparameterized sample.
/// `Zero` turns all sampling into its deterministic centre: latent draws
/// become posterior/prior means and observation draws become the predicted
/// mean (the variance itself for power spectra).
pub enum Noise<'a> {
    Zero,
    Rng(&'a mut ChaCha8Rng),
}

impl Noise<'_> {
    pub fn is_zero(&self) -> bool {
        matches!(self, Noise::Zero)
    }

    pub fn normal<T: Scalar>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        match self {
            Noise::Zero => Tensor::zeros(rows, cols),
            Noise::Rng(rng) => Tensor::from_fn(rows, cols, |_, _| {
                let v: f64 = StandardNormal.sample(*rng);
                T::lit(v)
            }),
        }
    }

    /// Unit-rate exponential draws (ones under `Zero`).
    pub fn exponential<T: Scalar>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        match self {
            Noise::Zero => Tensor::filled(rows, cols, T::one()),
            Noise::Rng(rng) => Tensor::from_fn(rows, cols, |_, _| {
                let v: f64 = Exp1.sample(*rng);
                T::lit(v)
            }),
        }
    }

    pub fn reborrow(&mut self) -> Noise<'_> {
        match self {
            Noise::Zero => Noise::Zero,
            Noise::Rng(r) => Noise::Rng(r),
        }
    }
}

/// Observation distribution parameters produced by a decoder.
#[derive(Clone, Copy, Debug)]
pub enum ObsVar {
    PowerSpec { log_var: Var },
    Gaussian(GaussianVar),
}

impl ObsVar {
    /// `B × 1` log-likelihood of `x`.
    pub fn log_prob<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        match *self {
            ObsVar::PowerSpec { log_var } => graph_is_log_prob(g, x, log_var),
            ObsVar::Gaussian(p) => graph_gaussian_log_prob(g, x, p),
        }
    }

    /// Expected value: the variance for power spectra, the mean otherwise.
    pub fn mean<T: Scalar>(&self, g: &Graph<T>) -> Tensor<T> {
        match *self {
            ObsVar::PowerSpec { log_var } => g.value(log_var).map(|v| v.exp()),
            ObsVar::Gaussian(p) => g.value(p.mean).clone(),
        }
    }

    pub fn sample<T: Scalar>(&self, g: &Graph<T>, noise: &mut Noise<'_>) -> Tensor<T> {
        match *self {
            ObsVar::PowerSpec { log_var } => {
                let lv = g.value(log_var);
                let e = noise.exponential::<T>(lv.rows(), lv.cols());
                lv.zip_map(&e, |l, e| l.exp() * e)
            }
            ObsVar::Gaussian(p) => {
                let m = g.value(p.mean);
                let lv = g.value(p.log_var);
                let eps = noise.normal::<T>(m.rows(), m.cols());
                let sd = lv.map(|l| (l * T::lit(0.5)).exp());
                Tensor::from_fn(m.rows(), m.cols(), |r, c| m[(r, c)] + eps[(r, c)] * sd[(r, c)])
            }
        }
    }

    /// Observation mean as a graph node (for differentiable reconstructions).
    pub fn mean_var<T: Scalar>(&self, g: &mut Graph<T>) -> Var {
        match *self {
            ObsVar::PowerSpec { log_var } => g.exp(log_var),
            ObsVar::Gaussian(p) => p.mean,
        }
    }
}

/// Decoder output layer for either observation family.
#[derive(Clone, Debug)]
pub enum ObservationHead {
    PowerSpec(LogVarHead),
    Gaussian(GaussianHead),
}

impl ObservationHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        group: &str,
        in_dim: usize,
        x_dim: usize,
        kind: ObservationKind,
    ) -> Self {
        match kind {
            ObservationKind::PowerSpectrum => {
                ObservationHead::PowerSpec(LogVarHead::new(params, rng, name, group, in_dim, x_dim))
            }
            ObservationKind::Gaussian => {
                ObservationHead::Gaussian(GaussianHead::new(params, rng, name, group, in_dim, x_dim))
            }
        }
    }

    pub fn kind(&self) -> ObservationKind {
        match self {
            ObservationHead::PowerSpec(_) => ObservationKind::PowerSpectrum,
            ObservationHead::Gaussian(_) => ObservationKind::Gaussian,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamSet<T>, features: Var) -> Result<ObsVar> {
        match self {
            ObservationHead::PowerSpec(h) => Ok(ObsVar::PowerSpec {
                log_var: h.forward(g, p, features)?,
            }),
            ObservationHead::Gaussian(h) => Ok(ObsVar::Gaussian(h.forward(g, p, features)?)),
        }
    }
}

/// How the regularization term of one step is obtained.
#[derive(Clone, Copy, Debug)]
pub enum KlTerm {
    /// Analytic KL against a conditional Gaussian prior.
    Prior(GaussianVar),
    /// Analytic KL against `N(0, I)`.
    StandardNormal,
    /// A `B × 1` single-sample estimate supplied by the model.
    Estimated(Var),
}

/// Everything one step of the inference/evaluation pass produced.
#[derive(Clone, Copy, Debug)]
pub struct StepTerms {
    pub posterior: GaussianVar,
    pub kl: KlTerm,
    /// The reparameterized latent sample.
    pub z: Var,
    pub obs: ObsVar,
}

/// Result of running a model over a batch once (one Monte-Carlo sample).
#[derive(Clone, Debug)]
pub struct SequencePass {
    pub steps: Vec<StepTerms>,
    /// Posterior of a sequence-level latent, regularized towards `N(0, I)`.
    pub sequence_posterior: Option<GaussianVar>,
}

/// Generation-time state handed from step to step. At the first step the
/// previous frame and latent are zero vectors.
#[derive(Clone, Debug)]
pub struct StepContext {
    pub t: usize,
    pub batch: usize,
    pub prev_x: Var,
    pub prev_z: Var,
    /// Recurrent states owned by the decoder, model-specific layout.
    pub states: Vec<CellState>,
    /// Sequence-level latent drawn before the first step, if any.
    pub sequence_latent: Option<Var>,
}

impl StepContext {
    pub fn new<T: Scalar>(g: &mut Graph<T>, batch: usize, x_dim: usize, z_dim: usize) -> Self {
        Self {
            t: 0,
            batch,
            prev_x: g.zeros(batch, x_dim),
            prev_z: g.zeros(batch, z_dim),
            states: Vec::new(),
            sequence_latent: None,
        }
    }
}

/// Frames and latents drawn by [`DynamicalVae::generate`].
#[derive(Clone, Debug)]
pub struct Generation<T> {
    pub frames: SequenceBatch<T>,
    pub latents: Vec<Tensor<T>>,
}

pub trait DynamicalVae<T: Scalar> {
    fn kind(&self) -> ModelKind;
    fn x_dim(&self) -> usize;
    fn z_dim(&self) -> usize;
    fn observation(&self) -> ObservationKind;
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;

    /// Whether the approximate posterior of `z_t` looks at frames after `t`.
    fn needs_future_x(&self) -> bool;

    /// Whether the encoder reads the decoder's recurrent state.
    fn shares_decoder_state_with_encoder(&self) -> bool {
        false
    }

    /// Inference and generative evaluation over the whole batch: draws
    /// `z_{1:T}` from the approximate posterior (cascaded where the posterior
    /// depends on past latents) and returns, per step, the posterior, the
    /// regularization term and the observation parameters.
    fn run_with(
        &self,
        g: &mut Graph<T>,
        batch: &SequenceBatch<T>,
        noise: &mut Noise<'_>,
        forced: Option<&[Var]>,
    ) -> Result<SequencePass>;

    fn run(&self, g: &mut Graph<T>, batch: &SequenceBatch<T>, noise: &mut Noise<'_>) -> Result<SequencePass> {
        self.run_with(g, batch, noise, None)
    }

    /// Initial generation state (zero frame/latent, zero recurrent states).
    fn start_generation(&self, g: &mut Graph<T>, batch: usize, noise: &mut Noise<'_>) -> Result<StepContext>;

    /// Prior over `z_t`; may advance recurrent states from the previous
    /// frame and latent, and may draw internal randomness from `noise`.
    fn prior_step(&self, g: &mut Graph<T>, ctx: &mut StepContext, noise: &mut Noise<'_>) -> Result<GaussianVar>;

    /// Observation parameters for `x_t` given `z_t`; may advance states.
    fn decode_step(&self, g: &mut Graph<T>, ctx: &mut StepContext, z: Var) -> Result<ObsVar>;

    /// Ancestral sampling of `len` frames for `batch` sequences, alternating
    /// `z_t ~ prior`, `x_t ~ decoder`. Frames of an optional prefix are fed
    /// back instead of sampled ones (teacher forcing) before free-running.
    fn generate(
        &self,
        len: usize,
        batch: usize,
        noise: &mut Noise<'_>,
        prefix: Option<&SequenceBatch<T>>,
    ) -> Result<Generation<T>> {
        generate_stepwise(self, len, batch, noise, prefix)
    }
}

/// Default alternating sampler behind [`DynamicalVae::generate`].
pub fn generate_stepwise<T: Scalar, M: DynamicalVae<T> + ?Sized>(
    model: &M,
    len: usize,
    batch: usize,
    noise: &mut Noise<'_>,
    prefix: Option<&SequenceBatch<T>>,
) -> Result<Generation<T>> {
    if len == 0 || batch == 0 {
        return Err(DvaeError::EmptyInput("generation length and batch must be >= 1".into()));
    }
    if let Some(p) = prefix {
        check_dim("prefix batch size", batch, p.batch_size())?;
        check_dim("prefix feature size", model.x_dim(), p.feature_dim())?;
    }
    let mut g = Graph::new();
    let mut ctx = model.start_generation(&mut g, batch, noise)?;
    let mut frames = Vec::with_capacity(len);
    let mut latents = Vec::with_capacity(len);
    for t in 0..len {
        ctx.t = t;
        let prior = model.prior_step(&mut g, &mut ctx, noise)?;
        let eps = noise.normal::<T>(batch, model.z_dim());
        let z = graph_reparam(&mut g, prior, eps);
        let obs = model.decode_step(&mut g, &mut ctx, z)?;
        let x = match prefix {
            Some(p) if t < p.num_frames() => p.frame(t).clone(),
            _ => obs.sample(&g, noise),
        };
        latents.push(g.value(z).clone());
        ctx.prev_x = g.input(x.clone());
        ctx.prev_z = z;
        frames.push(x);
    }
    Ok(Generation {
        frames: SequenceBatch::new(frames, vec![len; batch])?,
        latents,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboOptions<T> {
    /// Monte-Carlo samples of the latent trajectory.
    pub n_samples: usize,
    /// Weight of the regularization terms.
    pub beta: T,
}

impl<T: Scalar> Default for ElboOptions<T> {
    fn default() -> Self {
        Self {
            n_samples: 1,
            beta: T::one(),
        }
    }
}

/// Per-step reconstruction and regularization terms, each summed over the
/// batch and averaged over Monte-Carlo samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown<T> {
    pub recon_per_t: Vec<T>,
    pub kl_per_t: Vec<T>,
    /// Regularization of a sequence-level latent (zero when absent).
    pub sequence_kl: T,
    /// `Σ recon − β (Σ kl + sequence_kl)`.
    pub total: T,
    pub beta: T,
    pub n_mc_samples: usize,
    pub batch_size: usize,
    pub valid_frames: usize,
}

impl<T: Scalar> ElboBreakdown<T> {
    pub fn recon(&self) -> T {
        self.recon_per_t.iter().copied().sum()
    }

    pub fn kl(&self) -> T {
        self.kl_per_t.iter().copied().sum::<T>() + self.sequence_kl
    }

    /// Total divided by the number of valid frames.
    pub fn per_frame(&self) -> T {
        self.total / T::lit(self.valid_frames.max(1) as f64)
    }

    /// Total divided by the number of sequences.
    pub fn per_sequence(&self) -> T {
        self.total / T::lit(self.batch_size.max(1) as f64)
    }
}

/// Graph handle of the bound plus its numeric breakdown.
#[derive(Clone, Debug)]
pub struct ElboEval<T> {
    /// `1 × 1` node holding the total (summed over the batch).
    pub total: Var,
    pub breakdown: ElboBreakdown<T>,
}

fn kl_rows<T: Scalar>(g: &mut Graph<T>, step: &StepTerms) -> Var {
    match step.kl {
        KlTerm::Prior(p) => graph_kl(g, step.posterior, p),
        KlTerm::StandardNormal => graph_kl_standard(g, step.posterior),
        KlTerm::Estimated(v) => v,
    }
}

/// Evidence lower bound of `batch`, built in `g` so that its gradient is
/// available via `g.backward(eval.total)`. Frames beyond each item's length
/// contribute nothing.
pub fn elbo<T: Scalar, M: DynamicalVae<T> + ?Sized>(
    model: &M,
    g: &mut Graph<T>,
    batch: &SequenceBatch<T>,
    opts: ElboOptions<T>,
    noise: &mut Noise<'_>,
) -> Result<ElboEval<T>> {
    if opts.n_samples == 0 {
        return Err(DvaeError::Config("n_samples must be >= 1".into()));
    }
    check_dim("batch feature size", model.x_dim(), batch.feature_dim())?;
    let n_t = batch.num_frames();
    let inv_r = T::one() / T::lit(opts.n_samples as f64);
    let masks: Option<Vec<Var>> = (!batch.is_full()).then(|| (0..n_t).map(|t| g.input(batch.mask(t))).collect());
    let xs = batch.inputs(g);
    let mut recon_per_t = vec![T::zero(); n_t];
    let mut kl_per_t = vec![T::zero(); n_t];
    let mut sequence_kl = T::zero();
    let mut recon_terms = Vec::new();
    let mut kl_terms = Vec::new();
    for _ in 0..opts.n_samples {
        let pass = model.run(g, batch, noise)?;
        check_dim("pass length", n_t, pass.steps.len())?;
        for (t, step) in pass.steps.iter().enumerate() {
            let mut rec = step.obs.log_prob(g, xs[t]);
            let mut kl = kl_rows(g, step);
            if let Some(m) = &masks {
                rec = g.mul(rec, m[t]);
                kl = g.mul(kl, m[t]);
            }
            let rec = g.sum_all(rec);
            let kl = g.sum_all(kl);
            recon_per_t[t] += g.scalar(rec) * inv_r;
            kl_per_t[t] += g.scalar(kl) * inv_r;
            recon_terms.push(rec);
            kl_terms.push(kl);
        }
        if let Some(q) = pass.sequence_posterior {
            let kl = graph_kl_standard(g, q);
            let kl = g.sum_all(kl);
            sequence_kl += g.scalar(kl) * inv_r;
            kl_terms.push(kl);
        }
    }
    let rec_sum = sum_scalars(g, &recon_terms);
    let kl_sum = sum_scalars(g, &kl_terms);
    let kl_w = g.scale(kl_sum, opts.beta);
    let diff = g.sub(rec_sum, kl_w);
    let total = g.scale(diff, inv_r);
    let breakdown = ElboBreakdown {
        total: g.scalar(total),
        recon_per_t,
        kl_per_t,
        sequence_kl,
        beta: opts.beta,
        n_mc_samples: opts.n_samples,
        batch_size: batch.batch_size(),
        valid_frames: batch.valid_frames(),
    };
    Ok(ElboEval { total, breakdown })
}

/// Reparameterized draw from `q`, replaced by `forced[t]` when the latent
/// trajectory is teacher-forced. The noise is consumed either way.
pub fn draw_latent<T: Scalar>(g: &mut Graph<T>, q: GaussianVar, eps: Tensor<T>, forced: Option<&[Var]>, t: usize) -> Var {
    let z = graph_reparam(g, q, eps);
    forced.map_or(z, |f| f[t])
}

/// Per-step posterior parameters with the latent history fixed to `latents`
/// (`B × L` per frame) instead of sampled.
pub fn posterior_given<T: Scalar, M: DynamicalVae<T> + ?Sized>(
    model: &M,
    batch: &SequenceBatch<T>,
    latents: &[Tensor<T>],
) -> Result<Vec<GaussianParamsBatch<T>>> {
    check_dim("forced latent length", batch.num_frames(), latents.len())?;
    let mut g = Graph::new();
    let forced: Vec<Var> = latents.iter().map(|z| g.input(z.clone())).collect();
    let pass = model.run_with(&mut g, batch, &mut Noise::Zero, Some(&forced))?;
    Ok(pass
        .steps
        .iter()
        .map(|s| GaussianParamsBatch {
            mean: g.value(s.posterior.mean).clone(),
            log_var: g.value(s.posterior.log_var).clone(),
        })
        .collect())
}

/// Gaussian parameters for a whole batch (`B × L` each).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParamsBatch<T> {
    pub mean: Tensor<T>,
    pub log_var: Tensor<T>,
}

/// Sum of `1 × 1` nodes as a single node.
pub fn sum_scalars<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Var {
    match terms.len() {
        0 => g.zeros(1, 1),
        1 => terms[0],
        _ => {
            let parts = g.concat(terms);
            g.sum_all(parts)
        }
    }
}

/// Latent trajectories drawn from the approximate posterior, with the
/// per-step posterior parameters they were drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence<T> {
    /// `samples[t]` is `B × L`.
    pub samples: Vec<Tensor<T>>,
    pub posterior_mean: Vec<Tensor<T>>,
    pub posterior_log_var: Vec<Tensor<T>>,
}

impl<T: Scalar> LatentSequence<T> {
    pub fn posterior(&self, t: usize, item: usize) -> GaussianParams<T> {
        GaussianParams {
            mean: self.posterior_mean[t].row(item).to_vec(),
            log_var: self.posterior_log_var[t].row(item).to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Cascade sampling `z_1 ~ q(z_1|·)`, `z_2 ~ q(z_2|z_1, ·)`, … through the
/// model's inference pass.
pub fn posterior_sample_cascade<T: Scalar, M: DynamicalVae<T> + ?Sized>(
    model: &M,
    batch: &SequenceBatch<T>,
    noise: &mut Noise<'_>,
) -> Result<LatentSequence<T>> {
    let mut g = Graph::new();
    let pass = model.run(&mut g, batch, noise)?;
    Ok(LatentSequence {
        samples: pass.steps.iter().map(|s| g.value(s.z).clone()).collect(),
        posterior_mean: pass.steps.iter().map(|s| g.value(s.posterior.mean).clone()).collect(),
        posterior_log_var: pass.steps.iter().map(|s| g.value(s.posterior.log_var).clone()).collect(),
    })
}

/// Expected observation per frame (`B × F` each) given a posterior draw of
/// the latents; with [`Noise::Zero`] the posterior means are used.
pub fn reconstruct<T: Scalar, M: DynamicalVae<T> + ?Sized>(
    model: &M,
    batch: &SequenceBatch<T>,
    noise: &mut Noise<'_>,
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let pass = model.run(&mut g, batch, noise)?;
    Ok(pass.steps.iter().map(|s| s.obs.mean(&g)).collect())
}
