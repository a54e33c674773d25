//! Conditional-independence training engine.
//!
//! Implements the dynamic within-batch conditional sampler, the
//! dual-discriminator losses whose squared difference penalizes the gap
//! between the two Jensen-Shannon divergences, the soft equalized-odds
//! regularizer baseline, and the alternating adversarial training loop.
//!
//! The sampler draws, for every sample, a replacement value uniformly (with
//! replacement) from the same-label values in the batch, approximating the
//! conditional reference distribution while the representation is still
//! being learned. Resampled values enter the losses as constants: no
//! gradient flows through them into the encoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::fairmetrics::{self, MetricsReport};
use crate::nets::{Discriminator, Encoder, EncoderArch, LATENT_DIM};
use crate::synthgen::{derive_seed, stream_rng, SynthDataset, IMAGE_PIXELS, IMAGE_SIZE};

/// Sub-sampling cap for all dcor² evaluations (bounds the O(n²) matrices).
pub const DCOR_MAX_POINTS: usize = 2000;

const STREAM_SHUFFLE: u64 = 0x7368_7566;
const STREAM_SAMPLER: u64 = 0x7361_6d70;
const STREAM_EVAL: u64 = 0x6576_616c;
const TAG_D1: u64 = 0xd1;
const TAG_D2: u64 = 0xd2;

/// Where the conditional-independence constraint is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiTarget {
    /// Plain task training.
    None,
    /// Soft equalized-odds penalty added to the task loss.
    Regularizer,
    /// Dual discriminators on the scalar model output.
    LabelSpace,
    /// Dual discriminators on the full latent vector.
    LatentSpace,
    /// Dual discriminators on the leading latent slice, with an auxiliary
    /// attribute head supervising the trailing slice.
    Partitioned,
}

impl CiTarget {
    pub fn uses_discriminators(&self) -> bool {
        matches!(
            self,
            CiTarget::LabelSpace | CiTarget::LatentSpace | CiTarget::Partitioned
        )
    }
}

impl std::str::FromStr for CiTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CiTarget::None),
            "regularizer" => Ok(CiTarget::Regularizer),
            "label_space" => Ok(CiTarget::LabelSpace),
            "latent_space" => Ok(CiTarget::LatentSpace),
            "partitioned" => Ok(CiTarget::Partitioned),
            other => Err(Error::invalid("ci_target", format!("unknown target `{other}`"))),
        }
    }
}

impl std::fmt::Display for CiTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CiTarget::None => "none",
            CiTarget::Regularizer => "regularizer",
            CiTarget::LabelSpace => "label_space",
            CiTarget::LatentSpace => "latent_space",
            CiTarget::Partitioned => "partitioned",
        };
        f.write_str(s)
    }
}

/// All hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub ci_target: CiTarget,
    /// λ (λ₁ for the partitioned variant): strength of the CI penalty.
    pub lambda_ci: f64,
    /// λ₂: weight of the auxiliary attribute head (partitioned only).
    pub lambda_s: f64,
    /// ρ: weight of the task loss.
    pub task_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub disc_steps_per_enc_step: usize,
    pub seed: u64,
    /// First index of the attribute-variant latent slice (partitioned only).
    pub split_index: usize,
    /// Threshold binarizing the protected attribute into groups (metrics and
    /// the regularizer baseline only).
    pub s_binarization_threshold: f64,
    /// Compose batches by interleaving per-label shuffles instead of one
    /// global shuffle.
    pub stratified_batches: bool,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub disc_hidden: usize,
    /// Raw pixels are divided by this before entering the encoder.
    pub pixel_scale: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            ci_target: CiTarget::None,
            lambda_ci: 0.0,
            lambda_s: 0.0,
            task_weight: 1.0,
            learning_rate: 1e-4,
            batch_size: 512,
            epochs: 100,
            disc_steps_per_enc_step: 1,
            seed: 0,
            split_index: 8,
            s_binarization_threshold: 4.0,
            stratified_batches: false,
            conv1_channels: 8,
            conv2_channels: 16,
            disc_hidden: 64,
            pixel_scale: crate::synthgen::PIXEL_SCALE,
        }
    }
}

impl TrainingConfig {
    /// Fail-fast validation; every error names the offending field.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ci >= 0.0) {
            return Err(Error::invalid("lambda_ci", "must be >= 0"));
        }
        if !(self.lambda_s >= 0.0) {
            return Err(Error::invalid("lambda_s", "must be >= 0"));
        }
        if !(self.task_weight > 0.0) {
            return Err(Error::invalid("task_weight", "must be > 0"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if self.ci_target.uses_discriminators() && self.batch_size < 2 {
            return Err(Error::invalid(
                "batch_size",
                "must be >= 2 when dynamic sampling is enabled",
            ));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.disc_steps_per_enc_step == 0 {
            return Err(Error::invalid("disc_steps_per_enc_step", "must be >= 1"));
        }
        if self.ci_target == CiTarget::Partitioned
            && !(0 < self.split_index && self.split_index < LATENT_DIM)
        {
            return Err(Error::invalid(
                "split_index",
                format!("must lie strictly between 0 and {LATENT_DIM}"),
            ));
        }
        if !self.s_binarization_threshold.is_finite() {
            return Err(Error::invalid("s_binarization_threshold", "must be finite"));
        }
        if self.conv1_channels == 0 || self.conv2_channels == 0 {
            return Err(Error::invalid("conv1_channels/conv2_channels", "must be >= 1"));
        }
        if self.disc_hidden == 0 {
            return Err(Error::invalid("disc_hidden", "must be >= 1"));
        }
        if !(self.pixel_scale > 0.0) {
            return Err(Error::invalid("pixel_scale", "must be > 0"));
        }
        Ok(())
    }

    pub fn encoder_arch(&self) -> EncoderArch {
        EncoderArch {
            conv1_channels: self.conv1_channels,
            conv2_channels: self.conv2_channels,
            partitioned: self.ci_target == CiTarget::Partitioned,
            split_index: self.split_index,
            pixel_scale: self.pixel_scale,
        }
    }

    /// Width of the vector fed to the discriminators.
    pub fn ci_input_dim(&self) -> usize {
        match self.ci_target {
            CiTarget::LabelSpace => 1,
            CiTarget::LatentSpace => LATENT_DIM,
            CiTarget::Partitioned => self.split_index,
            _ => 0,
        }
    }

    /// The CI machinery is a no-op when the penalty weight is zero, so λ=0
    /// runs take exactly the task-only code path.
    pub fn ci_active(&self) -> bool {
        self.ci_target.uses_discriminators() && self.lambda_ci > 0.0
    }
}

/// One batch prepared for the dual-discriminator losses.
#[derive(Debug, Clone)]
pub struct DynamicBatch {
    /// Row-major `n × dim` values the CI constraint applies to.
    pub values: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<u8>,
    /// Raw protected-attribute values.
    pub sensitives: Vec<f64>,
    /// Same-label resampled counterparts of `values`; constants under
    /// differentiation.
    pub resampled: Vec<f64>,
}

/// Draw, for every row, a uniform same-label row (with replacement) from the
/// batch. Output rows are copies: they carry no gradient linkage.
pub fn dynamic_sample(
    values: &[f64],
    dim: usize,
    labels: &[u8],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::invalid("labels", "batch must be nonempty"));
    }
    if dim == 0 || values.len() != labels.len() * dim {
        return Err(Error::ShapeMismatch(format!(
            "values length {} does not match {} rows of width {dim}",
            values.len(),
            labels.len()
        )));
    }
    let mut by_label: std::collections::BTreeMap<u8, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let mut out = Vec::with_capacity(values.len());
    for &l in labels {
        let pool = &by_label[&l];
        let j = pool[rng.gen_range(0..pool.len())];
        out.extend_from_slice(&values[j * dim..(j + 1) * dim]);
    }
    Ok(out)
}

/// Scalar-output variant of [`dynamic_sample`] for label-space CI.
pub fn label_space_sample(
    logits: &[f64],
    labels: &[u8],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    dynamic_sample(logits, 1, labels, rng)
}

/// Loss values of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_d1: f64,
    pub l_d2: f64,
    pub l_ci: f64,
    pub l_task: f64,
    pub l_aux: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    fn zero() -> Self {
        LossBreakdown {
            l_d1: 0.0,
            l_d2: 0.0,
            l_ci: 0.0,
            l_task: 0.0,
            l_aux: 0.0,
            l_total: 0.0,
        }
    }
}

/// `L_CI = (L_D1 − L_D2)²`.
pub fn loss_ci(l_d1: f64, l_d2: f64) -> f64 {
    let d = l_d1 - l_d2;
    d * d
}

/// `L_D = L_D1 + L_D2`; the discriminators ascend this composite (the
/// training loop descends its negation).
pub fn discriminator_loss(l_d1: f64, l_d2: f64) -> f64 {
    l_d1 + l_d2
}

/// Composite encoder loss: `λ·L_CI + ρ·L_task`, plus `λ₂·L_aux` for the
/// partitioned variant. The CI term is omitted for the plain and
/// regularized targets.
pub fn encoder_loss(cfg: &TrainingConfig, l_ci: f64, l_task: f64, l_aux: f64) -> Result<f64> {
    if !(cfg.lambda_ci >= 0.0) || !(cfg.lambda_s >= 0.0) || !(cfg.task_weight >= 0.0) {
        return Err(Error::invalid("lambda_ci/lambda_s/task_weight", "must be >= 0"));
    }
    let mut total = cfg.task_weight * l_task;
    match cfg.ci_target {
        CiTarget::None | CiTarget::Regularizer => {}
        CiTarget::Partitioned => {
            total += cfg.lambda_ci * l_ci + cfg.lambda_s * l_aux;
        }
        _ => total += cfg.lambda_ci * l_ci,
    }
    Ok(total)
}

/// Soft equalized-odds penalty `R₀ + R₁`: within each label class, the
/// absolute gap between the mean soft predictions of the two groups.
/// A class missing either group contributes zero.
pub fn regularizer_penalty(soft_preds: &[f64], labels: &[bool], groups: &[u32]) -> f64 {
    let mut total = 0.0;
    for label in [false, true] {
        let mut sums: std::collections::BTreeMap<u32, (f64, usize)> = Default::default();
        for ((&p, &y), &g) in soft_preds.iter().zip(labels).zip(groups) {
            if y == label {
                let e = sums.entry(g).or_insert((0.0, 0));
                e.0 += p;
                e.1 += 1;
            }
        }
        let means: Vec<f64> = sums.values().map(|&(s, n)| s / n as f64).collect();
        if means.len() == 2 {
            total += (means[0] - means[1]).abs();
        }
    }
    total
}

/// Regularized-baseline objective `λ(R₀+R₁) + BCE(soft_preds, labels)`.
pub fn regularizer_loss(
    lambda: f64,
    soft_preds: &[f64],
    labels: &[bool],
    groups: &[u32],
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda", "must be >= 0"));
    }
    if soft_preds.len() != labels.len() || labels.len() != groups.len() {
        return Err(Error::invalid("soft_preds", "length mismatch"));
    }
    let eps = 1e-12;
    let bce = -soft_preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            if y {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / labels.len() as f64;
    Ok(lambda * regularizer_penalty(soft_preds, labels, groups) + bce)
}

/// Builds `L_D1` and `L_D2` on a graph:
/// `L_D1 = mean ln(1−D₁(u′,y)) + mean ln D₁(u,y)` and
/// `L_D2 = mean ln(1−D₂(u′,s,y)) + mean ln D₂(u,s,y)`.
/// One expectation term: `mean ln D(input)` (real side) or
/// `mean ln(1 − D(input))` (resampled side).
fn d_loss_half(
    g: &mut Graph,
    disc: &Discriminator,
    params: &[NodeId],
    u: NodeId,
    s: Option<NodeId>,
    y: NodeId,
    real: bool,
) -> NodeId {
    let mut input = u;
    if let Some(s) = s {
        input = g.concat2(input, s);
    }
    input = g.concat2(input, y);
    let p = disc.forward_graph(g, params, input);
    let term = if real {
        g.ln(p)
    } else {
        let one_minus = g.sub_from_scalar(1.0, p);
        g.ln(one_minus)
    };
    g.mean(term)
}

#[allow(clippy::too_many_arguments)]
fn build_d_losses(
    g: &mut Graph,
    d1: &Discriminator,
    d1_params: &[NodeId],
    d2: &Discriminator,
    d2_params: &[NodeId],
    u_real: NodeId,
    u_fake: NodeId,
    y: NodeId,
    s: NodeId,
) -> (NodeId, NodeId) {
    let d1_fake = d_loss_half(g, d1, d1_params, u_fake, None, y, false);
    let d1_real = d_loss_half(g, d1, d1_params, u_real, None, y, true);
    let l_d1 = g.add(d1_fake, d1_real);
    let d2_fake = d_loss_half(g, d2, d2_params, u_fake, Some(s), y, false);
    let d2_real = d_loss_half(g, d2, d2_params, u_real, Some(s), y, true);
    let l_d2 = g.add(d2_fake, d2_real);
    (l_d1, l_d2)
}

/// `L_D1` as a value: mean ln(1−D₁(u′,y)) + mean ln D₁(u,y).
/// `u_real`/`u_fake` are `n × dim` row-major, `y` the shared conditioning
/// labels.
pub fn loss_d1(
    d1: &Discriminator,
    u_real: &[f64],
    u_fake: &[f64],
    dim: usize,
    y: &[f64],
) -> Result<f64> {
    check_pair_lengths(u_real, u_fake, dim, y, d1.in_dim, dim + 1)?;
    let n = y.len();
    let mut g = Graph::new();
    let d1p = d1.register_frozen(&mut g);
    let real = g.constant(Tensor::from_vec(&[n, dim], u_real.to_vec()));
    let fake = g.constant(Tensor::from_vec(&[n, dim], u_fake.to_vec()));
    let yn = g.constant(Tensor::from_vec(&[n, 1], y.to_vec()));
    let f = d_loss_half(&mut g, d1, &d1p, fake, None, yn, false);
    let r = d_loss_half(&mut g, d1, &d1p, real, None, yn, true);
    let l = g.add(f, r);
    Ok(g.value(l).item())
}

/// `L_D2` as a value: mean ln(1−D₂(u′,s,y)) + mean ln D₂(u,s,y).
pub fn loss_d2(
    d2: &Discriminator,
    u_real: &[f64],
    u_fake: &[f64],
    dim: usize,
    s: &[f64],
    y: &[f64],
) -> Result<f64> {
    check_pair_lengths(u_real, u_fake, dim, y, d2.in_dim, dim + 2)?;
    if s.len() != y.len() {
        return Err(Error::invalid("s", "length mismatch with labels"));
    }
    let n = y.len();
    let mut g = Graph::new();
    let d2p = d2.register_frozen(&mut g);
    let real = g.constant(Tensor::from_vec(&[n, dim], u_real.to_vec()));
    let fake = g.constant(Tensor::from_vec(&[n, dim], u_fake.to_vec()));
    let yn = g.constant(Tensor::from_vec(&[n, 1], y.to_vec()));
    let sn = g.constant(Tensor::from_vec(&[n, 1], s.to_vec()));
    let f = d_loss_half(&mut g, d2, &d2p, fake, Some(sn), yn, false);
    let r = d_loss_half(&mut g, d2, &d2p, real, Some(sn), yn, true);
    let l = g.add(f, r);
    Ok(g.value(l).item())
}

fn check_pair_lengths(
    u_real: &[f64],
    u_fake: &[f64],
    dim: usize,
    y: &[f64],
    disc_in: usize,
    expected_in: usize,
) -> Result<()> {
    if y.is_empty() {
        return Err(Error::invalid("pairs", "sequences must be nonempty"));
    }
    if u_real.len() != u_fake.len() || u_real.len() != y.len() * dim {
        return Err(Error::invalid("pairs", "sequences must have equal length"));
    }
    if disc_in != expected_in {
        return Err(Error::ShapeMismatch(format!(
            "discriminator expects {disc_in} inputs, loss provides {expected_in}"
        )));
    }
    Ok(())
}

/// Per-epoch history entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_d1: f64,
    pub l_d2: f64,
    pub l_ci: f64,
    pub l_task: f64,
    pub val_bacc: f64,
    pub val_dcor2: f64,
}

/// Full training history: per-epoch means plus any warning events.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("# format_version=1\n");
        s.push_str("epoch,l_d1,l_d2,l_ci,l_task,val_bacc,val_dcor2\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.l_d1, r.l_d2, r.l_ci, r.l_task, r.val_bacc, r.val_dcor2
            ));
        }
        s
    }
}

/// Adam with bias correction; one state slot per parameter tensor.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Normalized protected attribute for discriminator conditioning and the
/// auxiliary head target: `[1,7] → [0,1]`.
pub fn normalize_sensitive(s: f64) -> f64 {
    (s - 1.0) / 6.0
}

struct BatchData {
    x: Vec<f64>,
    y: Vec<f64>,
    labels: Vec<u8>,
    s_norm: Vec<f64>,
    n: usize,
}

fn assemble_batch(data: &SynthDataset, indices: &[usize], pixel_scale: f64) -> BatchData {
    let n = indices.len();
    let mut x = Vec::with_capacity(n * IMAGE_PIXELS);
    let mut y = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut s_norm = Vec::with_capacity(n);
    for &i in indices {
        let im = &data.images[i];
        x.extend(im.pixels.as_slice().iter().map(|&p| p as f64 / pixel_scale));
        y.push(im.label as f64);
        labels.push(im.label);
        s_norm.push(normalize_sensitive(im.sigma_b));
    }
    BatchData {
        x,
        y,
        labels,
        s_norm,
        n,
    }
}

/// Extract the CI input rows (`u`) from latents/logits per target.
fn ci_rows(cfg: &TrainingConfig, latents: &[f64], logits: &[f64], n: usize) -> Vec<f64> {
    match cfg.ci_target {
        CiTarget::LabelSpace => logits.to_vec(),
        CiTarget::LatentSpace => latents.to_vec(),
        CiTarget::Partitioned => {
            let d = cfg.split_index;
            let mut out = Vec::with_capacity(n * d);
            for i in 0..n {
                out.extend_from_slice(&latents[i * LATENT_DIM..i * LATENT_DIM + d]);
            }
            out
        }
        _ => Vec::new(),
    }
}

/// Train a model under the given configuration. When `val` is present,
/// per-epoch validation metrics are recorded in the history (NaN otherwise).
/// Deterministic: identical `(cfg, data)` produce identical results bit for
/// bit, independent of thread count.
pub fn train(
    cfg: &TrainingConfig,
    data: &SynthDataset,
    val: Option<&SynthDataset>,
) -> Result<(Encoder, TrainHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("data", "training set is empty"));
    }

    let mut encoder = Encoder::init(&cfg.encoder_arch(), cfg.seed)?;
    let mut enc_opt = Adam::new(
        cfg.learning_rate,
        &encoder
            .named_params()
            .iter()
            .map(|(_, t)| t.numel())
            .collect::<Vec<_>>(),
    );

    let ci_active = cfg.ci_active();
    let u_dim = cfg.ci_input_dim();
    let mut discs = if ci_active {
        let d1 = Discriminator::init(u_dim + 1, cfg.disc_hidden, derive_seed(cfg.seed, TAG_D1))?;
        let d2 = Discriminator::init(u_dim + 2, cfg.disc_hidden, derive_seed(cfg.seed, TAG_D2))?;
        let o1 = Adam::new(cfg.learning_rate, &d1.params_sizes());
        let o2 = Adam::new(cfg.learning_rate, &d2.params_sizes());
        Some((d1, d2, o1, o2))
    } else {
        None
    };

    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut sampler_rng = stream_rng(cfg.seed, STREAM_SAMPLER);

    let n = data.len();
    let mut history = TrainHistory::default();
    let mut warned_missing_label = false;

    for epoch in 0..cfg.epochs {
        let order = batch_order(data, cfg, &mut shuffle_rng);
        let mut acc = LossBreakdown::zero();
        let mut batches = 0.0;

        for chunk in order.chunks(cfg.batch_size) {
            let batch = assemble_batch(data, chunk, cfg.pixel_scale);
            let both_labels =
                batch.labels.iter().any(|&l| l == 0) && batch.labels.iter().any(|&l| l == 1);

            let mut step = LossBreakdown::zero();
            if ci_active && both_labels {
                let (d1, d2, o1, o2) = discs.as_mut().unwrap();
                discriminator_steps(cfg, &encoder, d1, d2, o1, o2, &batch, &mut sampler_rng)?;
                step = encoder_ci_step(
                    cfg,
                    &mut encoder,
                    &mut enc_opt,
                    d1,
                    d2,
                    &batch,
                    &mut sampler_rng,
                )?;
            } else {
                if ci_active && !warned_missing_label {
                    history.warnings.push(format!(
                        "epoch {epoch}: batch without both label classes; CI term skipped"
                    ));
                    warned_missing_label = true;
                }
                step = encoder_plain_step(cfg, &mut encoder, &mut enc_opt, &batch)?;
            }
            acc.l_d1 += step.l_d1;
            acc.l_d2 += step.l_d2;
            acc.l_ci += step.l_ci;
            acc.l_task += step.l_task;
            acc.l_aux += step.l_aux;
            acc.l_total += step.l_total;
            batches += 1.0;
        }

        let (val_bacc, val_dcor2) = match val {
            Some(v) => {
                let report = evaluate(&encoder, v, cfg.s_binarization_threshold, cfg.seed)?;
                (report.bacc, report.dcor2_latent)
            }
            None => (f64::NAN, f64::NAN),
        };
        history.epochs.push(EpochRecord {
            epoch,
            l_d1: acc.l_d1 / batches,
            l_d2: acc.l_d2 / batches,
            l_ci: acc.l_ci / batches,
            l_task: acc.l_task / batches,
            val_bacc,
            val_dcor2,
        });
    }

    Ok((encoder, history))
}

fn batch_order(data: &SynthDataset, cfg: &TrainingConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let n = data.len();
    if !cfg.stratified_batches {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        return order;
    }
    // Interleave independently shuffled per-label index lists.
    let mut zeros: Vec<usize> = (0..n).filter(|&i| data.images[i].label == 0).collect();
    let mut ones: Vec<usize> = (0..n).filter(|&i| data.images[i].label == 1).collect();
    zeros.shuffle(rng);
    ones.shuffle(rng);
    let mut order = Vec::with_capacity(n);
    let mut zi = zeros.into_iter();
    let mut oi = ones.into_iter();
    loop {
        match (zi.next(), oi.next()) {
            (None, None) => break,
            (a, b) => {
                order.extend(a);
                order.extend(b);
            }
        }
    }
    order
}

#[allow(clippy::too_many_arguments)]
fn discriminator_steps(
    cfg: &TrainingConfig,
    encoder: &Encoder,
    d1: &mut Discriminator,
    d2: &mut Discriminator,
    o1: &mut Adam,
    o2: &mut Adam,
    batch: &BatchData,
    sampler_rng: &mut ChaCha8Rng,
) -> Result<()> {
    // The encoder is frozen during discriminator updates; one forward pass
    // serves all inner steps, while resampling stays fresh per step.
    let out = encoder.infer_batch(&batch.x, batch.n)?;
    let u_real = ci_rows(cfg, &out.latents, &out.logits, batch.n);
    let dim = cfg.ci_input_dim();

    for _ in 0..cfg.disc_steps_per_enc_step {
        let u_fake = dynamic_sample(&u_real, dim, &batch.labels, sampler_rng)?;
        let mut g = Graph::new();
        let d1p = d1.register(&mut g);
        let d2p = d2.register(&mut g);
        let ur = g.constant(Tensor::from_vec(&[batch.n, dim], u_real.clone()));
        let uf = g.constant(Tensor::from_vec(&[batch.n, dim], u_fake));
        let yn = g.constant(Tensor::from_vec(&[batch.n, 1], batch.y.clone()));
        let sn = g.constant(Tensor::from_vec(&[batch.n, 1], batch.s_norm.clone()));
        let (l_d1, l_d2) = build_d_losses(&mut g, d1, &d1p, d2, &d2p, ur, uf, yn, sn);
        let l_d = g.add(l_d1, l_d2);
        let objective = g.mul_scalar(l_d, -1.0);
        let grads = g.backward(objective);

        let g1: Vec<&Tensor> = d1p.iter().map(|&id| grads.wrt(id)).collect();
        o1.step(&mut d1.params_mut(), &g1);
        let g2: Vec<&Tensor> = d2p.iter().map(|&id| grads.wrt(id)).collect();
        o2.step(&mut d2.params_mut(), &g2);
    }
    Ok(())
}

fn encoder_ci_step(
    cfg: &TrainingConfig,
    encoder: &mut Encoder,
    opt: &mut Adam,
    d1: &Discriminator,
    d2: &Discriminator,
    batch: &BatchData,
    sampler_rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let params = encoder.register(&mut g);
    let x = g.constant(Tensor::from_vec(
        &[batch.n, 1, IMAGE_SIZE, IMAGE_SIZE],
        batch.x.clone(),
    ));
    let (latent, logit, aux) = encoder.forward_graph(&mut g, &params, x);

    let dim = cfg.ci_input_dim();
    let u_real = match cfg.ci_target {
        CiTarget::LabelSpace => logit,
        CiTarget::LatentSpace => latent,
        CiTarget::Partitioned => g.slice_cols(latent, 0, cfg.split_index),
        _ => unreachable!("encoder_ci_step requires a discriminator target"),
    };
    // Fresh resample of the current latents, detached from the graph.
    let u_fake_values = dynamic_sample(&g.value(u_real).data, dim, &batch.labels, sampler_rng)?;
    let u_fake = g.constant(Tensor::from_vec(&[batch.n, dim], u_fake_values));
    let yn = g.constant(Tensor::from_vec(&[batch.n, 1], batch.y.clone()));
    let sn = g.constant(Tensor::from_vec(&[batch.n, 1], batch.s_norm.clone()));

    let d1p = d1.register_frozen(&mut g);
    let d2p = d2.register_frozen(&mut g);
    let (l_d1, l_d2) = build_d_losses(&mut g, d1, &d1p, d2, &d2p, u_real, u_fake, yn, sn);
    let diff = g.sub(l_d1, l_d2);
    let l_ci = g.square(diff);
    let l_task = g.bce_logits_mean(logit, batch.y.clone());

    let ci_term = g.mul_scalar(l_ci, cfg.lambda_ci);
    let task_term = g.mul_scalar(l_task, cfg.task_weight);
    let mut total = g.add(ci_term, task_term);
    let mut l_aux_value = 0.0;
    if let Some(aux_logit) = aux {
        let aux_prob = g.sigmoid(aux_logit);
        let l_aux = g.mse_mean(aux_prob, batch.s_norm.clone());
        l_aux_value = g.value(l_aux).item();
        let aux_term = g.mul_scalar(l_aux, cfg.lambda_s);
        total = g.add(total, aux_term);
    }

    let grads = g.backward(total);
    let gp: Vec<&Tensor> = params.iter().map(|&id| grads.wrt(id)).collect();
    opt.step(&mut encoder.params_mut(), &gp);

    Ok(LossBreakdown {
        l_d1: g.value(l_d1).item(),
        l_d2: g.value(l_d2).item(),
        l_ci: g.value(l_ci).item(),
        l_task: g.value(l_task).item(),
        l_aux: l_aux_value,
        l_total: g.value(total).item(),
    })
}

/// Task-only step, optionally with the soft equalized-odds penalty.
/// Vanilla runs and λ=0 CI runs share this exact code path.
fn encoder_plain_step(
    cfg: &TrainingConfig,
    encoder: &mut Encoder,
    opt: &mut Adam,
    batch: &BatchData,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let params = encoder.register(&mut g);
    let x = g.constant(Tensor::from_vec(
        &[batch.n, 1, IMAGE_SIZE, IMAGE_SIZE],
        batch.x.clone(),
    ));
    let (_latent, logit, aux) = encoder.forward_graph(&mut g, &params, x);
    let l_task = g.bce_logits_mean(logit, batch.y.clone());

    let total = if cfg.ci_target == CiTarget::Regularizer {
        // λ(R0+R1) + BCE on sigmoid outputs, groups from binarized s.
        let probs = g.sigmoid(logit);
        let threshold_norm = normalize_sensitive(cfg.s_binarization_threshold);
        let mut penalty: Option<NodeId> = None;
        for label in [0u8, 1u8] {
            let g0: Vec<usize> = (0..batch.n)
                .filter(|&i| batch.labels[i] == label && batch.s_norm[i] < threshold_norm)
                .collect();
            let g1: Vec<usize> = (0..batch.n)
                .filter(|&i| batch.labels[i] == label && batch.s_norm[i] >= threshold_norm)
                .collect();
            if g0.is_empty() || g1.is_empty() {
                continue;
            }
            let m0 = {
                let rows = g.gather_rows(probs, g0);
                g.mean(rows)
            };
            let m1 = {
                let rows = g.gather_rows(probs, g1);
                g.mean(rows)
            };
            let d = g.sub(m0, m1);
            let r = g.abs(d);
            penalty = Some(match penalty {
                Some(p) => g.add(p, r),
                None => r,
            });
        }
        match penalty {
            Some(p) => {
                let scaled = g.mul_scalar(p, cfg.lambda_ci);
                g.add(scaled, l_task)
            }
            None => l_task,
        }
    } else {
        g.mul_scalar(l_task, cfg.task_weight)
    };

    let grads = g.backward(total);
    let gp: Vec<&Tensor> = params.iter().map(|&id| grads.wrt(id)).collect();
    opt.step(&mut encoder.params_mut(), &gp);

    let mut step = LossBreakdown::zero();
    step.l_task = g.value(l_task).item();
    step.l_total = g.value(total).item();
    if aux.is_some() {
        step.l_aux = 0.0;
    }
    Ok(step)
}

/// Evaluate a trained encoder on a dataset: balanced accuracy, dcor² of the
/// protected attribute against latents and against predicted probabilities,
/// equalized-odds gap, and per-group accuracies.
pub fn evaluate(
    encoder: &Encoder,
    data: &SynthDataset,
    s_threshold: f64,
    seed: u64,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::invalid("data", "evaluation set is empty"));
    }
    let n = data.len();
    let mut latents = Vec::with_capacity(n * LATENT_DIM);
    let mut logits = Vec::with_capacity(n);
    for chunk in (0..n).collect::<Vec<_>>().chunks(512) {
        let batch = assemble_batch(data, chunk, encoder.arch.pixel_scale);
        let out = encoder.infer_batch(&batch.x, batch.n)?;
        latents.extend_from_slice(&out.latents);
        logits.extend_from_slice(&out.logits);
    }

    let labels: Vec<bool> = data.images.iter().map(|im| im.label == 1).collect();
    let preds: Vec<bool> = logits.iter().map(|&z| z > 0.0).collect();
    let groups: Vec<u32> = data
        .images
        .iter()
        .map(|im| (im.sigma_b >= s_threshold) as u32)
        .collect();
    let s_raw: Vec<f64> = data.images.iter().map(|im| im.sigma_b).collect();
    let probs: Vec<f64> = logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();

    let eval_seed = derive_seed(seed, STREAM_EVAL);
    Ok(MetricsReport {
        bacc: fairmetrics::balanced_accuracy(&preds, &labels)?,
        dcor2_latent: fairmetrics::dcor2_subsampled(
            &s_raw,
            1,
            &latents,
            LATENT_DIM,
            DCOR_MAX_POINTS,
            eval_seed,
        )?,
        dcor2_output: fairmetrics::dcor2_subsampled(
            &s_raw,
            1,
            &probs,
            1,
            DCOR_MAX_POINTS,
            eval_seed,
        )?,
        eo_gap: fairmetrics::eo_gap(&preds, &labels, &groups)?,
        per_group_acc: fairmetrics::per_group_accuracy(&preds, &labels, &groups)?,
        n_eval: n,
    })
}

/// dcor² of the protected attribute against the two latent slices of a
/// partitioned encoder: `(invariant slice [0,split), variant slice [split,10))`.
pub fn slice_dcor2s(
    encoder: &Encoder,
    data: &SynthDataset,
    split_index: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if !(0 < split_index && split_index < LATENT_DIM) {
        return Err(Error::invalid("split_index", "must lie strictly between 0 and 10"));
    }
    let n = data.len();
    let mut latents = Vec::with_capacity(n * LATENT_DIM);
    for chunk in (0..n).collect::<Vec<_>>().chunks(512) {
        let batch = assemble_batch(data, chunk, encoder.arch.pixel_scale);
        let out = encoder.infer_batch(&batch.x, batch.n)?;
        latents.extend_from_slice(&out.latents);
    }
    let s_raw: Vec<f64> = data.images.iter().map(|im| im.sigma_b).collect();
    let (inv_w, var_w) = (split_index, LATENT_DIM - split_index);
    let mut inv = Vec::with_capacity(n * inv_w);
    let mut var = Vec::with_capacity(n * var_w);
    for i in 0..n {
        inv.extend_from_slice(&latents[i * LATENT_DIM..i * LATENT_DIM + split_index]);
        var.extend_from_slice(&latents[i * LATENT_DIM + split_index..(i + 1) * LATENT_DIM]);
    }
    let eval_seed = derive_seed(seed, STREAM_EVAL);
    let d_inv = fairmetrics::dcor2_subsampled(&s_raw, 1, &inv, inv_w, DCOR_MAX_POINTS, eval_seed)?;
    let d_var = fairmetrics::dcor2_subsampled(&s_raw, 1, &var, var_w, DCOR_MAX_POINTS, eval_seed)?;
    Ok((d_inv, d_var))
}

impl Discriminator {
    fn params_sizes(&self) -> Vec<usize> {
        vec![
            self.w1.numel(),
            self.b1.numel(),
            self.w2.numel(),
            self.b2.numel(),
            self.w3.numel(),
            self.b3.numel(),
        ]
    }
}
