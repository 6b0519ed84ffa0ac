//! Orchestration: supervised source training, source-free adaptation of new
//! normalisation branches, inference with explicit or automatic branch
//! selection, and evaluation against labels.
//!
//! Networks are trained in `f32`; every loss and its gradient is computed in
//! `f64` on the logits and cast back for the backward pass.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, batches, crop, BatchMode, CropMode, Dataset, ImageSet, SplitTag};
use crate::distmath::{self, RatingDistribution, RatingScale, DEFAULT_SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::losses::{self, AdaptWeights, MeanPenalty, SourceLossOptions};
use crate::metrics::{self, MetricReport, MIN_FIT_SAMPLES};
use crate::nn::{
    self, Architecture, DomainBranch, DomainId, Matrix, Network, Phase, Tensor4, DEFAULT_EMA_ALPHA,
};
use crate::optim::{adam_step, AdamConfig, AdamState, ADAPT_LR, SOURCE_LR};

pub const DEFAULT_ADAPT_STEPS: usize = 1000;
/// Adaptation steps per checkpoint candidate.
pub const CHECKPOINT_WINDOW: usize = 50;

const TAG_INIT: u64 = 0x696e_6974;
const TAG_SHUFFLE: u64 = 0x7368_7566;
const TAG_CROP: u64 = 0x6372_6f70;

fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    data::splitmix(data::splitmix(seed ^ tag) ^ index)
}

fn domain_seed(seed: u64, domain: &DomainId) -> u64 {
    let h = domain
        .as_str()
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        });
    seed ^ h
}

/// How a new branch's running statistics start out before adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnStatsPolicy {
    /// Keep the copied source statistics and let the EMA move them.
    #[default]
    EmaFromSource,
    /// Discard them and re-estimate with one pass over the target images.
    ResetThenEstimate,
}

impl FromStr for BnStatsPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ema-from-source" => Ok(Self::EmaFromSource),
            "reset-then-estimate" => Ok(Self::ResetThenEstimate),
            other => Err(Error::Config(format!("unknown bn stats policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Batch size of evaluation passes; predictions do not depend on it.
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    /// Source epochs without a validation improvement before stopping.
    pub patience: usize,
    pub adapt_steps: usize,
    pub checkpoint_window: usize,
    pub seed: u64,
    pub source_lr: f64,
    pub adapt_lr: f64,
    pub scale: RatingScale,
    pub sigma_floor: f64,
    pub mean_penalty: MeanPenalty,
    pub ema_alpha: f64,
    pub bn_policy: BnStatsPolicy,
    pub weights: BTreeMap<DomainId, AdaptWeights>,
    /// Crop size `(h, w)`; random for training, centred for evaluation.
    /// `None` feeds full images.
    pub crop: Option<(usize, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            eval_batch_size: 64,
            max_epochs: 30,
            patience: 5,
            adapt_steps: DEFAULT_ADAPT_STEPS,
            checkpoint_window: CHECKPOINT_WINDOW,
            seed: 0,
            source_lr: SOURCE_LR,
            adapt_lr: ADAPT_LR,
            scale: RatingScale::default(),
            sigma_floor: DEFAULT_SIGMA_FLOOR,
            mean_penalty: MeanPenalty::Squared,
            ema_alpha: DEFAULT_EMA_ALPHA,
            bn_policy: BnStatsPolicy::EmaFromSource,
            weights: BTreeMap::new(),
            crop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.checkpoint_window == 0 {
            return bad("checkpoint window must be at least 1".into());
        }
        for (name, lr) in [("source_lr", self.source_lr), ("adapt_lr", self.adapt_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be non-negative, got {lr}"));
            }
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return bad(format!(
                "sigma_floor must be positive, got {}",
                self.sigma_floor
            ));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return bad(format!(
                "ema_alpha must lie in (0, 1], got {}",
                self.ema_alpha
            ));
        }
        if self.crop.is_some_and(|(h, w)| h == 0 || w == 0) {
            return bad("crop size must be positive".into());
        }
        for w in self.weights.values() {
            w.validate()?;
        }
        Ok(())
    }

    /// Loss weights registered for `domain`.
    pub fn weights_for(&self, domain: &DomainId) -> Result<AdaptWeights> {
        self.weights.get(domain).copied().ok_or_else(|| {
            Error::Config(format!("no loss weights registered for domain `{domain}`"))
        })
    }
}

/// Loss decomposition of one optimisation step for one domain. The adaptation
/// terms are absent for source training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub domain: DomainId,
    pub l_ent: Option<f64>,
    pub l_div: Option<f64>,
    pub l_gau: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub val_srocc: f64,
    pub val_rmse: f64,
}

/// A checkpoint candidate: a source epoch scored by validation SROCC, or an
/// adaptation window scored by its mean total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub id: usize,
    pub step: u64,
    pub scope: String,
    pub criterion: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
}

/// Nine significant digits.
pub fn fmt_real(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.8e}")
    } else {
        x.to_string()
    }
}

fn write_header(w: &mut impl io::Write, header: &[(&str, String)]) -> io::Result<()> {
    for (k, v) in header {
        writeln!(w, "# {k}={v}")?;
    }
    Ok(())
}

impl RunLog {
    pub fn last_step(&self) -> u64 {
        self.steps.last().map_or(0, |s| s.step)
    }

    /// Appends `other`, shifting its steps and checkpoint ids past ours.
    pub fn extend(&mut self, other: RunLog) {
        let (offset, ids) = (self.last_step(), self.checkpoints.len());
        self.steps.extend(other.steps.into_iter().map(|mut s| {
            s.step += offset;
            s
        }));
        self.epochs.extend(other.epochs.into_iter().map(|mut e| {
            e.step += offset;
            e
        }));
        self.checkpoints
            .extend(other.checkpoints.into_iter().map(|mut c| {
                c.step += offset;
                c.id += ids;
                c
            }));
    }

    pub fn selected(&self) -> impl Iterator<Item = &CheckpointRecord> {
        self.checkpoints.iter().filter(|c| c.selected)
    }

    /// Per-step losses as CSV (`step,domain,l_ent,l_div,l_gau,total`), preceded
    /// by `# key=value` comment lines.
    pub fn write_steps_csv(&self, mut w: impl io::Write, header: &[(&str, String)]) -> Result<()> {
        write_header(&mut w, header).map_err(|e| Error::Data(e.to_string()))?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "domain", "l_ent", "l_div", "l_gau", "total"])?;
        let opt = |v: Option<f64>| v.map(fmt_real).unwrap_or_default();
        for s in &self.steps {
            out.write_record([
                s.step.to_string(),
                s.domain.to_string(),
                opt(s.l_ent),
                opt(s.l_div),
                opt(s.l_gau),
                fmt_real(s.total),
            ])?;
        }
        out.flush().map_err(|e| Error::Data(e.to_string()))
    }

    pub fn write_epochs_csv(&self, w: impl io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "step", "val_srocc", "val_rmse"])?;
        for e in &self.epochs {
            out.write_record([
                e.epoch.to_string(),
                e.step.to_string(),
                fmt_real(e.val_srocc),
                fmt_real(e.val_rmse),
            ])?;
        }
        out.flush().map_err(|e| Error::Data(e.to_string()))
    }

    pub fn write_checkpoints_csv(&self, w: impl io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["id", "step", "scope", "criterion", "selected"])?;
        for c in &self.checkpoints {
            out.write_record([
                c.id.to_string(),
                c.step.to_string(),
                c.scope.clone(),
                fmt_real(c.criterion),
                (c.selected as u8).to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::Data(e.to_string()))
    }
}

/// Stacks the images at `idx`, cropping each when a crop size is configured.
fn batch_tensor(
    images: &ImageSet,
    idx: &[usize],
    size: Option<(usize, usize)>,
    mode: CropMode,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor4<f32>> {
    let [c, h, w] = images.chw();
    match size {
        Some(s) if s != (h, w) => {
            let mut data = Vec::with_capacity(idx.len() * c * s.0 * s.1);
            for &i in idx {
                data.extend(crop(images.image(i), [c, h, w], s, mode, rng)?);
            }
            Tensor4::new([idx.len(), c, s.0, s.1], data)
        }
        _ => images.gather(idx),
    }
}

/// Evaluation batches over `images`, centre-cropped, in order.
fn eval_batches<'a>(
    images: &'a ImageSet,
    cfg: &'a TrainConfig,
) -> Result<impl Iterator<Item = Result<Tensor4<f32>>> + 'a> {
    let order = batches(images.len(), cfg.eval_batch_size, false, 0, BatchMode::Eval)?;
    // Centre crops draw nothing from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(order
        .into_iter()
        .map(move |idx| batch_tensor(images, &idx, cfg.crop, CropMode::Center, &mut rng)))
}

/// Which branch normalises an inference batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BranchChoice {
    Domain(DomainId),
    /// Pick the branch whose first-layer running statistics best match the
    /// input.
    Auto,
}

impl FromStr for BranchChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "" => Err(Error::Config("empty domain name".into())),
            "auto" => Ok(Self::Auto),
            name => Ok(Self::Domain(DomainId::new(name))),
        }
    }
}

impl fmt::Display for BranchChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Domain(d) => d.fmt(f),
            Self::Auto => f.write_str("auto"),
        }
    }
}

/// Statistics-matching distance of every initialised branch to the given
/// first-normalisation-layer input means:
/// `sum_c (mean_c - running_mean_c)^2 / (running_var_c + eps)`.
pub fn branch_distances(net: &Network<f32>, means: &[f64]) -> Vec<(DomainId, f64)> {
    net.domains()
        .filter_map(|d| {
            let br = net.branch(d)?;
            let first = br.layers.first().filter(|l| l.initialized)?;
            let eps = br.epsilon as f64;
            let dist = means
                .iter()
                .zip(&first.running_mean)
                .zip(&first.running_var)
                .map(|((m, rm), rv)| (m - *rm as f64).powi(2) / (*rv as f64 + eps))
                .sum();
            Some((d.clone(), dist))
        })
        .collect()
}

fn closest_branch(net: &Network<f32>, means: &[f64]) -> Result<DomainId> {
    branch_distances(net, means)
        .into_iter()
        .fold(None, |best: Option<(DomainId, f64)>, (d, v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((d, v)),
        })
        .map(|(d, _)| d)
        .ok_or_else(|| Error::MissingDomain("no initialised branch to select from".into()))
}

/// Branch chosen by automatic selection for one batch.
pub fn select_branch(net: &Network<f32>, x: &Tensor4<f32>) -> Result<DomainId> {
    closest_branch(net, &net.first_norm_input_means(x)?)
}

fn resolve(
    net: &Network<f32>,
    choice: &BranchChoice,
    means: impl FnOnce() -> Result<Vec<f64>>,
) -> Result<DomainId> {
    match choice {
        BranchChoice::Domain(d) => {
            if net.branch(d).is_none() {
                return Err(Error::MissingDomain(d.to_string()));
            }
            Ok(d.clone())
        }
        BranchChoice::Auto => closest_branch(net, &means()?),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// The branch that produced the predictions.
    pub branch: DomainId,
    pub distributions: Vec<RatingDistribution>,
    /// Expected rating of each distribution.
    pub scores: Vec<f64>,
}

fn distributions_to_scores(dists: &[RatingDistribution], scale: &RatingScale) -> Vec<f64> {
    dists
        .iter()
        .map(|q| distmath::dist_mean(q, scale))
        .collect()
}

fn check_levels(net: &Network<f32>, scale: &RatingScale) -> Result<()> {
    if net.architecture().levels != scale.count() {
        return Err(Error::Shape(format!(
            "network predicts {} levels, scale has {}",
            net.architecture().levels,
            scale.count()
        )));
    }
    Ok(())
}

/// Evaluation-mode prediction for one batch.
pub fn infer(
    net: &Network<f32>,
    x: &Tensor4<f32>,
    choice: &BranchChoice,
    scale: &RatingScale,
) -> Result<Prediction> {
    check_levels(net, scale)?;
    let branch = resolve(net, choice, || net.first_norm_input_means(x))?;
    let distributions = nn::softmax(&net.forward_eval(x, &branch)?);
    let scores = distributions_to_scores(&distributions, scale);
    Ok(Prediction {
        branch,
        distributions,
        scores,
    })
}

/// Prediction over a whole image set in evaluation batches. Automatic
/// selection is made once from the statistics of the entire set.
pub fn predict(
    net: &Network<f32>,
    images: &ImageSet,
    choice: &BranchChoice,
    cfg: &TrainConfig,
) -> Result<Prediction> {
    check_levels(net, &cfg.scale)?;
    let branch = resolve(net, choice, || {
        let mut acc = vec![0.0; net.architecture().blocks[0]];
        for x in eval_batches(images, cfg)? {
            let x = x?;
            let w = x.batch() as f64 / images.len() as f64;
            for (a, m) in acc.iter_mut().zip(net.first_norm_input_means(&x)?) {
                *a += w * m;
            }
        }
        Ok(acc)
    })?;
    let mut distributions = Vec::with_capacity(images.len());
    for x in eval_batches(images, cfg)? {
        distributions.extend(nn::softmax(&net.forward_eval(&x?, &branch)?));
    }
    let scores = distributions_to_scores(&distributions, &cfg.scale);
    Ok(Prediction {
        branch,
        distributions,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub branch: DomainId,
    pub report: MetricReport,
}

/// SROCC, PLCC and RMSE of the predicted scores against the label means.
pub fn evaluate(
    net: &Network<f32>,
    dataset: &Dataset,
    choice: &BranchChoice,
    cfg: &TrainConfig,
) -> Result<Evaluation> {
    if dataset.len() < MIN_FIT_SAMPLES {
        return Err(Error::Metric(format!(
            "evaluation needs at least {MIN_FIT_SAMPLES} images, got {}",
            dataset.len()
        )));
    }
    let pred = predict(net, &dataset.images, choice, cfg)?;
    Ok(Evaluation {
        report: metrics::evaluate(&pred.scores, &dataset.means())?,
        branch: pred.branch,
    })
}

/// Validation SROCC; constant predictions count as NaN.
fn validation_scores(
    net: &Network<f32>,
    val: &Dataset,
    domain: &DomainId,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let pred = predict(net, &val.images, &BranchChoice::Domain(domain.clone()), cfg)?;
    let gt = val.means();
    let srocc = match metrics::srocc(&pred.scores, &gt) {
        Ok(r) => r,
        Err(Error::UndefinedCorrelation(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok((srocc, metrics::rmse(&pred.scores, &gt)?))
}

/// Trains a fresh network on the `train` split of a labelled dataset and
/// returns the epoch snapshot with the highest SROCC on the `val` split.
pub fn train_source(
    arch: &Architecture,
    source: &DomainId,
    dataset: &Dataset,
    tags: &[SplitTag],
    cfg: &TrainConfig,
) -> Result<(Network<f32>, RunLog)> {
    cfg.validate()?;
    if tags.len() != dataset.len() {
        return Err(Error::Data(format!(
            "{} split tags for {} images",
            tags.len(),
            dataset.len()
        )));
    }
    let train = dataset.select(tags, SplitTag::Train);
    let val = dataset.select(tags, SplitTag::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(
            "source training needs non-empty train and val splits".into(),
        ));
    }
    if train.len() < cfg.batch_size {
        return Err(Error::Data(format!(
            "train split has {} images, fewer than one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }

    let mut net = Network::<f32>::new(
        arch.clone(),
        source.clone(),
        derive_seed(cfg.seed, TAG_INIT, 0),
    )?;
    check_levels(&net, &cfg.scale)?;
    net.branch_mut(source)
        .expect("source branch exists")
        .ema_alpha = cfg.ema_alpha as f32;
    let mask = net.freeze_mask(Phase::SourceTrain, source)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.source_lr), &mask, &net)?;
    let opts = SourceLossOptions {
        sigma_floor: cfg.sigma_floor,
        mean_penalty: cfg.mean_penalty,
    };

    let mut log = RunLog::default();
    let mut best: Option<(f64, usize, Network<f32>)> = None;
    let mut stale = 0;
    let mut step = 0u64;
    for epoch in 0..cfg.max_epochs {
        let order = batches(
            train.len(),
            cfg.batch_size,
            true,
            derive_seed(cfg.seed, TAG_SHUFFLE, epoch as u64),
            BatchMode::Train,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_CROP, epoch as u64));
        for idx in order {
            let x = batch_tensor(&train.images, &idx, cfg.crop, CropMode::Random, &mut rng)?;
            let labels: Vec<_> = idx.iter().map(|i| train.labels[*i]).collect();
            let (logits, trace) = net.forward_train(&x, source)?;
            let loss = losses::source_loss(&logits.cast(), &labels, &cfg.scale, &opts)?;
            let grads = net.backward_masked(&trace, &loss.grad_logits.cast(), &mask)?;
            adam_step(&mut net, grads.iter(), &mask, &mut adam)?;
            step += 1;
            log.steps.push(StepRecord {
                step,
                domain: source.clone(),
                l_ent: None,
                l_div: None,
                l_gau: None,
                total: loss.value,
            });
        }

        let (val_srocc, val_rmse) = validation_scores(&net, &val, source, cfg)?;
        log.epochs.push(EpochRecord {
            epoch,
            step,
            val_srocc,
            val_rmse,
        });
        let score = if val_srocc.is_nan() {
            f64::NEG_INFINITY
        } else {
            val_srocc
        };
        log.checkpoints.push(CheckpointRecord {
            id: epoch,
            step,
            scope: source.to_string(),
            criterion: val_srocc,
            selected: false,
        });
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, net.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    match best {
        Some((_, epoch, snapshot)) => {
            log.checkpoints[epoch].selected = true;
            Ok((snapshot, log))
        }
        None => Ok((net, log)),
    }
}

/// An unlabelled target domain to adapt to.
#[derive(Debug, Clone, Copy)]
pub struct AdaptTarget<'a> {
    pub domain: &'a DomainId,
    pub images: &'a ImageSet,
}

/// Per-target adaptation state: trainable mask, optimiser and batch stream.
struct TargetRun<'a> {
    domain: DomainId,
    images: &'a ImageSet,
    mask: nn::Mask,
    adam: AdamState,
    seed: u64,
    epoch: u64,
    queue: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl TargetRun<'_> {
    fn next_batch(&mut self, cfg: &TrainConfig) -> Result<Tensor4<f32>> {
        if self.queue.is_empty() {
            let mut order = batches(
                self.images.len(),
                cfg.batch_size,
                true,
                derive_seed(self.seed, TAG_SHUFFLE, self.epoch),
                BatchMode::Train,
            )?;
            order.reverse();
            self.queue = order;
            self.epoch += 1;
        }
        let idx = self.queue.pop().expect("a full batch exists");
        batch_tensor(self.images, &idx, cfg.crop, CropMode::Random, &mut self.rng)
    }
}

fn check_targets(
    net: &Network<f32>,
    source: &DomainId,
    targets: &[AdaptTarget],
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    check_levels(net, &cfg.scale)?;
    if targets.is_empty() {
        return Err(Error::InvalidArgument(
            "adaptation needs at least one target".into(),
        ));
    }
    if net
        .branch(source)
        .is_none_or(|b| b.layers.iter().any(|l| !l.initialized))
    {
        return Err(Error::UninitializedStatistics(format!(
            "source branch `{source}` is not trained"
        )));
    }
    for (i, t) in targets.iter().enumerate() {
        cfg.weights_for(t.domain)?;
        if net.branch(t.domain).is_some() || targets[..i].iter().any(|o| o.domain == t.domain) {
            return Err(Error::DomainExists(t.domain.to_string()));
        }
        if t.images.len() < cfg.batch_size {
            return Err(Error::Data(format!(
                "target `{}` has {} images, fewer than one batch of {}",
                t.domain,
                t.images.len(),
                cfg.batch_size
            )));
        }
    }
    Ok(())
}

/// Source-free adaptation to one or more targets at once.
///
/// Each target gets a copy of the `source` branch; only that copy's affine
/// parameters are optimised, and its running statistics follow the target
/// batches. Every step draws one batch per target and minimises the mean of
/// the per-target weighted objectives. The returned network carries, for all
/// targets jointly, the branches at the end of the checkpoint window with the
/// lowest mean total loss. Shared weights and all other branches are left
/// bit-identical.
pub fn adapt(
    net: &Network<f32>,
    source: &DomainId,
    targets: &[AdaptTarget],
    cfg: &TrainConfig,
) -> Result<(Network<f32>, RunLog)> {
    check_targets(net, source, targets, cfg)?;
    let mut net = net.clone();
    let mut runs = Vec::with_capacity(targets.len());
    for t in targets {
        net.add_domain_branch(t.domain.clone(), source)?;
        net.branch_mut(t.domain)
            .expect("branch just added")
            .ema_alpha = cfg.ema_alpha as f32;
        if cfg.bn_policy == BnStatsPolicy::ResetThenEstimate {
            net.reset_branch_statistics(t.domain)?;
            for x in eval_batches(t.images, cfg)? {
                net.forward_train(&x?, t.domain)?;
            }
        }
        let mask = net.freeze_mask(Phase::Adapt, t.domain)?;
        let adam = AdamState::new(AdamConfig::with_lr(cfg.adapt_lr), &mask, &net)?;
        let seed = domain_seed(cfg.seed, t.domain);
        runs.push(TargetRun {
            domain: t.domain.clone(),
            images: t.images,
            mask,
            adam,
            seed,
            epoch: 0,
            queue: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_CROP, 0)),
        });
    }
    let scope = runs
        .iter()
        .map(|r| r.domain.as_str())
        .collect::<Vec<_>>()
        .join("+");

    let mut log = RunLog::default();
    let mut best: Option<(f64, usize, Vec<DomainBranch<f32>>)> = None;
    let (mut window_sum, mut window_len) = (0.0, 0usize);
    for step in 1..=cfg.adapt_steps as u64 {
        let mut logits = Vec::with_capacity(runs.len());
        let mut traces = Vec::with_capacity(runs.len());
        for r in &mut runs {
            let x = r.next_batch(cfg)?;
            let (z, trace) = net.forward_train(&x, &r.domain)?;
            logits.push(z.cast::<f64>());
            traces.push(trace);
        }
        let pairs: Vec<(DomainId, &Matrix<f64>)> =
            runs.iter().map(|r| r.domain.clone()).zip(&logits).collect();
        let loss =
            losses::total_adaptation_loss(&pairs, &cfg.weights, &cfg.scale, cfg.sigma_floor)?;
        let mut grads = Vec::with_capacity(runs.len());
        for ((r, trace), d) in runs.iter().zip(&traces).zip(&loss.per_domain) {
            grads.push(net.backward_masked(trace, &d.grad_logits.cast(), &r.mask)?);
        }
        for (r, g) in runs.iter_mut().zip(&grads) {
            adam_step(&mut net, g.iter(), &r.mask, &mut r.adam)?;
        }
        for d in &loss.per_domain {
            log.steps.push(StepRecord {
                step,
                domain: d.domain.clone(),
                l_ent: Some(d.entropy),
                l_div: Some(d.diversity),
                l_gau: Some(d.gaussian),
                total: d.combined,
            });
        }

        window_sum += loss.total;
        window_len += 1;
        if step % cfg.checkpoint_window as u64 == 0 || step == cfg.adapt_steps as u64 {
            let mean = window_sum / window_len as f64;
            let id = log.checkpoints.len();
            log.checkpoints.push(CheckpointRecord {
                id,
                step,
                scope: scope.clone(),
                criterion: mean,
                selected: false,
            });
            if best.as_ref().is_none_or(|(b, _, _)| mean < *b) {
                let snapshot = runs
                    .iter()
                    .map(|r| net.branch(&r.domain).expect("target branch").clone())
                    .collect();
                best = Some((mean, id, snapshot));
            }
            (window_sum, window_len) = (0.0, 0);
        }
    }

    if let Some((_, id, snapshot)) = best {
        log.checkpoints[id].selected = true;
        for (r, branch) in runs.iter().zip(snapshot) {
            net.set_branch(&r.domain, branch)?;
        }
    }
    Ok((net, log))
}

/// Adapts to each target in turn, one [`adapt`] call per target. Branches of
/// earlier targets are never touched by later ones.
pub fn adapt_continual(
    net: &Network<f32>,
    source: &DomainId,
    targets: &[AdaptTarget],
    cfg: &TrainConfig,
) -> Result<(Network<f32>, RunLog)> {
    check_targets(net, source, targets, cfg)?;
    let mut net = net.clone();
    let mut log = RunLog::default();
    for t in targets {
        let (next, part) = adapt(&net, source, std::slice::from_ref(t), cfg)?;
        net = next;
        log.extend(part);
    }
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain, split, DomainShift, SplitRatios, SyntheticDomainSpec};

    fn tiny_arch() -> Architecture {
        Architecture {
            in_channels: 3,
            blocks: vec![4],
            hidden: 8,
            levels: 5,
        }
    }

    fn spec(seed: u64) -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            seed,
            height: 8,
            width: 8,
            content_groups: 20,
            ..SyntheticDomainSpec::default()
        }
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            eval_batch_size: 16,
            max_epochs: 3,
            patience: 2,
            adapt_steps: 12,
            checkpoint_window: 5,
            source_lr: 1e-3,
            adapt_lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn trained() -> (Network<f32>, TrainConfig) {
        let ds = generate_domain(&spec(1), 80).unwrap();
        let tags = split(ds.len(), None, SplitRatios::default(), 3).unwrap();
        let (net, _) = train_source(&tiny_arch(), &"src".into(), &ds, &tags, &quick_cfg()).unwrap();
        (net, quick_cfg())
    }

    fn shifted(seed: u64, a: f64, b: f64) -> ImageSet {
        let s = SyntheticDomainSpec {
            shift: Some(DomainShift {
                scale: vec![a; 3],
                offset: vec![b; 3],
            }),
            ..spec(seed)
        };
        generate_domain(&s, 40).unwrap().images
    }

    #[test]
    fn source_training_is_deterministic() {
        let ds = generate_domain(&spec(1), 80).unwrap();
        let tags = split(ds.len(), None, SplitRatios::default(), 3).unwrap();
        let cfg = quick_cfg();
        let (a, la) = train_source(&tiny_arch(), &"src".into(), &ds, &tags, &cfg).unwrap();
        let (b, lb) = train_source(&tiny_arch(), &"src".into(), &ds, &tags, &cfg).unwrap();
        assert_eq!(a.fingerprint(&[]), b.fingerprint(&[]));
        assert_eq!(la, lb);
        assert_eq!(la.selected().count(), 1);
        let steps: Vec<u64> = la.steps.iter().map(|s| s.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn best_epoch_replays_on_validation() {
        let ds = generate_domain(&spec(1), 80).unwrap();
        let tags = split(ds.len(), None, SplitRatios::default(), 3).unwrap();
        let cfg = quick_cfg();
        let (net, log) = train_source(&tiny_arch(), &"src".into(), &ds, &tags, &cfg).unwrap();
        let chosen = log.selected().next().unwrap();
        let val = ds.select(&tags, SplitTag::Val);
        let (srocc, _) = validation_scores(&net, &val, &"src".into(), &cfg).unwrap();
        assert_eq!(srocc.to_bits(), chosen.criterion.to_bits());
        for e in &log.epochs {
            assert!(chosen.criterion >= e.val_srocc || e.val_srocc.is_nan());
        }
    }

    #[test]
    fn empty_split_is_a_data_error() {
        let ds = generate_domain(&spec(1), 20).unwrap();
        let tags = vec![SplitTag::Train; 20];
        let err = train_source(&tiny_arch(), &"src".into(), &ds, &tags, &quick_cfg()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn adapt_requires_weights() {
        let (net, cfg) = trained();
        let images = shifted(5, 0.7, 0.2);
        let t = AdaptTarget {
            domain: &"tgt".into(),
            images: &images,
        };
        assert!(matches!(
            adapt(&net, &"src".into(), &[t], &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn adapt_freezes_everything_else_and_selects_lowest_window() {
        let (net, mut cfg) = trained();
        let tgt = DomainId::new("tgt");
        cfg.weights.insert(tgt.clone(), AdaptWeights::default());
        let images = shifted(5, 0.7, 0.2);
        let before = net.fingerprint(&[]);
        let (out, log) = adapt(
            &net,
            &"src".into(),
            &[AdaptTarget {
                domain: &tgt,
                images: &images,
            }],
            &cfg,
        )
        .unwrap();
        assert_eq!(out.fingerprint(std::slice::from_ref(&tgt)), before);
        assert_ne!(out.fingerprint(&[]), out.fingerprint(&[tgt]));
        let chosen = log.selected().next().unwrap();
        assert!(log
            .checkpoints
            .iter()
            .all(|c| chosen.criterion <= c.criterion));
        assert_eq!(log.checkpoints.len(), 3);
        assert_eq!(log.steps.len(), 12);
    }

    #[test]
    fn continual_with_one_target_equals_adapt() {
        let (net, mut cfg) = trained();
        let tgt = DomainId::new("tgt");
        cfg.weights.insert(tgt.clone(), AdaptWeights::default());
        let images = shifted(5, 0.7, 0.2);
        let t = [AdaptTarget {
            domain: &tgt,
            images: &images,
        }];
        let (a, la) = adapt(&net, &"src".into(), &t, &cfg).unwrap();
        let (b, lb) = adapt_continual(&net, &"src".into(), &t, &cfg).unwrap();
        assert_eq!(a.fingerprint(&[]), b.fingerprint(&[]));
        assert_eq!(la, lb);
    }

    #[test]
    fn continual_branches_do_not_depend_on_order() {
        let (net, mut cfg) = trained();
        let (d1, d2) = (DomainId::new("a"), DomainId::new("b"));
        for d in [&d1, &d2] {
            cfg.weights.insert(d.clone(), AdaptWeights::default());
        }
        let (i1, i2) = (shifted(5, 0.7, 0.2), shifted(6, 1.3, -0.2));
        let t1 = AdaptTarget {
            domain: &d1,
            images: &i1,
        };
        let t2 = AdaptTarget {
            domain: &d2,
            images: &i2,
        };
        let (x, _) = adapt_continual(&net, &"src".into(), &[t1, t2], &cfg).unwrap();
        let (y, _) = adapt_continual(&net, &"src".into(), &[t2, t1], &cfg).unwrap();
        assert_eq!(x.branch(&d1), y.branch(&d1));
        assert_eq!(x.branch(&d2), y.branch(&d2));
    }

    #[test]
    fn reset_policy_reestimates_statistics() {
        let (net, mut cfg) = trained();
        let tgt = DomainId::new("tgt");
        cfg.weights.insert(tgt.clone(), AdaptWeights::default());
        cfg.bn_policy = BnStatsPolicy::ResetThenEstimate;
        cfg.adapt_steps = 0;
        let images = shifted(5, 0.4, 0.5);
        let t = [AdaptTarget {
            domain: &tgt,
            images: &images,
        }];
        let (out, log) = adapt(&net, &"src".into(), &t, &cfg).unwrap();
        assert!(log.steps.is_empty());
        let (s, d) = (
            &out.branch(&"src".into()).unwrap().layers[0],
            &out.branch(&tgt).unwrap().layers[0],
        );
        assert_ne!(s.running_mean, d.running_mean);
        assert_eq!(s.gamma, d.gamma);
    }

    #[test]
    fn explicit_branch_matches_composition() {
        let (net, cfg) = trained();
        let images = shifted(5, 1.0, 0.0);
        let x = images.gather(&[0, 1, 2]).unwrap();
        let p = infer(&net, &x, &BranchChoice::Domain("src".into()), &cfg.scale).unwrap();
        let q = nn::softmax(&net.forward_eval(&x, &"src".into()).unwrap());
        assert_eq!(p.distributions, q);
        for (s, d) in p.scores.iter().zip(&q) {
            assert_eq!(*s, distmath::dist_mean(d, &cfg.scale));
        }
    }

    #[test]
    fn auto_with_one_branch_selects_it() {
        let (net, cfg) = trained();
        let x = shifted(9, 1.4, 0.3).gather(&[0, 1]).unwrap();
        let p = infer(&net, &x, &BranchChoice::Auto, &cfg.scale).unwrap();
        assert_eq!(p.branch, DomainId::new("src"));
    }

    #[test]
    fn auto_without_initialised_branches_fails() {
        let mut net = Network::<f32>::new(tiny_arch(), "src".into(), 0).unwrap();
        net.reset_branch_statistics(&"src".into()).unwrap();
        let x = shifted(9, 1.0, 0.0).gather(&[0, 1]).unwrap();
        let err = infer(&net, &x, &BranchChoice::Auto, &RatingScale::default()).unwrap_err();
        assert!(matches!(err, Error::MissingDomain(_)));
    }

    #[test]
    fn evaluation_is_batch_size_invariant() {
        let (net, mut cfg) = trained();
        let ds = generate_domain(&spec(11), 30).unwrap();
        let choice = BranchChoice::Domain("src".into());
        cfg.eval_batch_size = 1;
        let a = evaluate(&net, &ds, &choice, &cfg).unwrap();
        cfg.eval_batch_size = 32;
        let b = evaluate(&net, &ds, &choice, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluation_needs_ten_images() {
        let (net, cfg) = trained();
        let ds = generate_domain(&spec(11), 9).unwrap();
        let err = evaluate(&net, &ds, &BranchChoice::Domain("src".into()), &cfg).unwrap_err();
        assert!(matches!(err, Error::Metric(_)));
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig {
                batch_size: 0,
                ..ok.clone()
            },
            TrainConfig {
                patience: 0,
                ..ok.clone()
            },
            TrainConfig {
                ema_alpha: 0.0,
                ..ok.clone()
            },
            TrainConfig {
                adapt_lr: -1.0,
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn run_log_csv_layout() {
        let mut log = RunLog::default();
        log.steps.push(StepRecord {
            step: 1,
            domain: "t".into(),
            l_ent: Some(0.5),
            l_div: Some(1.0),
            l_gau: Some(2.0),
            total: 0.0,
        });
        let mut buf = Vec::new();
        log.write_steps_csv(&mut buf, &[("lr", "0.001".into())])
            .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# lr=0.001");
        assert_eq!(lines[1], "step,domain,l_ent,l_div,l_gau,total");
        assert_eq!(
            lines[2],
            "1,t,5.00000000e-1,1.00000000e0,2.00000000e0,0.00000000e0"
        );
    }

    #[test]
    fn extend_keeps_steps_increasing() {
        let rec = |step| StepRecord {
            step,
            domain: "d".into(),
            l_ent: None,
            l_div: None,
            l_gau: None,
            total: 0.0,
        };
        let mut a = RunLog {
            steps: vec![rec(1), rec(2)],
            ..RunLog::default()
        };
        a.extend(RunLog {
            steps: vec![rec(1), rec(2)],
            ..RunLog::default()
        });
        let s: Vec<u64> = a.steps.iter().map(|r| r.step).collect();
        assert_eq!(s, [1, 2, 3, 4]);
    }
}
