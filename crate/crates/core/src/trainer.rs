//! Sequential-category training.
//!
//! Categories arrive one at a time. Before each new category the decoder's
//! private block grows by one column and the model generates a replay bank
//! for the categories it has already learned. Every optimizer step then
//! combines three passes:
//!
//! 1. the new category's real minibatch (`ζ_new`),
//! 2. its reconstruction fed back through the model (`ζ_cyc`, weight `λ1`),
//! 3. one replayed minibatch of an older category (`ζ_mem`, weight `λ2`).
//!
//! Category indices (the one-hot positions) follow the training order, so
//! index `k` stands for `label_order[k]`.

use std::collections::BTreeSet;

use crate::data::{Batches, ImageDataset};
use crate::error::{Error, Result};
use crate::losses::{loss_cyc, loss_mem, loss_new, loss_total, term_grads, LossReport, Term};
use crate::model::{
    backward, forward, generate, Conditioning, ConditionVector, CvaeGrads, CvaeParams, Dims, LATENT_DIM,
};
use crate::ndcore::{derive_seed, sample_standard_normal, SeededRng, Tensor2};
use crate::optim::{OptimizerKind, OptimizerState};

// Stream tags for `derive_seed`.
const STREAM_INIT: u64 = 1;
const STREAM_GROW: u64 = 2;
const STREAM_BANK: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_NOISE: u64 = 5;

/// When the replay mask is honored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskScope {
    /// Only while training the last category of the order.
    Final,
    /// While training every category.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs_per_category: usize,
    pub learning_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub batch_size: usize,
    pub replay_per_label: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Dataset labels whose replay is withheld.
    pub memory_mask: BTreeSet<usize>,
    pub mask_scope: MaskScope,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_per_category: 20,
            learning_rate: 0.001,
            lambda1: 1.0,
            lambda2: 1.0,
            batch_size: 128,
            replay_per_label: 1000,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            memory_mask: BTreeSet::new(),
            mask_scope: MaskScope::Final,
            hidden: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs_per_category", self.epochs_per_category),
            ("batch_size", self.batch_size),
            ("replay_per_label", self.replay_per_label),
            ("hidden", self.hidden),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be non-negative".into()));
        }
        Ok(())
    }
}

/// Generated images for one older category.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub category: usize,
    pub images: Tensor2,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayBank {
    pub entries: Vec<ReplayEntry>,
}

impl ReplayBank {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn categories(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.category).collect()
    }
}

/// Generates `n_per_label` images for each category in `seen` that is not
/// in `masked`. Each category draws from its own derived seed.
pub fn build_replay_bank(
    params: &CvaeParams,
    seen: &[usize],
    masked: &BTreeSet<usize>,
    n_per_label: usize,
    seed: u64,
) -> Result<ReplayBank> {
    let mut entries = Vec::new();
    for &category in seen {
        if category >= params.n_categories() {
            return Err(Error::LabelOutOfRange { label: category, n_categories: params.n_categories() });
        }
        if masked.contains(&category) {
            continue;
        }
        let images = generate(params, n_per_label, category, derive_seed(seed, category as u64))?;
        entries.push(ReplayEntry { category, images });
    }
    Ok(ReplayBank { entries })
}

/// Mean losses over one epoch of one category.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub category: usize,
    pub label: usize,
    pub epoch: usize,
    pub new: LossReport,
    pub cyc: LossReport,
    pub mem: LossReport,
    pub total: f64,
}

/// Parameters right after finishing a category.
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySnapshot {
    /// Dataset labels of categories `0..=k`.
    pub labels: Vec<usize>,
    pub params: CvaeParams,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<CategorySnapshot>,
}

struct Accum {
    kl: f64,
    bce: f64,
    steps: usize,
    term: Term,
}

impl Accum {
    fn new(term: Term) -> Self {
        Accum { kl: 0.0, bce: 0.0, steps: 0, term }
    }

    fn push(&mut self, r: &LossReport) {
        self.kl += r.kl;
        self.bce += r.bce;
        self.steps += 1;
    }

    fn mean(&self) -> LossReport {
        if self.steps == 0 {
            return LossReport::absent(self.term);
        }
        let n = self.steps as f64;
        let (kl, bce) = (self.kl / n, self.bce / n);
        LossReport { kl, bce, total: kl + bce, term: self.term }
    }
}

fn check_finite(r: &LossReport) -> Result<()> {
    if r.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{} loss", r.term)))
    }
}

/// One pass: forward, loss report, weighted backward.
fn pass(
    params: &CvaeParams,
    input: &Tensor2,
    cond: &Conditioning,
    eps: &Tensor2,
    term: Term,
    weight: f64,
) -> Result<(LossReport, Tensor2, CvaeGrads)> {
    let cache = forward(params, input, cond, eps)?;
    let report = match term {
        Term::New => loss_new(&cache.stats, input, &cache.x_hat)?,
        Term::Cyc => loss_cyc(&cache.stats, input, &cache.x_hat)?,
        Term::Mem => loss_mem(&cache.stats, input, &cache.x_hat)?,
    };
    check_finite(&report)?;
    let out = term_grads(&cache.stats, input, &cache.x_hat, weight)?;
    let grads = backward(params, &cache, &out)?;
    Ok((report, cache.x_hat, grads))
}

/// Losses and the summed gradient of `ζ_new + λ1 ζ_cyc + λ2 ζ_mem` for one
/// step. `replay` is `(images, category)`; `None` skips the memory term.
#[allow(clippy::too_many_arguments)]
pub fn step_gradients(
    params: &CvaeParams,
    x: &Tensor2,
    category: usize,
    replay: Option<(&Tensor2, usize)>,
    lambda1: f64,
    lambda2: f64,
    rng: &mut SeededRng,
) -> Result<([LossReport; 3], CvaeGrads)> {
    let n_cat = params.n_categories();
    let cond: Conditioning = ConditionVector::one_hot(n_cat, category)?.into();
    let eps = sample_standard_normal(LATENT_DIM, x.cols(), rng);
    let (new, x_hat, mut grads) = pass(params, x, &cond, &eps, Term::New, 1.0)?;

    let mut cyc = LossReport::absent(Term::Cyc);
    if lambda1 > 0.0 {
        // x̂ is used as a constant here: it is both the input and the target
        let eps2 = sample_standard_normal(LATENT_DIM, x.cols(), rng);
        let (r, _, g) = pass(params, &x_hat, &cond, &eps2, Term::Cyc, lambda1)?;
        grads.add_scaled(&g, 1.0)?;
        cyc = r;
    }

    let mut mem = LossReport::absent(Term::Mem);
    if let Some((x_mem, mem_category)) = replay {
        if lambda2 > 0.0 {
            let mem_cond: Conditioning = ConditionVector::one_hot(n_cat, mem_category)?.into();
            let eps3 = sample_standard_normal(LATENT_DIM, x_mem.cols(), rng);
            let (r, _, g) = pass(params, x_mem, &mem_cond, &eps3, Term::Mem, lambda2)?;
            grads.add_scaled(&g, 1.0)?;
            mem = r;
        }
    }
    Ok(([new, cyc, mem], grads))
}

/// Trains the model on one category's real images.
///
/// Each epoch reshuffles `category_data` with a seed derived from
/// `(stage_seed, epoch)`. Every new-data minibatch is paired with one replay
/// minibatch taken round-robin over the bank's categories; within a category
/// the replay images are consumed in order and wrap around.
#[allow(clippy::too_many_arguments)]
pub fn train_category(
    params: &mut CvaeParams,
    opt: &mut OptimizerState,
    category_data: &Tensor2,
    category: usize,
    label: usize,
    bank: &ReplayBank,
    config: &TrainConfig,
    stage_seed: u64,
) -> Result<Vec<EpochRecord>> {
    if category_data.cols() == 0 {
        return Err(Error::EmptyData(format!("no training images for category {category}")));
    }
    let mut noise = SeededRng::new(derive_seed(stage_seed, STREAM_NOISE));
    let mut cursors = vec![0usize; bank.entries.len()];
    let mut replay_turn = 0usize;
    let mut records = Vec::with_capacity(config.epochs_per_category);

    for epoch in 0..config.epochs_per_category {
        let shuffle_seed = derive_seed(derive_seed(stage_seed, STREAM_SHUFFLE), epoch as u64);
        let mut batches = Batches::new(category_data, config.batch_size, shuffle_seed);
        let mut acc = [Accum::new(Term::New), Accum::new(Term::Cyc), Accum::new(Term::Mem)];
        while let Some(idx) = batches.next_indices() {
            let x = category_data.select_columns(idx);
            let replay = if bank.is_empty() {
                None
            } else {
                let slot = replay_turn % bank.entries.len();
                replay_turn += 1;
                let entry = &bank.entries[slot];
                let available = entry.images.cols();
                let take = config.batch_size.min(available);
                let cols: Vec<usize> = (0..take).map(|i| (cursors[slot] + i) % available).collect();
                cursors[slot] = (cursors[slot] + take) % available;
                Some((entry.images.select_columns(&cols), entry.category))
            };
            let has_replay = replay.is_some();
            let (reports, grads) = step_gradients(
                params,
                &x,
                category,
                replay.as_ref().map(|(t, c)| (t, *c)),
                config.lambda1,
                config.lambda2,
                &mut noise,
            )?;
            opt.apply(&mut params.tensors_mut(), &grads.tensors(), config.learning_rate)?;
            let present = [true, config.lambda1 > 0.0, has_replay && config.lambda2 > 0.0];
            for ((a, r), on) in acc.iter_mut().zip(&reports).zip(present) {
                if on {
                    a.push(r);
                }
            }
        }
        let [new, cyc, mem] = [acc[0].mean(), acc[1].mean(), acc[2].mean()];
        records.push(EpochRecord {
            category,
            label,
            epoch,
            total: loss_total(&new, &cyc, &mem, config.lambda1, config.lambda2),
            new,
            cyc,
            mem,
        });
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters after training".into()));
    }
    Ok(records)
}

/// Resumable continual-training state.
#[derive(Debug, Clone)]
pub struct ContinualTrainer {
    pub config: TrainConfig,
    pub params: Option<CvaeParams>,
    pub opt: Option<OptimizerState>,
    /// Dataset label of each category index trained so far.
    pub labels: Vec<usize>,
    pub history: History,
}

impl ContinualTrainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(ContinualTrainer { config, params: None, opt: None, labels: Vec::new(), history: History::default() })
    }

    /// Learns one more category. Grows the model first unless this is the
    /// first category, then replays every earlier category whose dataset
    /// label is not in `mask`.
    pub fn train_next(&mut self, dataset: &ImageDataset, label: usize, mask: &BTreeSet<usize>) -> Result<()> {
        if self.labels.contains(&label) {
            return Err(Error::Config(format!("label {label} was already trained")));
        }
        let k = self.labels.len();
        let base = self.config.seed;
        let stage_seed = derive_seed(base, 1000 + k as u64);
        let dims = Dims { input: dataset.images.rows(), hidden: self.config.hidden };

        let (mut params, mut opt) = match (self.params.take(), self.opt.take()) {
            (Some(p), Some(mut o)) => {
                let grown = p.grow(derive_seed(stage_seed, STREAM_GROW));
                o.extend_to(&grown.tensors())?;
                (grown, o)
            }
            _ => {
                let p = CvaeParams::init(dims, derive_seed(base, STREAM_INIT));
                let o = OptimizerState::for_cvae(self.config.optimizer, &p);
                (p, o)
            }
        };
        if params.dims() != dims {
            return Err(Error::Shape {
                op: "train_next",
                left: (params.dims().input, params.dims().hidden),
                right: (dims.input, dims.hidden),
            });
        }

        let seen: Vec<usize> = (0..k).collect();
        let masked: BTreeSet<usize> = (0..k).filter(|&c| mask.contains(&self.labels[c])).collect();
        let bank = build_replay_bank(
            &params,
            &seen,
            &masked,
            self.config.replay_per_label,
            derive_seed(stage_seed, STREAM_BANK),
        )?;

        let data = dataset.filter_by_label(label)?;
        let records =
            train_category(&mut params, &mut opt, &data.images, k, label, &bank, &self.config, stage_seed)?;
        self.labels.push(label);
        self.history.epochs.extend(records);
        self.history.checkpoints.push(CategorySnapshot { labels: self.labels.clone(), params: params.clone() });
        self.params = Some(params);
        self.opt = Some(opt);
        Ok(())
    }

    /// Mask in force while training position `k` of an order of length `n`.
    pub fn mask_for_stage(&self, k: usize, n: usize) -> BTreeSet<usize> {
        match self.config.mask_scope {
            MaskScope::All => self.config.memory_mask.clone(),
            MaskScope::Final if k + 1 == n => self.config.memory_mask.clone(),
            MaskScope::Final => BTreeSet::new(),
        }
    }
}

/// Output of [`continual_train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: CvaeParams,
    pub opt: OptimizerState,
    pub labels: Vec<usize>,
    pub history: History,
}

impl TryFrom<ContinualTrainer> for TrainOutcome {
    type Error = Error;

    fn try_from(t: ContinualTrainer) -> Result<Self> {
        match (t.params, t.opt) {
            (Some(params), Some(opt)) => Ok(TrainOutcome { params, opt, labels: t.labels, history: t.history }),
            _ => Err(Error::EmptyData("no category has been trained".into())),
        }
    }
}

/// Trains on each label of `label_order` in turn.
pub fn continual_train(dataset: &ImageDataset, label_order: &[usize], config: &TrainConfig) -> Result<TrainOutcome> {
    check_order(dataset, label_order)?;
    let mut trainer = ContinualTrainer::new(config.clone())?;
    let n = label_order.len();
    for (k, &label) in label_order.iter().enumerate() {
        let mask = trainer.mask_for_stage(k, n);
        trainer.train_next(dataset, label, &mask)?;
    }
    trainer.try_into()
}

fn check_order(dataset: &ImageDataset, label_order: &[usize]) -> Result<()> {
    if label_order.is_empty() {
        return Err(Error::Config("label order is empty".into()));
    }
    let unique: BTreeSet<usize> = label_order.iter().copied().collect();
    if unique.len() != label_order.len() {
        return Err(Error::Config(format!("label order {label_order:?} repeats a label")));
    }
    let present = dataset.label_counts();
    if let Some(l) = label_order.iter().find(|l| !present.contains_key(l)) {
        return Err(Error::EmptyData(format!("label {l} not present in {}", dataset.name)));
    }
    Ok(())
}

/// Joint-learning baseline: a fixed-width model conditioned on all labels at
/// once, trained on shuffled mixed-label minibatches with `ζ_new` only.
pub fn joint_train(dataset: &ImageDataset, labels: &[usize], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    check_order(dataset, labels)?;
    let data = dataset.filter_by_labels(labels)?;
    let dims = Dims { input: data.images.rows(), hidden: config.hidden };
    let mut params = CvaeParams::init_with_categories(dims, labels.len(), derive_seed(config.seed, STREAM_INIT));
    let mut opt = OptimizerState::for_cvae(config.optimizer, &params);
    let category_of: Vec<usize> =
        data.labels.iter().map(|l| labels.iter().position(|x| x == l).expect("filtered")).collect();
    let stage_seed = derive_seed(config.seed, 999);
    let mut noise = SeededRng::new(derive_seed(stage_seed, STREAM_NOISE));
    let mut history = History::default();
    let epochs = config.epochs_per_category;
    for epoch in 0..epochs {
        let shuffle_seed = derive_seed(derive_seed(stage_seed, STREAM_SHUFFLE), epoch as u64);
        let mut batches = Batches::new(&data.images, config.batch_size, shuffle_seed);
        let mut acc = Accum::new(Term::New);
        while let Some(idx) = batches.next_indices() {
            let x = data.images.select_columns(idx);
            let cats: Vec<usize> = idx.iter().map(|&j| category_of[j]).collect();
            let cond = Conditioning::labels(labels.len(), &cats)?;
            let eps = sample_standard_normal(LATENT_DIM, x.cols(), &mut noise);
            let (report, _, grads) = pass(&params, &x, &cond, &eps, Term::New, 1.0)?;
            opt.apply(&mut params.tensors_mut(), &grads.tensors(), config.learning_rate)?;
            acc.push(&report);
        }
        let new = acc.mean();
        history.epochs.push(EpochRecord {
            category: 0,
            label: labels[0],
            epoch,
            total: new.total,
            new,
            cyc: LossReport::absent(Term::Cyc),
            mem: LossReport::absent(Term::Mem),
        });
    }
    history.checkpoints.push(CategorySnapshot { labels: labels.to_vec(), params: params.clone() });
    Ok(TrainOutcome { params, opt, labels: labels.to_vec(), history })
}
