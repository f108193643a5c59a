//! Sample-quality metrics.
//!
//! * **Acc** — a classifier trained on real images labels generated images;
//!   the score is the fraction labelled with the category they were
//!   generated for.
//! * **r-Acc** — a fresh classifier is trained on generated images and
//!   scored on real test images.
//!
//! The classifier is a one-hidden-layer MLP with softmax output over the ten
//! dataset labels, trained with cross-entropy and Adam.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::data::{Batches, ImageDataset};
use crate::error::{Error, Result};
use crate::model::{generate, CvaeParams};
use crate::ndcore::{add_broadcast_col, derive_seed, matmul, matmul_nt, matmul_tn, relu, SeededRng, Tensor2};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::trainer::{ContinualTrainer, TrainConfig};

pub const N_CLASSES: usize = 10;
pub const DEFAULT_SAMPLES_PER_LABEL: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { hidden: 256, epochs: 10, learning_rate: 0.001, batch_size: 128, seed: 0 }
    }
}

/// MLP `input → hidden → 10` with ReLU and softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w1: Tensor2,
    pub b1: Tensor2,
    pub w2: Tensor2,
    pub b2: Tensor2,
}

impl ClassifierParams {
    pub fn init(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let mut uniform = |rows: usize, cols: usize| {
            let b = 1.0 / (cols as f64).sqrt();
            Tensor2::from_fn(rows, cols, |_, _| rng.uniform(-b, b))
        };
        let w1 = uniform(hidden, input);
        let w2 = uniform(N_CLASSES, hidden);
        ClassifierParams { w1, b1: Tensor2::zeros(hidden, 1), w2, b2: Tensor2::zeros(N_CLASSES, 1) }
    }

    fn tensors(&self) -> [&Tensor2; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor2; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn hidden(&self, x: &Tensor2) -> Result<(Tensor2, Tensor2)> {
        let pre = add_broadcast_col(&matmul(&self.w1, x)?, &self.b1)?;
        let h = relu(&pre);
        Ok((pre, h))
    }

    /// Class probabilities, `10 x batch`.
    pub fn predict_proba(&self, x: &Tensor2) -> Result<Tensor2> {
        let (_, h) = self.hidden(x)?;
        let logits = add_broadcast_col(&matmul(&self.w2, &h)?, &self.b2)?;
        Ok(softmax_columns(&logits))
    }

    pub fn predict(&self, x: &Tensor2) -> Result<Vec<usize>> {
        let p = self.predict_proba(x)?;
        Ok((0..p.cols()).map(|j| argmax_column(&p, j)).collect())
    }

    /// Fraction of columns of `x` classified as their entry in `labels`.
    pub fn accuracy(&self, x: &Tensor2, labels: &[usize]) -> Result<f64> {
        if x.cols() != labels.len() {
            return Err(Error::Shape { op: "accuracy", left: x.shape(), right: (1, labels.len()) });
        }
        if labels.is_empty() {
            return Err(Error::EmptyData("accuracy over zero images".into()));
        }
        let mut hits = 0usize;
        // chunked to bound memory on the full test set
        for start in (0..labels.len()).step_by(1000) {
            let idx: Vec<usize> = (start..(start + 1000).min(labels.len())).collect();
            let pred = self.predict(&x.select_columns(&idx))?;
            hits += idx.iter().zip(pred).filter(|(&j, p)| labels[j] == *p).count();
        }
        Ok(hits as f64 / labels.len() as f64)
    }

    pub fn dataset_accuracy(&self, ds: &ImageDataset) -> Result<f64> {
        self.accuracy(&ds.images, &ds.labels)
    }
}

fn softmax_columns(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for j in 0..logits.cols() {
        let max = (0..logits.rows()).map(|i| logits.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..logits.rows() {
            let e = (logits.get(i, j) - max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for i in 0..logits.rows() {
            out.set(i, j, out.get(i, j) / sum);
        }
    }
    out
}

fn argmax_column(p: &Tensor2, j: usize) -> usize {
    let mut best = 0;
    for i in 1..p.rows() {
        if p.get(i, j) > p.get(best, j) {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and parameter gradients for one batch.
fn classifier_grads(params: &ClassifierParams, x: &Tensor2, labels: &[usize]) -> Result<(f64, ClassifierParams)> {
    let b = x.cols() as f64;
    let (pre, h) = params.hidden(x)?;
    let logits = add_broadcast_col(&matmul(&params.w2, &h)?, &params.b2)?;
    let mut d_logits = softmax_columns(&logits);
    let mut loss = 0.0;
    for (j, &l) in labels.iter().enumerate() {
        loss -= d_logits.get(l, j).max(1e-300).ln();
        d_logits.set(l, j, d_logits.get(l, j) - 1.0);
    }
    let d_logits = d_logits.scale(1.0 / b);
    let w2 = matmul_nt(&d_logits, &h)?;
    let b2 = d_logits.sum_cols();
    let d_h = matmul_tn(&params.w2, &d_logits)?;
    let d_pre = d_h.zip_map(&pre, "relu backward", |g, a| if a > 0.0 { g } else { 0.0 })?;
    let w1 = matmul_nt(&d_pre, x)?;
    let b1 = d_pre.sum_cols();
    Ok((loss / b, ClassifierParams { w1, b1, w2, b2 }))
}

/// Trains on `(images, labels)`; needs at least two distinct labels.
pub fn train_classifier_on(images: &Tensor2, labels: &[usize], config: &ClassifierConfig) -> Result<ClassifierParams> {
    let distinct: BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Config(format!("classifier needs at least two labels, got {distinct:?}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= N_CLASSES) {
        return Err(Error::LabelOutOfRange { label: bad, n_categories: N_CLASSES });
    }
    if images.cols() != labels.len() {
        return Err(Error::Shape { op: "train_classifier", left: images.shape(), right: (1, labels.len()) });
    }
    let mut params = ClassifierParams::init(images.rows(), config.hidden, derive_seed(config.seed, 1));
    let mut opt = OptimizerState::new(OptimizerKind::Adam, &params.tensors());
    for epoch in 0..config.epochs {
        let mut batches = Batches::new(images, config.batch_size, derive_seed(config.seed, 100 + epoch as u64));
        while let Some(idx) = batches.next_indices() {
            let x = images.select_columns(idx);
            let y: Vec<usize> = idx.iter().map(|&j| labels[j]).collect();
            let (loss, g) = classifier_grads(&params, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("classifier loss".into()));
            }
            opt.apply(&mut params.tensors_mut(), &g.tensors(), config.learning_rate)?;
        }
    }
    Ok(params)
}

pub fn train_classifier(ds: &ImageDataset, config: &ClassifierConfig) -> Result<ClassifierParams> {
    train_classifier_on(&ds.images, &ds.labels, config)
}

/// Anything that can produce images for a dataset label.
pub trait ConditionalSampler {
    /// Dataset labels this sampler can produce.
    fn labels(&self) -> Vec<usize>;
    fn sample(&self, label: usize, n: usize, seed: u64) -> Result<Tensor2>;
}

/// A trained model together with the dataset label of each category index.
#[derive(Debug, Clone, Copy)]
pub struct ModelSampler<'a> {
    pub params: &'a CvaeParams,
    pub labels: &'a [usize],
}

impl ConditionalSampler for ModelSampler<'_> {
    fn labels(&self) -> Vec<usize> {
        self.labels.to_vec()
    }

    fn sample(&self, label: usize, n: usize, seed: u64) -> Result<Tensor2> {
        let category = self
            .labels
            .iter()
            .position(|&l| l == label)
            .ok_or(Error::LabelOutOfRange { label, n_categories: self.params.n_categories() })?;
        generate(self.params, n, category, seed)
    }
}

/// Returns real images, drawn with replacement. Used to check that the
/// metric itself is consistent with plain classifier accuracy.
#[derive(Debug, Clone, Copy)]
pub struct RealImageSampler<'a> {
    pub dataset: &'a ImageDataset,
}

impl ConditionalSampler for RealImageSampler<'_> {
    fn labels(&self) -> Vec<usize> {
        self.dataset.label_counts().into_keys().collect()
    }

    fn sample(&self, label: usize, n: usize, seed: u64) -> Result<Tensor2> {
        let pool: Vec<usize> = (0..self.dataset.len()).filter(|&j| self.dataset.labels[j] == label).collect();
        if pool.is_empty() {
            return Err(Error::EmptyData(format!("no real images with label {label}")));
        }
        let mut rng = SeededRng::new(seed);
        let idx: Vec<usize> = (0..n).map(|_| pool[rng.below(pool.len())]).collect();
        Ok(self.dataset.images.select_columns(&idx))
    }
}

/// Generated images and their labels, `n_per_label` of each label.
pub fn sample_labelled(
    sampler: &dyn ConditionalSampler,
    n_per_label: usize,
    seed: u64,
) -> Result<(Tensor2, Vec<usize>)> {
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for label in sampler.labels() {
        parts.push(sampler.sample(label, n_per_label, derive_seed(seed, label as u64))?);
        labels.extend(std::iter::repeat_n(label, n_per_label));
    }
    let refs: Vec<&Tensor2> = parts.iter().collect();
    Ok((Tensor2::hcat(&refs)?, labels))
}

/// Acc for each label separately.
pub fn acc_by_label(
    sampler: &dyn ConditionalSampler,
    classifier: &ClassifierParams,
    n_per_label: usize,
    seed: u64,
) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for label in sampler.labels() {
        let x = sampler.sample(label, n_per_label, derive_seed(seed, label as u64))?;
        out.insert(label, classifier.accuracy(&x, &vec![label; n_per_label])?);
    }
    Ok(out)
}

/// Fraction of generated images the classifier assigns to their
/// conditioning label, over `n_per_label` images per label.
pub fn acc_metric(
    sampler: &dyn ConditionalSampler,
    classifier: &ClassifierParams,
    n_per_label: usize,
    seed: u64,
) -> Result<f64> {
    let per = acc_by_label(sampler, classifier, n_per_label, seed)?;
    if per.is_empty() {
        return Err(Error::EmptyData("sampler has no labels".into()));
    }
    Ok(per.values().sum::<f64>() / per.len() as f64)
}

/// Accuracy on `real_test` of a classifier trained on generated images.
pub fn r_acc_metric(
    sampler: &dyn ConditionalSampler,
    real_test: &ImageDataset,
    n_per_label: usize,
    config: &ClassifierConfig,
) -> Result<f64> {
    let covered = sampler.labels();
    if let Some(l) = real_test.labels.iter().find(|l| !covered.contains(l)) {
        return Err(Error::Config(format!("test label {l} is not produced by the generator")));
    }
    let (x, y) = sample_labelled(sampler, n_per_label, derive_seed(config.seed, 7))?;
    let clf = train_classifier_on(&x, &y, config)?;
    clf.dataset_accuracy(real_test)
}

/// One point of an ablation curve: replay was withheld for `masked` while
/// training the final label.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationPoint {
    pub masked: BTreeSet<usize>,
    pub acc: f64,
    pub acc_by_label: BTreeMap<usize, f64>,
}

impl AblationPoint {
    /// Mean Acc over the masked labels only.
    pub fn masked_acc(&self) -> Option<f64> {
        let v: Vec<f64> = self.masked.iter().filter_map(|l| self.acc_by_label.get(l).copied()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Largest masked label, the x-axis of a prefix curve.
    pub fn extent(&self) -> Option<usize> {
        self.masked.iter().next_back().copied()
    }
}

/// Masks `{0..=x}` for each `x`, with `None` meaning no mask.
pub fn prefix_masks(extents: &[Option<usize>]) -> Vec<BTreeSet<usize>> {
    extents.iter().map(|x| x.map(|x| (0..=x).collect()).unwrap_or_default()).collect()
}

/// Trains every label of `label_order` except the last once, then finishes
/// the run once per mask in `mask_schedule` and scores the final model.
///
/// The shared prefix is exact rather than an approximation: stage seeds do not
/// depend on the mask, so a full run with the mask applied only to the final
/// stage would reach the same prefix state.
pub fn ablation_curve(
    dataset: &ImageDataset,
    label_order: &[usize],
    config: &TrainConfig,
    mask_schedule: &[BTreeSet<usize>],
    classifier: &ClassifierParams,
    n_per_label: usize,
    seed: u64,
) -> Result<Vec<AblationPoint>> {
    let (&last, prefix) =
        label_order.split_last().ok_or_else(|| Error::Config("label order is empty".into()))?;
    let mut base = ContinualTrainer::new(config.clone())?;
    for &label in prefix {
        base.train_next(dataset, label, &BTreeSet::new())?;
    }
    let mut points = Vec::with_capacity(mask_schedule.len());
    for mask in mask_schedule {
        let mut run = base.clone();
        run.train_next(dataset, last, mask)?;
        let params = run.params.as_ref().expect("trained");
        let sampler = ModelSampler { params, labels: &run.labels };
        let by_label = acc_by_label(&sampler, classifier, n_per_label, seed)?;
        let acc = by_label.values().sum::<f64>() / by_label.len() as f64;
        let masked = mask.iter().copied().filter(|l| prefix.contains(l)).collect();
        points.push(AblationPoint { masked, acc, acc_by_label: by_label });
    }
    Ok(points)
}

/// One line of a metrics file: `run_id<TAB>metric<TAB>value`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub run_id: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(run_id: &str, metric: &str, value: f64) -> Self {
        MetricRecord { run_id: run_id.to_string(), metric: metric.to_string(), value }
    }
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.run_id, self.metric, self.value)
    }
}

impl FromStr for MetricRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split('\t').collect();
        match parts.as_slice() {
            [run, metric, value] => {
                let value = value.parse().map_err(|_| Error::Config(format!("bad metric value in `{line}`")))?;
                Ok(MetricRecord::new(run, metric, value))
            }
            _ => Err(Error::Config(format!("metric record needs three tab-separated fields: `{line}`"))),
        }
    }
}
