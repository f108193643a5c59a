//! The subcommands, callable without going through argument parsing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gvae_core::data::{ImageDataset, Split};
use gvae_core::eval::{
    ablation_curve, acc_metric, prefix_masks, r_acc_metric, train_classifier, AblationPoint, ClassifierConfig,
    ClassifierParams, MetricRecord, ModelSampler,
};
use gvae_core::model::generate;
use gvae_core::trainer::{joint_train, CategorySnapshot, ContinualTrainer, EpochRecord};
use gvae_core::viz::{common_content_snapshots, write_image_grid};

use crate::checkpoint::Checkpoint;
use crate::config::RunSettings;
use crate::error::CliError;

pub fn load_split(dir: &Path, split: Split, name: &str) -> Result<ImageDataset, CliError> {
    Ok(ImageDataset::load(dir, split, name)?)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn fmt_term(present: bool, v: f64) -> String {
    if present {
        format!("{v:9.3}")
    } else {
        format!("{:>9}", "-")
    }
}

pub fn epoch_line(e: &EpochRecord, epochs: usize, lambda1: f64, has_replay: bool) -> String {
    format!(
        "category {:>2} (label {}) epoch {:>2}/{}  new {}  cyc {}  mem {}  total {:9.3}",
        e.category,
        e.label,
        e.epoch + 1,
        epochs,
        fmt_term(true, e.new.total),
        fmt_term(lambda1 > 0.0, e.cyc.total),
        fmt_term(has_replay, e.mem.total),
        e.total
    )
}

const HISTORY_HEADER: &str = "category\tlabel\tepoch\tnew\tcyc\tmem\ttotal\n";

fn history_row(e: &EpochRecord) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        e.category, e.label, e.epoch, e.new.total, e.cyc.total, e.mem.total, e.total
    )
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub history: PathBuf,
}

/// Continual training over `settings.labels`, writing `cat-XX.gvae` after
/// each category, `final.gvae`, and `history.tsv` into `settings.out`.
pub fn cmd_train(settings: &RunSettings, log: &mut dyn Write) -> Result<TrainSummary, CliError> {
    let train = load_split(&settings.data_dir, Split::Train, &settings.dataset)?;
    create_dir(&settings.out)?;
    let mut trainer = ContinualTrainer::new(settings.train.clone())?;
    let n = settings.labels.len();
    let mut checkpoints = Vec::new();
    let mut history = String::from(HISTORY_HEADER);
    for (k, &label) in settings.labels.iter().enumerate() {
        let mask = trainer.mask_for_stage(k, n);
        let before = trainer.history.epochs.len();
        trainer.train_next(&train, label, &mask)?;
        let replayed = (0..k).any(|c| !mask.contains(&settings.labels[c]));
        for e in &trainer.history.epochs[before..] {
            writeln!(log, "{}", epoch_line(e, settings.train.epochs_per_category, settings.train.lambda1, replayed))
                .ok();
            history.push_str(&history_row(e));
        }
        let ckpt = checkpoint_of(&trainer, settings)?;
        let path = settings.out.join(format!("cat-{:02}.gvae", k + 1));
        ckpt.save(&path)?;
        checkpoints.push(path);
    }
    let final_checkpoint = settings.out.join("final.gvae");
    checkpoint_of(&trainer, settings)?.save(&final_checkpoint)?;
    let history_path = settings.out.join("history.tsv");
    write_text(&history_path, &history)?;
    Ok(TrainSummary { checkpoints, final_checkpoint, history: history_path })
}

fn checkpoint_of(trainer: &ContinualTrainer, settings: &RunSettings) -> Result<Checkpoint, CliError> {
    match (&trainer.params, &trainer.opt) {
        (Some(params), Some(opt)) => Ok(Checkpoint {
            dataset: settings.dataset.clone(),
            labels: trainer.labels.clone(),
            seed: settings.train.seed,
            params: params.clone(),
            optimizer: opt.clone(),
        }),
        _ => Err(CliError::usage("nothing trained")),
    }
}

/// Fixed-width baseline trained on all labels at once; writes `joint.gvae`.
pub fn cmd_joint_train(settings: &RunSettings, log: &mut dyn Write) -> Result<PathBuf, CliError> {
    let train = load_split(&settings.data_dir, Split::Train, &settings.dataset)?;
    create_dir(&settings.out)?;
    let out = joint_train(&train, &settings.labels, &settings.train)?;
    let mut history = String::from(HISTORY_HEADER);
    for e in &out.history.epochs {
        writeln!(log, "joint epoch {:>2}/{}  new {:9.3}", e.epoch + 1, settings.train.epochs_per_category, e.new.total)
            .ok();
        history.push_str(&history_row(e));
    }
    write_text(&settings.out.join("joint-history.tsv"), &history)?;
    let path = settings.out.join("joint.gvae");
    Checkpoint {
        dataset: settings.dataset.clone(),
        labels: out.labels,
        seed: settings.train.seed,
        params: out.params,
        optimizer: out.opt,
    }
    .save(&path)?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub n_per_label: usize,
    pub seed: u64,
    pub classifier: ClassifierConfig,
    pub run_id: String,
    pub records: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_per_label: gvae_core::eval::DEFAULT_SAMPLES_PER_LABEL,
            seed: 0,
            classifier: ClassifierConfig::default(),
            run_id: "run".into(),
            records: None,
        }
    }
}

/// Classifier trained on the real training images of `labels`.
pub fn real_classifier(
    data_dir: &Path,
    dataset: &str,
    labels: &[usize],
    config: &ClassifierConfig,
) -> Result<(ClassifierParams, f64), CliError> {
    let train = load_split(data_dir, Split::Train, dataset)?.filter_by_labels(labels)?;
    let test = load_split(data_dir, Split::Test, dataset)?.filter_by_labels(labels)?;
    let clf = train_classifier(&train, config)?;
    let acc = clf.dataset_accuracy(&test)?;
    Ok((clf, acc))
}

pub fn percent(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

/// Acc and r-Acc of a checkpoint; returns the metric records it wrote.
pub fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    opts: &EvalOptions,
    log: &mut dyn Write,
) -> Result<Vec<MetricRecord>, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.labels.len() < 2 {
        return Err(CliError::usage("evaluation needs a checkpoint with at least two categories"));
    }
    let (clf, clf_acc) = real_classifier(data_dir, &ckpt.dataset, &ckpt.labels, &opts.classifier)?;
    let sampler = ModelSampler { params: &ckpt.params, labels: &ckpt.labels };
    let acc = acc_metric(&sampler, &clf, opts.n_per_label, opts.seed)?;
    let test = load_split(data_dir, Split::Test, &ckpt.dataset)?.filter_by_labels(&ckpt.labels)?;
    let r_acc = r_acc_metric(&sampler, &test, opts.n_per_label, &opts.classifier)?;
    writeln!(log, "classifier test accuracy {}", percent(clf_acc)).ok();
    writeln!(log, "Acc   {}", percent(acc)).ok();
    writeln!(log, "r-Acc {}", percent(r_acc)).ok();
    let records = vec![
        MetricRecord::new(&opts.run_id, "classifier_acc", clf_acc),
        MetricRecord::new(&opts.run_id, "acc", acc),
        MetricRecord::new(&opts.run_id, "r_acc", r_acc),
    ];
    if let Some(path) = &opts.records {
        let text: String = records.iter().map(|r| format!("{r}\n")).collect();
        write_text(path, &text)?;
    }
    Ok(records)
}

/// Grid of `n` samples of category index `category`.
pub fn cmd_sample(checkpoint: &Path, category: usize, n: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if category >= ckpt.n_categories() {
        return Err(CliError::usage(format!(
            "category {category} out of range, checkpoint has {} (labels {:?})",
            ckpt.n_categories(),
            ckpt.labels
        )));
    }
    let images = generate(&ckpt.params, n, category, seed)?;
    write_image_grid(&images, grid_cols(n), out)?;
    Ok(())
}

fn grid_cols(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).max(1)
}

/// Common content of each checkpoint with shared latent draws.
pub fn cmd_common(checkpoints: &[PathBuf], n: usize, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let snapshots = checkpoints
        .iter()
        .map(|p| {
            let c = Checkpoint::load(p)?;
            Ok(CategorySnapshot { labels: c.labels, params: c.params })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(common_content_snapshots(&snapshots, n, seed, out_dir)?)
}

/// One ablation point per mask prefix `{0..=x}`; writes `x<TAB>acc<TAB>masked_acc`
/// lines to `out/ablation.tsv`.
pub fn cmd_ablate(
    settings: &RunSettings,
    extents: &[Option<usize>],
    opts: &EvalOptions,
    log: &mut dyn Write,
) -> Result<Vec<AblationPoint>, CliError> {
    let train = load_split(&settings.data_dir, Split::Train, &settings.dataset)?;
    let (clf, _) = real_classifier(&settings.data_dir, &settings.dataset, &settings.labels, &opts.classifier)?;
    create_dir(&settings.out)?;
    let masks = prefix_masks(extents);
    let points =
        ablation_curve(&train, &settings.labels, &settings.train, &masks, &clf, opts.n_per_label, opts.seed)?;
    let mut text = String::from("x\tacc\tmasked_acc\n");
    for (x, p) in extents.iter().zip(&points) {
        let x = x.map(|v| v.to_string()).unwrap_or_else(|| "none".into());
        let masked = p.masked_acc().map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        writeln!(log, "mask 0..{x:<4} Acc {}", percent(p.acc)).ok();
        text.push_str(&format!("{x}\t{}\t{masked}\n", p.acc));
    }
    write_text(&settings.out.join("ablation.tsv"), &text)?;
    Ok(points)
}
