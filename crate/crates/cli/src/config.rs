//! Run settings from a flat `key = value` file, overridden by flags.
//!
//! Keys mirror the training configuration: `dataset`, `data_dir`, `labels`,
//! `epochs`, `learning_rate`, `lambda1`, `lambda2`, `batch_size`, `replay`,
//! `optimizer`, `seed`, `mask`, `mask_scope`, `hidden`, `out`. Blank lines and
//! lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use gvae_core::trainer::{MaskScope, TrainConfig};

use crate::error::CliError;

pub const KEYS: [&str; 15] = [
    "dataset",
    "data_dir",
    "labels",
    "epochs",
    "learning_rate",
    "lambda1",
    "lambda2",
    "batch_size",
    "replay",
    "optimizer",
    "seed",
    "mask",
    "mask_scope",
    "hidden",
    "out",
];

/// Training flags shared by `train`, `joint-train` and `ablate`.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// key=value file; flags given on the command line take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// dataset name, stored in checkpoints (mnist, fashion-mnist, ...)
    #[arg(long)]
    pub dataset: Option<String>,
    /// directory holding the IDX files [default: data/<dataset>]
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// training order, e.g. 0,1,2 or 0-9 [default: 0-9]
    #[arg(long)]
    pub labels: Option<String>,
    /// epochs per category [default: 20]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// weight of the cycle term [default: 1]
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// weight of the replay term [default: 1]
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// [default: 128]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// replayed images generated per earlier category [default: 1000]
    #[arg(long)]
    pub replay: Option<usize>,
    /// adam or sgd [default: adam]
    #[arg(long)]
    pub optimizer: Option<String>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// dataset labels whose replay is withheld, e.g. 0-8
    #[arg(long)]
    pub mask: Option<String>,
    /// final (mask only while training the last label) or all [default: final]
    #[arg(long)]
    pub mask_scope: Option<String>,
    /// hidden width [default: 256]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// output directory [default: runs/<dataset>]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub dataset: String,
    pub data_dir: PathBuf,
    pub labels: Vec<usize>,
    pub out: PathBuf,
    pub train: TrainConfig,
}

/// Parses `0,1,2`, `0-9`, `0-2,5` or `none` into a list, keeping order.
pub fn parse_label_list(s: &str) -> Result<Vec<usize>, CliError> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    let bad = || CliError::usage(format!("bad label list `{s}`"));
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if let Some(l) = out.iter().find(|&&l| l >= 10) {
        return Err(CliError::usage(format!("label {l} is out of range 0-9")));
    }
    Ok(out)
}

pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config line {}: expected key = value", n + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(CliError::usage(format!("config line {}: unknown key `{k}`", n + 1)));
        }
        map.insert(k.to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| CliError::usage(format!("bad value `{v}` for {key}")))
}

impl TrainArgs {
    /// Merges defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunSettings, CliError> {
        let mut file = match &self.config {
            Some(path) => parse_config_file(&fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)?,
            None => BTreeMap::new(),
        };
        let mut set = |key: &str, flag: Option<String>| {
            if let Some(v) = flag {
                file.insert(key.to_string(), v);
            }
        };
        set("dataset", self.dataset.clone());
        set("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string()));
        set("labels", self.labels.clone());
        set("epochs", self.epochs.map(|v| v.to_string()));
        set("learning_rate", self.lr.map(|v| v.to_string()));
        set("lambda1", self.lambda1.map(|v| v.to_string()));
        set("lambda2", self.lambda2.map(|v| v.to_string()));
        set("batch_size", self.batch_size.map(|v| v.to_string()));
        set("replay", self.replay.map(|v| v.to_string()));
        set("optimizer", self.optimizer.clone());
        set("seed", self.seed.map(|v| v.to_string()));
        set("mask", self.mask.clone());
        set("mask_scope", self.mask_scope.clone());
        set("hidden", self.hidden.map(|v| v.to_string()));
        set("out", self.out.as_ref().map(|p| p.display().to_string()));
        settings_from_map(&file)
    }
}

pub fn settings_from_map(map: &BTreeMap<String, String>) -> Result<RunSettings, CliError> {
    let get = |k: &str| map.get(k).map(String::as_str);
    let mut train = TrainConfig::default();
    if let Some(v) = get("epochs") {
        train.epochs_per_category = parse("epochs", v)?;
    }
    if let Some(v) = get("learning_rate") {
        train.learning_rate = parse("learning_rate", v)?;
    }
    if let Some(v) = get("lambda1") {
        train.lambda1 = parse("lambda1", v)?;
    }
    if let Some(v) = get("lambda2") {
        train.lambda2 = parse("lambda2", v)?;
    }
    if let Some(v) = get("batch_size") {
        train.batch_size = parse("batch_size", v)?;
    }
    if let Some(v) = get("replay") {
        train.replay_per_label = parse("replay", v)?;
    }
    if let Some(v) = get("optimizer") {
        train.optimizer = v.parse()?;
    }
    if let Some(v) = get("seed") {
        train.seed = parse("seed", v)?;
    }
    if let Some(v) = get("mask") {
        train.memory_mask = parse_label_list(v)?.into_iter().collect();
    }
    if let Some(v) = get("mask_scope") {
        train.mask_scope = match v {
            "final" => MaskScope::Final,
            "all" => MaskScope::All,
            other => return Err(CliError::usage(format!("mask_scope must be final or all, got `{other}`"))),
        };
    }
    if let Some(v) = get("hidden") {
        train.hidden = parse("hidden", v)?;
    }
    train.validate()?;
    let dataset = get("dataset").unwrap_or("mnist").to_string();
    let data_dir = get("data_dir").map(PathBuf::from).unwrap_or_else(|| Path::new("data").join(&dataset));
    let labels = parse_label_list(get("labels").unwrap_or("0-9"))?;
    if labels.is_empty() {
        return Err(CliError::usage("no labels to train"));
    }
    let out = get("out").map(PathBuf::from).unwrap_or_else(|| Path::new("runs").join(&dataset));
    Ok(RunSettings { dataset, data_dir, labels, out, train })
}
