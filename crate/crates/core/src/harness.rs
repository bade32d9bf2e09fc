//! Experiment orchestration: configuration files, training and evaluation
//! runs, ablation sweeps, histogram export and multi-seed aggregation.
//!
//! A run directory is self-describing:
//!
//! ```text
//! config.snapshot      resolved configuration (key=value)
//! part{i}.ckpt         one checkpoint per leave-out classifier
//! train_log.csv        per-epoch training log
//! scores_{set}.csv     score dump written by eval
//! report_{set}.kv      metrics written by eval
//! hist_{set}.csv       histograms written by report
//! ```

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};

use crate::data::{self, ClassPartition, LabeledDataset};
use crate::detection::{detect, DetectorConfig, Ensemble, ScoreVariant};
use crate::error::{Error, Result};
use crate::metrics::{self, AggregateReport, EvalReport, METRIC_NAMES};
use crate::model::{Checkpoint, MlpClassifier};
use crate::tensor::Tensor;
use crate::training::{self, LossVariant, TrainConfig, TrainLogRow};

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
/// Evaluation set that scores the ID test set against itself.
pub const ID_TEST_SET: &str = "id_test";
pub const HISTOGRAM_BINS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Mixture {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
    },
    Cifar10 {
        paths: Vec<PathBuf>,
        /// Keep at most this many records; 0 keeps all.
        subsample: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OodKind {
    Uniform,
    Gaussian,
    HeldOut,
}

impl OodKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Gaussian => "gaussian",
            Self::HeldOut => "heldout",
        }
    }
}

/// One OOD source, written `kind:seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OodSpec {
    pub kind: OodKind,
    pub seed: u64,
}

impl OodSpec {
    pub fn new(kind: OodKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }
}

impl fmt::Display for OodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.seed)
    }
}

impl FromStr for OodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, seed) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("OOD spec `{s}` must be kind:seed")))?;
        let kind = match kind.trim() {
            "uniform" => OodKind::Uniform,
            "gaussian" => OodKind::Gaussian,
            "heldout" => OodKind::HeldOut,
            other => {
                return Err(Error::Config(format!(
                    "unknown OOD kind `{other}`; expected uniform, gaussian or heldout"
                )))
            }
        };
        let seed = seed
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad seed in OOD spec `{s}`")))?;
        Ok(Self { kind, seed })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionMode {
    /// Random partition drawn from the run seed.
    Random,
    /// The configured `manual_groups`.
    Manual,
}

impl PartitionMode {
    fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Manual => "manual",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrids {
    pub splits: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub temperatures: Vec<f64>,
}

impl Default for AblationGrids {
    fn default() -> Self {
        Self {
            splits: vec![3, 5, 10, 20],
            epsilons: vec![0.0, 0.000313, 0.000625, 0.00125, 0.002, 0.003],
            temperatures: vec![1.0, 10.0, 100.0, 1000.0, 5000.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    /// Seed for data generation and the train/val/test split.
    pub data_seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub k: usize,
    pub partition_mode: PartitionMode,
    pub manual_groups: Option<Vec<Vec<usize>>>,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    /// Run seeds; each one controls the partition and initialization.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub eval_sets: Vec<OodSpec>,
    pub val_ood: OodSpec,
    pub ood_count: usize,
    /// Held-out cluster distance as a multiple of the class-center radius.
    pub heldout_radius: f64,
    pub ablation: AblationGrids,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk_preset()
    }
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| format!("cannot parse `{s}`")))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl ExperimentConfig {
    /// Desk-scale benchmark: eight Gaussian clusters on a circle, K=4.
    pub fn desk_preset() -> Self {
        Self {
            name: "desk".into(),
            dataset: DatasetSpec::Mixture {
                classes: 8,
                per_class: 500,
                dim: 2,
                spread: 0.04,
            },
            data_seed: 7,
            val_fraction: 0.1,
            test_fraction: 0.2,
            k: 4,
            partition_mode: PartitionMode::Random,
            manual_groups: Some(vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]]),
            train: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            detector: DetectorConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("runs/desk"),
            eval_sets: vec![
                OodSpec::new(OodKind::Uniform, 101),
                OodSpec::new(OodKind::Gaussian, 102),
                OodSpec::new(OodKind::HeldOut, 103),
            ],
            val_ood: OodSpec::new(OodKind::Uniform, 104),
            ood_count: 1000,
            heldout_radius: 0.3,
            ablation: AblationGrids {
                splits: vec![2, 4, 8],
                ..AblationGrids::default()
            },
        }
    }

    pub fn class_count(&self) -> usize {
        match &self.dataset {
            DatasetSpec::Mixture { classes, .. } => *classes,
            DatasetSpec::Cifar10 { .. } => data::CIFAR_CLASSES,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parses the line-oriented `key=value` format; `#` starts a comment.
    /// Unset keys take the desk preset's values. An optional `preset=desk`
    /// line must precede all other keys.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk_preset();
        let mut seen_other = false;
        let (mut classes, mut per_class, mut dim, mut spread) = (8usize, 500usize, 2usize, 0.04f64);
        let mut cifar_paths: Option<Vec<PathBuf>> = None;
        let mut subsample = 0usize;
        let mut kind = String::from("mixture");
        let mut k_line: Option<usize> = None;
        let mut key_lines: HashMap<String, usize> = HashMap::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key=value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: String| at(format!("key `{key}`: {e}"));
            macro_rules! num {
                () => {
                    value
                        .parse()
                        .map_err(|_| bad(format!("cannot parse `{value}`")))?
                };
            }
            macro_rules! parsed {
                () => {
                    value.parse().map_err(|e: Error| bad(e.to_string()))?
                };
            }
            if key == "preset" {
                if seen_other {
                    return Err(at("`preset` must precede all other keys".into()));
                }
                if value != "desk" {
                    return Err(bad(format!("unknown preset `{value}`; available: desk")));
                }
                continue;
            }
            seen_other = true;
            key_lines.insert(key.to_string(), lineno + 1);
            match key {
                "name" => cfg.name = value.to_string(),
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "seeds" => cfg.seeds = parse_list(value).map_err(bad)?,
                "dataset.kind" => kind = value.to_string(),
                "dataset.classes" => classes = num!(),
                "dataset.per_class" => per_class = num!(),
                "dataset.dim" => dim = num!(),
                "dataset.spread" => spread = num!(),
                "dataset.seed" => cfg.data_seed = num!(),
                "dataset.paths" => {
                    cifar_paths = Some(
                        value
                            .split(',')
                            .map(str::trim)
                            .filter(|s| !s.is_empty())
                            .map(PathBuf::from)
                            .collect(),
                    )
                }
                "dataset.subsample" => subsample = num!(),
                "split.val" => cfg.val_fraction = num!(),
                "split.test" => cfg.test_fraction = num!(),
                "partition.k" => k_line = Some(num!()),
                "partition.mode" => {
                    cfg.partition_mode = match value {
                        "random" => PartitionMode::Random,
                        "manual" => PartitionMode::Manual,
                        other => return Err(bad(format!("unknown mode `{other}`; expected random or manual"))),
                    }
                }
                "partition.groups" => {
                    cfg.manual_groups = if value.is_empty() {
                        None
                    } else {
                        Some(
                            value
                                .split(';')
                                .map(parse_list::<usize>)
                                .collect::<std::result::Result<_, _>>()
                                .map_err(bad)?,
                        )
                    }
                }
                "model.hidden" => cfg.train.hidden = parse_list(value).map_err(bad)?,
                "train.epochs" => cfg.train.epochs = num!(),
                "train.batch_size" => cfg.train.batch_size = num!(),
                "train.momentum" => cfg.train.momentum = num!(),
                "train.weight_decay" => cfg.train.weight_decay = num!(),
                "train.lr_start" => cfg.train.lr_start = num!(),
                "train.lr_end" => cfg.train.lr_end = num!(),
                "train.margin" => cfg.train.margin = num!(),
                "train.beta" => cfg.train.beta = num!(),
                "train.delta" => cfg.train.delta = num!(),
                "train.loss" => cfg.train.loss_variant = parsed!(),
                "train.augment_pad" => cfg.train.augment_pad = num!(),
                "detect.temperature" => cfg.detector.temperature = num!(),
                "detect.epsilon" => cfg.detector.epsilon = num!(),
                "detect.score" => cfg.detector.score_variant = parsed!(),
                "ood.eval" => {
                    cfg.eval_sets = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(OodSpec::from_str)
                        .collect::<Result<_>>()
                        .map_err(|e| bad(e.to_string()))?
                }
                "ood.val" => cfg.val_ood = parsed!(),
                "ood.count" => cfg.ood_count = num!(),
                "ood.heldout_radius" => cfg.heldout_radius = num!(),
                "ablate.splits" => cfg.ablation.splits = parse_list(value).map_err(bad)?,
                "ablate.epsilons" => cfg.ablation.epsilons = parse_list(value).map_err(bad)?,
                "ablate.temperatures" => cfg.ablation.temperatures = parse_list(value).map_err(bad)?,
                _ => return Err(at(format!("unknown key `{key}`"))),
            }
        }

        cfg.dataset = match kind.as_str() {
            "mixture" => DatasetSpec::Mixture {
                classes,
                per_class,
                dim,
                spread,
            },
            "cifar10" => DatasetSpec::Cifar10 {
                paths: cifar_paths.ok_or_else(|| {
                    Error::Config("key `dataset.paths` is required for dataset.kind=cifar10".into())
                })?,
                subsample,
            },
            other => {
                return Err(Error::Config(format!(
                    "key `dataset.kind`: unknown kind `{other}`; expected mixture or cifar10"
                )))
            }
        };
        if let Some(k) = k_line {
            cfg.k = k;
        } else if cfg.partition_mode == PartitionMode::Manual {
            cfg.k = cfg.manual_groups.as_ref().map_or(0, Vec::len);
        }
        cfg.validate().map_err(|e| match e {
            Error::Config(msg) => {
                let line = msg
                    .strip_prefix("key `")
                    .and_then(|rest| rest.split_once('`'))
                    .and_then(|(key, _)| key_lines.get(key));
                match line {
                    Some(n) => Error::Config(format!("line {n}: {msg}")),
                    None => Error::Config(msg),
                }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.class_count();
        if self.k < 2 || self.k > n {
            return Err(Error::Config(format!(
                "key `partition.k`: need 2 <= K <= N, got K={} N={n}",
                self.k
            )));
        }
        if self.partition_mode == PartitionMode::Manual {
            let groups = self.manual_groups.as_ref().ok_or_else(|| {
                Error::Config("key `partition.groups` is required for partition.mode=manual".into())
            })?;
            if groups.len() != self.k {
                return Err(Error::Config(format!(
                    "key `partition.k`: manual partition has {} groups but K={}",
                    groups.len(),
                    self.k
                )));
            }
        }
        if let Some(groups) = &self.manual_groups {
            data::partition_manual(groups, n)
                .map_err(|e| Error::Config(format!("key `partition.groups`: {e}")))?;
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("key `seeds`: at least one seed is required".into()));
        }
        if self.ood_count == 0 {
            return Err(Error::Config("key `ood.count` must be positive".into()));
        }
        if self.eval_sets.contains(&self.val_ood) {
            return Err(Error::Config(format!(
                "key `ood.val`: validation OOD set {} must differ from every evaluation set",
                self.val_ood
            )));
        }
        for (i, a) in self.eval_sets.iter().enumerate() {
            if self.eval_sets[..i].iter().any(|b| b.kind == a.kind) {
                return Err(Error::Config(format!(
                    "key `ood.eval`: evaluation set `{}` listed twice",
                    a.name()
                )));
            }
        }
        if let DatasetSpec::Mixture {
            classes,
            per_class,
            dim,
            spread,
        } = &self.dataset
        {
            if *classes < 2 || *per_class < 1 || *dim < 1 || !(*spread >= 0.0) {
                return Err(Error::Config("dataset.* mixture parameters are invalid".into()));
            }
        }
        self.train
            .validate()
            .map_err(|e| Error::Config(format!("train.*: {e}")))?;
        self.detector
            .validate()
            .map_err(|e| Error::Config(format!("detect.*: {e}")))?;
        Ok(())
    }

    /// Every field as `key=value` lines; `parse` reproduces the config.
    pub fn to_snapshot(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("name", self.name.clone());
        put("output_dir", self.output_dir.display().to_string());
        put("seeds", join(&self.seeds));
        match &self.dataset {
            DatasetSpec::Mixture {
                classes,
                per_class,
                dim,
                spread,
            } => {
                put("dataset.kind", "mixture".into());
                put("dataset.classes", classes.to_string());
                put("dataset.per_class", per_class.to_string());
                put("dataset.dim", dim.to_string());
                put("dataset.spread", spread.to_string());
            }
            DatasetSpec::Cifar10 { paths, subsample } => {
                put("dataset.kind", "cifar10".into());
                let paths: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
                put("dataset.paths", paths.join(","));
                put("dataset.subsample", subsample.to_string());
            }
        }
        put("dataset.seed", self.data_seed.to_string());
        put("split.val", self.val_fraction.to_string());
        put("split.test", self.test_fraction.to_string());
        put("partition.k", self.k.to_string());
        put("partition.mode", self.partition_mode.name().into());
        let groups = self.manual_groups.as_ref().map_or(String::new(), |g| {
            g.iter().map(|grp| join(grp)).collect::<Vec<_>>().join(";")
        });
        put("partition.groups", groups);
        let t = &self.train;
        put("model.hidden", join(&t.hidden));
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.momentum", t.momentum.to_string());
        put("train.weight_decay", t.weight_decay.to_string());
        put("train.lr_start", t.lr_start.to_string());
        put("train.lr_end", t.lr_end.to_string());
        put("train.margin", t.margin.to_string());
        put("train.beta", t.beta.to_string());
        put("train.delta", t.delta.to_string());
        put("train.loss", t.loss_variant.name().into());
        put("train.augment_pad", t.augment_pad.to_string());
        put("detect.temperature", self.detector.temperature.to_string());
        put("detect.epsilon", self.detector.epsilon.to_string());
        put("detect.score", self.detector.score_variant.name().into());
        put("ood.eval", join(&self.eval_sets));
        put("ood.val", self.val_ood.to_string());
        put("ood.count", self.ood_count.to_string());
        put("ood.heldout_radius", self.heldout_radius.to_string());
        put("ablate.splits", join(&self.ablation.splits));
        put("ablate.epsilons", join(&self.ablation.epsilons));
        put("ablate.temperatures", join(&self.ablation.temperatures));
        out
    }

    /// The class partition for a run seed.
    pub fn partition_for(&self, seed: u64) -> Result<ClassPartition> {
        match self.partition_mode {
            PartitionMode::Random => data::partition_random(self.class_count(), self.k, seed),
            PartitionMode::Manual => data::partition_manual(
                self.manual_groups.as_deref().unwrap_or_default(),
                self.class_count(),
            ),
        }
    }

    /// Names accepted by `cmd_eval`.
    pub fn set_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.eval_sets.iter().map(|s| s.name().to_string()).collect();
        names.push(ID_TEST_SET.to_string());
        names
    }
}

/// Materialized datasets of an experiment.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    pub val_ood: Tensor,
    pub ood_sets: Vec<(String, Tensor)>,
}

impl PreparedData {
    /// Features of a named evaluation set.
    pub fn set(&self, name: &str) -> Result<&Tensor> {
        if name == ID_TEST_SET {
            return Ok(&self.test.features);
        }
        self.ood_sets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::UnknownSet {
                name: name.to_string(),
                available: self
                    .ood_sets
                    .iter()
                    .map(|(n, _)| n.clone())
                    .chain([ID_TEST_SET.to_string()])
                    .collect(),
            })
    }
}

fn generate_ood(cfg: &ExperimentConfig, spec: OodSpec, dim: usize) -> Result<Tensor> {
    let n = cfg.ood_count;
    Ok(match spec.kind {
        OodKind::Uniform => data::noise_uniform(n, dim, spec.seed),
        OodKind::Gaussian => data::noise_gaussian(n, dim, spec.seed),
        OodKind::HeldOut => {
            let spread = match cfg.dataset {
                DatasetSpec::Mixture { spread, .. } => spread,
                DatasetSpec::Cifar10 { .. } => 0.05,
            };
            data::synth_heldout_clusters(cfg.class_count(), n, dim, spread, cfg.heldout_radius, spec.seed)?
        }
    })
}

/// Generates or loads the ID data, splits it, and builds the OOD sets.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let full = match &cfg.dataset {
        DatasetSpec::Mixture {
            classes,
            per_class,
            dim,
            spread,
        } => data::synth_gaussian_mixture(*classes, *per_class, *dim, *spread, cfg.data_seed)?,
        DatasetSpec::Cifar10 { paths, subsample } => {
            let ds = data::load_cifar10_binary(paths)?;
            if *subsample > 0 {
                ds.subsample(*subsample, cfg.data_seed)
            } else {
                ds
            }
        }
    };
    let (train, val, test) =
        full.stratified_split(cfg.val_fraction, cfg.test_fraction, cfg.data_seed)?;
    train.require_all_classes()?;
    let dim = full.dim();
    let val_ood = generate_ood(cfg, cfg.val_ood, dim)?;
    let ood_sets = cfg
        .eval_sets
        .iter()
        .map(|&s| Ok((s.name().to_string(), generate_ood(cfg, s, dim)?)))
        .collect::<Result<_>>()?;
    Ok(PreparedData {
        train,
        val,
        test,
        val_ood,
        ood_sets,
    })
}

pub fn checkpoint_path(run_dir: &Path, part_index: usize) -> PathBuf {
    run_dir.join(format!("part{part_index}.ckpt"))
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub run_dir: PathBuf,
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<TrainLogRow>,
}

impl TrainedRun {
    pub fn ensemble(&self) -> Result<Ensemble> {
        let n = self.checkpoints.first().map_or(0, |c| c.class_count);
        Ensemble::new(self.checkpoints.iter().map(|c| c.model.clone()).collect(), n)
    }
}

/// Trains the K leave-out classifiers for one seed and writes the run
/// directory.
pub fn train_run(
    cfg: &ExperimentConfig,
    seed: u64,
    prepared: &PreparedData,
    run_dir: &Path,
    parallel: bool,
) -> Result<TrainedRun> {
    cfg.validate()?;
    let partition = cfg.partition_for(seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    info!(
        "training {} classifiers for seed {seed} into {}",
        partition.k(),
        run_dir.display()
    );
    create_dir(run_dir)?;
    let trained = training::train_ensemble(
        &prepared.train,
        &prepared.val,
        &partition,
        &prepared.val_ood,
        &train_cfg,
        parallel,
    )?;

    let snapshot = ExperimentConfig {
        seeds: vec![seed],
        output_dir: run_dir.to_path_buf(),
        ..cfg.clone()
    };
    write_file(&run_dir.join(SNAPSHOT_FILE), &snapshot.to_snapshot())?;
    let mut log_text = format!("{}\n", TrainLogRow::CSV_HEADER);
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    for t in trained {
        t.checkpoint.save(&checkpoint_path(run_dir, t.model.part_index()))?;
        for row in &t.log {
            log_text.push_str(&row.to_csv());
            log_text.push('\n');
        }
        log.extend(t.log);
        checkpoints.push(t.checkpoint);
    }
    write_file(&run_dir.join(TRAIN_LOG_FILE), &log_text)?;
    Ok(TrainedRun {
        run_dir: run_dir.to_path_buf(),
        checkpoints,
        log,
    })
}

/// `train` subcommand: first seed, into `output_dir`.
pub fn cmd_train(cfg: &ExperimentConfig, parallel: bool) -> Result<TrainedRun> {
    cfg.validate()?;
    let prepared = prepare_data(cfg)?;
    train_run(cfg, cfg.seeds[0], &prepared, &cfg.output_dir, parallel)
}

/// Reads the snapshot and all K checkpoints of a run directory.
pub fn load_run(run_dir: &Path) -> Result<(ExperimentConfig, Ensemble)> {
    let cfg = ExperimentConfig::load(&run_dir.join(SNAPSHOT_FILE))?;
    let k = cfg.partition_for(cfg.seeds[0])?.k();
    let mut models = Vec::with_capacity(k);
    for i in 0..k {
        let path = checkpoint_path(run_dir, i);
        if !path.exists() {
            return Err(Error::MissingCheckpoint { part_index: i, path });
        }
        models.push(Checkpoint::load(&path)?.model);
    }
    let ensemble = Ensemble::new(models, cfg.class_count())?;
    Ok((cfg, ensemble))
}

/// One line of a score dump.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub sample_id: usize,
    pub is_id: bool,
    pub ood_score: f64,
    pub predicted_class: usize,
    pub true_class: Option<usize>,
}

pub const SCORES_HEADER: &str = "sample_id,source,ood_score,predicted_class,true_class";

pub fn scores_to_csv(rows: &[ScoreRow]) -> String {
    let mut out = format!("{SCORES_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.sample_id,
            if r.is_id { "id" } else { "ood" },
            r.ood_score,
            r.predicted_class,
            r.true_class.map_or(String::new(), |c| c.to_string())
        );
    }
    out
}

pub fn parse_scores_csv(text: &str) -> Result<Vec<ScoreRow>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Validation(format!("score dump line {}: malformed `{line}`", lineno + 1));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(bad());
        }
        rows.push(ScoreRow {
            sample_id: cols[0].parse().map_err(|_| bad())?,
            is_id: match cols[1] {
                "id" => true,
                "ood" => false,
                _ => return Err(bad()),
            },
            ood_score: cols[2].parse().map_err(|_| bad())?,
            predicted_class: cols[3].parse().map_err(|_| bad())?,
            true_class: if cols[4].is_empty() {
                None
            } else {
                Some(cols[4].parse().map_err(|_| bad())?)
            },
        });
    }
    Ok(rows)
}

/// ID-test scores computed once and reused across OOD sets.
struct IdScores {
    scores: Vec<f64>,
    predictions: Vec<usize>,
}

fn score_id(ensemble: &Ensemble, prepared: &PreparedData, det: &DetectorConfig) -> Result<IdScores> {
    let results = detect(ensemble, &prepared.test.features, det)?;
    Ok(IdScores {
        scores: results.iter().map(|r| r.ood_score).collect(),
        predictions: results.iter().map(|r| r.predicted_class).collect(),
    })
}

fn evaluate_with(
    ensemble: &Ensemble,
    prepared: &PreparedData,
    id: &IdScores,
    set: &str,
    det: &DetectorConfig,
) -> Result<(EvalReport, Vec<ScoreRow>)> {
    let ood = detect(ensemble, prepared.set(set)?, det)?;
    let ood_scores: Vec<f64> = ood.iter().map(|r| r.ood_score).collect();
    let report = EvalReport::compute(&id.scores, &ood_scores, &id.predictions, &prepared.test.labels)?
        .with_echo("set", set)
        .with_echo("temperature", det.temperature)
        .with_echo("epsilon", det.epsilon)
        .with_echo("score", det.score_variant)
        .with_echo("k", ensemble.classifiers().len());
    let mut rows = Vec::with_capacity(id.scores.len() + ood.len());
    for (i, (&s, &p)) in id.scores.iter().zip(&id.predictions).enumerate() {
        rows.push(ScoreRow {
            sample_id: i,
            is_id: true,
            ood_score: s,
            predicted_class: p,
            true_class: Some(prepared.test.labels[i]),
        });
    }
    for (j, r) in ood.iter().enumerate() {
        rows.push(ScoreRow {
            sample_id: id.scores.len() + j,
            is_id: false,
            ood_score: r.ood_score,
            predicted_class: r.predicted_class,
            true_class: None,
        });
    }
    Ok((report, rows))
}

/// Scores the ID test set and each named set; one report per set.
pub fn evaluate_sets(
    ensemble: &Ensemble,
    prepared: &PreparedData,
    sets: &[String],
    det: &DetectorConfig,
) -> Result<Vec<(EvalReport, Vec<ScoreRow>)>> {
    // Resolve names before any scoring work.
    for s in sets {
        prepared.set(s)?;
    }
    let id = score_id(ensemble, prepared, det)?;
    sets.iter()
        .map(|s| evaluate_with(ensemble, prepared, &id, s, det))
        .collect()
}

/// `eval` subcommand: writes `scores_{set}.csv` and `report_{set}.kv`.
pub fn cmd_eval(run_dir: &Path, set: &str) -> Result<EvalReport> {
    let (cfg, ensemble) = load_run(run_dir)?;
    let prepared = prepare_data(&cfg)?;
    let (report, rows) = evaluate_sets(&ensemble, &prepared, &[set.to_string()], &cfg.detector)?
        .pop()
        .expect("one set requested");
    write_file(&run_dir.join(format!("scores_{set}.csv")), &scores_to_csv(&rows))?;
    write_file(&run_dir.join(format!("report_{set}.kv")), &report.to_kv())?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Splits,
    SplitType,
    Epsilon,
    Temperature,
    Loss,
    Score,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        Self::Splits,
        Self::SplitType,
        Self::Epsilon,
        Self::Temperature,
        Self::Loss,
        Self::Score,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Splits => "splits",
            Self::SplitType => "split_type",
            Self::Epsilon => "epsilon",
            Self::Temperature => "temperature",
            Self::Loss => "loss",
            Self::Score => "score",
        }
    }

    /// Axes that only change the detector and can reuse trained checkpoints.
    pub fn detector_only(self) -> bool {
        matches!(self, Self::Epsilon | Self::Temperature | Self::Score)
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s.trim()).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!("unknown axis `{s}`; available: {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: String,
    pub set: String,
    pub report: EvalReport,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("axis,value,set,{}\n", EvalReport::csv_header());
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.axis.name(), r.value, r.set, r.report.to_csv_row());
    }
    out
}

fn eval_set_names(cfg: &ExperimentConfig) -> Vec<String> {
    cfg.eval_sets.iter().map(|s| s.name().to_string()).collect()
}

/// `ablate` subcommand. Detector-only axes train once and re-score; the
/// other axes retrain per grid point. Writes `ablation_{axis}.csv` into the
/// output directory.
pub fn cmd_ablate(cfg: &ExperimentConfig, axis: AblationAxis, parallel: bool) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let prepared = prepare_data(cfg)?;
    let seed = cfg.seeds[0];
    let sets = eval_set_names(cfg);
    let axis_dir = cfg.output_dir.join(format!("ablation_{}", axis.name()));
    let mut rows = Vec::new();
    let mut push = |value: String, reports: Vec<(EvalReport, Vec<ScoreRow>)>| {
        for (set, (report, _)) in sets.iter().zip(reports) {
            rows.push(AblationRow {
                axis,
                value: value.clone(),
                set: set.clone(),
                report,
            });
        }
    };

    if axis.detector_only() {
        let run = train_run(cfg, seed, &prepared, &axis_dir.join("base"), parallel)?;
        let ensemble = run.ensemble()?;
        let detectors: Vec<(String, DetectorConfig)> = match axis {
            AblationAxis::Epsilon => cfg
                .ablation
                .epsilons
                .iter()
                .map(|&e| (e.to_string(), DetectorConfig { epsilon: e, ..cfg.detector }))
                .collect(),
            AblationAxis::Temperature => cfg
                .ablation
                .temperatures
                .iter()
                .map(|&t| (t.to_string(), DetectorConfig { temperature: t, ..cfg.detector }))
                .collect(),
            _ => ScoreVariant::ALL
                .iter()
                .map(|&v| (v.name().to_string(), DetectorConfig { score_variant: v, ..cfg.detector }))
                .collect(),
        };
        for (value, det) in detectors {
            push(value, evaluate_sets(&ensemble, &prepared, &sets, &det)?);
        }
    } else {
        let variants: Vec<(String, ExperimentConfig)> = match axis {
            AblationAxis::Splits => cfg
                .ablation
                .splits
                .iter()
                .filter(|&&k| k >= 2 && k <= cfg.class_count())
                .map(|&k| {
                    (
                        k.to_string(),
                        ExperimentConfig {
                            k,
                            partition_mode: PartitionMode::Random,
                            ..cfg.clone()
                        },
                    )
                })
                .collect(),
            AblationAxis::SplitType => {
                let mut v = vec![(
                    "random".to_string(),
                    ExperimentConfig {
                        partition_mode: PartitionMode::Random,
                        ..cfg.clone()
                    },
                )];
                match &cfg.manual_groups {
                    Some(groups) => v.push((
                        "manual".to_string(),
                        ExperimentConfig {
                            partition_mode: PartitionMode::Manual,
                            k: groups.len(),
                            ..cfg.clone()
                        },
                    )),
                    None => warn!("no partition.groups configured; skipping the manual split"),
                }
                v
            }
            _ => LossVariant::ALL
                .iter()
                .map(|&l| {
                    let mut c = cfg.clone();
                    c.train.loss_variant = l;
                    (l.name().to_string(), c)
                })
                .collect(),
        };
        for (value, variant_cfg) in variants {
            let run = train_run(&variant_cfg, seed, &prepared, &axis_dir.join(&value), parallel)?;
            push(value, evaluate_sets(&run.ensemble()?, &prepared, &sets, &cfg.detector)?);
        }
    }
    create_dir(&cfg.output_dir)?;
    write_file(
        &cfg.output_dir.join(format!("ablation_{}.csv", axis.name())),
        &ablation_csv(&rows),
    )?;
    Ok(rows)
}

/// Fixed-width histogram of ID and OOD scores over the observed range.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub id_counts: Vec<usize>,
    pub ood_counts: Vec<usize>,
}

pub fn histogram(id_scores: &[f64], ood_scores: &[f64], bins: usize) -> Histogram {
    let all = id_scores.iter().chain(ood_scores);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi == lo {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let bin_of = |s: f64| (((s - lo) / width) as usize).min(bins - 1);
    let mut id_counts = vec![0; bins];
    let mut ood_counts = vec![0; bins];
    for &s in id_scores {
        id_counts[bin_of(s)] += 1;
    }
    for &s in ood_scores {
        ood_counts[bin_of(s)] += 1;
    }
    Histogram {
        edges,
        id_counts,
        ood_counts,
    }
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,lower_edge,upper_edge,id_count,ood_count\n");
        for b in 0..self.id_counts.len() {
            let _ = writeln!(
                out,
                "{b},{},{},{},{}",
                self.edges[b],
                self.edges[b + 1],
                self.id_counts[b],
                self.ood_counts[b]
            );
        }
        out
    }
}

/// `report` subcommand: one `hist_{set}.csv` per `scores_{set}.csv`.
pub fn cmd_report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut dumps: Vec<(String, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let set = name.strip_prefix("scores_")?.strip_suffix(".csv")?.to_string();
            Some((set, e.path()))
        })
        .collect();
    dumps.sort();
    if dumps.is_empty() {
        return Err(Error::Validation(format!(
            "no scores_*.csv dumps in {}; run eval first",
            run_dir.display()
        )));
    }
    let mut written = Vec::new();
    for (set, path) in dumps {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let rows = parse_scores_csv(&text)?;
        let id: Vec<f64> = rows.iter().filter(|r| r.is_id).map(|r| r.ood_score).collect();
        let ood: Vec<f64> = rows.iter().filter(|r| !r.is_id).map(|r| r.ood_score).collect();
        if ood.is_empty() {
            warn!("{}: no OOD scores; writing an ID-only histogram", path.display());
        }
        let out = run_dir.join(format!("hist_{set}.csv"));
        write_file(&out, &histogram(&id, &ood, HISTOGRAM_BINS).to_csv())?;
        written.push(out);
    }
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct SetAggregate {
    pub set: String,
    pub aggregate: AggregateReport,
    /// Per-seed reports, in seed-list order.
    pub runs: Vec<(u64, EvalReport)>,
}

pub fn multiseed_csv(sets: &[SetAggregate]) -> String {
    let mut out = String::from("set,metric,mean,std,runs\n");
    for s in sets {
        for (m, name) in METRIC_NAMES.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{name},{:.6},{:.6},{}",
                s.set, s.aggregate.mean[m], s.aggregate.std[m], s.aggregate.runs
            );
        }
    }
    out
}

/// `multiseed` subcommand: train and evaluate every seed under
/// `output_dir/seed_{s}`, aggregate per evaluation set, and write
/// `multiseed.csv`.
pub fn cmd_multiseed(cfg: &ExperimentConfig, parallel: bool) -> Result<Vec<SetAggregate>> {
    cfg.validate()?;
    let prepared = prepare_data(cfg)?;
    let sets = eval_set_names(cfg);
    let mut per_set: Vec<Vec<(u64, EvalReport)>> = vec![Vec::new(); sets.len()];
    for &seed in &cfg.seeds {
        let run_dir = cfg.output_dir.join(format!("seed_{seed}"));
        let run = train_run(cfg, seed, &prepared, &run_dir, parallel)?;
        let results = evaluate_sets(&run.ensemble()?, &prepared, &sets, &cfg.detector)?;
        for (i, (set, (report, rows))) in sets.iter().zip(results).enumerate() {
            write_file(&run_dir.join(format!("scores_{set}.csv")), &scores_to_csv(&rows))?;
            write_file(&run_dir.join(format!("report_{set}.kv")), &report.to_kv())?;
            per_set[i].push((seed, report));
        }
    }
    let aggregates = sets
        .into_iter()
        .zip(per_set)
        .map(|(set, runs)| {
            let reports: Vec<EvalReport> = runs.iter().map(|(_, r)| r.clone()).collect();
            Ok(SetAggregate {
                set,
                aggregate: metrics::aggregate_runs(&reports)?,
                runs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("multiseed.csv"), &multiseed_csv(&aggregates))?;
    Ok(aggregates)
}

/// Detector of the single-model baseline: plain max-softmax.
pub fn baseline_detector() -> DetectorConfig {
    DetectorConfig {
        temperature: 1.0,
        epsilon: 0.0,
        score_variant: ScoreVariant::Softmax,
    }
}

/// All-class classifier trained with cross-entropy only, same schedule.
pub fn train_baseline(cfg: &ExperimentConfig, seed: u64, prepared: &PreparedData) -> Result<MlpClassifier> {
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    Ok(training::train_plain_classifier(&prepared.train, &prepared.val, &prepared.val_ood, &train_cfg)?.model)
}

/// Reports of the baseline on the named sets.
pub fn evaluate_baseline(
    model: &MlpClassifier,
    prepared: &PreparedData,
    sets: &[String],
) -> Result<Vec<EvalReport>> {
    let ensemble = Ensemble::new(vec![model.clone()], prepared.train.class_count)?;
    Ok(evaluate_sets(&ensemble, prepared, sets, &baseline_detector())?
        .into_iter()
        .map(|(r, _)| r)
        .collect())
}
