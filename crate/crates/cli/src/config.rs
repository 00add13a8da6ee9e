//! Experiment configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use clce_core::data::{generate_blobs, load_cifar10_binary, load_csv, AugmentationPolicy, Dataset};
use clce_core::fewshot::EpisodeSpec;
use clce_core::loss::LossConfig;
use clce_core::model::{ModelDims, OptimizerConfig, TrainConfig};
use clce_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
    Cifar10 {
        directory: PathBuf,
    },
}

fn default_label_column() -> String {
    "label".into()
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Blobs {
            classes: 20,
            per_class: 60,
            dim: 32,
            spread: 0.6,
            seed: 0,
        }
    }
}

/// How the dataset is divided between training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitConfig {
    /// Train and evaluate on everything.
    None,
    /// The first `ceil(train_fraction · C)` classes train; the rest are the
    /// novel classes used for evaluation.
    ClassDisjoint { train_fraction: f64 },
    /// Every class in both parts; the first `ceil(train_fraction · n)` items
    /// of each class train.
    PerSample { train_fraction: f64 },
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig::ClassDisjoint { train_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            embed_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub augmentation: Option<AugmentationPolicy>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            optimizer: t.optimizer,
            augmentation: t.augmentation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewshotConfig {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub episodes: usize,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        let spec = EpisodeSpec::default();
        Self {
            way: spec.way,
            shot: spec.shot,
            query: spec.query,
            episodes: 600,
        }
    }
}

impl FewshotConfig {
    pub fn spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            way: self.way,
            shot: self.shot,
            query: self.query,
        }
    }
}

/// Ablation arms of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Cross-entropy only; λ is forced to 0.
    Ce,
    /// Contrastive term without hard-negative weighting.
    CeCl,
    /// Contrastive term with hard-negative weighting.
    CeClHnm,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Ce => "ce",
            Arm::CeCl => "ce_cl",
            Arm::CeClHnm => "ce_cl_hnm",
        }
    }

    pub fn loss(self, base: &LossConfig, lambda: f64) -> LossConfig {
        match self {
            Arm::Ce => LossConfig { lambda: 0.0, ..*base },
            Arm::CeCl => LossConfig {
                lambda,
                hnm_enabled: false,
                ..*base
            },
            Arm::CeClHnm => LossConfig {
                lambda,
                hnm_enabled: true,
                ..*base
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    /// Empty means the training batch size.
    pub batch_sizes: Vec<usize>,
    pub arms: Vec<Arm>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0],
            batch_sizes: Vec::new(),
            arms: vec![Arm::CeClHnm],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub target_class: usize,
    pub max_pairs: usize,
    pub bins: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            target_class: 0,
            max_pairs: 20_000,
            bins: clce_core::diagnostics::DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub loss: LossConfig,
    pub fewshot: FewshotConfig,
    pub sweep: SweepConfig,
    pub diagnose: DiagnoseConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            loss: LossConfig::default(),
            fewshot: FewshotConfig::default(),
            sweep: SweepConfig::default(),
            diagnose: DiagnoseConfig::default(),
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Reads and validates a config. Relative dataset paths resolve against
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        match &mut cfg.dataset {
            DatasetConfig::Csv { path, .. } | DatasetConfig::Cifar10 { directory: path } if path.is_relative() => {
                *path = base.join(&*path);
            }
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Csv { path, .. } if !path.is_file() => {
                return Err(Error::Config(format!("dataset file {} does not exist", path.display())));
            }
            DatasetConfig::Cifar10 { directory } if !directory.is_dir() => {
                return Err(Error::Config(format!(
                    "dataset directory {} does not exist",
                    directory.display()
                )));
            }
            _ => {}
        }
        match self.split {
            SplitConfig::ClassDisjoint { train_fraction } | SplitConfig::PerSample { train_fraction }
                if !(train_fraction > 0.0 && train_fraction < 1.0) =>
            {
                return Err(Error::Config(format!("train_fraction must lie in (0, 1), got {train_fraction}")));
            }
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.model.embed_dim == 0 || self.model.hidden.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        self.loss.validate()?;
        self.train_config(self.train.batch_size, self.loss, 0).validate()?;
        self.fewshot.spec().validate()?;
        if self.fewshot.episodes == 0 {
            return Err(Error::Config("fewshot.episodes must be >= 1".into()));
        }
        if self.sweep.lambdas.is_empty() || self.sweep.arms.is_empty() {
            return Err(Error::Config("sweep lambdas and arms must not be empty".into()));
        }
        if let Some(l) = self.sweep.lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::Config(format!("sweep lambda {l} outside [0, 1]")));
        }
        if self.sweep.batch_sizes.iter().any(|&b| b < 2) {
            return Err(Error::Config("sweep batch sizes must be >= 2".into()));
        }
        if self.diagnose.max_pairs == 0 || self.diagnose.bins == 0 {
            return Err(Error::Config("diagnose max_pairs and bins must be >= 1".into()));
        }
        Ok(())
    }

    pub fn train_config(&self, batch_size: usize, loss: LossConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size,
            epochs: self.train.epochs,
            seed,
            loss,
            optimizer: self.train.optimizer,
            augmentation: self.train.augmentation.clone(),
        }
    }

    pub fn model_dims(&self, input_dim: usize, num_classes: usize) -> ModelDims {
        ModelDims {
            input_dim,
            hidden: self.model.hidden.clone(),
            embed_dim: self.model.embed_dim,
            num_classes,
        }
    }

    pub fn sweep_batch_sizes(&self) -> Vec<usize> {
        if self.sweep.batch_sizes.is_empty() {
            vec![self.train.batch_size]
        } else {
            self.sweep.batch_sizes.clone()
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetConfig::Blobs {
                classes,
                per_class,
                dim,
                spread,
                seed,
            } => generate_blobs(*classes, *per_class, *dim, *spread, *seed),
            DatasetConfig::Csv { path, label_column } => load_csv(path, label_column),
            DatasetConfig::Cifar10 { directory } => load_cifar10_binary(directory),
        }
    }

    pub fn splits(&self) -> Result<Splits> {
        Splits::new(self.load_dataset()?, self.split)
    }
}

/// Training and evaluation parts of a dataset. Evaluation labels are the
/// original dataset labels.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
    /// `eval_classes[l]` is the original label of evaluation label `l`.
    pub eval_classes: Vec<usize>,
}

impl Splits {
    pub fn new(data: Dataset, split: SplitConfig) -> Result<Self> {
        let all: Vec<usize> = (0..data.num_classes).collect();
        match split {
            SplitConfig::None => Ok(Self {
                train: data.clone(),
                eval: data,
                eval_classes: all,
            }),
            SplitConfig::PerSample { train_fraction } => {
                let (train, eval) = data.split_per_class(train_fraction)?;
                Ok(Self {
                    train,
                    eval,
                    eval_classes: all,
                })
            }
            SplitConfig::ClassDisjoint { train_fraction } => {
                let cut = (train_fraction * data.num_classes as f64).ceil() as usize;
                if cut == 0 || cut >= data.num_classes {
                    return Err(Error::InsufficientData(format!(
                        "class-disjoint split of {} classes leaves one side empty",
                        data.num_classes
                    )));
                }
                let eval_classes: Vec<usize> = (cut..data.num_classes).collect();
                Ok(Self {
                    train: data.restrict_to_classes(&all[..cut])?,
                    eval: data.restrict_to_classes(&eval_classes)?,
                    eval_classes,
                })
            }
        }
    }

    pub fn eval_labels(&self) -> Vec<usize> {
        self.eval.labels.iter().map(|&l| self.eval_classes[l]).collect()
    }
}
