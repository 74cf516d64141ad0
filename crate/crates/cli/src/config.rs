//! Experiment configuration files.
//!
//! A config is TOML with `[dataset]`, `[teacher]`, `[student]`, `[train]` and
//! `[eval]` sections. Command-line flags are merged into the parsed config
//! and the merged result is what gets snapshotted.

use std::path::{Path, PathBuf};

use metric_distill::data::{gen_synthetic_clusters, gen_synthetic_grids, load_csv_dataset, split_classes_half, Dataset, DegradationSpec, SyntheticSpec};
use metric_distill::loss::{DistanceKind, DistillMode, LossWeights, DEFAULT_MARGIN};
use metric_distill::model::{parse_layers, NetConfig};
use metric_distill::trainer::{check_tap_pairs, default_lambda, SemiConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SNAPSHOT_FILE: &str = "config.snapshot.toml";
pub const OUT_ENV: &str = "MDISTILL_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Defaults to `$MDISTILL_OUT/<config stem>`, or `runs/<config stem>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub teacher: NetSection,
    pub student: NetSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSection {
    Synthetic {
        num_classes: usize,
        per_class: usize,
        input_dim: usize,
        intra_std: f64,
        inter_scale: f64,
        seed: u64,
        split_seed: u64,
    },
    Grids {
        num_classes: usize,
        per_class: usize,
        channels: usize,
        height: usize,
        width: usize,
        intra_std: f64,
        seed: u64,
        split_seed: u64,
    },
    Csv {
        path: PathBuf,
        split_seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    /// `vector:D` or `grid:HxWxC`.
    pub input: String,
    /// Comma-separated layers, e.g. `affine:256,relu,affine:64`.
    pub layers: String,
    pub embedding_dim: usize,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub taps: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiSection {
    pub labeled_fraction: f64,
    #[serde(default)]
    pub use_unlabeled: bool,
    #[serde(default)]
    pub kd_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub classes_per_batch: usize,
    pub seed: u64,
    /// `baseline`, `abs` or `rel`; distillation commands default to `rel`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Defaults to 10 for `abs` and 100 for `rel`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub squared_distance: bool,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub hint: bool,
    #[serde(default)]
    pub attention: bool,
    /// `[teacher_tap, student_tap]` pairs.
    #[serde(default)]
    pub hint_pairs: Vec<[String; 2]>,
    #[serde(default)]
    pub attention_pairs: Vec<[String; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semi: Option<SemiSection>,
    /// Degradation of student inputs, e.g. `noise:0.5` or `lowres:2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_quality: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_epochs: Option<usize>,
}

fn default_margin() -> f64 {
    DEFAULT_MARGIN
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub k: Vec<usize>,
}

fn field_error(field: &str, err: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {err}"))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        if config.output_dir.is_none() {
            let stem = path.file_stem().map_or_else(|| "experiment".into(), |s| s.to_string_lossy().into_owned());
            let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            config.output_dir = Some(root.join(stem));
        }
        if let DatasetSection::Csv { path: csv, .. } = &mut config.dataset {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(config)
    }

    pub fn output_dir(&self) -> &Path {
        self.output_dir.as_deref().unwrap_or(Path::new("runs"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Creates the output directory and writes the merged config into it.
    pub fn write_snapshot(&self) -> Result<PathBuf, CliError> {
        let dir = self.output_dir();
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn teacher_net(&self) -> Result<NetConfig, CliError> {
        self.teacher.to_net("teacher")
    }

    pub fn student_net(&self) -> Result<NetConfig, CliError> {
        self.student.to_net("student")
    }

    pub fn mode(&self) -> Result<DistillMode, CliError> {
        self.train
            .mode
            .as_deref()
            .unwrap_or("rel")
            .parse()
            .map_err(|e| field_error("train.mode", e))
    }

    /// Settings for training the teacher.
    pub fn teacher_train(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = self.base_train()?;
        cfg.mode = DistillMode::Baseline;
        cfg.lr = self.train.teacher_lr.unwrap_or(cfg.lr);
        cfg.epochs = self.train.teacher_epochs.unwrap_or(cfg.epochs);
        cfg.validate().map_err(|e| field_error("train", e))?;
        Ok(cfg)
    }

    /// Settings for training the student, with every flag already merged.
    pub fn student_train(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let mut cfg = self.base_train()?;
        cfg.mode = self.mode()?;
        cfg.weights.lambda = t.lambda.unwrap_or_else(|| default_lambda(cfg.mode));
        cfg.weights.mu = t.mu.unwrap_or(if t.hint { 1.0 } else { 0.0 });
        cfg.weights.kappa = t.kappa.unwrap_or(if t.attention { 1.0 } else { 0.0 });
        cfg.use_hint = t.hint;
        cfg.use_attention = t.attention;
        cfg.hint_pairs = t.hint_pairs.iter().map(|[a, b]| (a.clone(), b.clone())).collect();
        cfg.attention_pairs = t.attention_pairs.iter().map(|[a, b]| (a.clone(), b.clone())).collect();
        cfg.semi = t.semi.as_ref().map(|s| SemiConfig {
            labeled_fraction: s.labeled_fraction,
            use_unlabeled: s.use_unlabeled,
            kd_only: s.kd_only,
        });
        cfg.cross_quality = t
            .cross_quality
            .as_deref()
            .map(str::parse::<DegradationSpec>)
            .transpose()
            .map_err(|e| field_error("train.cross_quality", e))?;
        cfg.validate().map_err(|e| field_error("train", e))?;
        Ok(cfg)
    }

    fn base_train(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let cfg = TrainConfig {
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            classes_per_batch: t.classes_per_batch,
            seed: t.seed,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            distance: if t.squared_distance { DistanceKind::Squared } else { DistanceKind::Euclidean },
            weights: LossWeights {
                margin: t.margin,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        };
        if t.classes_per_batch < 2 || t.classes_per_batch > t.batch_size {
            return Err(field_error(
                "train.classes_per_batch",
                format!("must lie in [2, batch_size], got {}", t.classes_per_batch),
            ));
        }
        Ok(cfg)
    }

    /// Checks everything a distillation run needs before any compute.
    pub fn validate_distill(&self, teacher: &NetConfig) -> Result<(NetConfig, TrainConfig), CliError> {
        let student = self.student_net()?;
        let train = self.student_train()?;
        check_tap_pairs(teacher, &student, &train).map_err(|e| field_error("train", e))?;
        self.validate_eval()?;
        Ok((student, train))
    }

    pub fn validate_eval(&self) -> Result<(), CliError> {
        if self.eval.k.is_empty() || self.eval.k.contains(&0) {
            return Err(field_error("eval.k", "must be a non-empty list of positive integers"));
        }
        Ok(())
    }

    /// Loads or generates the dataset and applies the class-disjoint split.
    pub fn dataset(&self) -> Result<Dataset, CliError> {
        let (raw, split_seed) = match &self.dataset {
            DatasetSection::Synthetic {
                num_classes,
                per_class,
                input_dim,
                intra_std,
                inter_scale,
                seed,
                split_seed,
            } => (
                gen_synthetic_clusters(&SyntheticSpec {
                    num_classes: *num_classes,
                    per_class: *per_class,
                    input_dim: *input_dim,
                    intra_std: *intra_std,
                    inter_scale: *inter_scale,
                    seed: *seed,
                }),
                *split_seed,
            ),
            DatasetSection::Grids {
                num_classes,
                per_class,
                channels,
                height,
                width,
                intra_std,
                seed,
                split_seed,
            } => (
                gen_synthetic_grids(*num_classes, *per_class, (*channels, *height, *width), *intra_std, *seed),
                *split_seed,
            ),
            DatasetSection::Csv { path, split_seed } => (load_csv_dataset(path), *split_seed),
        };
        let raw = raw.map_err(|e| field_error("dataset", e))?;
        split_classes_half(&raw, split_seed).map_err(|e| field_error("dataset", e))
    }
}

impl NetSection {
    fn to_net(&self, section: &str) -> Result<NetConfig, CliError> {
        let config = NetConfig {
            input: self.input.parse().map_err(|e| field_error(&format!("{section}.input"), e))?,
            layers: parse_layers(&self.layers).map_err(|e| field_error(&format!("{section}.layers"), e))?,
            embedding_dim: self.embedding_dim,
            normalize: self.normalize,
            taps: self.taps.clone(),
        };
        config.validate().map_err(|e| field_error(section, e))?;
        Ok(config)
    }
}
