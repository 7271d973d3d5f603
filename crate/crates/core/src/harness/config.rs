//! Experiment configuration: per-dataset presets and a flat `key = value`
//! text format.
//!
//! Lists are comma separated; optional counts take `none`. Lines starting
//! with `#` are comments. `dataset` and `preset` select the defaults every
//! other key overrides, wherever they appear in the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{self, DatasetId};
use crate::error::{Error, Result};
use crate::layers::{Activation, LayerSpec};
use crate::losses::RegConfig;
use crate::model::{NetworkSpec, Task};
use crate::optim::OptimHyper;
use crate::strategies::StrategyKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Architecture and hyperparameters of the original experiments.
    Paper,
    /// Fewer filters, fewer source items and short runs for a single CPU.
    Desk,
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (paper or desk)"
            ))),
        }
    }
}

pub const STRATEGY_LABELS: [&str; 4] = ["RESET", "RESET_PRF", "REUSE_ALL", "REUSE_CF"];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetId,
    /// Falls back to `$ADAPTNET_DATA/<dataset>`.
    pub data_dir: Option<PathBuf>,
    pub preset: Preset,
    /// Filters per convolutional stage; each stage is a convolution and a
    /// max-pool.
    pub conv_maps: Vec<usize>,
    /// Square kernel size per stage.
    pub conv_kernel: Vec<usize>,
    pub pool: usize,
    pub dense_units: usize,
    pub activation: Activation,
    /// Softmax units of source classifiers; `None` sizes them to the largest
    /// source label.
    pub source_units: Option<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub dropout_p: f64,
    pub l2_lambda: f64,
    pub sparsity_coeff: f64,
    pub sparsity_target: f64,
    pub batch_size: usize,
    pub alpha_mt: f64,
    /// Epoch cap of target runs.
    pub max_epochs: usize,
    pub source_max_epochs: usize,
    pub patience: usize,
    pub prf_lambda: f64,
    /// Labels from [`STRATEGY_LABELS`].
    pub strategies: Vec<String>,
    pub prior_tasks: Vec<Task>,
    pub target_tasks: Vec<Task>,
    pub runs: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub source_labels: Vec<usize>,
    pub target_labels: Vec<usize>,
    pub k_per_class: usize,
    pub source_train_limit: Option<usize>,
    pub source_valid_limit: Option<usize>,
    pub target_test_limit: Option<usize>,
}

impl ExperimentConfig {
    pub fn preset(dataset: DatasetId, preset: Preset) -> Self {
        let mut c = ExperimentConfig {
            dataset,
            data_dir: None,
            preset,
            conv_maps: vec![32],
            conv_kernel: vec![5],
            pool: 2,
            dense_units: 40,
            activation: Activation::Sigmoid,
            source_units: Some(10),
            learning_rate: 1e-5,
            momentum: 0.5,
            dropout_p: 0.5,
            l2_lambda: 0.001,
            sparsity_coeff: 1e-4,
            sparsity_target: 0.9,
            batch_size: 50,
            alpha_mt: 0.01,
            max_epochs: 2000,
            source_max_epochs: 2000,
            patience: 200,
            prf_lambda: 0.001,
            strategies: STRATEGY_LABELS.iter().map(|s| s.to_string()).collect(),
            prior_tasks: vec![Task::Cl, Task::Ae, Task::Mt],
            target_tasks: vec![Task::Cl, Task::Ae],
            runs: 2,
            seed: 1,
            out_dir: PathBuf::from("runs").join(dataset.name()),
            source_labels: (0..5).collect(),
            target_labels: (5..10).collect(),
            k_per_class: 10,
            source_train_limit: None,
            source_valid_limit: None,
            target_test_limit: None,
        };
        match dataset {
            DatasetId::Mnist => {}
            DatasetId::Cifar10 => {
                c.max_epochs = 3000;
                c.source_max_epochs = 3000;
            }
            DatasetId::Composers => {
                c.conv_maps = vec![9, 5];
                c.conv_kernel = vec![9, 5];
                c.dense_units = 256;
                c.activation = Activation::Relu;
                c.source_units = None;
                c.learning_rate = 1e-6;
                c.sparsity_target = 0.5;
                c.source_labels = (0..4).collect();
                c.target_labels = vec![4, 5];
            }
            DatasetId::Synthetic => {
                c.conv_maps = vec![4];
                c.conv_kernel = vec![3];
                c.dense_units = 16;
                c.k_per_class = 5;
            }
        }
        if preset == Preset::Desk {
            c.learning_rate = 1e-3;
            c.max_epochs = 150;
            c.source_max_epochs = 60;
            c.patience = 20;
            c.runs = 3;
            c.source_train_limit = Some(2000);
            c.source_valid_limit = Some(500);
            match dataset {
                DatasetId::Composers => {
                    c.conv_maps = vec![4, 3];
                    c.dense_units = 32;
                    c.learning_rate = 1e-4;
                }
                DatasetId::Synthetic => {}
                _ => c.conv_maps = vec![8],
            }
        }
        c
    }

    /// Parses the text format, starting from the preset it names.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    n + 1
                ))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let lookup = |key: &str| {
            pairs
                .iter()
                .rev()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
        };
        let dataset: DatasetId = lookup("dataset").unwrap_or("mnist").parse()?;
        let preset: Preset = lookup("preset").unwrap_or("paper").parse()?;
        let mut config = ExperimentConfig::preset(dataset, preset);
        for (k, v) in &pairs {
            if k != "dataset" && k != "preset" {
                config.set(k, v)?;
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::parse(&text)
    }

    /// Overrides one field. `dataset` and `preset` are rejected: they select
    /// the defaults in [`ExperimentConfig::parse`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dataset" | "preset" => {
                return Err(Error::Config(format!(
                    "`{key}` selects the defaults and must be given up front"
                )))
            }
            "data_dir" => {
                self.data_dir = if v == "none" {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            "conv_maps" => self.conv_maps = list(key, v)?,
            "conv_kernel" => self.conv_kernel = list(key, v)?,
            "pool" => self.pool = scalar(key, v)?,
            "dense_units" => self.dense_units = scalar(key, v)?,
            "activation" => self.activation = scalar(key, v)?,
            "source_units" => self.source_units = optional(key, v)?,
            "learning_rate" => self.learning_rate = scalar(key, v)?,
            "momentum" => self.momentum = scalar(key, v)?,
            "dropout_p" => self.dropout_p = scalar(key, v)?,
            "l2_lambda" => self.l2_lambda = scalar(key, v)?,
            "sparsity_coeff" => self.sparsity_coeff = scalar(key, v)?,
            "sparsity_target" => self.sparsity_target = scalar(key, v)?,
            "batch_size" => self.batch_size = scalar(key, v)?,
            "alpha_mt" => self.alpha_mt = scalar(key, v)?,
            "max_epochs" => self.max_epochs = scalar(key, v)?,
            "source_max_epochs" => self.source_max_epochs = scalar(key, v)?,
            "patience" => self.patience = scalar(key, v)?,
            "prf_lambda" => self.prf_lambda = scalar(key, v)?,
            "strategies" => {
                let labels: Vec<String> = split(v).map(|s| s.to_ascii_uppercase()).collect();
                if let Some(bad) = labels
                    .iter()
                    .find(|l| !STRATEGY_LABELS.contains(&l.as_str()))
                {
                    return Err(Error::Config(format!("unknown strategy `{bad}`")));
                }
                self.strategies = labels;
            }
            "prior_tasks" => self.prior_tasks = list(key, v)?,
            "target_tasks" => self.target_tasks = list(key, v)?,
            "runs" => self.runs = scalar(key, v)?,
            "seed" => self.seed = scalar(key, v)?,
            "out" | "out_dir" => self.out_dir = PathBuf::from(v),
            "source_labels" => self.source_labels = list(key, v)?,
            "target_labels" => self.target_labels = list(key, v)?,
            "k_per_class" => self.k_per_class = scalar(key, v)?,
            "source_train_limit" => self.source_train_limit = optional(key, v)?,
            "source_valid_limit" => self.source_valid_limit = optional(key, v)?,
            "target_test_limit" => self.target_test_limit = optional(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key `{other}`"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.conv_maps.is_empty() || self.conv_maps.len() != self.conv_kernel.len() {
            return fail("conv_maps and conv_kernel need one entry per convolutional stage".into());
        }
        if self
            .conv_maps
            .iter()
            .chain(&self.conv_kernel)
            .any(|&v| v == 0)
            || self.pool == 0
            || self.dense_units == 0
        {
            return fail("layer sizes must be positive".into());
        }
        if matches!(self.activation, Activation::Softmax) {
            return fail("softmax is reserved for the output layer".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.dropout_p) {
            return fail("momentum and dropout_p must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.alpha_mt) {
            return fail(format!("alpha_mt {} must lie in [0, 1]", self.alpha_mt));
        }
        if !(self.prf_lambda >= 0.0 && self.prf_lambda.is_finite()) {
            return fail(format!(
                "prf_lambda {} must be nonnegative",
                self.prf_lambda
            ));
        }
        if self.strategies.iter().any(|s| s == "RESET_PRF") && self.prf_lambda <= 0.0 {
            return fail("RESET_PRF needs a positive prf_lambda".into());
        }
        self.reg().validate()?;
        if self.batch_size == 0
            || self.max_epochs == 0
            || self.source_max_epochs == 0
            || self.runs == 0
        {
            return fail("batch_size, epoch caps and runs must be positive".into());
        }
        if self.k_per_class == 0 {
            return fail("k_per_class must be positive".into());
        }
        if self.strategies.is_empty() || self.target_tasks.is_empty() {
            return fail("at least one strategy and one target task are needed".into());
        }
        if self.target_tasks.contains(&Task::Mt) {
            return fail("target tasks are CL and AE".into());
        }
        if self.strategies.iter().any(|s| s != "RESET") && self.prior_tasks.is_empty() {
            return fail("strategies other than RESET need at least one prior task".into());
        }
        if let Some(units) = self.source_units {
            if let Some(&l) = self.source_labels.iter().find(|&&l| l >= units) {
                return fail(format!(
                    "source label {l} does not fit {units} output units"
                ));
            }
        }
        Ok(())
    }

    pub fn reg(&self) -> RegConfig {
        RegConfig {
            l2_lambda: self.l2_lambda,
            prior_lambda: 0.0,
            sparsity_coeff: self.sparsity_coeff,
            sparsity_target: self.sparsity_target,
        }
    }

    pub fn hyper(&self) -> OptimHyper {
        OptimHyper::new(self.learning_rate, self.momentum, self.batch_size)
    }

    /// Classifier with `classes` softmax units over inputs of `input_shape`:
    /// convolutional stages, dropout, one hidden dense layer, the output.
    pub fn classifier_spec(&self, input_shape: &[usize], classes: usize) -> Result<NetworkSpec> {
        let mut layers = Vec::new();
        for (&maps, &k) in self.conv_maps.iter().zip(&self.conv_kernel) {
            layers.push(LayerSpec::Conv {
                maps,
                kh: k,
                kw: k,
                act: self.activation,
            });
            layers.push(LayerSpec::MaxPool {
                ph: self.pool,
                pw: self.pool,
            });
        }
        if self.dropout_p > 0.0 {
            layers.push(LayerSpec::Dropout { p: self.dropout_p });
        }
        layers.push(LayerSpec::Dense {
            units: self.dense_units,
            act: self.activation,
        });
        layers.push(LayerSpec::Dense {
            units: classes,
            act: Activation::Softmax,
        });
        let spec = NetworkSpec {
            input_shape: input_shape.to_vec(),
            layers,
            task: Task::Cl,
            alpha_mt: self.alpha_mt,
            reg: self.reg(),
        };
        spec.plan()?;
        Ok(spec)
    }

    /// The directory to load the dataset from.
    pub fn resolve_data_dir(&self) -> Result<PathBuf> {
        if self.dataset == DatasetId::Synthetic {
            return Ok(self.data_dir.clone().unwrap_or_default());
        }
        let dir = self
            .data_dir
            .clone()
            .or_else(|| data::default_data_dir(self.dataset))
            .ok_or_else(|| {
                Error::Config(format!(
                    "no data directory for {}: set data_dir or {}",
                    self.dataset,
                    data::DATA_ROOT_VAR
                ))
            })?;
        if !dir.is_dir() {
            return Err(Error::Config(format!(
                "data directory {} does not exist",
                dir.display()
            )));
        }
        Ok(dir)
    }

    /// Strategy kinds in configured order, `RESET_PRF` carrying `prf_lambda`.
    pub fn strategy_kinds(&self) -> Result<Vec<StrategyKind>> {
        self.strategies
            .iter()
            .map(|s| StrategyKind::from_label(s, self.prf_lambda))
            .collect()
    }

    pub fn to_text(&self) -> String {
        fn join<T: ToString>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        fn opt(v: Option<usize>) -> String {
            v.map_or_else(|| "none".into(), |v| v.to_string())
        }
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dataset", self.dataset.to_string());
        kv("preset", self.preset.to_string());
        kv(
            "data_dir",
            self.data_dir
                .as_ref()
                .map_or_else(|| "none".into(), |p| p.display().to_string()),
        );
        kv("conv_maps", join(&self.conv_maps));
        kv("conv_kernel", join(&self.conv_kernel));
        kv("pool", self.pool.to_string());
        kv("dense_units", self.dense_units.to_string());
        kv("activation", self.activation.to_string());
        kv("source_units", opt(self.source_units));
        kv("learning_rate", self.learning_rate.to_string());
        kv("momentum", self.momentum.to_string());
        kv("dropout_p", self.dropout_p.to_string());
        kv("l2_lambda", self.l2_lambda.to_string());
        kv("sparsity_coeff", self.sparsity_coeff.to_string());
        kv("sparsity_target", self.sparsity_target.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("alpha_mt", self.alpha_mt.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("source_max_epochs", self.source_max_epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("prf_lambda", self.prf_lambda.to_string());
        kv("strategies", self.strategies.join(","));
        kv("prior_tasks", join(&self.prior_tasks));
        kv("target_tasks", join(&self.target_tasks));
        kv("runs", self.runs.to_string());
        kv("seed", self.seed.to_string());
        kv("out", self.out_dir.display().to_string());
        kv("source_labels", join(&self.source_labels));
        kv("target_labels", join(&self.target_labels));
        kv("k_per_class", self.k_per_class.to_string());
        kv("source_train_limit", opt(self.source_train_limit));
        kv("source_valid_limit", opt(self.source_valid_limit));
        kv("target_test_limit", opt(self.target_test_limit));
        s
    }
}

fn split(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn scalar<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    split(v).map(|s| scalar(key, s)).collect()
}

fn optional(key: &str, v: &str) -> Result<Option<usize>> {
    if v.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        scalar(key, v).map(Some)
    }
}
