//! The experiment pipeline: source models, every adapted target model, and
//! their learning curves.
//!
//! Output directory layout:
//!
//! ```text
//! config.txt            the configuration, re-runnable as is
//! checkpoints/          source-<TASK>.ckpt and <cell>.ckpt, best snapshots
//! cells/                <cell>.csv, the per-run records of each finished cell
//! metrics_raw.csv       every per-run record, in grid order
//! metrics.csv           records averaged over runs
//! source_metrics.csv    training curves of the source models
//! MANIFEST              cell name, status and checkpoint path, tab separated
//! ```
//!
//! A cell is finished once its CSV exists. Re-running over the same
//! directory reuses finished cells and source checkpoints, so an interrupted
//! experiment resumes where it stopped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::data::{self, Dataset, DomainSplit, FewShotSpec, Subset};
use crate::error::{Error, Result};
use crate::losses;
use crate::model::{
    self, init_params, load_checkpoint, save_checkpoint, write_atomic, Checkpoint, EvalMetrics,
};
use crate::model::{NetworkSpec, ParamSet, PriorTerm, Task};
use crate::optim::{run_epoch, EarlyStopState, OptimHyper, OptimState};
use crate::seed::{self, Stream};
use crate::strategies::{prepare_target, AdaptationStrategy, StrategyKind};
use crate::tensor::Tensor;

use super::config::ExperimentConfig;
use super::metrics::{self, CurveKey, Metric, MetricsRecord, PADDING_NOTE};

/// Items per forward chunk during evaluation.
const EVAL_CHUNK: usize = 256;

/// Evaluation-mode metrics over a whole subset, computed in chunks. `Task::Mt`
/// gives the scalarised loss of a multi-task network and no accuracy.
pub fn evaluate_subset(
    spec: &NetworkSpec,
    params: &ParamSet,
    subset: &Subset,
    task: Task,
) -> Result<EvalMetrics> {
    if subset.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty subset".into()));
    }
    if task == Task::Mt {
        let cl = evaluate_subset(spec, params, subset, Task::Cl)?;
        let ae = evaluate_subset(spec, params, subset, Task::Ae)?;
        return Ok(EvalMetrics {
            loss: losses::multitask(cl.loss, ae.loss, spec.alpha_mt)?,
            accuracy: None,
        });
    }
    let mut loss = 0.0;
    let mut correct = 0.0;
    for (items, labels) in subset
        .items
        .chunks(EVAL_CHUNK)
        .zip(subset.labels.chunks(EVAL_CHUNK))
    {
        let refs: Vec<&Tensor> = items.iter().collect();
        let m = model::evaluate(spec, params, &refs, labels, task)?;
        loss += m.loss * items.len() as f64;
        correct += m.accuracy.unwrap_or(0.0) * items.len() as f64;
    }
    let n = subset.len() as f64;
    Ok(EvalMetrics {
        loss: loss / n,
        accuracy: (task == Task::Cl).then_some(correct / n),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub test: Option<EvalMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best_params: ParamSet,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Everything one training run needs besides its starting parameters.
#[derive(Debug, Clone, Copy)]
pub struct TrainSetup<'a> {
    pub spec: &'a NetworkSpec,
    pub train: &'a Subset,
    pub valid: &'a Subset,
    /// Evaluated after every epoch when present.
    pub test: Option<&'a Subset>,
    pub hyper: OptimHyper,
    pub max_epochs: usize,
    pub patience: usize,
    pub run_seed: u64,
    pub prior: Option<PriorTerm<'a>>,
}

/// Trains until early stopping halts; returns the best-validation snapshot.
pub fn train(setup: TrainSetup<'_>, mut params: ParamSet) -> Result<TrainOutcome> {
    let spec = setup.spec;
    let mut state = OptimState::new(setup.hyper, &params);
    let mut stop = EarlyStopState::new(setup.patience, setup.max_epochs);
    let mut history = Vec::new();
    for epoch in 1..=setup.max_epochs {
        let m = run_epoch(
            spec,
            &mut params,
            setup.train.samples(),
            &mut state,
            setup.prior,
            setup.run_seed,
            epoch as u64,
        )?;
        let valid_loss = evaluate_subset(spec, &params, setup.valid, spec.task)?.loss;
        let test = setup
            .test
            .map(|t| evaluate_subset(spec, &params, t, spec.task))
            .transpose()?;
        history.push(EpochRecord {
            epoch,
            train_loss: m.mean_loss,
            valid_loss,
            test,
        });
        if stop.update(epoch, valid_loss, &params) {
            break;
        }
    }
    let best_epoch = stop.best_epoch();
    let best_params = stop.into_best_params().ok_or_else(|| Error::NonFinite {
        param: "validation loss".into(),
    })?;
    Ok(TrainOutcome {
        best_params,
        best_epoch,
        history,
    })
}

fn curve_records(key: &CurveKey, run_id: usize, history: &[EpochRecord]) -> Vec<MetricsRecord> {
    let mut out = Vec::new();
    for h in history {
        let mut push = |metric, value| {
            out.push(MetricsRecord {
                key: key.clone(),
                run_id: Some(run_id),
                epoch: h.epoch,
                metric,
                value,
            })
        };
        push(Metric::TrainLoss, h.train_loss);
        push(Metric::ValidLoss, h.valid_loss);
        if let Some(t) = h.test {
            push(Metric::TestLoss, t.loss);
            if let Some(a) = t.accuracy {
                push(Metric::TestAccuracy, a);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CellStatus {
    Trained,
    Resumed,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellReport {
    pub name: String,
    pub status: CellStatus,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub cells: Vec<CellReport>,
}

impl ExperimentReport {
    pub fn failures(&self) -> Vec<&CellReport> {
        self.cells
            .iter()
            .filter(|c| matches!(c.status, CellStatus::Failed(_)))
            .collect()
    }
}

/// One target run of the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub strategy: AdaptationStrategy,
    pub target_task: Task,
    pub run_id: usize,
}

impl Cell {
    pub fn name(&self) -> String {
        format!(
            "{}-{}-{}-run{}",
            self.strategy.label(),
            self.strategy.prior_label(),
            self.target_task,
            self.run_id
        )
    }
}

/// Grid cells in execution order: run, target task, strategy, prior task.
pub fn grid(config: &ExperimentConfig) -> Result<Vec<Cell>> {
    let kinds = config.strategy_kinds()?;
    let mut cells = Vec::new();
    for run_id in 0..config.runs {
        for &target_task in &config.target_tasks {
            for &kind in &kinds {
                let priors: Vec<Option<Task>> = if kind.requires_prior() {
                    config.prior_tasks.iter().map(|&t| Some(t)).collect()
                } else {
                    vec![None]
                };
                for prior in priors {
                    cells.push(Cell {
                        strategy: AdaptationStrategy::new(kind, prior)?,
                        target_task,
                        run_id,
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Source tasks the grid needs a prior model for.
pub fn source_tasks(config: &ExperimentConfig) -> Result<Vec<Task>> {
    let needs_prior = config
        .strategy_kinds()?
        .iter()
        .any(StrategyKind::requires_prior);
    Ok(if needs_prior {
        config.prior_tasks.clone()
    } else {
        Vec::new()
    })
}

fn task_index(task: Task) -> u64 {
    match task {
        Task::Cl => 0,
        Task::Ae => 1,
        Task::Mt => 2,
    }
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn join_labels(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

struct Pipeline<'a> {
    config: &'a ExperimentConfig,
    dataset: Dataset,
    input_shape: Vec<usize>,
    out: PathBuf,
}

impl Pipeline<'_> {
    fn ckpt_path(&self, name: &str) -> PathBuf {
        self.out.join("checkpoints").join(format!("{name}.ckpt"))
    }

    fn cell_path(&self, name: &str) -> PathBuf {
        self.out.join("cells").join(format!("{name}.csv"))
    }

    fn split(&self, run_seed: u64) -> Result<DomainSplit> {
        let c = self.config;
        let mut split = data::split_domains(
            &self.dataset,
            &c.source_labels,
            &c.target_labels,
            FewShotSpec {
                k_per_class: c.k_per_class,
                seed: run_seed,
            },
        )?;
        if let Some(n) = c.source_train_limit {
            split.source.train = split.source.train.subsample(n, c.seed);
        }
        if let Some(n) = c.source_valid_limit {
            split.source.valid = split.source.valid.subsample(n, c.seed ^ 0x0056_414c_4944);
        }
        if let Some(n) = c.target_test_limit {
            split.target.test = split.target.test.subsample(n, run_seed);
        }
        Ok(split)
    }

    fn source_units(&self, split: &DomainSplit) -> usize {
        self.config
            .source_units
            .unwrap_or_else(|| split.source.output_units())
    }

    fn write_cell(&self, name: &str, records: &[MetricsRecord]) -> Result<()> {
        write_atomic(&self.cell_path(name), &metrics::to_csv_bytes(records, &[])?)
    }

    /// A finished cell's records, if it finished and its checkpoint is intact.
    fn finished(&self, name: &str) -> Option<Vec<MetricsRecord>> {
        let csv = self.cell_path(name);
        if !csv.is_file() || !self.ckpt_path(name).is_file() {
            return None;
        }
        match metrics::read_csv_file(&csv) {
            Ok(r) => Some(r),
            Err(e) => {
                warn!("ignoring unreadable {}: {e}", csv.display());
                None
            }
        }
    }

    fn source_model(
        &self,
        task: Task,
        split: &DomainSplit,
    ) -> Result<(Checkpoint, Vec<MetricsRecord>, CellStatus)> {
        let c = self.config;
        let name = format!("source-{task}");
        let base = c.classifier_spec(&self.input_shape, self.source_units(split))?;
        let spec = model::with_task(&base, task, None)?;
        if let Some(records) = self.finished(&name) {
            let ckpt = load_checkpoint(&self.ckpt_path(&name))?;
            ckpt.ensure_compatible(&spec)?;
            return Ok((ckpt, records, CellStatus::Resumed));
        }
        info!(
            "training source {task} model on {} items",
            split.source.train.len()
        );
        let seed = seed::derive(c.seed, Stream::Init, 0x5352_0000 + task_index(task));
        let outcome = train(
            TrainSetup {
                spec: &spec,
                train: &split.source.train,
                valid: &split.source.valid,
                test: None,
                hyper: c.hyper(),
                max_epochs: c.source_max_epochs,
                patience: c.patience,
                run_seed: seed,
                prior: None,
            },
            init_params(&spec, seed)?,
        )?;
        let meta = BTreeMap::from([
            ("dataset".to_string(), c.dataset.to_string()),
            ("role".to_string(), "source".to_string()),
            ("task".to_string(), task.to_string()),
            ("classes".to_string(), join_labels(&split.source.classes)),
            ("reindexed".to_string(), "false".to_string()),
            ("seed".to_string(), seed.to_string()),
            ("best_epoch".to_string(), outcome.best_epoch.to_string()),
            ("epochs_run".to_string(), outcome.history.len().to_string()),
        ]);
        save_checkpoint(&self.ckpt_path(&name), &spec, &outcome.best_params, &meta)?;
        let key = CurveKey {
            dataset: c.dataset.to_string(),
            strategy: "SOURCE".into(),
            prior_task: "none".into(),
            target_task: task.to_string(),
        };
        let records = curve_records(&key, 0, &outcome.history);
        self.write_cell(&name, &records)?;
        let ckpt = load_checkpoint(&self.ckpt_path(&name))?;
        Ok((ckpt, records, CellStatus::Trained))
    }

    fn target_cell(
        &self,
        cell: &Cell,
        split: &DomainSplit,
        priors: &BTreeMap<u64, Checkpoint>,
    ) -> Result<(Vec<MetricsRecord>, CellStatus)> {
        let c = self.config;
        let name = cell.name();
        let run_seed = c.seed + cell.run_id as u64;
        let base = c.classifier_spec(&self.input_shape, split.target.output_units())?;
        let spec = model::with_task(&base, cell.target_task, None)?;
        if let Some(records) = self.finished(&name) {
            load_checkpoint(&self.ckpt_path(&name))?.ensure_compatible(&spec)?;
            return Ok((records, CellStatus::Resumed));
        }
        let prior = match cell.strategy.prior_task {
            Some(t) => Some(
                priors
                    .get(&task_index(t))
                    .ok_or_else(|| Error::Config(format!("no {t} source model is available")))?,
            ),
            None => None,
        };
        let init_seed = seed::derive(run_seed, Stream::Init, task_index(cell.target_task));
        let prepared = prepare_target(&cell.strategy, prior, &spec, init_seed)?;
        info!("training {name}");
        let outcome = train(
            TrainSetup {
                spec: &spec,
                train: &split.target.train,
                valid: &split.target.valid,
                test: Some(&split.target.test),
                hyper: c.hyper(),
                max_epochs: c.max_epochs,
                patience: c.patience,
                run_seed,
                prior: prepared.prior_term(),
            },
            prepared.params.clone(),
        )?;
        let meta = BTreeMap::from([
            ("dataset".to_string(), c.dataset.to_string()),
            ("role".to_string(), "target".to_string()),
            ("task".to_string(), cell.target_task.to_string()),
            ("classes".to_string(), join_labels(&split.target.classes)),
            ("reindexed".to_string(), "true".to_string()),
            ("strategy".to_string(), cell.strategy.label().to_string()),
            ("prior_task".to_string(), cell.strategy.prior_label()),
            ("run_id".to_string(), cell.run_id.to_string()),
            ("seed".to_string(), run_seed.to_string()),
            ("best_epoch".to_string(), outcome.best_epoch.to_string()),
            ("epochs_run".to_string(), outcome.history.len().to_string()),
        ]);
        save_checkpoint(&self.ckpt_path(&name), &spec, &outcome.best_params, &meta)?;
        let key = CurveKey {
            dataset: c.dataset.to_string(),
            strategy: cell.strategy.label().to_string(),
            prior_task: cell.strategy.prior_label(),
            target_task: cell.target_task.to_string(),
        };
        let records = curve_records(&key, cell.run_id, &outcome.history);
        self.write_cell(&name, &records)?;
        Ok((records, CellStatus::Trained))
    }
}

/// Runs the whole grid. Configuration and data problems fail immediately; a
/// failure inside a grid cell is logged, reported and skipped.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let cells = grid(config)?;
    let data_dir = config.resolve_data_dir()?;
    let dataset = data::load(config.dataset, &data_dir)?;
    let input_shape = dataset
        .item_shape()
        .ok_or_else(|| Error::Config(format!("dataset {} is empty", config.dataset)))?
        .to_vec();
    let out = config.out_dir.clone();
    for dir in [out.clone(), out.join("checkpoints"), out.join("cells")] {
        mkdir(&dir)?;
    }
    write_atomic(&out.join("config.txt"), config.to_text().as_bytes())?;
    let pipeline = Pipeline {
        config,
        dataset,
        input_shape,
        out: out.clone(),
    };
    // Fail fast on unusable label sets before any training.
    let first_split = pipeline.split(config.seed)?;
    config.classifier_spec(&pipeline.input_shape, pipeline.source_units(&first_split))?;

    let mut reports = Vec::new();
    let mut priors = BTreeMap::new();
    let mut source_records = Vec::new();
    for task in source_tasks(config)? {
        let name = format!("source-{task}");
        let checkpoint = pipeline.ckpt_path(&name);
        match pipeline.source_model(task, &first_split) {
            Ok((ckpt, records, status)) => {
                priors.insert(task_index(task), ckpt);
                source_records.extend(records);
                reports.push(CellReport {
                    name,
                    status,
                    checkpoint,
                });
            }
            Err(e) => {
                warn!("{name} failed: {e}");
                reports.push(CellReport {
                    name,
                    status: CellStatus::Failed(e.to_string()),
                    checkpoint,
                });
            }
        }
    }

    let mut records = Vec::new();
    let mut splits: BTreeMap<usize, DomainSplit> = BTreeMap::new();
    for cell in &cells {
        let name = cell.name();
        let checkpoint = pipeline.ckpt_path(&name);
        let split = match splits.entry(cell.run_id) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => e.insert(if cell.run_id == 0 {
                first_split.clone()
            } else {
                pipeline.split(config.seed + cell.run_id as u64)?
            }),
        };
        match pipeline.target_cell(cell, split, &priors) {
            Ok((r, status)) => {
                records.extend(r);
                reports.push(CellReport {
                    name,
                    status,
                    checkpoint,
                });
            }
            Err(e) => {
                warn!("{name} failed: {e}");
                reports.push(CellReport {
                    name,
                    status: CellStatus::Failed(e.to_string()),
                    checkpoint,
                });
            }
        }
        splits.retain(|&r, _| r >= cell.run_id);
    }

    write_atomic(
        &out.join("metrics_raw.csv"),
        &metrics::to_csv_bytes(&records, &[])?,
    )?;
    let averaged = if records.is_empty() {
        Vec::new()
    } else {
        metrics::average_runs(&records)?
    };
    write_atomic(
        &out.join("metrics.csv"),
        &metrics::to_csv_bytes(&averaged, &[PADDING_NOTE])?,
    )?;
    write_atomic(
        &out.join("source_metrics.csv"),
        &metrics::to_csv_bytes(&source_records, &[])?,
    )?;
    let mut manifest = String::from("# cell\tstatus\tcheckpoint\n");
    for r in &reports {
        let status = match &r.status {
            CellStatus::Trained => "trained".to_string(),
            CellStatus::Resumed => "resumed".to_string(),
            CellStatus::Failed(e) => format!("failed: {}", e.replace(['\t', '\n'], " ")),
        };
        let rel = r.checkpoint.strip_prefix(&out).unwrap_or(&r.checkpoint);
        manifest.push_str(&format!("{}\t{status}\t{}\n", r.name, rel.display()));
    }
    write_atomic(&out.join("MANIFEST"), manifest.as_bytes())?;
    Ok(ExperimentReport {
        out_dir: out,
        cells: reports,
    })
}

/// Metrics of a saved model on the test items of its own domain, read from
/// the checkpoint's `classes` and `reindexed` metadata. Without metadata the
/// whole test partition is used with labels unchanged.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    task: Task,
) -> Result<EvalMetrics> {
    let classes: Vec<usize> = match ckpt.metadata.get("classes") {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Incompatible(format!("checkpoint classes `{list}`")))?,
        None => (0..dataset.num_classes()).collect(),
    };
    let reindexed = ckpt.metadata.get("reindexed").is_some_and(|v| v == "true");
    let mut subset = Subset::default();
    for i in 0..dataset.len() {
        if dataset.partitions[i] != data::Partition::Test {
            continue;
        }
        let Some(pos) = classes.iter().position(|&c| c == dataset.labels[i]) else {
            continue;
        };
        subset.items.push(dataset.items[i].clone());
        subset
            .labels
            .push(if reindexed { pos } else { dataset.labels[i] });
        subset.indices.push(i);
    }
    if dataset.item_shape() != Some(ckpt.spec.input_shape.as_slice()) {
        return Err(Error::Incompatible(format!(
            "model expects inputs {:?}, dataset items are {:?}",
            ckpt.spec.input_shape,
            dataset.item_shape()
        )));
    }
    evaluate_subset(&ckpt.spec, &ckpt.params, &subset, task)
}
