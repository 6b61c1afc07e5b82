//! Config-driven experiments: single-task baselines and a multi-task run
//! per seed, evaluation, aggregation and report files.
//!
//! Seed `r` of an experiment uses run seed `train.seed + r`. The multi-task
//! model is initialized from `derive(run, 100)` and the baseline for task
//! `k` from `derive(run, 200 + k)`, so runs that differ only in `lambda`
//! start from the same parameters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, load_csv, MultiTaskDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluation::{
    delta_mtl, fit_head, knn_probe, theorem_trend_check, universality_on, DeltaMtlInput, FitBudget, ProbeScore,
    TrendFamily, TrendResult, UniversalityMode, UniversalityReport,
};
use crate::losses::{task_metric, Direction};
use crate::model::{encode, ModelBundle};
use crate::seed;
use crate::trainer::{train, write_history_file, StepRecord, TrainConfig};

pub const REPORT_FORMAT: &str = "dgr-report/1";

/// The grid searched when no list is given.
pub const DEFAULT_LAMBDAS: [f64; 3] = [1e-5, 1e-6, 1e-7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// Relative paths resolve against the config file's directory.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub universality: bool,
    pub universality_mode: UniversalityMode,
    pub fit: FitBudget,
    /// kNN probe on the held-out split; off when absent.
    pub probe_k: Option<usize>,
    /// Trend check sample count; off when absent.
    pub trend_samples: Option<usize>,
    pub trend: TrendFamily,
    /// Keep every n-th step of the penalty trajectory in the report.
    pub trajectory_stride: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            universality: false,
            universality_mode: UniversalityMode::Product,
            fit: FitBudget::default(),
            probe_k: None,
            trend_samples: None,
            trend: TrendFamily::default(),
            trajectory_stride: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_repeat")]
    pub repeat: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    /// Where report files go. Not echoed into reports, so the same run
    /// written to two places yields identical files.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_repeat() -> usize {
    3
}

fn default_test_fraction() -> f64 {
    0.2
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a TOML config. A relative CSV path is resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let DatasetSource::Csv { path: p } = &mut cfg.dataset {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeat < 1 {
            return Err(Error::config("repeat", "must be at least 1"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction", "must lie in (0, 1)"));
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
        }
        self.train.validate()?;
        let ev = &self.evaluation;
        if ev.probe_k == Some(0) {
            return Err(Error::config("evaluation.probe_k", "must be at least 1"));
        }
        if matches!(ev.trend_samples, Some(s) if s < 3) {
            return Err(Error::config("evaluation.trend_samples", "needs at least 3 samples"));
        }
        if ev.trajectory_stride < 1 {
            return Err(Error::config("evaluation.trajectory_stride", "must be at least 1"));
        }
        ev.trend.validate()
    }

    pub fn load_dataset(&self) -> Result<MultiTaskDataset> {
        match &self.dataset {
            DatasetSource::Synthetic(spec) => gen_synthetic(spec),
            DatasetSource::Csv { path } => load_csv(path),
        }
    }

    /// Run seed of repeat `r`.
    pub fn run_seed(&self, r: usize) -> u64 {
        self.train.seed.wrapping_add(r as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalityEntry {
    pub dummy: usize,
    pub report: UniversalityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub task_ids: Vec<String>,
    pub directions: Vec<Direction>,
    /// Held-out metric of each single-task model.
    pub baseline_metrics: Vec<f64>,
    /// Held-out metric of the multi-task model, per task.
    pub mtl_metrics: Vec<f64>,
    /// Percent.
    pub delta_mtl: f64,
    pub final_objective: f64,
    /// `(step, penalty per task)` every `trajectory_stride` steps.
    pub penalty_trajectory: Vec<(u64, Vec<f64>)>,
    pub universality: Option<Vec<UniversalityEntry>>,
    pub probe: Option<Vec<ProbeScore>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAggregate {
    pub task_id: String,
    pub baseline_mean: f64,
    pub mtl_mean: f64,
    pub mtl_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub num_seeds: usize,
    pub tasks: Vec<TaskAggregate>,
    pub delta_mtl_mean: f64,
    pub delta_mtl_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedReport>,
    pub aggregate: Aggregate,
    pub trend: Option<TrendResult>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Means and sample standard deviations across seeds.
pub fn aggregate(seeds: &[SeedReport]) -> Result<Aggregate> {
    let first = seeds.first().ok_or_else(|| Error::invalid("no seed reports to aggregate"))?;
    if seeds.iter().any(|s| s.task_ids != first.task_ids) {
        return Err(Error::invalid("seed reports cover different tasks"));
    }
    let tasks = first
        .task_ids
        .iter()
        .enumerate()
        .map(|(k, id)| {
            let base: Vec<f64> = seeds.iter().map(|s| s.baseline_metrics[k]).collect();
            let mtl: Vec<f64> = seeds.iter().map(|s| s.mtl_metrics[k]).collect();
            let (mtl_mean, mtl_std) = mean_std(&mtl);
            TaskAggregate { task_id: id.clone(), baseline_mean: mean_std(&base).0, mtl_mean, mtl_std }
        })
        .collect();
    let deltas: Vec<f64> = seeds.iter().map(|s| s.delta_mtl).collect();
    let (delta_mtl_mean, delta_mtl_std) = mean_std(&deltas);
    Ok(Aggregate { num_seeds: seeds.len(), tasks, delta_mtl_mean, delta_mtl_std })
}

/// Held-out metric of every task head of `bundle`.
pub fn test_metrics(bundle: &ModelBundle, test: &MultiTaskDataset) -> Result<Vec<f64>> {
    let z = encode(&bundle.encoder, test.inputs())?;
    test.tasks()
        .iter()
        .enumerate()
        .map(|(k, spec)| task_metric(spec, &test.labels()[k], &bundle.predictors[k].mlp.forward(&z)?))
        .collect()
}

/// Train/test split shared by every seed of an experiment.
pub fn split(config: &ExperimentConfig, dataset: &MultiTaskDataset) -> Result<(MultiTaskDataset, MultiTaskDataset)> {
    dataset.split(config.test_fraction, seed::derive(config.train.seed, 7))
}

/// Single-task baselines for repeat `r`: one encoder and head per task,
/// trained without the penalty.
pub fn train_baselines(config: &ExperimentConfig, r: usize, train_set: &MultiTaskDataset, test: &MultiTaskDataset) -> Result<Vec<f64>> {
    let run = config.run_seed(r);
    (0..train_set.num_tasks())
        .map(|k| {
            let mut tc = config.train.clone();
            tc.seed = seed::derive(run, 200 + k as u64);
            tc.dgr.lambda = 0.0;
            let out = train(&tc, &train_set.single_task(k))?;
            Ok(test_metrics(&out.bundle, &test.single_task(k))?[0])
        })
        .collect()
}

/// Trained multi-task model for repeat `r` together with its history.
pub fn train_mtl(config: &ExperimentConfig, r: usize, train_set: &MultiTaskDataset) -> Result<(ModelBundle, Vec<StepRecord>)> {
    let mut tc = config.train.clone();
    tc.seed = seed::derive(config.run_seed(r), 100);
    let out = train(&tc, train_set)?;
    Ok((out.bundle, out.history))
}

fn evaluate_seed(
    config: &ExperimentConfig,
    r: usize,
    bundle: &ModelBundle,
    history: &[StepRecord],
    baseline: Vec<f64>,
    train_set: &MultiTaskDataset,
    test: &MultiTaskDataset,
) -> Result<SeedReport> {
    let mtl_metrics = test_metrics(bundle, test)?;
    let tasks = test.tasks();
    let inputs: Vec<DeltaMtlInput> =
        tasks.iter().enumerate().map(|(k, t)| DeltaMtlInput::new(baseline[k], mtl_metrics[k], t.direction)).collect();
    let ev = &config.evaluation;
    let universality = if ev.universality {
        let z = encode(&bundle.encoder, train_set.inputs())?;
        let mut entries = Vec::new();
        for (k, spec) in tasks.iter().enumerate() {
            let fit = fit_head(&bundle.predictors[k], &z, &train_set.labels()[k], &spec.loss, &ev.fit)?;
            for (j, dummy) in bundle.dummies[k].iter().enumerate() {
                let report = universality_on(&z, dummy, &fit.predictor, &train_set.labels()[k], spec, ev.universality_mode)?;
                entries.push(UniversalityEntry { dummy: j, report });
            }
        }
        Some(entries)
    } else {
        None
    };
    let probe = ev.probe_k.map(|k| knn_probe(&bundle.encoder, train_set, test, k)).transpose()?;
    let penalty_trajectory = history
        .iter()
        .filter(|h| (h.step - 1) % ev.trajectory_stride as u64 == 0 || h.step == history.len() as u64)
        .map(|h| (h.step, h.penalties.clone()))
        .collect();
    Ok(SeedReport {
        seed: config.run_seed(r),
        task_ids: tasks.iter().map(|t| t.id.clone()).collect(),
        directions: tasks.iter().map(|t| t.direction).collect(),
        baseline_metrics: baseline,
        delta_mtl: delta_mtl(&inputs)?,
        mtl_metrics,
        final_objective: history.last().map_or(f64::NAN, |h| h.objective),
        penalty_trajectory,
        universality,
        probe,
    })
}

/// Everything produced by one experiment, including per-seed histories
/// (which go to their own files rather than into the report).
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub histories: Vec<Vec<StepRecord>>,
    pub bundles: Vec<ModelBundle>,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Runs every seed with `jobs` worker threads. Baselines can be supplied
/// (one vector per seed) to share them between runs that differ only in
/// the penalty.
pub fn run_with_baselines(config: &ExperimentConfig, baselines: Option<&[Vec<f64>]>, jobs: usize) -> Result<ExperimentRun> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let (train_set, test) = split(config, &dataset)?;
    if let Some(b) = baselines {
        if b.len() != config.repeat {
            return Err(Error::invalid(format!("{} baseline sets for {} seeds", b.len(), config.repeat)));
        }
    }
    let per_seed: Vec<(SeedReport, Vec<StepRecord>, ModelBundle)> = pool(jobs)?.install(|| {
        (0..config.repeat)
            .into_par_iter()
            .map(|r| {
                let base = match baselines {
                    Some(b) => b[r].clone(),
                    None => train_baselines(config, r, &train_set, &test)?,
                };
                let (bundle, history) = train_mtl(config, r, &train_set)?;
                let report = evaluate_seed(config, r, &bundle, &history, base, &train_set, &test)?;
                Ok((report, history, bundle))
            })
            .collect::<Result<_>>()
    })?;
    let trend = config
        .evaluation
        .trend_samples
        .map(|n| theorem_trend_check(&config.evaluation.trend, n, config.train.seed))
        .transpose()?;
    let mut seeds = Vec::new();
    let mut histories = Vec::new();
    let mut bundles = Vec::new();
    for (s, h, b) in per_seed {
        seeds.push(s);
        histories.push(h);
        bundles.push(b);
    }
    let aggregate = aggregate(&seeds)?;
    let report = ExperimentReport { format: REPORT_FORMAT.into(), config: config.clone(), seeds, aggregate, trend };
    Ok(ExperimentRun { report, histories, bundles })
}

pub fn run_experiment(config: &ExperimentConfig, jobs: usize) -> Result<ExperimentRun> {
    run_with_baselines(config, None, jobs)
}

/// Baseline metrics for every seed of `config`.
pub fn baselines(config: &ExperimentConfig, jobs: usize) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let (train_set, test) = split(config, &dataset)?;
    pool(jobs)?.install(|| (0..config.repeat).into_par_iter().map(|r| train_baselines(config, r, &train_set, &test)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lambda: f64,
    pub delta_mtl_mean: f64,
    pub delta_mtl_std: f64,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best_lambda: f64,
    pub runs: Vec<ExperimentRun>,
}

/// Index of the largest score; equal scores go to the smaller lambda.
pub fn select_best(rows: &[GridRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let rb = &rows[b];
                if r.delta_mtl_mean > rb.delta_mtl_mean || (r.delta_mtl_mean == rb.delta_mtl_mean && r.lambda < rb.lambda) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// One experiment per lambda, sharing the single-task baselines.
pub fn grid_search(config: &ExperimentConfig, lambdas: &[f64], jobs: usize) -> Result<GridResult> {
    if lambdas.is_empty() {
        return Err(Error::config("lambda", "the grid needs at least one value"));
    }
    for &l in lambdas {
        if !(l.is_finite() && l >= 0.0) {
            return Err(Error::config("lambda", format!("{l} is not a finite value >= 0")));
        }
    }
    let base = baselines(config, jobs)?;
    let mut runs = Vec::with_capacity(lambdas.len());
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut cfg = config.clone();
        cfg.train.dgr.lambda = lambda;
        let run = run_with_baselines(&cfg, Some(&base), jobs)?;
        let a = &run.report.aggregate;
        rows.push(GridRow { lambda, delta_mtl_mean: a.delta_mtl_mean, delta_mtl_std: a.delta_mtl_std });
        runs.push(run);
    }
    let best = select_best(&rows).expect("nonempty grid");
    Ok(GridResult { best_lambda: rows[best].lambda, rows, runs })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Flat table: one row per seed and task, then one mean row per task.
pub fn write_summary_csv(seeds: &[SeedReport], agg: &Aggregate, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "task", "baseline", "multitask", "delta_mtl_percent"])?;
    for s in seeds {
        for (k, id) in s.task_ids.iter().enumerate() {
            w.write_record([
                s.seed.to_string(),
                id.clone(),
                s.baseline_metrics[k].to_string(),
                s.mtl_metrics[k].to_string(),
                s.delta_mtl.to_string(),
            ])?;
        }
    }
    for t in &agg.tasks {
        w.write_record([
            "mean".to_string(),
            t.task_id.clone(),
            t.baseline_mean.to_string(),
            t.mtl_mean.to_string(),
            agg.delta_mtl_mean.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.json`, `summary.csv`, and per seed `seed_<i>.json` and
/// `history_seed_<i>.jsonl`.
pub fn write_run(run: &ExperimentRun, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&run.report, &dir.join("report.json"))?;
    write_summary_csv(&run.report.seeds, &run.report.aggregate, &dir.join("summary.csv"))?;
    for (i, (s, h)) in run.report.seeds.iter().zip(&run.histories).enumerate() {
        write_json(s, &dir.join(format!("seed_{i}.json")))?;
        write_history_file(h, &dir.join(format!("history_seed_{i}.jsonl")))?;
    }
    Ok(())
}

/// Sub-directory name for one grid value.
pub fn lambda_dir(lambda: f64) -> String {
    format!("lambda_{lambda:e}")
}

pub fn write_grid(grid: &GridResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (row, run) in grid.rows.iter().zip(&grid.runs) {
        write_run(run, &dir.join(lambda_dir(row.lambda)))?;
    }
    let mut w = csv::Writer::from_path(dir.join("grid.csv"))?;
    w.write_record(["lambda", "delta_mtl_mean", "delta_mtl_std", "best"])?;
    for row in &grid.rows {
        w.write_record([
            format!("{:e}", row.lambda),
            row.delta_mtl_mean.to_string(),
            row.delta_mtl_std.to_string(),
            (row.lambda == grid.best_lambda).to_string(),
        ])?;
    }
    w.flush()?;
    let mut summary = BTreeMap::new();
    summary.insert("best_lambda", serde_json::to_value(grid.best_lambda)?);
    summary.insert("rows", serde_json::to_value(&grid.rows)?);
    write_json(&summary, &dir.join("grid.json"))
}

/// Reads every `seed_<i>.json` in `dir`, in index order.
pub fn read_seed_reports(dir: &Path) -> Result<Vec<SeedReport>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(i) = name.strip_prefix("seed_").and_then(|s| s.strip_suffix(".json")).and_then(|s| s.parse::<usize>().ok()) {
            found.push(i);
        }
    }
    found.sort_unstable();
    if found.is_empty() {
        return Err(Error::invalid(format!("no seed_<i>.json files in {}", dir.display())));
    }
    found.iter().map(|i| read_json(&dir.join(format!("seed_{i}.json")))).collect()
}
