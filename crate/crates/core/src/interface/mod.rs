//! File formats, external workers, and experiment drivers behind the CLI.

pub mod report;
pub mod worker;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::evaluation::{CandidateRecord, EvalCache, EvalRequest, Evaluator, RunLog};
use crate::paramspace::{parse_space_file, Configuration, ParamSpace};
use crate::strategies::{run_strategy, Budget, PartitionMethod, Strategy, StrategyResult, TuneOptions};
use crate::synthbench::SyntheticProblem;

use report::{AggregateRow, ReportRow};
use worker::{PoolConfig, WorkerEvaluator, WorkerPool};

pub const CACHE_DIR_ENV: &str = "MODECFG_CACHE_DIR";
pub const CACHE_FILE: &str = "costs.jsonl";

/// Instance identifiers, one per line; blank lines and `#` comments skipped.
pub fn parse_dataset_list(text: &str) -> Result<Vec<String>> {
    let mut ids: Vec<String> = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if ids.iter().any(|i| i == line) {
            return Err(Error::Config(format!("duplicate instance id `{line}`")));
        }
        ids.push(line.to_string());
    }
    if ids.is_empty() {
        return Err(Error::Config("dataset list is empty".into()));
    }
    Ok(ids)
}

pub fn read_dataset_list(path: &Path) -> Result<Vec<String>> {
    parse_dataset_list(&std::fs::read_to_string(path)?)
}

/// CSV with a header row: an id column followed by numeric feature columns.
pub fn read_feature_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let mut fields = record.iter();
        let id = fields
            .next()
            .ok_or_else(|| Error::parse("features", "empty row"))?
            .to_string();
        let values = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse("features", format!("row `{id}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        ids.push(id);
        rows.push(values);
    }
    Ok((ids, rows))
}

/// CSV with a header row: `id,partition`.
pub fn read_label_csv(path: &Path) -> Result<BTreeMap<String, usize>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut labels = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 2 {
            return Err(Error::parse("labels", format!("expected 2 columns, found {}", record.len())));
        }
        let label = record[1]
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::parse("labels", format!("row `{}`: {e}", &record[0])))?;
        labels.insert(record[0].to_string(), label);
    }
    Ok(labels)
}

/// `$MODECFG_CACHE_DIR`, or `cache/` under the output directory.
pub fn cache_dir(out_dir: &Path) -> PathBuf {
    match std::env::var_os(CACHE_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => out_dir.join("cache"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub partitions: usize,
    pub budget: usize,
    pub seeds: Vec<u64>,
    pub method: PartitionMethod,
    pub warm_start: bool,
    pub space_path: PathBuf,
    pub data_path: PathBuf,
    pub out_dir: PathBuf,
    pub worker_command: String,
    pub parallel: usize,
    pub svg: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.strategy, self.partitions) {
            (Strategy::Single, 1) => {}
            (Strategy::Single, k) => {
                return Err(Error::Config(format!("strategy single uses one partition, got -k {k}")))
            }
            (s, k) if k < 2 => return Err(Error::Config(format!("strategy {s} needs -k >= 2, got {k}"))),
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.parallel == 0 {
            return Err(Error::Config("--parallel must be at least 1".into()));
        }
        Budget::new(self.budget)?;
        Ok(())
    }
}

/// Everything one experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub logs: Vec<RunLog>,
    pub failures: Vec<(String, u64, String)>,
    pub report: Vec<ReportRow>,
    pub aggregate: Vec<AggregateRow>,
}

impl ExperimentOutcome {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

fn reference_record(evaluator: &dyn Evaluator, config: &Configuration) -> Result<CandidateRecord> {
    let instances: Vec<usize> = (0..evaluator.instance_ids().len()).collect();
    let costs = evaluator
        .evaluate(&[EvalRequest { config, instances: &instances }])?
        .pop()
        .expect("one request");
    Ok(CandidateRecord {
        config: config.clone(),
        instances,
        costs,
    })
}

struct RunSpec<'a> {
    strategy: Strategy,
    seed: u64,
    opts: TuneOptions,
    group: String,
    problem: Option<serde_json::Value>,
    space: &'a ParamSpace,
}

fn execute(spec: &RunSpec<'_>, evaluator: &dyn Evaluator, reference: &CandidateRecord) -> Result<StrategyResult> {
    let mut result = run_strategy(spec.strategy, spec.space, evaluator, &spec.opts)?;
    let log = &mut result.run_log;
    log.header.group = spec.group.clone();
    log.header.problem = spec.problem.clone();
    if let Some(summary) = log.summary.as_mut() {
        summary.reference = Some(reference.clone());
    }
    Ok(result)
}

fn write_outputs(out_dir: &Path, logs: &[RunLog], svg: Option<&Path>) -> Result<(Vec<ReportRow>, Vec<AggregateRow>)> {
    let rows = report::report_rows(logs)?;
    let agg = report::aggregate(&rows);
    report::save_rows(&rows, &out_dir.join("report.csv"))?;
    report::save_rows(&agg, &out_dir.join("aggregate.csv"))?;
    if let Some(svg) = svg {
        std::fs::write(svg, report::render_svg(&agg))?;
    }
    Ok((rows, agg))
}

fn run_file_name(strategy: Strategy, seed: u64) -> String {
    format!("{strategy}-seed{seed}.jsonl")
}

/// Runs one strategy per seed against an external worker.
///
/// Writes `runs/<strategy>-seed<s>.jsonl`, `report.csv` and `aggregate.csv`
/// under the output directory. A failing seed is recorded and the rest continue.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let space = parse_space_file(&std::fs::read_to_string(&cfg.space_path)?)?;
    let ids = read_dataset_list(&cfg.data_path)?;
    let runs_dir = cfg.out_dir.join("runs");
    std::fs::create_dir_all(&runs_dir)?;
    let cache_dir = cache_dir(&cfg.out_dir);
    std::fs::create_dir_all(&cache_dir)?;
    let cache_path = cache_dir.join(CACHE_FILE);
    let cache = Arc::new(if cache_path.exists() {
        EvalCache::load(&cache_path)?
    } else {
        EvalCache::new()
    });

    let pool = WorkerPool::spawn(PoolConfig::from_command_line(&cfg.worker_command, cfg.parallel)?)?;
    let evaluator = WorkerEvaluator::new(pool, cache.clone(), ids);
    let reference = reference_record(&evaluator, &space.initial());

    let mut logs = Vec::new();
    let mut failures = Vec::new();
    match reference {
        Err(e) => {
            for &seed in &cfg.seeds {
                failures.push((cfg.strategy.to_string(), seed, e.to_string()));
            }
        }
        Ok(reference) => {
            for &seed in &cfg.seeds {
                let mut opts = TuneOptions::new(Budget::new(cfg.budget)?, cfg.partitions, seed);
                opts.method = cfg.method;
                opts.warm_start = cfg.warm_start;
                let spec = RunSpec {
                    strategy: cfg.strategy,
                    seed,
                    opts,
                    group: "tune".into(),
                    problem: None,
                    space: &space,
                };
                match execute(&spec, &evaluator, &reference) {
                    Ok(StrategyResult { run_log: log, .. }) => {
                        log.save(&runs_dir.join(run_file_name(spec.strategy, spec.seed)))?;
                        logs.push(log);
                    }
                    Err(e) => failures.push((cfg.strategy.to_string(), seed, e.to_string())),
                }
            }
        }
    }
    cache.save(&cache_path)?;
    let (report, aggregate) = write_outputs(&cfg.out_dir, &logs, cfg.svg.as_deref())?;
    Ok(ExperimentOutcome {
        logs,
        failures,
        report,
        aggregate,
    })
}

/// Synthetic multi-modal benchmark runs; one problem per seed, shared by all strategies.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub dim: usize,
    pub modes: usize,
    pub per_mode: usize,
    /// Partitions for the multi-config strategies; defaults to `modes`.
    pub partitions: Option<usize>,
    pub budget: usize,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub method: PartitionMethod,
    pub warm_start: bool,
    pub sigma0: f64,
    pub out_dir: PathBuf,
    pub svg: Option<PathBuf>,
}

impl SynthConfig {
    pub fn new(dim: usize, modes: usize, per_mode: usize, budget: usize, seeds: Vec<u64>, out_dir: PathBuf) -> Self {
        SynthConfig {
            dim,
            modes,
            per_mode,
            partitions: None,
            budget,
            seeds,
            strategies: Strategy::ALL.to_vec(),
            method: PartitionMethod::Exact,
            warm_start: false,
            sigma0: crate::synthbench::DEFAULT_SIGMA0,
            out_dir,
            svg: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        if self.partitions.unwrap_or(self.modes) < 2 && self.strategies.iter().any(|&s| s != Strategy::Single) {
            return Err(Error::Config("multi-configuration strategies need at least 2 partitions".into()));
        }
        Budget::new(self.budget)?;
        Ok(())
    }
}

/// Every configured strategy on the problem generated from `seed`, logs
/// annotated as in [`run_synth`].
pub fn run_synth_seed(cfg: &SynthConfig, seed: u64) -> Result<Vec<(Strategy, Result<StrategyResult>)>> {
    let problem = SyntheticProblem::generate(crate::synthbench::ProblemDescriptor {
        seed,
        dim: cfg.dim,
        modes: cfg.modes,
        per_mode: cfg.per_mode,
        min_center_separation: None,
    })?;
    let space = problem.search_space(cfg.sigma0)?;
    let reference = reference_record(&problem, &space.initial())?;
    let descriptor = serde_json::to_value(problem.descriptor())?;
    let group = format!("synth-d{}-k{}-n{}-seed{seed}", cfg.dim, cfg.modes, cfg.per_mode);
    let mut out = Vec::new();
    for &strategy in &cfg.strategies {
        let k = match strategy {
            Strategy::Single => 1,
            _ => cfg.partitions.unwrap_or(cfg.modes),
        };
        let mut opts = TuneOptions::new(Budget::new(cfg.budget)?, k, seed);
        opts.method = cfg.method;
        opts.warm_start = cfg.warm_start;
        let spec = RunSpec {
            strategy,
            seed,
            opts,
            group: group.clone(),
            problem: Some(descriptor.clone()),
            space: &space,
        };
        out.push((strategy, execute(&spec, &problem, &reference)));
    }
    Ok(out)
}

pub fn run_synth(cfg: &SynthConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let runs_dir = cfg.out_dir.join("runs");
    std::fs::create_dir_all(&runs_dir)?;
    let mut logs = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        for (strategy, result) in run_synth_seed(cfg, seed)? {
            match result {
                Ok(StrategyResult { run_log: log, .. }) => {
                    log.save(&runs_dir.join(run_file_name(strategy, seed)))?;
                    logs.push(log);
                }
                Err(e) => failures.push((strategy.to_string(), seed, e.to_string())),
            }
        }
    }
    let (report, aggregate) = write_outputs(&cfg.out_dir, &logs, cfg.svg.as_deref())?;
    Ok(ExperimentOutcome {
        logs,
        failures,
        report,
        aggregate,
    })
}

/// Recomputes the aggregate report from the run logs in a directory.
pub fn report_from_runs(runs_dir: &Path) -> Result<(Vec<ReportRow>, Vec<AggregateRow>)> {
    let logs = report::load_run_dir(runs_dir)?;
    if logs.is_empty() {
        return Err(Error::Config(format!("no run logs in {}", runs_dir.display())));
    }
    let rows = report::report_rows(&logs)?;
    let agg = report::aggregate(&rows);
    Ok((rows, agg))
}
