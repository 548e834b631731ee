//! Cost bookkeeping: the configuration × instance response matrix, aggregates
//! over it (per-configuration means, the per-instance oracle, normalized scores),
//! the evaluation cache and the replayable run log.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::RwLock;

use nalgebra::DMatrix;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::paramspace::Configuration;

/// Outcome of evaluating one configuration on one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cost {
    Value(f64),
    Failed,
}

impl Cost {
    pub fn value(self) -> Option<f64> {
        match self {
            Cost::Value(v) => Some(v),
            Cost::Failed => None,
        }
    }

    /// `+inf` for failures, for use in minimization.
    pub fn or_inf(self) -> f64 {
        self.value().unwrap_or(f64::INFINITY)
    }

    pub fn or_penalty(self, penalty: f64) -> f64 {
        self.value().unwrap_or(penalty)
    }

    fn from_raw(v: f64) -> Cost {
        if v.is_finite() {
            Cost::Value(v)
        } else {
            Cost::Failed
        }
    }
}

impl From<f64> for Cost {
    fn from(v: f64) -> Self {
        Cost::from_raw(v)
    }
}

impl Serialize for Cost {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Cost::Value(v) => s.serialize_f64(*v),
            Cost::Failed => s.serialize_str("fail"),
        }
    }
}

impl<'de> Deserialize<'de> for Cost {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct CostVisitor;
        impl Visitor<'_> for CostVisitor {
            type Value = Cost;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a finite number or \"fail\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Cost, E> {
                if v.is_finite() {
                    Ok(Cost::Value(v))
                } else {
                    Err(E::custom("cost must be finite"))
                }
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Cost, E> {
                Ok(Cost::Value(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Cost, E> {
                Ok(Cost::Value(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Cost, E> {
                if v == "fail" {
                    Ok(Cost::Failed)
                } else {
                    Err(E::custom(format!("unexpected cost string {v:?}")))
                }
            }
        }
        d.deserialize_any(CostVisitor)
    }
}

/// Penalty that failed evaluations contribute to means: twice the worst finite cost.
pub fn failure_penalty(worst_finite: Option<f64>) -> f64 {
    match worst_finite {
        Some(w) if w > 0.0 => 2.0 * w,
        // non-positive worst: any value above it works, keep it one unit worse
        Some(w) => w.abs() + 1.0,
        None => 1.0,
    }
}

/// Costs of every evaluated configuration (rows) on every instance (columns).
/// `None` cells are missing (never evaluated).
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    instance_ids: Vec<String>,
    row_ids: Vec<String>,
    configs: Vec<Option<Configuration>>,
    cells: Vec<Vec<Option<Cost>>>,
}

impl ResponseMatrix {
    pub fn new(instance_ids: Vec<String>) -> Self {
        ResponseMatrix {
            instance_ids,
            row_ids: Vec::new(),
            configs: Vec::new(),
            cells: Vec::new(),
        }
    }

    /// Builds a complete matrix from raw rows, naming rows `c0, c1, ...`.
    pub fn from_rows(instance_ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = ResponseMatrix::new(instance_ids);
        for (i, r) in rows.iter().enumerate() {
            m.push_row(format!("c{i}"), None, r.iter().map(|&v| Some(Cost::from(v))).collect())?;
        }
        Ok(m)
    }

    pub fn push_row(
        &mut self,
        id: String,
        config: Option<Configuration>,
        cells: Vec<Option<Cost>>,
    ) -> Result<usize> {
        if cells.len() != self.instance_ids.len() {
            return Err(Error::Argument(format!(
                "row has {} cells, matrix has {} instances",
                cells.len(),
                self.instance_ids.len()
            )));
        }
        self.row_ids.push(id);
        self.configs.push(config);
        self.cells.push(cells);
        Ok(self.cells.len() - 1)
    }

    /// Appends a row observed only on `instances`.
    pub fn push_partial(
        &mut self,
        config: Configuration,
        instances: &[usize],
        costs: &[Cost],
    ) -> Result<usize> {
        let mut cells = vec![None; self.n_instances()];
        for (&j, &c) in instances.iter().zip(costs) {
            *cells.get_mut(j).ok_or_else(|| Error::Argument(format!("instance {j} out of range")))? =
                Some(c);
        }
        let id = format!("c{}", self.n_configs());
        self.push_row(id, Some(config), cells)
    }

    pub fn n_configs(&self) -> usize {
        self.cells.len()
    }

    pub fn n_instances(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn instance_ids(&self) -> &[String] {
        &self.instance_ids
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn config(&self, row: usize) -> Option<&Configuration> {
        self.configs.get(row).and_then(Option::as_ref)
    }

    pub fn get(&self, row: usize, col: usize) -> Option<Cost> {
        self.cells[row][col]
    }

    pub fn row(&self, row: usize) -> &[Option<Cost>] {
        &self.cells[row]
    }

    pub fn worst_finite(&self) -> Option<f64> {
        self.cells
            .iter()
            .flatten()
            .filter_map(|c| c.and_then(Cost::value))
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }

    pub fn failure_penalty(&self) -> f64 {
        failure_penalty(self.worst_finite())
    }

    /// Mean observed cost per configuration, optionally restricted to `subset`
    /// (column indices). Failures contribute the failure penalty; missing cells
    /// are skipped, and a row with nothing observed yields NaN.
    pub fn mean_per_config(&self, subset: Option<&[usize]>) -> Result<Vec<f64>> {
        if subset.is_some_and(|s| s.is_empty()) {
            return Err(Error::Argument("instance subset must be nonempty".into()));
        }
        let all: Vec<usize>;
        let cols = match subset {
            Some(s) => s,
            None => {
                all = (0..self.n_instances()).collect();
                &all
            }
        };
        let penalty = self.failure_penalty();
        Ok(self
            .cells
            .iter()
            .map(|row| {
                let (sum, n) = cols
                    .iter()
                    .filter_map(|&j| row[j])
                    .fold((0.0, 0usize), |(s, n), c| (s + c.or_penalty(penalty), n + 1));
                if n == 0 {
                    f64::NAN
                } else {
                    sum / n as f64
                }
            })
            .collect())
    }

    /// Column-wise best observed cost; failures count as `+inf`.
    pub fn oracle_per_datum(&self) -> Vec<f64> {
        (0..self.n_instances())
            .map(|j| {
                self.cells
                    .iter()
                    .filter_map(|row| row[j])
                    .map(Cost::or_inf)
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    /// Row-wise concatenation of several matrices over the same instance set.
    /// Columns of later matrices are matched to the first by instance id.
    pub fn merge<'a, I>(matrices: I) -> Result<ResponseMatrix>
    where
        I: IntoIterator<Item = &'a ResponseMatrix>,
    {
        let mut iter = matrices.into_iter();
        let mut out = iter
            .next()
            .ok_or_else(|| Error::Argument("nothing to merge".into()))?
            .clone();
        let index: HashMap<&str, usize> = out
            .instance_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut pending = Vec::new();
        for m in iter {
            if m.n_instances() != out.n_instances() {
                return Err(Error::Argument("merged matrices cover different instances".into()));
            }
            let map: Vec<usize> = m
                .instance_ids
                .iter()
                .map(|id| {
                    index
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::Argument(format!("unknown instance `{id}`")))
                })
                .collect::<Result<_>>()?;
            for r in 0..m.n_configs() {
                let mut cells = vec![None; out.n_instances()];
                for (j, &dst) in map.iter().enumerate() {
                    cells[dst] = m.cells[r][j];
                }
                pending.push((m.row_ids[r].clone(), m.configs[r].clone(), cells));
            }
        }
        for (id, cfg, cells) in pending {
            out.push_row(id, cfg, cells)?;
        }
        Ok(out)
    }

    /// Instance × configuration table for partitioning. Failures take the
    /// failure penalty, missing cells `+inf`.
    pub fn partition_table(&self) -> DMatrix<f64> {
        let penalty = self.failure_penalty();
        DMatrix::from_fn(self.n_instances(), self.n_configs(), |j, i| {
            self.cells[i][j].map_or(f64::INFINITY, |c| c.or_penalty(penalty))
        })
    }

    /// Writes the matrix CSV: header `config_id,<instance ids>`, cells in shortest
    /// round-trip decimal form, `fail` for failures and empty for missing.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        let mut header = vec!["config_id".to_string()];
        header.extend(self.instance_ids.iter().cloned());
        wr.write_record(&header)?;
        for (id, row) in self.row_ids.iter().zip(&self.cells) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|c| match c {
                None => String::new(),
                Some(Cost::Failed) => "fail".to_string(),
                Some(Cost::Value(v)) => format!("{v:?}"),
            }));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<ResponseMatrix> {
        let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
        let mut records = rd.records();
        let header = records
            .next()
            .ok_or_else(|| Error::parse("matrix", "empty file"))??;
        if header.get(0).map(str::trim) != Some("config_id") {
            return Err(Error::parse("matrix header", "first cell must be `config_id`"));
        }
        let instances: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut m = ResponseMatrix::new(instances);
        for (line, rec) in records.enumerate() {
            let rec = rec?;
            if rec.len() != m.n_instances() + 1 {
                return Err(Error::parse(
                    format!("matrix row {}", line + 1),
                    format!("expected {} cells, got {}", m.n_instances() + 1, rec.len()),
                ));
            }
            let cells = rec
                .iter()
                .skip(1)
                .map(|cell| match cell.trim() {
                    "" => Ok(None),
                    "fail" => Ok(Some(Cost::Failed)),
                    s => s
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .map(|v| Some(Cost::Value(v)))
                        .ok_or_else(|| {
                            Error::parse(format!("matrix row {}", line + 1), format!("bad cell {s:?}"))
                        }),
                })
                .collect::<Result<Vec<_>>>()?;
            m.push_row(rec[0].to_string(), None, cells)?;
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<ResponseMatrix> {
        ResponseMatrix::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// `(cost - oracle) / (init - oracle)`: 0 at the oracle, 1 at the initial configuration.
pub fn normalized_score(cost: f64, init_cost: f64, oracle_cost: f64) -> Result<f64> {
    if !(init_cost > oracle_cost) {
        return Err(Error::DegenerateScale {
            init: init_cost,
            oracle: oracle_cost,
        });
    }
    Ok(((cost - oracle_cost) / (init_cost - oracle_cost)).max(0.0))
}

/// Shifts every row to zero mean and scales it to unit population variance;
/// constant rows become all zeros.
pub fn normalize_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    let cols = m.ncols() as f64;
    for mut row in out.row_iter_mut() {
        let mean = row.iter().sum::<f64>() / cols;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols;
        let std = var.sqrt();
        if std > 0.0 && std.is_finite() {
            row.iter_mut().for_each(|v| *v = (*v - mean) / std);
        } else {
            row.fill(0.0);
        }
    }
    out
}

/// 1-nearest-neighbour label under Euclidean distance; lowest index wins ties.
pub fn knn_predict_partition(
    train_features: &[Vec<f64>],
    train_labels: &[usize],
    query: &[f64],
) -> Result<usize> {
    if train_features.is_empty() {
        return Err(Error::Argument("at least one training point is required".into()));
    }
    if train_features.len() != train_labels.len() {
        return Err(Error::Argument("features and labels differ in length".into()));
    }
    let mut best: Option<(f64, usize)> = None;
    for (i, f) in train_features.iter().enumerate() {
        if f.len() != query.len() {
            return Err(Error::Argument(format!(
                "training vector {i} has dimension {}, query has {}",
                f.len(),
                query.len()
            )));
        }
        let d: f64 = f.iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    Ok(train_labels[best.unwrap().1])
}

/// One request to an [`Evaluator`]: a configuration and the instance columns to run it on.
#[derive(Debug, Clone, Copy)]
pub struct EvalRequest<'a> {
    pub config: &'a Configuration,
    pub instances: &'a [usize],
}

/// Something that can run configurations on dataset instances.
pub trait Evaluator: Sync {
    fn instance_ids(&self) -> &[String];

    /// Evaluates every request; the result for request `r` is aligned with `r.instances`.
    fn evaluate(&self, requests: &[EvalRequest<'_>]) -> Result<Vec<Vec<Cost>>>;
}

/// Cost cache keyed by (configuration fingerprint, instance id).
#[derive(Debug, Default)]
pub struct EvalCache {
    entries: RwLock<BTreeMap<(String, String), Cost>>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    config: String,
    instance: String,
    cost: Cost,
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, config: &Configuration, instance: &str) -> Option<Cost> {
        self.get_fingerprint(&config.fingerprint(), instance)
    }

    pub fn get_fingerprint(&self, fingerprint: &str, instance: &str) -> Option<Cost> {
        self.entries
            .read()
            .unwrap()
            .get(&(fingerprint.to_string(), instance.to_string()))
            .copied()
    }

    pub fn insert(&self, fingerprint: String, instance: String, cost: Cost) {
        self.entries.write().unwrap().insert((fingerprint, instance), cost);
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(path: &Path) -> Result<EvalCache> {
        let cache = EvalCache::new();
        if !path.exists() {
            return Ok(cache);
        }
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        for line in file.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: CacheLine = serde_json::from_str(&line)?;
            cache.insert(l.config, l.instance, l.cost);
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for ((config, instance), cost) in self.entries.read().unwrap().iter() {
            let line = CacheLine {
                config: config.clone(),
                instance: instance.clone(),
                cost: *cost,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One configuration's costs on a subset of instances (column indices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub config: Configuration,
    pub instances: Vec<usize>,
    pub costs: Vec<Cost>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub strategy: String,
    pub seed: u64,
    /// Runs sharing a group share an oracle.
    pub group: String,
    pub partitions: usize,
    pub budget: usize,
    pub instance_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iteration: u64,
    /// Budget position in optimizer generations.
    pub generation: u64,
    pub strategy: String,
    pub phase: String,
    pub seed: u64,
    pub candidates: Vec<CandidateRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment: Option<Vec<usize>>,
    /// Strategy's current best mean cost estimate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incumbent: Option<f64>,
}

/// Final outcome of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub assignment: Vec<usize>,
    pub partition_configs: Vec<Configuration>,
    /// Cost of each instance under its partition's configuration.
    pub final_costs: Vec<Cost>,
    pub final_mean: f64,
    /// Initial configuration evaluated on every instance (reference only).
    pub reference: Option<CandidateRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum RunLine {
    Header(RunHeader),
    Record(RunRecord),
    Summary(RunSummary),
}

/// Append-only log of one strategy run; replaying the records rebuilds the
/// response matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: RunHeader,
    pub records: Vec<RunRecord>,
    pub summary: Option<RunSummary>,
}

impl RunLog {
    pub fn new(header: RunHeader) -> Self {
        RunLog {
            header,
            records: Vec::new(),
            summary: None,
        }
    }

    pub fn next_iteration(&self) -> u64 {
        self.records.last().map_or(0, |r| r.iteration + 1)
    }

    pub fn push(&mut self, record: RunRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.iteration <= last.iteration {
                return Err(Error::State(format!(
                    "run log iterations must increase ({} after {})",
                    record.iteration, last.iteration
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn replay(&self) -> Result<ResponseMatrix> {
        let mut m = ResponseMatrix::new(self.header.instance_ids.clone());
        for rec in &self.records {
            for c in &rec.candidates {
                m.push_partial(c.config.clone(), &c.instances, &c.costs)?;
            }
        }
        Ok(m)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let mut line = |l: &RunLine| -> Result<()> {
            serde_json::to_writer(&mut w, l)?;
            w.write_all(b"\n")?;
            Ok(())
        };
        line(&RunLine::Header(self.header.clone()))?;
        for r in &self.records {
            line(&RunLine::Record(r.clone()))?;
        }
        if let Some(s) = &self.summary {
            line(&RunLine::Summary(s.clone()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<RunLog> {
        let mut log: Option<RunLog> = None;
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let parsed: RunLine = serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("run log line {}", n + 1), e.to_string()))?;
            match (parsed, log.as_mut()) {
                (RunLine::Header(h), None) => log = Some(RunLog::new(h)),
                (RunLine::Record(rec), Some(l)) => l.push(rec)?,
                (RunLine::Summary(s), Some(l)) => l.summary = Some(s),
                _ => {
                    return Err(Error::parse(
                        format!("run log line {}", n + 1),
                        "header must come first and appear once",
                    ))
                }
            }
        }
        log.ok_or_else(|| Error::parse("run log", "missing header"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_jsonl(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<RunLog> {
        RunLog::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
