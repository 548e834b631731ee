//! Learning-curve reports computed from run logs alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::evaluation::{normalized_score, ResponseMatrix, RunLog};
use crate::strategies::Strategy;

/// One point of one run's learning curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub strategy: String,
    pub seed: u64,
    pub iteration: u64,
    pub best_mean_cost: f64,
    pub normalized_score: Option<f64>,
}

/// Mean and standard error across seeds at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub strategy: String,
    pub iteration: u64,
    pub runs: usize,
    pub mean_cost: f64,
    pub sem_cost: f64,
    pub mean_score: Option<f64>,
    pub sem_score: Option<f64>,
}

struct GroupScale {
    init: Option<f64>,
    oracle: f64,
}

/// Shared init and oracle costs per group, over every run of the group.
fn group_scales(logs: &[RunLog]) -> Result<BTreeMap<String, GroupScale>> {
    let mut groups: BTreeMap<String, Vec<&RunLog>> = BTreeMap::new();
    for log in logs {
        groups.entry(log.header.group.clone()).or_default().push(log);
    }
    let mut out = BTreeMap::new();
    for (name, members) in groups {
        let mut matrices = Vec::new();
        for log in &members {
            let mut m = log.replay()?;
            if let Some(reference) = log.summary.as_ref().and_then(|s| s.reference.as_ref()) {
                m.push_partial(reference.config.clone(), &reference.instances, &reference.costs)?;
            }
            matrices.push(m);
        }
        let merged = ResponseMatrix::merge(matrices.iter())?;
        let table = merged.partition_table();
        let oracle = table.row_iter().map(|r| r.min()).sum::<f64>() / table.nrows() as f64;
        // the reference row of the first run carrying one; all carry the same config
        let init = members
            .iter()
            .find_map(|log| log.summary.as_ref().and_then(|s| s.reference.as_ref()))
            .map(|reference| {
                let penalty = merged.failure_penalty();
                reference.costs.iter().map(|c| c.or_penalty(penalty)).sum::<f64>() / reference.costs.len() as f64
            });
        out.insert(name, GroupScale { init, oracle });
    }
    Ok(out)
}

fn strategy_rank(name: &str) -> (usize, &str) {
    let rank = Strategy::ALL
        .iter()
        .position(|s| s.name() == name)
        .unwrap_or(Strategy::ALL.len());
    (rank, name)
}

/// Best-so-far mean cost per generation for each run, with normalized score.
/// Rows are ordered by strategy, then seed, then iteration, whatever the input order.
pub fn report_rows(logs: &[RunLog]) -> Result<Vec<ReportRow>> {
    let scales = group_scales(logs)?;
    let mut ordered: Vec<&RunLog> = logs.iter().collect();
    ordered.sort_by(|a, b| {
        strategy_rank(&a.header.strategy)
            .cmp(&strategy_rank(&b.header.strategy))
            .then(a.header.seed.cmp(&b.header.seed))
            .then(a.header.group.cmp(&b.header.group))
    });
    let mut rows = Vec::new();
    for log in ordered {
        let scale = &scales[&log.header.group];
        let mut curve: BTreeMap<u64, f64> = BTreeMap::new();
        for rec in &log.records {
            if let Some(inc) = rec.incumbent {
                curve.insert(rec.generation, inc);
            }
        }
        for (iteration, cost) in curve {
            let normalized = scale
                .init
                .and_then(|init| normalized_score(cost, init, scale.oracle).ok());
            rows.push(ReportRow {
                strategy: log.header.strategy.clone(),
                seed: log.header.seed,
                iteration,
                best_mean_cost: cost,
                normalized_score: normalized,
            });
        }
    }
    Ok(rows)
}

fn mean_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean ± SEM across seeds per strategy and iteration.
pub fn aggregate(rows: &[ReportRow]) -> Vec<AggregateRow> {
    let mut sorted: Vec<&ReportRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        strategy_rank(&a.strategy)
            .cmp(&strategy_rank(&b.strategy))
            .then(a.seed.cmp(&b.seed))
    });
    type Key<'a> = ((usize, &'a str), u64);
    let mut cells: BTreeMap<Key, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for row in sorted {
        let cell = cells.entry((strategy_rank(&row.strategy), row.iteration)).or_default();
        cell.0.push(row.best_mean_cost);
        if let Some(score) = row.normalized_score {
            cell.1.push(score);
        }
    }
    cells
        .into_iter()
        .map(|(((_, strategy), iteration), (costs, scores))| {
            let (mean_cost, sem_cost) = mean_sem(&costs);
            let (mean_score, sem_score) = if scores.is_empty() {
                (None, None)
            } else {
                let (m, e) = mean_sem(&scores);
                (Some(m), Some(e))
            };
            AggregateRow {
                strategy: strategy.to_string(),
                iteration,
                runs: costs.len(),
                mean_cost,
                sem_cost,
                mean_score,
                sem_score,
            }
        })
        .collect()
}

pub fn write_rows<T: Serialize, W: Write>(rows: &[T], w: W) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_rows(rows, std::io::BufWriter::new(file))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line chart of the aggregate curves; normalized score when every row has
/// one, mean cost otherwise.
pub fn render_svg(rows: &[AggregateRow]) -> String {
    let use_score = !rows.is_empty() && rows.iter().all(|r| r.mean_score.is_some());
    let value = |r: &AggregateRow| if use_score { r.mean_score.unwrap() } else { r.mean_cost };
    let label = if use_score { "normalized score" } else { "mean cost" };

    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 140.0, 20.0, 40.0);
    let pw = w - left - right;
    let ph = h - top - bottom;

    let finite: Vec<&AggregateRow> = rows.iter().filter(|r| value(r).is_finite()).collect();
    let x_max = finite.iter().map(|r| r.iteration).max().unwrap_or(1).max(1) as f64;
    let (mut y_min, mut y_max) = finite
        .iter()
        .map(|r| value(r))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if use_score {
        y_min = y_min.min(0.0);
    }
    if y_max - y_min < 1e-12 {
        y_max = y_min + 1.0;
    }
    let px = |x: f64| left + pw * x / x_max;
    let py = |y: f64| top + ph * (1.0 - (y - y_min) / (y_max - y_min));

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for t in 0..=4 {
        let y = y_min + (y_max - y_min) * t as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            left - 6.0,
            py(y) + 4.0,
            y
        );
        let x = x_max * t as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{:.0}</text>"#,
            px(x),
            top + ph + 16.0,
            x
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{}" text-anchor="middle">iteration</text>"#,
        left + pw / 2.0,
        h - 6.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{label}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );

    let mut strategies: Vec<&str> = Vec::new();
    for r in &finite {
        if !strategies.contains(&r.strategy.as_str()) {
            strategies.push(&r.strategy);
        }
    }
    for (i, s) in strategies.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = finite
            .iter()
            .filter(|r| r.strategy == *s)
            .map(|r| format!("{:.1},{:.1}", px(r.iteration as f64), py(value(r))))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let ly = top + 16.0 * (i as f64 + 1.0);
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{s}</text>"#,
            left + pw + 10.0,
            left + pw + 30.0,
            left + pw + 36.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Reads every `*.jsonl` run log in a directory, sorted by file name.
pub fn load_run_dir(dir: &Path) -> Result<Vec<RunLog>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    paths.sort();
    paths.iter().map(|p| RunLog::load(p)).collect()
}
