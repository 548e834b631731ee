//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use modecfg::evaluation::{Cost, ResponseMatrix, RunLog};
use modecfg::interface::report::report_rows;
use modecfg::interface::worker::{PoolConfig, WorkerEvaluator, WorkerPool};
use modecfg::interface::{run_experiment, run_synth_seed, ExperimentConfig, SynthConfig};
use modecfg::optimizer::CmaEs;
use modecfg::paramspace::{Configuration, SearchPoint};
use modecfg::partition::{partition_accuracy, partition_exact};
use modecfg::strategies::{posthoc, BanditState, Budget, PartitionMethod, Strategy, TuneOptions};
use modecfg::synthbench::{
    ackley, griewank, make_problem_separated, rastrigin, zakharov, DEFAULT_SIGMA0,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Cost of a per-instance configuration choice, summed in instance order.
fn assignment_cost(costs: &DMatrix<f64>, choice: &[usize]) -> f64 {
    choice.iter().enumerate().map(|(j, &c)| costs[(j, c)]).sum()
}

/// Branch and bound over per-instance configuration choices using at most `k`
/// distinct configurations.
struct BruteForce<'a> {
    costs: &'a DMatrix<f64>,
    k: usize,
    /// suffix_min[j] = sum over instances >= j of their row minimum
    suffix_min: Vec<f64>,
    choice: Vec<usize>,
    used: Vec<usize>,
    best: Option<(f64, Vec<usize>)>,
}

impl<'a> BruteForce<'a> {
    fn solve(costs: &'a DMatrix<f64>, k: usize) -> (f64, Vec<usize>) {
        let n = costs.nrows();
        let mut suffix_min = vec![0.0; n + 1];
        for j in (0..n).rev() {
            suffix_min[j] = suffix_min[j + 1] + costs.row(j).min();
        }
        let mut bb = BruteForce {
            costs,
            k,
            suffix_min,
            choice: Vec::with_capacity(n),
            used: Vec::new(),
            best: None,
        };
        bb.descend(0, 0.0);
        bb.best.unwrap()
    }

    fn descend(&mut self, j: usize, partial: f64) {
        let n = self.costs.nrows();
        if let Some((b, _)) = &self.best {
            if partial + self.suffix_min[j] > *b + 1e-12 {
                return;
            }
        }
        if j == n {
            let exact = assignment_cost(self.costs, &self.choice);
            if self.best.as_ref().is_none_or(|(b, _)| exact < *b) {
                self.best = Some((exact, self.choice.clone()));
            }
            return;
        }
        for c in 0..self.costs.ncols() {
            let fresh = !self.used.contains(&c);
            if fresh && self.used.len() == self.k {
                continue;
            }
            if fresh {
                self.used.push(c);
            }
            self.choice.push(c);
            self.descend(j + 1, partial + self.costs[(j, c)]);
            self.choice.pop();
            if fresh {
                self.used.pop();
            }
        }
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let mut checked = 0;
    let mut mismatches = 0;
    for _ in 0..500 {
        let n = rng.random_range(2..=12);
        let m = rng.random_range(2..=8);
        let costs = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>());
        for k in [2usize, 3] {
            if k > m {
                continue;
            }
            let p = partition_exact(&costs, k).unwrap();
            let choice: Vec<usize> = p.assignment.iter().map(|&g| p.representatives[g]).collect();
            let (bf_cost, bf_choice) = BruteForce::solve(&costs, k);
            checked += 1;
            if assignment_cost(&costs, &choice) != bf_cost || choice != bf_choice {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("{checked} problems, {mismatches} mismatches, {:.2}s", elapsed.as_secs_f64()),
    )
}

const SYNTH_SEEDS: std::ops::Range<u64> = 0..10;

struct SynthRuns {
    dim: usize,
    /// strategy -> final normalized score per seed
    scores: BTreeMap<&'static str, Vec<f64>>,
    dominance_violations: Vec<String>,
}

fn synth_runs(dim: usize) -> SynthRuns {
    let cfg = SynthConfig::new(dim, 2, 10, 100, SYNTH_SEEDS.collect(), std::env::temp_dir());
    let mut logs: Vec<RunLog> = Vec::new();
    let mut violations = Vec::new();
    for seed in SYNTH_SEEDS {
        let mut means: BTreeMap<&'static str, f64> = BTreeMap::new();
        for (strategy, result) in run_synth_seed(&cfg, seed).unwrap() {
            let result = result.unwrap();
            let mean = result.mean_cost();
            if mean < result.oracle_mean {
                violations.push(format!("{strategy} seed {seed}: mean {mean} < oracle {}", result.oracle_mean));
            }
            means.insert(strategy.name(), mean);
            logs.push(result.run_log);
        }
        if means["posthoc"] > means["single"] {
            violations.push(format!(
                "seed {seed}: posthoc {} > single {}",
                means["posthoc"], means["single"]
            ));
        }
    }
    let budget = cfg.budget as u64;
    let mut scores: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for row in report_rows(&logs).unwrap() {
        if row.iteration == budget {
            let name = Strategy::ALL.iter().find(|s| s.name() == row.strategy).unwrap().name();
            scores.entry(name).or_default().push(row.normalized_score.unwrap());
            if row.normalized_score.unwrap() < 0.0 {
                violations.push(format!("{} seed {}: below pooled oracle", row.strategy, row.seed));
            }
        }
    }
    SynthRuns {
        dim,
        scores,
        dominance_violations: violations,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn criterion_2(runs: &[SynthRuns], elapsed: Duration) -> Outcome {
    let mut pass = elapsed < Duration::from_secs(300);
    let mut parts = Vec::new();
    for r in runs {
        let single = mean(&r.scores["single"]);
        let posthoc = mean(&r.scores["posthoc"]);
        let staged = mean(&r.scores["staged"]);
        let online = mean(&r.scores["online"]);
        pass &= posthoc < single - 0.05 && staged < single - 0.05 && online <= single + 0.02;
        parts.push(format!(
            "d={}: single {single:.3} posthoc {posthoc:.3} staged {staged:.3} online {online:.3}",
            r.dim
        ));
    }
    parts.push(format!("{:.1}s", elapsed.as_secs_f64()));
    outcome(pass, parts.join("; "))
}

fn criterion_3() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for dim in [2usize, 10] {
        let mut accs = Vec::new();
        for seed in SYNTH_SEEDS {
            let problem = make_problem_separated(dim, 2, 10, seed, 4.0).unwrap();
            let space = problem.search_space(DEFAULT_SIGMA0).unwrap();
            let mut opts = TuneOptions::new(Budget::new(100).unwrap(), 2, seed);
            opts.method = PartitionMethod::Exact;
            let result = posthoc(&space, &problem, &opts).unwrap();
            accs.push(partition_accuracy(&result.partition.assignment, &problem.ground_truth_labels()).unwrap());
        }
        let acc = mean(&accs);
        pass &= acc >= 0.9;
        parts.push(format!("d={dim}: accuracy {acc:.3}"));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_4(runs: &[SynthRuns]) -> Outcome {
    let violations: Vec<&String> = runs.iter().flat_map(|r| &r.dominance_violations).collect();
    let detail = match violations.first() {
        None => "0 violations".to_string(),
        Some(v) => format!("{} violations, first: {v}", violations.len()),
    };
    outcome(violations.is_empty(), detail)
}

fn sphere(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn criterion_5() -> Outcome {
    let mut successes = 0;
    let mut evals_used = Vec::new();
    for seed in 0..5u64 {
        let mut es = CmaEs::new(&SearchPoint::new(vec![3.0; 10]), 0.5, None, seed).unwrap();
        let mut evals = 0;
        let mut best = f64::INFINITY;
        while evals < 3000 && best >= 1e-6 {
            let batch = es.ask();
            let costs: Vec<f64> = batch.points.iter().map(|p| sphere(p.coords())).collect();
            evals += costs.len();
            best = costs.iter().copied().fold(best, f64::min);
            es.tell(&batch, &costs).unwrap();
        }
        if best < 1e-6 {
            successes += 1;
        }
        evals_used.push(evals);
    }

    // strictly increasing transform of the costs leaves the search identical
    let mut a = CmaEs::new(&SearchPoint::new(vec![1.0; 6]), 0.7, None, 99).unwrap();
    let mut b = CmaEs::new(&SearchPoint::new(vec![1.0; 6]), 0.7, None, 99).unwrap();
    let mut identical = true;
    for _ in 0..100 {
        let ba = a.ask();
        let bb = b.ask();
        identical &= ba.points == bb.points;
        let fa: Vec<f64> = ba.points.iter().map(|p| rastrigin(p.coords())).collect();
        let fb: Vec<f64> = fa.iter().map(|f| (0.3 * f).exp() * 5.0 - 2.0).collect();
        a.tell(&ba, &fa).unwrap();
        b.tell(&bb, &fb).unwrap();
        identical &= a.mean() == b.mean()
            && a.step_size() == b.step_size()
            && a.covariance() == b.covariance()
            && a.evolution_paths() == b.evolution_paths();
    }
    outcome(
        successes >= 4 && identical,
        format!("sphere solved on {successes}/5 seeds (evaluations {evals_used:?}); transform invariance bit-exact: {identical}"),
    )
}

fn criterion_6() -> Outcome {
    let streams = [Normal::new(0.2, 0.1).unwrap(), Normal::new(0.8, 0.1).unwrap()];
    let mut fractions = Vec::new();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bandit = BanditState::with_prior(1, 2, 0.5, 0.1);
        for _ in 0..200 {
            let arm = bandit.pull(0, &mut rng);
            let cost = streams[arm].sample(&mut rng);
            bandit.update(0, arm, cost);
        }
        let mut better = 0;
        for _ in 0..100 {
            let arm = bandit.pull(0, &mut rng);
            let cost = streams[arm].sample(&mut rng);
            bandit.update(0, arm, cost);
            better += usize::from(arm == 0);
        }
        fractions.push(better as f64 / 100.0);
    }
    let avg = mean(&fractions);
    outcome(avg >= 0.8, format!("better arm share {avg:.3}"))
}

fn criterion_7() -> Outcome {
    let mut worst_origin: f64 = 0.0;
    for d in 1..=12 {
        let o = vec![0.0; d];
        for f in [ackley, griewank, rastrigin, zakharov] {
            worst_origin = worst_origin.max(f(&o).abs());
        }
    }
    let r = rastrigin(&[1.0, 0.0]);
    let z = zakharov(&[1.0, 1.0]);
    let a = ackley(&[1.0, 1.0]);
    let pass = worst_origin <= 1e-12
        && (r - 1.0).abs() <= 1e-5
        && (z - 9.3125).abs() <= 1e-5
        && (a - 3.625385).abs() <= 1e-5;
    outcome(
        pass,
        format!("origin max {worst_origin:e}; rastrigin {r}; zakharov {z}; ackley {a:.7}"),
    )
}

fn demo_worker() -> String {
    env!("CARGO_BIN_EXE_modecfg-demo-worker").to_string()
}

fn worker_results(args: &[&str], workers: usize, window: usize, instances: &[&str]) -> (BTreeMap<String, Cost>, usize) {
    let mut command = vec![demo_worker()];
    command.extend(args.iter().map(|a| a.to_string()));
    let pool = WorkerPool::spawn(PoolConfig {
        command,
        workers,
        max_outstanding: window,
    })
    .unwrap();
    let ids: Vec<String> = instances.iter().map(|s| s.to_string()).collect();
    let eval = WorkerEvaluator::new(pool, Default::default(), ids);
    let config: Configuration = [("a".to_string(), 2.0), ("b".to_string(), 0.5)].into_iter().collect();
    let map = eval.evaluate_config(&config, instances).unwrap();
    (map, eval.restarts())
}

fn criterion_8(dir: &Path) -> Outcome {
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let canonical = "config_id,i0,i1,i2\nc0,0.5,fail,\nc1,1e-7,2.0,3.25\n";
    let matrix = ResponseMatrix::read_csv(canonical.as_bytes()).unwrap();
    let mut buf = Vec::new();
    matrix.write_csv(&mut buf).unwrap();
    checks.push(("matrix csv", buf == canonical.as_bytes()));

    let cfg = SynthConfig::new(2, 2, 2, 6, vec![0], dir.join("synth"));
    let (_, result) = run_synth_seed(&cfg, 0).unwrap().remove(3);
    let log = result.unwrap().run_log;
    let mut first = Vec::new();
    log.write_jsonl(&mut first).unwrap();
    let reread = RunLog::read_jsonl(first.as_slice()).unwrap();
    let mut second = Vec::new();
    reread.write_jsonl(&mut second).unwrap();
    checks.push(("runlog jsonl", first == second && reread == log));

    let instances = ["0", "0.5", "1", "1.5", "2", "-1", "3", "0.25"];
    let (in_order, _) = worker_results(&[], 1, 1, &instances);
    let (reversed, _) = worker_results(&["--reverse", "4"], 1, 4, &instances);
    checks.push(("out-of-order responses", in_order == reversed));

    let marker = dir.join("crashed");
    let marker_arg = marker.to_string_lossy().to_string();
    let (crashed, restarts) = worker_results(
        &["--crash-on", "1.5", "--crash-marker", &marker_arg],
        1,
        1,
        &instances,
    );
    let expected: BTreeMap<String, Cost> = in_order
        .iter()
        .map(|(k, v)| (k.clone(), if k == "1.5" { Cost::Failed } else { *v }))
        .collect();
    checks.push(("worker crash and restart", restarts == 1 && crashed == expected));

    let space = dir.join("space.json");
    std::fs::write(&space, r#"{"sigma": 0.5, "params": [{"name": "a", "init": 1.0}, {"name": "b", "init": 3.0}]}"#).unwrap();
    let data = dir.join("data.txt");
    std::fs::write(&data, "0\n0.5\n1\n2\n").unwrap();
    let exp = ExperimentConfig {
        strategy: Strategy::Staged,
        partitions: 2,
        budget: 6,
        seeds: vec![0, 1],
        method: PartitionMethod::Exact,
        warm_start: false,
        space_path: space,
        data_path: data,
        out_dir: dir.join("tune"),
        worker_command: demo_worker(),
        parallel: 2,
        svg: None,
    };
    let read_runs = || -> Vec<Vec<u8>> {
        ["staged-seed0.jsonl", "staged-seed1.jsonl"]
            .iter()
            .map(|f| std::fs::read(dir.join("tune/runs").join(f)).unwrap())
            .collect()
    };
    let cold = run_experiment(&exp).unwrap();
    let cold_runs = read_runs();
    let warm = run_experiment(&exp).unwrap();
    checks.push((
        "warm-cache rerun",
        cold.succeeded() && warm.succeeded() && cold_runs == read_runs(),
    ));

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let detail = if failed.is_empty() {
        format!("{} checks", checks.len())
    } else {
        format!("failed: {}", failed.join(", "))
    };
    outcome(failed.is_empty(), detail)
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();

    results.push((1, "partition exactness", criterion_1()));

    let start = Instant::now();
    let runs: Vec<SynthRuns> = [2usize, 10].into_iter().map(synth_runs).collect();
    let elapsed = start.elapsed();
    results.push((2, "synthetic strategy ordering", criterion_2(&runs, elapsed)));
    results.push((3, "mode recovery", criterion_3()));
    results.push((4, "oracle dominance", criterion_4(&runs)));
    results.push((5, "optimizer sanity", criterion_5()));
    results.push((6, "bandit behavior", criterion_6()));
    results.push((7, "test-function values", criterion_7()));
    results.push((8, "plumbing", criterion_8(dir.path())));

    let mut all = true;
    for (n, name, o) in &results {
        all &= o.pass;
        println!(
            "criterion {n} {:<28} {}  {}",
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
