//! Assigning instances to at most `K` configuration modes.
//!
//! All functions take an instance × configuration cost table (`N × M`, lower is
//! better). The optimal partition chooses a set `S` of at most `K`
//! configurations minimizing `Σ_j min_{i∈S} cost[j][i]`; this is a k-median over
//! the candidate columns and is solved exactly by subset enumeration, or
//! approximately by swap local search. Clustering of normalized response rows is
//! the cheaper alternative. Ties are always broken toward the lowest index.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on `N · C(M, K)` for [`partition_exact`].
pub const DEFAULT_ENUMERATION_BUDGET: f64 = 5e7;

pub const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Group of each instance, in `0..K`.
    pub assignment: Vec<usize>,
    /// Configuration (column) representing each group.
    pub representatives: Vec<usize>,
    /// Summed cost of each group's instances under its representative.
    pub per_partition_cost: Vec<f64>,
    pub total_cost: f64,
}

impl Partition {
    /// Builds a partition from an assignment and representatives, recomputing costs.
    pub fn from_parts(costs: &DMatrix<f64>, assignment: Vec<usize>, representatives: Vec<usize>) -> Self {
        let mut per = vec![0.0; representatives.len()];
        let mut total = 0.0;
        for (j, &g) in assignment.iter().enumerate() {
            let c = costs[(j, representatives[g])];
            per[g] += c;
            total += c;
        }
        Partition {
            assignment,
            representatives,
            per_partition_cost: per,
            total_cost: total,
        }
    }

    pub fn k(&self) -> usize {
        self.representatives.len()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &g in &self.assignment {
            sizes[g] += 1;
        }
        sizes
    }

    /// Number of groups that received at least one instance.
    pub fn effective_k(&self) -> usize {
        self.group_sizes().iter().filter(|&&s| s > 0).count()
    }

    /// Instances assigned to `group`.
    pub fn members(&self, group: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == group)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn mean_cost(&self) -> f64 {
        self.total_cost / self.assignment.len() as f64
    }
}

fn check_k(costs: &DMatrix<f64>, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Argument("K must be positive".into()));
    }
    if k > costs.ncols() {
        return Err(Error::Argument(format!(
            "K = {k} exceeds the number of configurations ({})",
            costs.ncols()
        )));
    }
    if costs.nrows() == 0 {
        return Err(Error::Argument("cost table has no instances".into()));
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Assigns every instance to its best configuration in `subset` (sorted ascending).
fn assign_to_subset(costs: &DMatrix<f64>, subset: &[usize]) -> Partition {
    let assignment = (0..costs.nrows())
        .map(|j| {
            let mut best = 0;
            for (g, &i) in subset.iter().enumerate().skip(1) {
                if costs[(j, i)] < costs[(j, subset[best])] {
                    best = g;
                }
            }
            best
        })
        .collect();
    Partition::from_parts(costs, assignment, subset.to_vec())
}

fn subset_cost(costs: &DMatrix<f64>, subset: &[usize]) -> f64 {
    (0..costs.nrows())
        .map(|j| subset.iter().map(|&i| costs[(j, i)]).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Globally optimal partition into at most `k` groups by enumerating every
/// `k`-subset of configurations.
pub fn partition_exact(costs: &DMatrix<f64>, k: usize) -> Result<Partition> {
    partition_exact_with_budget(costs, k, DEFAULT_ENUMERATION_BUDGET)
}

pub fn partition_exact_with_budget(costs: &DMatrix<f64>, k: usize, budget: f64) -> Result<Partition> {
    check_k(costs, k)?;
    let (n, m) = costs.shape();
    let work = n as f64 * binomial(m, k);
    if work > budget {
        return Err(Error::Capacity(format!(
            "exact partition needs {work:.3e} row evaluations (budget {budget:.3e}); use the greedy method"
        )));
    }

    struct Search<'a> {
        costs: &'a DMatrix<f64>,
        k: usize,
        // prefix[d] = per-instance min over the first d chosen configurations
        prefix: Vec<Vec<f64>>,
        chosen: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl Search<'_> {
        fn run(&mut self, start: usize) {
            let depth = self.chosen.len();
            let m = self.costs.ncols();
            for i in start..=(m - (self.k - depth)) {
                let (head, tail) = self.prefix.split_at_mut(depth + 1);
                let prev = &head[depth];
                let next = &mut tail[0];
                for (j, slot) in next.iter_mut().enumerate() {
                    *slot = prev[j].min(self.costs[(j, i)]);
                }
                self.chosen.push(i);
                if depth + 1 == self.k {
                    let total: f64 = self.prefix[depth + 1].iter().sum();
                    if self.best.as_ref().is_none_or(|(b, _)| total < *b) {
                        self.best = Some((total, self.chosen.clone()));
                    }
                } else {
                    self.run(i + 1);
                }
                self.chosen.pop();
            }
        }
    }

    let mut search = Search {
        costs,
        k,
        prefix: vec![vec![f64::INFINITY; n]; k + 1],
        chosen: Vec::with_capacity(k),
        best: None,
    };
    search.run(0);
    let (_, subset) = search.best.expect("at least one subset exists");
    Ok(assign_to_subset(costs, &subset))
}

/// Swap local search, first from a greedy build and then from random subsets
/// (`restarts` starts in total); never better than [`partition_exact`], but
/// scales to large tables.
pub fn partition_greedy(costs: &DMatrix<f64>, k: usize, seed: u64, restarts: usize) -> Result<Partition> {
    check_k(costs, k)?;
    let m = costs.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for start in 0..restarts.max(1) {
        let mut subset = if start == 0 {
            build_subset(costs, k)
        } else {
            sample(&mut rng, m, k).into_vec()
        };
        subset.sort_unstable();
        let mut current = subset_cost(costs, &subset);
        loop {
            // best single swap; earliest wins ties
            let mut step: Option<(f64, usize, usize)> = None;
            for pos in 0..k {
                for cand in 0..m {
                    if subset.contains(&cand) {
                        continue;
                    }
                    let old = subset[pos];
                    subset[pos] = cand;
                    let c = subset_cost(costs, &subset);
                    subset[pos] = old;
                    if c < current && step.is_none_or(|(s, _, _)| c < s) {
                        step = Some((c, pos, cand));
                    }
                }
            }
            let Some((c, pos, cand)) = step else { break };
            subset[pos] = cand;
            subset.sort_unstable();
            current = c;
        }
        if best.as_ref().is_none_or(|(b, _)| current < *b) {
            best = Some((current, subset));
        }
    }
    Ok(assign_to_subset(costs, &best.unwrap().1))
}

/// Adds one configuration at a time, each time the one lowering the cost most.
fn build_subset(costs: &DMatrix<f64>, k: usize) -> Vec<usize> {
    let mut subset: Vec<usize> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut pick: Option<(f64, usize)> = None;
        for cand in 0..costs.ncols() {
            if subset.contains(&cand) {
                continue;
            }
            subset.push(cand);
            let c = subset_cost(costs, &subset);
            subset.pop();
            if pick.is_none_or(|(b, _)| c < b) {
                pick = Some((c, cand));
            }
        }
        subset.push(pick.expect("k <= number of configurations").1);
    }
    subset
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means with k-means++ seeding and [`KMEANS_RESTARTS`] restarts, keeping the
/// lowest within-cluster sum of squares. Labels are numbered by first appearance.
pub fn kmeans_cluster(features: &DMatrix<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = features.nrows();
    if k == 0 {
        return Err(Error::Argument("K must be positive".into()));
    }
    if k > n {
        return Err(Error::Argument(format!("K = {k} exceeds the number of rows ({n})")));
    }
    let rows: Vec<Vec<f64>> = features.row_iter().map(|r| r.iter().copied().collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (wcss, labels) = lloyd(&rows, k, &mut rng);
        if best.as_ref().is_none_or(|(b, _)| wcss < *b) {
            best = Some((wcss, labels));
        }
    }
    Ok(relabel(&best.unwrap().1))
}

fn relabel(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

fn plus_plus_seed(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![rows[rng.random_range(0..rows.len())].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = rows.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..rows.len())
        };
        centers.push(rows[pick].clone());
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn lloyd(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<usize>) {
    let dim = rows[0].len();
    let mut centers = plus_plus_seed(rows, k, rng);
    let mut labels = vec![usize::MAX; rows.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let mut best = 0;
            let mut best_d = sq_dist(r, &centers[0]);
            for (c, center) in centers.iter().enumerate().skip(1) {
                let d = sq_dist(r, center);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (r, &l) in rows.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(r).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster at the point farthest from its center
                let far = (0..rows.len())
                    .filter(|&i| counts[labels[i]] > 1)
                    .map(|i| (i, sq_dist(&rows[i], &centers[labels[i]])))
                    .fold(None::<(usize, f64)>, |acc, (i, d)| match acc {
                        Some((_, bd)) if bd >= d => acc,
                        _ => Some((i, d)),
                    });
                if let Some((i, _)) = far {
                    counts[labels[i]] -= 1;
                    sums[labels[i]].iter_mut().zip(&rows[i]).for_each(|(s, v)| *s -= v);
                    labels[i] = c;
                    counts[c] = 1;
                    sums[c] = rows[i].clone();
                    changed = true;
                }
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let wcss = rows
        .iter()
        .zip(&labels)
        .map(|(r, &l)| sq_dist(r, &centers[l]))
        .sum();
    (wcss, labels)
}

/// Picks, for each cluster, the configuration with the lowest mean cost over
/// the cluster's instances. Empty clusters are kept as dropped groups and take
/// the overall best configuration.
pub fn cluster_to_partition(costs: &DMatrix<f64>, cluster_ids: &[usize]) -> Result<Partition> {
    if cluster_ids.len() != costs.nrows() {
        return Err(Error::Argument(format!(
            "{} cluster ids for {} instances",
            cluster_ids.len(),
            costs.nrows()
        )));
    }
    if costs.ncols() == 0 {
        return Err(Error::Argument("cost table has no configurations".into()));
    }
    let k = cluster_ids.iter().max().map_or(1, |m| m + 1);
    let argmin_over = |members: &[usize]| -> usize {
        let mut best = 0;
        let mut best_v = f64::INFINITY;
        for i in 0..costs.ncols() {
            let v = members.iter().map(|&j| costs[(j, i)]).sum::<f64>() / members.len() as f64;
            if v < best_v {
                best = i;
                best_v = v;
            }
        }
        best
    };
    let everyone: Vec<usize> = (0..costs.nrows()).collect();
    let representatives = (0..k)
        .map(|c| {
            let members: Vec<usize> = everyone.iter().copied().filter(|&j| cluster_ids[j] == c).collect();
            if members.is_empty() {
                argmin_over(&everyone)
            } else {
                argmin_over(&members)
            }
        })
        .collect();
    Ok(Partition::from_parts(costs, cluster_ids.to_vec(), representatives))
}

/// Best fraction of matching labels over all relabelings of `predicted`.
/// Exact (full permutation search) up to 8 labels, greedy matching beyond.
pub fn partition_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Argument("label vectors differ in length".into()));
    }
    if predicted.is_empty() {
        return Ok(1.0);
    }
    let k = predicted.iter().chain(truth).max().unwrap() + 1;
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &t) in predicted.iter().zip(truth) {
        confusion[p][t] += 1;
    }
    let matched = if k <= 8 {
        let mut perm: Vec<usize> = (0..k).collect();
        best_permutation(&confusion, &mut perm, 0)
    } else {
        greedy_matching(confusion)
    };
    Ok(matched as f64 / predicted.len() as f64)
}

fn best_permutation(confusion: &[Vec<usize>], perm: &mut Vec<usize>, pos: usize) -> usize {
    if pos == perm.len() {
        return perm.iter().enumerate().map(|(p, &t)| confusion[p][t]).sum();
    }
    let mut best = 0;
    for i in pos..perm.len() {
        perm.swap(pos, i);
        best = best.max(best_permutation(confusion, perm, pos + 1));
        perm.swap(pos, i);
    }
    best
}

fn greedy_matching(mut confusion: Vec<Vec<usize>>) -> usize {
    let k = confusion.len();
    let mut total = 0;
    for _ in 0..k {
        let (p, t, v) = (0..k)
            .flat_map(|p| (0..k).map(move |t| (p, t)))
            .map(|(p, t)| (p, t, confusion[p][t]))
            .max_by_key(|&(_, _, v)| v)
            .unwrap();
        total += v;
        confusion[p].iter_mut().for_each(|c| *c = 0);
        confusion.iter_mut().for_each(|row| row[t] = 0);
    }
    total
}
