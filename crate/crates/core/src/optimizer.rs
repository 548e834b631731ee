//! CMA-ES with an ask/tell interface over [`SearchPoint`]s.
//!
//! Standard (mu/mu_w, lambda) CMA-ES with default recombination weights, rank-one
//! and rank-mu covariance updates and cumulative step-size adaptation. The update
//! only depends on the ordering of the costs of a generation. NaN costs rank last.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::paramspace::SearchPoint;

/// Smallest eigenvalue kept in the covariance, relative to `trace / d`.
const EIGEN_FLOOR: f64 = 1e-14;

/// Default population size `4 + floor(3 ln d)`.
pub fn default_population(dim: usize) -> usize {
    4 + (3.0 * (dim as f64).ln()).floor() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBatch {
    pub points: Vec<SearchPoint>,
    pub generation: u64,
}

#[derive(Debug, Clone)]
struct Params {
    lambda: usize,
    weights: Vec<f64>,
    mueff: f64,
    cc: f64,
    cs: f64,
    c1: f64,
    cmu: f64,
    damps: f64,
    chi_n: f64,
}

impl Params {
    fn new(n: usize, lambda: usize) -> Self {
        let nf = n as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mueff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let cc = (4.0 + mueff / nf) / (nf + 4.0 + 2.0 * mueff / nf);
        let cs = (mueff + 2.0) / (nf + mueff + 5.0);
        let c1 = 2.0 / ((nf + 1.3).powi(2) + mueff);
        let cmu = (1.0 - c1).min(2.0 * (mueff - 2.0 + 1.0 / mueff) / ((nf + 2.0).powi(2) + mueff));
        let damps = 1.0 + 2.0 * (((mueff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + cs;
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        Params {
            lambda,
            weights,
            mueff,
            cc,
            cs,
            c1,
            cmu,
            damps,
            chi_n,
        }
    }
}

/// Full optimizer state. Cloning yields an independent optimizer that produces
/// the same batches as the original.
#[derive(Debug, Clone)]
pub struct CmaEs {
    params: Params,
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    basis: DMatrix<f64>,
    scales: DVector<f64>,
    path_c: DVector<f64>,
    path_s: DVector<f64>,
    generation: u64,
    seed: u64,
    rng: ChaCha8Rng,
    best: Option<(SearchPoint, f64)>,
}

impl CmaEs {
    pub fn new(x0: &SearchPoint, sigma0: f64, lambda: Option<usize>, seed: u64) -> Result<Self> {
        let n = x0.len();
        if n == 0 {
            return Err(Error::Config("search space must have at least one dimension".into()));
        }
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::Config(format!("sigma0 must be positive, got {sigma0}")));
        }
        if x0.coords().iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("initial point must be finite".into()));
        }
        let lambda = lambda.unwrap_or_else(|| default_population(n));
        if lambda < 2 {
            return Err(Error::Config(format!("population size must be >= 2, got {lambda}")));
        }
        Ok(CmaEs {
            params: Params::new(n, lambda),
            mean: DVector::from_column_slice(x0.coords()),
            sigma: sigma0,
            cov: DMatrix::identity(n, n),
            basis: DMatrix::identity(n, n),
            scales: DVector::from_element(n, 1.0),
            path_c: DVector::zeros(n),
            path_s: DVector::zeros(n),
            generation: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            best: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn lambda(&self) -> usize {
        self.params.lambda
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn step_size(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn evolution_paths(&self) -> (&DVector<f64>, &DVector<f64>) {
        (&self.path_c, &self.path_s)
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn best(&self) -> Option<(&SearchPoint, f64)> {
        self.best.as_ref().map(|(p, c)| (p, *c))
    }

    /// Samples `lambda` points from `N(mean, sigma^2 C)`.
    pub fn ask(&mut self) -> CandidateBatch {
        let n = self.dim();
        let scaled = &self.basis * DMatrix::from_diagonal(&self.scales);
        let points = (0..self.params.lambda)
            .map(|_| {
                let z = DVector::from_iterator(
                    n,
                    (0..n).map(|_| StandardNormal.sample(&mut self.rng)),
                );
                let x = &self.mean + self.sigma * (&scaled * z);
                SearchPoint::new(x.iter().copied().collect())
            })
            .collect();
        CandidateBatch {
            points,
            generation: self.generation,
        }
    }

    /// Updates the distribution from the costs of `batch`.
    pub fn tell(&mut self, batch: &CandidateBatch, costs: &[f64]) -> Result<()> {
        let lambda = self.params.lambda;
        if batch.generation != self.generation {
            return Err(Error::State(format!(
                "batch from generation {} told to optimizer at generation {}",
                batch.generation, self.generation
            )));
        }
        if batch.points.len() != lambda || costs.len() != lambda {
            return Err(Error::Argument(format!(
                "expected {lambda} points and costs, got {} and {}",
                batch.points.len(),
                costs.len()
            )));
        }
        if batch.points.iter().any(|p| p.len() != self.dim()) {
            return Err(Error::Argument("candidate dimension mismatch".into()));
        }

        self.update_best(batch, costs);

        let order = rank_order(costs);
        let flat = order
            .first()
            .zip(order.last())
            .is_some_and(|(&a, &b)| cost_cmp(costs[a], costs[b]) == Ordering::Equal);
        self.generation += 1;
        if flat {
            // no ordering information: leave the distribution, widen the search
            self.sigma *= (0.2 + self.params.cs / self.params.damps).exp();
            return Ok(());
        }

        let weights = tie_averaged_weights(&order, costs, &self.params.weights);
        let p = &self.params;
        let n = self.dim();

        let steps: Vec<DVector<f64>> = batch
            .points
            .iter()
            .map(|x| (DVector::from_column_slice(x.coords()) - &self.mean) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(n);
        for (&idx, &w) in order.iter().zip(&weights) {
            if w != 0.0 {
                y_w += w * &steps[idx];
            }
        }

        self.mean += self.sigma * &y_w;

        let inv_sqrt = &self.basis
            * DMatrix::from_diagonal(&self.scales.map(|s| 1.0 / s))
            * self.basis.transpose();
        self.path_s = (1.0 - p.cs) * &self.path_s
            + (p.cs * (2.0 - p.cs) * p.mueff).sqrt() * (&inv_sqrt * &y_w);
        let ps_norm = self.path_s.norm();
        let gen = self.generation as f64;
        let hsig = ps_norm / (1.0 - (1.0 - p.cs).powf(2.0 * gen)).sqrt()
            < (1.4 + 2.0 / (n as f64 + 1.0)) * p.chi_n;
        let hsig_f = if hsig { 1.0 } else { 0.0 };
        self.path_c = (1.0 - p.cc) * &self.path_c
            + hsig_f * (p.cc * (2.0 - p.cc) * p.mueff).sqrt() * &y_w;

        let mut rank_mu = DMatrix::zeros(n, n);
        for (&idx, &w) in order.iter().zip(&weights) {
            if w != 0.0 {
                rank_mu += w * &steps[idx] * steps[idx].transpose();
            }
        }
        let decay = 1.0 - p.c1 - p.cmu + (1.0 - hsig_f) * p.c1 * p.cc * (2.0 - p.cc);
        self.cov = decay * &self.cov
            + p.c1 * &self.path_c * self.path_c.transpose()
            + p.cmu * rank_mu;

        self.sigma *= ((p.cs / p.damps) * (ps_norm / p.chi_n - 1.0)).exp();
        self.sigma = self.sigma.clamp(1e-300, 1e300);

        self.decompose();
        Ok(())
    }

    /// Best evaluated point so far; earliest wins on ties.
    pub fn recommend(&self) -> Result<SearchPoint> {
        self.best
            .as_ref()
            .map(|(p, _)| p.clone())
            .ok_or_else(|| Error::State("no candidate has been evaluated yet".into()))
    }

    fn update_best(&mut self, batch: &CandidateBatch, costs: &[f64]) {
        for (pt, &c) in batch.points.iter().zip(costs) {
            let c = if c.is_nan() { f64::INFINITY } else { c };
            let better = match &self.best {
                None => true,
                Some((_, b)) => c < *b,
            };
            if better {
                self.best = Some((pt.clone(), c));
            }
        }
    }

    fn decompose(&mut self) {
        let n = self.dim();
        let mut sym = self.cov.clone();
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (sym[(i, j)] + sym[(j, i)]);
                sym[(i, j)] = v;
                sym[(j, i)] = v;
            }
        }
        let trace = sym.trace();
        let eig = SymmetricEigen::new(sym);
        let floor = (EIGEN_FLOOR * trace / n as f64).max(f64::MIN_POSITIVE);
        let values = eig.eigenvalues.map(|v| if v.is_finite() { v.max(floor) } else { floor });
        self.basis = eig.eigenvectors;
        self.scales = values.map(f64::sqrt);
        self.cov = &self.basis * DMatrix::from_diagonal(&values) * self.basis.transpose();
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (self.cov[(i, j)] + self.cov[(j, i)]);
                self.cov[(i, j)] = v;
                self.cov[(j, i)] = v;
            }
        }
    }
}

fn cost_cmp(a: f64, b: f64) -> Ordering {
    match (a.is_nan(), b.is_nan()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        (false, false) => a.partial_cmp(&b).unwrap(),
    }
}

/// Candidate indices sorted by cost, NaN last, stable on ties.
fn rank_order(costs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| cost_cmp(costs[a], costs[b]));
    order
}

/// Recombination weight per sorted position, with tied candidates sharing the
/// average weight of the positions they occupy.
fn tie_averaged_weights(order: &[usize], costs: &[f64], base: &[f64]) -> Vec<f64> {
    let at = |pos: usize| base.get(pos).copied().unwrap_or(0.0);
    let mut out = vec![0.0; order.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len()
            && cost_cmp(costs[order[start]], costs[order[end]]) == Ordering::Equal
        {
            end += 1;
        }
        let avg = (start..end).map(at).sum::<f64>() / (end - start) as f64;
        out[start..end].iter_mut().for_each(|w| *w = avg);
        start = end;
    }
    out
}

/// Hands out one candidate at a time and tells the wrapped optimizer once every
/// candidate of the current generation has a cost.
#[derive(Debug, Clone)]
pub struct SequentialCmaEs {
    inner: CmaEs,
    batch: Option<CandidateBatch>,
    costs: Vec<f64>,
}

impl SequentialCmaEs {
    pub fn new(inner: CmaEs) -> Self {
        SequentialCmaEs {
            inner,
            batch: None,
            costs: Vec::new(),
        }
    }

    /// The candidate awaiting a cost; repeated calls return the same point until
    /// [`report`](Self::report) is called.
    pub fn candidate(&mut self) -> SearchPoint {
        if self.batch.is_none() {
            self.batch = Some(self.inner.ask());
            self.costs.clear();
        }
        let batch = self.batch.as_ref().unwrap();
        batch.points[self.costs.len()].clone()
    }

    pub fn report(&mut self, cost: f64) -> Result<()> {
        if self.batch.is_none() {
            return Err(Error::State("no candidate outstanding".into()));
        }
        self.costs.push(cost);
        if self.costs.len() == self.inner.lambda() {
            let batch = self.batch.take().unwrap();
            let costs = std::mem::take(&mut self.costs);
            self.inner.tell(&batch, &costs)?;
        }
        Ok(())
    }

    /// Best point among the candidates reported so far (including a partially
    /// reported generation).
    pub fn recommend(&self) -> Option<(SearchPoint, f64)> {
        let mut best = self.inner.best().map(|(p, c)| (p.clone(), c));
        if let Some(batch) = &self.batch {
            for (p, &c) in batch.points.iter().zip(&self.costs) {
                let c = if c.is_nan() { f64::INFINITY } else { c };
                if best.as_ref().is_none_or(|(_, b)| c < *b) {
                    best = Some((p.clone(), c));
                }
            }
        }
        best
    }

    pub fn inner(&self) -> &CmaEs {
        &self.inner
    }
}
