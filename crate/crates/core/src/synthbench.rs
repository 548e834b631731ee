//! Synthetic multi-modal tuning benchmark.
//!
//! A problem has `K` modes of `N` instances each. Every instance is one of four
//! classic test functions (Ackley, Griewank, Rastrigin, Zakharov), randomly
//! rotated, shifted to its mode center and rescaled so its mean value on the
//! unit sphere around the minimum is one. Instances of the same mode share a
//! minimizer, so the mode labels are the ground-truth partition.

use std::f64::consts::{E, PI};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{Cost, EvalRequest, Evaluator};
use crate::paramspace::{Configuration, ParamSpace};

/// Points on the unit sphere used to calibrate each instance's scale.
pub const SCALE_SAMPLES: usize = 128;
/// Mode centers are drawn uniformly from `[-CENTER_RANGE, CENTER_RANGE]^d`.
pub const CENTER_RANGE: f64 = 2.0;
/// Initial optimizer step size for synthetic problems, a quarter of the
/// center box width.
pub const DEFAULT_SIGMA0: f64 = CENTER_RANGE / 2.0;

pub fn ackley(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let sq = x.iter().map(|v| v * v).sum::<f64>() / d;
    let cos = x.iter().map(|v| (2.0 * PI * v).cos()).sum::<f64>() / d;
    -20.0 * (-0.2 * sq.sqrt()).exp() - cos.exp() + 20.0 + E
}

pub fn griewank(x: &[f64]) -> f64 {
    let sum = x.iter().map(|v| v * v).sum::<f64>() / 4000.0;
    let prod: f64 = x
        .iter()
        .enumerate()
        .map(|(i, v)| (v / ((i + 1) as f64).sqrt()).cos())
        .product();
    1.0 + sum - prod
}

pub fn rastrigin(x: &[f64]) -> f64 {
    10.0 * x.len() as f64
        + x.iter()
            .map(|v| v * v - 10.0 * (2.0 * PI * v).cos())
            .sum::<f64>()
}

pub fn zakharov(x: &[f64]) -> f64 {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    let lin: f64 = x.iter().enumerate().map(|(i, v)| 0.5 * (i + 1) as f64 * v).sum();
    sq + lin.powi(2) + lin.powi(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseFunction {
    Ackley,
    Griewank,
    Rastrigin,
    Zakharov,
}

impl BaseFunction {
    pub const ALL: [BaseFunction; 4] = [
        BaseFunction::Ackley,
        BaseFunction::Griewank,
        BaseFunction::Rastrigin,
        BaseFunction::Zakharov,
    ];

    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            BaseFunction::Ackley => ackley(x),
            BaseFunction::Griewank => griewank(x),
            BaseFunction::Rastrigin => rastrigin(x),
            BaseFunction::Zakharov => zakharov(x),
        }
    }
}

/// Haar-uniform rotation: QR of a Gaussian matrix with sign-corrected `R`
/// diagonal, flipped to determinant +1.
pub fn random_rotation<R: Rng>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for c in 0..d {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

fn unit_sphere_point<R: Rng>(d: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v: DVector<f64> = DVector::from_fn(d, |_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticInstance {
    pub base: BaseFunction,
    pub rotation: DMatrix<f64>,
    pub mode: usize,
    pub scale: f64,
}

/// Parameters that regenerate a problem exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemDescriptor {
    pub seed: u64,
    pub dim: usize,
    pub modes: usize,
    pub per_mode: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_center_separation: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticProblem {
    descriptor: ProblemDescriptor,
    centers: Vec<DVector<f64>>,
    instances: Vec<SyntheticInstance>,
    instance_ids: Vec<String>,
}

pub fn make_problem(d: usize, k: usize, n: usize, seed: u64) -> Result<SyntheticProblem> {
    SyntheticProblem::generate(ProblemDescriptor {
        seed,
        dim: d,
        modes: k,
        per_mode: n,
        min_center_separation: None,
    })
}

/// Like [`make_problem`], redrawing mode centers until every pair is at least
/// `min_separation` apart.
pub fn make_problem_separated(d: usize, k: usize, n: usize, seed: u64, min_separation: f64) -> Result<SyntheticProblem> {
    SyntheticProblem::generate(ProblemDescriptor {
        seed,
        dim: d,
        modes: k,
        per_mode: n,
        min_center_separation: Some(min_separation),
    })
}

impl SyntheticProblem {
    pub fn generate(desc: ProblemDescriptor) -> Result<Self> {
        let ProblemDescriptor {
            seed,
            dim: d,
            modes: k,
            per_mode: n,
            min_center_separation,
        } = desc;
        if d < 2 || k < 1 || n < 1 {
            return Err(Error::Argument(format!(
                "need d >= 2, K >= 1, N >= 1 (got d={d}, K={k}, N={n})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let min_sep = min_center_separation.unwrap_or(0.0);
        let max_possible = 2.0 * CENTER_RANGE * (d as f64).sqrt();
        if k > 1 && min_sep >= max_possible {
            return Err(Error::Argument(format!(
                "centers cannot be {min_sep} apart inside [-{CENTER_RANGE}, {CENTER_RANGE}]^{d}"
            )));
        }
        let centers = loop {
            let centers: Vec<DVector<f64>> = (0..k)
                .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-CENTER_RANGE..=CENTER_RANGE)))
                .collect();
            let separated = (0..k).all(|a| (a + 1..k).all(|b| (&centers[a] - &centers[b]).norm() >= min_sep));
            if separated {
                break centers;
            }
        };

        let mut instances = Vec::with_capacity(k * n);
        let mut instance_ids = Vec::with_capacity(k * n);
        for mode in 0..k {
            for i in 0..n {
                let base = BaseFunction::ALL[i % 4];
                let rotation = random_rotation(d, &mut rng);
                let mean = (0..SCALE_SAMPLES)
                    .map(|_| {
                        let u = unit_sphere_point(d, &mut rng);
                        base.eval((&rotation * u).as_slice())
                    })
                    .sum::<f64>()
                    / SCALE_SAMPLES as f64;
                instances.push(SyntheticInstance {
                    base,
                    rotation,
                    mode,
                    scale: 1.0 / mean,
                });
                instance_ids.push(format!("m{mode}-i{i}"));
            }
        }
        Ok(SyntheticProblem {
            descriptor: desc,
            centers,
            instances,
            instance_ids,
        })
    }

    pub fn descriptor(&self) -> ProblemDescriptor {
        self.descriptor
    }

    pub fn dim(&self) -> usize {
        self.descriptor.dim
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn centers(&self) -> &[DVector<f64>] {
        &self.centers
    }

    pub fn instances(&self) -> &[SyntheticInstance] {
        &self.instances
    }

    pub fn ground_truth_labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.mode).collect()
    }

    pub fn eval_datum(&self, index: usize, x: &[f64]) -> Result<f64> {
        let inst = self.instances.get(index).ok_or_else(|| {
            Error::Argument(format!("instance {index} out of range ({} instances)", self.len()))
        })?;
        if x.len() != self.dim() {
            return Err(Error::Argument(format!(
                "point has dimension {}, problem has {}",
                x.len(),
                self.dim()
            )));
        }
        let shifted = DVector::from_column_slice(x) - &self.centers[inst.mode];
        let rotated = &inst.rotation * shifted;
        Ok(inst.scale * inst.base.eval(rotated.as_slice()))
    }

    /// Linear search space `x0..x{d-1}` starting at the origin.
    pub fn search_space(&self, sigma0: f64) -> Result<ParamSpace> {
        ParamSpace::linear_origin(self.dim(), sigma0)
    }
}

impl Evaluator for SyntheticProblem {
    fn instance_ids(&self) -> &[String] {
        &self.instance_ids
    }

    fn evaluate(&self, requests: &[EvalRequest<'_>]) -> Result<Vec<Vec<Cost>>> {
        requests
            .par_iter()
            .map(|req| {
                let x = config_point(req.config, self.dim())?;
                req.instances
                    .iter()
                    .map(|&j| self.eval_datum(j, &x).map(Cost::from))
                    .collect()
            })
            .collect()
    }
}

fn config_point(cfg: &Configuration, dim: usize) -> Result<Vec<f64>> {
    (0..dim)
        .map(|i| {
            cfg.get(&format!("x{i}"))
                .ok_or_else(|| Error::Argument(format!("configuration lacks coordinate x{i}")))
        })
        .collect()
}
