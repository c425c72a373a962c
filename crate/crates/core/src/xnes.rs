//! Exponential natural evolution strategies (xNES).
//!
//! The search distribution is `N(μ, AAᵀ)`. Offspring are drawn in natural
//! coordinates `z ~ N(0, I)`, mapped to `w = A·z + μ`, ranked by fitness and
//! shaped into utilities. The update moves `μ` along `A·Σuₖzₖ` and
//! multiplies `A` by the matrix exponential of `½·η_A·Σuₖ(zₖzₖᵀ − I)`, which
//! keeps `A` invertible by construction.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::record::{HistoryRow, RunRecord, StoredDistribution};
use crate::objective::Objective;
use crate::problems::ProblemKind;
use crate::seeding::{keys, Rng, SeedPath};

#[derive(Debug, Clone, PartialEq)]
pub struct SearchDistribution {
    pub mu: DVector<f64>,
    pub a: DMatrix<f64>,
    /// `log|det A|`, maintained incrementally.
    pub log_det_a: f64,
}

impl SearchDistribution {
    /// Build from an explicit transform; fails if `A` is singular.
    pub fn new(mu: DVector<f64>, a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != mu.len() || a.ncols() != mu.len() {
            return Err(Error::DimensionMismatch { what: "transform matrix", expected: mu.len(), got: a.nrows() });
        }
        let log_det_a = log_abs_det(&a)?;
        Ok(SearchDistribution { mu, a, log_det_a })
    }

    /// `μ = mu0·1`, `A = sigma0·I`.
    pub fn isotropic(d: usize, mu0: f64, sigma0: f64) -> Result<Self> {
        if d == 0 || !(sigma0 > 0.0) {
            return Err(Error::Config("need d >= 1 and sigma0 > 0".into()));
        }
        Ok(SearchDistribution {
            mu: DVector::from_element(d, mu0),
            a: DMatrix::identity(d, d) * sigma0,
            log_det_a: d as f64 * sigma0.ln(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `A·z + μ`.
    pub fn transform(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.a * z + &self.mu
    }

    pub fn factorize(&self) -> Result<Factorized> {
        Factorized::new(&self.a)
    }
}

/// `log|det A|` via LU; errors on a singular or non-finite result.
pub fn log_abs_det(a: &DMatrix<f64>) -> Result<f64> {
    let lu = a.clone().lu();
    let u = lu.u();
    let mut s = 0.0;
    for i in 0..u.nrows() {
        s += u[(i, i)].abs().ln();
    }
    if s.is_finite() {
        Ok(s)
    } else {
        Err(Error::Singular)
    }
}

/// LU factorisation of a transform, reused for repeated `A⁻¹·v` solves.
#[derive(Debug, Clone)]
pub struct Factorized {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl Factorized {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let lu = a.clone().lu();
        if !lu.is_invertible() {
            return Err(Error::Singular);
        }
        Ok(Factorized { lu })
    }

    pub fn solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.lu.solve(v).ok_or(Error::Singular)
    }
}

/// Rank-based utilities, index 0 for the best offspring.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityWeights(pub Vec<f64>);

impl UtilityWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `u_k ∝ max(0, ln(λ/2 + 1) − ln k)`, normalised to sum to one.
pub fn utilities(lambda: usize) -> UtilityWeights {
    assert!(lambda >= 1, "population size must be positive");
    let top = (lambda as f64 / 2.0 + 1.0).ln();
    let raw: Vec<f64> = (1..=lambda).map(|k| (top - (k as f64).ln()).max(0.0)).collect();
    let sum: f64 = raw.iter().sum();
    UtilityWeights(raw.into_iter().map(|r| r / sum).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Offspring {
    pub z: DVector<f64>,
    pub w: DVector<f64>,
}

pub fn standard_normal(d: usize, rng: &mut Rng) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

pub fn sample_offspring(sd: &SearchDistribution, lambda: usize, rng: &mut Rng) -> Vec<Offspring> {
    (0..lambda)
        .map(|_| {
            let z = standard_normal(sd.dim(), rng);
            let w = sd.transform(&z);
            Offspring { z, w }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanUpdate {
    /// `μ ← μ + η_μ·A·Σuₖzₖ`.
    #[default]
    Natural,
    /// `μ ← μ + η_μ·Σuₖzₖ`.
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    /// A fresh collocation batch for every offspring.
    #[default]
    PerOffspring,
    /// One batch per generation shared by all offspring.
    SharedPerGeneration,
}

/// One xNES update from natural coordinates sorted best-first.
pub fn xnes_step(
    sd: &SearchDistribution,
    ranked: &[&DVector<f64>],
    u: &UtilityWeights,
    eta_mu: f64,
    eta_a: f64,
    mean_update: MeanUpdate,
) -> Result<SearchDistribution> {
    if ranked.len() != u.len() {
        return Err(Error::DimensionMismatch { what: "ranked offspring", expected: u.len(), got: ranked.len() });
    }
    let d = sd.dim();
    let mut g_delta = DVector::zeros(d);
    let mut g_m = DMatrix::zeros(d, d);
    let mut usum = 0.0;
    for (z, &uk) in ranked.iter().zip(u.as_slice()) {
        if uk == 0.0 {
            continue;
        }
        g_delta.axpy(uk, z, 1.0);
        g_m.ger(uk, z, z, 1.0);
        usum += uk;
    }
    for i in 0..d {
        g_m[(i, i)] -= usum;
    }
    let step = match mean_update {
        MeanUpdate::Natural => &sd.a * &g_delta,
        MeanUpdate::Additive => g_delta,
    };
    let mu = &sd.mu + step * eta_mu;

    let half = 0.5 * eta_a;
    let eig = SymmetricEigen::new(&g_m * half);
    let exp_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::exp));
    let exp_m = &eig.eigenvectors * exp_diag * eig.eigenvectors.transpose();
    let a = &sd.a * exp_m;
    let log_det_a = sd.log_det_a + half * g_m.trace();

    if !(mu.iter().all(|v| v.is_finite()) && a.iter().all(|v| v.is_finite()) && log_det_a.is_finite()) {
        return Err(Error::NonFinite("distribution update"));
    }
    Ok(SearchDistribution { mu, a, log_det_a })
}

/// Optimiser settings shared by xNES and tNES.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsConfig {
    pub population: usize,
    pub eta_mu: f64,
    pub eta_a: f64,
    pub mu0: f64,
    pub sigma0: f64,
    pub max_evaluations: usize,
    /// Stop once a generation's best training loss reaches this.
    pub target_loss: f64,
    /// Generations between test-set evaluations of the champion.
    pub test_interval: usize,
    #[serde(default)]
    pub batch_mode: BatchMode,
    #[serde(default)]
    pub mean_update: MeanUpdate,
}

impl EsConfig {
    /// Default settings for a problem family.
    pub fn defaults_for(kind: ProblemKind) -> Self {
        let (population, eta_a, max_evaluations) = match kind {
            ProblemKind::ConvDiff | ProblemKind::Projectile => (20, 5e-2, 200_000),
            ProblemKind::LinBurgers | ProblemKind::Burgers => (20, 1e-2, 200_000),
            ProblemKind::KdV => (30, 1e-2, 300_000),
        };
        EsConfig {
            population,
            eta_mu: 1.0,
            eta_a,
            mu0: 0.0,
            sigma0: 5e-2,
            max_evaluations,
            target_loss: 1e-9,
            test_interval: 50,
            batch_mode: BatchMode::PerOffspring,
            mean_update: MeanUpdate::Natural,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(Error::Config("population must be at least 1".into()));
        }
        if !(self.eta_mu > 0.0 && self.eta_a > 0.0 && self.sigma0 > 0.0) {
            return Err(Error::Config("learning rates and sigma0 must be positive".into()));
        }
        if self.test_interval == 0 {
            return Err(Error::Config("test interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Evaluate every candidate. Failed evaluations come back as `+∞`.
pub(crate) fn evaluate_population<O: Objective>(
    obj: &O,
    ws: &[DVector<f64>],
    gen_path: SeedPath,
    mode: BatchMode,
) -> Vec<f64> {
    let shared = match mode {
        BatchMode::SharedPerGeneration => {
            Some(obj.sample_batch(&mut gen_path.child(keys::SHARED_BATCH).rng()))
        }
        BatchMode::PerOffspring => None,
    };
    ws.par_iter()
        .enumerate()
        .map(|(k, w)| {
            let res = match &shared {
                Some(b) => obj.loss(w.as_slice(), b),
                None => {
                    let b = obj.sample_batch(&mut gen_path.child(k as u64).rng());
                    obj.loss(w.as_slice(), &b)
                }
            };
            match res {
                Ok(l) if l.is_finite() => l,
                _ => f64::INFINITY,
            }
        })
        .collect()
}

/// Indices sorted by ascending loss; ties keep offspring order.
pub(crate) fn rank_order(losses: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]));
    idx
}

/// Convergence bookkeeping shared by the evolutionary loops.
pub(crate) struct Progress {
    test_interval: usize,
    pub history: Vec<HistoryRow>,
    pub best_train: f64,
    best_test: f64,
    best_weights: Option<Vec<f64>>,
    last_champion: Option<(usize, Vec<f64>)>,
    last_tested: Option<usize>,
}

impl Progress {
    pub fn new(test_interval: usize) -> Self {
        Progress {
            test_interval,
            history: Vec::new(),
            best_train: f64::INFINITY,
            best_test: f64::INFINITY,
            best_weights: None,
            last_champion: None,
            last_tested: None,
        }
    }

    pub fn observe<O: Objective>(&mut self, obj: &O, generation: usize, evaluations: usize, champion: &[f64], champion_loss: f64) {
        self.best_train = self.best_train.min(champion_loss);
        let test_loss = if generation % self.test_interval == 0 {
            self.test(obj, generation, champion)
        } else {
            None
        };
        self.last_champion = Some((generation, champion.to_vec()));
        self.history.push(HistoryRow { evaluations, best_train_loss: self.best_train, test_loss });
    }

    fn test<O: Objective>(&mut self, obj: &O, generation: usize, w: &[f64]) -> Option<f64> {
        self.last_tested = Some(generation);
        let t = obj.test_loss(w).ok().filter(|t| t.is_finite())?;
        if t < self.best_test || self.best_weights.is_none() {
            self.best_test = t;
            self.best_weights = Some(w.to_vec());
        }
        Some(t)
    }

    /// Test the final champion if it was not tested yet, and return
    /// `(best weights, their test loss)`.
    pub fn finish<O: Objective>(&mut self, obj: &O) -> (Vec<f64>, f64) {
        if let Some((g, w)) = self.last_champion.take() {
            if self.last_tested != Some(g) {
                let t = self.test(obj, g, &w);
                if let Some(row) = self.history.last_mut() {
                    row.test_loss = t;
                }
            }
            if self.best_weights.is_none() {
                self.best_weights = Some(w);
            }
        }
        (self.best_weights.clone().unwrap_or_default(), self.best_test)
    }
}

pub(crate) fn base_record<O: Objective>(obj: &O, algorithm: &str, seed: u64) -> RunRecord {
    RunRecord {
        algorithm: algorithm.to_string(),
        problem: obj.label(),
        problem_spec: obj.problem().map(|(p, _)| p.clone()),
        network: obj.problem().map(|(_, n)| n.clone()),
        seed,
        history: Vec::new(),
        mixing: Vec::new(),
        source_labels: Vec::new(),
        best_weights: Vec::new(),
        final_train_loss: f64::INFINITY,
        final_test_loss: f64::INFINITY,
        final_mse: None,
        evaluations: 0,
        generations: 0,
        stopped_on_target: false,
        final_distribution: None,
        wall_seconds: 0.0,
        failure: None,
    }
}

/// Baseline xNES run. All randomness derives from `seed`.
pub fn xnes_run<O: Objective>(obj: &O, cfg: &EsConfig, seed: u64) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let root = SeedPath::new(seed);
    let lambda = cfg.population;
    let u = utilities(lambda);
    let mut sd = SearchDistribution::isotropic(obj.dim(), cfg.mu0, cfg.sigma0)?;
    let mut progress = Progress::new(cfg.test_interval);
    let mut record = base_record(obj, "xnes", seed);
    let mut evaluations = 0;
    let mut generation = 0;

    while evaluations < cfg.max_evaluations {
        let mut rng = root.child(keys::SAMPLE).child(generation as u64).rng();
        let offspring = sample_offspring(&sd, lambda, &mut rng);
        let ws: Vec<DVector<f64>> = offspring.iter().map(|o| o.w.clone()).collect();
        let losses = evaluate_population(obj, &ws, root.child(keys::EVAL).child(generation as u64), cfg.batch_mode);
        evaluations += lambda;
        let order = rank_order(&losses);
        progress.observe(obj, generation, evaluations, ws[order[0]].as_slice(), losses[order[0]]);
        if losses[order[0]] <= cfg.target_loss {
            record.stopped_on_target = true;
            generation += 1;
            break;
        }
        let ranked: Vec<&DVector<f64>> = order.iter().map(|&k| &offspring[k].z).collect();
        match xnes_step(&sd, &ranked, &u, cfg.eta_mu, cfg.eta_a, cfg.mean_update) {
            Ok(next) => sd = next,
            Err(_) => {
                record.failure = Some(Error::NonFiniteUpdate { generation }.to_string());
                generation += 1;
                break;
            }
        }
        generation += 1;
    }

    let (best, test) = progress.finish(obj);
    record.final_mse = obj.solution_error(&best);
    record.best_weights = best;
    record.final_test_loss = test;
    record.final_train_loss = progress.best_train;
    record.history = progress.history;
    record.evaluations = evaluations;
    record.generations = generation;
    record.final_distribution = Some(StoredDistribution::from(&sd));
    record.wall_seconds = started.elapsed().as_secs_f64();
    Ok(record)
}
