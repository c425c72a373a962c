//! Multi-run experiments described by a TOML file.
//!
//! ```toml
//! master_seed = 7
//! runs = 10
//!
//! [[cell]]
//! name = "convdiff-v8"
//! problem = "convdiff"
//! constants = { v = 8.0 }
//! algorithms = ["adam", "xnes", "tnes"]
//! sources = ["priors/convdiff-v0.5.prior.json"]
//! max_evaluation = 200000
//! compare_at = 50000
//! ```
//!
//! Unset optimiser fields fall back to the defaults of the problem
//! family. Relative source paths resolve against the experiment file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::export::{self, CellReport};
use super::record::RunRecord;
use super::stats::{friedman_test, mann_whitney_u, median, Friedman, MannWhitney};
use crate::adam::{adam_run, AdamConfig};
use crate::error::{Error, Result};
use crate::objective::PinnObjective;
use crate::priors;
use crate::problems::ProblemSpec;
use crate::seeding::SeedPath;
use crate::transfer::{tnes_run, SourcePrior, TransferPlan};
use crate::xnes::{base_record, xnes_run, EsConfig};

/// Environment variable holding the number of concurrent runs.
pub const WORKERS_ENV: &str = "TNES_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Adam,
    Xnes,
    Tnes,
}

impl Algorithm {
    pub fn id(self) -> &'static str {
        match self {
            Algorithm::Adam => "adam",
            Algorithm::Xnes => "xnes",
            Algorithm::Tnes => "tnes",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Algorithm::Adam),
            "xnes" => Ok(Algorithm::Xnes),
            "tnes" => Ok(Algorithm::Tnes),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub runs: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub svg: bool,
    #[serde(rename = "cell")]
    pub cells: Vec<CellConfig>,
}

fn yes() -> bool {
    true
}

/// One problem instance and the optimisers compared on it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub name: String,
    /// Problem preset id.
    pub problem: String,
    #[serde(default)]
    pub constants: BTreeMap<String, f64>,
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub runs: Option<usize>,
    #[serde(default)]
    pub sources: Vec<PathBuf>,
    /// `[interior, initial/boundary]` collocation counts per evaluation.
    #[serde(default)]
    pub collocation_points: Option<[usize; 2]>,
    #[serde(default)]
    pub max_evaluation: Option<usize>,
    #[serde(default)]
    pub population_size: Option<usize>,
    /// `[η_μ, η_A, η_α]`.
    #[serde(default)]
    pub learning_rate: Option<[f64; 3]>,
    /// `[μ0, σ0]`.
    #[serde(default)]
    pub initial_search_distribution: Option<[f64; 2]>,
    /// `[Δt, t_max]`.
    #[serde(default)]
    pub transfer_plan: Option<[usize; 2]>,
    #[serde(default)]
    pub projection_radius: Option<f64>,
    /// Initial source coefficients; default is equal weights.
    #[serde(default)]
    pub initial_mixing: Option<Vec<f64>>,
    #[serde(default)]
    pub target_loss: Option<f64>,
    #[serde(default)]
    pub adam_initial_learning_rate: Option<f64>,
    /// Extra checkpoint at which best training losses are compared.
    #[serde(default)]
    pub compare_at: Option<usize>,
}

/// A cell with every default filled in and its priors loaded.
#[derive(Debug, Clone)]
pub struct ResolvedCell {
    pub name: String,
    pub objective: PinnObjective,
    pub algorithms: Vec<Algorithm>,
    pub runs: usize,
    pub es: EsConfig,
    pub plan: TransferPlan,
    pub adam: AdamConfig,
    pub sources: Vec<SourcePrior>,
    pub compare_at: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file, resolving relative source paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for c in &mut cfg.cells {
            for s in &mut c.sources {
                if s.is_relative() {
                    *s = base.join(&*s);
                }
            }
        }
        if let Some(out) = &mut cfg.out_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        let mut names = std::collections::HashSet::new();
        for c in &self.cells {
            if !names.insert(export::slug(&c.name)) {
                return Err(Error::Config(format!("duplicate cell name `{}`", c.name)));
            }
            if c.algorithms.is_empty() {
                return Err(Error::Config(format!("cell `{}` has no algorithms", c.name)));
            }
            if c.runs == Some(0) {
                return Err(Error::Config(format!("cell `{}` has runs = 0", c.name)));
            }
            if c.algorithms.contains(&Algorithm::Tnes) && c.sources.is_empty() {
                return Err(Error::Config(format!("tNES cell `{}` names no source prior", c.name)));
            }
        }
        Ok(())
    }
}

impl CellConfig {
    pub fn resolve(&self, default_runs: usize) -> Result<ResolvedCell> {
        let mut problem = ProblemSpec::preset(&self.problem)?;
        for (k, v) in &self.constants {
            problem.set_const(k, *v)?;
        }
        if let Some([m, m_bc]) = self.collocation_points {
            problem.m_interior = m;
            problem.m_ic_bc = m_bc;
        }
        let objective = PinnObjective::with_default_network(problem)?;
        let kind = objective.problem.kind();

        let mut es = EsConfig::defaults_for(kind);
        let mut plan = TransferPlan::defaults_for(kind);
        let mut adam = AdamConfig::defaults_for(kind);
        if let Some(n) = self.max_evaluation {
            es.max_evaluations = n;
            adam.max_evaluations = n;
        }
        if let Some(p) = self.population_size {
            es.population = p;
        }
        if let Some([eta_mu, eta_a, eta_alpha]) = self.learning_rate {
            es.eta_mu = eta_mu;
            es.eta_a = eta_a;
            plan.eta_alpha = eta_alpha;
        }
        if let Some([mu0, sigma0]) = self.initial_search_distribution {
            es.mu0 = mu0;
            es.sigma0 = sigma0;
        }
        if let Some([dt, t_max]) = self.transfer_plan {
            plan.delta_t = dt;
            plan.t_max = t_max;
        }
        if let Some(r) = self.projection_radius {
            plan.r = r;
        }
        plan.alpha0 = self.initial_mixing.clone();
        if let Some(t) = self.target_loss {
            es.target_loss = t;
            adam.target_loss = t;
        }
        if let Some(lr) = self.adam_initial_learning_rate {
            adam.lr0 = lr;
        }
        es.validate()?;
        plan.validate()?;
        adam.validate()?;

        let d = objective.network.param_count();
        let sources = self
            .sources
            .iter()
            .map(|p| SourcePrior::from_document(&priors::load_prior_for(p, d)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(ResolvedCell {
            name: self.name.clone(),
            objective,
            algorithms: self.algorithms.clone(),
            runs: self.runs.unwrap_or(default_runs),
            es,
            plan,
            adam,
            sources,
            compare_at: self.compare_at,
        })
    }
}

/// Seed of run `run` in cell `cell`. All algorithms of a cell share it.
pub fn run_seed(master: u64, cell: &str, run: usize) -> u64 {
    SeedPath::new(master).child_str(cell).child(run as u64).key()
}

impl ResolvedCell {
    /// One run; failures are folded into the record.
    pub fn run(&self, alg: Algorithm, seed: u64) -> RunRecord {
        let res = match alg {
            Algorithm::Adam => adam_run(&self.objective, &self.adam, seed),
            Algorithm::Xnes => xnes_run(&self.objective, &self.es, seed),
            Algorithm::Tnes => tnes_run(&self.objective, &self.es, &self.plan, &self.sources, seed),
        };
        res.unwrap_or_else(|e| {
            let mut r = base_record(&self.objective, alg.id(), seed);
            r.failure = Some(e.to_string());
            r
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    /// What was compared: `final_test_loss` or `best_train_loss@<evals>`.
    pub metric: String,
    pub test: MannWhitney,
    /// `a` lower than `b` at the 5% level.
    pub a_better: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub algorithm: String,
    pub runs: usize,
    pub failures: usize,
    pub median_final_test_loss: f64,
    pub worst_final_test_loss: f64,
    #[serde(default)]
    pub median_final_mse: Option<f64>,
    #[serde(default)]
    pub worst_final_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub problem: String,
    pub algorithms: Vec<AlgorithmSummary>,
    #[serde(default)]
    pub friedman: Option<Friedman>,
    pub pairwise: Vec<PairwiseTest>,
}

pub const SIGNIFICANCE: f64 = 0.05;

/// Per-algorithm aggregates, Friedman over final test losses (runs as
/// blocks) and pairwise Mann-Whitney tests.
pub fn summarize_cell(cell: &str, problem: &str, records: &[RunRecord], compare_at: Option<usize>) -> CellSummary {
    let mut order: Vec<String> = Vec::new();
    for r in records {
        if !order.contains(&r.algorithm) {
            order.push(r.algorithm.clone());
        }
    }
    let group = |alg: &str| records.iter().filter(|r| r.algorithm == alg).collect::<Vec<_>>();
    let worst = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut algorithms = Vec::new();
    for alg in &order {
        let rs = group(alg);
        let tests: Vec<f64> = rs.iter().map(|r| r.final_test_loss).collect();
        let mses: Vec<f64> = rs.iter().filter_map(|r| r.final_mse).collect();
        algorithms.push(AlgorithmSummary {
            algorithm: alg.clone(),
            runs: rs.len(),
            failures: rs.iter().filter(|r| r.failure.is_some()).count(),
            median_final_test_loss: median(&tests),
            worst_final_test_loss: worst(&tests),
            median_final_mse: (!mses.is_empty()).then(|| median(&mses)),
            worst_final_mse: (!mses.is_empty()).then(|| worst(&mses)),
        });
    }

    let mut friedman = None;
    if order.len() >= 2 {
        let groups: Vec<Vec<&RunRecord>> = order.iter().map(|a| group(a)).collect();
        let blocks = groups.iter().map(Vec::len).min().unwrap_or(0);
        if blocks >= 2 {
            let m: Vec<Vec<f64>> =
                (0..blocks).map(|b| groups.iter().map(|g| g[b].final_test_loss).collect()).collect();
            friedman = Some(friedman_test(&m));
        }
    }

    let mut pairwise = Vec::new();
    for i in 0..order.len() {
        for j in i + 1..order.len() {
            let (ga, gb) = (group(&order[i]), group(&order[j]));
            let mut metrics: Vec<(String, Box<dyn Fn(&RunRecord) -> f64>)> =
                vec![("final_test_loss".into(), Box::new(|r: &RunRecord| r.final_test_loss))];
            if let Some(e) = compare_at {
                metrics.push((format!("best_train_loss@{e}"), Box::new(move |r: &RunRecord| r.best_train_at(e))));
            }
            for (metric, f) in metrics {
                let a: Vec<f64> = ga.iter().map(|r| f(r)).collect();
                let b: Vec<f64> = gb.iter().map(|r| f(r)).collect();
                let test = mann_whitney_u(&a, &b);
                pairwise.push(PairwiseTest {
                    a: order[i].clone(),
                    b: order[j].clone(),
                    metric,
                    a_better: test.p_less < SIGNIFICANCE,
                    test,
                });
            }
        }
    }
    CellSummary { cell: cell.to_string(), problem: problem.to_string(), algorithms, friedman, pairwise }
}

/// Worker count from [`WORKERS_ENV`], defaulting to the available cores.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub cells: Vec<(CellSummary, CellReport)>,
    pub records: Vec<Vec<RunRecord>>,
}

/// Run every cell and write records, summaries and CSV/SVG exports under
/// `out_dir` (`<cell>/runs/<algorithm>_run<i>.json`, `<cell>/summary.json`).
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let cells: Vec<ResolvedCell> = cfg.cells.iter().map(|c| c.resolve(cfg.runs)).collect::<Result<_>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let jobs: Vec<(usize, Algorithm, usize)> = cells
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| c.algorithms.iter().flat_map(move |&a| (0..c.runs).map(move |r| (ci, a, r))))
        .collect();
    let results: Vec<RunRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(ci, alg, run)| cells[ci].run(alg, run_seed(cfg.master_seed, &cells[ci].name, run)))
            .collect()
    });

    let mut out = ExperimentOutput { cells: Vec::new(), records: Vec::new() };
    for (ci, cell) in cells.iter().enumerate() {
        let dir = out_dir.join(export::slug(&cell.name));
        let runs_dir = dir.join("runs");
        std::fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
        let mut recs = Vec::new();
        for (job, rec) in jobs.iter().zip(&results) {
            if job.0 != ci {
                continue;
            }
            rec.save(&runs_dir.join(format!("{}_run{:03}.json", job.1.id(), job.2)))?;
            recs.push(rec.clone());
        }
        let summary = summarize_cell(&cell.name, &cell.objective.problem.label(), &recs, cell.compare_at);
        let text = serde_json::to_string_pretty(&summary)?;
        crate::priors::write_atomic(&dir.join("summary.json"), text.as_bytes())?;
        let report = export::build_report(&cell.name, &recs);
        export::write_csv(&report, &dir)?;
        if cfg.svg {
            export::write_svg(&report, &dir)?;
        }
        out.cells.push((summary, report));
        out.records.push(recs);
    }
    Ok(out)
}
