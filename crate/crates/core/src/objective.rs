//! The optimisers see a problem only through [`Objective`]: a loss on a
//! freshly sampled batch plus a deterministic test loss.

use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::problems::{self, CollocationBatch, ProblemSpec};
use crate::seeding::Rng;

pub trait Objective: Sync {
    type Batch: Send + Sync;

    fn dim(&self) -> usize;
    fn label(&self) -> String;
    fn sample_batch(&self, rng: &mut Rng) -> Self::Batch;
    /// Training loss on one batch; `fitness = -loss`.
    fn loss(&self, w: &[f64], batch: &Self::Batch) -> Result<f64>;
    fn test_loss(&self, w: &[f64]) -> Result<f64>;

    /// Error against a reference solution, when one exists.
    fn solution_error(&self, _w: &[f64]) -> Option<f64> {
        None
    }

    fn problem(&self) -> Option<(&ProblemSpec, &NetworkSpec)> {
        None
    }
}

pub trait GradientObjective: Objective {
    fn loss_grad(&self, w: &[f64], batch: &Self::Batch) -> Result<(f64, Vec<f64>)>;
}

/// A PINN: problem definition plus network architecture.
#[derive(Debug, Clone)]
pub struct PinnObjective {
    pub problem: ProblemSpec,
    pub network: NetworkSpec,
    test_grid: CollocationBatch,
}

impl PinnObjective {
    pub fn new(problem: ProblemSpec, network: NetworkSpec) -> Result<Self> {
        problem.validate()?;
        if network.input_dim() != problem.input_dim() || network.output_dim() != problem.output_dim() {
            return Err(Error::Config(format!(
                "network {}→{} does not fit problem {}",
                network.input_dim(),
                network.output_dim(),
                problem.id()
            )));
        }
        let test_grid = problems::test_batch(&problem);
        Ok(PinnObjective { problem, network, test_grid })
    }

    /// Problem with its preset network.
    pub fn with_default_network(problem: ProblemSpec) -> Result<Self> {
        let net = problem.default_network();
        Self::new(problem, net)
    }
}

impl Objective for PinnObjective {
    type Batch = CollocationBatch;

    fn dim(&self) -> usize {
        self.network.param_count()
    }

    fn label(&self) -> String {
        self.problem.label()
    }

    fn sample_batch(&self, rng: &mut Rng) -> CollocationBatch {
        problems::sample_batch(&self.problem, rng)
    }

    fn loss(&self, w: &[f64], batch: &CollocationBatch) -> Result<f64> {
        Ok(problems::loss(&self.problem, &self.network, w, batch)?.total)
    }

    fn test_loss(&self, w: &[f64]) -> Result<f64> {
        Ok(problems::loss(&self.problem, &self.network, w, &self.test_grid)?.total)
    }

    fn solution_error(&self, w: &[f64]) -> Option<f64> {
        problems::solution_mse(&self.problem, &self.network, w).and_then(|r| r.ok())
    }

    fn problem(&self) -> Option<(&ProblemSpec, &NetworkSpec)> {
        Some((&self.problem, &self.network))
    }
}

impl GradientObjective for PinnObjective {
    fn loss_grad(&self, w: &[f64], batch: &CollocationBatch) -> Result<(f64, Vec<f64>)> {
        let (l, g) = problems::loss_and_grad(&self.problem, &self.network, w, batch)?;
        Ok((l.total, g))
    }
}

/// `‖w − center‖²`, with no batch noise. Useful as a sanity objective.
#[derive(Debug, Clone)]
pub struct Sphere {
    pub center: Vec<f64>,
}

impl Objective for Sphere {
    type Batch = ();

    fn dim(&self) -> usize {
        self.center.len()
    }

    fn label(&self) -> String {
        format!("sphere[d={}]", self.center.len())
    }

    fn sample_batch(&self, _rng: &mut Rng) {}

    fn loss(&self, w: &[f64], _batch: &()) -> Result<f64> {
        Ok(w.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    fn test_loss(&self, w: &[f64]) -> Result<f64> {
        self.loss(w, &())
    }
}

impl GradientObjective for Sphere {
    fn loss_grad(&self, w: &[f64], _batch: &()) -> Result<(f64, Vec<f64>)> {
        let g = w.iter().zip(&self.center).map(|(a, b)| 2.0 * (a - b)).collect();
        Ok((self.loss(w, &())?, g))
    }
}
