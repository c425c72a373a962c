//! ADAM baseline with a reduce-on-plateau learning-rate schedule.

use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::record::RunRecord;
use crate::network::NetworkSpec;
use crate::objective::GradientObjective;
use crate::problems::{self, CollocationBatch, ProblemKind, ProblemSpec};
use crate::seeding::{keys, SeedPath};
use crate::xnes::{base_record, Progress};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Standard deviation of the Gaussian weight initialisation.
    pub init_std: f64,
    pub max_evaluations: usize,
    pub target_loss: f64,
    /// Steps between test-loss evaluations of the current iterate.
    pub test_interval: usize,
    pub plateau: PlateauConfig,
}

impl AdamConfig {
    pub fn defaults_for(kind: ProblemKind) -> Self {
        let lr0 = match kind {
            ProblemKind::ConvDiff | ProblemKind::Projectile => 5e-2,
            _ => 1e-2,
        };
        let max_evaluations = if kind == ProblemKind::KdV { 300_000 } else { 200_000 };
        AdamConfig {
            lr0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            init_std: 5e-2,
            max_evaluations,
            target_loss: 1e-9,
            test_interval: 1000,
            plateau: PlateauConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("ADAM needs lr0 > 0 and betas in [0, 1)".into()));
        }
        if self.test_interval == 0 || self.plateau.patience == 0 {
            return Err(Error::Config("test interval and patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Halve the learning rate when a smoothed loss stops improving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    /// EMA coefficient of the smoothed loss.
    pub smoothing: f64,
    /// Required relative improvement over the best smoothed loss.
    pub min_rel_improvement: f64,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { smoothing: 0.99, min_rel_improvement: 1e-3, patience: 500, factor: 0.5, min_lr: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlateauState {
    pub lr: f64,
    pub ema: Option<f64>,
    pub best: f64,
    pub since_best: usize,
}

impl PlateauState {
    pub fn new(lr: f64) -> Self {
        PlateauState { lr, ema: None, best: f64::INFINITY, since_best: 0 }
    }
}

/// Feed one training loss; returns the learning rate for the next step.
pub fn plateau_schedule(cfg: &PlateauConfig, st: &mut PlateauState, loss: f64) -> f64 {
    if !loss.is_finite() {
        return st.lr;
    }
    let ema = match st.ema {
        None => loss,
        Some(e) => cfg.smoothing * e + (1.0 - cfg.smoothing) * loss,
    };
    st.ema = Some(ema);
    if ema < st.best * (1.0 - cfg.min_rel_improvement) {
        st.best = ema;
        st.since_best = 0;
    } else {
        st.since_best += 1;
        if st.since_best >= cfg.patience {
            st.lr = (st.lr * cfg.factor).max(cfg.min_lr);
            st.since_best = 0;
            st.best = ema;
        }
    }
    st.lr
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(d: usize) -> Self {
        AdamState { m: vec![0.0; d], v: vec![0.0; d], t: 0 }
    }
}

/// One bias-corrected ADAM update of `w` in place.
pub fn adam_step(cfg: &AdamConfig, st: &mut AdamState, w: &mut [f64], grad: &[f64], lr: f64) {
    st.t += 1;
    let b1t = 1.0 - cfg.beta1.powi(st.t as i32);
    let b2t = 1.0 - cfg.beta2.powi(st.t as i32);
    for i in 0..w.len() {
        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * grad[i];
        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = st.m[i] / b1t;
        let v_hat = st.v[i] / b2t;
        w[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Total PINN loss and its gradient with respect to the packed weights.
pub fn loss_grad(
    problem: &ProblemSpec,
    network: &NetworkSpec,
    w: &[f64],
    batch: &CollocationBatch,
) -> Result<(f64, Vec<f64>)> {
    let (l, g) = problems::loss_and_grad(problem, network, w, batch)?;
    Ok((l.total, g))
}

/// Rows are appended to the history every this many steps.
const HISTORY_STRIDE: usize = 20;

/// ADAM run. Each step draws a fresh batch and counts as one evaluation.
pub fn adam_run<O: GradientObjective>(obj: &O, cfg: &AdamConfig, seed: u64) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let root = SeedPath::new(seed);
    let d = obj.dim();
    let normal = Normal::new(0.0, cfg.init_std).map_err(|_| Error::Config("init_std must be positive".into()))?;
    let mut init_rng = root.child(keys::INIT).rng();
    let mut w: Vec<f64> = (0..d).map(|_| normal.sample(&mut init_rng)).collect();
    let mut st = AdamState::new(d);
    let mut sched = PlateauState::new(cfg.lr0);
    let mut progress = Progress::new(cfg.test_interval);
    let mut record = base_record(obj, "adam", seed);
    let mut steps = 0;
    let mut pending: Option<(Vec<f64>, f64)> = None;

    while steps < cfg.max_evaluations {
        let batch = obj.sample_batch(&mut root.child(keys::EVAL).child(steps as u64).rng());
        let (loss, grad) = match obj.loss_grad(&w, &batch) {
            Ok((l, g)) if l.is_finite() && g.iter().all(|x| x.is_finite()) => (l, g),
            _ => {
                record.failure = Some(Error::NonFiniteUpdate { generation: steps }.to_string());
                break;
            }
        };
        steps += 1;
        // Record the iterate the loss was measured at.
        let at_stride = steps % HISTORY_STRIDE == 0 || (steps - 1) % cfg.test_interval == 0;
        if at_stride || loss <= cfg.target_loss || steps == cfg.max_evaluations {
            progress.observe(obj, steps - 1, steps, &w, loss);
            pending = None;
        } else {
            progress.best_train = progress.best_train.min(loss);
            pending = Some((w.clone(), loss));
        }
        if loss <= cfg.target_loss {
            record.stopped_on_target = true;
            break;
        }
        let lr = plateau_schedule(&cfg.plateau, &mut sched, loss);
        adam_step(cfg, &mut st, &mut w, &grad, lr);
    }
    if let Some((pw, pl)) = pending {
        progress.observe(obj, steps - 1, steps, &pw, pl);
    }

    let (best, test) = progress.finish(obj);
    record.final_mse = obj.solution_error(&best);
    record.best_weights = best;
    record.final_test_loss = test;
    record.final_train_loss = progress.best_train;
    record.history = progress.history;
    record.evaluations = steps;
    record.generations = steps;
    record.wall_seconds = started.elapsed().as_secs_f64();
    Ok(record)
}
