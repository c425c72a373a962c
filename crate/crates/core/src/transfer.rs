//! Transfer NES: xNES whose offspring are drawn, on transfer generations,
//! from a mixture of the evolving target distribution and frozen source
//! priors.
//!
//! Source-drawn offspring keep the fitness of the point where they were
//! sampled, but enter the xNES update through natural coordinates of a copy
//! pulled to within Mahalanobis distance `r` of the target mean. Mixing
//! coefficients follow gradient ascent on the mixture's expected utility and a
//! source whose coefficient collapses is switched off for good.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::record::{MixingRow, RunRecord, StoredDistribution};
use crate::objective::Objective;
use crate::priors::PriorDocument;
use crate::seeding::{keys, Rng, SeedPath};
use crate::xnes::{
    base_record, evaluate_population, rank_order, standard_normal, utilities, xnes_step, EsConfig, Factorized,
    Progress, SearchDistribution, UtilityWeights,
};

/// A frozen source distribution.
#[derive(Debug, Clone)]
pub struct SourcePrior {
    pub dist: SearchDistribution,
    pub label: String,
    factor: Factorized,
}

impl SourcePrior {
    pub fn new(dist: SearchDistribution, label: impl Into<String>) -> Result<Self> {
        let factor = dist.factorize()?;
        Ok(SourcePrior { dist, label: label.into(), factor })
    }

    pub fn from_document(doc: &PriorDocument) -> Result<Self> {
        let label = format!("{}#seed{}", doc.problem_label, doc.seed);
        Self::new(doc.distribution()?, label)
    }

    pub fn dim(&self) -> usize {
        self.dist.dim()
    }

    pub fn log_density(&self, w: &DVector<f64>) -> Result<f64> {
        let y = self.factor.solve(&(w - &self.dist.mu))?;
        Ok(gaussian_log_density(self.dim(), self.dist.log_det_a, y.norm_squared()))
    }
}

/// `−d/2·ln(2π) − log|det A| − ½‖y‖²` where `y = A⁻¹(w − μ)`.
#[inline]
pub fn gaussian_log_density(d: usize, log_det_a: f64, y_norm2: f64) -> f64 {
    -0.5 * d as f64 * (2.0 * PI).ln() - log_det_a - 0.5 * y_norm2
}

/// Log density of `N(μ, AAᵀ)` at `w`.
pub fn log_density(sd: &SearchDistribution, w: &DVector<f64>) -> Result<f64> {
    let y = sd.factorize()?.solve(&(w - &sd.mu))?;
    Ok(gaussian_log_density(sd.dim(), sd.log_det_a, y.norm_squared()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureState {
    pub alpha_target: f64,
    pub alpha_sources: Vec<f64>,
    pub active: Vec<bool>,
}

impl MixtureState {
    /// Equal weight on the target and every source.
    pub fn equal(k: usize) -> Self {
        let a = 1.0 / (k as f64 + 1.0);
        MixtureState { alpha_target: a, alpha_sources: vec![a; k], active: vec![true; k] }
    }

    /// Given source coefficients; the target takes the remainder.
    pub fn with_sources(alpha_sources: Vec<f64>) -> Result<Self> {
        let s: f64 = alpha_sources.iter().sum();
        if alpha_sources.iter().any(|a| !(0.0..=1.0).contains(a)) || s > 1.0 + 1e-12 {
            return Err(Error::Config("source coefficients must lie in [0, 1] and sum to at most 1".into()));
        }
        let active = alpha_sources.iter().map(|&a| a > 0.0).collect();
        Ok(MixtureState { alpha_target: (1.0 - s).max(0.0), alpha_sources, active })
    }

    pub fn any_active(&self) -> bool {
        self.active.iter().any(|&a| a)
    }

    pub fn sum(&self) -> f64 {
        self.alpha_target + self.alpha_sources.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    /// Transfer fires on generations `0, Δt, 2Δt, …`.
    pub delta_t: usize,
    /// Last generation (inclusive) on which transfer may fire.
    pub t_max: usize,
    /// Mahalanobis projection radius.
    pub r: f64,
    pub eta_alpha: f64,
    /// Initial source coefficients; `None` means equal weights for the target
    /// and every source.
    #[serde(default)]
    pub alpha0: Option<Vec<f64>>,
    /// Coefficients below this are zeroed and their source retired.
    pub deactivate_below: f64,
}

impl TransferPlan {
    /// Default plan: `{Δt, t_max} = {2, 500}` (KdV: `{2, 1000}`), `r = √12`,
    /// `η_α` equal to `η_A`.
    pub fn defaults_for(kind: crate::problems::ProblemKind) -> Self {
        use crate::problems::ProblemKind::*;
        let (t_max, eta_alpha) = match kind {
            ConvDiff | Projectile => (500, 5e-2),
            LinBurgers | Burgers => (500, 1e-2),
            KdV => (1000, 1e-2),
        };
        TransferPlan {
            delta_t: 2,
            t_max,
            r: 12f64.sqrt(),
            eta_alpha,
            alpha0: None,
            deactivate_below: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta_t == 0 || !(self.r > 0.0) || !(self.eta_alpha >= 0.0) {
            return Err(Error::Config("transfer plan needs delta_t >= 1, r > 0 and eta_alpha >= 0".into()));
        }
        Ok(())
    }

    pub fn fires_at(&self, generation: usize) -> bool {
        generation % self.delta_t == 0 && generation <= self.t_max
    }

    pub fn initial_mixture(&self, k: usize) -> Result<MixtureState> {
        match &self.alpha0 {
            None => Ok(MixtureState::equal(k)),
            Some(a) if a.len() == k => MixtureState::with_sources(a.clone()),
            Some(a) => Err(Error::DimensionMismatch { what: "initial source coefficients", expected: k, got: a.len() }),
        }
    }
}

/// Which component produced an offspring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Target,
    Source(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureOffspring {
    pub origin: Origin,
    pub z: DVector<f64>,
    pub w: DVector<f64>,
}

/// Draw `λ` offspring. Outside transfer mode this consumes the stream exactly
/// like [`crate::xnes::sample_offspring`].
pub fn mixture_sample(
    sd: &SearchDistribution,
    sources: &[SourcePrior],
    mix: &MixtureState,
    lambda: usize,
    transfer_active: bool,
    rng: &mut Rng,
) -> Vec<MixtureOffspring> {
    (0..lambda)
        .map(|_| {
            let z = standard_normal(sd.dim(), rng);
            let origin = if transfer_active { pick_component(mix, rng) } else { Origin::Target };
            let w = match origin {
                Origin::Target => sd.transform(&z),
                Origin::Source(s) => sources[s].dist.transform(&z),
            };
            MixtureOffspring { origin, z, w }
        })
        .collect()
}

fn pick_component(mix: &MixtureState, rng: &mut Rng) -> Origin {
    let u: f64 = rng.random::<f64>() * mix.sum();
    let mut acc = mix.alpha_target;
    if u < acc {
        return Origin::Target;
    }
    let mut last = None;
    for (s, (&a, &on)) in mix.alpha_sources.iter().zip(&mix.active).enumerate() {
        if !on || a <= 0.0 {
            continue;
        }
        acc += a;
        last = Some(s);
        if u < acc {
            return Origin::Source(s);
        }
    }
    // Rounding at the top of the interval.
    last.map_or(Origin::Target, Origin::Source)
}

/// Result of pulling a point towards the target mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub w: DVector<f64>,
    /// Natural coordinates of the projected point, `A⁻¹(w̃ − μ)`.
    pub z: DVector<f64>,
    /// Mahalanobis distance of the original point.
    pub distance: f64,
}

/// `w̃ = μ + d·min(1, r/‖A⁻¹d‖)` with `d = w − μ`.
pub fn project_with(sd: &SearchDistribution, factor: &Factorized, w: &DVector<f64>, r: f64) -> Result<Projection> {
    let d = w - &sd.mu;
    let y = factor.solve(&d)?;
    let dist = y.norm();
    if !dist.is_finite() {
        return Err(Error::NonFinite("Mahalanobis distance"));
    }
    if dist <= r {
        return Ok(Projection { w: w.clone(), z: y, distance: dist });
    }
    let s = r / dist;
    Ok(Projection { w: &sd.mu + d * s, z: y * s, distance: dist })
}

pub fn project_offspring(w: &DVector<f64>, sd: &SearchDistribution, r: f64) -> Result<DVector<f64>> {
    Ok(project_with(sd, &sd.factorize()?, w, r)?.w)
}

/// Log densities of one offspring under the target and every source
/// (`-∞` for retired sources).
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentDensities {
    pub target: f64,
    pub sources: Vec<f64>,
}

/// One gradient-ascent step on the mixing coefficients.
///
/// `offspring` pairs each offspring's component log densities with its
/// utility. Per component `c` the gradient is `Σₖ uₖ·p_c(wₖ)/m(wₖ)`, computed
/// in log space.
pub fn update_mixing(
    mix: &MixtureState,
    offspring: &[(ComponentDensities, f64)],
    eta_alpha: f64,
    deactivate_below: f64,
) -> MixtureState {
    let k = mix.alpha_sources.len();
    let mut g_target = 0.0;
    let mut g_src = vec![0.0; k];
    for (dens, u) in offspring {
        if *u == 0.0 {
            continue;
        }
        // log m(w) = logsumexp_c (log α_c + log p_c(w)) over live components.
        let mut terms = Vec::with_capacity(k + 1);
        if mix.alpha_target > 0.0 {
            terms.push(mix.alpha_target.ln() + dens.target);
        }
        for s in 0..k {
            if mix.active[s] && mix.alpha_sources[s] > 0.0 {
                terms.push(mix.alpha_sources[s].ln() + dens.sources[s]);
            }
        }
        let log_m = log_sum_exp(&terms);
        if !log_m.is_finite() {
            continue;
        }
        if mix.alpha_target > 0.0 {
            g_target += u * (dens.target - log_m).exp();
        }
        for s in 0..k {
            if mix.active[s] {
                g_src[s] += u * (dens.sources[s] - log_m).exp();
            }
        }
    }

    let mut alpha_target = (mix.alpha_target + eta_alpha * g_target).max(0.0);
    let mut alpha_sources: Vec<f64> = (0..k)
        .map(|s| if mix.active[s] { (mix.alpha_sources[s] + eta_alpha * g_src[s]).max(0.0) } else { 0.0 })
        .collect();
    let mut active = mix.active.clone();
    let total = alpha_target + alpha_sources.iter().sum::<f64>();
    if !(total > 0.0) || !total.is_finite() {
        return MixtureState { alpha_target: 1.0, alpha_sources: vec![0.0; k], active: vec![false; k] };
    }
    alpha_target /= total;
    alpha_sources.iter_mut().for_each(|a| *a /= total);

    let mut retired = false;
    for s in 0..k {
        if active[s] && alpha_sources[s] < deactivate_below {
            alpha_sources[s] = 0.0;
            active[s] = false;
            retired = true;
        }
    }
    if retired {
        let total = alpha_target + alpha_sources.iter().sum::<f64>();
        if total > 0.0 {
            alpha_target /= total;
            alpha_sources.iter_mut().for_each(|a| *a /= total);
        } else {
            alpha_target = 1.0;
        }
    }
    MixtureState { alpha_target, alpha_sources, active }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Observer for the tNES loop, called once per generation with the
/// offspring, the points their fitness was evaluated at, and their losses.
pub trait GenerationHook {
    fn generation(&mut self, _generation: usize, _offspring: &[MixtureOffspring], _evaluated: &[DVector<f64>], _losses: &[f64]) {}
}

impl GenerationHook for () {}

/// Transfer NES run.
pub fn tnes_run<O: Objective>(
    obj: &O,
    cfg: &EsConfig,
    plan: &TransferPlan,
    sources: &[SourcePrior],
    seed: u64,
) -> Result<RunRecord> {
    tnes_run_with_hook(obj, cfg, plan, sources, seed, &mut ())
}

pub fn tnes_run_with_hook<O: Objective, H: GenerationHook>(
    obj: &O,
    cfg: &EsConfig,
    plan: &TransferPlan,
    sources: &[SourcePrior],
    seed: u64,
    hook: &mut H,
) -> Result<RunRecord> {
    cfg.validate()?;
    plan.validate()?;
    let d = obj.dim();
    for s in sources {
        if s.dim() != d {
            return Err(Error::DimensionMismatch { what: "source prior", expected: d, got: s.dim() });
        }
    }
    let started = Instant::now();
    let root = SeedPath::new(seed);
    let lambda = cfg.population;
    let u: UtilityWeights = utilities(lambda);
    let mut sd = SearchDistribution::isotropic(d, cfg.mu0, cfg.sigma0)?;
    let mut mix = plan.initial_mixture(sources.len())?;
    let mut progress = Progress::new(cfg.test_interval);
    let mut record = base_record(obj, "tnes", seed);
    record.source_labels = sources.iter().map(|s| s.label.clone()).collect();
    record.mixing.push(MixingRow {
        generation: 0,
        alpha_target: mix.alpha_target,
        alpha_sources: mix.alpha_sources.clone(),
    });
    let mut evaluations = 0;
    let mut generation = 0;

    while evaluations < cfg.max_evaluations {
        let transfer = plan.fires_at(generation) && mix.any_active();
        let mut rng = root.child(keys::SAMPLE).child(generation as u64).rng();
        let mut offspring = mixture_sample(&sd, sources, &mix, lambda, transfer, &mut rng);
        // Fitness is always taken at the sampled point.
        let evaluated: Vec<DVector<f64>> = offspring.iter().map(|o| o.w.clone()).collect();
        let losses =
            evaluate_population(obj, &evaluated, root.child(keys::EVAL).child(generation as u64), cfg.batch_mode);
        evaluations += lambda;

        let mut densities = Vec::new();
        if transfer {
            let factor = sd.factorize()?;
            for o in offspring.iter_mut() {
                let (z_nat, y2_target) = match o.origin {
                    Origin::Target => (None, o.z.norm_squared()),
                    Origin::Source(_) => {
                        let p = project_with(&sd, &factor, &o.w, plan.r)?;
                        (Some(p.z), p.distance * p.distance)
                    }
                };
                let target = gaussian_log_density(d, sd.log_det_a, y2_target);
                let mut src = Vec::with_capacity(sources.len());
                for (s, prior) in sources.iter().enumerate() {
                    src.push(if mix.active[s] {
                        match o.origin {
                            Origin::Source(k) if k == s => {
                                gaussian_log_density(d, prior.dist.log_det_a, o.z.norm_squared())
                            }
                            _ => prior.log_density(&o.w)?,
                        }
                    } else {
                        f64::NEG_INFINITY
                    });
                }
                densities.push(ComponentDensities { target, sources: src });
                if let Some(z) = z_nat {
                    o.z = z;
                }
            }
        }
        hook.generation(generation, &offspring, &evaluated, &losses);

        let order = rank_order(&losses);
        progress.observe(obj, generation, evaluations, evaluated[order[0]].as_slice(), losses[order[0]]);
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
        if transfer {
            let weighted: Vec<(ComponentDensities, f64)> = order
                .iter()
                .zip(u.as_slice())
                .map(|(&k, &uk)| (densities[k].clone(), uk))
                .collect();
            mix = update_mixing(&mix, &weighted, plan.eta_alpha, plan.deactivate_below);
            record.mixing.push(MixingRow {
                generation: generation + 1,
                alpha_target: mix.alpha_target,
                alpha_sources: mix.alpha_sources.clone(),
            });
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
