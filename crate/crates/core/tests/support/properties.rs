//! Property checks shared by the `properties` and `acceptance` targets.
//!
//! Every check returns `Err(description)` on the first violation so the
//! acceptance target can report it without panicking.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tnes::harness::stats::{friedman_test, mann_whitney_u};
use tnes::jet::Jet;
use tnes::network::forward;
use tnes::objective::Objective;
use tnes::priors::{load_prior, save_to_library, PriorDocument};
use tnes::problems::{
    assemble, latin_hypercube, AnalyticModel, CollocationBatch, NetworkModel, Point, ProblemSpec,
};
use tnes::seeding::Rng;
use tnes::transfer::{project_offspring, update_mixing, ComponentDensities, MixtureState};
use tnes::xnes::{log_abs_det, utilities, xnes_run, xnes_step, EsConfig, MeanUpdate, SearchDistribution};

pub type Check = Result<(), String>;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() })
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Check
where
    S::Value: std::fmt::Debug,
{
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- jets

#[derive(Debug, Clone)]
pub enum Expr {
    X,
    Const(f64),
    Add(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Tanh(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    /// `exp(tanh(e))`, kept bounded.
    ExpTanh(Box<Expr>),
    Scale(f64, Box<Expr>),
}

impl Expr {
    fn eval(&self, x: f64) -> f64 {
        match self {
            Expr::X => x,
            Expr::Const(c) => *c,
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Tanh(a) => a.eval(x).tanh(),
            Expr::Sin(a) => a.eval(x).sin(),
            Expr::Cos(a) => a.eval(x).cos(),
            Expr::ExpTanh(a) => a.eval(x).tanh().exp(),
            Expr::Scale(s, a) => s * a.eval(x),
        }
    }

    fn jet(&self, x: Jet) -> Jet {
        match self {
            Expr::X => x,
            Expr::Const(c) => Jet::constant(*c),
            Expr::Add(a, b) => a.jet(x) + b.jet(x),
            Expr::Mul(a, b) => a.jet(x) * b.jet(x),
            Expr::Tanh(a) => a.jet(x).tanh(),
            Expr::Sin(a) => a.jet(x).sin(),
            Expr::Cos(a) => a.jet(x).cos(),
            Expr::ExpTanh(a) => a.jet(x).tanh().exp(),
            Expr::Scale(s, a) => a.jet(x) * *s,
        }
    }
}

fn expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![Just(Expr::X), (-1.5..1.5f64).prop_map(Expr::Const)];
    leaf.prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
            inner.clone().prop_map(|a| Expr::Tanh(Box::new(a))),
            inner.clone().prop_map(|a| Expr::Sin(Box::new(a))),
            inner.clone().prop_map(|a| Expr::Cos(Box::new(a))),
            inner.clone().prop_map(|a| Expr::ExpTanh(Box::new(a))),
            (-2.0..2.0f64, inner).prop_map(|(s, a)| Expr::Scale(s, Box::new(a))),
        ]
    })
}

fn close(a: f64, b: f64, tol: f64, scale: f64) -> bool {
    (a - b).abs() <= tol * scale.max(1.0)
}

/// Jets of 100 random compositions against central differences: `v1`
/// against the plain function, `v2` and `v3` against the next-lower jet
/// component.
pub fn jet_matches_finite_differences() -> Check {
    run(100, (expr(), -1.0..1.0f64), |(e, x)| {
        let h = 1e-5;
        let j = e.jet(Jet::seed(x));
        let jp = e.jet(Jet::seed(x + h));
        let jm = e.jet(Jet::seed(x - h));
        let fd1 = (e.eval(x + h) - e.eval(x - h)) / (2.0 * h);
        let fd2 = (jp.v1 - jm.v1) / (2.0 * h);
        let fd3 = (jp.v2 - jm.v2) / (2.0 * h);
        let scale = j.v0.abs().max(j.v1.abs()).max(j.v2.abs()).max(j.v3.abs());
        prop_assert!((j.v0 - e.eval(x)).abs() <= 1e-14 * scale.max(1.0), "value {e:?}");
        prop_assert!(close(j.v1, fd1, 1e-6, scale), "v1 {} vs {} for {e:?}", j.v1, fd1);
        prop_assert!(close(j.v2, fd2, 1e-6, scale), "v2 {} vs {} for {e:?}", j.v2, fd2);
        prop_assert!(close(j.v3, fd3, 1e-6, scale), "v3 {} vs {} for {e:?}", j.v3, fd3);
        Ok(())
    })
}

/// Full jet pipeline against finite differences of the plain forward pass:
/// the interior loss of a one-point batch for every problem family.
pub fn residuals_match_finite_differences() -> Check {
    let problems = ["convdiff", "projectile-earth", "linburgers", "burgers", "kdv"];
    for id in problems {
        let p = ProblemSpec::preset(id).map_err(|e| e.to_string())?;
        let net = p.default_network();
        let d = net.param_count();
        let ((x0, x1), (t0, t1)) = p.domain();
        let res = run(10, (prop::collection::vec(-0.8..0.8f64, d), 0.05..0.95f64, 0.05..0.95f64), |(w, fx, ft)| {
            let pt = Point { x: x0 + fx * (x1 - x0), t: t0 + ft * (t1 - t0) };
            let batch = CollocationBatch { interior: vec![pt], initial: vec![], boundary: vec![] };
            let mut model = NetworkModel::new(&net, &w, false);
            let jet_loss = assemble(&p, &mut model, &batch).map_err(|e| TestCaseError::fail(e.to_string()))?.l_de;
            let fd_loss = fd_interior_loss(&p, &w, pt);
            prop_assert!(
                (jet_loss - fd_loss).abs() <= 1e-4 * jet_loss.abs().max(1e-6),
                "{id}: jet {jet_loss} vs fd {fd_loss}"
            );
            Ok(())
        });
        res.map_err(|e| format!("{id}: {e}"))?;
    }
    Ok(())
}

/// Squared residual at `pt` with every derivative taken by central
/// differences of `network::forward`.
fn fd_interior_loss(p: &ProblemSpec, w: &[f64], pt: Point) -> f64 {
    let net = p.default_network();
    let f = |x: f64, t: f64| -> Vec<f64> {
        let inputs = match p.kind() {
            tnes::problems::ProblemKind::ConvDiff => vec![x],
            tnes::problems::ProblemKind::Projectile => vec![t],
            _ => vec![x, t],
        };
        forward(&net, w, &inputs).unwrap()
    };
    let h = 1e-3;
    let d1 = |g: &dyn Fn(f64) -> f64, a: f64| (g(a + h) - g(a - h)) / (2.0 * h);
    let d2 = |g: &dyn Fn(f64) -> f64, a: f64| (g(a + h) - 2.0 * g(a) + g(a - h)) / (h * h);
    let d3 = |g: &dyn Fn(f64) -> f64, a: f64| {
        (g(a + 2.0 * h) - 2.0 * g(a + h) + 2.0 * g(a - h) - g(a - 2.0 * h)) / (2.0 * h * h * h)
    };
    use tnes::problems::Equation::*;
    match &p.equation {
        ConvDiff(c) => {
            let g = |x: f64| f(x, 0.0)[0];
            let r = c.k * d2(&g, pt.x) - c.v * d1(&g, pt.x);
            r * r
        }
        Projectile(q) => {
            let gx = |t: f64| f(0.0, t)[0];
            let gy = |t: f64| f(0.0, t)[1];
            let (xt, yt) = (d1(&gx, pt.t), d1(&gy, pt.t));
            let c = q.drag_coefficient() * xt.hypot(yt);
            let r1 = d2(&gx, pt.t) + c * xt;
            let r2 = d2(&gy, pt.t) + c * yt + q.g;
            (r1 * r1 + r2 * r2) / 2.0
        }
        LinBurgers(_) | Burgers(_) | KdV(_) => {
            let gx = |x: f64| f(x, pt.t)[0];
            let gt = |t: f64| f(pt.x, t)[0];
            let u = gx(pt.x);
            let (ut, ux) = (d1(&gt, pt.t), d1(&gx, pt.x));
            let r = match &p.equation {
                LinBurgers(q) => ut + q.c * ux - q.nu * d2(&gx, pt.x),
                Burgers(q) => ut + u * ux - q.nu * d2(&gx, pt.x),
                KdV(q) => ut + u * ux - q.nu * d3(&gx, pt.x),
                _ => unreachable!(),
            };
            r * r
        }
    }
}

/// Closed-form solutions pushed through the residual machinery.
pub fn oracles_have_negligible_loss() -> Check {
    // Convection-diffusion, v = 2, k = 1, L = 5.
    let p = ProblemSpec::preset("convdiff").unwrap();
    let (v, k, l) = (2.0f64, 1.0f64, 5.0f64);
    let denom = 1.0 - (l * v / k).exp();
    let mut cd = AnalyticModel(|inp: &[Jet]| {
        let u = (Jet::constant(1.0) - (inp[0] * (v / k)).exp()) * (1.0 / denom);
        [u, Jet::ZERO]
    });
    let batch = tnes::problems::test_batch(&p);
    let lb = assemble(&p, &mut cd, &batch).map_err(|e| e.to_string())?;
    if !(lb.total <= 1e-8) {
        return Err(format!("convection-diffusion closed form: total {}", lb.total));
    }

    // Drag-free ballistic trajectory on the Moon preset.
    let p = ProblemSpec::preset("projectile").unwrap();
    let tnes::problems::Equation::Projectile(q) = &p.equation else { unreachable!() };
    let (vx, vy) = q.initial_velocity();
    let (x0, y0, g) = (q.x0, q.y0, q.g);
    let mut ball = AnalyticModel(|inp: &[Jet]| {
        let t = inp[0];
        [t * vx + x0, t * vy + t * t * (-0.5 * g) + y0]
    });
    let batch = tnes::problems::test_batch(&p);
    let lb = assemble(&p, &mut ball, &batch).map_err(|e| e.to_string())?;
    if !(lb.total <= 1e-8) {
        return Err(format!("ballistic closed form: total {}", lb.total));
    }

    // Manufactured linearised Burgers solution e^{-νt} sin(x - ct). It does
    // not satisfy the Gaussian initial condition, so only the residual term
    // is asserted.
    let p = ProblemSpec::preset("linburgers").unwrap();
    let tnes::problems::Equation::LinBurgers(q) = &p.equation else { unreachable!() };
    let (c, nu) = (q.c, q.nu);
    let mut wave = AnalyticModel(|inp: &[Jet]| {
        let (x, t) = (inp[0], inp[1]);
        [(t * (-nu)).exp() * (x + t * (-c)).sin(), Jet::ZERO]
    });
    let batch = tnes::problems::test_batch(&p);
    let lb = assemble(&p, &mut wave, &batch).map_err(|e| e.to_string())?;
    if !(lb.l_de <= 1e-8) {
        return Err(format!("manufactured Burgers wave: residual {}", lb.l_de));
    }
    Ok(())
}

// ---------------------------------------------------------------- sampling

pub fn lhs_is_stratified() -> Check {
    run(100, (1usize..300, 1usize..4, any::<u64>()), |(n, dims, seed)| {
        let ranges: Vec<(f64, f64)> = (0..dims).map(|d| (-1.0 + d as f64, 2.0 + 3.0 * d as f64)).collect();
        let pts = latin_hypercube(n, &ranges, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(pts.len(), n);
        for (d, &(lo, hi)) in ranges.iter().enumerate() {
            let mut seen = vec![false; n];
            for p in &pts {
                prop_assert!(p[d] >= lo && p[d] < hi);
                let s = (((p[d] - lo) / (hi - lo)) * n as f64).floor() as usize;
                let s = s.min(n - 1);
                prop_assert!(!seen[s], "stratum {} hit twice", s);
                seen[s] = true;
            }
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- transfer

fn random_distribution(d: usize, seed: u64) -> SearchDistribution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
    let mut a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.3..0.3));
    for i in 0..d {
        a[(i, i)] += rng.random_range(0.5..2.0);
    }
    SearchDistribution::new(mu, a).unwrap()
}

fn mahalanobis(sd: &SearchDistribution, w: &DVector<f64>) -> f64 {
    sd.factorize().unwrap().solve(&(w - &sd.mu)).unwrap().norm()
}

pub fn projection_geometry() -> Check {
    run(100, (1usize..8, any::<u64>(), -20.0..20.0f64, 0.1..5.0f64), |(d, seed, spread, r)| {
        let sd = random_distribution(d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let w = &sd.mu + DVector::from_fn(d, |_, _| spread * rng.random_range(-1.0..1.0));
        let p = project_offspring(&w, &sd, r).unwrap();
        let m0 = mahalanobis(&sd, &w);
        let m1 = mahalanobis(&sd, &p);
        prop_assert!(m1 <= r * (1.0 + 1e-12) + 1e-15, "outside radius: {} > {}", m1, r);
        if m0 <= r {
            prop_assert_eq!(&p, &w);
        } else {
            prop_assert!((m1 - r).abs() <= 1e-10 * r);
            // Same direction from the mean.
            let (dw, dp) = (&w - &sd.mu, &p - &sd.mu);
            let s = dp.dot(&dw) / dw.norm_squared();
            prop_assert!(s > 0.0 && s <= 1.0 + 1e-12);
            prop_assert!((dp - dw * s).norm() <= 1e-10 * (1.0 + (&p - &sd.mu).norm()));
        }
        let again = project_offspring(&p, &sd, r).unwrap();
        prop_assert!((&again - &p).norm() <= 1e-12 * (1.0 + p.norm()), "not idempotent");
        Ok(())
    })
}

pub fn mixture_stays_on_simplex() -> Check {
    let case = (1usize..5, 2usize..30, any::<u64>(), 0.0..0.5f64);
    run(200, case, |(k, lambda, seed, eta)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..=k).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let mut mix = MixtureState::with_sources(raw[1..].iter().map(|a| a / s).collect()).unwrap();
        let u = utilities(lambda);
        for _ in 0..50 {
            let offspring: Vec<(ComponentDensities, f64)> = u
                .0
                .iter()
                .map(|&uk| {
                    let target = rng.random_range(-60.0..0.0);
                    let sources = (0..k).map(|_| rng.random_range(-80.0..0.0)).collect();
                    (ComponentDensities { target, sources }, uk)
                })
                .collect();
            let next = update_mixing(&mix, &offspring, eta, 1e-3);
            prop_assert!((next.sum() - 1.0).abs() <= 1e-12, "sum {}", next.sum());
            prop_assert!(next.alpha_target >= 0.0);
            for s in 0..k {
                prop_assert!(next.alpha_sources[s] >= 0.0);
                if !mix.active[s] {
                    prop_assert!(!next.active[s] && next.alpha_sources[s] == 0.0, "source {} revived", s);
                }
                if next.active[s] {
                    prop_assert!(next.alpha_sources[s] >= 1e-3);
                } else {
                    prop_assert_eq!(next.alpha_sources[s], 0.0);
                }
            }
            mix = next;
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- xNES

/// A quadratic bowl seen through a strictly increasing transform.
struct Warped {
    center: Vec<f64>,
    warp: fn(f64) -> f64,
}

impl Objective for Warped {
    type Batch = ();
    fn dim(&self) -> usize {
        self.center.len()
    }
    fn label(&self) -> String {
        "warped".into()
    }
    fn sample_batch(&self, _rng: &mut Rng) {}
    fn loss(&self, w: &[f64], _b: &()) -> tnes::Result<f64> {
        let q: f64 = w.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((self.warp)(q))
    }
    fn test_loss(&self, w: &[f64]) -> tnes::Result<f64> {
        self.loss(w, &())
    }
}

/// Only ranks drive the update: monotone transforms of the loss leave the
/// trajectory unchanged bit for bit.
pub fn xnes_rank_invariance() -> Check {
    let cfg = EsConfig {
        population: 12,
        eta_mu: 1.0,
        eta_a: 0.1,
        mu0: 0.0,
        sigma0: 0.3,
        max_evaluations: 12 * 60,
        target_loss: f64::NEG_INFINITY,
        test_interval: 10,
        batch_mode: Default::default(),
        mean_update: MeanUpdate::Natural,
    };
    let center = vec![0.7, -0.4, 1.3, 0.2];
    let warps: [fn(f64) -> f64; 3] = [|q| q, |q| 3.0 * q + 7.0, |q| (1.0 + q).ln().powi(3)];
    let base = xnes_run(&Warped { center: center.clone(), warp: warps[0] }, &cfg, 5).map_err(|e| e.to_string())?;
    for warp in &warps[1..] {
        let other = xnes_run(&Warped { center: center.clone(), warp: *warp }, &cfg, 5).map_err(|e| e.to_string())?;
        if other.final_distribution != base.final_distribution {
            return Err("final distribution depends on the loss scale".into());
        }
    }
    Ok(())
}

/// `log|det A|` tracked through 1000 updates against a fresh LU.
pub fn xnes_log_det_consistency() -> Check {
    let d = 6;
    let lambda = 10;
    let u = utilities(lambda);
    let mut sd = random_distribution(d, 99);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let zs: Vec<DVector<f64>> = (0..lambda).map(|_| tnes::xnes::standard_normal(d, &mut rng)).collect();
        let refs: Vec<&DVector<f64>> = zs.iter().collect();
        sd = xnes_step(&sd, &refs, &u, 1.0, 0.05, MeanUpdate::Natural).map_err(|e| e.to_string())?;
    }
    let fresh = log_abs_det(&sd.a).map_err(|e| e.to_string())?;
    if (fresh - sd.log_det_a).abs() > 1e-8 {
        return Err(format!("tracked {} vs recomputed {}", sd.log_det_a, fresh));
    }
    Ok(())
}

// ---------------------------------------------------------------- ADAM

/// Analytic loss gradient against central differences on every problem
/// family, `h = 1e-5·max(1, |w_i|)`.
pub fn gradient_matches_finite_differences() -> Check {
    for id in ["convdiff", "projectile-earth", "linburgers", "burgers", "kdv"] {
        let mut p = ProblemSpec::preset(id).unwrap();
        p.m_interior = 16;
        p.m_ic_bc = 4;
        let net = p.default_network();
        let d = net.param_count();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..3 {
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(-0.6..0.6)).collect();
            let batch = tnes::problems::sample_batch(&p, &mut rng);
            let (_, g) = tnes::adam::loss_grad(&p, &net, &w, &batch).map_err(|e| e.to_string())?;
            let f = |w: &[f64]| tnes::problems::loss(&p, &net, w, &batch).unwrap().total;
            let mut fd = vec![0.0; d];
            let mut wp = w.clone();
            for i in 0..d {
                let h = 1e-5 * w[i].abs().max(1.0);
                wp[i] = w[i] + h;
                let lp = f(&wp);
                wp[i] = w[i] - h;
                let lm = f(&wp);
                wp[i] = w[i];
                fd[i] = (lp - lm) / (2.0 * h);
            }
            // Per-coordinate relative error; the absolute floor only matters
            // for coordinates whose derivative is itself at rounding level.
            for i in 0..d {
                let rel = (g[i] - fd[i]).abs() / fd[i].abs().max(1e-7);
                if rel >= 1e-4 {
                    return Err(format!(
                        "{id} trial {trial}: coordinate {i}: analytic {:.6e} vs finite difference {:.6e}",
                        g[i], fd[i]
                    ));
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- priors

pub fn prior_round_trip_is_exact(dir: &Path) -> Check {
    let p = ProblemSpec::preset("convdiff").unwrap();
    let net = p.default_network();
    let d = net.param_count();
    let finite = any::<f64>().prop_filter("finite", |v| v.is_finite());
    let nonzero = (1e-100..1e100f64, any::<bool>()).prop_map(|(v, neg)| if neg { -v } else { v });
    let case = (
        prop::collection::vec(finite.clone(), d),
        prop::collection::vec(nonzero, d),
        prop::collection::vec(-1e-3..1e-3f64, d),
        any::<u64>(),
    );
    run(40, case, |(mu, diag, upper, seed)| {
        // Upper-triangular transform with a non-zero diagonal is invertible.
        let mut a = DMatrix::zeros(d, d);
        for i in 0..d {
            a[(i, i)] = diag[i];
            if i + 1 < d {
                a[(i, i + 1)] = upper[i];
            }
        }
        let sd = SearchDistribution::new(DVector::from_vec(mu), a).unwrap();
        let doc = PriorDocument::from_distribution(&p, &net, &sd, seed, f64::MIN_POSITIVE, 1.0 / 3.0);
        let path = save_to_library(&doc, dir).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let back = load_prior(&path).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for (x, y) in back.mu.iter().chain(&back.a_mat).zip(doc.mu.iter().chain(&doc.a_mat)) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
        prop_assert_eq!(back.final_train_loss.to_bits(), doc.final_train_loss.to_bits());
        Ok(())
    })
}

// ---------------------------------------------------------------- statistics

/// `U` by direct pair counting.
fn u_pairs(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            u += if x > y {
                1.0
            } else if x == y {
                0.5
            } else {
                0.0
            };
        }
    }
    u
}

/// Exact one-sided p-values by enumerating every labelling of the pooled
/// sample as a bit mask.
fn brute_force_mwu(a: &[f64], b: &[f64]) -> (f64, f64) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = a.len();
    let u_obs = u_pairs(a, b);
    let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << pooled.len()) {
        if mask.count_ones() as usize != n {
            continue;
        }
        let (xa, xb): (Vec<f64>, Vec<f64>) = {
            let mut xa = Vec::new();
            let mut xb = Vec::new();
            for (i, v) in pooled.iter().enumerate() {
                if mask >> i & 1 == 1 { xa.push(*v) } else { xb.push(*v) }
            }
            (xa, xb)
        };
        let u = u_pairs(&xa, &xb);
        total += 1;
        le += (u <= u_obs + 1e-9) as u64;
        ge += (u >= u_obs - 1e-9) as u64;
    }
    (le as f64 / total as f64, ge as f64 / total as f64)
}

/// Friedman statistic from the general tie-aware formula
/// `(k−1)·Σ(R_j − n(k+1)/2)² / (Σ r_ij² − nk(k+1)²/4)`, ranks by counting.
fn brute_force_friedman(m: &[Vec<f64>]) -> f64 {
    let n = m.len() as f64;
    let k = m[0].len();
    let kf = k as f64;
    let mut r_sum = vec![0.0; k];
    let mut r2 = 0.0;
    for row in m {
        for j in 0..k {
            let less = row.iter().filter(|v| **v < row[j]).count() as f64;
            let eq = row.iter().filter(|v| **v == row[j]).count() as f64;
            let r = less + (eq + 1.0) / 2.0;
            r_sum[j] += r;
            r2 += r * r;
        }
    }
    let num: f64 = r_sum.iter().map(|r| (r - n * (kf + 1.0) / 2.0).powi(2)).sum::<f64>() * (kf - 1.0);
    let den = r2 - n * kf * (kf + 1.0).powi(2) / 4.0;
    if den.abs() < 1e-12 { 0.0 } else { num / den }
}

pub fn rank_tests_match_enumeration() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for n in 1..=8 {
        for m in 1..=8 {
            for rep in 0..3 {
                // rep 0: continuous values; reps 1–2: heavy ties.
                let draw = |rng: &mut ChaCha8Rng| {
                    if rep == 0 { rng.random_range(0.0..1.0) } else { f64::from(rng.random_range(0..3u8)) }
                };
                let a: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
                let b: Vec<f64> = (0..m).map(|_| draw(&mut rng)).collect();
                let got = mann_whitney_u(&a, &b);
                let (le, ge) = brute_force_mwu(&a, &b);
                let want_u = u_pairs(&a, &b);
                if (got.u - want_u).abs() > 1e-12
                    || (got.p_less - le).abs() > 1e-12
                    || (got.p_greater - ge).abs() > 1e-12
                    || (got.p_two_sided - (2.0 * le.min(ge)).min(1.0)).abs() > 1e-12
                {
                    return Err(format!("Mann-Whitney mismatch for {a:?} vs {b:?}: {got:?}, want ({want_u}, {le}, {ge})"));
                }
            }
        }
    }
    for blocks in 2..=8 {
        for k in 2..=4 {
            for rep in 0..3 {
                let m: Vec<Vec<f64>> = (0..blocks)
                    .map(|_| {
                        (0..k)
                            .map(|_| if rep == 0 { rng.random_range(0.0..1.0) } else { f64::from(rng.random_range(0..3u8)) })
                            .collect()
                    })
                    .collect();
                let got = friedman_test(&m);
                let want = brute_force_friedman(&m);
                if (got.statistic - want).abs() > 1e-9 * want.max(1.0) {
                    return Err(format!("Friedman statistic {} vs {} for {m:?}", got.statistic, want));
                }
                if k == 2 && rep == 0 {
                    // No ties: the statistic is (wins − losses)² / n.
                    let wins = m.iter().filter(|r| r[0] < r[1]).count() as f64;
                    let sign = (2.0 * wins - blocks as f64).powi(2) / blocks as f64;
                    if (got.statistic - sign).abs() > 1e-9 {
                        return Err(format!("two-algorithm Friedman {} vs sign statistic {}", got.statistic, sign));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Every check with a name, in reporting order.
pub fn all(dir: &Path) -> Vec<(&'static str, Check)> {
    vec![
        ("jet vs finite differences (100 compositions)", jet_matches_finite_differences()),
        ("five residual variants vs finite differences", residuals_match_finite_differences()),
        ("residual on closed-form oracles <= 1e-8", oracles_have_negligible_loss()),
        ("LHS stratification", lhs_is_stratified()),
        ("projection geometry and idempotence", projection_geometry()),
        ("mixture simplex and absorbing deactivation", mixture_stays_on_simplex()),
        ("xNES rank invariance", xnes_rank_invariance()),
        ("xNES log-det consistency", xnes_log_det_consistency()),
        ("ADAM gradient vs finite differences < 1e-4", gradient_matches_finite_differences()),
        ("prior round-trip exactness", prior_round_trip_is_exact(dir)),
        ("rank tests vs exact enumeration", rank_tests_match_enumeration()),
    ]
}
