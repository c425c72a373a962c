//! Differential-equation problem definitions: residuals, collocation sampling,
//! loss assembly and ground-truth oracles.
//!
//! Five equations are supported. Each problem maps collocation points to
//! network inputs, seeds one input at a time and assembles
//! `L = L_DE + β_IC·L_IC + β_BC·L_BC` from mean squared residuals.

use std::f64::consts::PI;

use rand::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::Jet;
use crate::network::{JetTape, NetworkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    ConvDiff,
    Projectile,
    LinBurgers,
    Burgers,
    KdV,
}

impl ProblemKind {
    pub fn id(self) -> &'static str {
        match self {
            ProblemKind::ConvDiff => "convdiff",
            ProblemKind::Projectile => "projectile",
            ProblemKind::LinBurgers => "linburgers",
            ProblemKind::Burgers => "burgers",
            ProblemKind::KdV => "kdv",
        }
    }
}

/// Steady 1D convection-diffusion, `v·u_x = k·u_xx` on `[0, L]` with
/// `u(0) = 0`, `u(L) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvDiff {
    pub v: f64,
    pub k: f64,
    pub length: f64,
}

/// Quadratic air drag on a sphere: `R = C·|velocity|`, `C = ½ρ·C_d·πr²/m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Drag {
    pub rho: f64,
    pub cd: f64,
    pub r_ball: f64,
    pub m_ball: f64,
}

impl Drag {
    /// A basketball in air of density `rho`.
    pub fn basketball(rho: f64) -> Self {
        Drag { rho, cd: 0.54, r_ball: 0.12, m_ball: 0.6 }
    }

    pub fn coefficient(&self) -> f64 {
        0.5 * self.rho * self.cd * PI * self.r_ball * self.r_ball / self.m_ball
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projectile {
    pub g: f64,
    pub drag: Option<Drag>,
    /// Launch angle, degrees.
    pub a0: f64,
    pub vel0: f64,
    pub x0: f64,
    pub y0: f64,
    pub t_end: f64,
}

impl Projectile {
    pub fn drag_coefficient(&self) -> f64 {
        self.drag.as_ref().map_or(0.0, Drag::coefficient)
    }

    pub fn initial_velocity(&self) -> (f64, f64) {
        let a = self.a0 * PI / 180.0;
        (self.vel0 * a.cos(), self.vel0 * a.sin())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinBurgers {
    pub c: f64,
    pub nu: f64,
    pub x_range: (f64, f64),
    pub t_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Burgers {
    pub nu: f64,
    pub x_range: (f64, f64),
    pub t_range: (f64, f64),
}

/// `u_t + u·u_x = ν·u_xxx` with a two-soliton initial profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdV {
    pub nu: f64,
    pub c1: f64,
    pub c2: f64,
    pub x1: f64,
    pub x2: f64,
    pub x_range: (f64, f64),
    pub t_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Equation {
    ConvDiff(ConvDiff),
    Projectile(Projectile),
    LinBurgers(LinBurgers),
    Burgers(Burgers),
    KdV(KdV),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub equation: Equation,
    pub m_interior: usize,
    pub m_ic_bc: usize,
    pub beta_ic: f64,
    pub beta_bc: f64,
}

/// A collocation coordinate. One-input problems use only `x` (ConvDiff) or
/// only `t` (Projectile).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CollocationBatch {
    pub interior: Vec<Point>,
    pub initial: Vec<Point>,
    pub boundary: Vec<Point>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_de: f64,
    pub l_ic: f64,
    pub l_bc: f64,
    pub total: f64,
}

/// Derivatives a residual consumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DerivativeRecord {
    /// Scalar field `u(x, t)`; unused orders may be left at zero.
    Field { u: f64, u_t: f64, u_x: f64, u_xx: f64, u_xxx: f64 },
    /// Planar trajectory `(x(t), y(t))`.
    Trajectory { x_t: f64, x_tt: f64, y_t: f64, y_tt: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Residual {
    Scalar(f64),
    Pair(f64, f64),
}

impl ProblemSpec {
    /// Preset for a problem id. Accepts `convdiff`, `projectile`
    /// (Moon, a0 = 45), `projectile-mars`, `projectile-earth`, `linburgers`,
    /// `burgers` and `kdv`.
    pub fn preset(id: &str) -> Result<Self> {
        let spec = match id {
            "convdiff" => ProblemSpec {
                equation: Equation::ConvDiff(ConvDiff { v: 2.0, k: 1.0, length: 5.0 }),
                m_interior: 1000,
                m_ic_bc: 2,
                beta_ic: 1.0,
                beta_bc: 1.0,
            },
            "projectile" | "projectile-moon" => Self::projectile(1.6, None, 45.0, 10.0),
            "projectile-mars" => Self::projectile(3.7, None, 45.0, 4.5),
            "projectile-earth" => Self::projectile(9.8, Some(Drag::basketball(1.2)), 45.0, 2.0),
            "linburgers" => ProblemSpec {
                equation: Equation::LinBurgers(LinBurgers {
                    c: 1.0,
                    nu: 0.01,
                    x_range: (-1.5, 6.5),
                    t_range: (0.0, 5.0),
                }),
                m_interior: 5000,
                m_ic_bc: 50,
                beta_ic: 1.0,
                beta_bc: 1.0,
            },
            "burgers" => ProblemSpec {
                equation: Equation::Burgers(Burgers {
                    nu: 0.01,
                    x_range: (-1.5, 2.0),
                    t_range: (0.0, 2.0),
                }),
                m_interior: 5000,
                m_ic_bc: 50,
                beta_ic: 1.0,
                beta_bc: 1.0,
            },
            "kdv" => ProblemSpec {
                equation: Equation::KdV(KdV {
                    nu: 0.001,
                    c1: 0.3,
                    c2: 0.1,
                    x1: 0.4,
                    x2: 0.8,
                    x_range: (0.0, 1.5),
                    t_range: (0.0, 2.0),
                }),
                m_interior: 10000,
                m_ic_bc: 100,
                beta_ic: 1.0,
                beta_bc: 1.0,
            },
            other => return Err(Error::UnknownProblem(other.to_string())),
        };
        Ok(spec)
    }

    pub fn projectile(g: f64, drag: Option<Drag>, a0: f64, t_end: f64) -> Self {
        ProblemSpec {
            equation: Equation::Projectile(Projectile {
                g,
                drag,
                a0,
                vel0: 8.0,
                x0: 0.0,
                y0: 2.0,
                t_end,
            }),
            m_interior: 1000,
            m_ic_bc: 1,
            beta_ic: 1.0,
            beta_bc: 1.0,
        }
    }

    pub fn conv_diff(v: f64) -> Self {
        let mut p = Self::preset("convdiff").expect("preset");
        p.set_const("v", v).expect("v is a constant");
        p
    }

    pub fn kind(&self) -> ProblemKind {
        match &self.equation {
            Equation::ConvDiff(_) => ProblemKind::ConvDiff,
            Equation::Projectile(_) => ProblemKind::Projectile,
            Equation::LinBurgers(_) => ProblemKind::LinBurgers,
            Equation::Burgers(_) => ProblemKind::Burgers,
            Equation::KdV(_) => ProblemKind::KdV,
        }
    }

    pub fn id(&self) -> &'static str {
        self.kind().id()
    }

    /// Matching network architecture preset.
    pub fn default_network(&self) -> NetworkSpec {
        match self.kind() {
            ProblemKind::ConvDiff => NetworkSpec::conv_diff(),
            ProblemKind::Projectile => NetworkSpec::projectile(),
            ProblemKind::LinBurgers | ProblemKind::Burgers => NetworkSpec::burgers(),
            ProblemKind::KdV => NetworkSpec::kdv(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.kind() {
            ProblemKind::ConvDiff | ProblemKind::Projectile => 1,
            _ => 2,
        }
    }

    pub fn output_dim(&self) -> usize {
        if self.kind() == ProblemKind::Projectile {
            2
        } else {
            1
        }
    }

    /// Named constants and their current values, in a stable order.
    pub fn constants(&self) -> Vec<(&'static str, f64)> {
        let mut c = match &self.equation {
            Equation::ConvDiff(p) => vec![("v", p.v), ("k", p.k), ("L", p.length)],
            Equation::Projectile(p) => {
                let mut c = vec![
                    ("g", p.g),
                    ("a0", p.a0),
                    ("vel0", p.vel0),
                    ("x0", p.x0),
                    ("y0", p.y0),
                    ("T", p.t_end),
                ];
                match &p.drag {
                    Some(d) => c.extend([
                        ("rho", d.rho),
                        ("cd", d.cd),
                        ("r_ball", d.r_ball),
                        ("m_ball", d.m_ball),
                    ]),
                    None => c.push(("rho", 0.0)),
                }
                c
            }
            Equation::LinBurgers(p) => vec![
                ("c", p.c),
                ("nu", p.nu),
                ("x_min", p.x_range.0),
                ("x_max", p.x_range.1),
                ("t_min", p.t_range.0),
                ("t_max", p.t_range.1),
            ],
            Equation::Burgers(p) => vec![
                ("nu", p.nu),
                ("x_min", p.x_range.0),
                ("x_max", p.x_range.1),
                ("t_min", p.t_range.0),
                ("t_max", p.t_range.1),
            ],
            Equation::KdV(p) => vec![
                ("nu", p.nu),
                ("c1", p.c1),
                ("c2", p.c2),
                ("x1", p.x1),
                ("x2", p.x2),
                ("x_min", p.x_range.0),
                ("x_max", p.x_range.1),
                ("t_min", p.t_range.0),
                ("t_max", p.t_range.1),
            ],
        };
        c.extend([
            ("m", self.m_interior as f64),
            ("m_ic_bc", self.m_ic_bc as f64),
            ("beta_ic", self.beta_ic),
            ("beta_bc", self.beta_bc),
        ]);
        c
    }

    /// Override one named constant. For projectiles, a positive `rho` turns on
    /// basketball drag and `rho = 0` removes it.
    pub fn set_const(&mut self, key: &str, value: f64) -> Result<()> {
        let problem = self.id();
        let unknown = || Error::UnknownConstant { problem, key: key.to_string() };
        match key {
            "m" => {
                self.m_interior = value as usize;
                return self.validate();
            }
            "m_ic_bc" => {
                self.m_ic_bc = value as usize;
                return self.validate();
            }
            "beta_ic" => {
                self.beta_ic = value;
                return self.validate();
            }
            "beta_bc" => {
                self.beta_bc = value;
                return self.validate();
            }
            _ => {}
        }
        fn range(r: &mut (f64, f64), key: &str, value: f64) -> bool {
            match key {
                "x_min" | "t_min" => r.0 = value,
                "x_max" | "t_max" => r.1 = value,
                _ => return false,
            }
            true
        }
        match &mut self.equation {
            Equation::ConvDiff(p) => match key {
                "v" => p.v = value,
                "k" => p.k = value,
                "L" | "length" => p.length = value,
                _ => return Err(unknown()),
            },
            Equation::Projectile(p) => match key {
                "g" => p.g = value,
                "a0" => p.a0 = value,
                "vel0" => p.vel0 = value,
                "x0" => p.x0 = value,
                "y0" => p.y0 = value,
                "T" | "t_end" => p.t_end = value,
                "rho" => {
                    if value > 0.0 {
                        match &mut p.drag {
                            Some(d) => d.rho = value,
                            None => p.drag = Some(Drag::basketball(value)),
                        }
                    } else {
                        p.drag = None;
                    }
                }
                "cd" | "r_ball" | "m_ball" => {
                    let d = p.drag.get_or_insert_with(|| Drag::basketball(1.2));
                    match key {
                        "cd" => d.cd = value,
                        "r_ball" => d.r_ball = value,
                        _ => d.m_ball = value,
                    }
                }
                _ => return Err(unknown()),
            },
            Equation::LinBurgers(p) => match key {
                "c" => p.c = value,
                "nu" => p.nu = value,
                "x_min" | "x_max" => {
                    range(&mut p.x_range, key, value);
                }
                "t_min" | "t_max" => {
                    range(&mut p.t_range, key, value);
                }
                _ => return Err(unknown()),
            },
            Equation::Burgers(p) => match key {
                "nu" => p.nu = value,
                "x_min" | "x_max" => {
                    range(&mut p.x_range, key, value);
                }
                "t_min" | "t_max" => {
                    range(&mut p.t_range, key, value);
                }
                _ => return Err(unknown()),
            },
            Equation::KdV(p) => match key {
                "nu" => p.nu = value,
                "c1" => p.c1 = value,
                "c2" => p.c2 = value,
                "x1" => p.x1 = value,
                "x2" => p.x2 = value,
                "x_min" | "x_max" => {
                    range(&mut p.x_range, key, value);
                }
                "t_min" | "t_max" => {
                    range(&mut p.t_range, key, value);
                }
                _ => return Err(unknown()),
            },
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.m_interior == 0 {
            return bad("m_interior must be at least 1");
        }
        if !(self.beta_ic >= 0.0 && self.beta_bc >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        let ok_range = |r: (f64, f64)| r.0 < r.1 && r.0.is_finite() && r.1.is_finite();
        match &self.equation {
            Equation::ConvDiff(p) => {
                if !(p.length > 0.0) || p.k == 0.0 {
                    return bad("convdiff needs L > 0 and k != 0");
                }
            }
            Equation::Projectile(p) => {
                if !(p.t_end > 0.0) {
                    return bad("projectile needs T > 0");
                }
            }
            Equation::LinBurgers(LinBurgers { x_range, t_range, .. })
            | Equation::Burgers(Burgers { x_range, t_range, .. })
            | Equation::KdV(KdV { x_range, t_range, .. }) => {
                if !ok_range(*x_range) || !ok_range(*t_range) {
                    return bad("degenerate domain");
                }
            }
        }
        if let Equation::KdV(p) = &self.equation {
            if !(p.nu > 0.0 && p.c1 >= 0.0 && p.c2 >= 0.0) {
                return bad("kdv needs nu > 0 and non-negative soliton speeds");
            }
        }
        Ok(())
    }

    /// Short stable label, e.g. `convdiff[v=8,k=1,L=5]`.
    pub fn label(&self) -> String {
        let consts: Vec<String> = self
            .constants()
            .into_iter()
            .filter(|(k, _)| !matches!(*k, "m" | "m_ic_bc" | "beta_ic" | "beta_bc"))
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        format!("{}[{}]", self.id(), consts.join(","))
    }

    fn network_inputs(&self, p: Point) -> [f64; 2] {
        match self.kind() {
            ProblemKind::ConvDiff => [p.x, 0.0],
            ProblemKind::Projectile => [p.t, 0.0],
            _ => [p.x, p.t],
        }
    }

    /// `(x range, t range)` of the collocation box; one-input problems report
    /// the unused axis as `(0, 0)`.
    pub fn domain(&self) -> ((f64, f64), (f64, f64)) {
        match &self.equation {
            Equation::ConvDiff(p) => ((0.0, p.length), (0.0, 0.0)),
            Equation::Projectile(p) => ((0.0, 0.0), (0.0, p.t_end)),
            Equation::LinBurgers(p) => (p.x_range, p.t_range),
            Equation::Burgers(p) => (p.x_range, p.t_range),
            Equation::KdV(p) => (p.x_range, p.t_range),
        }
    }
}

/// Randomized Latin hypercube sample: one point per stratum in every
/// coordinate marginal.
pub fn latin_hypercube<R: Rng + ?Sized>(n: usize, ranges: &[(f64, f64)], rng: &mut R) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; ranges.len()]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for (d, &(lo, hi)) in ranges.iter().enumerate() {
        perm.shuffle(rng);
        let width = (hi - lo) / n as f64;
        for (i, p) in pts.iter_mut().enumerate() {
            let u: f64 = rng.random();
            p[d] = lo + (perm[i] as f64 + u) * width;
        }
    }
    pts
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Fresh collocation batch for one loss evaluation.
pub fn sample_batch<R: Rng + ?Sized>(problem: &ProblemSpec, rng: &mut R) -> CollocationBatch {
    let m = problem.m_interior;
    let ((x0, x1), (t0, t1)) = problem.domain();
    match &problem.equation {
        Equation::ConvDiff(p) => {
            let interior = latin_hypercube(m, &[(0.0, p.length)], rng)
                .into_iter()
                .map(|v| Point { x: v[0], t: 0.0 })
                .collect();
            CollocationBatch {
                interior,
                initial: vec![],
                boundary: vec![Point { x: 0.0, t: 0.0 }, Point { x: p.length, t: 0.0 }],
            }
        }
        Equation::Projectile(p) => {
            let interior = latin_hypercube(m, &[(0.0, p.t_end)], rng)
                .into_iter()
                .map(|v| Point { x: 0.0, t: v[0] })
                .collect();
            CollocationBatch { interior, initial: vec![Point { x: 0.0, t: 0.0 }], boundary: vec![] }
        }
        _ => {
            let interior = latin_hypercube(m, &[(x0, x1), (t0, t1)], rng)
                .into_iter()
                .map(|v| Point { x: v[0], t: v[1] })
                .collect();
            let initial = latin_hypercube(problem.m_ic_bc, &[(x0, x1)], rng)
                .into_iter()
                .map(|v| Point { x: v[0], t: t0 })
                .collect();
            CollocationBatch { interior, initial, boundary: vec![] }
        }
    }
}

/// Seed-independent evaluation grid: 100×100 for PDEs, 1000 points for
/// one-input problems, plus the problem's initial/boundary points.
pub fn test_batch(problem: &ProblemSpec) -> CollocationBatch {
    let ((x0, x1), (t0, t1)) = problem.domain();
    match &problem.equation {
        Equation::ConvDiff(p) => CollocationBatch {
            interior: linspace(0.0, p.length, 1000).into_iter().map(|x| Point { x, t: 0.0 }).collect(),
            initial: vec![],
            boundary: vec![Point { x: 0.0, t: 0.0 }, Point { x: p.length, t: 0.0 }],
        },
        Equation::Projectile(p) => CollocationBatch {
            interior: linspace(0.0, p.t_end, 1000).into_iter().map(|t| Point { x: 0.0, t }).collect(),
            initial: vec![Point { x: 0.0, t: 0.0 }],
            boundary: vec![],
        },
        _ => {
            let xs = linspace(x0, x1, 100);
            let ts = linspace(t0, t1, 100);
            let interior = ts
                .iter()
                .flat_map(|&t| xs.iter().map(move |&x| Point { x, t }))
                .collect();
            let initial = linspace(x0, x1, problem.m_ic_bc.max(1))
                .into_iter()
                .map(|x| Point { x, t: t0 })
                .collect();
            CollocationBatch { interior, initial, boundary: vec![] }
        }
    }
}

/// Initial waveform `u(x, 0)` of the travelling-wave problems.
pub fn initial_condition(problem: &ProblemSpec, x: f64) -> f64 {
    match &problem.equation {
        Equation::LinBurgers(_) => 10.0 * (-(2.0 * x).powi(2)).exp(),
        Equation::Burgers(_) => (-(2.0 * x).powi(2)).exp(),
        Equation::KdV(p) => {
            let a1 = 0.5 * (p.c1 / p.nu).sqrt();
            let a2 = 0.5 * (p.c2 / p.nu).sqrt();
            let sech2 = |z: f64| {
                let c = z.cosh();
                1.0 / (c * c)
            };
            3.0 * p.c1 * sech2(a1 * (x - p.x1)) + 3.0 * p.c2 * sech2(a2 * (x - p.x2))
        }
        Equation::ConvDiff(_) | Equation::Projectile(_) => 0.0,
    }
}

pub fn residual_at(problem: &ProblemSpec, d: &DerivativeRecord) -> Result<Residual> {
    let r = match (&problem.equation, *d) {
        (Equation::ConvDiff(p), DerivativeRecord::Field { u_x, u_xx, .. }) => {
            Residual::Scalar(p.k * u_xx - p.v * u_x)
        }
        (Equation::Projectile(p), DerivativeRecord::Trajectory { x_t, x_tt, y_t, y_tt }) => {
            let r = p.drag_coefficient() * x_t.hypot(y_t);
            Residual::Pair(x_tt + r * x_t, y_tt + r * y_t + p.g)
        }
        (Equation::LinBurgers(p), DerivativeRecord::Field { u_t, u_x, u_xx, .. }) => {
            Residual::Scalar(u_t + p.c * u_x - p.nu * u_xx)
        }
        (Equation::Burgers(p), DerivativeRecord::Field { u, u_t, u_x, u_xx, .. }) => {
            Residual::Scalar(u_t + u * u_x - p.nu * u_xx)
        }
        (Equation::KdV(p), DerivativeRecord::Field { u, u_t, u_x, u_xxx, .. }) => {
            Residual::Scalar(u_t + u * u_x - p.nu * u_xxx)
        }
        _ => return Err(Error::Config("derivative record does not fit the problem".into())),
    };
    let finite = match r {
        Residual::Scalar(a) => a.is_finite(),
        Residual::Pair(a, b) => a.is_finite() && b.is_finite(),
    };
    if finite {
        Ok(r)
    } else {
        Err(Error::NonFinite("residual"))
    }
}

/// Something that maps network-style input jets to output jets.
///
/// Passes are addressed by `slot` so the same point can be evaluated with
/// different seeded inputs and later pulled back independently.
pub trait JetModel {
    fn pass(&mut self, slot: usize, inputs: &[Jet]) -> Result<[Jet; 2]>;
    /// Pull back an adjoint on the outputs of pass `slot`. Models without
    /// parameters ignore it.
    fn pull(&mut self, _slot: usize, _adj: &[[f64; 4]]) {}
    fn wants_adjoints(&self) -> bool {
        false
    }
}

/// Analytic surrogate: a closure from input jets to output jets.
pub struct AnalyticModel<F>(pub F);

impl<F: FnMut(&[Jet]) -> [Jet; 2]> JetModel for AnalyticModel<F> {
    fn pass(&mut self, _slot: usize, inputs: &[Jet]) -> Result<[Jet; 2]> {
        let out = (self.0)(inputs);
        Ok([out[0].check()?, out[1].check()?])
    }
}

/// A network with fixed weights, optionally accumulating the weight gradient.
pub struct NetworkModel<'a> {
    spec: &'a NetworkSpec,
    w: &'a [f64],
    tapes: [JetTape; 2],
    grad: Option<Vec<f64>>,
}

impl<'a> NetworkModel<'a> {
    pub fn new(spec: &'a NetworkSpec, w: &'a [f64], with_grad: bool) -> Self {
        NetworkModel {
            spec,
            w,
            tapes: [JetTape::new(spec), JetTape::new(spec)],
            grad: with_grad.then(|| vec![0.0; spec.param_count()]),
        }
    }

    pub fn into_grad(self) -> Option<Vec<f64>> {
        self.grad
    }
}

impl JetModel for NetworkModel<'_> {
    fn pass(&mut self, slot: usize, inputs: &[Jet]) -> Result<[Jet; 2]> {
        let out = self.tapes[slot].forward(self.spec, self.w, inputs)?;
        Ok([out[0], out.get(1).copied().unwrap_or(Jet::ZERO)])
    }

    fn pull(&mut self, slot: usize, adj: &[[f64; 4]]) {
        if let Some(g) = self.grad.as_mut() {
            self.tapes[slot].backward(self.spec, self.w, &adj[..self.spec.output_dim()], g);
        }
    }

    fn wants_adjoints(&self) -> bool {
        self.grad.is_some()
    }
}

fn point_jets(problem: &ProblemSpec, p: Point, seed: Option<usize>) -> ([Jet; 2], usize) {
    let v = problem.network_inputs(p);
    let n = problem.input_dim();
    let mut j = [Jet::constant(v[0]), Jet::constant(v[1])];
    if let Some(s) = seed {
        j[s] = Jet::seed(v[s]);
    }
    (j, n)
}

/// Assemble the loss of `model` on `batch`. When the model asks for
/// adjoints, each pass is pulled back with `∂total/∂(output jet)`.
pub fn assemble<M: JetModel>(problem: &ProblemSpec, model: &mut M, batch: &CollocationBatch) -> Result<LossBreakdown> {
    let grad = model.wants_adjoints();
    let mut l_de = 0.0;
    let mut l_ic = 0.0;
    let mut l_bc = 0.0;
    let m = batch.interior.len().max(1) as f64;
    match &problem.equation {
        Equation::ConvDiff(p) => {
            for &pt in &batch.interior {
                let (inp, n) = point_jets(problem, pt, Some(0));
                let [u, _] = model.pass(0, &inp[..n])?;
                let Residual::Scalar(r) = residual_at(
                    problem,
                    &DerivativeRecord::Field { u: u.v0, u_t: 0.0, u_x: u.v1, u_xx: u.v2, u_xxx: 0.0 },
                )?
                else {
                    unreachable!()
                };
                l_de += r * r;
                if grad {
                    let s = 2.0 * r / m;
                    model.pull(0, &[[0.0, -p.v * s, p.k * s, 0.0], [0.0; 4]]);
                }
            }
            let nb = batch.boundary.len().max(1) as f64;
            for &pt in &batch.boundary {
                let target = if pt.x == 0.0 { 0.0 } else { 1.0 };
                let (inp, n) = point_jets(problem, pt, None);
                let [u, _] = model.pass(0, &inp[..n])?;
                let e = u.v0 - target;
                l_bc += e * e / nb;
                if grad {
                    model.pull(0, &[[2.0 * e * problem.beta_bc / nb, 0.0, 0.0, 0.0], [0.0; 4]]);
                }
            }
        }
        Equation::Projectile(p) => {
            let c = p.drag_coefficient();
            for &pt in &batch.interior {
                let (inp, n) = point_jets(problem, pt, Some(0));
                let [xj, yj] = model.pass(0, &inp[..n])?;
                let Residual::Pair(r1, r2) = residual_at(
                    problem,
                    &DerivativeRecord::Trajectory { x_t: xj.v1, x_tt: xj.v2, y_t: yj.v1, y_tt: yj.v2 },
                )?
                else {
                    unreachable!()
                };
                l_de += 0.5 * (r1 * r1 + r2 * r2);
                if grad {
                    let (vx, vy) = (xj.v1, yj.v1);
                    let speed = vx.hypot(vy);
                    let drag = c * speed;
                    let (dxx, dxy, dyy) = if speed > 0.0 {
                        (c * vx * vx / speed, c * vx * vy / speed, c * vy * vy / speed)
                    } else {
                        (0.0, 0.0, 0.0)
                    };
                    let s = 1.0 / m;
                    let ax = [0.0, s * (r1 * (drag + dxx) + r2 * dxy), s * r1, 0.0];
                    let ay = [0.0, s * (r1 * dxy + r2 * (drag + dyy)), s * r2, 0.0];
                    model.pull(0, &[ax, ay]);
                }
            }
            let (vx0, vy0) = p.initial_velocity();
            let ni = batch.initial.len().max(1) as f64;
            for &pt in &batch.initial {
                let (inp, n) = point_jets(problem, pt, Some(0));
                let [xj, yj] = model.pass(0, &inp[..n])?;
                let e = [xj.v0 - p.x0, yj.v0 - p.y0, xj.v1 - vx0, yj.v1 - vy0];
                l_ic += e.iter().map(|v| v * v).sum::<f64>() / (4.0 * ni);
                if grad {
                    let s = 2.0 * problem.beta_ic / (4.0 * ni);
                    model.pull(0, &[[s * e[0], s * e[2], 0.0, 0.0], [s * e[1], s * e[3], 0.0, 0.0]]);
                }
            }
        }
        Equation::LinBurgers(_) | Equation::Burgers(_) | Equation::KdV(_) => {
            for &pt in &batch.interior {
                let (inp_t, n) = point_jets(problem, pt, Some(1));
                let [ut, _] = model.pass(0, &inp_t[..n])?;
                let (inp_x, _) = point_jets(problem, pt, Some(0));
                let [ux, _] = model.pass(1, &inp_x[..n])?;
                let rec = DerivativeRecord::Field {
                    u: ux.v0,
                    u_t: ut.v1,
                    u_x: ux.v1,
                    u_xx: ux.v2,
                    u_xxx: ux.v3,
                };
                let Residual::Scalar(r) = residual_at(problem, &rec)? else { unreachable!() };
                l_de += r * r;
                if grad {
                    let s = 2.0 * r / m;
                    let ax = match &problem.equation {
                        Equation::LinBurgers(q) => [0.0, q.c, -q.nu, 0.0],
                        Equation::Burgers(q) => [ux.v1, ux.v0, -q.nu, 0.0],
                        Equation::KdV(q) => [ux.v1, ux.v0, 0.0, -q.nu],
                        _ => unreachable!(),
                    };
                    model.pull(0, &[[0.0, s, 0.0, 0.0], [0.0; 4]]);
                    model.pull(1, &[ax.map(|a| a * s), [0.0; 4]]);
                }
            }
            let ni = batch.initial.len().max(1) as f64;
            for &pt in &batch.initial {
                let (inp, n) = point_jets(problem, pt, None);
                let [u, _] = model.pass(0, &inp[..n])?;
                let e = u.v0 - initial_condition(problem, pt.x);
                l_ic += e * e / ni;
                if grad {
                    model.pull(0, &[[2.0 * e * problem.beta_ic / ni, 0.0, 0.0, 0.0], [0.0; 4]]);
                }
            }
        }
    }
    l_de /= m;
    let total = l_de + problem.beta_ic * l_ic + problem.beta_bc * l_bc;
    if !total.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(LossBreakdown { l_de, l_ic, l_bc, total })
}

/// PINN loss of network weights `w` on a collocation batch.
pub fn loss(problem: &ProblemSpec, spec: &NetworkSpec, w: &[f64], batch: &CollocationBatch) -> Result<LossBreakdown> {
    check_network(problem, spec)?;
    let mut model = NetworkModel::new(spec, w, false);
    assemble(problem, &mut model, batch)
}

/// Loss together with its exact gradient with respect to the weights.
pub fn loss_and_grad(
    problem: &ProblemSpec,
    spec: &NetworkSpec,
    w: &[f64],
    batch: &CollocationBatch,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check_network(problem, spec)?;
    let mut model = NetworkModel::new(spec, w, true);
    let l = assemble(problem, &mut model, batch)?;
    let g = model.into_grad().expect("gradient requested");
    if g.iter().all(|v| v.is_finite()) {
        Ok((l, g))
    } else {
        Err(Error::NonFinite("loss gradient"))
    }
}

/// Loss on the fixed evaluation grid from [`test_batch`].
pub fn test_loss(problem: &ProblemSpec, spec: &NetworkSpec, w: &[f64]) -> Result<LossBreakdown> {
    loss(problem, spec, w, &test_batch(problem))
}

fn check_network(problem: &ProblemSpec, spec: &NetworkSpec) -> Result<()> {
    if spec.input_dim() != problem.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "network inputs for problem",
            expected: problem.input_dim(),
            got: spec.input_dim(),
        });
    }
    if spec.output_dim() != problem.output_dim() {
        return Err(Error::DimensionMismatch {
            what: "network outputs for problem",
            expected: problem.output_dim(),
            got: spec.output_dim(),
        });
    }
    Ok(())
}

/// Closed-form steady convection-diffusion profile.
///
/// Evaluated as `expm1(x·a)/expm1(L·a)` with `a = v/k`, switching to a
/// rescaled form once `L·a` is large enough to overflow.
pub fn analytic_conv_diff(x: f64, v: f64, k: f64, length: f64) -> f64 {
    let a = v / k;
    let la = length * a;
    if la > 600.0 {
        // e^{(x-L)a} · (1 - e^{-xa}) / (1 - e^{-La})
        ((x - length) * a).exp() * (-(-x * a).exp_m1()) / (-(-la).exp_m1())
    } else {
        (x * a).exp_m1() / la.exp_m1()
    }
}

/// Positions `(x(t), y(t))` from classical RK4 at step `≤ 1e-3·T`, sampled on
/// `t_grid` (must be non-decreasing and start at or after 0).
pub fn projectile_oracle(p: &Projectile, t_grid: &[f64]) -> Vec<(f64, f64)> {
    let c = p.drag_coefficient();
    let g = p.g;
    let deriv = |s: [f64; 4]| {
        let r = c * s[2].hypot(s[3]);
        [s[2], s[3], -r * s[2], -r * s[3] - g]
    };
    let (vx, vy) = p.initial_velocity();
    let mut state = [p.x0, p.y0, vx, vy];
    let mut t = 0.0;
    let h_max = 1e-3 * p.t_end;
    let mut out = Vec::with_capacity(t_grid.len());
    for &target in t_grid {
        let span = target - t;
        if span > 0.0 {
            let n = (span / h_max).ceil().max(1.0) as usize;
            let h = span / n as f64;
            for _ in 0..n {
                let k1 = deriv(state);
                let k2 = deriv(add(state, k1, h / 2.0));
                let k3 = deriv(add(state, k2, h / 2.0));
                let k4 = deriv(add(state, k3, h));
                for i in 0..4 {
                    state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
            t = target;
        }
        out.push((state[0], state[1]));
    }
    out
}

fn add(s: [f64; 4], k: [f64; 4], h: f64) -> [f64; 4] {
    [s[0] + h * k[0], s[1] + h * k[1], s[2] + h * k[2], s[3] + h * k[3]]
}

/// Solution for linearised Burgers with the Gaussian initial pulse
/// `10·exp(-4x²)`: advected at `c` and spread by the heat kernel.
pub fn linburgers_reference(p: &LinBurgers, x: f64, t: f64) -> f64 {
    let s = 1.0 + 16.0 * p.nu * t;
    10.0 / s.sqrt() * (-4.0 * (x - p.c * t).powi(2) / s).exp()
}

/// Mean squared error of the network solution against a reference solution
/// on the fixed evaluation grid. `None` when the problem has no reference.
pub fn solution_mse(problem: &ProblemSpec, spec: &NetworkSpec, w: &[f64]) -> Option<Result<f64>> {
    let grid = test_batch(problem);
    let run = || -> Result<f64> {
        match &problem.equation {
            Equation::ConvDiff(p) => {
                let mut s = 0.0;
                for pt in &grid.interior {
                    let u = crate::network::forward(spec, w, &[pt.x])?[0];
                    s += (u - analytic_conv_diff(pt.x, p.v, p.k, p.length)).powi(2);
                }
                Ok(s / grid.interior.len() as f64)
            }
            Equation::Projectile(p) => {
                let ts: Vec<f64> = grid.interior.iter().map(|pt| pt.t).collect();
                let truth = projectile_oracle(p, &ts);
                let mut s = 0.0;
                for (t, (x, y)) in ts.iter().zip(truth) {
                    let o = crate::network::forward(spec, w, &[*t])?;
                    s += (o[0] - x).powi(2) + (o[1] - y).powi(2);
                }
                Ok(s / (2.0 * ts.len() as f64))
            }
            Equation::LinBurgers(p) => {
                let mut s = 0.0;
                for pt in &grid.interior {
                    let u = crate::network::forward(spec, w, &[pt.x, pt.t])?[0];
                    s += (u - linburgers_reference(p, pt.x, pt.t)).powi(2);
                }
                Ok(s / grid.interior.len() as f64)
            }
            _ => unreachable!(),
        }
    };
    match problem.kind() {
        ProblemKind::Burgers | ProblemKind::KdV => None,
        _ => Some(run()),
    }
}
