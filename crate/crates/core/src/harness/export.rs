//! CSV tables and SVG line plots for a cell of runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::record::RunRecord;
use super::stats::percentile_sorted;
use crate::error::{Error, Result};

/// Best-so-far training loss of one algorithm on a common evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub algorithm: String,
    pub evaluations: Vec<usize>,
    pub median: Vec<f64>,
    pub p10: Vec<f64>,
    pub p90: Vec<f64>,
}

/// `points` evenly spaced evaluation counts ending at `max_evaluations`.
pub fn evaluation_grid(max_evaluations: usize, points: usize) -> Vec<usize> {
    let points = points.clamp(1, max_evaluations.max(1));
    let mut grid: Vec<usize> = (1..=points).map(|i| (max_evaluations * i).div_ceil(points)).collect();
    grid.dedup();
    grid
}

pub fn summarize(algorithm: &str, runs: &[&RunRecord], grid: &[usize]) -> ConvergenceSummary {
    let mut median = Vec::with_capacity(grid.len());
    let mut p10 = Vec::with_capacity(grid.len());
    let mut p90 = Vec::with_capacity(grid.len());
    for &e in grid {
        let mut v: Vec<f64> = runs.iter().map(|r| r.best_train_at(e)).collect();
        v.sort_by(f64::total_cmp);
        median.push(percentile_sorted(&v, 0.5));
        p10.push(percentile_sorted(&v, 0.1));
        p90.push(percentile_sorted(&v, 0.9));
    }
    ConvergenceSummary { algorithm: algorithm.to_string(), evaluations: grid.to_vec(), median, p10, p90 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRow {
    pub algorithm: String,
    pub run: usize,
    pub seed: u64,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub final_mse: Option<f64>,
    pub evaluations: usize,
    pub failure: Option<String>,
}

/// Mean mixing coefficients over a cell's runs, per generation.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingSummary {
    pub algorithm: String,
    pub source_labels: Vec<String>,
    pub generation: Vec<usize>,
    /// `alpha[c][i]`: component `c` (0 = target) at `generation[i]`.
    pub alpha: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub cell: String,
    pub convergence: Vec<ConvergenceSummary>,
    pub finals: Vec<FinalRow>,
    pub mixing: Vec<MixingSummary>,
}

/// Grid resolution of the convergence summaries.
pub const GRID_POINTS: usize = 200;

/// Build a report from records grouped by algorithm in first-seen order.
/// Run indices count within each algorithm.
pub fn build_report(cell: &str, records: &[RunRecord]) -> CellReport {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        if !groups.contains_key(r.algorithm.as_str()) {
            order.push(&r.algorithm);
        }
        groups.entry(&r.algorithm).or_default().push(r);
    }
    let max_evals = records.iter().map(|r| r.evaluations).max().unwrap_or(0);
    let grid = evaluation_grid(max_evals, GRID_POINTS);

    let mut convergence = Vec::new();
    let mut finals = Vec::new();
    let mut mixing = Vec::new();
    for alg in order {
        let runs = &groups[alg];
        convergence.push(summarize(alg, runs, &grid));
        for (i, r) in runs.iter().enumerate() {
            finals.push(FinalRow {
                algorithm: alg.to_string(),
                run: i,
                seed: r.seed,
                final_train_loss: r.final_train_loss,
                final_test_loss: r.final_test_loss,
                final_mse: r.final_mse,
                evaluations: r.evaluations,
                failure: r.failure.clone(),
            });
        }
        if let Some(m) = mixing_summary(alg, runs) {
            mixing.push(m);
        }
    }
    CellReport { cell: cell.to_string(), convergence, finals, mixing }
}

fn mixing_summary(alg: &str, runs: &[&RunRecord]) -> Option<MixingSummary> {
    let first = runs.iter().find(|r| !r.mixing.is_empty())?;
    let k = first.mixing[0].alpha_sources.len();
    let mut by_gen: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for r in runs {
        for row in &r.mixing {
            if row.alpha_sources.len() != k {
                continue;
            }
            let e = by_gen.entry(row.generation).or_insert_with(|| (vec![0.0; k + 1], 0));
            e.0[0] += row.alpha_target;
            for (s, a) in row.alpha_sources.iter().enumerate() {
                e.0[s + 1] += a;
            }
            e.1 += 1;
        }
    }
    let generation: Vec<usize> = by_gen.keys().copied().collect();
    let alpha = (0..=k)
        .map(|c| by_gen.values().map(|(sum, n)| sum[c] / *n as f64).collect())
        .collect();
    Some(MixingSummary { algorithm: alg.to_string(), source_labels: first.source_labels.clone(), generation, alpha })
}

#[derive(Debug, Serialize, Deserialize)]
struct ConvergenceRow {
    algorithm: String,
    evaluations: usize,
    median: f64,
    p10: f64,
    p90: f64,
}

/// File-name-safe version of a cell name.
pub fn slug(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write the cell's CSV tables; the mixing table only when there is a
/// mixing history.
pub fn write_csv(report: &CellReport, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let name = slug(&report.cell);
    let mut written = Vec::new();

    let path = dir.join(format!("convergence_{name}.csv"));
    let mut w = csv_writer(&path)?;
    for s in &report.convergence {
        for i in 0..s.evaluations.len() {
            w.serialize(ConvergenceRow {
                algorithm: s.algorithm.clone(),
                evaluations: s.evaluations[i],
                median: s.median[i],
                p10: s.p10[i],
                p90: s.p90[i],
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let path = dir.join(format!("final_losses_{name}.csv"));
    let mut w = csv_writer(&path)?;
    for row in &report.finals {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);

    if !report.mixing.is_empty() {
        let path = dir.join(format!("mixing_{name}.csv"));
        let mut w = csv_writer(&path)?;
        let width = report.mixing.iter().map(|m| m.alpha.len()).max().unwrap_or(1);
        let mut header = vec!["algorithm".to_string(), "generation".to_string(), "alpha_target".to_string()];
        header.extend((1..width).map(|s| format!("alpha_source_{}", s - 1)));
        w.write_record(&header)?;
        for m in &report.mixing {
            for (i, g) in m.generation.iter().enumerate() {
                let mut rec = vec![m.algorithm.clone(), g.to_string()];
                rec.extend((0..width).map(|c| m.alpha.get(c).map_or(String::new(), |a| a[i].to_string())));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Read back a convergence table written by [`write_csv`].
pub fn read_convergence_csv(path: &Path) -> Result<Vec<ConvergenceSummary>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    })?;
    let mut out: Vec<ConvergenceSummary> = Vec::new();
    for row in r.deserialize() {
        let row: ConvergenceRow = row?;
        if out.last().is_none_or(|s| s.algorithm != row.algorithm) {
            out.push(ConvergenceSummary {
                algorithm: row.algorithm.clone(),
                evaluations: Vec::new(),
                median: Vec::new(),
                p10: Vec::new(),
                p90: Vec::new(),
            });
        }
        let s = out.last_mut().expect("just pushed");
        s.evaluations.push(row.evaluations);
        s.median.push(row.median);
        s.p10.push(row.p10);
        s.p90.push(row.p90);
    }
    Ok(out)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    log_y: bool,
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x1 - self.x0).max(f64::MIN_POSITIVE);
        MARGIN + (x - self.x0) / span * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        let y = if self.log_y { y.max(f64::MIN_POSITIVE).log10() } else { y };
        let span = (self.y1 - self.y0).max(f64::MIN_POSITIVE);
        H - MARGIN - (y - self.y0) / span * (H - 2.0 * MARGIN)
    }
}

fn svg_open(title: &str, ax: &Axes, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, xml_escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, W / 2.0, H - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{ylabel}</text>"#,
        H / 2.0,
        H / 2.0
    );
    if ax.log_y {
        let lo = ax.y0.floor() as i32;
        let hi = ax.y1.ceil() as i32;
        for p in lo..=hi {
            let y = ax.py(10f64.powi(p));
            if y < MARGIN - 0.5 || y > H - MARGIN + 0.5 {
                continue;
            }
            let _ = writeln!(
                s,
                r##"<line x1="{MARGIN}" x2="{}" y1="{y:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">1e{p}</text>"##,
                W - MARGIN,
                MARGIN - 5.0,
                y + 4.0
            );
        }
    }
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="{}" text-anchor="start">{}</text>"#, H - MARGIN + 15.0, ax.x0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, W - MARGIN, H - MARGIN + 15.0, ax.x1);
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn points(ax: &Axes, xs: impl Iterator<Item = f64>, ys: &[f64]) -> String {
    let mut s = String::new();
    for (x, &y) in xs.zip(ys) {
        if y.is_finite() && (!ax.log_y || y > 0.0) {
            let _ = write!(s, "{:.2},{:.2} ", ax.px(x), ax.py(y));
        }
    }
    s.trim_end().to_string()
}

/// Convergence plot: one median polyline per algorithm over a shaded
/// 10th–90th percentile band, log-scale loss axis.
pub fn convergence_svg(report: &CellReport) -> String {
    let finite = |v: &f64| v.is_finite() && *v > 0.0;
    let ys: Vec<f64> = report
        .convergence
        .iter()
        .flat_map(|s| s.p10.iter().chain(&s.p90).chain(&s.median).copied())
        .filter(finite)
        .collect();
    let (lo, hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    let (lo, hi) = if lo.is_finite() { (lo.log10().floor(), hi.log10().ceil().max(lo.log10().floor() + 1.0)) } else { (-1.0, 0.0) };
    let x1 = report.convergence.iter().flat_map(|s| s.evaluations.last()).copied().max().unwrap_or(1) as f64;
    let ax = Axes { x0: 0.0, x1, y0: lo, y1: hi, log_y: true };
    let mut s = svg_open(&report.cell, &ax, "evaluations", "best training loss");
    for (i, c) in report.convergence.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let xs = || c.evaluations.iter().map(|&e| e as f64);
        let upper = points(&ax, xs(), &c.p90);
        let lower: Vec<String> = {
            let pts = points(&ax, xs(), &c.p10);
            pts.split(' ').rev().map(str::to_string).collect()
        };
        if !upper.is_empty() && !lower.is_empty() {
            let _ = writeln!(
                s,
                r#"<polygon points="{upper} {}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                lower.join(" ")
            );
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"><title>{}</title></polyline>"#,
            points(&ax, xs(), &c.median),
            xml_escape(&c.algorithm)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - MARGIN - 80.0,
            MARGIN + 15.0 + 15.0 * i as f64,
            xml_escape(&c.algorithm)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Mixing plot: one polyline per mixture component.
pub fn mixing_svg(m: &MixingSummary, cell: &str) -> String {
    let x1 = m.generation.last().copied().unwrap_or(1).max(1) as f64;
    let ax = Axes { x0: 0.0, x1, y0: 0.0, y1: 1.0, log_y: false };
    let mut s = svg_open(&format!("{cell} ({})", m.algorithm), &ax, "generation", "mixing coefficient");
    for (c, alpha) in m.alpha.iter().enumerate() {
        let color = PALETTE[c % PALETTE.len()];
        let name = if c == 0 { "target".to_string() } else { m.source_labels.get(c - 1).cloned().unwrap_or_else(|| format!("source {}", c - 1)) };
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"><title>{}</title></polyline>"#,
            points(&ax, m.generation.iter().map(|&g| g as f64), alpha),
            xml_escape(&name)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_svg(report: &CellReport, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let name = slug(&report.cell);
    let mut written = Vec::new();
    let path = dir.join(format!("convergence_{name}.svg"));
    std::fs::write(&path, convergence_svg(report)).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    for m in &report.mixing {
        let path = dir.join(format!("mixing_{name}_{}.svg", slug(&m.algorithm)));
        std::fs::write(&path, mixing_svg(m, &report.cell)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
