use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use tnes::adam::{adam_run, AdamConfig};
use tnes::harness::experiment::{run_experiment, Algorithm, ExperimentConfig};
use tnes::harness::export;
use tnes::harness::record::RunRecord;
use tnes::objective::PinnObjective;
use tnes::priors::{self, PriorDocument};
use tnes::problems::ProblemSpec;
use tnes::transfer::{tnes_run, SourcePrior, TransferPlan};
use tnes::xnes::{xnes_run, EsConfig};

#[derive(Parser)]
#[command(name = "tnes", version, about = "Train physics-informed networks with natural evolution strategies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one problem instance with one optimiser.
    Solve {
        #[arg(long)]
        problem: String,
        /// Override a problem constant, e.g. `--const v=8`.
        #[arg(long = "const", value_name = "KEY=VALUE", value_parser = parse_const)]
        consts: Vec<(String, f64)>,
        #[arg(long, value_enum)]
        algo: Algo,
        /// Source prior for tNES (repeatable).
        #[arg(long = "source")]
        sources: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_evals: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also store the final search distribution in this prior library.
        #[arg(long)]
        save_prior: Option<PathBuf>,
    },
    /// Run a multi-run experiment file.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Manage the prior library.
    Priors {
        #[command(subcommand)]
        action: PriorsAction,
    },
    /// Re-export CSV and SVG summaries from stored run records.
    Export {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "csv,svg")]
        format: Vec<Format>,
        /// Output directory (defaults to the runs directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PriorsAction {
    /// List the priors in a library directory.
    List { dir: PathBuf },
    /// Show one prior's metadata.
    Inspect { path: PathBuf },
    /// Turn the final distribution of an ES run record into a prior.
    SeedFromRun {
        run: PathBuf,
        #[arg(long)]
        library: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Adam,
    Xnes,
    Tnes,
}

impl From<Algo> for Algorithm {
    fn from(a: Algo) -> Self {
        match a {
            Algo::Adam => Algorithm::Adam,
            Algo::Xnes => Algorithm::Xnes,
            Algo::Tnes => Algorithm::Tnes,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Svg,
}

fn parse_const(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("bad value for `{k}`: {e}"))?;
    Ok((k.trim().to_string(), v))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Solve { problem, consts, algo, sources, seed, max_evals, out, save_prior } => {
            solve(&problem, &consts, algo.into(), &sources, seed, max_evals, &out, save_prior.as_deref())
        }
        Command::Compare { config, out } => compare(&config, out),
        Command::Priors { action } => priors_cmd(action),
        Command::Export { runs, format, out } => export_cmd(&runs, &format, out.as_deref().unwrap_or(&runs)),
    }
}

#[allow(clippy::too_many_arguments)]
fn solve(
    problem: &str,
    consts: &[(String, f64)],
    algo: Algorithm,
    sources: &[PathBuf],
    seed: u64,
    max_evals: Option<usize>,
    out: &Path,
    save_prior: Option<&Path>,
) -> Result<()> {
    let mut spec = ProblemSpec::preset(problem)?;
    for (k, v) in consts {
        spec.set_const(k, *v)?;
    }
    let obj = PinnObjective::with_default_network(spec)?;
    let kind = obj.problem.kind();
    let d = obj.network.param_count();
    let rec = match algo {
        Algorithm::Adam => {
            let mut cfg = AdamConfig::defaults_for(kind);
            if let Some(n) = max_evals {
                cfg.max_evaluations = n;
            }
            adam_run(&obj, &cfg, seed)?
        }
        Algorithm::Xnes | Algorithm::Tnes => {
            let mut cfg = EsConfig::defaults_for(kind);
            if let Some(n) = max_evals {
                cfg.max_evaluations = n;
            }
            if algo == Algorithm::Xnes {
                xnes_run(&obj, &cfg, seed)?
            } else {
                if sources.is_empty() {
                    bail!("tnes needs at least one --source prior");
                }
                let priors = sources
                    .iter()
                    .map(|p| {
                        let doc = priors::load_prior_for(p, d).with_context(|| format!("loading {}", p.display()))?;
                        Ok(SourcePrior::from_document(&doc)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                tnes_run(&obj, &cfg, &TransferPlan::defaults_for(kind), &priors, seed)?
            }
        }
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(format!("{}_{}_seed{}.json", algo.id(), export::slug(&rec.problem), seed));
    rec.save(&path)?;
    println!("{}", path.display());
    println!(
        "{} on {}: {} evaluations, best train loss {:.3e}, test loss {:.3e}{}",
        rec.algorithm,
        rec.problem,
        rec.evaluations,
        rec.final_train_loss,
        rec.final_test_loss,
        rec.final_mse.map(|m| format!(", MSE {m:.3e}")).unwrap_or_default()
    );
    if let Some(f) = &rec.failure {
        eprintln!("run failed: {f}");
    }
    if let Some(lib) = save_prior {
        let doc = PriorDocument::from_run(&rec)?;
        println!("{}", priors::save_to_library(&doc, lib)?.display());
    }
    Ok(())
}

fn compare(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let out = out.or_else(|| cfg.out_dir.clone()).context("no --out given and the config sets no out_dir")?;
    let res = run_experiment(&cfg, &out)?;
    for (summary, _) in &res.cells {
        println!("{} ({})", summary.cell, summary.problem);
        for a in &summary.algorithms {
            println!(
                "  {:<5} runs {:>3}  median test {:.3e}  worst test {:.3e}{}",
                a.algorithm,
                a.runs,
                a.median_final_test_loss,
                a.worst_final_test_loss,
                a.median_final_mse.map(|m| format!("  median MSE {m:.3e}")).unwrap_or_default()
            );
        }
        if let Some(f) = &summary.friedman {
            println!("  friedman chi2 = {:.3}, p = {:.3e}", f.statistic, f.p);
        }
        for t in &summary.pairwise {
            println!(
                "  {} vs {} [{}]: U = {}, p(less) = {:.3e}, p(two-sided) = {:.3e}",
                t.a, t.b, t.metric, t.test.u, t.test.p_less, t.test.p_two_sided
            );
        }
    }
    Ok(())
}

fn priors_cmd(action: PriorsAction) -> Result<()> {
    match action {
        PriorsAction::List { dir } => {
            for s in priors::list_library(&dir)? {
                println!(
                    "{:<12} d={:<3} seed={:<6} test={:.3e}  {}  {}",
                    s.problem_id,
                    s.d,
                    s.seed,
                    s.final_test_loss,
                    s.problem_label,
                    s.path.display()
                );
            }
        }
        PriorsAction::Inspect { path } => {
            let doc = priors::load_prior(&path)?;
            let sd = doc.distribution()?;
            println!("problem      {}", doc.problem_label);
            println!("d            {}", doc.d);
            println!("seed         {}", doc.seed);
            println!("created      {}", doc.created);
            println!("train loss   {:.6e}", doc.final_train_loss);
            println!("test loss    {:.6e}", doc.final_test_loss);
            println!("|mu|         {:.6e}", sd.mu.norm());
            println!("log|det A|   {:.6e}", sd.log_det_a);
        }
        PriorsAction::SeedFromRun { run, library } => {
            let rec = RunRecord::load(&run)?;
            let doc = PriorDocument::from_run(&rec)?;
            println!("{}", priors::save_to_library(&doc, &library)?.display());
        }
    }
    Ok(())
}

fn collect_records(dir: &Path, out: &mut Vec<RunRecord>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_records(&p, out)?;
            continue;
        }
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if !name.ends_with(".json") || name.ends_with(priors::EXTENSION) || name == "summary.json" {
            continue;
        }
        match RunRecord::load(&p) {
            Ok(r) => out.push(r),
            Err(e) => eprintln!("skipping {}: {e}", p.display()),
        }
    }
    Ok(())
}

fn export_cmd(runs: &Path, formats: &[Format], out: &Path) -> Result<()> {
    let mut records = Vec::new();
    collect_records(runs, &mut records)?;
    if records.is_empty() {
        bail!("no run records under {}", runs.display());
    }
    let mut cells: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        cells.entry(r.problem.clone()).or_default().push(r);
    }
    for (cell, recs) in cells {
        let report = export::build_report(&cell, &recs);
        let mut files = Vec::new();
        if formats.contains(&Format::Csv) {
            files.extend(export::write_csv(&report, out)?);
        }
        if formats.contains(&Format::Svg) {
            files.extend(export::write_svg(&report, out)?);
        }
        for f in files {
            println!("{}", f.display());
        }
    }
    Ok(())
}
