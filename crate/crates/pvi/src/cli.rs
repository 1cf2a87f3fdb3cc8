//! Command-line surface. Exit codes: 0 success, 2 configuration error,
//! 3 solver failure, 4 convex-law violations, 5 field-check failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use pvi_core::convex::laws::{builtin_registry, run_law_suite, KindReport, LawConfig};
use pvi_core::ConvexFunction;

use crate::config::{parse_backend, ConvexCfg, McCfg, RunConfig};
use crate::csvio::{export_field, export_sweep, import_field};
use crate::demos;
use crate::manifest::Manifest;
use crate::run::{check_field, default_workers, evaluate, pool, print_table, CheckOutcome};

#[derive(Debug, Parser)]
#[command(name = "pvi", version, about = "Parabolic variational inequalities through their backward stochastic representation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate the solution field of a problem and write it as CSV.
    Solve(Common),
    /// Run the convex-function law suites.
    VerifyConvex(Common),
    /// Check a field CSV against its problem.
    VerifyField {
        #[command(flatten)]
        common: Common,
        /// Field file written by `solve`.
        #[arg(long)]
        field: PathBuf,
    },
    /// Run a bundled problem end to end.
    Demo {
        name: String,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_parser = ["regression", "lattice"])]
    pub backend: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("convex law violations: {0}")]
    Convex(String),
    #[error("field checks failed: {0}")]
    Check(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Solver(_) => 3,
            Failure::Convex(_) => 4,
            Failure::Check(_) => 5,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

impl Common {
    fn workers(&self) -> Result<usize, Failure> {
        match self.workers {
            Some(0) => Err(Failure::Config("--workers must be at least 1".into())),
            Some(n) => Ok(n),
            None => Ok(default_workers()),
        }
    }

    fn load(&self) -> Result<RunConfig, Failure> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| Failure::Config("--config is required".into()))?;
        let cfg = RunConfig::load(path).map_err(config_err)?;
        self.apply(cfg)
    }

    fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig, Failure> {
        if let Some(s) = self.seed {
            cfg.mc.seed = s;
        }
        if let Some(p) = self.paths {
            cfg.mc.paths = p;
        }
        if let Some(s) = self.steps {
            cfg.mc.steps = s;
        }
        if let Some(b) = &self.backend {
            cfg.solver.backend = b.clone();
        }
        if let Some(o) = &self.out {
            cfg.output.dir = Some(o.clone());
        }
        parse_backend(&cfg.solver.backend).map_err(config_err)?;
        Ok(cfg)
    }
}

/// Fails unless `dir` is an existing directory that accepts new files.
pub fn ensure_writable(dir: &Path) -> Result<(), Failure> {
    if !dir.is_dir() {
        return Err(Failure::Config(format!("output directory {} does not exist", dir.display())));
    }
    let probe = dir.join(format!(".pvi-write-check-{}", std::process::id()));
    std::fs::write(&probe, b"")
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|e| Failure::Config(format!("output directory {} is not writable: {e}", dir.display())))
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Solve(c) => cmd_solve(&c),
        Command::VerifyConvex(c) => cmd_verify_convex(&c),
        Command::VerifyField { common, field } => cmd_verify_field(&common, &field),
        Command::Demo { name, common } => cmd_demo(&name, &common),
    }
}

fn write_manifest(m: &mut Manifest, dir: &Path, start: Instant) -> Result<(), Failure> {
    m.wall_time_s = start.elapsed().as_secs_f64();
    let path = dir.join("manifest.json");
    m.write(&path).map_err(|e| Failure::Solver(format!("{}: {e}", path.display())))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_solve(c: &Common) -> Result<(), Failure> {
    let start = Instant::now();
    let cfg = c.load()?;
    let workers = c.workers()?;
    let out = cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from("."));
    ensure_writable(&out)?;
    let spec = cfg.problem().map_err(config_err)?;
    let grid = cfg.grid(&spec).map_err(config_err)?;
    let mc = cfg.mc().map_err(config_err)?;
    let backend = cfg.backend().map_err(config_err)?;
    let opts = cfg.solver_options();
    log::info!(
        "solving {} nodes with the {} backend, {} paths, {} steps, {workers} workers",
        grid.n_nodes(),
        backend.name(),
        mc.n_paths,
        mc.n_steps
    );
    let field = evaluate(&spec, &grid, &mc, &opts, backend, workers).map_err(|e| Failure::Solver(e.to_string()))?;
    for w in &field.warnings {
        log::warn!("{w}");
    }
    let path = out.join("field.csv");
    export_field(&field, &path).map_err(|e| Failure::Solver(e.to_string()))?;
    let checks = check_field(&spec, &field, &Default::default(), &mc, &opts, workers).map_err(config_err)?;
    let mut m = Manifest::new("solve", &cfg, workers);
    m.outputs.push(path.display().to_string());
    m.checks = checks.outcomes;
    m.warnings = field.warnings.clone();
    write_manifest(&mut m, &out, start)?;
    println!("wrote {} ({} nodes)", path.display(), field.grid.n_nodes());
    Ok(())
}

fn convex_functions(cfg: &ConvexCfg) -> Result<Vec<(String, ConvexFunction)>, Failure> {
    let reg = builtin_registry();
    let mut out = Vec::new();
    for name in &cfg.functions {
        if name == "all" {
            out.extend(reg.iter().cloned());
        } else if let Some(e) = reg.iter().find(|(n, _)| n == name) {
            out.push(e.clone());
        } else {
            let known: Vec<&str> = reg.iter().map(|(n, _)| n.as_str()).collect();
            return Err(Failure::Config(format!("unknown convex function {name:?}; registry: {}", known.join(", "))));
        }
    }
    if cfg.inject_fault {
        let f = ConvexFunction::fault_negated_quadratic(2, vec![1.0, 0.0, 0.0, 1.0]).map_err(config_err)?;
        out.push(("negated_quadratic_fault".into(), f));
    }
    Ok(out)
}

pub fn cmd_verify_convex(c: &Common) -> Result<(), Failure> {
    let start = Instant::now();
    let cfg = match &c.config {
        Some(_) => c.load()?,
        None => {
            let seed = c.seed.ok_or_else(|| Failure::Config("a seed is required (--seed or a config)".into()))?;
            c.apply(RunConfig {
                problem: None,
                grid: None,
                mc: McCfg {
                    seed,
                    paths: 0,
                    steps: 0,
                    batches: 0,
                },
                solver: Default::default(),
                output: Default::default(),
                checks: Default::default(),
                convex: None,
            })?
        }
    };
    let workers = c.workers()?;
    if let Some(dir) = &cfg.output.dir {
        ensure_writable(dir)?;
    }
    let ccfg = cfg.convex.clone().unwrap_or(ConvexCfg {
        functions: vec!["all".into()],
        samples: 1000,
        tol: 1e-6,
        inject_fault: false,
    });
    let funcs = convex_functions(&ccfg)?;
    let law = LawConfig {
        samples: ccfg.samples,
        seed: cfg.mc.seed,
        tol: ccfg.tol,
        ..LawConfig::default()
    };
    let reports: Vec<KindReport> =
        pool(workers).install(|| funcs.par_iter().map(|(n, f)| run_law_suite(n, f, &law)).collect());
    let mut rows = Vec::new();
    for r in &reports {
        for o in &r.outcomes {
            rows.push(CheckOutcome::new(
                format!("{} {}", r.name, o.law.name()),
                o.passed(),
                match &o.first_violation {
                    None => format!("{} checked", o.checked),
                    Some(v) => format!("{} of {} violated, worst excess {:.3e}; first: {v}", o.violations, o.checked, o.worst_excess),
                },
            ));
        }
    }
    print_table(&format!("convex law suites ({} samples, seed {})", law.samples, law.seed), &rows);
    let failed: Vec<&KindReport> = reports.iter().filter(|r| !r.passed()).collect();
    if let Some(dir) = &cfg.output.dir {
        let mut m = Manifest::new("verify-convex", &cfg, workers);
        m.checks = rows.clone();
        write_manifest(&mut m, dir, start)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Convex(
            failed
                .iter()
                .map(|r| format!("{} ({} violations)", r.name, r.total_violations()))
                .collect::<Vec<_>>()
                .join(", "),
        ))
    }
}

pub fn cmd_verify_field(c: &Common, field_path: &Path) -> Result<(), Failure> {
    let start = Instant::now();
    let cfg = c.load()?;
    let workers = c.workers()?;
    if let Some(dir) = &cfg.output.dir {
        ensure_writable(dir)?;
    }
    let spec = cfg.problem().map_err(config_err)?;
    let mc = cfg.mc().map_err(config_err)?;
    let opts = cfg.solver_options();
    let field = import_field(field_path).map_err(config_err)?;
    if field.d != spec.d || field.k != spec.k {
        return Err(Failure::Config(format!(
            "field has d = {}, k = {} but the problem has d = {}, k = {}",
            field.d, field.k, spec.d, spec.k
        )));
    }
    field.grid.validate(&spec).map_err(config_err)?;
    let checks = check_field(&spec, &field, &cfg.checks, &mc, &opts, workers).map_err(config_err)?;
    print_table(&format!("field checks for {}", field_path.display()), &checks.outcomes);
    if let Some(dir) = &cfg.output.dir {
        let mut m = Manifest::new("verify-field", &cfg, workers);
        if let Some(rep) = &checks.sweep {
            let p = dir.join("viscosity.csv");
            export_sweep(rep, spec.d, spec.k, &p).map_err(|e| Failure::Solver(e.to_string()))?;
            m.outputs.push(p.display().to_string());
        }
        m.checks = checks.outcomes.clone();
        write_manifest(&mut m, dir, start)?;
    }
    let failed: Vec<String> = checks
        .outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("{}: {}", o.name, o.detail))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join("; ")))
    }
}

pub fn cmd_demo(name: &str, c: &Common) -> Result<(), Failure> {
    let start = Instant::now();
    let demo = demos::find(name).ok_or_else(|| {
        Failure::Config(format!("unknown demo {name:?}; available demos: {}", demos::names().join(", ")))
    })?;
    let cfg = c.apply(demo.run_config())?;
    let workers = c.workers()?;
    if let Some(dir) = &cfg.output.dir {
        ensure_writable(dir)?;
    }
    let res = demos::run_demo(demo, &cfg, workers).map_err(|e| match e {
        demos::DemoError::Config(m) => Failure::Config(m),
        demos::DemoError::Solver(e) => Failure::Solver(e.to_string()),
    })?;
    print_table(&format!("demo {name} (seed {}, {workers} workers)", cfg.mc.seed), &res.table);
    if let Some(dir) = &cfg.output.dir {
        let p = dir.join("field.csv");
        export_field(&res.field, &p).map_err(|e| Failure::Solver(e.to_string()))?;
        let mut m = Manifest::new("demo", &cfg, workers);
        m.outputs.push(p.display().to_string());
        m.checks = res.table.clone();
        m.warnings = res.field.warnings.clone();
        write_manifest(&mut m, dir, start)?;
    }
    if res.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = res.table.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        Err(Failure::Check(failed.join(", ")))
    }
}
