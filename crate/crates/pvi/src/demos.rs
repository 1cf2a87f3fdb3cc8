//! Bundled demo problems and their acceptance tables.

use pvi_core::bsvi::{BsvTriple, SolverOptions};
use pvi_core::field::{backend_agreement, FieldError, McSettings, ProblemSpec, SolutionField};

use crate::config::RunConfig;
use crate::run::{check_field, discrete_contract, evaluate, CheckOutcome};

pub struct Demo {
    pub name: &'static str,
    pub config: &'static str,
    /// Origin of the path-level contract check.
    pub origin: &'static [f64],
}

pub const DEMOS: [Demo; 4] = [
    Demo {
        name: "heat",
        config: include_str!("../configs/heat.toml"),
        origin: &[0.0],
    },
    Demo {
        name: "linear-generator",
        config: include_str!("../configs/linear-generator.toml"),
        origin: &[0.5],
    },
    Demo {
        name: "reflected-halfline",
        config: include_str!("../configs/reflected-halfline.toml"),
        origin: &[1.0],
    },
    Demo {
        name: "2d-box-system",
        config: include_str!("../configs/2d-box-system.toml"),
        origin: &[0.1, -0.2],
    },
];

pub fn find(name: &str) -> Option<&'static Demo> {
    DEMOS.iter().find(|d| d.name == name)
}

pub fn names() -> Vec<&'static str> {
    DEMOS.iter().map(|d| d.name).collect()
}

impl Demo {
    pub fn run_config(&self) -> RunConfig {
        RunConfig::parse(self.config).expect("bundled demo config parses")
    }
}

pub struct DemoResult {
    pub field: SolutionField,
    pub table: Vec<CheckOutcome>,
}

impl DemoResult {
    pub fn passed(&self) -> bool {
        self.table.iter().all(|r| r.passed)
    }
}

fn relative_rows(
    label: &str,
    field: &SolutionField,
    exact: impl Fn(f64, &[f64]) -> f64,
    tol: f64,
) -> Vec<CheckOutcome> {
    let mut rows = Vec::new();
    for (ti, &t) in field.grid.times.iter().enumerate() {
        for (pi, x) in field.grid.points.iter().enumerate() {
            let u = field.value(ti, pi)[0];
            let e = exact(t, x);
            let err = if e == 0.0 { u.abs() } else { (u - e).abs() / e.abs() };
            rows.push(CheckOutcome::new(
                format!("{label} t={t} x={}", x[0]),
                err <= tol,
                format!("u = {u:.6}, exact = {e:.6}, rel err = {err:.2e} (tol {tol})"),
            ));
        }
    }
    rows
}

fn complementarity(triple: &BsvTriple) -> CheckOutcome {
    let n = triple.grid.n_steps();
    let mut checked = 0;
    let mut bad = 0;
    for p in 0..triple.n_paths {
        for i in 0..n {
            if triple.y_at(p, i)[0] > 1e-6 {
                checked += 1;
                if triple.u_at(p, i)[0] != 0.0 {
                    bad += 1;
                }
            }
        }
    }
    CheckOutcome::new(
        "complementarity",
        bad == 0,
        format!("U_i != 0 at {bad} of {checked} path-steps with Y_i > 1e-6"),
    )
}

/// Solves the demo, runs its checks and builds the table.
pub fn run_demo(demo: &Demo, cfg: &RunConfig, workers: usize) -> Result<DemoResult, DemoError> {
    let spec: ProblemSpec = cfg.problem().map_err(|e| DemoError::Config(e.to_string()))?;
    let grid = cfg.grid(&spec).map_err(|e| DemoError::Config(e.to_string()))?;
    let mc: McSettings = cfg.mc().map_err(|e| DemoError::Config(e.to_string()))?;
    let backend = cfg.backend().map_err(|e| DemoError::Config(e.to_string()))?;
    let opts = cfg.solver_options();
    let field = evaluate(&spec, &grid, &mc, &opts, backend, workers)?;
    let mut table = check_field(&spec, &field, &cfg.checks, &mc, &opts, workers)
        .map_err(DemoError::Config)?
        .outcomes;
    let (contract, triple) = discrete_contract(&spec, &mc, &opts, demo.origin)?;
    table.extend(contract);
    match demo.name {
        "heat" => table.extend(relative_rows("closed_form", &field, |t, x| x[0] * x[0] + 1.0 - t, 0.02)),
        "linear-generator" => {
            let decay = |t: f64, x: &[f64]| (-0.5 * (spec.horizon - t)).exp() * x[0];
            table.extend(relative_rows("explicit", &field, decay, 0.01));
            let implicit = SolverOptions {
                implicit: true,
                ..opts.clone()
            };
            let fi = evaluate(&spec, &grid, &mc, &implicit, backend, workers)?;
            table.extend(relative_rows("implicit", &fi, decay, 0.005));
        }
        "reflected-halfline" => {
            table.push(complementarity(&triple));
            for r in backend_agreement(&spec, &grid, &mc, &opts)? {
                let t = grid.times[r.ti];
                let x = grid.points[r.pi][0];
                table.push(CheckOutcome::new(
                    format!("agreement t={t} x={x}"),
                    r.ratio <= 3.0,
                    format!(
                        "regression {:.5}, lattice {:.5}, estimate {:.2e}, ratio {:.2}",
                        r.regression[0], r.lattice[0], r.estimate, r.ratio
                    ),
                ));
            }
        }
        _ => {}
    }
    Ok(DemoResult { field, table })
}

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Solver(#[from] FieldError),
}
