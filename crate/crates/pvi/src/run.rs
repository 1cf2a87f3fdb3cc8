//! Parallel field evaluation and the check suite shared by the commands.

use rayon::prelude::*;
use serde::Serialize;

use pvi_core::bsvi::{flatness_check, solve, Backend, BsvTriple, SolverOptions};
use pvi_core::convex::{DirectionSet, PROX_TOL};
use pvi_core::field::{
    assemble, domain_check, evaluate_node, evaluate_u, growth_check, markov_consistency_check,
    terminal_identity_check, FieldError, FieldGrid, McSettings, ProblemSpec, SolutionField,
};
use pvi_core::rng::derive_seed;
use pvi_core::sde::simulate;
use pvi_core::viscosity::{probe_directions, sweep, Stencil, SweepConfig, SweepReport, ViscosityError};
use pvi_core::ConvexFunction;

use crate::config::ChecksCfg;

pub fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Same result as [`evaluate_u`], with regression nodes spread over
/// `workers` threads. Node order, seeds and therefore output bits do not
/// depend on the worker count.
pub fn evaluate(
    spec: &ProblemSpec,
    grid: &FieldGrid,
    mc: &McSettings,
    opts: &SolverOptions,
    backend: Backend,
    workers: usize,
) -> Result<SolutionField, FieldError> {
    if backend == Backend::Lattice || workers <= 1 {
        return evaluate_u(spec, grid, mc, opts, backend);
    }
    grid.validate(spec)?;
    if mc.n_paths < mc.batches.max(1) {
        return Err(FieldError::Grid(format!("{} paths cannot fill {} batches", mc.n_paths, mc.batches)));
    }
    let np = grid.points.len();
    let nodes = pool(workers).install(|| {
        (0..grid.n_nodes())
            .into_par_iter()
            .map(|i| evaluate_node(spec, grid, mc, opts, i / np, i % np))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(assemble(spec, grid, mc, opts, nodes))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

pub fn print_table(title: &str, rows: &[CheckOutcome]) {
    let w = rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    println!("{title}");
    println!("  {:<w$}  {:<6}  detail", "check", "result");
    for r in rows {
        println!("  {:<w$}  {:<6}  {}", r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail);
    }
}

fn node_list(field: &SolutionField, nodes: &[(usize, usize)]) -> String {
    let shown: Vec<String> = nodes
        .iter()
        .take(8)
        .map(|&(ti, pi)| format!("(t = {}, x = {:?})", field.grid.times[ti], field.grid.points[pi]))
        .collect();
    let more = if nodes.len() > 8 { format!(" and {} more", nodes.len() - 8) } else { String::new() };
    format!("{}{more}", shown.join(", "))
}

/// Nodes with `t < T` that have grid neighbours on both sides along every
/// axis.
pub fn interior_nodes(spec: &ProblemSpec, field: &SolutionField) -> Vec<(usize, usize)> {
    let pts = &field.grid.points;
    let inside: Vec<usize> = (0..pts.len())
        .filter(|&pi| {
            (0..field.d).all(|a| {
                let v = pts[pi][a];
                pts.iter().any(|p| p[a] < v) && pts.iter().any(|p| p[a] > v)
            })
        })
        .collect();
    let mut out = Vec::new();
    for (ti, &t) in field.grid.times.iter().enumerate() {
        if t < spec.horizon {
            out.extend(inside.iter().map(|&pi| (ti, pi)));
        }
    }
    out
}

/// Smallest positive gap between distinct coordinates along any axis.
pub fn grid_spacing(field: &SolutionField) -> Option<f64> {
    let mut best = f64::INFINITY;
    for a in 0..field.d {
        let mut c: Vec<f64> = field.grid.points.iter().map(|p| p[a]).collect();
        c.sort_by(f64::total_cmp);
        for w in c.windows(2) {
            let g = w[1] - w[0];
            if g > 0.0 && g < best {
                best = g;
            }
        }
    }
    best.is_finite().then_some(best)
}

fn lookup(field: &SolutionField, node: &[f64]) -> Option<(usize, usize)> {
    let ti = field.grid.times.iter().position(|&t| (t - node[0]).abs() <= 1e-12)?;
    let pi = field
        .grid
        .points
        .iter()
        .position(|p| p.len() == node.len() - 1 && p.iter().zip(&node[1..]).all(|(a, b)| (a - b).abs() <= 1e-12))?;
    Some((ti, pi))
}

/// Viscosity sweep with nodes spread over the pool; rows stay node-major.
pub fn viscosity_sweep(
    spec: &ProblemSpec,
    field: &SolutionField,
    nodes: &[(usize, usize)],
    dirs: &DirectionSet,
    cfg: &SweepConfig,
    workers: usize,
) -> Result<SweepReport, ViscosityError> {
    let parts = pool(workers).install(|| {
        nodes
            .par_iter()
            .map(|&n| sweep(spec, field, &[n], dirs, cfg))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let mut rep = SweepReport {
        rows: Vec::new(),
        directions: dirs.iter().cloned().collect(),
    };
    for p in parts {
        rep.directions = p.directions;
        rep.rows.extend(p.rows);
    }
    Ok(rep)
}

pub struct FieldChecks {
    pub outcomes: Vec<CheckOutcome>,
    pub sweep: Option<SweepReport>,
}

impl FieldChecks {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }
}

/// Terminal identity and domain membership always; growth, Markov
/// consistency and the viscosity sweep when configured.
pub fn check_field(
    spec: &ProblemSpec,
    field: &SolutionField,
    checks: &ChecksCfg,
    mc: &McSettings,
    opts: &SolverOptions,
    workers: usize,
) -> Result<FieldChecks, String> {
    let mut out = Vec::new();
    let bad = terminal_identity_check(spec, field);
    let n_term = field.grid.times.iter().filter(|&&t| t >= spec.horizon).count() * field.grid.points.len();
    out.push(CheckOutcome::new(
        "terminal_identity",
        bad.is_empty(),
        if bad.is_empty() {
            format!("{n_term} terminal nodes equal h")
        } else {
            format!("u != h at {}", node_list(field, &bad))
        },
    ));
    let bad = domain_check(spec, field);
    out.push(CheckOutcome::new(
        "domain",
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} nodes in Dom(phi)", field.grid.n_nodes())
        } else {
            format!("outside Dom(phi) at {}", node_list(field, &bad))
        },
    ));
    if let Some(g) = &checks.growth {
        let rep = growth_check(field, g.p).map_err(|e| e.to_string())?;
        let bound = g.bound;
        out.push(CheckOutcome::new(
            "growth",
            rep.passed(bound),
            format!(
                "max |u|/(1+|x|^{}) = {:.6}{}, per decade {:?}{}",
                g.p,
                rep.constant,
                bound.map_or(String::new(), |b| format!(" (bound {b})")),
                rep.per_decade.iter().map(|(d, r)| (*d, (r * 1e6).round() / 1e6)).collect::<Vec<_>>(),
                if rep.trending_up { ", trending up" } else { "" }
            ),
        ));
    }
    if let Some(m) = &checks.markov {
        let mmc = McSettings {
            n_paths: m.paths,
            seed: derive_seed(mc.seed, &[0x3A4C]),
            ..mc.clone()
        };
        let rep = markov_consistency_check(spec, field, (m.origin_t, &m.origin_x), m.s, &mmc, opts)
            .map_err(|e| e.to_string())?;
        out.push(CheckOutcome::new(
            "markov_consistency",
            rep.passed(m.factor),
            format!(
                "mean |Y_s - u(s, X_s)| = {:.3e}, error bar {:.3e}, ratio {:.3} (limit {}), {} paths, {} outside the grid",
                rep.mean_discrepancy, rep.error_bar, rep.ratio, m.factor, rep.paths_used, rep.paths_outside
            ),
        ));
    }
    let mut report = None;
    if let Some(v) = &checks.viscosity {
        let nodes = if v.nodes.is_empty() {
            interior_nodes(spec, field)
        } else {
            v.nodes
                .iter()
                .map(|n| lookup(field, n).ok_or_else(|| format!("viscosity probe node {n:?} is not a field node")))
                .collect::<Result<Vec<_>, _>>()?
        };
        let spacing = match v.spacing.or_else(|| grid_spacing(field)) {
            Some(s) => s,
            None => return Err(String::from("viscosity check needs at least two distinct points")),
        };
        let mut cfg = SweepConfig::new(Stencil::around(spacing, field.d));
        cfg.tau = v.tau;
        let dirs = probe_directions(field.k, v.direction_seed);
        let rep = viscosity_sweep(spec, field, &nodes, &dirs, &cfg, workers).map_err(|e| e.to_string())?;
        let flagged = rep.flagged_nodes();
        let worst = rep
            .rows
            .iter()
            .filter(|r| r.flag == pvi_core::viscosity::Flag::Ok)
            .map(|r| r.res_super.abs().max(r.res_sub.abs()) / r.tau)
            .fold(0.0f64, f64::max);
        out.push(CheckOutcome::new(
            "viscosity",
            flagged.is_empty(),
            if flagged.is_empty() {
                format!(
                    "{} rows: {} ok, {} abstain; max |res|/tau = {worst:.3}",
                    rep.rows.len(),
                    rep.count(pvi_core::viscosity::Flag::Ok),
                    rep.count(pvi_core::viscosity::Flag::Abstain)
                )
            } else {
                format!("flagged {}", node_list(field, &flagged))
            },
        ));
        report = Some(rep);
    }
    Ok(FieldChecks { outcomes: out, sweep: report })
}

/// Path-level contract from one origin: `Y_i in Dom(phi)` on every
/// path-step, finite mean `phi(Y_i)`, flatness of `(Y_i, U_i)`, and the
/// `phi = 0` scheme reproducing the prox-free scheme bit for bit.
pub fn discrete_contract(
    spec: &ProblemSpec,
    mc: &McSettings,
    opts: &SolverOptions,
    x0: &[f64],
) -> Result<(Vec<CheckOutcome>, BsvTriple), FieldError> {
    let tg = mc.grid_from(0.0, spec.horizon)?;
    let ens = simulate(&spec.coeffs, x0, tg, mc.n_paths, derive_seed(mc.seed, &[0xC0DE]), mc.sampling())
        .map_err(|e| FieldError::Solver(e.into()))?;
    let triple = solve(&ens, &spec.gen, &spec.term, &spec.phi, opts)?;
    let dirs = DirectionSet::new(spec.k, 2 * spec.k, mc.seed);
    let rep = flatness_check(&triple, &spec.phi, PROX_TOL, &dirs);
    let mut out = vec![
        CheckOutcome::new(
            "path_domain",
            rep.domain_violations == 0,
            format!("{} of {} path-steps outside Dom(phi)", rep.domain_violations, rep.checked),
        ),
        CheckOutcome::new(
            "mean_phi_finite",
            rep.mean_phi.is_finite(),
            format!("mean phi(Y_i) = {:?}", rep.mean_phi),
        ),
        CheckOutcome::new(
            "flatness",
            rep.passed(),
            format!("(Y_i, U_i) in d phi: {} violations of {}", rep.violations, rep.checked),
        ),
    ];
    let zero = ConvexFunction::zero(spec.k);
    let with = solve(&ens, &spec.gen, &spec.term, &zero, opts)?;
    let without = solve(
        &ens,
        &spec.gen,
        &spec.term,
        &zero,
        &SolverOptions {
            apply_prox: false,
            ..opts.clone()
        },
    )?;
    let same = with.y == without.y && with.z == without.z && with.u == without.u;
    out.push(CheckOutcome::new(
        "zero_phi_identity",
        same,
        if same { "phi = 0 scheme equals the prox-free scheme bit for bit" } else { "phi = 0 scheme differs from the prox-free scheme" },
    ));
    Ok((out, triple))
}

#[cfg(test)]
mod tests {
    use super::*;
    use pvi_core::bsvi::{Generator, TerminalFn, TerminalMap};
    use pvi_core::field::DeclaredConstants;
    use pvi_core::sde::CoefficientField;

    fn heat() -> ProblemSpec {
        ProblemSpec::new(
            1.0,
            CoefficientField::brownian(1, 1.0),
            Generator::zero(1, 1),
            TerminalMap::new(vec![TerminalFn::Polynomial { axis: 0, coeffs: vec![0.0, 0.0, 1.0] }], 1).unwrap(),
            ConvexFunction::zero(1),
            &DeclaredConstants::default(),
        )
        .unwrap()
    }

    #[test]
    fn worker_count_does_not_change_bits() {
        let spec = heat();
        let g = FieldGrid::new(vec![0.0, 0.5, 1.0], vec![vec![-1.0], vec![0.0], vec![1.0]]);
        let mc = McSettings { n_paths: 500, n_steps: 10, ..McSettings::default() };
        let opts = SolverOptions::default();
        let a = evaluate(&spec, &g, &mc, &opts, Backend::Regression, 1).unwrap();
        let b = evaluate(&spec, &g, &mc, &opts, Backend::Regression, 4).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.stderr, b.stderr);
    }

    #[test]
    fn interior_nodes_skip_edges_and_terminal_row() {
        let spec = heat();
        let g = FieldGrid::new(vec![0.0, 1.0], (0..5).map(|i| vec![i as f64]).collect());
        let f = SolutionField::from_fn(1, 1, g, |_, _| vec![0.0]);
        assert_eq!(interior_nodes(&spec, &f), vec![(0, 1), (0, 2), (0, 3)]);
        assert_eq!(grid_spacing(&f), Some(1.0));
        assert_eq!(lookup(&f, &[1.0, 3.0]), Some((1, 3)));
        assert_eq!(lookup(&f, &[0.5, 3.0]), None);
    }

    #[test]
    fn terminal_mismatch_is_named() {
        let spec = heat();
        let g = FieldGrid::new(vec![0.5, 1.0], vec![vec![0.0], vec![1.0]]);
        let mut f = SolutionField::from_fn(1, 1, g, |t, x| vec![x[0] * x[0] + 1.0 - t]);
        let mc = McSettings::default();
        let ok = check_field(&spec, &f, &ChecksCfg::default(), &mc, &SolverOptions::default(), 1).unwrap();
        assert!(ok.passed());
        f.value_mut(1, 1)[0] += 1e-3;
        let bad = check_field(&spec, &f, &ChecksCfg::default(), &mc, &SolverOptions::default(), 1).unwrap();
        assert!(!bad.passed());
        assert!(bad.outcomes[0].name == "terminal_identity" && !bad.outcomes[0].passed);
        assert!(bad.outcomes[0].detail.contains("x = [1.0]"), "{}", bad.outcomes[0].detail);
    }

    #[test]
    fn discrete_contract_on_heat() {
        let mc = McSettings { n_paths: 200, n_steps: 10, ..McSettings::default() };
        let (rows, _) = discrete_contract(&heat(), &mc, &SolverOptions::default(), &[0.0]).unwrap();
        assert!(rows.iter().all(|r| r.passed), "{rows:?}");
    }
}
