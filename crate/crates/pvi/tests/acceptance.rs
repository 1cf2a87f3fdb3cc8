//! Acceptance criteria, one PASS/FAIL line each. Runs without the test
//! harness so the lines always reach the output.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use pvi::config::RunConfig;
use pvi::csvio::field_to_string;
use pvi::demos::{self, DEMOS};
use pvi::run::{check_field, discrete_contract, evaluate, interior_nodes};
use pvi_core::bsvi::{Backend, SolverOptions};
use pvi_core::convex::laws::{builtin_registry, run_law_suite, LawConfig};
use pvi_core::convex::PROX_TOL;
use pvi_core::field::{
    backend_agreement, domain_check, growth_check, markov_consistency_check, FieldGrid, McSettings, ProblemSpec,
    SolutionField,
};
use pvi_core::rng::derive_seed;
use pvi_core::viscosity::{probe_directions, sweep, Flag, Stencil, SweepConfig};
use pvi_core::{ConvexFunction, ExtendedReal};

const SEED: u64 = 20240611;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn bundled(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{name}.toml"));
    RunConfig::load(&path).expect("bundled config")
}

struct Problem {
    spec: ProblemSpec,
    grid: FieldGrid,
    mc: McSettings,
    opts: SolverOptions,
}

fn problem(cfg: &RunConfig) -> Problem {
    let spec = cfg.problem().unwrap();
    let grid = cfg.grid(&spec).unwrap();
    Problem {
        mc: cfg.mc().unwrap(),
        opts: cfg.solver_options(),
        spec,
        grid,
    }
}

fn timed(limit: Duration, o: Outcome, start: Instant) -> Outcome {
    let el = start.elapsed();
    let ok = el <= limit;
    outcome(
        o.passed && ok,
        format!("{}; {:.1} s (limit {} s)", o.detail, el.as_secs_f64(), limit.as_secs()),
    )
}

fn law_suite() -> Outcome {
    let start = Instant::now();
    let cfg = LawConfig {
        samples: 1000,
        seed: SEED,
        tol: 1e-6,
        ..LawConfig::default()
    };
    let mut bad = Vec::new();
    let mut kinds = 0;
    for (name, f) in builtin_registry() {
        kinds += 1;
        let rep = run_law_suite(&name, &f, &cfg);
        for o in rep.outcomes.iter().filter(|o| !o.passed()) {
            bad.push(format!("{name}/{}: {:?}", o.law.name(), o.first_violation));
        }
    }
    timed(
        Duration::from_secs(10),
        outcome(bad.is_empty(), format!("{kinds} functions x 1000 samples, violations: {bad:?}")),
        start,
    )
}

/// Independent scalar `phi` for the brute-force scan.
fn phi_scalar(kind: usize, u: f64) -> f64 {
    match kind {
        0 => u.abs(),
        1 => {
            if (0.0..=1.0).contains(&u) {
                0.0
            } else {
                f64::INFINITY
            }
        }
        _ => 1.5 * u * u,
    }
}

/// `u*` is a subgradient iff no test point beats the affine minorant.
fn brute_member(kind: usize, u: f64, us: f64, probes: &[f64]) -> bool {
    let fu = phi_scalar(kind, u);
    probes.iter().all(|&v| {
        let fv = phi_scalar(kind, v);
        fv >= fu + us * (v - u) - 1e-13 * (1.0 + fu.abs() + (us * (v - u)).abs())
    })
}

fn interval_scan() -> Outcome {
    let start = Instant::now();
    let funcs = [
        ConvexFunction::separable_abs(1),
        ConvexFunction::indicator_box(vec![0.0], vec![1.0]).unwrap(),
        ConvexFunction::quadratic(1, vec![3.0]).unwrap(),
    ];
    let ustar: Vec<f64> = (0..1000).map(|i| -5.0 + 10.0 * i as f64 / 999.0).collect();
    let tol = 1e-6;
    let mut disagreements = Vec::new();
    for (kind, f) in funcs.iter().enumerate() {
        for s in 0..100 {
            // every tenth sample sits on a kink or an endpoint
            let u = match (kind, s % 10) {
                (0, 0) => 0.0,
                (1, 0) => 0.0,
                (1, 5) => 1.0,
                (1, _) => s as f64 / 100.0,
                _ => -2.0 + 4.0 * (s as f64 + 0.5) / 100.0,
            };
            let mut probes: Vec<f64> = (0..=4000).map(|i| -10.0 + 20.0 * i as f64 / 4000.0).collect();
            for m in 1..=7 {
                let e = 10f64.powi(-m);
                probes.extend([u - e, u + e, u - 3.0 * e, u + 3.0 * e]);
            }
            let (lo, hi) = f.subdiff_interval_1d(u).unwrap();
            let (lo, hi) = (ext(lo), ext(hi));
            for &us in &ustar {
                let inside = us >= lo - tol && us <= hi + tol;
                let near_end = (us - lo).abs() <= tol || (us - hi).abs() <= tol;
                if inside != brute_member(kind, u, us, &probes) && !near_end {
                    disagreements.push(format!("{} u={u} u*={us}", f.name()));
                }
            }
        }
    }
    timed(
        Duration::from_secs(5),
        outcome(
            disagreements.is_empty(),
            format!("3 kinds x 100 u x 1000 u*, disagreements {:?}", disagreements.iter().take(5).collect::<Vec<_>>()),
        ),
        start,
    )
}

fn ext(v: ExtendedReal) -> f64 {
    match v {
        ExtendedReal::Finite(x) => x,
        ExtendedReal::PosInf => f64::INFINITY,
        ExtendedReal::NegInf => f64::NEG_INFINITY,
    }
}

fn max_rel(field: &SolutionField, exact: impl Fn(f64, f64) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for (ti, &t) in field.grid.times.iter().enumerate() {
        for (pi, x) in field.grid.points.iter().enumerate() {
            let e = exact(t, x[0]);
            let u = field.value(ti, pi)[0];
            worst = worst.max(if e == 0.0 { u.abs() } else { (u - e).abs() / e.abs() });
        }
    }
    worst
}

fn heat_feynman_kac() -> Outcome {
    let start = Instant::now();
    let p = problem(&bundled("heat"));
    let ok = p.grid.n_nodes() == 9 && p.mc.n_paths == 10_000 && p.mc.n_steps == 50;
    let f = evaluate(&p.spec, &p.grid, &p.mc, &p.opts, Backend::Regression, 1).unwrap();
    let worst = max_rel(&f, |t, x| x * x + 1.0 - t);
    timed(
        Duration::from_secs(60),
        outcome(ok && worst <= 0.02, format!("9 nodes, max relative error {worst:.2e} (tol 2e-2)")),
        start,
    )
}

fn linear_generator() -> Outcome {
    let start = Instant::now();
    let p = problem(&bundled("linear-generator"));
    let exact = |t: f64, x: f64| (-0.5 * (1.0 - t)).exp() * x;
    let ex = evaluate(&p.spec, &p.grid, &p.mc, &p.opts, Backend::Regression, 1).unwrap();
    let im_opts = SolverOptions {
        implicit: true,
        ..p.opts.clone()
    };
    let im = evaluate(&p.spec, &p.grid, &p.mc, &im_opts, Backend::Regression, 1).unwrap();
    let (e1, e2) = (max_rel(&ex, exact), max_rel(&im, exact));
    timed(
        Duration::from_secs(30),
        outcome(
            p.mc.n_steps == 100 && e1 <= 0.01 && e2 <= 0.005,
            format!("explicit max rel err {e1:.2e} (tol 1e-2), implicit {e2:.2e} (tol 5e-3)"),
        ),
        start,
    )
}

fn reflected_halfline() -> Outcome {
    let start = Instant::now();
    let p = problem(&bundled("reflected-halfline"));
    let rows = backend_agreement(&p.spec, &p.grid, &p.mc, &p.opts).unwrap();
    let worst = rows.iter().map(|r| r.ratio).fold(0.0f64, f64::max);
    let (checks, triple) = discrete_contract(&p.spec, &p.mc, &p.opts, &[1.0]).unwrap();
    let flat = checks.iter().find(|c| c.name == "flatness").unwrap();
    let mut slack = 0;
    let mut positive = 0;
    for path in 0..triple.n_paths {
        for i in 0..triple.grid.n_steps() {
            if triple.y_at(path, i)[0] > 1e-6 {
                positive += 1;
                if triple.u_at(path, i)[0] != 0.0 {
                    slack += 1;
                }
            }
        }
    }
    timed(
        Duration::from_secs(120),
        outcome(
            rows.len() == 9 && worst <= 3.0 && flat.passed && slack == 0,
            format!(
                "max |reg - lat| / estimate {worst:.2} over {} nodes (limit 3); {} (tol {PROX_TOL:e}); U != 0 at {slack} of {positive} steps with Y > 1e-6",
                rows.len(),
                flat.detail
            ),
        ),
        start,
    )
}

fn discrete_contract_all() -> Outcome {
    let mut bad = Vec::new();
    let mut rows = 0;
    for d in &DEMOS {
        let p = problem(&d.run_config());
        let (checks, _) = discrete_contract(&p.spec, &p.mc, &p.opts, d.origin).unwrap();
        for c in checks.iter().filter(|c| ["path_domain", "mean_phi_finite", "zero_phi_identity"].contains(&c.name.as_str())) {
            rows += 1;
            if !c.passed {
                bad.push(format!("{}: {} {}", d.name, c.name, c.detail));
            }
        }
    }
    outcome(bad.is_empty() && rows == 3 * DEMOS.len(), format!("{} demos, failures {bad:?}", DEMOS.len()))
}

fn heat_checks_field() -> (Problem, SolutionField) {
    let p = problem(&bundled("heat-checks"));
    let f = evaluate(&p.spec, &p.grid, &p.mc, &p.opts, Backend::Regression, 1).unwrap();
    (p, f)
}

fn markov(p: &Problem, f: &SolutionField) -> Outcome {
    let start = Instant::now();
    let mc = McSettings {
        n_paths: 1000,
        seed: derive_seed(SEED, &[0x3A4C]),
        ..p.mc.clone()
    };
    let r = markov_consistency_check(&p.spec, f, (0.0, &[0.0]), 0.5, &mc, &p.opts).unwrap();
    timed(
        Duration::from_secs(60),
        outcome(
            r.passed(3.0) && r.paths_used + r.paths_outside == 1000,
            format!(
                "mean discrepancy {:.3e}, error bar {:.3e} (field {:.1e}, interpolation {:.1e}, solve {:.1e}), ratio {:.2} (limit 3)",
                r.mean_discrepancy, r.error_bar, r.field_error, r.interpolation_error, r.solve_error, r.ratio
            ),
        ),
        start,
    )
}

fn domain_and_growth(fields: &[(&ProblemSpec, &SolutionField)]) -> Outcome {
    let mut nodes = 0;
    let mut outside = 0;
    for (spec, f) in fields {
        nodes += f.grid.n_nodes();
        outside += domain_check(spec, f).len();
    }
    let p = problem(&bundled("heat-growth"));
    let f = evaluate(&p.spec, &p.grid, &p.mc, &p.opts, Backend::Lattice, 1).unwrap();
    let g = growth_check(&f, 2).unwrap();
    let bound = (1.0 + p.spec.horizon) * 1.05;
    outcome(
        outside == 0 && g.passed(Some(bound)),
        format!(
            "{outside} of {nodes} nodes outside Dom(phi); lattice growth constant {:.4} over |x| in {{1, 10, 100}} (bound {bound})",
            g.constant
        ),
    )
}

fn reflected_lattice_field() -> (ProblemSpec, SolutionField) {
    let cfg = bundled("reflected-halfline");
    let spec = cfg.problem().unwrap();
    let grid = FieldGrid::new(
        vec![0.0, 0.125, 0.25, 0.375, 0.5, 0.625],
        (0..=24).map(|i| vec![-1.0 + 0.125 * i as f64]).collect(),
    );
    let mc = McSettings {
        n_steps: 200,
        ..cfg.mc().unwrap()
    };
    let f = evaluate(&spec, &grid, &mc, &cfg.solver_options(), Backend::Lattice, 1).unwrap();
    (spec, f)
}

fn viscosity(p: &Problem, f: &SolutionField) -> Outcome {
    let start = Instant::now();
    let find = |t: f64, x: f64| {
        let ti = f.grid.times.iter().position(|&s| s == t).unwrap();
        let pi = f.grid.points.iter().position(|y| y[0] == x).unwrap();
        (ti, pi)
    };
    let mut nodes = Vec::new();
    for t in [0.0, 0.25, 0.5] {
        for x in [-1.0, 0.0, 1.0] {
            nodes.push(find(t, x));
        }
    }
    let cfg = SweepConfig::new(Stencil::around(0.25, 1));
    let dirs = probe_directions(1, SEED);
    let rep = sweep(&p.spec, f, &nodes, &dirs, &cfg).unwrap();
    let within = rep
        .rows
        .iter()
        .all(|r| r.flag == Flag::Ok && r.res_super.abs() <= r.tau && r.res_sub.abs() <= r.tau);
    let worst = rep.rows.iter().map(|r| r.res_super.abs().max(r.res_sub.abs()) / r.tau).fold(0.0f64, f64::max);

    let mut faulty = f.clone();
    let target = find(0.25, 0.0);
    faulty.value_mut(target.0, target.1)[0] += 0.1;
    let caught = sweep(&p.spec, &faulty, &nodes, &dirs, &cfg).unwrap().flagged_nodes().contains(&target);

    let (rspec, rf) = reflected_lattice_field();
    let rnodes = interior_nodes(&rspec, &rf);
    let rrep = sweep(&rspec, &rf, &rnodes, &dirs, &SweepConfig::new(Stencil::around(0.125, 1))).unwrap();
    let mut strict = 0;
    let mut strict_bad = Vec::new();
    let mut abstained = 0;
    let mut contact_flagged = 0;
    for r in &rrep.rows {
        let u = rf.value(r.ti, r.pi)[0];
        if u > 0.1 && r.flag != Flag::Abstain {
            strict += 1;
            if !(r.res_super.abs() <= r.tau && r.res_sub.abs() <= r.tau) || r.flag.flagged() {
                strict_bad.push(format!("t={} x={:?} {:?} {:.2e} {:.2e} tau {:.2e}", r.t, r.x, r.flag, r.res_super, r.res_sub, r.tau));
            }
        }
        if r.flag == Flag::Abstain {
            abstained += 1;
        }
        if u <= 0.1 && r.flag.flagged() {
            contact_flagged += 1;
        }
    }
    let ok = rep.rows.len() == 36 && within && caught && strict > 0 && strict_bad.is_empty() && abstained > 0 && contact_flagged == 0;
    timed(
        Duration::from_secs(60),
        outcome(
            ok,
            format!(
                "heat: {} rows, max |res|/tau {worst:.3}, fault flagged {caught}; reflected: {strict} interior rows, failures {:?}, {abstained} abstentions, {contact_flagged} contact rows flagged",
                rep.rows.len(),
                strict_bad.iter().take(3).collect::<Vec<_>>()
            ),
        ),
        start,
    )
}

fn determinism() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_pvi");
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for (i, workers) in [None, None, Some(1), Some(8)].into_iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        std::fs::create_dir(&out).unwrap();
        let mut cmd = Command::new(exe);
        cmd.args(["demo", "heat", "--out"]).arg(&out);
        if let Some(w) = workers {
            cmd.args(["--workers", &w.to_string()]);
        }
        let st = cmd.output().unwrap();
        if !st.status.success() {
            return outcome(false, format!("run {i} exited with {:?}", st.status.code()));
        }
        files.push(std::fs::read(out.join("field.csv")).unwrap());
    }
    let same = files.windows(2).all(|w| w[0] == w[1]);
    outcome(same, format!("4 runs of `demo heat` (twice default, --workers 1, --workers 8): identical = {same}"))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "convex law suite", law_suite()));
    results.push((2, "subdifferential interval", interval_scan()));
    results.push((3, "heat Feynman-Kac", heat_feynman_kac()));
    results.push((4, "linear generator", linear_generator()));
    results.push((5, "reflected half-line", reflected_halfline()));
    results.push((6, "discrete contract on demos", discrete_contract_all()));
    let (hp, hf) = heat_checks_field();
    results.push((7, "Markov consistency", markov(&hp, &hf)));
    let demo_fields: Vec<(ProblemSpec, SolutionField)> = DEMOS
        .iter()
        .map(|d| {
            let p = problem(&d.run_config());
            let backend = d.run_config().backend().unwrap();
            let f = evaluate(&p.spec, &p.grid, &p.mc, &p.opts, backend, 1).unwrap();
            (p.spec, f)
        })
        .collect();
    let mut pairs: Vec<(&ProblemSpec, &SolutionField)> = demo_fields.iter().map(|(s, f)| (s, f)).collect();
    pairs.push((&hp.spec, &hf));
    results.push((8, "domain and growth", domain_and_growth(&pairs)));
    results.push((9, "viscosity residuals", viscosity(&hp, &hf)));
    results.push((10, "determinism", determinism()));

    // demo tables and CSV output must agree with the library path
    let heat = demos::find("heat").unwrap();
    let lib = demos::run_demo(heat, &heat.run_config(), 1).unwrap();
    assert_eq!(field_to_string(&lib.field), field_to_string(&demo_fields[0].1));
    let direct = check_field(&hp.spec, &hf, &bundled("heat-checks").checks, &hp.mc, &hp.opts, 1).unwrap();
    assert!(direct.passed());

    let mut failed = 0;
    for (n, name, o) in &results {
        println!("criterion {n:>2} {name}: {} - {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
