use super::*;
use crate::bsvi::{Generator, GeneratorKind, SolverOptions, TerminalFn, TerminalMap};
use crate::convex::ConvexFunction;
use crate::field::{evaluate_u, DeclaredConstants, FieldGrid, McSettings};
use crate::sde::{CoefficientField, Diffusion, Drift};

fn heat_spec(gen: Generator) -> ProblemSpec {
    ProblemSpec::new(
        1.0,
        CoefficientField::brownian(1, 1.0),
        gen,
        TerminalMap::new(vec![TerminalFn::Polynomial { axis: 0, coeffs: vec![0.0, 0.0, 1.0] }], 1).unwrap(),
        ConvexFunction::zero(1),
        &DeclaredConstants::default(),
    )
    .unwrap()
}

fn grid(times: &[f64], x0: f64, dx: f64, n: usize) -> FieldGrid {
    FieldGrid::new(times.to_vec(), (0..n).map(|i| vec![x0 + dx * i as f64]).collect())
}

fn index_of(field: &SolutionField, t: f64, x: f64) -> (usize, usize) {
    let ti = field.grid.times.iter().position(|&s| (s - t).abs() < 1e-12).unwrap();
    let pi = field.grid.points.iter().position(|p| (p[0] - x).abs() < 1e-12).unwrap();
    (ti, pi)
}

fn one() -> DirectionProbe {
    DirectionProbe::new(&[1.0]).unwrap()
}

#[test]
fn exact_quadratic_jet_any_radius() {
    let spec = heat_spec(Generator::zero(1, 1));
    let g = grid(&[0.25, 0.5, 0.75], -1.0, 0.25, 17);
    let f = SolutionField::from_fn(1, 1, g, |t, x| vec![x[0] * x[0] + 1.0 - t]);
    let (ti, pi) = index_of(&f, 0.5, 1.0);
    for r in [0.5, 1.0, 2.0] {
        let st = Stencil { n_time: 1, n_space: 100, radius: r };
        let fit = fit_jet(&spec, &f, ti, pi, &one(), &st).unwrap();
        assert!((fit.jet.p + 1.0).abs() < 1e-9);
        assert!((fit.jet.q[0] - 2.0).abs() < 1e-9);
        assert!((fit.jet.x[0] - 2.0).abs() < 1e-9);
        assert!(fit.jet.fit_residual < 1e-9);
        let res = supersolution_residual(&spec, &f, ti, pi, &one(), &fit.jet, &LimitSampler::default()).unwrap();
        assert!(res.abs() < 1e-9);
        let sub = subsolution_residual(&spec, &f, ti, pi, &one(), &fit.jet, &LimitSampler::default()).unwrap();
        assert_eq!(res, -sub);
    }
}

#[test]
fn constant_and_affine_fields() {
    let spec = heat_spec(Generator::zero(1, 1));
    let g = grid(&[0.0, 0.5, 0.9], -1.0, 0.5, 5);
    let st = Stencil::around(0.5, 1);
    let c = SolutionField::from_fn(1, 1, g.clone(), |_, _| vec![4.0]);
    let jet = fit_jet(&spec, &c, 1, 2, &one(), &st).unwrap().jet;
    assert!(jet.p.abs() < 1e-12 && jet.q[0].abs() < 1e-12 && jet.x[0].abs() < 1e-12);
    let a = SolutionField::from_fn(1, 1, g, |t, x| vec![2.0 - 3.0 * t + 0.5 * x[0]]);
    let jet = fit_jet(&spec, &a, 1, 2, &one(), &st).unwrap().jet;
    assert!((jet.p + 3.0).abs() < 1e-12 && (jet.q[0] - 0.5).abs() < 1e-12);
    assert!(jet.x[0].abs() < 1e-10 && jet.fit_residual < 1e-12);
}

#[test]
fn generator_mismatch_shows_in_residual() {
    let g = grid(&[0.25, 0.5, 0.75], -1.0, 0.25, 17);
    let f = SolutionField::from_fn(1, 1, g, |t, x| vec![x[0] * x[0] + 1.0 - t]);
    let wrong = heat_spec(Generator::new(GeneratorKind::Constant(vec![1.0]), 1, 1).unwrap());
    let (ti, pi) = index_of(&f, 0.5, 1.0);
    let fit = fit_jet(&wrong, &f, ti, pi, &one(), &Stencil::around(0.25, 1)).unwrap();
    let res = supersolution_residual(&wrong, &f, ti, pi, &one(), &fit.jet, &LimitSampler::default()).unwrap();
    assert!((res - 1.0).abs() < 1e-9);
}

#[test]
fn rank_deficient_stencil_is_rejected() {
    let spec = heat_spec(Generator::zero(1, 1));
    let f = SolutionField::from_fn(1, 1, grid(&[0.5], -1.0, 0.5, 5), |t, x| vec![x[0] + t]);
    assert!(matches!(
        fit_jet(&spec, &f, 0, 2, &one(), &Stencil::around(0.5, 1)),
        Err(ViscosityError::RankDeficient { .. })
    ));
    let f = SolutionField::from_fn(1, 1, grid(&[0.5, 1.0], -1.0, 0.5, 5), |t, x| vec![x[0] + t]);
    assert!(matches!(fit_jet(&spec, &f, 1, 2, &one(), &Stencil::around(0.5, 1)), Err(ViscosityError::Node { .. })));
    assert!(DirectionProbe::new(&[0.0]).is_err());
}

fn halfline_field(phi: ConvexFunction, u: impl Fn(f64, &[f64]) -> Vec<f64>) -> (ProblemSpec, SolutionField) {
    let spec = ProblemSpec::new(
        1.0,
        CoefficientField::brownian(1, 1.0),
        Generator::zero(1, 1),
        TerminalMap::new(vec![TerminalFn::PositivePart { axis: 0, strike: -5.0 }], 1).unwrap(),
        phi,
        &DeclaredConstants::default(),
    )
    .unwrap();
    let f = SolutionField::from_fn(1, 1, grid(&[0.25, 0.5, 0.75], 0.0, 0.25, 9), u);
    (spec, f)
}

#[test]
fn negated_direction_matches_subsolution_form() {
    for phi in [ConvexFunction::nonnegative_orthant(1), ConvexFunction::separable_abs(1)] {
        let (spec, f) = halfline_field(phi, |t, x| vec![1.0 + x[0] * x[0] + t]);
        let (ti, pi) = index_of(&f, 0.5, 1.0);
        let st = Stencil::around(0.25, 1);
        let z = one();
        let mz = DirectionProbe::new(&[-1.0]).unwrap();
        let s = LimitSampler::default();
        let jz = fit_jet(&spec, &f, ti, pi, &z, &st).unwrap().jet;
        let jm = fit_jet(&spec, &f, ti, pi, &mz, &st).unwrap().jet;
        let sup = supersolution_residual(&spec, &f, ti, pi, &z, &jz, &s).unwrap();
        let sub = subsolution_residual(&spec, &f, ti, pi, &mz, &jm, &s).unwrap();
        assert!((sup - sub).abs() < 1e-9, "{sup} {sub}");
    }
}

#[test]
fn contact_point_sign_and_abstention() {
    // u = ((x - 1)^+)^2 vanishes on x <= 1, a C^1 free boundary at x = 1
    let (spec, f) = halfline_field(ConvexFunction::nonnegative_orthant(1), |_, x| {
        let v = (x[0] - 1.0).max(0.0);
        vec![v * v]
    });
    let (ti, pi) = index_of(&f, 0.5, 0.5);
    let mz = DirectionProbe::new(&[-1.0]).unwrap();
    let jet = fit_jet(&spec, &f, ti, pi, &mz, &Stencil::around(0.25, 1)).unwrap().jet;
    let s = LimitSampler::default();
    // phi'_*(0; -1) = 0 on the half-line, so the residual is the operator
    // value of the jet of -u
    let sup = supersolution_residual(&spec, &f, ti, pi, &mz, &jet, &s).unwrap();
    assert!(sup >= 0.0);
    let cfg = SweepConfig::new(Stencil::around(0.25, 1));
    let row = check_node(&spec, &f, ti, pi, &mz, &cfg).unwrap();
    assert_eq!(row.flag, Flag::Abstain);
    let (ti, pi) = index_of(&f, 0.5, 1.0);
    assert_eq!(check_node(&spec, &f, ti, pi, &one(), &cfg).unwrap().flag, Flag::Abstain);
}

#[test]
fn sweep_on_heat_field_and_injected_fault() {
    let spec = heat_spec(Generator::zero(1, 1));
    let g = grid(&[0.0, 0.125, 0.25, 0.375, 0.5, 0.625], -2.0, 0.25, 17);
    let mc = McSettings { n_paths: 4000, ..McSettings::default() };
    let mut f = evaluate_u(&spec, &g, &mc, &SolverOptions::default(), crate::bsvi::Backend::Regression).unwrap();
    let mut nodes = Vec::new();
    for &t in &[0.0, 0.25, 0.5] {
        for &x in &[-1.0, 0.0, 1.0] {
            nodes.push(index_of(&f, t, x));
        }
    }
    let cfg = SweepConfig::new(Stencil::around(0.25, 1));
    let dirs = probe_directions(1, 3);
    assert_eq!(dirs.len(), 4);
    let rep = sweep(&spec, &f, &nodes, &dirs, &cfg).unwrap();
    assert_eq!(rep.rows.len(), 36);
    assert!(rep.passed(), "{:?}", rep.rows.iter().filter(|r| r.flag != Flag::Ok).collect::<Vec<_>>());
    for r in &rep.rows {
        assert!(r.res_super.abs() <= r.tau && r.res_sub.abs() <= r.tau);
    }

    let (ti, pi) = index_of(&f, 0.25, 1.0);
    f.value_mut(ti, pi)[0] += 0.1;
    let rep = sweep(&spec, &f, &nodes, &dirs, &cfg).unwrap();
    assert!(rep.flagged_nodes().contains(&(ti, pi)), "{:?}", rep.flagged_nodes());

    let empty = sweep(&spec, &f, &[], &dirs, &cfg).unwrap();
    assert!(empty.rows.is_empty() && empty.passed());
}

#[test]
fn drift_and_diffusion_enter_the_operator() {
    let spec = ProblemSpec::new(
        1.0,
        CoefficientField::new(1, Drift::Constant(vec![0.5]), Diffusion::Constant(vec![2.0])).unwrap(),
        Generator::zero(1, 1),
        TerminalMap::new(vec![TerminalFn::Polynomial { axis: 0, coeffs: vec![0.0, 0.0, 1.0] }], 1).unwrap(),
        ConvexFunction::zero(1),
        &DeclaredConstants::default(),
    )
    .unwrap();
    let jet = Jet { p: -1.0, q: vec![2.0], x: vec![3.0], fit_residual: 0.0 };
    let v = operator_value(&spec, 0.0, &[0.0], &[0.0], &[1.0], &jet);
    assert!((v - (-1.0 + 0.5 * 4.0 * 3.0 + 0.5 * 2.0)).abs() < 1e-15);
}
