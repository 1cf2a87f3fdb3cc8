use super::*;
use crate::bsvi::{GeneratorKind, TerminalFn};

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

fn points(xs: &[f64]) -> Vec<Vec<f64>> {
    xs.iter().map(|&x| vec![x]).collect()
}

#[test]
fn heat_field_matches_closed_form() {
    let spec = heat();
    let grid = FieldGrid::new(vec![0.0, 0.25, 0.5, 1.0], points(&[-1.0, 0.0, 1.0]));
    let f = evaluate_u(&spec, &grid, &McSettings::default(), &SolverOptions::default(), Backend::Regression).unwrap();
    for (ti, &t) in grid.times.iter().enumerate() {
        for (pi, x) in grid.points.iter().enumerate() {
            let exact = x[0] * x[0] + (1.0 - t);
            if exact == 0.0 {
                assert_eq!(f.value(ti, pi)[0], 0.0);
                continue;
            }
            let v = f.value(ti, pi)[0];
            assert!((v - exact).abs() <= 0.02 * exact.abs(), "({t}, {x:?}): {v}");
            if t < 1.0 {
                let se = f.se(ti, pi)[0];
                assert!(se > 0.0 && se < 0.02, "{se}");
            }
        }
    }
    assert!(terminal_identity_check(&spec, &f).is_empty());
    assert!(domain_check(&spec, &f).is_empty());
}

#[test]
fn linear_generator_field() {
    let spec = ProblemSpec::new(
        1.0,
        CoefficientField::new(1, Drift::Zero, Diffusion::Zero).unwrap(),
        Generator::new(GeneratorKind::LinearInY { gamma: -0.5 }, 1, 1).unwrap(),
        TerminalMap::new(vec![TerminalFn::Polynomial { axis: 0, coeffs: vec![0.0, 1.0] }], 1).unwrap(),
        ConvexFunction::zero(1),
        &DeclaredConstants::default(),
    )
    .unwrap();
    let grid = FieldGrid::new(vec![0.0, 0.5], points(&[-2.0, 1.0, 3.0]));
    let mc = McSettings { n_paths: 10, n_steps: 100, seed: 0, batches: 1 };
    let f = evaluate_u(&spec, &grid, &mc, &SolverOptions::default(), Backend::Regression).unwrap();
    for (ti, &t) in grid.times.iter().enumerate() {
        for (pi, x) in grid.points.iter().enumerate() {
            let exact = libm::exp(-0.5 * (1.0 - t)) * x[0];
            assert!(((f.value(ti, pi)[0] - exact) / exact).abs() < 0.01);
        }
    }
}

#[test]
fn single_node_field_and_terminal_row() {
    let spec = heat();
    let grid = FieldGrid::new(vec![1.0], points(&[0.3]));
    let f = evaluate_u(&spec, &grid, &McSettings::default(), &SolverOptions::default(), Backend::Regression).unwrap();
    assert_eq!(f.values, vec![0.3 * 0.3]);
    assert_eq!(f.stderr, vec![0.0]);
}

#[test]
fn problem_validation() {
    let c = CoefficientField::brownian(1, 1.0);
    let id = TerminalMap::new(vec![TerminalFn::Polynomial { axis: 0, coeffs: vec![0.0, 1.0] }], 1).unwrap();
    let gen = Generator::new(GeneratorKind::LinearInY { gamma: 0.7 }, 1, 1).unwrap();
    let low_gamma = DeclaredConstants { gamma: Some(0.5), ..DeclaredConstants::default() };
    let r = ProblemSpec::new(1.0, c.clone(), gen.clone(), id.clone(), ConvexFunction::zero(1), &low_gamma);
    assert!(matches!(r, Err(FieldError::Problem(m)) if m.contains("gamma")));
    // h(x) = x leaves the half-line for x < 0
    let r = ProblemSpec::new(1.0, c.clone(), gen.clone(), id.clone(), ConvexFunction::nonnegative_orthant(1), &DeclaredConstants::default());
    assert!(matches!(r, Err(FieldError::Problem(m)) if m.contains("infinite")));
    let small_m1 = DeclaredConstants { m1: Some(0.5), p: Some(1), ..DeclaredConstants::default() };
    assert!(ProblemSpec::new(1.0, c.clone(), gen.clone(), id.clone(), ConvexFunction::zero(1), &small_m1).is_err());
    assert!(ProblemSpec::new(0.0, c.clone(), gen, id, ConvexFunction::zero(1), &DeclaredConstants::default()).is_err());
    let spec = heat();
    assert_eq!(spec.constants.p, 2);
    assert_eq!(spec.constants.m1, 1.0);
    let g = FieldGrid::new(vec![0.0, 1.5], points(&[0.0]));
    assert!(matches!(g.validate(&spec), Err(FieldError::Grid(m)) if m.contains("1.5")));
}

#[test]
fn lattice_field_and_growth() {
    let spec = heat();
    let xs = [-100.0, -10.0, -1.0, 1.0, 10.0, 100.0];
    let grid = FieldGrid::new(vec![0.0, 0.5, 1.0], points(&xs));
    let mc = McSettings { n_steps: 50, ..McSettings::default() };
    let f = evaluate_u(&spec, &grid, &mc, &SolverOptions::default(), Backend::Lattice).unwrap();
    for (ti, &t) in grid.times.iter().enumerate() {
        for (pi, &x) in xs.iter().enumerate() {
            let exact = x * x + 1.0 - t;
            assert!((f.value(ti, pi)[0] - exact).abs() < 0.01 * exact, "{t} {x}");
        }
    }
    let g = growth_check(&f, 2).unwrap();
    assert!(g.passed(Some(2.0 * 1.05)), "{g:?}");
    assert_eq!(g.per_decade.len(), 3);

    let off = FieldGrid::new(vec![0.013], points(&[0.0]));
    assert!(matches!(evaluate_u(&spec, &off, &mc, &SolverOptions::default(), Backend::Lattice), Err(FieldError::Grid(_))));
    let narrow = FieldGrid::new(vec![0.0], points(&[1.0, 2.0]));
    let f = evaluate_u(&spec, &narrow, &mc, &SolverOptions::default(), Backend::Lattice).unwrap();
    assert!(growth_check(&f, 2).is_err());
}

#[test]
fn growth_of_bounded_terminal() {
    let spec = ProblemSpec::new(
        1.0,
        CoefficientField::brownian(1, 1.0),
        Generator::zero(1, 1),
        TerminalMap::new(vec![TerminalFn::Polynomial { axis: 0, coeffs: vec![3.0] }], 1).unwrap(),
        ConvexFunction::zero(1),
        &DeclaredConstants::default(),
    )
    .unwrap();
    let grid = FieldGrid::new(vec![0.0, 1.0], points(&[0.5, 5.0, 50.0]));
    let f = evaluate_u(&spec, &grid, &McSettings::default(), &SolverOptions::default(), Backend::Lattice).unwrap();
    let g = growth_check(&f, 0).unwrap();
    assert!(g.constant <= 3.0 / 2.0 + 1e-12 && g.passed(None));
    // terminal row alone meets M1 exactly
    let t_row = FieldGrid::new(vec![1.0], points(&[0.5, 5.0, 50.0]));
    let f = evaluate_u(&spec, &t_row, &McSettings::default(), &SolverOptions::default(), Backend::Lattice).unwrap();
    assert!(growth_check(&f, 0).unwrap().constant <= spec.constants.m1);
}

#[test]
fn markov_consistency_degenerate_is_exact() {
    let spec = ProblemSpec::new(
        1.0,
        CoefficientField::new(1, Drift::Zero, Diffusion::Zero).unwrap(),
        Generator::zero(1, 1),
        TerminalMap::new(vec![TerminalFn::Polynomial { axis: 0, coeffs: vec![1.0, 0.0, 1.0] }], 1).unwrap(),
        ConvexFunction::zero(1),
        &DeclaredConstants::default(),
    )
    .unwrap();
    let mc = McSettings { n_paths: 20, n_steps: 10, seed: 1, batches: 1 };
    let grid = FieldGrid::new(vec![0.5], points(&[-1.0, 0.4, 2.0]));
    let f = evaluate_u(&spec, &grid, &mc, &SolverOptions::default(), Backend::Regression).unwrap();
    let r = markov_consistency_check(&spec, &f, (0.0, &[0.4]), 0.5, &mc, &SolverOptions::default()).unwrap();
    assert_eq!(r.mean_discrepancy, 0.0);
    assert!(r.passed(3.0));
    assert!(markov_consistency_check(&spec, &f, (0.0, &[0.4]), 1.0, &mc, &SolverOptions::default()).is_err());
}

#[test]
fn markov_consistency_heat() {
    let spec = heat();
    let xs: Vec<f64> = (0..=24).map(|i| -3.0 + 0.25 * i as f64).collect();
    let grid = FieldGrid::new(vec![0.5], points(&xs));
    let mc = McSettings::default();
    let f = evaluate_u(&spec, &grid, &mc, &SolverOptions::default(), Backend::Regression).unwrap();
    let mc1k = McSettings { n_paths: 1000, ..mc };
    let r = markov_consistency_check(&spec, &f, (0.0, &[0.0]), 0.5, &mc1k, &SolverOptions::default()).unwrap();
    assert!(r.passed(3.0), "{r:?}");
    assert!(r.paths_outside < 10);
}

#[test]
fn interpolation_is_exact_for_bilinear_fields() {
    let mut pts = Vec::new();
    for &a in &[0.0, 1.0, 3.0] {
        for &b in &[-1.0, 2.0] {
            pts.push(vec![a, b]);
        }
    }
    let values: Vec<f64> = pts.iter().map(|p| 1.0 + 2.0 * p[0] - p[1] + 0.5 * p[0] * p[1]).collect();
    let field = SolutionField {
        d: 2,
        k: 1,
        grid: FieldGrid::new(vec![0.0], pts.clone()),
        stderr: vec![0.0; values.len()],
        values,
        provenance: provenance(Backend::Lattice, &McSettings::default(), &SolverOptions::default()),
        warnings: Vec::new(),
    };
    let tensor = tensor_view(&field.grid.points, 2).unwrap();
    let (v, se, ie) = interpolate(&field, &tensor, 0, &[2.2, 0.5]).unwrap();
    assert!((v[0] - (1.0 + 4.4 - 0.5 + 0.55)).abs() < 1e-12);
    assert_eq!(se, 0.0);
    assert!(ie.abs() < 1e-12);
    assert!(interpolate(&field, &tensor, 0, &[3.5, 0.0]).is_none());
}

#[test]
fn adjacent_jumps_shrink_with_spacing() {
    let spec = heat();
    let mc = McSettings::default();
    let coarse = FieldGrid::new(vec![0.0], points(&[0.0, 0.2, 0.4, 0.6, 0.8]));
    let fine = FieldGrid::new(vec![0.0], points(&[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]));
    let a = max_adjacent_jump(&evaluate_u(&spec, &coarse, &mc, &SolverOptions::default(), Backend::Lattice).unwrap());
    let b = max_adjacent_jump(&evaluate_u(&spec, &fine, &mc, &SolverOptions::default(), Backend::Lattice).unwrap());
    assert!((a.1 / b.1 - 2.0).abs() < 1e-9);
    assert!((a.0 / b.0 - 2.0).abs() < 0.2, "{a:?} {b:?}");
}

#[test]
fn reflected_backends_agree() {
    let spec = ProblemSpec::new(
        1.0,
        CoefficientField::new(1, Drift::Affine { a: vec![-0.5], c: vec![1.0] }, Diffusion::Constant(vec![1.0])).unwrap(),
        Generator::new(GeneratorKind::Constant(vec![-1.0]), 1, 1).unwrap(),
        TerminalMap::new(vec![TerminalFn::PositivePart { axis: 0, strike: 0.0 }], 1).unwrap(),
        ConvexFunction::nonnegative_orthant(1),
        &DeclaredConstants::default(),
    )
    .unwrap();
    let grid = FieldGrid::new(vec![0.0, 0.5], points(&[0.0, 1.0]));
    let mc = McSettings { n_paths: 4000, ..McSettings::default() };
    let rows = backend_agreement(&spec, &grid, &mc, &SolverOptions::default()).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert!(r.lattice[0] >= 0.0);
        assert!(r.ratio <= 3.0, "{r:?}");
    }
}
