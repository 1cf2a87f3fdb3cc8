//! Seeded property suite for the convex kernel.
//!
//! Each law is checked on a fixed number of random configurations per
//! function. Points are drawn so that kinks and constraint boundaries are hit
//! with positive probability. An operation that errors counts as a violation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use super::{ConvexError, ConvexFunction, ConvexKind, DirectionSet, LimitSampler, Side};
use crate::ext::{ExtendedReal, Finite};
use crate::rng::{derive_seed, fill_normals, index_below, uniform, unit_vector, StreamKey};
use crate::vecops::{dist, dot, norm, sub};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Law {
    /// `phi'_-(u;z) <= phi'_+(u;z)`
    OneSidedOrder,
    /// `phi'_-(u;-z) = -phi'_+(u;z)`
    SideDuality,
    /// `phi'_+(u;tz) = t phi'_+(u;z)`, `t > 0`
    PositiveHomogeneity,
    /// `phi'_+(u;z1+z2) <= phi'_+(u;z1) + phi'_+(u;z2)` when finite
    Subadditivity,
    /// `phi'_-(u;u-v) >= phi'_+(v;u-v)`
    CrossPointOrder,
    /// `phi'_* <= phi'_-` and `phi'^* >= phi'_+` on `Dom(d phi)`
    RelaxedBounds,
    /// Directional and definitional subgradient tests agree
    SubgradientTestAgreement,
    /// `<u* - v*, u - v> >= 0`
    Monotonicity,
    /// `|prox(v) - prox(w)| <= |v - w|`
    ProxNonexpansive,
    /// `(v - prox(v)) / lambda` lies in `d phi(prox(v))`
    ProxResidual,
}

impl Law {
    pub const ALL: [Law; 10] = [
        Law::OneSidedOrder,
        Law::SideDuality,
        Law::PositiveHomogeneity,
        Law::Subadditivity,
        Law::CrossPointOrder,
        Law::RelaxedBounds,
        Law::SubgradientTestAgreement,
        Law::Monotonicity,
        Law::ProxNonexpansive,
        Law::ProxResidual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Law::OneSidedOrder => "one_sided_order",
            Law::SideDuality => "side_duality",
            Law::PositiveHomogeneity => "positive_homogeneity",
            Law::Subadditivity => "subadditivity",
            Law::CrossPointOrder => "cross_point_order",
            Law::RelaxedBounds => "relaxed_bounds",
            Law::SubgradientTestAgreement => "subgradient_test_agreement",
            Law::Monotonicity => "monotonicity",
            Law::ProxNonexpansive => "prox_nonexpansive",
            Law::ProxResidual => "prox_residual",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LawConfig {
    pub samples: usize,
    pub seed: u64,
    /// Tolerance for the directional tests and the two-test agreement.
    pub tol: f64,
    /// Relative slack for piecewise-linear kinds (rounding only).
    pub pl_rel: f64,
    /// Slack for kinds whose derivatives carry curvature.
    pub smooth_tol: f64,
    pub min_agreement: f64,
    /// Neighbourhood sampler for the relaxed-limit law; kept small since it
    /// runs once per sample.
    pub sampler: LimitSampler,
}

impl Default for LawConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            seed: 0,
            tol: 1e-6,
            pl_rel: 1e-12,
            smooth_tol: 1e-9,
            min_agreement: 0.99,
            sampler: LimitSampler {
                radii: vec![1e-1, 1e-2, 1e-3, 1e-4],
                samples_per_radius: 8,
                seed: 0,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LawOutcome {
    pub law: Law,
    pub checked: usize,
    pub violations: usize,
    /// Largest amount by which an inequality failed (`inf` for tag errors).
    pub worst_excess: f64,
    pub first_violation: Option<String>,
}

impl LawOutcome {
    fn new(law: Law) -> Self {
        Self {
            law,
            checked: 0,
            violations: 0,
            worst_excess: 0.0,
            first_violation: None,
        }
    }

    fn record(&mut self, ok: bool, excess: f64, detail: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok {
            self.violations += 1;
            if excess > self.worst_excess || excess.is_nan() {
                self.worst_excess = excess;
            }
            if self.first_violation.is_none() {
                self.first_violation = Some(detail());
            }
        }
    }

    fn record_error(&mut self, e: &ConvexError) {
        self.record(false, f64::INFINITY, || format!("error: {e}"));
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KindReport {
    pub name: String,
    pub outcomes: Vec<LawOutcome>,
    /// Fraction of `(u, u*)` pairs on which both subgradient tests agree.
    pub agreement: f64,
}

impl KindReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed())
    }

    pub fn total_violations(&self) -> usize {
        self.outcomes.iter().map(|o| o.violations).sum()
    }
}

/// The functions exercised by the convex verification, one or more per kind.
pub fn builtin_registry() -> Vec<(String, ConvexFunction)> {
    let q3 = {
        // B B' for a fixed B, eigenvalues bounded away from 0
        let b = [1.0, 0.5, -0.3, 0.0, 1.2, 0.4, 0.2, -0.1, 0.8];
        let mut q = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                q[i * 3 + j] = (0..3).map(|l| b[i * 3 + l] * b[j * 3 + l]).sum();
            }
        }
        q
    };
    let rank_one = vec![1.0, -1.0, -1.0, 1.0];
    let mut out: Vec<(String, ConvexFunction)> = Vec::new();
    let mut add = |name: &str, f: ConvexFunction| out.push((String::from(name), f));
    add("zero", ConvexFunction::zero(3));
    add("separable_abs", ConvexFunction::separable_abs(3));
    add("euclidean_norm", ConvexFunction::euclidean_norm(3));
    add("quadratic", ConvexFunction::quadratic(3, q3).expect("psd"));
    add("quadratic_singular", ConvexFunction::quadratic(2, rank_one).expect("psd"));
    add(
        "indicator_box",
        ConvexFunction::indicator_box(vec![0.0, -1.0, f64::NEG_INFINITY], vec![f64::INFINITY, 1.0, 2.0])
            .expect("box"),
    );
    add("indicator_orthant", ConvexFunction::nonnegative_orthant(2));
    add(
        "indicator_ball",
        ConvexFunction::indicator_ball(vec![0.5, -0.5, 0.0], 1.5).expect("ball"),
    );
    add(
        "indicator_halfspace",
        ConvexFunction::indicator_halfspace(vec![1.0, 2.0, -1.0], 0.5).expect("halfspace"),
    );
    add(
        "max_of_affine",
        ConvexFunction::max_of_affine(
            vec![
                vec![1.0, 0.0, 0.5],
                vec![-1.0, 0.5, 0.0],
                vec![0.0, -1.0, 1.0],
                vec![0.3, 0.3, -1.0],
            ],
            vec![0.0, 0.2, -0.1, 0.4],
        )
        .expect("max-affine"),
    );
    add(
        "scaled_sum",
        ConvexFunction::scaled_sum(vec![
            (1.0, ConvexFunction::separable_abs(2)),
            (0.5, ConvexFunction::quadratic(2, vec![2.0, 0.5, 0.5,1.0]).expect("psd")),
        ])
        .expect("sum"),
    );
    add(
        "scaled_sum_constrained",
        ConvexFunction::scaled_sum(vec![
            (2.0, ConvexFunction::half_squared_norm(2)),
            (1.0, ConvexFunction::nonnegative_orthant(2)),
        ])
        .expect("sum"),
    );
    out
}

fn normals(rng: &mut ChaCha8Rng, k: usize, s: f64) -> Vec<f64> {
    let mut v = vec![0.0; k];
    fill_normals(rng, &mut v);
    v.iter_mut().for_each(|x| *x *= s);
    v
}

/// Moves `u` onto a kink or boundary of `phi` with probability about 1/2.
fn snap(phi: &ConvexFunction, rng: &mut ChaCha8Rng, u: &mut Vec<f64>) {
    let k = u.len();
    if uniform(rng) < 0.5 {
        return;
    }
    match phi.kind() {
        ConvexKind::SeparableAbs => {
            for x in u.iter_mut() {
                if uniform(rng) < 0.5 {
                    *x = 0.0;
                }
            }
        }
        ConvexKind::EuclideanNorm => u.iter_mut().for_each(|x| *x = 0.0),
        ConvexKind::IndicatorBox { lo, hi } => {
            for i in 0..k {
                let r = uniform(rng);
                if r < 0.33 && lo[i].is_finite() {
                    u[i] = lo[i];
                } else if r < 0.66 && hi[i].is_finite() {
                    u[i] = hi[i];
                }
            }
        }
        ConvexKind::IndicatorBall { center, radius } => {
            let d = dist(u, center);
            if d > 0.0 {
                for (x, c) in u.iter_mut().zip(center) {
                    *x = c + (*x - c) * radius / d;
                }
            }
        }
        ConvexKind::IndicatorHalfspace { normal, offset } => {
            let t = (dot(normal, u) - offset) / dot(normal, normal);
            for (x, a) in u.iter_mut().zip(normal) {
                *x -= t * a;
            }
        }
        ConvexKind::MaxOfAffine { slopes, intercepts } => {
            let i = index_below(rng, slopes.len());
            let j = (i + 1 + index_below(rng, slopes.len() - 1)) % slopes.len();
            let da = sub(&slopes[i], &slopes[j]);
            let gap = dot(&da, u) + intercepts[i] - intercepts[j];
            let t = gap / dot(&da, &da);
            for (x, a) in u.iter_mut().zip(&da) {
                *x -= t * a;
            }
        }
        ConvexKind::ScaledSum { terms } => {
            for (_, f) in terms {
                snap(f, rng, u);
            }
        }
        _ => {}
    }
}

/// A point of `Dom(phi)`, on a kink or boundary with positive probability.
fn sample_point(phi: &ConvexFunction, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, ConvexError> {
    let mut u = normals(rng, phi.dim(), 1.5);
    snap(phi, rng, &mut u);
    let p = phi.project_to_subdiff_domain(&u)?;
    if phi.in_domain(&p) {
        Ok(p)
    } else {
        phi.domain_witness().ok_or(ConvexError::OutsideDomain)
    }
}

/// A direction: Gaussian, sometimes with zeroed coordinates or an axis.
fn sample_direction(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let r = uniform(rng);
    let mut z = normals(rng, k, 1.0);
    if r < 0.2 {
        z = vec![0.0; k];
        z[index_below(rng, k)] = if uniform(rng) < 0.5 { 1.0 } else { -1.0 };
    } else if r < 0.4 {
        for x in z.iter_mut() {
            if uniform(rng) < 0.5 {
                *x = 0.0;
            }
        }
    }
    z
}

/// An element of `d phi(u)`: the minimal section, or for base kinds the
/// projection of a random vector onto `d phi(u)`.
fn sample_subgradient(phi: &ConvexFunction, rng: &mut ChaCha8Rng, u: &[f64]) -> Option<Vec<f64>> {
    if uniform(rng) < 0.5 {
        let g = normals(rng, u.len(), 2.0);
        if let Some(v) = phi.project_subdiff(u, &g) {
            return Some(v);
        }
    }
    phi.minimal_section(u).vector
}

struct Tolerances {
    pl: bool,
    pl_rel: f64,
    smooth: f64,
    coeff: f64,
}

impl Tolerances {
    /// Slack for comparing derivative values whose inputs have size `mag`.
    fn at(&self, mag: f64) -> f64 {
        if self.pl {
            self.pl_rel * 16.0 * self.coeff * (1.0 + mag)
        } else {
            self.smooth * self.coeff * (1.0 + mag)
        }
    }
}

fn excess(a: ExtendedReal, b: ExtendedReal) -> f64 {
    // amount by which `a <= b` fails
    match (a, b) {
        (Finite(x), Finite(y)) => x - y,
        _ => f64::INFINITY,
    }
}

/// Runs every law on `phi`.
pub fn run_law_suite(name: &str, phi: &ConvexFunction, cfg: &LawConfig) -> KindReport {
    let k = phi.dim();
    let tols = Tolerances {
        pl: phi.is_piecewise_linear(),
        pl_rel: cfg.pl_rel,
        smooth: cfg.smooth_tol,
        coeff: phi.coefficient_scale(),
    };
    let mut outcomes: Vec<LawOutcome> = Law::ALL.iter().map(|&l| LawOutcome::new(l)).collect();
    let idx = |l: Law| Law::ALL.iter().position(|&x| x == l).unwrap();
    let mut agree = 0usize;
    let mut pairs = 0usize;
    let label = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let key = StreamKey::new(derive_seed(cfg.seed, &[label]));
    let mut dirs = DirectionSet::axes(k);
    for _ in 0..4 {
        let mut rng = key.at(u64::MAX, dirs.len() as u128 * 64);
        let v = unit_vector(&mut rng, k);
        dirs.push(v.iter().map(|x| -x).collect());
        dirs.push(v);
    }
    let mut sampler = cfg.sampler.clone();

    for s in 0..cfg.samples {
        let mut rng = key.at(s as u64, 0);
        let u = match sample_point(phi, &mut rng) {
            Ok(u) => u,
            Err(e) => {
                outcomes.iter_mut().for_each(|o| o.record_error(&e));
                continue;
            }
        };
        let v = match sample_point(phi, &mut rng) {
            Ok(v) => v,
            Err(e) => {
                outcomes.iter_mut().for_each(|o| o.record_error(&e));
                continue;
            }
        };
        let z = sample_direction(&mut rng, k);
        let z2 = sample_direction(&mut rng, k);
        let mag = norm(&z) * (1.0 + norm(&u));

        // one-sided derivative laws at u
        match (phi.dd(&u, &z, Side::Minus), phi.dd(&u, &z, Side::Plus)) {
            (Ok(m), Ok(p)) => {
                let t = tols.at(mag);
                outcomes[idx(Law::OneSidedOrder)].record(m.le_tol(p, t), excess(m, p), || {
                    format!("u={u:?} z={z:?}: minus {m} > plus {p}")
                });
                let nz: Vec<f64> = z.iter().map(|x| -x).collect();
                match phi.dd(&u, &nz, Side::Minus) {
                    Ok(mn) => {
                        let ok = mn.approx_eq(-p, t);
                        let ex = match (mn, p) {
                            (Finite(a), Finite(b)) => (a + b).abs(),
                            _ => f64::INFINITY,
                        };
                        outcomes[idx(Law::SideDuality)].record(ok, ex, || {
                            format!("u={u:?} z={z:?}: minus(-z) {mn} != -plus(z) {}", -p)
                        });
                    }
                    Err(e) => outcomes[idx(Law::SideDuality)].record_error(&e),
                }
                let scale_t = crate::vecops::exp((uniform(&mut rng) - 0.5) * 9.0);
                let tz: Vec<f64> = z.iter().map(|x| scale_t * x).collect();
                match phi.dd(&u, &tz, Side::Plus) {
                    Ok(pt) => {
                        let want = scale_t * p;
                        let ok = pt.approx_eq(want, tols.at(mag * scale_t));
                        outcomes[idx(Law::PositiveHomogeneity)].record(ok, excess(pt, want).abs(), || {
                            format!("u={u:?} z={z:?} t={scale_t}: {pt} vs {want}")
                        });
                    }
                    Err(e) => outcomes[idx(Law::PositiveHomogeneity)].record_error(&e),
                }
                let zs: Vec<f64> = z.iter().zip(&z2).map(|(a, b)| a + b).collect();
                match (phi.dd(&u, &z2, Side::Plus), phi.dd(&u, &zs, Side::Plus)) {
                    (Ok(p2), Ok(psum)) => {
                        if p.is_finite() && p2.is_finite() {
                            let rhs = p + p2;
                            let t = tols.at(mag + norm(&z2) * (1.0 + norm(&u)));
                            outcomes[idx(Law::Subadditivity)].record(psum.le_tol(rhs, t), excess(psum, rhs), || {
                                format!("u={u:?} z1={z:?} z2={z2:?}: {psum} > {rhs}")
                            });
                        }
                    }
                    (Err(e), _) | (_, Err(e)) => outcomes[idx(Law::Subadditivity)].record_error(&e),
                }
                // Relaxed limits bracket the one-sided derivatives.
                sampler.seed = derive_seed(cfg.seed, &[label, s as u64]);
                let rb = idx(Law::RelaxedBounds);
                for sampled in [false, true] {
                    let lo = if sampled {
                        phi.relaxed_sampled(&u, &z, Side::Minus, &sampler)
                    } else {
                        phi.liminf_dir_deriv(&u, &z, &sampler)
                    };
                    let hi = if sampled {
                        phi.relaxed_sampled(&u, &z, Side::Plus, &sampler)
                    } else {
                        phi.limsup_dir_deriv(&u, &z, &sampler)
                    };
                    match (lo, hi) {
                        (Ok(lo), Ok(hi)) => {
                            let ok = lo.value.le_tol(m, cfg.tol) && p.le_tol(hi.value, cfg.tol);
                            let ex = excess(lo.value, m).max(excess(p, hi.value));
                            outcomes[rb].record(ok, ex, || {
                                format!(
                                    "u={u:?} z={z:?} sampled={sampled}: liminf {} vs minus {m}, limsup {} vs plus {p}",
                                    lo.value, hi.value
                                )
                            });
                        }
                        (Err(e), _) | (_, Err(e)) => outcomes[rb].record_error(&e),
                    }
                }
            }
            (Err(e), _) | (_, Err(e)) => {
                for l in [Law::OneSidedOrder, Law::SideDuality, Law::PositiveHomogeneity] {
                    outcomes[idx(l)].record_error(&e);
                }
            }
        }

        // Cross-point order between u and v.
        let w = sub(&u, &v);
        match (phi.dd(&u, &w, Side::Minus), phi.dd(&v, &w, Side::Plus)) {
            (Ok(a), Ok(b)) => {
                let t = tols.at(norm(&w) * (1.0 + norm(&u) + norm(&v)));
                outcomes[idx(Law::CrossPointOrder)].record(b.le_tol(a, t), excess(b, a), || {
                    format!("u={u:?} v={v:?}: minus(u;u-v) {a} < plus(v;u-v) {b}")
                });
            }
            (Err(e), _) | (_, Err(e)) => outcomes[idx(Law::CrossPointOrder)].record_error(&e),
        }

        // Monotonicity of the subdifferential.
        match (sample_subgradient(phi, &mut rng, &u), sample_subgradient(phi, &mut rng, &v)) {
            (Some(us), Some(vs)) => {
                let val = dot(&sub(&us, &vs), &w);
                outcomes[idx(Law::Monotonicity)].record(val >= -1e-9, -val, || {
                    format!("u={u:?} v={v:?} u*={us:?} v*={vs:?}: <u*-v*, u-v> = {val:e}")
                });
            }
            _ => outcomes[idx(Law::Monotonicity)].record(false, f64::INFINITY, || {
                format!("empty subdifferential sampled at u={u:?} or v={v:?}")
            }),
        }

        // Two subgradient tests.
        if let Some(g0) = sample_subgradient(phi, &mut rng, &u) {
            let eps = [0.0, 0.05, 0.2, 1.0][index_below(&mut rng, 4)];
            let noise = unit_vector(&mut rng, k);
            let us: Vec<f64> = g0.iter().zip(&noise).map(|(a, b)| a + eps * b).collect();
            let mut points = Vec::new();
            for d in dirs.iter() {
                for step in [1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0] {
                    points.push(u.iter().zip(d).map(|(a, b)| a + step * b).collect::<Vec<f64>>());
                }
            }
            let ag = idx(Law::SubgradientTestAgreement);
            match (
                phi.subdiff_contains(&u, &us, &dirs, cfg.tol),
                phi.subgradient_inequality_holds(&u, &us, &points, cfg.tol),
            ) {
                (Ok(a), Ok(b)) => {
                    pairs += 1;
                    if a == b {
                        agree += 1;
                    }
                }
                (Err(e), _) | (_, Err(e)) => outcomes[ag].record_error(&e),
            }
        }

        // Prox.
        let lambda = 0.1 + 1.9 * uniform(&mut rng);
        let pv_in = normals(&mut rng, k, 2.5);
        let pw_in = normals(&mut rng, k, 2.5);
        match (phi.prox(lambda, &pv_in), phi.prox(lambda, &pw_in)) {
            (Ok(pv), Ok(pw)) => {
                let lhs = dist(&pv, &pw);
                let rhs = dist(&pv_in, &pw_in);
                let t = 1e-9 * (1.0 + rhs);
                outcomes[idx(Law::ProxNonexpansive)].record(lhs <= rhs + t, lhs - rhs, || {
                    format!("v={pv_in:?} w={pw_in:?}: |prox v - prox w| = {lhs} > {rhs}")
                });
                let r: Vec<f64> = pv_in.iter().zip(&pv).map(|(a, b)| (a - b) / lambda).collect();
                let pr = idx(Law::ProxResidual);
                match phi.subdiff_contains(&pv, &r, &dirs, cfg.tol * (1.0 + norm(&r))) {
                    Ok(ok) => outcomes[pr].record(ok, f64::INFINITY, || {
                        format!("v={pv_in:?} lambda={lambda}: residual {r:?} not in subdifferential at {pv:?}")
                    }),
                    Err(e) => outcomes[pr].record_error(&e),
                }
            }
            (Err(e), _) | (_, Err(e)) => {
                outcomes[idx(Law::ProxNonexpansive)].record_error(&e);
                outcomes[idx(Law::ProxResidual)].record_error(&e);
            }
        }
    }

    let agreement = if pairs == 0 { 1.0 } else { agree as f64 / pairs as f64 };
    let ag = idx(Law::SubgradientTestAgreement);
    outcomes[ag].checked += pairs;
    if agreement < cfg.min_agreement {
        outcomes[ag].violations += pairs - agree;
        outcomes[ag].worst_excess = cfg.min_agreement - agreement;
        outcomes[ag].first_violation.get_or_insert_with(|| {
            format!("agreement {agreement:.4} below {:.2}", cfg.min_agreement)
        });
    }
    KindReport {
        name: String::from(name),
        outcomes,
        agreement,
    }
}
