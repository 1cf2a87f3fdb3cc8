//! Convex-analysis kernel over a registry of proper, l.s.c. convex
//! functions `phi: R^k -> (-inf, +inf]`.
//!
//! Every registry kind comes with closed forms for its one-sided
//! directional derivatives and for its minimal section. The limit-sequence
//! derivative and the sampled `liminf`/`limsup` estimators exist both as
//! cross-checks and for `ScaledSum`, whose relaxed derivatives have no
//! closed form here.

pub mod laws;
mod limits;
mod prox;
mod qp;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::ext::{ExtendedReal, Finite, NegInf, PosInf};
use crate::vecops::{dist, dot, mat_vec, norm};

pub use limits::{DirectionSet, LimitEstimate, LimitSampler};
pub use prox::{PROX_MAX_ITER, PROX_TOL};

/// Relative slack used to decide membership of curved and oblique sets
/// (ball, halfspace), whose projections are only exact up to rounding.
pub const BOUNDARY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvexError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("point lies outside Dom(phi)")]
    OutsideDomain,
    #[error("invalid convex function parameters: {0}")]
    InvalidParameter(String),
    #[error("operation needs k = 1, got k = {0}")]
    NotScalar(usize),
    #[error("prox step lambda must be positive and finite, got {0}")]
    BadLambda(f64),
    #[error("prox did not converge within {iterations} iterations (last change {change:e})")]
    ProxNotConverged { iterations: usize, change: f64 },
    #[error("prox subproblem is unbounded below (function is not convex)")]
    Unbounded,
    #[error("no Dom(dphi) sample found within radius {radius:e}")]
    NoDomainSample { radius: f64 },
    #[error("input contains non-finite values")]
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// `phi'_-(u; z) = sup_{t<0} (phi(u+tz) - phi(u)) / t`
    Minus,
    /// `phi'_+(u; z) = inf_{t>0} (phi(u+tz) - phi(u)) / t`
    Plus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirDerivMethod {
    ClosedForm,
    LimitSequence,
    Sampled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirDerivResult {
    pub value: ExtendedReal,
    pub method: DirDerivMethod,
    /// Step sizes whose quotients formed the monotone sequence; empty for
    /// closed forms.
    pub t_sequence: Vec<f64>,
}

/// Geometric step sequence `t0 * ratio^i` for difference quotients.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSequence {
    pub t0: f64,
    pub ratio: f64,
    pub steps: usize,
    /// A quotient beyond this magnitude that is still moving is reported
    /// as infinite.
    pub blowup: f64,
}

impl Default for StepSequence {
    fn default() -> Self {
        Self {
            t0: 1.0,
            ratio: 0.5,
            steps: 40,
            blowup: 1e12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinimalSection {
    /// `(d phi)^0(u)`, absent when `d phi(u)` is empty.
    pub vector: Option<Vec<f64>>,
    /// `|d phi|_0(u)`, `+inf` when `d phi(u)` is empty.
    pub norm: ExtendedReal,
}

/// The registry. Each variant documents why it is proper, convex and l.s.c.
#[derive(Clone, Debug, PartialEq)]
pub enum ConvexKind {
    /// `0`: finite, linear.
    Zero,
    /// `sum_i |u_i|`: finite sum of convex continuous terms.
    SeparableAbs,
    /// `|u|`: a norm, finite and continuous.
    EuclideanNorm,
    /// `0.5 <Qu, u>` with `Q` symmetric PSD (row-major), finite and
    /// continuous; convex because the Hessian is PSD.
    Quadratic { q: Vec<f64> },
    /// Indicator of the box `prod_i [lo_i, hi_i]`, bounds possibly
    /// infinite: the box is closed, convex and nonempty (`lo <= hi`).
    IndicatorBox { lo: Vec<f64>, hi: Vec<f64> },
    /// Indicator of the closed ball `|u - center| <= radius`, `radius > 0`.
    IndicatorBall { center: Vec<f64>, radius: f64 },
    /// Indicator of the closed halfspace `<normal, u> <= offset`,
    /// `normal != 0`, always nonempty.
    IndicatorHalfspace { normal: Vec<f64>, offset: f64 },
    /// `max_j (<a_j, u> + c_j)`: finite maximum of affine functions.
    MaxOfAffine {
        slopes: Vec<Vec<f64>>,
        intercepts: Vec<f64>,
    },
    /// `sum_j w_j phi_j` with `w_j > 0`: convex and l.s.c. termwise;
    /// properness is checked on construction through a common domain
    /// point. Subdifferentials use the sum rule.
    ScaledSum { terms: Vec<(f64, ConvexFunction)> },
    /// `-0.5 <Qu, u>`: deliberately NOT convex. Fault-injection hook for
    /// exercising the law suite; never use it as a model.
    #[doc(hidden)]
    NegatedQuadraticFault { q: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvexFunction {
    kind: ConvexKind,
    dim: usize,
}

fn invalid<T>(msg: &str) -> Result<T, ConvexError> {
    Err(ConvexError::InvalidParameter(String::from(msg)))
}

fn check_symmetric_psd(q: &[f64], k: usize) -> Result<(), ConvexError> {
    if q.len() != k * k {
        return invalid("quadratic form must be k x k");
    }
    if !q.iter().all(|x| x.is_finite()) {
        return invalid("quadratic form has non-finite entries");
    }
    let scale = q.iter().fold(1.0f64, |a, x| a.max(x.abs()));
    for i in 0..k {
        for j in 0..i {
            if (q[i * k + j] - q[j * k + i]).abs() > 1e-12 * scale {
                return invalid("quadratic form must be symmetric");
            }
        }
    }
    let m = nalgebra::DMatrix::from_row_slice(k, k, q);
    let eig = m.symmetric_eigenvalues();
    if eig.iter().any(|&l| l < -1e-12 * scale) {
        return invalid("quadratic form must be positive semidefinite");
    }
    Ok(())
}

impl ConvexFunction {
    pub fn zero(k: usize) -> Self {
        Self {
            kind: ConvexKind::Zero,
            dim: k,
        }
    }

    pub fn separable_abs(k: usize) -> Self {
        Self {
            kind: ConvexKind::SeparableAbs,
            dim: k,
        }
    }

    pub fn euclidean_norm(k: usize) -> Self {
        Self {
            kind: ConvexKind::EuclideanNorm,
            dim: k,
        }
    }

    /// `0.5 <Qu, u>`, `q` row-major.
    pub fn quadratic(k: usize, q: Vec<f64>) -> Result<Self, ConvexError> {
        check_symmetric_psd(&q, k)?;
        Ok(Self {
            kind: ConvexKind::Quadratic { q },
            dim: k,
        })
    }

    /// `0.5 |u|^2`.
    pub fn half_squared_norm(k: usize) -> Self {
        let mut q = vec![0.0; k * k];
        (0..k).for_each(|i| q[i * k + i] = 1.0);
        Self {
            kind: ConvexKind::Quadratic { q },
            dim: k,
        }
    }

    pub fn indicator_box(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, ConvexError> {
        if lo.len() != hi.len() || lo.is_empty() {
            return invalid("box bounds must have equal, positive length");
        }
        for (a, b) in lo.iter().zip(&hi) {
            if a.is_nan() || b.is_nan() || a > b || *a == f64::INFINITY || *b == f64::NEG_INFINITY {
                return invalid("box bounds must satisfy lo <= hi with lo < inf and hi > -inf");
            }
        }
        let dim = lo.len();
        Ok(Self {
            kind: ConvexKind::IndicatorBox { lo, hi },
            dim,
        })
    }

    /// Indicator of the nonnegative orthant `[0, inf)^k`.
    pub fn nonnegative_orthant(k: usize) -> Self {
        Self::indicator_box(vec![0.0; k], vec![f64::INFINITY; k]).expect("valid orthant")
    }

    pub fn indicator_ball(center: Vec<f64>, radius: f64) -> Result<Self, ConvexError> {
        if !(radius > 0.0 && radius.is_finite()) || !center.iter().all(|x| x.is_finite()) {
            return invalid("ball needs a finite center and a positive finite radius");
        }
        let dim = center.len();
        Ok(Self {
            kind: ConvexKind::IndicatorBall { center, radius },
            dim,
        })
    }

    pub fn indicator_halfspace(normal: Vec<f64>, offset: f64) -> Result<Self, ConvexError> {
        if norm(&normal) == 0.0 || !normal.iter().all(|x| x.is_finite()) || !offset.is_finite() {
            return invalid("halfspace needs a finite nonzero normal and a finite offset");
        }
        let dim = normal.len();
        Ok(Self {
            kind: ConvexKind::IndicatorHalfspace { normal, offset },
            dim,
        })
    }

    pub fn max_of_affine(slopes: Vec<Vec<f64>>, intercepts: Vec<f64>) -> Result<Self, ConvexError> {
        if slopes.is_empty() || slopes.len() != intercepts.len() {
            return invalid("max-of-affine needs as many intercepts as slopes (at least one)");
        }
        let dim = slopes[0].len();
        if dim == 0 || slopes.iter().any(|a| a.len() != dim || !a.iter().all(|x| x.is_finite())) {
            return invalid("max-of-affine slopes must share a positive dimension and be finite");
        }
        if !intercepts.iter().all(|c| c.is_finite()) {
            return invalid("max-of-affine intercepts must be finite");
        }
        Ok(Self {
            kind: ConvexKind::MaxOfAffine { slopes, intercepts },
            dim,
        })
    }

    /// `sum_j w_j phi_j`. Nested sums are flattened.
    pub fn scaled_sum(terms: Vec<(f64, ConvexFunction)>) -> Result<Self, ConvexError> {
        if terms.is_empty() {
            return invalid("scaled sum needs at least one term");
        }
        let dim = terms[0].1.dim;
        let mut flat = Vec::new();
        for (w, f) in terms {
            if !(w > 0.0 && w.is_finite()) {
                return invalid("scaled-sum weights must be positive and finite");
            }
            if f.dim != dim {
                return invalid("scaled-sum terms must share a dimension");
            }
            match f.kind {
                ConvexKind::ScaledSum { terms: inner } => {
                    flat.extend(inner.into_iter().map(|(v, g)| (w * v, g)));
                }
                ConvexKind::NegatedQuadraticFault { .. } => {
                    return invalid("fault hook cannot be summed");
                }
                _ => flat.push((w, f)),
            }
        }
        let phi = Self {
            kind: ConvexKind::ScaledSum { terms: flat },
            dim,
        };
        match phi.domain_witness() {
            Some(_) => Ok(phi),
            None => invalid("scaled sum is not proper (no common domain point found)"),
        }
    }

    #[doc(hidden)]
    pub fn fault_negated_quadratic(k: usize, q: Vec<f64>) -> Result<Self, ConvexError> {
        check_symmetric_psd(&q, k)?;
        Ok(Self {
            kind: ConvexKind::NegatedQuadraticFault { q },
            dim: k,
        })
    }

    pub fn kind(&self) -> &ConvexKind {
        &self.kind
    }

    /// Output-space dimension `k`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ConvexKind::Zero => "zero",
            ConvexKind::SeparableAbs => "separable_abs",
            ConvexKind::EuclideanNorm => "euclidean_norm",
            ConvexKind::Quadratic { .. } => "quadratic",
            ConvexKind::IndicatorBox { .. } => "indicator_box",
            ConvexKind::IndicatorBall { .. } => "indicator_ball",
            ConvexKind::IndicatorHalfspace { .. } => "indicator_halfspace",
            ConvexKind::MaxOfAffine { .. } => "max_of_affine",
            ConvexKind::ScaledSum { .. } => "scaled_sum",
            ConvexKind::NegatedQuadraticFault { .. } => "fault_negated_quadratic",
        }
    }

    /// Kinds whose derivatives are computed without rounding-sensitive
    /// curvature; the law suite holds them to a near-exact tolerance.
    pub fn is_piecewise_linear(&self) -> bool {
        match &self.kind {
            ConvexKind::Zero
            | ConvexKind::SeparableAbs
            | ConvexKind::IndicatorBox { .. }
            | ConvexKind::IndicatorHalfspace { .. }
            | ConvexKind::MaxOfAffine { .. } => true,
            ConvexKind::ScaledSum { terms } => terms.iter().all(|(_, f)| f.is_piecewise_linear()),
            _ => false,
        }
    }

    /// Finite and continuously differentiable.
    pub fn is_smooth(&self) -> bool {
        matches!(
            self.kind,
            ConvexKind::Zero | ConvexKind::Quadratic { .. } | ConvexKind::NegatedQuadraticFault { .. }
        )
    }

    /// Magnitude of the defining coefficients, used to scale tolerances.
    pub fn coefficient_scale(&self) -> f64 {
        let s = match &self.kind {
            ConvexKind::Zero | ConvexKind::IndicatorBox { .. } | ConvexKind::IndicatorBall { .. } => 1.0,
            ConvexKind::SeparableAbs => sqrt_dim(self.dim),
            ConvexKind::EuclideanNorm => 1.0,
            ConvexKind::Quadratic { q } | ConvexKind::NegatedQuadraticFault { q } => {
                q.iter().fold(0.0f64, |a, x| a.max(x.abs())) * self.dim as f64
            }
            ConvexKind::IndicatorHalfspace { normal, .. } => norm(normal),
            ConvexKind::MaxOfAffine { slopes, .. } => slopes.iter().map(|a| norm(a)).fold(0.0f64, f64::max),
            ConvexKind::ScaledSum { terms } => terms.iter().map(|(w, f)| w * f.coefficient_scale()).sum(),
        };
        s.max(1.0)
    }

    /// True for indicator kinds (values in `{0, +inf}`).
    pub fn is_indicator(&self) -> bool {
        matches!(
            self.kind,
            ConvexKind::IndicatorBox { .. }
                | ConvexKind::IndicatorBall { .. }
                | ConvexKind::IndicatorHalfspace { .. }
        )
    }

    fn check_dim(&self, u: &[f64]) -> Result<(), ConvexError> {
        if u.len() != self.dim {
            return Err(ConvexError::Dimension {
                expected: self.dim,
                got: u.len(),
            });
        }
        Ok(())
    }

    fn halfspace_slack(normal: &[f64], offset: f64, u: &[f64]) -> (f64, f64) {
        let s = dot(normal, u) - offset;
        let tol = BOUNDARY_TOL * (1.0 + offset.abs() + norm(normal) * norm(u));
        (s, tol)
    }

    /// `<normal, z>`, with directions tangent up to rounding mapped to 0.
    fn halfspace_rate(normal: &[f64], z: &[f64]) -> f64 {
        let r = dot(normal, z);
        if r.abs() <= BOUNDARY_TOL * norm(normal) * norm(z) {
            0.0
        } else {
            r
        }
    }

    fn ball_active(center: &[f64], radius: f64, u: &[f64]) -> bool {
        dist(u, center) >= radius * (1.0 - BOUNDARY_TOL)
    }

    fn max_affine_values(slopes: &[Vec<f64>], intercepts: &[f64], u: &[f64]) -> Vec<f64> {
        slopes
            .iter()
            .zip(intercepts)
            .map(|(a, c)| dot(a, u) + c)
            .collect()
    }

    /// Indices of the affine pieces attaining the max (up to rounding).
    fn max_affine_active(slopes: &[Vec<f64>], intercepts: &[f64], u: &[f64]) -> Vec<usize> {
        let vals = Self::max_affine_values(slopes, intercepts, u);
        let top = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scale = 1.0
            + top.abs()
            + slopes
                .iter()
                .map(|a| norm(a) * norm(u))
                .fold(0.0f64, f64::max);
        let tol = 1e-12 * scale;
        (0..vals.len()).filter(|&j| vals[j] >= top - tol).collect()
    }

    /// `phi(u)`; `+inf` exactly off `Dom(phi)`.
    pub fn eval(&self, u: &[f64]) -> ExtendedReal {
        assert_eq!(u.len(), self.dim, "dimension mismatch in eval");
        match &self.kind {
            ConvexKind::Zero => Finite(0.0),
            ConvexKind::SeparableAbs => Finite(crate::vecops::norm1(u)),
            ConvexKind::EuclideanNorm => Finite(norm(u)),
            ConvexKind::Quadratic { q } => Finite(0.5 * dot(&mat_vec(q, self.dim, u), u)),
            ConvexKind::NegatedQuadraticFault { q } => Finite(-0.5 * dot(&mat_vec(q, self.dim, u), u)),
            ConvexKind::IndicatorBox { lo, hi } => {
                let inside = u
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .all(|(x, (a, b))| *a <= *x && *x <= *b);
                if inside {
                    Finite(0.0)
                } else {
                    PosInf
                }
            }
            ConvexKind::IndicatorBall { center, radius } => {
                if dist(u, center) <= radius * (1.0 + BOUNDARY_TOL) {
                    Finite(0.0)
                } else {
                    PosInf
                }
            }
            ConvexKind::IndicatorHalfspace { normal, offset } => {
                let (s, tol) = Self::halfspace_slack(normal, *offset, u);
                if s <= tol {
                    Finite(0.0)
                } else {
                    PosInf
                }
            }
            ConvexKind::MaxOfAffine { slopes, intercepts } => Finite(
                Self::max_affine_values(slopes, intercepts, u)
                    .into_iter()
                    .fold(f64::NEG_INFINITY, f64::max),
            ),
            ConvexKind::ScaledSum { terms } => terms
                .iter()
                .fold(Finite(0.0), |acc, (w, f)| acc + f.eval(u).scale(*w)),
        }
    }

    /// `u` in `Dom(phi)`.
    pub fn in_domain(&self, u: &[f64]) -> bool {
        crate::vecops::all_finite(u) && self.eval(u).is_finite()
    }

    /// `u` in `Dom(d phi)`. Every registry kind has a closed domain on which
    /// the subdifferential is nonempty, so this coincides with `Dom(phi)`;
    /// sums rely on the sum rule.
    pub fn in_subdiff_domain(&self, u: &[f64]) -> bool {
        self.in_domain(u)
    }

    /// A point of `Dom(phi)`, witnessing properness.
    pub fn domain_witness(&self) -> Option<Vec<f64>> {
        let origin = vec![0.0; self.dim];
        let candidate = match &self.kind {
            ConvexKind::ScaledSum { .. } => self.prox(1.0, &origin).ok()?,
            _ => self.project_to_subdiff_domain(&origin).ok()?,
        };
        if self.in_domain(&candidate) {
            Some(candidate)
        } else {
            None
        }
    }

    /// Projection onto `Dom(d phi)` (identity when the domain is `R^k`).
    pub fn project_to_subdiff_domain(&self, v: &[f64]) -> Result<Vec<f64>, ConvexError> {
        self.check_dim(v)?;
        match &self.kind {
            ConvexKind::IndicatorBox { .. }
            | ConvexKind::IndicatorBall { .. }
            | ConvexKind::IndicatorHalfspace { .. } => self.prox(1.0, v),
            ConvexKind::ScaledSum { terms } => {
                if terms.iter().all(|(_, f)| !f.is_indicator()) {
                    Ok(v.to_vec())
                } else {
                    self.prox(1e-9, v)
                }
            }
            _ => Ok(v.to_vec()),
        }
    }

    fn require_domain(&self, u: &[f64]) -> Result<(), ConvexError> {
        self.check_dim(u)?;
        if !crate::vecops::all_finite(u) {
            return Err(ConvexError::NonFinite);
        }
        if !self.in_domain(u) {
            return Err(ConvexError::OutsideDomain);
        }
        Ok(())
    }

    fn plus_closed(&self, u: &[f64], z: &[f64]) -> ExtendedReal {
        match &self.kind {
            ConvexKind::Zero => Finite(0.0),
            ConvexKind::SeparableAbs => Finite(
                u.iter()
                    .zip(z)
                    .map(|(&ui, &zi)| if ui != 0.0 { ui.signum() * zi } else { zi.abs() })
                    .sum(),
            ),
            ConvexKind::EuclideanNorm => {
                let n = norm(u);
                if n > 0.0 {
                    Finite(dot(u, z) / n)
                } else {
                    Finite(norm(z))
                }
            }
            ConvexKind::Quadratic { q } => Finite(dot(&mat_vec(q, self.dim, u), z)),
            ConvexKind::NegatedQuadraticFault { q } => Finite(-dot(&mat_vec(q, self.dim, u), z)),
            ConvexKind::IndicatorBox { lo, hi } => {
                if box_direction_feasible(lo, hi, u, z, 1.0) {
                    Finite(0.0)
                } else {
                    PosInf
                }
            }
            ConvexKind::IndicatorBall { center, radius } => {
                if z.iter().all(|&x| x == 0.0) || !Self::ball_active(center, *radius, u) {
                    Finite(0.0)
                } else if dot(&crate::vecops::sub(u, center), z) < 0.0 {
                    Finite(0.0)
                } else {
                    PosInf
                }
            }
            ConvexKind::IndicatorHalfspace { normal, offset } => {
                let (s, tol) = Self::halfspace_slack(normal, *offset, u);
                if s < -tol || Self::halfspace_rate(normal, z) <= 0.0 {
                    Finite(0.0)
                } else {
                    PosInf
                }
            }
            ConvexKind::MaxOfAffine { slopes, intercepts } => Finite(
                Self::max_affine_active(slopes, intercepts, u)
                    .into_iter()
                    .map(|j| dot(&slopes[j], z))
                    .fold(f64::NEG_INFINITY, f64::max),
            ),
            ConvexKind::ScaledSum { terms } => terms
                .iter()
                .fold(Finite(0.0), |acc, (w, f)| acc + f.plus_closed(u, z).scale(*w)),
        }
    }

    fn minus_closed(&self, u: &[f64], z: &[f64]) -> ExtendedReal {
        match &self.kind {
            ConvexKind::Zero => Finite(0.0),
            ConvexKind::SeparableAbs => Finite(
                u.iter()
                    .zip(z)
                    .map(|(&ui, &zi)| if ui != 0.0 { ui.signum() * zi } else { -zi.abs() })
                    .sum(),
            ),
            ConvexKind::EuclideanNorm => {
                let n = norm(u);
                if n > 0.0 {
                    Finite(dot(u, z) / n)
                } else {
                    Finite(-norm(z))
                }
            }
            ConvexKind::Quadratic { q } => Finite(dot(&mat_vec(q, self.dim, u), z)),
            ConvexKind::NegatedQuadraticFault { q } => Finite(-dot(&mat_vec(q, self.dim, u), z)),
            ConvexKind::IndicatorBox { lo, hi } => {
                if box_direction_feasible(lo, hi, u, z, -1.0) {
                    Finite(0.0)
                } else {
                    NegInf
                }
            }
            ConvexKind::IndicatorBall { center, radius } => {
                if z.iter().all(|&x| x == 0.0) || !Self::ball_active(center, *radius, u) {
                    Finite(0.0)
                } else if dot(&crate::vecops::sub(u, center), z) > 0.0 {
                    Finite(0.0)
                } else {
                    NegInf
                }
            }
            ConvexKind::IndicatorHalfspace { normal, offset } => {
                let (s, tol) = Self::halfspace_slack(normal, *offset, u);
                if s < -tol || Self::halfspace_rate(normal, z) >= 0.0 {
                    Finite(0.0)
                } else {
                    NegInf
                }
            }
            ConvexKind::MaxOfAffine { slopes, intercepts } => Finite(
                Self::max_affine_active(slopes, intercepts, u)
                    .into_iter()
                    .map(|j| dot(&slopes[j], z))
                    .fold(f64::INFINITY, f64::min),
            ),
            ConvexKind::ScaledSum { terms } => terms
                .iter()
                .fold(Finite(0.0), |acc, (w, f)| acc + f.minus_closed(u, z).scale(*w)),
        }
    }

    /// One-sided directional derivative in closed form.
    pub fn dir_deriv(&self, u: &[f64], z: &[f64], side: Side) -> Result<DirDerivResult, ConvexError> {
        self.require_domain(u)?;
        self.check_dim(z)?;
        let value = match side {
            Side::Plus => self.plus_closed(u, z),
            Side::Minus => self.minus_closed(u, z),
        };
        Ok(DirDerivResult {
            value,
            method: DirDerivMethod::ClosedForm,
            t_sequence: Vec::new(),
        })
    }

    /// Shorthand for the closed-form value.
    pub fn dd(&self, u: &[f64], z: &[f64], side: Side) -> Result<ExtendedReal, ConvexError> {
        self.dir_deriv(u, z, side).map(|r| r.value)
    }

    /// Directional derivative as the limit of difference quotients on a
    /// geometric step sequence. The quotient is monotone in the step, so
    /// the sequence is cut where rounding first breaks monotonicity and
    /// its last admissible element is reported.
    pub fn dir_deriv_numeric(
        &self,
        u: &[f64],
        z: &[f64],
        side: Side,
        seq: &StepSequence,
    ) -> Result<DirDerivResult, ConvexError> {
        self.require_domain(u)?;
        self.check_dim(z)?;
        let f0 = self.eval(u).finite().ok_or(ConvexError::OutsideDomain)?;
        // `sign` orients the step: the plus side walks t > 0 where the
        // quotient decreases toward the limit, the minus side t < 0 where
        // it increases. Working with `sign * quotient` makes both decreasing.
        let sign = match side {
            Side::Plus => 1.0,
            Side::Minus => -1.0,
        };
        let mut used = Vec::new();
        let mut last: Option<f64> = None;
        let mut prev: Option<f64> = None;
        let mut t = seq.t0;
        for _ in 0..seq.steps {
            let step = sign * t;
            let y: Vec<f64> = u.iter().zip(z).map(|(a, b)| a + step * b).collect();
            if let Finite(fy) = self.eval(&y) {
                let oriented = sign * (fy - f0) / step;
                if let Some(l) = last {
                    if oriented > l + 1e-12 * (1.0 + l.abs()) {
                        break;
                    }
                }
                prev = last;
                last = Some(oriented);
                used.push(step);
            }
            t *= seq.ratio;
        }
        let value = match last {
            // Outside the domain at every probed step: the quotient is
            // +inf on the plus side and -inf on the minus side.
            None => {
                if sign > 0.0 {
                    PosInf
                } else {
                    NegInf
                }
            }
            Some(l) => {
                let still_moving = prev.is_some_and(|p| l < p);
                if l < -seq.blowup && still_moving {
                    if sign > 0.0 {
                        NegInf
                    } else {
                        PosInf
                    }
                } else {
                    Finite(sign * l)
                }
            }
        };
        Ok(DirDerivResult {
            value,
            method: DirDerivMethod::LimitSequence,
            t_sequence: used,
        })
    }

    /// Sampled test of `u* in d phi(u)` through `<u*, z> >= phi'_-(u; z)`
    /// over the given directions.
    pub fn subdiff_contains(
        &self,
        u: &[f64],
        u_star: &[f64],
        directions: &DirectionSet,
        tol: f64,
    ) -> Result<bool, ConvexError> {
        self.require_domain(u)?;
        self.check_dim(u_star)?;
        for z in directions.iter() {
            let lower = self.minus_closed(u, z);
            if !lower.le_tol(Finite(dot(u_star, z)), tol) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Definitional test `<u*, y - u> + phi(u) <= phi(y) + tol` over sample
    /// points `y`.
    pub fn subgradient_inequality_holds(
        &self,
        u: &[f64],
        u_star: &[f64],
        points: &[Vec<f64>],
        tol: f64,
    ) -> Result<bool, ConvexError> {
        self.require_domain(u)?;
        let fu = self.eval(u).finite().ok_or(ConvexError::OutsideDomain)?;
        for y in points {
            let lhs = dot(u_star, &crate::vecops::sub(y, u)) + fu;
            if !Finite(lhs).le_tol(self.eval(y), tol) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// `d phi(u) = R ∩ [phi'_-(u), phi'_+(u)]` for `k = 1`.
    pub fn subdiff_interval_1d(&self, u: f64) -> Result<(ExtendedReal, ExtendedReal), ConvexError> {
        if self.dim != 1 {
            return Err(ConvexError::NotScalar(self.dim));
        }
        let p = [u];
        self.require_domain(&p)?;
        Ok((self.minus_closed(&p, &[1.0]), self.plus_closed(&p, &[1.0])))
    }

    /// Projection of `g` onto the closed convex set `d phi(u)`.
    fn project_subdiff(&self, u: &[f64], g: &[f64]) -> Option<Vec<f64>> {
        let k = self.dim;
        match &self.kind {
            ConvexKind::Zero => Some(vec![0.0; k]),
            ConvexKind::SeparableAbs => Some(
                u.iter()
                    .zip(g)
                    .map(|(&ui, &gi)| if ui != 0.0 { ui.signum() } else { gi.clamp(-1.0, 1.0) })
                    .collect(),
            ),
            ConvexKind::EuclideanNorm => {
                let n = norm(u);
                if n > 0.0 {
                    Some(u.iter().map(|x| x / n).collect())
                } else {
                    let gn = norm(g);
                    Some(if gn > 1.0 { g.iter().map(|x| x / gn).collect() } else { g.to_vec() })
                }
            }
            ConvexKind::Quadratic { q } => Some(mat_vec(q, k, u)),
            ConvexKind::NegatedQuadraticFault { q } => {
                Some(mat_vec(q, k, u).into_iter().map(|x| -x).collect())
            }
            ConvexKind::IndicatorBox { lo, hi } => Some(
                (0..k)
                    .map(|i| {
                        let at_lo = u[i] <= lo[i];
                        let at_hi = u[i] >= hi[i];
                        match (at_lo, at_hi) {
                            (true, true) => g[i],
                            (true, false) => g[i].min(0.0),
                            (false, true) => g[i].max(0.0),
                            (false, false) => 0.0,
                        }
                    })
                    .collect(),
            ),
            ConvexKind::IndicatorBall { center, radius } => {
                if Self::ball_active(center, *radius, u) {
                    let n: Vec<f64> = crate::vecops::sub(u, center)
                        .into_iter()
                        .map(|x| x / *radius)
                        .collect();
                    let nn = dot(&n, &n);
                    let alpha = (dot(g, &n) / nn).max(0.0);
                    Some(n.iter().map(|x| alpha * x).collect())
                } else {
                    Some(vec![0.0; k])
                }
            }
            ConvexKind::IndicatorHalfspace { normal, offset } => {
                let (s, tol) = Self::halfspace_slack(normal, *offset, u);
                if s >= -tol {
                    let alpha = (dot(g, normal) / dot(normal, normal)).max(0.0);
                    Some(normal.iter().map(|x| alpha * x).collect())
                } else {
                    Some(vec![0.0; k])
                }
            }
            ConvexKind::MaxOfAffine { slopes, intercepts } => {
                let rows: Vec<Vec<f64>> = Self::max_affine_active(slopes, intercepts, u)
                    .into_iter()
                    .map(|j| slopes[j].clone())
                    .collect();
                qp::project_onto_hull(&rows, g)
            }
            ConvexKind::ScaledSum { .. } => None,
        }
    }

    /// Least-norm element of `d phi(u)` and its norm.
    pub fn minimal_section(&self, u: &[f64]) -> MinimalSection {
        assert_eq!(u.len(), self.dim, "dimension mismatch in minimal_section");
        if !self.in_subdiff_domain(u) {
            return MinimalSection {
                vector: None,
                norm: PosInf,
            };
        }
        let zero = vec![0.0; self.dim];
        let vector = match &self.kind {
            ConvexKind::ScaledSum { terms } => sum_minimal_section(terms, u),
            _ => self.project_subdiff(u, &zero),
        };
        match vector {
            Some(v) => {
                let n = norm(&v);
                MinimalSection {
                    vector: Some(v),
                    norm: Finite(n),
                }
            }
            None => MinimalSection {
                vector: None,
                norm: PosInf,
            },
        }
    }

    /// `phi(prox(v)) + |v - prox(v)|^2 / (2 lambda)`.
    pub fn moreau_envelope(&self, lambda: f64, v: &[f64]) -> Result<f64, ConvexError> {
        let p = self.prox(lambda, v)?;
        let fp = self.eval(&p).finite().ok_or(ConvexError::OutsideDomain)?;
        let d = dist(v, &p);
        Ok(fp + d * d / (2.0 * lambda))
    }

    /// Closed-form `phi'_*` / `phi'^*` exist for every base kind: their
    /// `phi'_-(., z)` is l.s.c. and `phi'_+(., z)` u.s.c. on a closed
    /// `Dom(d phi)`, so the relaxed limits are attained at `u` itself.
    fn has_closed_form_limits(&self) -> bool {
        !matches!(self.kind, ConvexKind::ScaledSum { .. })
    }
}

fn sqrt_dim(k: usize) -> f64 {
    crate::vecops::sqrt(k as f64)
}

/// `z` (or `-z` when `orient < 0`) keeps `u + t z` in the box for small
/// `t > 0`.
fn box_direction_feasible(lo: &[f64], hi: &[f64], u: &[f64], z: &[f64], orient: f64) -> bool {
    (0..u.len()).all(|i| {
        let zi = orient * z[i];
        !((zi > 0.0 && u[i] >= hi[i]) || (zi < 0.0 && u[i] <= lo[i]))
    })
}

/// Least-norm point of `sum_j w_j d phi_j(u)`.
fn sum_minimal_section(terms: &[(f64, ConvexFunction)], u: &[f64]) -> Option<Vec<f64>> {
    let k = u.len();
    // Terms whose subdifferential is a singleton contribute a fixed vector;
    // probe with two far-apart targets.
    let probe_a = vec![1e3; k];
    let probe_b = vec![-1e3; k];
    let mut fixed = vec![0.0; k];
    let mut setvalued = Vec::new();
    for (j, (w, f)) in terms.iter().enumerate() {
        let a = f.project_subdiff(u, &probe_a)?;
        let b = f.project_subdiff(u, &probe_b)?;
        if a == b {
            for (o, x) in fixed.iter_mut().zip(&a) {
                *o += w * x;
            }
        } else {
            setvalued.push(j);
        }
    }
    match setvalued.len() {
        0 => Some(fixed),
        1 => {
            let (w, f) = &terms[setvalued[0]];
            let target: Vec<f64> = fixed.iter().map(|x| -x / w).collect();
            let g = f.project_subdiff(u, &target)?;
            Some(fixed.iter().zip(&g).map(|(c, gi)| c + w * gi).collect())
        }
        _ => {
            // Projected gradient on the product of the set-valued pieces for
            // min |fixed + sum_j w_j g_j|^2; iterates stay feasible, so the
            // result is always an element of the subdifferential.
            let lip: f64 = setvalued.iter().map(|&j| terms[j].0 * terms[j].0).sum();
            let step = 1.0 / lip;
            let mut gs: Vec<Vec<f64>> = setvalued
                .iter()
                .map(|&j| terms[j].1.project_subdiff(u, &vec![0.0; k]))
                .collect::<Option<Vec<_>>>()?;
            let total = |gs: &[Vec<f64>]| {
                let mut s = fixed.clone();
                for (g, &j) in gs.iter().zip(&setvalued) {
                    for (o, x) in s.iter_mut().zip(g) {
                        *o += terms[j].0 * x;
                    }
                }
                s
            };
            let mut s = total(&gs);
            for _ in 0..20_000 {
                let mut next = Vec::with_capacity(gs.len());
                for (g, &j) in gs.iter().zip(&setvalued) {
                    let w = terms[j].0;
                    let cand: Vec<f64> = g.iter().zip(&s).map(|(gi, si)| gi - step * w * si).collect();
                    next.push(terms[j].1.project_subdiff(u, &cand)?);
                }
                let s_next = total(&next);
                let change = dist(&s_next, &s);
                gs = next;
                s = s_next;
                if change <= 1e-15 * (1.0 + norm(&s)) {
                    break;
                }
            }
            Some(s)
        }
    }
}

/// Radius of a uniform sample in a `k`-ball of radius `r`.
#[inline]
pub(crate) fn ball_radius_sample(r: f64, uniform: f64, k: usize) -> f64 {
    r * libm::pow(uniform, 1.0 / k as f64)
}
