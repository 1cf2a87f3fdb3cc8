//! Backward proximal time stepping for the BSVI
//! `Y_s + int_s^T U_r dr = h(X_T) + int_s^T f(r, X_r, Y_r) dr - int_s^T Z_r dW_r`,
//! `(Y, U) in d phi`.
//!
//! Each step regresses `Y_{i+1}` on the current state, adds the generator
//! explicitly (or through a fixed point), resolves the `d phi` term with a
//! prox of step `h`, and reads `U` off the prox residual.

pub mod lattice;
pub mod regression;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::convex::{ConvexError, ConvexFunction, DirectionSet};
use crate::ext::{ExtendedReal, Finite};
use crate::sde::{PathEnsemble, SdeError, TimeGrid};
use crate::vecops::{dot, norm, powi};

pub use lattice::{lattice_solve, LatticeField, LatticeSpec};
pub use regression::RegressionBasis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Convex(#[from] ConvexError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error("invalid generator: {0}")]
    Generator(String),
    #[error("invalid terminal map: {0}")]
    Terminal(String),
    #[error("implicit generator step {step} did not converge in {iterations} iterations")]
    ImplicitNotConverged { step: usize, iterations: usize },
    #[error("regression failed at step {step}: {reason}")]
    Regression { step: usize, reason: String },
    #[error("negative trinomial weight at t = {t}, x = {x} (p_d = {pd:.3e}, p_m = {pm:.3e}, p_u = {pu:.3e})")]
    LatticeWeights { t: f64, x: f64, pd: f64, pm: f64, pu: f64 },
    #[error("lattice: {0}")]
    Lattice(String),
    #[error("point (t = {t}, x = {x}) is outside the lattice's valid region")]
    OutsideLattice { t: f64, x: f64 },
    #[error("non-finite value produced at step {step}")]
    NonFinite { step: usize },
}

/// `g(t, x)`, a source term with values in `R^k`.
#[derive(Clone, Debug, PartialEq)]
pub enum SourceTerm {
    Constant(Vec<f64>),
    /// `A x + c`, `A` row-major `k x d`.
    Affine { a: Vec<f64>, c: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum GeneratorKind {
    Zero,
    /// `f = c`
    Constant(Vec<f64>),
    /// `f = gamma y`
    LinearInY { gamma: f64 },
    /// `f = g(t, x) + gamma y`
    Separable { g: SourceTerm, gamma: f64 },
    /// `f = gamma y + omega J y` on `R^2`, `J` the quarter rotation; the
    /// skew part drops out of `<y - y', f(y) - f(y')>`.
    DampedRotation { gamma: f64, omega: f64 },
}

/// Generator `f(t, x, y)`, monotone in `y` with constant `gamma`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    kind: GeneratorKind,
    k: usize,
    d: usize,
}

impl Generator {
    pub fn new(kind: GeneratorKind, k: usize, d: usize) -> Result<Self, SolverError> {
        let err = |m: &str| Err(SolverError::Generator(String::from(m)));
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match &kind {
            GeneratorKind::Zero => {}
            GeneratorKind::Constant(c) => {
                if c.len() != k || !finite(c) {
                    return err("constant generator must have k finite entries");
                }
            }
            GeneratorKind::LinearInY { gamma } => {
                if !gamma.is_finite() {
                    return err("gamma must be finite");
                }
            }
            GeneratorKind::Separable { g, gamma } => {
                if !gamma.is_finite() {
                    return err("gamma must be finite");
                }
                match g {
                    SourceTerm::Constant(c) => {
                        if c.len() != k || !finite(c) {
                            return err("source constant must have k finite entries");
                        }
                    }
                    SourceTerm::Affine { a, c } => {
                        if a.len() != k * d || c.len() != k || !finite(a) || !finite(c) {
                            return err("affine source needs a finite k x d matrix and a k-vector");
                        }
                    }
                }
            }
            GeneratorKind::DampedRotation { gamma, omega } => {
                if k != 2 {
                    return err("damped rotation needs k = 2");
                }
                if !gamma.is_finite() || !omega.is_finite() {
                    return err("rotation parameters must be finite");
                }
            }
        }
        Ok(Self { kind, k, d })
    }

    pub fn zero(k: usize, d: usize) -> Self {
        Self { kind: GeneratorKind::Zero, k, d }
    }

    pub fn kind(&self) -> &GeneratorKind {
        &self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn eval(&self, _t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        match &self.kind {
            GeneratorKind::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            GeneratorKind::Constant(c) => out.copy_from_slice(c),
            GeneratorKind::LinearInY { gamma } => {
                for (o, yi) in out.iter_mut().zip(y) {
                    *o = gamma * yi;
                }
            }
            GeneratorKind::Separable { g, gamma } => {
                match g {
                    SourceTerm::Constant(c) => out.copy_from_slice(c),
                    SourceTerm::Affine { a, c } => {
                        for i in 0..self.k {
                            out[i] = c[i] + dot(&a[i * self.d..(i + 1) * self.d], x);
                        }
                    }
                }
                for (o, yi) in out.iter_mut().zip(y) {
                    *o += gamma * yi;
                }
            }
            GeneratorKind::DampedRotation { gamma, omega } => {
                out[0] = gamma * y[0] - omega * y[1];
                out[1] = gamma * y[1] + omega * y[0];
            }
        }
    }

    /// Smallest `gamma` with `<y - y', f(y) - f(y')> <= gamma |y - y'|^2`.
    pub fn monotonicity_constant(&self) -> f64 {
        match &self.kind {
            GeneratorKind::Zero | GeneratorKind::Constant(_) => 0.0,
            GeneratorKind::LinearInY { gamma }
            | GeneratorKind::Separable { gamma, .. }
            | GeneratorKind::DampedRotation { gamma, .. } => *gamma,
        }
    }

    /// Lipschitz constant in `y`.
    pub fn lipschitz_y(&self) -> f64 {
        match &self.kind {
            GeneratorKind::Zero | GeneratorKind::Constant(_) => 0.0,
            GeneratorKind::LinearInY { gamma } | GeneratorKind::Separable { gamma, .. } => gamma.abs(),
            GeneratorKind::DampedRotation { gamma, omega } => libm::hypot(*gamma, *omega),
        }
    }

    pub fn depends_on_y(&self) -> bool {
        self.lipschitz_y() != 0.0
    }
}

/// One component of the terminal map.
#[derive(Clone, Debug, PartialEq)]
pub enum TerminalFn {
    /// `sum_m c_m x_axis^m`
    Polynomial { axis: usize, coeffs: Vec<f64> },
    /// `(x_axis - strike)^+`
    PositivePart { axis: usize, strike: f64 },
    /// `|x|`
    Norm,
}

/// Terminal condition `h: R^d -> R^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalMap {
    comps: Vec<TerminalFn>,
    d: usize,
}

impl TerminalMap {
    pub fn new(comps: Vec<TerminalFn>, d: usize) -> Result<Self, SolverError> {
        if comps.is_empty() || d == 0 {
            return Err(SolverError::Terminal(String::from("need k >= 1 components and d >= 1")));
        }
        for c in &comps {
            let ok = match c {
                TerminalFn::Polynomial { axis, coeffs } => {
                    *axis < d && !coeffs.is_empty() && coeffs.iter().all(|x| x.is_finite())
                }
                TerminalFn::PositivePart { axis, strike } => *axis < d && strike.is_finite(),
                TerminalFn::Norm => true,
            };
            if !ok {
                return Err(SolverError::Terminal(format!("invalid component {c:?}")));
            }
        }
        Ok(Self { comps, d })
    }

    pub fn components(&self) -> &[TerminalFn] {
        &self.comps
    }

    pub fn k(&self) -> usize {
        self.comps.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.comps) {
            *o = match c {
                TerminalFn::Polynomial { axis, coeffs } => {
                    coeffs.iter().rev().fold(0.0, |acc, &cm| acc * x[*axis] + cm)
                }
                TerminalFn::PositivePart { axis, strike } => (x[*axis] - strike).max(0.0),
                TerminalFn::Norm => norm(x),
            };
        }
    }

    pub fn eval_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k()];
        self.eval(x, &mut out);
        out
    }

    /// Growth exponent `p` with `|h(x)| <= M1 (1 + |x|^p)`.
    pub fn growth_exponent(&self) -> u32 {
        self.comps
            .iter()
            .map(|c| match c {
                TerminalFn::Polynomial { coeffs, .. } => {
                    coeffs.iter().rposition(|&x| x != 0.0).unwrap_or(0) as u32
                }
                _ => 1,
            })
            .max()
            .unwrap_or(0)
    }

    /// A constant `M1` valid for `growth_exponent()`, from
    /// `|x_a|^m <= 1 + |x|^p` for `m <= p` and `|h| <= sum_j |h_j|`.
    pub fn growth_constant(&self) -> f64 {
        self.comps
            .iter()
            .map(|c| match c {
                TerminalFn::Polynomial { coeffs, .. } => coeffs.iter().map(|x| x.abs()).sum::<f64>(),
                TerminalFn::PositivePart { strike, .. } => 1.0 + strike.abs(),
                TerminalFn::Norm => 1.0,
            })
            .sum::<f64>()
            .max(f64::MIN_POSITIVE)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    Regression,
    Lattice,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Regression => "regression",
            Backend::Lattice => "lattice",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub basis: RegressionBasis,
    /// Solve `y = c + h f(t, x, y)` by fixed point instead of the explicit
    /// `y = c + h f(t, x, c)`.
    pub implicit: bool,
    pub implicit_tol: f64,
    pub implicit_max_iter: usize,
    /// Two-sided tail mass clipped from each regressor.
    pub winsor: f64,
    /// `false` skips the prox and sets `U = 0` (the plain backward scheme).
    pub apply_prox: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            basis: RegressionBasis::default(),
            implicit: false,
            implicit_tol: 1e-13,
            implicit_max_iter: 10_000,
            winsor: 5e-4,
            apply_prox: true,
        }
    }
}

/// Discrete `(Y, Z, U)` per path and step.
#[derive(Clone, Debug, PartialEq)]
pub struct BsvTriple {
    pub n_paths: usize,
    pub k: usize,
    pub d: usize,
    pub grid: TimeGrid,
    pub backend: Backend,
    /// `[path][0..=N][k]`
    pub y: Vec<f64>,
    /// `[path][0..N][k][d]`
    pub z: Vec<f64>,
    /// `[path][0..N][k]`
    pub u: Vec<f64>,
    pub warnings: Vec<String>,
}

impl BsvTriple {
    pub fn y_at(&self, path: usize, i: usize) -> &[f64] {
        let o = (path * (self.grid.n_steps() + 1) + i) * self.k;
        &self.y[o..o + self.k]
    }

    pub fn u_at(&self, path: usize, i: usize) -> &[f64] {
        let o = (path * self.grid.n_steps() + i) * self.k;
        &self.u[o..o + self.k]
    }

    /// `Z_i` on `path`, row-major `k x d`.
    pub fn z_at(&self, path: usize, i: usize) -> &[f64] {
        let kd = self.k * self.d;
        let o = (path * self.grid.n_steps() + i) * kd;
        &self.z[o..o + kd]
    }

    /// Cross-path mean of `Y_0`.
    pub fn y0_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.k];
        for p in 0..self.n_paths {
            for (o, v) in m.iter_mut().zip(self.y_at(p, 0)) {
                *o += v;
            }
        }
        m.iter_mut().for_each(|x| *x /= self.n_paths as f64);
        m
    }
}

/// `y = c + h f(t, x, y)`, `f` explicit or by fixed point.
fn generator_step(
    gen: &Generator,
    opts: &SolverOptions,
    t: f64,
    h: f64,
    x: &[f64],
    c: &[f64],
    step: usize,
    out: &mut [f64],
) -> Result<(), SolverError> {
    let k = c.len();
    let mut fv = vec![0.0; k];
    gen.eval(t, x, c, &mut fv);
    for i in 0..k {
        out[i] = c[i] + h * fv[i];
    }
    if opts.implicit && gen.depends_on_y() {
        for _ in 0..opts.implicit_max_iter {
            gen.eval(t, x, out, &mut fv);
            let mut change = 0.0f64;
            for i in 0..k {
                let next = c[i] + h * fv[i];
                change = change.max((next - out[i]).abs());
                out[i] = next;
            }
            if change <= opts.implicit_tol * (1.0 + norm(out)) {
                return Ok(());
            }
        }
        return Err(SolverError::ImplicitNotConverged {
            step,
            iterations: opts.implicit_max_iter,
        });
    }
    Ok(())
}

pub(crate) fn check_dims(
    d: usize,
    gen: &Generator,
    term: &TerminalMap,
    phi: &ConvexFunction,
) -> Result<usize, SolverError> {
    let k = phi.dim();
    let checks = [
        ("terminal map output", k, term.k()),
        ("generator output", k, gen.k()),
        ("terminal map input", d, term.d()),
        ("generator input", d, gen.d()),
    ];
    for (what, expected, got) in checks {
        if expected != got {
            return Err(SolverError::Dimension { what, expected, got });
        }
    }
    Ok(k)
}

/// Backward scheme over `ens` with least-squares conditional expectations.
pub fn solve(
    ens: &PathEnsemble,
    gen: &Generator,
    term: &TerminalMap,
    phi: &ConvexFunction,
    opts: &SolverOptions,
) -> Result<BsvTriple, SolverError> {
    let d = ens.dim();
    let k = check_dims(d, gen, term, phi)?;
    let grid = ens.grid();
    let n = grid.n_steps();
    let h = grid.step();
    let np = ens.n_paths();
    let mut y = vec![0.0; np * (n + 1) * k];
    let mut z = vec![0.0; np * n * k * d];
    let mut u = vec![0.0; np * n * k];
    let mut warnings = Vec::new();
    for p in 0..np {
        let o = (p * (n + 1) + n) * k;
        term.eval(ens.state(p, n), &mut y[o..o + k]);
    }

    let q = k + k * d;
    let mut xs = vec![0.0; np * d];
    let mut targets = vec![0.0; np * q];
    let mut ytilde = vec![0.0; k];
    for i in (0..n).rev() {
        let t = grid.node(i);
        for p in 0..np {
            xs[p * d..(p + 1) * d].copy_from_slice(ens.state(p, i));
            let yn = &y[(p * (n + 1) + i + 1) * k..(p * (n + 1) + i + 2) * k];
            let dw = ens.increment(p, i);
            let row = &mut targets[p * q..(p + 1) * q];
            row[..k].copy_from_slice(yn);
            for a in 0..k {
                for b in 0..d {
                    row[k + a * d + b] = yn[a] * dw[b] / h;
                }
            }
        }
        let fit = regression::regress(&xs, d, &targets, q, &opts.basis, opts.winsor)
            .map_err(|reason| SolverError::Regression { step: i, reason })?;
        if let Some(w) = fit.warning {
            warnings.push(format!("step {i}: {w}"));
        }
        for p in 0..np {
            let row = &fit.fitted[p * q..(p + 1) * q];
            let c = &row[..k];
            generator_step(gen, opts, t, h, ens.state(p, i), c, i, &mut ytilde)?;
            let yo = (p * (n + 1) + i) * k;
            let uo = (p * n + i) * k;
            if opts.apply_prox {
                let yi = phi.prox(h, &ytilde)?;
                for a in 0..k {
                    u[uo + a] = (ytilde[a] - yi[a]) / h;
                }
                y[yo..yo + k].copy_from_slice(&yi);
            } else {
                y[yo..yo + k].copy_from_slice(&ytilde);
            }
            if !y[yo..yo + k].iter().all(|v| v.is_finite()) {
                return Err(SolverError::NonFinite { step: i });
            }
            let zo = (p * n + i) * k * d;
            z[zo..zo + k * d].copy_from_slice(&row[k..]);
        }
    }
    Ok(BsvTriple {
        n_paths: np,
        k,
        d,
        grid,
        backend: Backend::Regression,
        y,
        z,
        u,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatnessReport {
    /// Path-steps `i < N` examined.
    pub checked: usize,
    /// Path-steps where `U_i` failed the subgradient test at `Y_i`.
    pub violations: usize,
    pub violation_fraction: f64,
    /// Path-steps `i < N` with `Y_i` outside `Dom(phi)`.
    pub domain_violations: usize,
    /// Mean of `phi(Y_i)` over path-steps `i < N`.
    pub mean_phi: ExtendedReal,
}

impl FlatnessReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.domain_violations == 0 && self.mean_phi.is_finite()
    }
}

/// Tests `(Y_i, U_i) in d phi` on every path-step `i < N`; the tolerance is
/// relative to `1 + |U_i|`.
pub fn flatness_check(
    triple: &BsvTriple,
    phi: &ConvexFunction,
    tol: f64,
    directions: &DirectionSet,
) -> FlatnessReport {
    let n = triple.grid.n_steps();
    let mut checked = 0;
    let mut violations = 0;
    let mut domain_violations = 0;
    let mut sum = Finite(0.0);
    for p in 0..triple.n_paths {
        for i in 0..n {
            checked += 1;
            let yi = triple.y_at(p, i);
            let ui = triple.u_at(p, i);
            let val = phi.eval(yi);
            sum = sum + val;
            if !val.is_finite() {
                domain_violations += 1;
                violations += 1;
                continue;
            }
            match phi.subdiff_contains(yi, ui, directions, tol * (1.0 + norm(ui))) {
                Ok(true) => {}
                _ => violations += 1,
            }
        }
    }
    let mean_phi = match sum {
        Finite(s) if checked > 0 => Finite(s / checked as f64),
        other => other,
    };
    FlatnessReport {
        checked,
        violations,
        violation_fraction: if checked == 0 { 0.0 } else { violations as f64 / checked as f64 },
        domain_violations,
        mean_phi,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    /// `E sup_i |Y_i|^2` over paths.
    pub sup_moment: f64,
    /// `sup_moment / (1 + |x|^2)`.
    pub ratio: f64,
}

pub fn stability_check(triple: &BsvTriple, x: &[f64]) -> StabilityReport {
    let n = triple.grid.n_steps();
    let mut acc = 0.0;
    for p in 0..triple.n_paths {
        let m = (0..=n)
            .map(|i| dot(triple.y_at(p, i), triple.y_at(p, i)))
            .fold(0.0f64, f64::max);
        acc += m;
    }
    let sup_moment = acc / triple.n_paths.max(1) as f64;
    StabilityReport {
        sup_moment,
        ratio: sup_moment / (1.0 + powi(norm(x), 2)),
    }
}
