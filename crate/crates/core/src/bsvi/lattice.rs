//! Exact-expectation dynamic programming on a trinomial lattice (`d = 1`).
//!
//! From node `x_j` the one-step law of the Euler scheme has mean
//! `m = x_j + b h` and variance `v = sigma^2 h`. It is replaced by the
//! three-point law on `x_{c-1}, x_c, x_{c+1}`, `c` the node nearest to `m`,
//! that matches both moments. The backward step is the same proximal step
//! as the regression solver, so the two differ only through the transition
//! law and the conditional-expectation estimate.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{check_dims, Generator, SolverError, SolverOptions, TerminalMap};
use crate::convex::ConvexFunction;
use crate::sde::{CoefficientField, TimeGrid};
use crate::vecops::sqrt;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatticeSpec {
    pub n_steps: usize,
    pub n_space: usize,
    pub x_min: f64,
    pub x_max: f64,
}

impl LatticeSpec {
    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_space - 1) as f64
    }

    /// A lattice whose valid region at the first time covers `[lo, hi]`.
    pub fn auto(
        coeffs: &CoefficientField,
        grid: TimeGrid,
        lo: f64,
        hi: f64,
    ) -> Result<Self, SolverError> {
        Self::aligned(coeffs, grid, &[lo, hi])
    }

    /// A lattice covering all `points` at the first time, with the smallest
    /// point on a node. The spacing divides the smallest gap between points
    /// when that is compatible with nonnegative weights, so evenly spaced
    /// points are nodes; otherwise it sits mid-band and queries interpolate.
    pub fn aligned(
        coeffs: &CoefficientField,
        grid: TimeGrid,
        points: &[f64],
    ) -> Result<Self, SolverError> {
        if coeffs.dim() != 1 {
            return Err(SolverError::Lattice(String::from("lattice needs d = 1")));
        }
        if points.is_empty() || !points.iter().all(|p| p.is_finite()) {
            return Err(SolverError::Lattice(String::from("need finite points to cover")));
        }
        let mut sorted = points.to_vec();
        sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite points"));
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        let gap = sorted
            .windows(2)
            .map(|w| w[1] - w[0])
            .filter(|&g| g > 1e-12 * (1.0 + hi.abs().max(lo.abs())))
            .fold(f64::INFINITY, f64::min);
        let n = grid.n_steps();
        let h = grid.step();
        let mut a = lo;
        let mut b = hi;
        let mut spec = None;
        // The padded range feeds back into the variance range; a few rounds
        // settle it for the affine kinds.
        for _ in 0..8 {
            let (vmin, vmax, bmax) = ranges(coeffs, grid, a, b);
            if !(vmax > 0.0) {
                return Err(SolverError::Lattice(String::from(
                    "lattice needs a nondegenerate diffusion",
                )));
            }
            if vmax > 3.0 * vmin {
                return Err(SolverError::Lattice(format!(
                    "variance range [{vmin:.3e}, {vmax:.3e}] too wide for one spacing"
                )));
            }
            // need 4 vmax / 3 <= dx^2 <= 4 vmin
            let dx_lo = sqrt(4.0 * vmax / 3.0);
            let dx_hi = sqrt(4.0 * vmin);
            let mid = sqrt(dx_lo * dx_hi);
            let dx = if gap.is_finite() && gap >= dx_lo {
                let m = libm::ceil(gap / mid);
                [gap / m, gap / (m - 1.0).max(1.0)]
                    .into_iter()
                    .find(|&c| c >= dx_lo && c <= dx_hi)
                    .unwrap_or(mid)
            } else {
                mid
            };
            let shift = libm::ceil(bmax * h / dx) as usize + 1;
            let npad = (n + 1) * shift + 2;
            let x_min = lo - npad as f64 * dx;
            let n_space = libm::ceil((hi - lo) / dx - 1e-9) as usize + 2 * npad + 1;
            let s = LatticeSpec {
                n_steps: n,
                n_space,
                x_min,
                x_max: x_min + (n_space - 1) as f64 * dx,
            };
            let done = s.x_min >= a - 1e-12 && s.x_max <= b + 1e-12;
            a = a.min(s.x_min);
            b = b.max(s.x_max);
            spec = Some(s);
            if done {
                break;
            }
        }
        spec.ok_or_else(|| SolverError::Lattice(String::from("could not size lattice")))
    }
}

fn ranges(coeffs: &CoefficientField, grid: TimeGrid, a: f64, b: f64) -> (f64, f64, f64) {
    // affine coefficients: extremes of |sigma| and |b| over [a, b] sit at
    // the ends or, for |sigma|, at its zero
    let h = grid.step();
    let mut s = [0.0];
    let mut bb = [0.0];
    let mut vmin = f64::INFINITY;
    let mut vmax = 0.0f64;
    let mut bmax = 0.0f64;
    for x in [a, b] {
        coeffs.diffusion(grid.t_start(), &[x], &mut s);
        coeffs.drift(grid.t_start(), &[x], &mut bb);
        let v = s[0] * s[0] * h;
        vmin = vmin.min(v);
        vmax = vmax.max(v);
        bmax = bmax.max(bb[0].abs());
    }
    coeffs.diffusion(grid.t_start(), &[a], &mut s);
    let sa = s[0];
    coeffs.diffusion(grid.t_start(), &[b], &mut s);
    if sa * s[0] < 0.0 {
        vmin = 0.0;
    }
    (vmin, vmax, bmax)
}

/// Values on `times x nodes`, each time with its valid node range.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeField {
    pub grid: TimeGrid,
    pub spec: LatticeSpec,
    pub k: usize,
    /// `[time][node][k]`
    pub values: Vec<f64>,
    /// Inclusive node range with a complete backward cone, per time.
    pub valid: Vec<(usize, usize)>,
}

impl LatticeField {
    pub fn x(&self, j: usize) -> f64 {
        self.spec.x_min + j as f64 * self.spec.dx()
    }

    pub fn node(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.spec.n_space + j) * self.k;
        &self.values[o..o + self.k]
    }

    /// `u(t, x)`: `t` must be a lattice time; linear interpolation in `x`
    /// inside the valid range.
    pub fn value(&self, t: f64, x: f64) -> Result<Vec<f64>, SolverError> {
        let i = self.grid.index_of(t).ok_or(SolverError::OutsideLattice { t, x })?;
        let (lo, hi) = self.valid[i];
        let dx = self.spec.dx();
        let r = (x - self.spec.x_min) / dx;
        if !(r >= lo as f64 - 1e-9 && r <= hi as f64 + 1e-9) {
            return Err(SolverError::OutsideLattice { t, x });
        }
        let j = (libm::floor(r) as usize).clamp(lo, hi.max(lo + 1) - 1).min(hi);
        if j == hi {
            return Ok(self.node(i, hi).to_vec());
        }
        let w = (r - j as f64).clamp(0.0, 1.0);
        let a = self.node(i, j);
        let b = self.node(i, j + 1);
        Ok(a.iter().zip(b).map(|(p, q)| (1.0 - w) * p + w * q).collect())
    }
}

/// Backward dynamic programming with exact trinomial expectations.
pub fn lattice_solve(
    coeffs: &CoefficientField,
    gen: &Generator,
    term: &TerminalMap,
    phi: &ConvexFunction,
    grid: TimeGrid,
    spec: LatticeSpec,
    opts: &SolverOptions,
) -> Result<LatticeField, SolverError> {
    if coeffs.dim() != 1 {
        return Err(SolverError::Lattice(String::from("lattice needs d = 1")));
    }
    if spec.n_steps != grid.n_steps() || spec.n_space < 3 || !(spec.x_max > spec.x_min) {
        return Err(SolverError::Lattice(format!("inconsistent lattice spec {spec:?}")));
    }
    let k = check_dims(1, gen, term, phi)?;
    let n = grid.n_steps();
    let m = spec.n_space;
    let h = grid.step();
    let dx = spec.dx();
    let mut values = vec![0.0; (n + 1) * m * k];
    let mut valid = vec![(0usize, m - 1); n + 1];
    for j in 0..m {
        let x = spec.x_min + j as f64 * dx;
        let o = (n * m + j) * k;
        term.eval(&[x], &mut values[o..o + k]);
    }
    let mut s = [0.0];
    let mut b = [0.0];
    let mut c = vec![0.0; k];
    let mut ytilde = vec![0.0; k];
    for i in (0..n).rev() {
        let t = grid.node(i);
        let (vlo, vhi) = valid[i + 1];
        let mut lo = usize::MAX;
        let mut hi = 0usize;
        for j in 0..m {
            let x = spec.x_min + j as f64 * dx;
            coeffs.drift(t, &[x], &mut b);
            coeffs.diffusion(t, &[x], &mut s);
            let mean = x + b[0] * h;
            let var = s[0] * s[0] * h;
            let cr = libm::round((mean - spec.x_min) / dx);
            if cr < 1.0 || cr > (m - 2) as f64 {
                continue;
            }
            let ci = cr as usize;
            if ci - 1 < vlo || ci + 1 > vhi {
                continue;
            }
            let e = mean - (spec.x_min + ci as f64 * dx);
            let second = (var + e * e) / (dx * dx);
            let pu = 0.5 * second + 0.5 * e / dx;
            let pd = 0.5 * second - 0.5 * e / dx;
            let pm = 1.0 - second;
            if pu < 0.0 || pd < 0.0 || pm < 0.0 {
                return Err(SolverError::LatticeWeights { t, x, pd, pm, pu });
            }
            let next = |jj: usize| ((i + 1) * m + jj) * k;
            for a in 0..k {
                c[a] = pd * values[next(ci - 1) + a] + pm * values[next(ci) + a] + pu * values[next(ci + 1) + a];
            }
            super::generator_step(gen, opts, t, h, &[x], &c, i, &mut ytilde)?;
            let o = (i * m + j) * k;
            if opts.apply_prox {
                let y = phi.prox(h, &ytilde)?;
                values[o..o + k].copy_from_slice(&y);
            } else {
                values[o..o + k].copy_from_slice(&ytilde);
            }
            lo = lo.min(j);
            hi = hi.max(j);
        }
        if lo > hi {
            return Err(SolverError::Lattice(format!("valid region vanished at step {i}")));
        }
        valid[i] = (lo, hi);
    }
    Ok(LatticeField {
        grid,
        spec,
        k,
        values,
        valid,
    })
}
