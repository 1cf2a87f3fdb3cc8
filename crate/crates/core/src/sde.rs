//! Forward diffusion `dX = b(s, X) ds + sigma(s, X) dW`, `X_t = x`, simulated
//! by Euler–Maruyama on a uniform grid.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::rng::{derive_seed, fill_normals, inverse_normal_cdf, normal_words, permutation, uniform, StreamKey};
use crate::vecops::{norm, powi, sqrt};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("invalid time grid: {0}")]
    Grid(String),
    #[error("invalid coefficients: {0}")]
    Coefficients(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite state on path {path} at step {step}")]
    NonFinite { path: usize, step: usize },
    #[error("need at least one path per batch ({paths} paths, {batches} batches)")]
    TooFewPaths { paths: usize, batches: usize },
    #[error("time {s} is not on the grid")]
    OffGrid { s: f64 },
}

/// Drift `b(t, x)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Drift {
    Zero,
    Constant(Vec<f64>),
    /// `A x + c`, `A` row-major `d x d`.
    Affine { a: Vec<f64>, c: Vec<f64> },
}

/// Diffusion matrix `sigma(t, x)`, square `d x d`.
#[derive(Clone, Debug, PartialEq)]
pub enum Diffusion {
    Zero,
    /// Row-major `d x d`.
    Constant(Vec<f64>),
    /// `diag(slope_i x_i + intercept_i)`.
    DiagonalAffine { slope: Vec<f64>, intercept: Vec<f64> },
}

/// Time-homogeneous affine coefficients; all kinds are globally Lipschitz.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientField {
    d: usize,
    drift: Drift,
    diffusion: Diffusion,
}

fn bad<T>(msg: &str) -> Result<T, SdeError> {
    Err(SdeError::Coefficients(String::from(msg)))
}

impl CoefficientField {
    pub fn new(d: usize, drift: Drift, diffusion: Diffusion) -> Result<Self, SdeError> {
        if d == 0 {
            return bad("state dimension must be positive");
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match &drift {
            Drift::Zero => {}
            Drift::Constant(c) => {
                if c.len() != d || !finite(c) {
                    return bad("constant drift must have d finite entries");
                }
            }
            Drift::Affine { a, c } => {
                if a.len() != d * d || c.len() != d || !finite(a) || !finite(c) {
                    return bad("affine drift needs a finite d x d matrix and a d-vector");
                }
            }
        }
        match &diffusion {
            Diffusion::Zero => {}
            Diffusion::Constant(s) => {
                if s.len() != d * d || !finite(s) {
                    return bad("constant diffusion must be a finite d x d matrix");
                }
            }
            Diffusion::DiagonalAffine { slope, intercept } => {
                if slope.len() != d || intercept.len() != d || !finite(slope) || !finite(intercept) {
                    return bad("diagonal-affine diffusion needs d slopes and d intercepts");
                }
            }
        }
        Ok(Self { d, drift, diffusion })
    }

    /// `b = 0`, `sigma = s I`.
    pub fn brownian(d: usize, s: f64) -> Self {
        let mut m = vec![0.0; d * d];
        (0..d).for_each(|i| m[i * d + i] = s);
        Self {
            d,
            drift: Drift::Zero,
            diffusion: Diffusion::Constant(m),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn drift_kind(&self) -> &Drift {
        &self.drift
    }

    pub fn diffusion_kind(&self) -> &Diffusion {
        &self.diffusion
    }

    pub fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        match &self.drift {
            Drift::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            Drift::Constant(c) => out.copy_from_slice(c),
            Drift::Affine { a, c } => {
                for i in 0..self.d {
                    out[i] = c[i] + (0..self.d).map(|j| a[i * self.d + j] * x[j]).sum::<f64>();
                }
            }
        }
    }

    /// Row-major `sigma(t, x)`.
    pub fn diffusion(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        match &self.diffusion {
            Diffusion::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            Diffusion::Constant(s) => out.copy_from_slice(s),
            Diffusion::DiagonalAffine { slope, intercept } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for i in 0..self.d {
                    out[i * self.d + i] = slope[i] * x[i] + intercept[i];
                }
            }
        }
    }

    /// Row-major `sigma sigma'` at `(t, x)`.
    pub fn covariance(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut s = vec![0.0; d * d];
        self.diffusion(t, x, &mut s);
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..d).map(|l| s[i * d + l] * s[j * d + l]).sum();
            }
        }
        a
    }

    /// A Lipschitz constant in `x` shared by `b` and `sigma` (Frobenius
    /// norms of the linear parts).
    pub fn lipschitz_constant(&self) -> f64 {
        let lb = match &self.drift {
            Drift::Affine { a, .. } => norm(a),
            _ => 0.0,
        };
        let ls = match &self.diffusion {
            Diffusion::DiagonalAffine { slope, .. } => slope.iter().fold(0.0f64, |m, s| m.max(s.abs())),
            _ => 0.0,
        };
        lb.max(ls)
    }

    pub fn is_deterministic(&self) -> bool {
        match &self.diffusion {
            Diffusion::Zero => true,
            Diffusion::Constant(s) => s.iter().all(|&x| x == 0.0),
            Diffusion::DiagonalAffine { slope, intercept } => {
                slope.iter().chain(intercept).all(|&x| x == 0.0)
            }
        }
    }
}

/// Uniform nodes `t_i = t_start + i h`, `h = (t_end - t_start) / n_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self, SdeError> {
        if !(t_start.is_finite() && t_end.is_finite()) || t_start >= t_end {
            return Err(SdeError::Grid(alloc::format!(
                "need finite t_start < T, got [{t_start}, {t_end}]"
            )));
        }
        if n_steps == 0 {
            return Err(SdeError::Grid(String::from("n_steps must be at least 1")));
        }
        Ok(Self {
            t_start,
            t_end,
            n_steps,
        })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn step(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.t_end
        } else {
            self.t_start + i as f64 * self.step()
        }
    }

    /// Index of the node at time `s`, if `s` is a node up to rounding.
    pub fn index_of(&self, s: f64) -> Option<usize> {
        let r = (s - self.t_start) / self.step();
        let i = libm::round(r);
        if i >= 0.0 && i <= self.n_steps as f64 && (r - i).abs() <= 1e-9 {
            Some(i as usize)
        } else {
            None
        }
    }
}

/// How Brownian increments are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Independent `N(0, h I)` increments.
    Plain,
    /// Paths are split into `batches` blocks. Within a block the terminal
    /// value `W_T` is Latin-hypercube stratified per coordinate and the
    /// increments are filled in by a Brownian bridge. Blocks are
    /// independent replicates.
    StratifiedBridge { batches: usize },
}

impl Sampling {
    pub fn batches(&self) -> usize {
        match self {
            Sampling::Plain => 1,
            Sampling::StratifiedBridge { batches } => *batches,
        }
    }
}

/// Simulated paths from a common origin.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    d: usize,
    n_paths: usize,
    grid: TimeGrid,
    origin: Vec<f64>,
    seed: u64,
    /// `[path][step 0..=N][coord]`
    states: Vec<f64>,
    /// `[path][step 0..N][coord]`
    increments: Vec<f64>,
    /// Half-open path ranges of the independent replicate blocks.
    batches: Vec<(usize, usize)>,
}

/// Split of `n` items into `b` nearly equal contiguous blocks.
pub fn block_ranges(n: usize, b: usize) -> Vec<(usize, usize)> {
    let base = n / b;
    let extra = n % b;
    let mut out = Vec::with_capacity(b);
    let mut start = 0;
    for i in 0..b {
        let len = base + usize::from(i < extra);
        out.push((start, start + len));
        start += len;
    }
    out
}

/// Simulates `n_paths` Euler–Maruyama paths of `coeffs` from `(grid.t_start, x)`.
/// Every path's noise is addressed by `(seed, path index)`, so the result is
/// independent of how the caller schedules work.
pub fn simulate(
    coeffs: &CoefficientField,
    x: &[f64],
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    sampling: Sampling,
) -> Result<PathEnsemble, SdeError> {
    let d = coeffs.dim();
    if x.len() != d {
        return Err(SdeError::Dimension {
            expected: d,
            got: x.len(),
        });
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(SdeError::NonFinite { path: 0, step: 0 });
    }
    let b = sampling.batches();
    if b == 0 || n_paths < b {
        return Err(SdeError::TooFewPaths {
            paths: n_paths,
            batches: b,
        });
    }
    let n = grid.n_steps();
    let h = grid.step();
    let sh = sqrt(h);
    let key = StreamKey::new(derive_seed(seed, &[0x5DE]));
    let batches = block_ranges(n_paths, b);
    let mut increments = vec![0.0; n_paths * n * d];
    let mut xi = vec![0.0; n * d];

    match sampling {
        Sampling::Plain => {
            for p in 0..n_paths {
                let mut rng = key.at(p as u64, 0);
                fill_normals(&mut rng, &mut xi);
                let dst = &mut increments[p * n * d..(p + 1) * n * d];
                for (o, z) in dst.iter_mut().zip(&xi) {
                    *o = sh * z;
                }
            }
        }
        Sampling::StratifiedBridge { .. } => {
            let horizon = grid.t_end() - grid.t_start();
            let block_key = StreamKey::new(derive_seed(seed, &[0xB10C]));
            for (bi, &(lo, hi)) in batches.iter().enumerate() {
                let m = hi - lo;
                let mut prng = block_key.at(bi as u64, 0);
                let perms: Vec<Vec<usize>> = (0..d).map(|_| permutation(&mut prng, m)).collect();
                for p in lo..hi {
                    let mut rng = key.at(p as u64, 0);
                    fill_normals(&mut rng, &mut xi);
                    let mut jitter = key.at(p as u64, normal_words(n * d));
                    let mut w_end = vec![0.0; d];
                    for (j, w) in w_end.iter_mut().enumerate() {
                        let strat = (perms[j][p - lo] as f64 + uniform(&mut jitter)) / m as f64;
                        let q = strat.clamp(1e-300, 1.0 - 1e-16);
                        *w = sqrt(horizon) * inverse_normal_cdf(q);
                    }
                    let dst = &mut increments[p * n * d..(p + 1) * n * d];
                    let mut w = vec![0.0; d];
                    for i in 0..n {
                        let left = (n - i) as f64;
                        let var = h * (left - 1.0) / left;
                        for j in 0..d {
                            let dw = if i + 1 == n {
                                w_end[j] - w[j]
                            } else {
                                (w_end[j] - w[j]) / left + sqrt(var) * xi[i * d + j]
                            };
                            dst[i * d + j] = dw;
                            w[j] += dw;
                        }
                    }
                }
            }
        }
    }

    let mut states = vec![0.0; n_paths * (n + 1) * d];
    let mut bvec = vec![0.0; d];
    let mut smat = vec![0.0; d * d];
    for p in 0..n_paths {
        let base = p * (n + 1) * d;
        states[base..base + d].copy_from_slice(x);
        for i in 0..n {
            let t = grid.node(i);
            let (cur, next) = states[base + i * d..base + (i + 2) * d].split_at_mut(d);
            coeffs.drift(t, cur, &mut bvec);
            coeffs.diffusion(t, cur, &mut smat);
            let dw = &increments[(p * n + i) * d..(p * n + i + 1) * d];
            for r in 0..d {
                let noise: f64 = (0..d).map(|c| smat[r * d + c] * dw[c]).sum();
                next[r] = cur[r] + bvec[r] * h + noise;
            }
            if !next.iter().all(|v| v.is_finite()) {
                return Err(SdeError::NonFinite { path: p, step: i + 1 });
            }
        }
    }
    Ok(PathEnsemble {
        d,
        n_paths,
        grid,
        origin: x.to_vec(),
        seed,
        states,
        increments,
        batches,
    })
}

impl PathEnsemble {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn batches(&self) -> &[(usize, usize)] {
        &self.batches
    }

    /// `X_{t_i}` on `path`.
    pub fn state(&self, path: usize, i: usize) -> &[f64] {
        let n = self.grid.n_steps();
        let o = (path * (n + 1) + i) * self.d;
        &self.states[o..o + self.d]
    }

    /// `Delta W_i` on `path`.
    pub fn increment(&self, path: usize, i: usize) -> &[f64] {
        let n = self.grid.n_steps();
        let o = (path * n + i) * self.d;
        &self.increments[o..o + self.d]
    }

    /// Path value at time `s`: the origin for `s <= t_start`, a grid node
    /// otherwise.
    pub fn state_at(&self, path: usize, s: f64) -> Result<&[f64], SdeError> {
        if s <= self.grid.t_start() {
            return Ok(&self.origin);
        }
        let i = self.grid.index_of(s).ok_or(SdeError::OffGrid { s })?;
        Ok(self.state(path, i))
    }

    /// The paths `lo..hi` as a standalone ensemble (one batch).
    pub fn subset(&self, lo: usize, hi: usize) -> PathEnsemble {
        let n = self.grid.n_steps();
        let d = self.d;
        PathEnsemble {
            d,
            n_paths: hi - lo,
            grid: self.grid,
            origin: self.origin.clone(),
            seed: self.seed,
            states: self.states[lo * (n + 1) * d..hi * (n + 1) * d].to_vec(),
            increments: self.increments[lo * n * d..hi * n * d].to_vec(),
            batches: vec![(0, hi - lo)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentReport {
    pub p: u32,
    /// `E sup_i |X_i|^p` over the ensemble.
    pub sup_moment: f64,
    /// `sup_moment / (1 + |x|^p)`.
    pub ratio: f64,
}

/// Empirical sup-moment of the paths.
pub fn moment_check(ens: &PathEnsemble, p: u32) -> MomentReport {
    assert!(p % 2 == 0 && ens.n_paths > 0, "moment order must be even, ensemble nonempty");
    let n = ens.grid.n_steps();
    let mut acc = 0.0;
    for path in 0..ens.n_paths {
        let mut m = 0.0f64;
        for i in 0..=n {
            m = m.max(powi(norm(ens.state(path, i)), p as i32));
        }
        acc += m;
    }
    let sup_moment = acc / ens.n_paths as f64;
    MomentReport {
        p,
        sup_moment,
        ratio: sup_moment / (1.0 + powi(norm(&ens.origin), p as i32)),
    }
}

/// Flags a sequence of ratios (ordered by refinement) as exploding when
/// the last exceeds the first by more than `factor`.
pub fn ratio_explodes(ratios: &[f64], factor: f64) -> bool {
    match (ratios.first(), ratios.last()) {
        (Some(&a), Some(&b)) => !b.is_finite() || b > factor * a.max(f64::MIN_POSITIVE),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecops::{exp, mean_std};

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn constant_drift_is_exact() {
        let c = CoefficientField::new(1, Drift::Constant(vec![0.7]), Diffusion::Zero).unwrap();
        let e = simulate(&c, &[0.0], grid(8), 3, 1, Sampling::Plain).unwrap();
        for p in 0..3 {
            assert!((e.state(p, 8)[0] - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn exponential_ode_converges_at_first_order() {
        let c = CoefficientField::new(1, Drift::Affine { a: vec![0.1], c: vec![0.0] }, Diffusion::Zero).unwrap();
        let target = exp(0.1);
        let mut errs = Vec::new();
        for n in [10, 20, 40, 80] {
            let e = simulate(&c, &[1.0], grid(n), 1, 0, Sampling::Plain).unwrap();
            // Euler gives (1 + 0.1/n)^n exactly
            let euler = libm::pow(1.0 + 0.1 / n as f64, n as f64);
            assert!((e.state(0, n)[0] - euler).abs() < 1e-14);
            errs.push((e.state(0, n)[0] - target).abs());
        }
        for w in errs.windows(2) {
            let r = w[0] / w[1];
            assert!((r - 2.0).abs() < 0.1, "ratio {r}");
        }
    }

    #[test]
    fn brownian_terminal_moments() {
        let c = CoefficientField::brownian(1, 1.0);
        for sampling in [Sampling::Plain, Sampling::StratifiedBridge { batches: 8 }] {
            let e = simulate(&c, &[5.0], grid(20), 10_000, 11, sampling).unwrap();
            let ends: Vec<f64> = (0..e.n_paths()).map(|p| e.state(p, 20)[0]).collect();
            let (m, s) = mean_std(&ends);
            assert!((m - 5.0).abs() < 4.0 / 100.0, "{sampling:?} mean {m}");
            // sd of the sample variance of N(0,1) is about sqrt(2/n)
            assert!((s * s - 1.0).abs() < 4.0 * sqrt(2.0 / 1e4), "{sampling:?} var {}", s * s);
        }
    }

    #[test]
    fn bridge_increments_have_step_variance() {
        let c = CoefficientField::brownian(2, 1.0);
        let n = 10;
        let e = simulate(&c, &[0.0, 0.0], grid(n), 8000, 5, Sampling::StratifiedBridge { batches: 4 }).unwrap();
        let h = 0.1;
        for i in [0, 4, 9] {
            for j in 0..2 {
                let v: Vec<f64> = (0..e.n_paths()).map(|p| e.increment(p, i)[j]).collect();
                let (m, s) = mean_std(&v);
                let se = sqrt(h / 8000.0);
                assert!(m.abs() < 4.0 * se, "step {i} coord {j} mean {m}");
                assert!((s * s - h).abs() < 4.0 * h * sqrt(2.0 / 8000.0), "step {i} var {}", s * s);
            }
            let cov: f64 = (0..e.n_paths())
                .map(|p| e.increment(p, i)[0] * e.increment(p, i)[1])
                .sum::<f64>()
                / 8000.0;
            assert!(cov.abs() < 4.0 * h / sqrt(8000.0), "cov {cov}");
        }
    }

    #[test]
    fn stratified_terminal_is_exactly_balanced() {
        // one point per stratum: the sample mean of W_T is very close to 0
        let c = CoefficientField::brownian(1, 1.0);
        let e = simulate(&c, &[0.0], grid(5), 1000, 3, Sampling::StratifiedBridge { batches: 1 }).unwrap();
        let ends: Vec<f64> = (0..1000).map(|p| e.state(p, 5)[0]).collect();
        let (m, _) = mean_std(&ends);
        assert!(m.abs() < 5e-3, "{m}");
    }

    #[test]
    fn deterministic_and_frozen_before_start() {
        let c = CoefficientField::brownian(1, 0.5);
        let g = TimeGrid::new(0.25, 1.0, 6).unwrap();
        let a = simulate(&c, &[1.0], g, 50, 9, Sampling::StratifiedBridge { batches: 5 }).unwrap();
        let b = simulate(&c, &[1.0], g, 50, 9, Sampling::StratifiedBridge { batches: 5 }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.state_at(3, 0.1).unwrap(), &[1.0]);
        assert_eq!(a.state_at(3, 0.25).unwrap(), &[1.0]);
        assert!(a.state_at(3, 0.3).is_err());
        let other = simulate(&c, &[1.0], g, 50, 10, Sampling::StratifiedBridge { batches: 5 }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn subset_matches_paths() {
        let c = CoefficientField::brownian(1, 1.0);
        let e = simulate(&c, &[0.0], grid(4), 10, 2, Sampling::StratifiedBridge { batches: 2 }).unwrap();
        let s = e.subset(5, 10);
        assert_eq!(s.state(0, 4), e.state(5, 4));
        assert_eq!(s.increment(4, 3), e.increment(9, 3));
    }

    #[test]
    fn moment_examples() {
        let still = CoefficientField::new(2, Drift::Zero, Diffusion::Zero).unwrap();
        let e = simulate(&still, &[3.0, 4.0], grid(4), 5, 0, Sampling::Plain).unwrap();
        let r = moment_check(&e, 2);
        assert_eq!(r.sup_moment, 25.0);
        let c = CoefficientField::new(
            1,
            Drift::Affine { a: vec![-0.5], c: vec![0.2] },
            Diffusion::Constant(vec![0.8]),
        )
        .unwrap();
        let ratios: Vec<f64> = [0.0, 10.0, 100.0]
            .iter()
            .map(|&x| moment_check(&simulate(&c, &[x], grid(50), 2000, 4, Sampling::Plain).unwrap(), 2).ratio)
            .collect();
        assert!(ratios.iter().all(|&r| r < 3.0), "{ratios:?}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(TimeGrid::new(1.0, 1.0, 3).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(CoefficientField::new(1, Drift::Constant(vec![1.0, 2.0]), Diffusion::Zero).is_err());
        let c = CoefficientField::new(1, Drift::Affine { a: vec![1e308], c: vec![0.0] }, Diffusion::Zero).unwrap();
        assert!(matches!(
            simulate(&c, &[1e10], grid(4), 1, 0, Sampling::Plain),
            Err(SdeError::NonFinite { .. })
        ));
    }
}
