//! The deterministic field `u(t, x) = Y_t^{t,x}` on a space-time grid, and
//! the checks run against it.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::bsvi::{
    lattice_solve, solve, Backend, Generator, LatticeField, LatticeSpec, SolverError, SolverOptions,
    TerminalMap,
};
use crate::convex::ConvexFunction;
use crate::ext::ExtendedReal;
use crate::rng::{derive_seed, uniform, unit_vector, StreamKey};
use crate::sde::{simulate, CoefficientField, Diffusion, Drift, PathEnsemble, Sampling, TimeGrid};
use crate::vecops::{mean_std, norm, powi, sqrt};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("invalid problem: {0}")]
    Problem(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("solver failed at node (t = {t}, x = {x:?}): {source}")]
    Node {
        t: f64,
        x: Vec<f64>,
        source: SolverError,
    },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("invalid check request: {0}")]
    Check(String),
}

/// Constants a problem file may declare; undeclared ones are computed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeclaredConstants {
    pub lipschitz: Option<f64>,
    pub gamma: Option<f64>,
    pub m1: Option<f64>,
    pub p: Option<u32>,
    pub m2: Option<f64>,
    pub r: Option<u32>,
}

/// Constants in effect after validation.
#[derive(Clone, Debug, PartialEq)]
pub struct Constants {
    pub lipschitz: f64,
    pub gamma: f64,
    pub m1: f64,
    pub p: u32,
    pub m2: f64,
    pub r: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub d: usize,
    pub k: usize,
    pub horizon: f64,
    pub coeffs: CoefficientField,
    pub gen: Generator,
    pub term: TerminalMap,
    pub phi: ConvexFunction,
    pub constants: Constants,
}

/// Deterministic probe points for the growth conditions, radii `1e-2..1e3`.
fn growth_probes(d: usize) -> Vec<Vec<f64>> {
    let key = StreamKey::new(derive_seed(0, &[0xA4]));
    let mut out = vec![vec![0.0; d]];
    for (i, e) in (-2..=3).enumerate() {
        let r = libm::pow(10.0, e as f64);
        let mut rng = key.at(i as u64, 0);
        for _ in 0..24 {
            let dir = unit_vector(&mut rng, d);
            let rho = r * (0.5 + uniform(&mut rng));
            out.push(dir.iter().map(|v| v * rho).collect());
        }
    }
    out
}

impl ProblemSpec {
    pub fn new(
        horizon: f64,
        coeffs: CoefficientField,
        gen: Generator,
        term: TerminalMap,
        phi: ConvexFunction,
        declared: &DeclaredConstants,
    ) -> Result<Self, FieldError> {
        let bad = |m: String| Err(FieldError::Problem(m));
        if !(horizon > 0.0 && horizon.is_finite()) {
            return bad(format!("horizon must be positive and finite, got {horizon}"));
        }
        let d = coeffs.dim();
        let k = crate::bsvi::check_dims(d, &gen, &term, &phi)
            .map_err(|e| FieldError::Problem(format!("{e}")))?;
        if phi.domain_witness().is_none() {
            return bad(String::from("phi is not proper: no point of its domain was found"));
        }

        let lip = coeffs.lipschitz_constant();
        let lipschitz = match declared.lipschitz {
            Some(l) if l < lip * (1.0 - 1e-12) => {
                return bad(format!("declared Lipschitz constant {l} is below the computed {lip}"))
            }
            Some(l) => l,
            None => lip,
        };
        let g = gen.monotonicity_constant();
        let gamma = match declared.gamma {
            Some(v) if v < g - 1e-12 * (1.0 + g.abs()) => {
                return bad(format!("declared gamma {v} is below the generator's {g}"))
            }
            Some(v) => v,
            None => g,
        };
        let p = declared.p.unwrap_or_else(|| term.growth_exponent());
        let m1 = declared.m1.unwrap_or_else(|| term.growth_constant());
        let r = declared.r.unwrap_or(2 * p);
        let mut m2_needed = 0.0f64;
        let mut hx = vec![0.0; k];
        for x in growth_probes(d) {
            term.eval(&x, &mut hx);
            let growth = 1.0 + powi(norm(&x), p as i32);
            if norm(&hx) > m1 * growth * (1.0 + 1e-12) {
                return bad(format!(
                    "terminal growth |h(x)| = {} exceeds M1 (1 + |x|^p) = {} at x = {x:?}",
                    norm(&hx),
                    m1 * growth
                ));
            }
            match phi.eval(&hx) {
                ExtendedReal::Finite(v) => {
                    m2_needed = m2_needed.max(v.abs() / (1.0 + powi(norm(&x), r as i32)));
                }
                _ => return bad(format!("phi(h(x)) is infinite at x = {x:?}")),
            }
        }
        let m2 = match declared.m2 {
            Some(v) if v < m2_needed * (1.0 - 1e-12) => {
                return bad(format!(
                    "declared M2 = {v} is violated on probe points (need at least {m2_needed})"
                ))
            }
            Some(v) => v,
            None => m2_needed,
        };
        Ok(Self {
            d,
            k,
            horizon,
            coeffs,
            gen,
            term,
            phi,
            constants: Constants { lipschitz, gamma, m1, p, m2, r },
        })
    }
}

/// Explicit node lists.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrid {
    pub times: Vec<f64>,
    /// Row-major `n_points x d`.
    pub points: Vec<Vec<f64>>,
}

impl FieldGrid {
    pub fn new(times: Vec<f64>, points: Vec<Vec<f64>>) -> Self {
        Self { times, points }
    }

    pub fn n_nodes(&self) -> usize {
        self.times.len() * self.points.len()
    }

    pub fn validate(&self, spec: &ProblemSpec) -> Result<(), FieldError> {
        if self.times.is_empty() || self.points.is_empty() {
            return Err(FieldError::Grid(String::from("grid needs at least one time and one point")));
        }
        for &t in &self.times {
            if !(t >= 0.0 && t <= spec.horizon) {
                return Err(FieldError::Grid(format!(
                    "node time t = {t} is outside [0, T = {}]",
                    spec.horizon
                )));
            }
        }
        for p in &self.points {
            if p.len() != spec.d || !p.iter().all(|v| v.is_finite()) {
                return Err(FieldError::Grid(format!("point {p:?} is not a finite vector of dimension {}", spec.d)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McSettings {
    pub n_paths: usize,
    /// Steps over the full horizon; a node at `t` uses the same step size.
    pub n_steps: usize,
    pub seed: u64,
    /// Independent replicate blocks for standard errors; `1` gives plain
    /// sampling and no error estimate.
    pub batches: usize,
}

impl Default for McSettings {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            n_steps: 50,
            seed: 0,
            batches: 10,
        }
    }
}

impl McSettings {
    pub fn sampling(&self) -> Sampling {
        if self.batches > 1 {
            Sampling::StratifiedBridge { batches: self.batches }
        } else {
            Sampling::Plain
        }
    }

    /// Time grid from `t` to `horizon` with steps close to `horizon / n_steps`.
    pub fn grid_from(&self, t: f64, horizon: f64) -> Result<TimeGrid, FieldError> {
        let n = libm::ceil((horizon - t) / horizon * self.n_steps as f64 - 1e-9).max(1.0) as usize;
        TimeGrid::new(t, horizon, n).map_err(|e| FieldError::Grid(format!("{e}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub backend: Backend,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub batches: usize,
    pub degree: usize,
    pub implicit: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolutionField {
    pub d: usize,
    pub k: usize,
    pub grid: FieldGrid,
    /// `[time][point][k]`
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub provenance: Provenance,
    pub warnings: Vec<String>,
}

impl Default for Provenance {
    fn default() -> Self {
        Self {
            backend: Backend::Regression,
            n_paths: 0,
            n_steps: 0,
            seed: 0,
            batches: 0,
            degree: 0,
            implicit: false,
        }
    }
}

impl SolutionField {
    /// Field from node values `u(t, x)`, zero standard errors.
    pub fn from_fn(d: usize, k: usize, grid: FieldGrid, u: impl Fn(f64, &[f64]) -> Vec<f64>) -> Self {
        let mut values = Vec::with_capacity(grid.n_nodes() * k);
        for &t in &grid.times {
            for x in &grid.points {
                values.extend(u(t, x));
            }
        }
        Self {
            d,
            k,
            grid,
            stderr: vec![0.0; values.len()],
            values,
            provenance: Provenance::default(),
            warnings: Vec::new(),
        }
    }

    pub fn offset(&self, ti: usize, pi: usize) -> usize {
        (ti * self.grid.points.len() + pi) * self.k
    }

    pub fn value(&self, ti: usize, pi: usize) -> &[f64] {
        let o = self.offset(ti, pi);
        &self.values[o..o + self.k]
    }

    pub fn se(&self, ti: usize, pi: usize) -> &[f64] {
        let o = self.offset(ti, pi);
        &self.stderr[o..o + self.k]
    }

    pub fn value_mut(&mut self, ti: usize, pi: usize) -> &mut [f64] {
        let o = self.offset(ti, pi);
        &mut self.values[o..o + self.k]
    }
}

/// One node's estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEstimate {
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Seed of the ensemble started at node `(ti, pi)`.
pub fn node_seed(seed: u64, ti: usize, pi: usize) -> u64 {
    derive_seed(seed, &[ti as u64, pi as u64])
}

/// Backward solve from `(t, x)` on the ensemble's batches; returns the
/// full-ensemble `Y_0` mean and the replicate standard error.
fn solve_with_error(
    spec: &ProblemSpec,
    ens: &PathEnsemble,
    opts: &SolverOptions,
) -> Result<(crate::bsvi::BsvTriple, Vec<f64>), SolverError> {
    let full = solve(ens, &spec.gen, &spec.term, &spec.phi, opts)?;
    let b = ens.batches().len();
    let mut se = vec![0.0; spec.k];
    if b > 1 {
        let mut means = vec![Vec::with_capacity(b); spec.k];
        for &(lo, hi) in ens.batches() {
            let sub = ens.subset(lo, hi);
            let t = solve(&sub, &spec.gen, &spec.term, &spec.phi, opts)?;
            for (m, v) in means.iter_mut().zip(t.y0_mean()) {
                m.push(v);
            }
        }
        for (s, m) in se.iter_mut().zip(&means) {
            *s = mean_std(m).1 / sqrt(b as f64);
        }
    }
    Ok((full, se))
}

/// Regression estimate at one node.
pub fn evaluate_node(
    spec: &ProblemSpec,
    grid: &FieldGrid,
    mc: &McSettings,
    opts: &SolverOptions,
    ti: usize,
    pi: usize,
) -> Result<NodeEstimate, FieldError> {
    let t = grid.times[ti];
    let x = &grid.points[pi];
    if t >= spec.horizon {
        return Ok(NodeEstimate {
            value: spec.term.eval_vec(x),
            stderr: vec![0.0; spec.k],
            warnings: Vec::new(),
        });
    }
    let node_err = |source: SolverError| FieldError::Node { t, x: x.clone(), source };
    let tg = mc.grid_from(t, spec.horizon)?;
    let ens = simulate(&spec.coeffs, x, tg, mc.n_paths, node_seed(mc.seed, ti, pi), mc.sampling())
        .map_err(|e| node_err(e.into()))?;
    let (full, stderr) = solve_with_error(spec, &ens, opts).map_err(node_err)?;
    Ok(NodeEstimate {
        value: full.y0_mean(),
        stderr,
        warnings: full.warnings.iter().map(|w| format!("node (t = {t}, x = {x:?}): {w}")).collect(),
    })
}

fn provenance(backend: Backend, mc: &McSettings, opts: &SolverOptions) -> Provenance {
    Provenance {
        backend,
        n_paths: mc.n_paths,
        n_steps: mc.n_steps,
        seed: mc.seed,
        batches: mc.batches,
        degree: opts.basis.degree,
        implicit: opts.implicit,
    }
}

/// Assembles node estimates given in time-major order.
pub fn assemble(
    spec: &ProblemSpec,
    grid: &FieldGrid,
    mc: &McSettings,
    opts: &SolverOptions,
    nodes: Vec<NodeEstimate>,
) -> SolutionField {
    let mut values = Vec::with_capacity(nodes.len() * spec.k);
    let mut stderr = Vec::with_capacity(nodes.len() * spec.k);
    let mut warnings = Vec::new();
    for n in nodes {
        values.extend(n.value);
        stderr.extend(n.stderr);
        warnings.extend(n.warnings);
    }
    SolutionField {
        d: spec.d,
        k: spec.k,
        grid: grid.clone(),
        values,
        stderr,
        provenance: provenance(Backend::Regression, mc, opts),
        warnings,
    }
}

/// Lattice grid on `[0, T]` with the smallest step count `>= mc.n_steps`
/// that puts every field time on a lattice time.
pub fn lattice_for(spec: &ProblemSpec, grid: &FieldGrid, mc: &McSettings) -> Result<(TimeGrid, LatticeSpec), FieldError> {
    if spec.d != 1 {
        return Err(FieldError::Grid(String::from("the lattice backend needs d = 1")));
    }
    let base = mc.n_steps.max(1);
    let tg = (base..=8 * base)
        .filter_map(|n| TimeGrid::new(0.0, spec.horizon, n).ok())
        .find(|tg| grid.times.iter().all(|&t| tg.index_of(t).is_some()))
        .ok_or_else(|| {
            FieldError::Grid(format!(
                "node times {:?} do not fit a lattice time grid with {base}..{} steps",
                grid.times,
                8 * base
            ))
        })?;
    let xs: Vec<f64> = grid.points.iter().map(|p| p[0]).collect();
    let ls = LatticeSpec::aligned(&spec.coeffs, tg, &xs)?;
    Ok((tg, ls))
}

/// Reads the field off a completed lattice sweep.
pub fn field_from_lattice(
    spec: &ProblemSpec,
    grid: &FieldGrid,
    mc: &McSettings,
    opts: &SolverOptions,
    lat: &LatticeField,
) -> Result<SolutionField, FieldError> {
    let mut values = Vec::with_capacity(grid.n_nodes() * spec.k);
    for &t in &grid.times {
        for x in &grid.points {
            if t >= spec.horizon {
                values.extend(spec.term.eval_vec(x));
            } else {
                let v = lat.value(t, x[0]).map_err(|source| FieldError::Node { t, x: x.clone(), source })?;
                values.extend(v);
            }
        }
    }
    Ok(SolutionField {
        d: spec.d,
        k: spec.k,
        grid: grid.clone(),
        stderr: vec![0.0; values.len()],
        values,
        provenance: provenance(Backend::Lattice, mc, opts),
        warnings: Vec::new(),
    })
}

/// Field on `grid` with either backend, nodes in time-major order.
pub fn evaluate_u(
    spec: &ProblemSpec,
    grid: &FieldGrid,
    mc: &McSettings,
    opts: &SolverOptions,
    backend: Backend,
) -> Result<SolutionField, FieldError> {
    grid.validate(spec)?;
    match backend {
        Backend::Regression => {
            if mc.n_paths < mc.batches.max(1) {
                return Err(FieldError::Grid(format!(
                    "{} paths cannot fill {} batches",
                    mc.n_paths, mc.batches
                )));
            }
            let mut nodes = Vec::with_capacity(grid.n_nodes());
            for ti in 0..grid.times.len() {
                for pi in 0..grid.points.len() {
                    nodes.push(evaluate_node(spec, grid, mc, opts, ti, pi)?);
                }
            }
            Ok(assemble(spec, grid, mc, opts, nodes))
        }
        Backend::Lattice if grid.times.iter().all(|&t| t >= spec.horizon) => {
            let nodes = (0..grid.n_nodes())
                .map(|i| NodeEstimate {
                    value: spec.term.eval_vec(&grid.points[i % grid.points.len()]),
                    stderr: vec![0.0; spec.k],
                    warnings: Vec::new(),
                })
                .collect();
            let mut f = assemble(spec, grid, mc, opts, nodes);
            f.provenance.backend = Backend::Lattice;
            Ok(f)
        }
        Backend::Lattice => {
            let (tg, ls) = lattice_for(spec, grid, mc)?;
            let lat = lattice_solve(&spec.coeffs, &spec.gen, &spec.term, &spec.phi, tg, ls, opts)?;
            field_from_lattice(spec, grid, mc, opts, &lat)
        }
    }
}

/// A problem with `sigma = b = 0`, for which every ensemble is a single
/// repeated path.
pub fn is_noise_free(coeffs: &CoefficientField) -> bool {
    matches!(coeffs.diffusion_kind(), Diffusion::Zero) && matches!(coeffs.drift_kind(), Drift::Zero)
}

/// Terminal identity: values at `T` equal `h` bit for bit.
pub fn terminal_identity_check(spec: &ProblemSpec, field: &SolutionField) -> Vec<(usize, usize)> {
    let mut bad = Vec::new();
    for (ti, &t) in field.grid.times.iter().enumerate() {
        if t < spec.horizon {
            continue;
        }
        for (pi, x) in field.grid.points.iter().enumerate() {
            if field.value(ti, pi) != spec.term.eval_vec(x).as_slice() {
                bad.push((ti, pi));
            }
        }
    }
    bad
}

/// Nodes with `t < T` whose value lies outside `Dom(phi)`.
pub fn domain_check(spec: &ProblemSpec, field: &SolutionField) -> Vec<(usize, usize)> {
    let mut bad = Vec::new();
    for ti in 0..field.grid.times.len() {
        for pi in 0..field.grid.points.len() {
            if !spec.phi.eval(field.value(ti, pi)).is_finite() {
                bad.push((ti, pi));
            }
        }
    }
    bad
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrowthReport {
    pub p: u32,
    /// `max |u| / (1 + |x|^p)` over all nodes.
    pub constant: f64,
    /// Per decade of `|x|` (ascending), the largest ratio.
    pub per_decade: Vec<(i32, f64)>,
    /// Ratio rising by more than 5% into the last decade.
    pub trending_up: bool,
}

impl GrowthReport {
    pub fn passed(&self, bound: Option<f64>) -> bool {
        !self.trending_up && bound.map_or(true, |b| self.constant <= b)
    }
}

pub fn growth_check(field: &SolutionField, p: u32) -> Result<GrowthReport, FieldError> {
    let norms: Vec<f64> = field.grid.points.iter().map(|x| norm(x)).collect();
    let lo = norms.iter().cloned().filter(|&r| r > 0.0).fold(f64::INFINITY, f64::min);
    let hi = norms.iter().cloned().fold(0.0f64, f64::max);
    if !(hi >= 100.0 * lo) {
        return Err(FieldError::Check(format!(
            "growth check needs |x| spanning two decades, got [{lo}, {hi}]"
        )));
    }
    let mut constant = 0.0f64;
    let mut per_decade: Vec<(i32, f64)> = Vec::new();
    for ti in 0..field.grid.times.len() {
        for (pi, &r) in norms.iter().enumerate() {
            let ratio = norm(field.value(ti, pi)) / (1.0 + powi(r, p as i32));
            constant = constant.max(ratio);
            if r > 0.0 {
                let dec = libm::floor(libm::log10(r) + 1e-9) as i32;
                match per_decade.iter_mut().find(|(d, _)| *d == dec) {
                    Some(e) => e.1 = e.1.max(ratio),
                    None => per_decade.push((dec, ratio)),
                }
            }
        }
    }
    per_decade.sort_by_key(|e| e.0);
    let n = per_decade.len();
    let trending_up = n >= 2 && per_decade[n - 1].1 > 1.05 * per_decade[n - 2].1;
    Ok(GrowthReport {
        p,
        constant,
        per_decade,
        trending_up,
    })
}

/// Largest jump between neighbouring points (sorted by the first
/// coordinate) over all times, and the largest neighbour spacing.
pub fn max_adjacent_jump(field: &SolutionField) -> (f64, f64) {
    let mut order: Vec<usize> = (0..field.grid.points.len()).collect();
    order.sort_by(|&a, &b| {
        field.grid.points[a][0]
            .partial_cmp(&field.grid.points[b][0])
            .expect("finite points")
    });
    let mut jump = 0.0f64;
    let mut spacing = 0.0f64;
    for w in order.windows(2) {
        spacing = spacing.max(crate::vecops::dist(&field.grid.points[w[0]], &field.grid.points[w[1]]));
        for ti in 0..field.grid.times.len() {
            jump = jump.max(crate::vecops::dist(field.value(ti, w[0]), field.value(ti, w[1])));
        }
    }
    (jump, spacing)
}

/// Tensor-product view of the field's points, for interpolation.
struct Tensor {
    axes: Vec<Vec<f64>>,
    /// Point index per multi-index, row-major over `axes`.
    index: Vec<usize>,
}

fn tensor_view(points: &[Vec<f64>], d: usize) -> Option<Tensor> {
    let mut axes = Vec::with_capacity(d);
    for j in 0..d {
        let mut a: Vec<f64> = points.iter().map(|p| p[j]).collect();
        a.sort_by(|x, y| x.partial_cmp(y).expect("finite points"));
        a.dedup();
        axes.push(a);
    }
    let total: usize = axes.iter().map(|a| a.len()).product();
    if total != points.len() {
        return None;
    }
    let mut index = vec![usize::MAX; total];
    for (pi, p) in points.iter().enumerate() {
        let mut flat = 0;
        for (j, a) in axes.iter().enumerate() {
            let pos = a.iter().position(|&v| v == p[j])?;
            flat = flat * a.len() + pos;
        }
        index[flat] = pi;
    }
    if index.iter().any(|&i| i == usize::MAX) {
        return None;
    }
    Some(Tensor { axes, index })
}

/// Multilinear interpolation at `x` on time row `ti`, with the interpolated
/// standard error and the estimate `1/2 |D2_j| (x_j - l_j)(r_j - x_j)`
/// summed over axes, `D2_j` the largest second divided difference on the
/// neighbouring cells. `None` outside the hull.
fn interpolate(
    field: &SolutionField,
    tensor: &Tensor,
    ti: usize,
    x: &[f64],
) -> Option<(Vec<f64>, f64, f64)> {
    let d = field.d;
    let mut lo_idx = vec![0usize; d];
    let mut w = vec![0.0; d];
    for j in 0..d {
        let a = &tensor.axes[j];
        if a.len() < 2 || x[j] < a[0] || x[j] > a[a.len() - 1] {
            return None;
        }
        let c = a.partition_point(|&v| v <= x[j]).clamp(1, a.len() - 1) - 1;
        lo_idx[j] = c;
        w[j] = (x[j] - a[c]) / (a[c + 1] - a[c]);
    }
    let flat = |mi: &[usize]| {
        let mut f = 0;
        for j in 0..d {
            f = f * tensor.axes[j].len() + mi[j];
        }
        tensor.index[f]
    };
    let k = field.k;
    let mut val = vec![0.0; k];
    let mut se2 = 0.0;
    let mut mi = vec![0usize; d];
    for corner in 0..(1usize << d) {
        let mut wt = 1.0;
        for j in 0..d {
            let up = (corner >> j) & 1;
            mi[j] = lo_idx[j] + up;
            wt *= if up == 1 { w[j] } else { 1.0 - w[j] };
        }
        let pi = flat(&mi);
        for (o, v) in val.iter_mut().zip(field.value(ti, pi)) {
            *o += wt * v;
        }
        se2 += wt * wt * field.se(ti, pi).iter().map(|s| s * s).sum::<f64>();
    }
    let mut interp = 0.0;
    for j in 0..d {
        let a = &tensor.axes[j];
        if a.len() < 3 {
            continue;
        }
        let mut d2max = 0.0f64;
        let c = lo_idx[j];
        for mid in [c, c + 1] {
            if mid == 0 || mid + 1 >= a.len() {
                continue;
            }
            let mut m = lo_idx.clone();
            let (hl, hr) = (a[mid] - a[mid - 1], a[mid + 1] - a[mid]);
            m[j] = mid - 1;
            let ul = field.value(ti, flat(&m)).to_vec();
            m[j] = mid;
            let um = field.value(ti, flat(&m)).to_vec();
            m[j] = mid + 1;
            let ur = field.value(ti, flat(&m)).to_vec();
            for c2 in 0..k {
                let dd = 2.0 * ((ur[c2] - um[c2]) / hr - (um[c2] - ul[c2]) / hl) / (hl + hr);
                d2max = d2max.max(dd.abs());
            }
        }
        let (l, r) = (a[c], a[c + 1]);
        interp += 0.5 * d2max * (x[j] - l) * (r - x[j]);
    }
    Some((val, sqrt(se2), interp))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarkovReport {
    pub origin_t: f64,
    pub origin_x: Vec<f64>,
    pub s: f64,
    /// Field time actually used (nearest node).
    pub field_time: f64,
    pub paths_used: usize,
    pub paths_outside: usize,
    pub mean_discrepancy: f64,
    /// Mean interpolated field standard error.
    pub field_error: f64,
    pub interpolation_error: f64,
    /// Estimated mean pathwise error of the backward solve's `Y_s`.
    pub solve_error: f64,
    pub error_bar: f64,
    pub ratio: f64,
}

impl MarkovReport {
    pub fn passed(&self, factor: f64) -> bool {
        self.paths_used > 0 && self.ratio <= factor
    }
}

/// Compares `Y_s` from a solve started at `(t, x)` with `u(s, X_s)` read off
/// `field` by interpolation, path by path.
///
/// The solve's own pathwise error is estimated from replicate blocks: each
/// block is re-solved alone and `mean |Y^block - Y^full| / sqrt(B - 1)`
/// scales the block error down to the full ensemble.
pub fn markov_consistency_check(
    spec: &ProblemSpec,
    field: &SolutionField,
    origin: (f64, &[f64]),
    s: f64,
    mc: &McSettings,
    opts: &SolverOptions,
) -> Result<MarkovReport, FieldError> {
    let (t, x) = origin;
    if !(s > t && s < spec.horizon) {
        return Err(FieldError::Check(format!("s = {s} must lie in (t, T) = ({t}, {})", spec.horizon)));
    }
    if x.len() != spec.d || field.d != spec.d || field.k != spec.k {
        return Err(FieldError::Check(String::from("field and origin must match the problem dimensions")));
    }
    let tensor = tensor_view(&field.grid.points, spec.d)
        .ok_or_else(|| FieldError::Check(String::from("field points must form a tensor grid")))?;
    let (fti, &field_time) = field
        .grid
        .times
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - s).abs().partial_cmp(&(b.1 - s).abs()).expect("finite times"))
        .ok_or_else(|| FieldError::Check(String::from("field has no times")))?;

    let tg = mc.grid_from(t, spec.horizon)?;
    let si = tg
        .index_of(s)
        .ok_or_else(|| FieldError::Check(format!("s = {s} is not a node of the solve grid (step {})", tg.step())))?;
    let ens = simulate(&spec.coeffs, x, tg, mc.n_paths, derive_seed(mc.seed, &[0x3A4C]), mc.sampling())
        .map_err(SolverError::from)?;
    let full = solve(&ens, &spec.gen, &spec.term, &spec.phi, opts)?;
    let mut block_dev = 0.0;
    let b = ens.batches().len();
    if b > 1 {
        for &(lo, hi) in ens.batches() {
            let sub = solve(&ens.subset(lo, hi), &spec.gen, &spec.term, &spec.phi, opts)?;
            for p in lo..hi {
                block_dev += crate::vecops::dist(sub.y_at(p - lo, si), full.y_at(p, si));
            }
        }
        block_dev /= ens.n_paths() as f64 * sqrt((b - 1) as f64);
    }

    let mut used = 0usize;
    let mut outside = 0usize;
    let mut disc = 0.0;
    let mut ferr = 0.0;
    let mut ierr = 0.0;
    for p in 0..ens.n_paths() {
        match interpolate(field, &tensor, fti, ens.state(p, si)) {
            Some((u, se, ie)) => {
                used += 1;
                disc += crate::vecops::dist(full.y_at(p, si), &u);
                ferr += se;
                ierr += ie;
            }
            None => outside += 1,
        }
    }
    let nu = used.max(1) as f64;
    let (mean_discrepancy, field_error, interpolation_error) = (disc / nu, ferr / nu, ierr / nu);
    let error_bar = field_error + interpolation_error + block_dev;
    let ratio = if error_bar > 0.0 {
        mean_discrepancy / error_bar
    } else if mean_discrepancy == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(MarkovReport {
        origin_t: t,
        origin_x: x.to_vec(),
        s,
        field_time,
        paths_used: used,
        paths_outside: outside,
        mean_discrepancy,
        field_error,
        interpolation_error,
        solve_error: block_dev,
        error_bar,
        ratio,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgreementRow {
    pub ti: usize,
    pub pi: usize,
    pub regression: Vec<f64>,
    pub lattice: Vec<f64>,
    /// Replicate standard error of the regression value.
    pub stderr: f64,
    /// `2 |L(N) - L(2N)|`, the lattice's refinement estimate.
    pub lattice_error: f64,
    /// `|R(D) - R(D - 1)|`, sensitivity to the regression degree.
    pub basis_error: f64,
    pub estimate: f64,
    pub ratio: f64,
}

/// Regression field against the lattice oracle, node by node (`d = 1`).
/// The combined error estimate adds the regression standard error, the
/// lattice refinement estimate and the basis-degree sensitivity.
pub fn backend_agreement(
    spec: &ProblemSpec,
    grid: &FieldGrid,
    mc: &McSettings,
    opts: &SolverOptions,
) -> Result<Vec<AgreementRow>, FieldError> {
    let reg = evaluate_u(spec, grid, mc, opts, Backend::Regression)?;
    let lower = SolverOptions {
        basis: crate::bsvi::RegressionBasis {
            degree: opts.basis.degree.saturating_sub(1),
        },
        ..opts.clone()
    };
    let reg_low = evaluate_u(spec, grid, mc, &lower, Backend::Regression)?;
    let lat = evaluate_u(spec, grid, mc, opts, Backend::Lattice)?;
    let fine = McSettings {
        n_steps: 2 * mc.n_steps,
        ..mc.clone()
    };
    let lat_fine = evaluate_u(spec, grid, &fine, opts, Backend::Lattice)?;
    let mut rows = Vec::with_capacity(grid.n_nodes());
    for ti in 0..grid.times.len() {
        for pi in 0..grid.points.len() {
            let r = reg.value(ti, pi);
            let l = lat.value(ti, pi);
            let stderr = norm(reg.se(ti, pi));
            let lattice_error = 2.0 * crate::vecops::dist(l, lat_fine.value(ti, pi));
            let basis_error = crate::vecops::dist(r, reg_low.value(ti, pi));
            let estimate = stderr + lattice_error + basis_error;
            let diff = crate::vecops::dist(r, l);
            let ratio = if estimate > 0.0 {
                diff / estimate
            } else if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            rows.push(AgreementRow {
                ti,
                pi,
                regression: r.to_vec(),
                lattice: l.to_vec(),
                stderr,
                lattice_error,
                basis_error,
                estimate,
                ratio,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
