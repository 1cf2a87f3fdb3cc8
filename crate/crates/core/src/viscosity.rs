//! Jet fits on a computed field and the one-sided viscosity inequalities
//! `p + 1/2 Tr(sigma sigma^T X) + <b, q> + <f, z> >= phi'_*(u; z)` and the
//! matching `<= phi'^*(u; z)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::convex::{ConvexError, DirectionSet, LimitSampler, Side};
use crate::ext::ExtendedReal;
use crate::field::{ProblemSpec, SolutionField};
use crate::vecops::{dot, norm, sqrt};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ViscosityError {
    #[error("node ({ti}, {pi}) is not usable: {reason}")]
    Node { ti: usize, pi: usize, reason: String },
    #[error("stencil at node ({ti}, {pi}) is rank-deficient ({rows} rows, {cols} unknowns)")]
    RankDeficient { ti: usize, pi: usize, rows: usize, cols: usize },
    #[error("direction must be a nonzero vector of dimension {0}")]
    Direction(usize),
    #[error(transparent)]
    Convex(#[from] ConvexError),
}

/// Second-order parabolic jet `(p, q, X)` of `<u, z>` at a node.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub p: f64,
    pub q: Vec<f64>,
    /// Symmetric, row-major `d x d`.
    pub x: Vec<f64>,
    /// Weighted RMS residual of the fit.
    pub fit_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionProbe {
    z: Vec<f64>,
}

impl DirectionProbe {
    pub fn new(z: &[f64]) -> Result<Self, ViscosityError> {
        let n = norm(z);
        if !(n > 0.0 && n.is_finite()) {
            return Err(ViscosityError::Direction(z.len()));
        }
        Ok(Self {
            z: z.iter().map(|v| v / n).collect(),
        })
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }
}

/// Which field nodes enter a fit: `n_time` time neighbours on each side
/// (shifted inward at the ends of the time list) and up to `n_space`
/// nearest points with `|y - x|_inf <= radius`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    pub n_time: usize,
    pub n_space: usize,
    pub radius: f64,
}

impl Stencil {
    /// One time neighbour per side and `+-2` spacings in each axis.
    pub fn around(spacing: f64, d: usize) -> Self {
        Self {
            n_time: 1,
            n_space: libm::pow(5.0, d as f64) as usize,
            radius: 2.0 * spacing * (1.0 + 1e-9),
        }
    }
}

/// The fitted jet plus what the tolerance needs.
#[derive(Clone, Debug, PartialEq)]
pub struct JetFit {
    pub jet: Jet,
    /// Jet from the enriched model (time curvature, mixed and cubic
    /// terms), when the stencil supports it.
    pub rich: Option<Jet>,
    /// Field nodes used, as `(time index, point index)`.
    pub nodes: Vec<(usize, usize)>,
    /// `d V / d data` for `V = p + 1/2 Tr(a X) + <b, q>`, per stencil node.
    sensitivity: Vec<f64>,
}

fn stencil_nodes(field: &SolutionField, ti: usize, pi: usize, st: &Stencil) -> (Vec<usize>, Vec<usize>) {
    let nt = field.grid.times.len();
    let want = 2 * st.n_time + 1;
    let (mut lo, mut hi) = (ti.saturating_sub(st.n_time), (ti + st.n_time).min(nt - 1));
    while hi - lo + 1 < want.min(nt) {
        if lo > 0 {
            lo -= 1;
        } else if hi + 1 < nt {
            hi += 1;
        } else {
            break;
        }
    }
    let x = &field.grid.points[pi];
    let mut near: Vec<(f64, usize)> = field
        .grid
        .points
        .iter()
        .enumerate()
        .filter(|(_, y)| y.iter().zip(x).all(|(a, b)| (a - b).abs() <= st.radius))
        .map(|(j, y)| (crate::vecops::dist(x, y), j))
        .collect();
    near.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    near.truncate(st.n_space.max(1));
    ((lo..=hi).collect(), near.into_iter().map(|e| e.1).collect())
}

/// Column layout: `1, s, y_1..y_d, upper-triangular X entries`, then for
/// the rich model `s^2, s y_j, y_j^3`.
fn design_row(ds: f64, dy: &[f64], rich: bool) -> Vec<f64> {
    let d = dy.len();
    let mut r = vec![1.0, ds];
    r.extend_from_slice(dy);
    for a in 0..d {
        for b in a..d {
            r.push(if a == b { 0.5 * dy[a] * dy[a] } else { dy[a] * dy[b] });
        }
    }
    if rich {
        r.push(ds * ds);
        r.extend(dy.iter().map(|v| ds * v));
        r.extend(dy.iter().map(|v| v * v * v));
    }
    r
}

fn jet_from_beta(beta: &DVector<f64>, d: usize, fit_residual: f64) -> Jet {
    let mut x = vec![0.0; d * d];
    let mut c = 2 + d;
    for a in 0..d {
        for b in a..d {
            x[a * d + b] = beta[c];
            x[b * d + a] = beta[c];
            c += 1;
        }
    }
    Jet {
        p: beta[1],
        q: (0..d).map(|j| beta[2 + j]).collect(),
        x,
        fit_residual,
    }
}

/// Weighted least squares; returns the coefficients, the weighted RMS
/// residual and the pseudo-inverse mapping data to coefficients.
fn wls(rows: &[Vec<f64>], w: &[f64], v: &[f64]) -> Option<(DVector<f64>, f64, DMatrix<f64>)> {
    let n = rows.len();
    let m = rows[0].len();
    if n < m {
        return None;
    }
    let a = DMatrix::from_fn(n, m, |i, j| sqrt(w[i]) * rows[i][j]);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if !(svd.singular_values.min() > 1e-10 * smax) {
        return None;
    }
    let pinv = svd.pseudo_inverse(0.0).ok()?;
    let sw = DMatrix::from_fn(n, n, |i, j| if i == j { sqrt(w[i]) } else { 0.0 });
    let map = pinv * sw;
    let beta = &map * DVector::from_column_slice(v);
    let mut ss = 0.0;
    let mut ws = 0.0;
    for i in 0..n {
        let fit: f64 = rows[i].iter().enumerate().map(|(j, r)| r * beta[j]).sum();
        ss += w[i] * (v[i] - fit) * (v[i] - fit);
        ws += w[i];
    }
    Some((beta, sqrt(ss / ws), map))
}

/// A column of `d V / d beta` for the linear part of the PDE operator.
fn operator_weights(spec: &ProblemSpec, t: f64, x: &[f64], m: usize) -> Vec<f64> {
    let d = spec.d;
    let cov = spec.coeffs.covariance(t, x);
    let mut b = vec![0.0; d];
    spec.coeffs.drift(t, x, &mut b);
    let mut g = vec![0.0; m];
    g[1] = 1.0;
    g[2..2 + d].copy_from_slice(&b);
    let mut c = 2 + d;
    for a in 0..d {
        for bb in a..d {
            // 1/2 Tr(a X) = 1/2 sum a_ab X_ab
            g[c] = if a == bb { 0.5 * cov[a * d + a] } else { cov[a * d + bb] };
            c += 1;
        }
    }
    g
}

/// Least-squares jet of `<u, z>(s, y) ~ v0 + p (s - t) + <q, y - x> +
/// 1/2 <X (y - x), y - x>` around node `(ti, pi)`, weights `1 / (1 + rho^2)`
/// in units of the stencil extent.
pub fn fit_jet(
    spec: &ProblemSpec,
    field: &SolutionField,
    ti: usize,
    pi: usize,
    z: &DirectionProbe,
    st: &Stencil,
) -> Result<JetFit, ViscosityError> {
    if z.z().len() != field.k {
        return Err(ViscosityError::Direction(field.k));
    }
    let node_err = |reason: String| ViscosityError::Node { ti, pi, reason };
    let t = field.grid.times[ti];
    if t >= spec.horizon {
        return Err(node_err(String::from("jets need t < T")));
    }
    let x = field.grid.points[pi].clone();
    let d = field.d;
    let (times, pts) = stencil_nodes(field, ti, pi, st);
    let tspan = times
        .iter()
        .map(|&j| (field.grid.times[j] - t).abs())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let base_cols = 2 + d + d * (d + 1) / 2;
    let mut rows = Vec::new();
    let mut rich_rows = Vec::new();
    let mut w = Vec::new();
    let mut v = Vec::new();
    let mut nodes = Vec::new();
    for &tj in &times {
        for &pj in &pts {
            let ds = field.grid.times[tj] - t;
            let dy: Vec<f64> = field.grid.points[pj].iter().zip(&x).map(|(a, b)| a - b).collect();
            let rho2 = (ds / tspan) * (ds / tspan) + dot(&dy, &dy) / (st.radius * st.radius);
            rows.push(design_row(ds, &dy, false));
            rich_rows.push(design_row(ds, &dy, true));
            w.push(1.0 / (1.0 + rho2));
            v.push(dot(field.value(tj, pj), z.z()));
            nodes.push((tj, pj));
        }
    }
    let (beta, res, map) = wls(&rows, &w, &v).ok_or(ViscosityError::RankDeficient {
        ti,
        pi,
        rows: rows.len(),
        cols: base_cols,
    })?;
    let g = operator_weights(spec, t, &x, base_cols);
    let sensitivity: Vec<f64> = (0..rows.len())
        .map(|i| (0..base_cols).map(|c| g[c] * map[(c, i)]).sum())
        .collect();
    let rich = wls(&rich_rows, &w, &v).map(|(b, r, _)| jet_from_beta(&b, d, r));
    Ok(JetFit {
        jet: jet_from_beta(&beta, d, res),
        rich,
        nodes,
        sensitivity,
    })
}

/// `p + 1/2 Tr(sigma sigma^T X) + <b, q> + <f(t, x, u), z>`.
pub fn operator_value(spec: &ProblemSpec, t: f64, x: &[f64], u: &[f64], z: &[f64], jet: &Jet) -> f64 {
    let d = spec.d;
    let cov = spec.coeffs.covariance(t, x);
    let mut b = vec![0.0; d];
    spec.coeffs.drift(t, x, &mut b);
    let trace: f64 = (0..d * d).map(|i| cov[i] * jet.x[i]).sum();
    let mut f = vec![0.0; spec.k];
    spec.gen.eval(t, x, u, &mut f);
    jet.p + 0.5 * trace + dot(&b, &jet.q) + dot(&f, z)
}

fn relaxed(spec: &ProblemSpec, u: &[f64], z: &[f64], side: Side, sampler: &LimitSampler) -> Result<ExtendedReal, ViscosityError> {
    let est = match side {
        Side::Minus => spec.phi.liminf_dir_deriv(u, z, sampler)?,
        Side::Plus => spec.phi.limsup_dir_deriv(u, z, sampler)?,
    };
    Ok(est.value)
}

/// `V - phi'_*(u; z)`; `+inf` when the threshold is `-inf`.
pub fn supersolution_residual(
    spec: &ProblemSpec,
    field: &SolutionField,
    ti: usize,
    pi: usize,
    z: &DirectionProbe,
    jet: &Jet,
    sampler: &LimitSampler,
) -> Result<f64, ViscosityError> {
    let (t, x, u) = node_data(spec, field, ti, pi)?;
    let v = operator_value(spec, t, x, u, z.z(), jet);
    Ok((ExtendedReal::Finite(v) - relaxed(spec, u, z.z(), Side::Minus, sampler)?).to_f64())
}

/// `phi'^*(u; z) - V`.
pub fn subsolution_residual(
    spec: &ProblemSpec,
    field: &SolutionField,
    ti: usize,
    pi: usize,
    z: &DirectionProbe,
    jet: &Jet,
    sampler: &LimitSampler,
) -> Result<f64, ViscosityError> {
    let (t, x, u) = node_data(spec, field, ti, pi)?;
    let v = operator_value(spec, t, x, u, z.z(), jet);
    Ok((relaxed(spec, u, z.z(), Side::Plus, sampler)? - ExtendedReal::Finite(v)).to_f64())
}

fn node_data<'a>(
    spec: &ProblemSpec,
    field: &'a SolutionField,
    ti: usize,
    pi: usize,
) -> Result<(f64, &'a [f64], &'a [f64]), ViscosityError> {
    let u = field.value(ti, pi);
    if !spec.phi.in_domain(u) {
        return Err(ViscosityError::Node {
            ti,
            pi,
            reason: format!("u = {u:?} is outside Dom(phi)"),
        });
    }
    Ok((field.grid.times[ti], &field.grid.points[pi], u))
}

/// `v` within `delta` of a point where some axis derivative has a kink.
fn near_kink(spec: &ProblemSpec, v: &[f64], delta: f64) -> bool {
    if spec.phi.is_smooth() {
        return false;
    }
    let k = v.len();
    for i in 0..k {
        let mut e = vec![0.0; k];
        e[i] = 1.0;
        for s in [0.0, delta, -delta] {
            let mut w = v.to_vec();
            w[i] += s;
            match (spec.phi.dd(&w, &e, Side::Plus), spec.phi.dd(&w, &e, Side::Minus)) {
                (Ok(a), Ok(b)) if a.approx_eq(b, 1e-12) => {}
                _ => return true,
            }
        }
    }
    false
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flag {
    Ok,
    /// An inequality fails by more than the tolerance.
    Violation,
    /// The stencil reaches a kink of `phi`: the fitted quadratic need not
    /// be a jet there, so no verdict is given.
    Abstain,
    /// The field is not smooth at the stencil scale even for the enriched
    /// model.
    Outlier,
}

impl Flag {
    pub fn name(self) -> &'static str {
        match self {
            Flag::Ok => "ok",
            Flag::Violation => "violation",
            Flag::Abstain => "abstain",
            Flag::Outlier => "outlier",
        }
    }

    pub fn flagged(self) -> bool {
        matches!(self, Flag::Violation | Flag::Outlier)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub stencil: Stencil,
    /// `None`: `tau_factor * (truncation + noise)`, at least `tau_floor`
    /// times the operator scale.
    pub tau: Option<f64>,
    pub tau_factor: f64,
    pub tau_floor: f64,
    /// Outlier threshold on the enriched fit residual, relative to
    /// `1 + max |u|` over the stencil.
    pub outlier_rel: f64,
    pub kink_delta: f64,
    pub sampler: LimitSampler,
}

impl SweepConfig {
    pub fn new(stencil: Stencil) -> Self {
        Self {
            stencil,
            tau: None,
            tau_factor: 10.0,
            tau_floor: 1e-2,
            outlier_rel: 1e-3,
            kink_delta: 1e-6,
            sampler: LimitSampler::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub ti: usize,
    pub pi: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub res_super: f64,
    pub res_sub: f64,
    pub fit_residual: f64,
    pub tau: f64,
    pub flag: Flag,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Directions used, disclosed with the report.
    pub directions: Vec<Vec<f64>>,
}

impl SweepReport {
    pub fn count(&self, flag: Flag) -> usize {
        self.rows.iter().filter(|r| r.flag == flag).count()
    }

    /// Distinct flagged nodes, in report order.
    pub fn flagged_nodes(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.flag.flagged()) {
            if !out.contains(&(r.ti, r.pi)) {
                out.push((r.ti, r.pi));
            }
        }
        out
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| !r.flag.flagged())
    }
}

/// `+-e_i` plus `2k` seeded random unit vectors.
pub fn probe_directions(k: usize, seed: u64) -> DirectionSet {
    DirectionSet::new(k, 2 * k, seed)
}

/// One node, one direction.
pub fn check_node(
    spec: &ProblemSpec,
    field: &SolutionField,
    ti: usize,
    pi: usize,
    z: &DirectionProbe,
    cfg: &SweepConfig,
) -> Result<SweepRow, ViscosityError> {
    let fit = fit_jet(spec, field, ti, pi, z, &cfg.stencil)?;
    let res_super = supersolution_residual(spec, field, ti, pi, z, &fit.jet, &cfg.sampler)?;
    let res_sub = subsolution_residual(spec, field, ti, pi, z, &fit.jet, &cfg.sampler)?;
    let (t, x, u) = node_data(spec, field, ti, pi)?;
    let v = operator_value(spec, t, x, u, z.z(), &fit.jet);
    let truncation = fit
        .rich
        .as_ref()
        .map_or(0.0, |r| (operator_value(spec, t, x, u, z.z(), r) - v).abs());
    let noise = sqrt(
        fit.nodes
            .iter()
            .zip(&fit.sensitivity)
            .map(|(&(tj, pj), c)| {
                let s: f64 = field.se(tj, pj).iter().zip(z.z()).map(|(e, zz)| e * e * zz * zz).sum();
                c * c * s
            })
            .sum(),
    );
    let cov = spec.coeffs.covariance(t, x);
    let mut b = vec![0.0; spec.d];
    spec.coeffs.drift(t, x, &mut b);
    let mut f = vec![0.0; spec.k];
    spec.gen.eval(t, x, u, &mut f);
    let trace: f64 = (0..spec.d * spec.d).map(|i| cov[i] * fit.jet.x[i]).sum();
    let scale = 1.0 + fit.jet.p.abs() + 0.5 * trace.abs() + dot(&b, &fit.jet.q).abs() + dot(&f, z.z()).abs();
    let tau = cfg
        .tau
        .unwrap_or_else(|| (cfg.tau_factor * (truncation + noise)).max(cfg.tau_floor * scale));

    let umax = fit.nodes.iter().map(|&(tj, pj)| norm(field.value(tj, pj))).fold(0.0f64, f64::max);
    let se_rms = sqrt(
        fit.nodes
            .iter()
            .map(|&(tj, pj)| field.se(tj, pj).iter().map(|e| e * e).sum::<f64>())
            .sum::<f64>()
            / fit.nodes.len() as f64,
    );
    let rich_res = fit.rich.as_ref().map_or(fit.jet.fit_residual, |r| r.fit_residual);
    let kink = fit
        .nodes
        .iter()
        .any(|&(tj, pj)| near_kink(spec, field.value(tj, pj), cfg.kink_delta * (1.0 + norm(field.value(tj, pj)))));
    let flag = if kink {
        Flag::Abstain
    } else if rich_res > cfg.tau_factor * se_rms + cfg.outlier_rel * (1.0 + umax) {
        Flag::Outlier
    } else if res_super < -tau || res_sub < -tau {
        Flag::Violation
    } else {
        Flag::Ok
    };
    Ok(SweepRow {
        ti,
        pi,
        t,
        x: x.to_vec(),
        z: z.z().to_vec(),
        res_super,
        res_sub,
        fit_residual: fit.jet.fit_residual,
        tau,
        flag,
    })
}

/// Every node in `nodes` against every direction, node-major.
pub fn sweep(
    spec: &ProblemSpec,
    field: &SolutionField,
    nodes: &[(usize, usize)],
    directions: &DirectionSet,
    cfg: &SweepConfig,
) -> Result<SweepReport, ViscosityError> {
    let probes: Vec<DirectionProbe> = directions.iter().map(|z| DirectionProbe::new(z)).collect::<Result<_, _>>()?;
    let mut rows = Vec::with_capacity(nodes.len() * probes.len());
    for &(ti, pi) in nodes {
        for z in &probes {
            rows.push(check_node(spec, field, ti, pi, z, cfg)?);
        }
    }
    Ok(SweepReport {
        rows,
        directions: probes.into_iter().map(|p| p.z).collect(),
    })
}

#[cfg(test)]
mod tests;
