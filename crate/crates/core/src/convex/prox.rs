//! Proximal maps `prox_{lambda phi}(v) = argmin_u phi(u) + |u - v|^2 / (2 lambda)`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use super::qp::{gram, SimplexQp};
use super::{ConvexError, ConvexFunction, ConvexKind};
use crate::vecops::{dist, dot, norm};

/// Relative stopping tolerance of the iterative sum prox.
pub const PROX_TOL: f64 = 1e-10;
pub const PROX_MAX_ITER: usize = 200_000;

impl ConvexFunction {
    /// `prox_{lambda phi}(v)`. Closed form for every base kind; sums use a
    /// parallel Dykstra-like splitting over their terms.
    pub fn prox(&self, lambda: f64, v: &[f64]) -> Result<Vec<f64>, ConvexError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(ConvexError::BadLambda(lambda));
        }
        self.check_dim(v)?;
        if !crate::vecops::all_finite(v) {
            return Err(ConvexError::NonFinite);
        }
        let k = self.dim();
        match self.kind() {
            ConvexKind::Zero => Ok(v.to_vec()),
            ConvexKind::SeparableAbs => Ok(v
                .iter()
                .map(|&x| x.signum() * (x.abs() - lambda).max(0.0))
                .collect()),
            ConvexKind::EuclideanNorm => {
                let n = norm(v);
                if n <= lambda {
                    Ok(vec![0.0; k])
                } else {
                    let s = 1.0 - lambda / n;
                    Ok(v.iter().map(|x| s * x).collect())
                }
            }
            ConvexKind::Quadratic { q } => solve_shifted(q, k, lambda, v).ok_or(ConvexError::Unbounded),
            ConvexKind::NegatedQuadraticFault { q } => {
                solve_shifted(q, k, -lambda, v).ok_or(ConvexError::Unbounded)
            }
            ConvexKind::IndicatorBox { lo, hi } => Ok(v
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(x, (a, b))| x.max(*a).min(*b))
                .collect()),
            ConvexKind::IndicatorBall { center, radius } => {
                let d = dist(v, center);
                if d <= *radius {
                    Ok(v.to_vec())
                } else {
                    let s = radius / d;
                    Ok(center.iter().zip(v).map(|(c, x)| c + s * (x - c)).collect())
                }
            }
            ConvexKind::IndicatorHalfspace { normal, offset } => {
                let s = dot(normal, v) - offset;
                if s <= 0.0 {
                    Ok(v.to_vec())
                } else {
                    let t = s / dot(normal, normal);
                    Ok(v.iter().zip(normal).map(|(x, a)| x - t * a).collect())
                }
            }
            ConvexKind::MaxOfAffine { slopes, intercepts } => {
                // Dual: max over the simplex of  <mu, A v + c> - lambda/2 |A' mu|^2;
                // the primal point is v - lambda A' mu.
                let g: Vec<f64> = gram(slopes).into_iter().map(|x| lambda * x).collect();
                let d: Vec<f64> = slopes
                    .iter()
                    .zip(intercepts)
                    .map(|(a, c)| dot(a, v) + c)
                    .collect();
                let mu = SimplexQp { g: &g, d: &d }
                    .solve()
                    .ok_or(ConvexError::ProxNotConverged {
                        iterations: PROX_MAX_ITER,
                        change: f64::NAN,
                    })?;
                let mut u = v.to_vec();
                for (a, m) in slopes.iter().zip(&mu) {
                    for (ui, ai) in u.iter_mut().zip(a) {
                        *ui -= lambda * m * ai;
                    }
                }
                Ok(u)
            }
            ConvexKind::ScaledSum { terms } => prox_sum(terms, lambda, v),
        }
    }
}

/// Solves `(I + s Q) u = v`; `None` when the shifted matrix is not PD.
fn solve_shifted(q: &[f64], k: usize, s: f64, v: &[f64]) -> Option<Vec<f64>> {
    let mut m = DMatrix::from_row_slice(k, k, q) * s;
    for i in 0..k {
        m[(i, i)] += 1.0;
    }
    let chol = m.cholesky()?;
    let u = chol.solve(&DVector::from_column_slice(v));
    Some(u.iter().cloned().collect())
}

fn prox_sum(terms: &[(f64, ConvexFunction)], lambda: f64, v: &[f64]) -> Result<Vec<f64>, ConvexError> {
    if terms.len() == 1 {
        let (w, f) = &terms[0];
        return f.prox(lambda * w, v);
    }
    let m = terms.len();
    let omega = 1.0 / m as f64;
    let mut x = v.to_vec();
    let mut z: Vec<Vec<f64>> = vec![v.to_vec(); m];
    let mut p: Vec<Vec<f64>> = vec![v.to_vec(); m];
    let mut change = f64::INFINITY;
    for it in 0..PROX_MAX_ITER {
        for j in 0..m {
            let (w, f) = &terms[j];
            p[j] = f.prox(lambda * w / omega, &z[j])?;
        }
        let mut x_new = vec![0.0; v.len()];
        for pj in &p {
            for (o, y) in x_new.iter_mut().zip(pj) {
                *o += omega * y;
            }
        }
        for j in 0..m {
            for ((zi, xi), pi) in z[j].iter_mut().zip(&x_new).zip(&p[j]) {
                *zi += xi - pi;
            }
        }
        change = dist(&x_new, &x);
        let spread = p.iter().map(|pj| dist(pj, &x_new)).fold(0.0f64, f64::max);
        x = x_new;
        let scale = 1.0 + norm(&x);
        if it > 0 && change <= 1e-3 * PROX_TOL * scale && spread <= PROX_TOL * scale {
            // The average only approximates the exact structure (feasibility,
            // exact zeros at kinks) that a nonsmooth term's own iterate has,
            // so a lone constraint, else a lone nonsmooth term, supplies it.
            let indicators: Vec<usize> = (0..m).filter(|&j| terms[j].1.is_indicator()).collect();
            let nonsmooth: Vec<usize> = (0..m).filter(|&j| !terms[j].1.is_smooth()).collect();
            let pick = if indicators.is_empty() { nonsmooth } else { indicators };
            if pick.len() == 1 {
                return Ok(p[pick[0]].clone());
            }
            return Ok(x);
        }
    }
    Err(ConvexError::ProxNotConverged {
        iterations: PROX_MAX_ITER,
        change,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold() {
        let f = ConvexFunction::separable_abs(3);
        let p = f.prox(0.5, &[2.0, -0.2, -1.0]).unwrap();
        assert_eq!(p, vec![1.5, 0.0, -0.5]);
    }

    #[test]
    fn sum_of_abs_and_quadratic_matches_closed_form() {
        // min |u| + q/2 u^2 + (u - v)^2 / (2 lambda)  =>  u = S_lambda(v) / (1 + lambda q)
        let q = 3.0;
        let f = ConvexFunction::scaled_sum(vec![
            (1.0, ConvexFunction::separable_abs(1)),
            (1.0, ConvexFunction::quadratic(1, vec![q]).unwrap()),
        ])
        .unwrap();
        for &(lambda, v) in &[(0.5f64, 2.0f64), (0.2, -0.1), (1.0, -4.0), (0.3, 0.31)] {
            let s: f64 = if v > 0.0 { (v - lambda as f64).max(0.0) } else { (v + lambda as f64).min(0.0) };
            let want = s / (1.0 + lambda * q);
            let got = f.prox(lambda, &[v]).unwrap()[0];
            assert!((got - want).abs() < 1e-8, "lambda={lambda} v={v}: {got} vs {want}");
        }
    }

    #[test]
    fn sum_with_one_indicator_returns_feasible_point() {
        let f = ConvexFunction::scaled_sum(vec![
            (1.0, ConvexFunction::nonnegative_orthant(2)),
            (2.0, ConvexFunction::half_squared_norm(2)),
        ])
        .unwrap();
        let p = f.prox(0.5, &[-1.0, 3.0]).unwrap();
        assert_eq!(p[0], 0.0);
        assert!((p[1] - 1.5).abs() < 1e-8);
    }

    #[test]
    fn max_of_affine_prox_of_abs_value() {
        // max(u, -u) = |u|
        let f = ConvexFunction::max_of_affine(vec![vec![1.0], vec![-1.0]], vec![0.0, 0.0]).unwrap();
        let g = ConvexFunction::separable_abs(1);
        for &v in &[-2.0, -0.3, 0.0, 0.7, 5.0] {
            let a = f.prox(0.5, &[v]).unwrap()[0];
            let b = g.prox(0.5, &[v]).unwrap()[0];
            assert!((a - b).abs() < 1e-12, "v={v}");
        }
    }

    #[test]
    fn negated_quadratic_has_no_prox_for_large_steps() {
        let f = ConvexFunction::fault_negated_quadratic(1, vec![1.0]).unwrap();
        assert!(f.prox(0.5, &[1.0]).is_ok());
        assert_eq!(f.prox(2.0, &[1.0]), Err(ConvexError::Unbounded));
    }
}
