//! Convex quadratic programs over the probability simplex,
//! `min 0.5 * m' G m - d' m` subject to `m >= 0, sum(m) = 1`.
//!
//! Used for the prox and the minimal section of `MaxOfAffine`, and for
//! projections onto convex hulls of finitely many slopes.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

/// Supports are enumerated exactly up to this many atoms; larger problems
/// use projected gradient.
const MAX_ENUMERATED: usize = 14;

#[derive(Debug)]
pub(crate) struct SimplexQp<'a> {
    /// Row-major symmetric PSD `m x m`.
    pub g: &'a [f64],
    pub d: &'a [f64],
}

impl SimplexQp<'_> {
    fn m(&self) -> usize {
        self.d.len()
    }

    fn grad(&self, mu: &[f64]) -> Vec<f64> {
        let m = self.m();
        (0..m)
            .map(|i| (0..m).map(|j| self.g[i * m + j] * mu[j]).sum::<f64>() - self.d[i])
            .collect()
    }

    fn scale(&self) -> f64 {
        let gs = self.g.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let ds = self.d.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        1.0 + gs + ds
    }

    /// Returns a minimizer, or `None` when the iterative fallback stalls.
    pub fn solve(&self) -> Option<Vec<f64>> {
        let m = self.m();
        assert!(m > 0);
        if m == 1 {
            return Some(vec![1.0]);
        }
        if m <= MAX_ENUMERATED {
            if let Some(mu) = self.solve_by_supports() {
                return Some(mu);
            }
        }
        self.solve_projected_gradient()
    }

    /// Walks supports by increasing size; the first KKT point is optimal.
    fn solve_by_supports(&self) -> Option<Vec<f64>> {
        let m = self.m();
        let tol = 1e-11 * self.scale();
        for size in 1..=m {
            let mut support: Vec<usize> = (0..size).collect();
            loop {
                if let Some(mu) = self.kkt_on_support(&support, tol) {
                    return Some(mu);
                }
                if !next_combination(&mut support, m) {
                    break;
                }
            }
        }
        None
    }

    fn kkt_on_support(&self, support: &[usize], tol: f64) -> Option<Vec<f64>> {
        let m = self.m();
        let s = support.len();
        let mut a = DMatrix::<f64>::zeros(s + 1, s + 1);
        let mut rhs = DVector::<f64>::zeros(s + 1);
        for (r, &i) in support.iter().enumerate() {
            for (c, &j) in support.iter().enumerate() {
                a[(r, c)] = self.g[i * m + j];
            }
            a[(r, s)] = 1.0;
            a[(s, r)] = 1.0;
            rhs[r] = self.d[i];
        }
        rhs[s] = 1.0;
        let svd = a.clone().svd(true, true);
        let mut sol = svd.solve(&rhs, 1e-13).ok()?;
        for _ in 0..2 {
            let r = &rhs - &a * &sol;
            sol += svd.solve(&r, 1e-13).ok()?;
        }
        let resid = &a * &sol - &rhs;
        if resid.amax() > tol {
            return None;
        }
        let mut mu = vec![0.0; m];
        for (r, &i) in support.iter().enumerate() {
            if sol[r] < -tol {
                return None;
            }
            mu[i] = sol[r].max(0.0);
        }
        let total: f64 = mu.iter().sum();
        if total <= 0.0 {
            return None;
        }
        mu.iter_mut().for_each(|x| *x /= total);
        let nu = sol[s];
        let grad = self.grad(&mu);
        for (j, gj) in grad.iter().enumerate() {
            if !support.contains(&j) && gj + nu < -tol {
                return None;
            }
        }
        Some(mu)
    }

    fn solve_projected_gradient(&self) -> Option<Vec<f64>> {
        let m = self.m();
        let lip = (0..m)
            .map(|i| (0..m).map(|j| self.g[i * m + j].abs()).sum::<f64>())
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let step = 1.0 / lip;
        let mut x = vec![1.0 / m as f64; m];
        let mut y = x.clone();
        let mut t = 1.0f64;
        for _ in 0..200_000 {
            let g = self.grad(&y);
            let cand: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - step * gi).collect();
            let x_new = project_simplex(&cand);
            let t_new = 0.5 * (1.0 + crate::vecops::sqrt(1.0 + 4.0 * t * t));
            let change = x_new
                .iter()
                .zip(&x)
                .fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
            y = x_new
                .iter()
                .zip(&x)
                .map(|(p, q)| p + ((t - 1.0) / t_new) * (p - q))
                .collect();
            x = x_new;
            t = t_new;
            if change < 1e-15 {
                return Some(x);
            }
        }
        None
    }
}

fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Euclidean projection onto the probability simplex (sort-based).
pub(crate) fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Row-major Gram matrix of the given rows.
pub(crate) fn gram(rows: &[Vec<f64>]) -> Vec<f64> {
    let m = rows.len();
    let mut g = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            g[i * m + j] = crate::vecops::dot(&rows[i], &rows[j]);
        }
    }
    g
}

/// Projection of `target` onto `conv(rows)`.
pub(crate) fn project_onto_hull(rows: &[Vec<f64>], target: &[f64]) -> Option<Vec<f64>> {
    let g = gram(rows);
    let d: Vec<f64> = rows.iter().map(|r| crate::vecops::dot(r, target)).collect();
    let mu = SimplexQp { g: &g, d: &d }.solve()?;
    Some(combine(rows, &mu))
}

pub(crate) fn combine(rows: &[Vec<f64>], mu: &[f64]) -> Vec<f64> {
    let k = rows[0].len();
    let mut out = vec![0.0; k];
    for (r, w) in rows.iter().zip(mu) {
        for (o, x) in out.iter_mut().zip(r) {
            *o += w * x;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hull_projection_of_segment() {
        let rows = vec![vec![-1.0, 0.0], vec![1.0, 0.0]];
        let p = project_onto_hull(&rows, &[0.3, 2.0]).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-12 && p[1].abs() < 1e-12);
        let p = project_onto_hull(&rows, &[5.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn least_norm_point_of_triangle() {
        let rows = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![3.0, 0.0]];
        let p = project_onto_hull(&rows, &[0.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);
    }

    #[test]
    fn projected_gradient_agrees_with_enumeration() {
        let rows = vec![vec![2.0, 1.0], vec![-1.0, 3.0], vec![0.5, -2.0], vec![1.0, 1.0]];
        let g = gram(&rows);
        let d = vec![0.1, -0.3, 0.7, 0.2];
        let qp = SimplexQp { g: &g, d: &d };
        let a = qp.solve_by_supports().unwrap();
        let b = qp.solve_projected_gradient().unwrap();
        let pa = combine(&rows, &a);
        let pb = combine(&rows, &b);
        assert!(crate::vecops::dist(&pa, &pb) < 1e-7);
    }

    #[test]
    fn simplex_projection_sums_to_one() {
        let p = project_simplex(&[0.2, -3.0, 1.5, 0.9]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(p.iter().all(|&x| x >= 0.0));
    }
}
