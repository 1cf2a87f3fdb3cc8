//! Least-squares conditional expectations on a polynomial basis.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};

/// Monomials of total degree `<= degree` in the standardized state.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionBasis {
    pub degree: usize,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self { degree: 3 }
    }
}

impl RegressionBasis {
    /// `binom(d + D, D)`.
    pub fn n_functions(&self, d: usize) -> usize {
        let mut c = 1usize;
        for i in 1..=self.degree {
            c = c * (d + i) / i;
        }
        c
    }
}

pub(crate) struct Fit {
    /// `[row][target]`, same layout as the targets.
    pub fitted: Vec<f64>,
    pub warning: Option<String>,
}

/// Exponent vectors of all monomials in `d` variables of total degree `<= deg`,
/// graded order.
pub(crate) fn exponents(d: usize, deg: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; d]];
    let mut layer = vec![vec![0u32; d]];
    for _ in 0..deg {
        let mut next = Vec::new();
        for e in &layer {
            // only raise coordinates at or after the last nonzero to avoid repeats
            let start = e.iter().rposition(|&v| v > 0).unwrap_or(0);
            for j in start..d {
                let mut f = e.clone();
                f[j] += 1;
                next.push(f);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = libm::ceil(pos) as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

fn column_means(targets: &[f64], n: usize, q: usize) -> Vec<f64> {
    let mut m = vec![0.0; q];
    for r in 0..n {
        for (o, v) in m.iter_mut().zip(&targets[r * q..(r + 1) * q]) {
            *o += v;
        }
    }
    m.iter_mut().for_each(|x| *x /= n as f64);
    m
}

/// Regresses each target column on the basis evaluated at `xs` (`n x d`,
/// row-major) and returns fitted values. Coordinates without spread are
/// dropped silently; genuine rank deficiency lowers the degree and is
/// reported.
pub(crate) fn regress(
    xs: &[f64],
    d: usize,
    targets: &[f64],
    q: usize,
    basis: &RegressionBasis,
    winsor: f64,
) -> Result<Fit, String> {
    let n = xs.len() / d;
    if n == 0 || targets.len() != n * q {
        return Err(String::from("empty or mismatched regression data"));
    }
    let mut z: Vec<Vec<f64>> = Vec::new();
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|r| xs[r * d + j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let sd = crate::vecops::sqrt(var);
        if !(sd > 1e-12 * (1.0 + mean.abs())) {
            continue;
        }
        let mut s: Vec<f64> = col.iter().map(|x| (x - mean) / sd).collect();
        if winsor > 0.0 && n > 2 {
            let mut sorted = s.clone();
            sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite regressors"));
            let lo = quantile_sorted(&sorted, winsor);
            let hi = quantile_sorted(&sorted, 1.0 - winsor);
            s.iter_mut().for_each(|x| *x = x.clamp(lo, hi));
        }
        z.push(s);
    }
    let da = z.len();
    let constant = || Fit {
        fitted: {
            let m = column_means(targets, n, q);
            (0..n).flat_map(|_| m.iter().cloned()).collect()
        },
        warning: None,
    };
    if da == 0 || basis.degree == 0 {
        return Ok(constant());
    }

    let mut warning = None;
    let mut deg = basis.degree;
    while deg > 0 {
        let ex = exponents(da, deg);
        let m = ex.len();
        if m > n {
            warning = Some(format!("only {n} samples for {m} basis functions; degree lowered below {deg}"));
            deg -= 1;
            continue;
        }
        let mut phi = vec![0.0; n * m];
        let mut pw = vec![vec![1.0; deg + 1]; da];
        for r in 0..n {
            for (j, zj) in z.iter().enumerate() {
                for e in 1..=deg {
                    pw[j][e] = pw[j][e - 1] * zj[r];
                }
            }
            for (c, e) in ex.iter().enumerate() {
                phi[r * m + c] = e.iter().enumerate().map(|(j, &p)| pw[j][p as usize]).product();
            }
        }
        let mut g = DMatrix::<f64>::zeros(m, m);
        let mut rhs = DMatrix::<f64>::zeros(m, q);
        for r in 0..n {
            let row = &phi[r * m..(r + 1) * m];
            let tr = &targets[r * q..(r + 1) * q];
            for a in 0..m {
                for b in a..m {
                    g[(a, b)] += row[a] * row[b];
                }
                for c in 0..q {
                    rhs[(a, c)] += row[a] * tr[c];
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                g[(a, b)] = g[(b, a)];
            }
        }
        let eig = SymmetricEigen::new(g);
        let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(lmin > 1e-12 * lmax) {
            warning = Some(format!("design matrix is rank-deficient at degree {deg}; degree lowered"));
            deg -= 1;
            continue;
        }
        let v = &eig.eigenvectors;
        let mut proj = v.transpose() * rhs;
        for a in 0..m {
            let inv = 1.0 / eig.eigenvalues[a];
            for c in 0..q {
                proj[(a, c)] *= inv;
            }
        }
        let beta = v * proj;
        let mut fitted = vec![0.0; n * q];
        for r in 0..n {
            let row = &phi[r * m..(r + 1) * m];
            for c in 0..q {
                fitted[r * q + c] = (0..m).map(|a| row[a] * beta[(a, c)]).sum();
            }
        }
        return Ok(Fit {
            fitted,
            warning,
        });
    }
    let mut f = constant();
    f.warning = warning;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_counts() {
        assert_eq!(exponents(1, 3).len(), 4);
        assert_eq!(exponents(2, 3).len(), 10);
        assert_eq!(exponents(3, 2).len(), 10);
        assert_eq!(RegressionBasis { degree: 3 }.n_functions(2), 10);
        let mut e = exponents(2, 2);
        e.sort();
        e.dedup();
        assert_eq!(e.len(), 6);
    }

    #[test]
    fn reproduces_polynomials_exactly() {
        let n = 200;
        let xs: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x + 0.5 * x * x * x).collect();
        let fit = regress(&xs, 1, &ys, 1, &RegressionBasis::default(), 0.0).unwrap();
        assert!(fit.warning.is_none());
        for (f, y) in fit.fitted.iter().zip(&ys) {
            assert!((f - y).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_regressor_gives_mean_without_warning() {
        let xs = vec![3.0; 10];
        let ys: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let fit = regress(&xs, 1, &ys, 1, &RegressionBasis::default(), 5e-4).unwrap();
        assert!(fit.warning.is_none());
        assert!(fit.fitted.iter().all(|&v| (v - 4.5).abs() < 1e-15));
    }

    #[test]
    fn two_level_regressor_lowers_degree_with_warning() {
        let xs: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let fit = regress(&xs, 1, &ys, 1, &RegressionBasis::default(), 0.0).unwrap();
        assert!(fit.warning.is_some());
        for (f, y) in fit.fitted.iter().zip(&ys) {
            assert!((f - y).abs() < 1e-12);
        }
    }
}
