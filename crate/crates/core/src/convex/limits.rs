//! Direction sets and the relaxed derivatives `phi'_*` / `phi'^*`.
//!
//! `phi'_*(u; z) = liminf_{v -> u, v in Dom(d phi)} phi'_-(v; z)` and
//! `phi'^*(u; z) = limsup_{v -> u, v in Dom(d phi)} phi'_+(v; z)`.

use alloc::vec::Vec;

use super::{ball_radius_sample, ConvexError, ConvexFunction, DirDerivMethod, Side};
use crate::ext::ExtendedReal;
use crate::rng::{derive_seed, uniform, unit_vector, StreamKey};

/// Test directions: the signed axes `+-e_i` followed by seeded random unit
/// vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionSet {
    dirs: Vec<Vec<f64>>,
}

impl DirectionSet {
    pub fn axes(k: usize) -> Self {
        let mut dirs = Vec::with_capacity(2 * k);
        for i in 0..k {
            for s in [1.0, -1.0] {
                let mut e = alloc::vec![0.0; k];
                e[i] = s;
                dirs.push(e);
            }
        }
        Self { dirs }
    }

    pub fn new(k: usize, n_random: usize, seed: u64) -> Self {
        let mut set = Self::axes(k);
        let mut rng = StreamKey::new(derive_seed(seed, &[0xD1EC])).at(0, 0);
        for _ in 0..n_random {
            set.dirs.push(unit_vector(&mut rng, k));
        }
        set
    }

    pub fn from_vectors(dirs: Vec<Vec<f64>>) -> Self {
        Self { dirs }
    }

    pub fn push(&mut self, z: Vec<f64>) {
        self.dirs.push(z);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.dirs.iter()
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }
}

/// Shrinking-neighbourhood sampler for the relaxed limits.
#[derive(Clone, Debug, PartialEq)]
pub struct LimitSampler {
    pub radii: Vec<f64>,
    pub samples_per_radius: usize,
    pub seed: u64,
}

impl Default for LimitSampler {
    fn default() -> Self {
        Self {
            radii: alloc::vec![1e-1, 1e-2, 1e-3, 1e-4],
            samples_per_radius: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimitEstimate {
    pub value: ExtendedReal,
    /// Inf (or sup) over each neighbourhood, outermost first. Empty for
    /// closed forms.
    pub per_radius: Vec<ExtendedReal>,
    pub method: DirDerivMethod,
}

impl ConvexFunction {
    /// `phi'_*(u; z)`.
    pub fn liminf_dir_deriv(
        &self,
        u: &[f64],
        z: &[f64],
        sampler: &LimitSampler,
    ) -> Result<LimitEstimate, ConvexError> {
        self.relaxed(u, z, Side::Minus, sampler)
    }

    /// `phi'^*(u; z)`.
    pub fn limsup_dir_deriv(
        &self,
        u: &[f64],
        z: &[f64],
        sampler: &LimitSampler,
    ) -> Result<LimitEstimate, ConvexError> {
        self.relaxed(u, z, Side::Plus, sampler)
    }

    /// Sampled estimate regardless of whether a closed form exists.
    pub fn relaxed_sampled(
        &self,
        u: &[f64],
        z: &[f64],
        side: Side,
        sampler: &LimitSampler,
    ) -> Result<LimitEstimate, ConvexError> {
        self.check_dim(u)?;
        self.check_dim(z)?;
        if !crate::vecops::all_finite(u) {
            return Err(ConvexError::NonFinite);
        }
        let k = self.dim();
        let key = StreamKey::new(derive_seed(sampler.seed, &[0x11A1]));
        let mut per_radius = Vec::with_capacity(sampler.radii.len());
        for (ri, &r) in sampler.radii.iter().enumerate() {
            let mut rng = key.at(ri as u64, 0);
            let mut candidates: Vec<Vec<f64>> = Vec::new();
            candidates.push(u.to_vec());
            for i in 0..k {
                for s in [r, -r] {
                    let mut v = u.to_vec();
                    v[i] += s;
                    candidates.push(v);
                }
            }
            for _ in 0..sampler.samples_per_radius {
                let dir = unit_vector(&mut rng, k);
                let rho = ball_radius_sample(r, uniform(&mut rng), k);
                candidates.push(u.iter().zip(&dir).map(|(a, d)| a + rho * d).collect());
            }
            let mut best: Option<ExtendedReal> = None;
            for c in candidates {
                let v = if self.in_subdiff_domain(&c) {
                    c
                } else {
                    match self.project_to_subdiff_domain(&c) {
                        Ok(p) => p,
                        Err(_) => continue,
                    }
                };
                if !self.in_subdiff_domain(&v) || crate::vecops::dist(&v, u) > r * (1.0 + 1e-9) {
                    continue;
                }
                let d = self.dd(&v, z, side)?;
                best = Some(match (best, side) {
                    (None, _) => d,
                    (Some(b), Side::Minus) => b.min(d),
                    (Some(b), Side::Plus) => b.max(d),
                });
            }
            match best {
                Some(b) => per_radius.push(b),
                None => return Err(ConvexError::NoDomainSample { radius: r }),
            }
        }
        let value = *per_radius.last().ok_or(ConvexError::NoDomainSample { radius: 0.0 })?;
        Ok(LimitEstimate {
            value,
            per_radius,
            method: DirDerivMethod::Sampled,
        })
    }

    fn relaxed(
        &self,
        u: &[f64],
        z: &[f64],
        side: Side,
        sampler: &LimitSampler,
    ) -> Result<LimitEstimate, ConvexError> {
        if self.has_closed_form_limits() && self.in_subdiff_domain(u) {
            return Ok(LimitEstimate {
                value: self.dd(u, z, side)?,
                per_radius: Vec::new(),
                method: DirDerivMethod::ClosedForm,
            });
        }
        self.relaxed_sampled(u, z, side, sampler)
    }
}
