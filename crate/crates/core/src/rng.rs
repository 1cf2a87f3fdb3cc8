//! Counter-based random streams.
//!
//! Every random quantity is addressed by `(key, stream, word offset)` in a
//! ChaCha8 keystream, so a value depends only on the master seed and its
//! logical coordinates (path, step, ...), never on evaluation order or the
//! number of workers.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::vecops::{ln, sqrt};

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a list of labels.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(mix64(seed), |acc, &l| mix64(acc ^ mix64(l.wrapping_add(0x5851_F42D_4C95_7F2D))))
}

/// A 256-bit ChaCha key expanded from a 64-bit seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamKey([u8; 32]);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        let mut s = seed;
        for chunk in key.chunks_mut(8) {
            s = mix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        Self(key)
    }

    /// Generator positioned at `word` (32-bit words) of `stream`.
    pub fn at(&self, stream: u64, word: u128) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.0);
        rng.set_stream(stream);
        rng.set_word_pos(word);
        rng
    }
}

/// Uniform on `(0, 1]` built from the top 53 bits.
#[inline]
pub fn uniform_open0(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Uniform on `[0, 1)`.
#[inline]
pub fn uniform(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Fills `out` with standard normals by Box–Muller. Always consumes
/// exactly `normal_words(out.len())` words.
pub fn fill_normals(rng: &mut impl RngCore, out: &mut [f64]) {
    let mut i = 0;
    while i < out.len() {
        let u1 = uniform_open0(rng);
        let u2 = uniform(rng);
        let r = sqrt(-2.0 * ln(u1));
        let theta = 2.0 * PI * u2;
        out[i] = r * libm::cos(theta);
        if i + 1 < out.len() {
            out[i + 1] = r * libm::sin(theta);
        }
        i += 2;
    }
}

/// Keystream words consumed by `fill_normals` for `n` normals.
pub const fn normal_words(n: usize) -> u128 {
    (n.div_ceil(2) * 4) as u128
}

/// Unbiased-enough index in `0..n` via the 128-bit multiply trick.
#[inline]
pub fn index_below(rng: &mut impl RngCore, n: usize) -> usize {
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Fisher–Yates permutation of `0..n` driven by `rng`.
pub fn permutation(rng: &mut impl RngCore, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = index_below(rng, i + 1);
        p.swap(i, j);
    }
    p
}

/// Standard normal on the unit sphere in `k` dimensions.
pub fn unit_vector(rng: &mut impl RngCore, k: usize) -> Vec<f64> {
    loop {
        let mut v = alloc::vec![0.0; k];
        fill_normals(rng, &mut v);
        let n = crate::vecops::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Inverse of the standard normal CDF (Wichura's AS241, PPND16),
/// accurate to about 1e-16 on `(0, 1)`.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must lie in (0, 1)");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2509.080_928_730_122_7 * r + 33430.575_583_588_128) * r
            + 67265.770_927_008_7)
            * r
            + 45921.953_931_549_87)
            * r
            + 13731.693_765_509_461)
            * r
            + 1971.590_950_306_551_3)
            * r
            + 133.141_667_891_784_38)
            * r
            + 3.387_132_872_796_366_5;
        let den = ((((((5226.495_278_852_545 * r + 28729.085_735_721_943) * r
            + 39307.895_800_092_71)
            * r
            + 21213.794_301_586_597)
            * r
            + 5394.196_021_424_751)
            * r
            + 687.187_007_492_057_9)
            * r
            + 42.313_330_701_600_91)
            * r
            + 1.0;
        return q * num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = sqrt(-ln(r));
    let val = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 0.015_198_666_563_616_457)
            * r
            + 0.148_103_976_427_480_08)
            * r
            + 0.689_767_334_985_1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 0.001_242_660_947_388_078_4)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_87)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 0.014_875_361_290_850_615)
            * r
            + 0.136_929_880_922_735_8)
            * r
            + 0.599_832_206_555_888)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal_cdf(x: f64) -> f64 {
        0.5 * libm::erfc(-x / core::f64::consts::SQRT_2)
    }

    #[test]
    fn inverse_cdf_round_trips_through_erfc() {
        for &p in &[1e-12, 1e-6, 0.01, 0.2, 0.5, 0.7, 0.975, 1.0 - 1e-9] {
            let x = inverse_normal_cdf(p);
            let back = normal_cdf(x);
            assert!((back - p).abs() <= 1e-13 * p.max(1e-3), "p={p} x={x} back={back}");
        }
        assert!((inverse_normal_cdf(0.975) - 1.959_963_984_540_054).abs() < 1e-14);
    }

    #[test]
    fn seeking_matches_sequential_reads() {
        let key = StreamKey::new(42);
        let mut seq = key.at(7, 0);
        let mut a = [0.0; 6];
        let mut b = [0.0; 6];
        fill_normals(&mut seq, &mut a[..3]);
        fill_normals(&mut seq, &mut a[3..]);
        let mut r0 = key.at(7, 0);
        fill_normals(&mut r0, &mut b[..3]);
        let mut r1 = key.at(7, normal_words(3));
        fill_normals(&mut r1, &mut b[3..]);
        assert_eq!(a, b);
    }

    #[test]
    fn permutation_is_a_bijection() {
        let mut rng = StreamKey::new(3).at(0, 0);
        let mut p = permutation(&mut rng, 257);
        p.sort_unstable();
        assert!(p.iter().enumerate().all(|(i, &v)| i == v));
    }
}
