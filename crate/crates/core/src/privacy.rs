//! Analytic calculators: brute-force hardness of recovering a value hidden
//! behind a mask bank, the DP noise bound, and ring rank of scalar matrices.

use crate::error::{ensure, Error, Result};
use crate::ring::mask;

/// Single-thread time to search a 20-bit space (m = 2, f = 10), in seconds.
pub const BASELINE_SECONDS: f64 = 62.1;
pub const BASELINE_BITS: u32 = 20;
const SECONDS_PER_YEAR: f64 = 365.0 * 24.0 * 3600.0;

#[derive(Clone, Debug, PartialEq)]
pub struct HardnessReport {
    pub masks: u32,
    pub frac_bits: u32,
    /// log2 of the search space, `masks * frac_bits`.
    pub bits: u32,
    /// RSA modulus length with comparable security strength.
    pub rsa_band: &'static str,
    pub seconds: f64,
}

impl HardnessReport {
    pub fn years(&self) -> f64 {
        self.seconds / SECONDS_PER_YEAR
    }

    /// Break time in the coarsest readable unit: seconds below a year,
    /// whole years below 10^4, scientific notation above.
    pub fn time_display(&self) -> String {
        if self.seconds < SECONDS_PER_YEAR {
            format!("{:.1} seconds", self.seconds)
        } else if self.years() < 1e4 {
            format!("{:.0} years", self.years())
        } else {
            let exp = self.years().log10().floor();
            let mant = self.years() / 10f64.powf(exp);
            // rounding the mantissa can carry into the exponent
            let (mant, exp) = if (mant * 100.0).round() >= 1000.0 { (mant / 10.0, exp + 1.0) } else { (mant, exp) };
            format!("{mant:.2}e{exp} years")
        }
    }
}

impl std::fmt::Display for HardnessReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "m={} f={}: {} bits, {}, {}",
            self.masks,
            self.frac_bits,
            self.bits,
            self.rsa_band,
            self.time_display()
        )
    }
}

/// Comparable RSA modulus for a security strength in bits: at most 80 bits
/// is below RSA-512, otherwise the closest standard strength.
pub fn rsa_band(bits: u32) -> &'static str {
    if bits <= 80 {
        return "<512";
    }
    const BANDS: [(u32, &str); 4] = [(112, "~2048"), (128, "~3072"), (192, "~7680"), (256, "~15360")];
    BANDS
        .iter()
        .min_by_key(|(s, _)| s.abs_diff(bits))
        .map(|&(_, name)| name)
        .unwrap()
}

/// Extrapolate the measured baseline to a search over `m * f` bits.
pub fn hardness_estimate(masks: u32, frac_bits: u32) -> Result<HardnessReport> {
    ensure!(
        masks >= 1 && frac_bits >= 1,
        Error::Config("mask count and precision must be positive".into())
    );
    let bits = masks * frac_bits;
    Ok(HardnessReport {
        masks,
        frac_bits,
        bits,
        rsa_band: rsa_band(bits),
        seconds: BASELINE_SECONDS * (bits as f64 - BASELINE_BITS as f64).exp2(),
    })
}

/// Smallest noise multiplier for (epsilon, delta)-DP of `steps` noisy
/// steps at batch `batch` over `records` samples:
/// `c2 * batch * sqrt(steps * ln(1/delta)) / (records * epsilon)`.
/// The constant `c2` is not pinned down by the analysis; 1 is a common default.
pub fn dp_sigma_bound(batch: f64, steps: f64, records: f64, epsilon: f64, delta: f64, c2: f64) -> Result<f64> {
    for (name, v) in [("batch", batch), ("steps", steps), ("records", records), ("epsilon", epsilon), ("c2", c2)] {
        ensure!(v > 0.0 && !v.is_nan(), Error::Config(format!("{name} must be positive, got {v}")));
    }
    ensure!(
        delta > 0.0 && delta < 1.0,
        Error::Config(format!("delta must lie in (0, 1), got {delta}"))
    );
    Ok(c2 * batch * (steps * (1.0 / delta).ln()).sqrt() / (records * epsilon))
}

/// Whether `epsilon < c1 * batch^2 * steps / records^2`, the range in which
/// the bound above applies.
pub fn dp_epsilon_in_range(batch: f64, steps: f64, records: f64, epsilon: f64, c1: f64) -> bool {
    epsilon < c1 * batch * batch * steps / (records * records)
}

/// Number of pivots found by elimination over Z_{2^ell}: each pivot is the
/// remaining entry of least 2-adic valuation, which divides everything left
/// in its column. `rows` is row-major `n x m`.
pub fn mask_matrix_rank(rows: &[Vec<u64>], ell: u32) -> usize {
    let mk = mask(ell);
    let mut a: Vec<Vec<u64>> = rows.iter().map(|r| r.iter().map(|v| v & mk).collect()).collect();
    let n = a.len();
    let m = a.first().map_or(0, Vec::len);
    let mut rank = 0;
    for col in 0..m {
        if rank == n {
            break;
        }
        let pivot = (rank..n)
            .filter(|&r| a[r][col] != 0)
            .min_by_key(|&r| a[r][col].trailing_zeros());
        let Some(p) = pivot else { continue };
        a.swap(rank, p);
        let v = a[rank][col].trailing_zeros();
        let odd_inv = inverse_odd(a[rank][col] >> v);
        for r in rank + 1..n {
            if a[r][col] == 0 {
                continue;
            }
            let factor = (a[r][col] >> v).wrapping_mul(odd_inv);
            let (top, rest) = a.split_at_mut(r);
            for (x, &y) in rest[0].iter_mut().zip(&top[rank]) {
                *x = x.wrapping_sub(factor.wrapping_mul(y)) & mk;
            }
        }
        rank += 1;
    }
    rank
}

/// Inverse of an odd number modulo 2^64 by Newton iteration.
fn inverse_odd(a: u64) -> u64 {
    let mut x = a;
    for _ in 0..6 {
        x = x.wrapping_mul(2u64.wrapping_sub(a.wrapping_mul(x)));
    }
    x
}

/// `rows x cols` matrix with entries `(2j+1)^i mod 2^ell`.
pub fn odd_vandermonde(rows: usize, cols: usize, ell: u32) -> Vec<Vec<u64>> {
    (0..rows)
        .map(|i| {
            (0..cols)
                .map(|j| {
                    let base = 2 * j as u64 + 1;
                    (0..i).fold(1u64, |acc, _| acc.wrapping_mul(base)) & mask(ell)
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    use super::*;

    #[test]
    fn hardness_rows() {
        let cases = [
            (2, 10, 20, "<512", "62.1 seconds"),
            (2, 25, 50, "<512", "2114 years"),
            (4, 25, 100, "~2048", "2.38e18 years"),
            (8, 25, 200, "~7680", "3.02e48 years"),
        ];
        for (m, f, bits, band, time) in cases {
            let r = hardness_estimate(m, f).unwrap();
            assert_eq!((r.bits, r.rsa_band, r.time_display().as_str()), (bits, band, time));
        }
        assert!(hardness_estimate(0, 25).is_err());
    }

    #[test]
    fn rsa_bands() {
        assert_eq!(rsa_band(80), "<512");
        assert_eq!(rsa_band(112), "~2048");
        assert_eq!(rsa_band(128), "~3072");
        assert_eq!(rsa_band(300), "~15360");
    }

    #[test]
    fn sigma_bound_example_and_monotonicity() {
        let s = dp_sigma_bound(64.0, 1000.0, 50000.0, 4.0, 1e-5, 1.0).unwrap();
        let expect = 64.0 * (1000.0 * 1e5f64.ln()).sqrt() / (50000.0 * 4.0);
        assert!((s - expect).abs() < 1e-15);
        assert!((s - 0.0343).abs() < 5e-5);
        let base = |b: f64, t: f64, n: f64, e: f64| dp_sigma_bound(b, t, n, e, 1e-5, 1.0).unwrap();
        assert!((base(128.0, 1000.0, 5e4, 4.0) / s - 2.0).abs() < 1e-12);
        assert!((base(64.0, 4000.0, 5e4, 4.0) / s - 2.0).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for e in [0.1, 1.0, 10.0, 1e3, 1e6] {
            let v = base(64.0, 1000.0, 5e4, e);
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-6);
        assert!(base(64.0, 1000.0, 1e5, 4.0) < s);
        assert!(dp_sigma_bound(64.0, 1000.0, 0.0, 4.0, 1e-5, 1.0).is_err());
        assert!(dp_sigma_bound(64.0, 1000.0, 5e4, 4.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn vandermonde_full_rank() {
        assert_eq!(mask_matrix_rank(&odd_vandermonde(8, 8, 59), 59), 8);
        assert_eq!(mask_matrix_rank(&odd_vandermonde(16, 8, 59), 59), 8);
    }

    #[test]
    fn zero_and_dependent_matrices() {
        assert_eq!(mask_matrix_rank(&vec![vec![0; 4]; 5], 59), 0);
        let rows = vec![vec![2, 4, 6], vec![1, 2, 3], vec![3, 6, 9]];
        assert_eq!(mask_matrix_rank(&rows, 59), 1);
        // 2^58 * 2 vanishes in the ring
        let rows = vec![vec![1 << 58, 0], vec![0, 1 << 57]];
        assert_eq!(mask_matrix_rank(&rows, 59), 2);
        let rows = vec![vec![1 << 58, 1 << 58], vec![1 << 58, 1 << 58]];
        assert_eq!(mask_matrix_rank(&rows, 59), 1);
    }

    #[test]
    fn random_tall_matrices_are_full_rank() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let full = (0..1000)
            .filter(|_| {
                let rows: Vec<Vec<u64>> = (0..16).map(|_| (0..8).map(|_| rng.random::<u64>()).collect()).collect();
                mask_matrix_rank(&rows, 59) == 8
            })
            .count();
        assert!(full >= 990, "{full} of 1000");
    }

    #[test]
    fn inverse_of_odd() {
        for a in [1u64, 3, 0xd_eadb_eef1, u64::MAX] {
            assert_eq!(a.wrapping_mul(inverse_odd(a)), 1);
        }
    }
}
