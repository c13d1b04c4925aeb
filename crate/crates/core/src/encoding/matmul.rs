//! Coefficient packing that turns one negacyclic product into a matrix product.
//!
//! For `y = W v` with `W` of shape `out x inner` and `v` of shape
//! `inner x batch`, the input entry `v[j][k]` goes to coefficient
//! `k*out*inner + j`, the weight entry `W[i][j]` to `i*inner + inner-1-j`,
//! and `y[i][k]` is read from `k*out*inner + i*inner + inner-1`.

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MatmulGeometry {
    pub inner: usize,
    pub out: usize,
    pub batch: usize,
}

/// Which operand a tensor plays in the packed product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Weight,
    Input,
}

impl MatmulGeometry {
    pub fn new(inner: usize, out: usize, batch: usize) -> Self {
        MatmulGeometry { inner, out, batch }
    }

    pub fn coefficients(&self) -> usize {
        self.inner * self.out * self.batch
    }

    pub fn check(&self, degree: usize) -> Result<()> {
        ensure!(
            self.inner > 0 && self.out > 0 && self.batch > 0,
            Error::Shape(format!("empty geometry {self:?}"))
        );
        ensure!(
            self.coefficients() <= degree,
            Error::GeometryOverflow {
                needed: self.coefficients(),
                degree
            }
        );
        Ok(())
    }

    pub fn weight_len(&self) -> usize {
        self.out * self.inner
    }

    pub fn input_len(&self) -> usize {
        self.inner * self.batch
    }

    pub fn output_len(&self) -> usize {
        self.out * self.batch
    }

    #[inline]
    pub fn input_index(&self, j: usize, k: usize) -> usize {
        k * self.out * self.inner + j
    }

    #[inline]
    pub fn weight_index(&self, i: usize, j: usize) -> usize {
        i * self.inner + self.inner - 1 - j
    }

    #[inline]
    pub fn output_index(&self, i: usize, k: usize) -> usize {
        k * self.out * self.inner + i * self.inner + self.inner - 1
    }
}

/// Pack a row-major operand (weight `out x inner`, input `inner x batch`).
pub fn encode(which: Operand, data: &[u64], g: &MatmulGeometry, degree: usize) -> Result<Vec<u64>> {
    g.check(degree)?;
    let mut coeffs = vec![0u64; degree];
    match which {
        Operand::Weight => {
            ensure!(
                data.len() == g.weight_len(),
                Error::Shape(format!("weight of {} entries for {g:?}", data.len()))
            );
            for i in 0..g.out {
                for j in 0..g.inner {
                    coeffs[g.weight_index(i, j)] = data[i * g.inner + j];
                }
            }
        }
        Operand::Input => {
            ensure!(
                data.len() == g.input_len(),
                Error::Shape(format!("input of {} entries for {g:?}", data.len()))
            );
            for j in 0..g.inner {
                for k in 0..g.batch {
                    coeffs[g.input_index(j, k)] = data[j * g.batch + k];
                }
            }
        }
    }
    Ok(coeffs)
}

/// Read the `out x batch` product from a decrypted polynomial.
pub fn decode(coeffs: &[u64], g: &MatmulGeometry) -> Result<Vec<u64>> {
    ensure!(
        g.coefficients() <= coeffs.len(),
        Error::GeometryOverflow {
            needed: g.coefficients(),
            degree: coeffs.len()
        }
    );
    let mut out = vec![0u64; g.output_len()];
    for i in 0..g.out {
        for k in 0..g.batch {
            out[i * g.batch + k] = coeffs[g.output_index(i, k)];
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests_support {
    use crate::ring::mask;

    /// Negacyclic product over Z_{2^ell}.
    pub fn negacyclic(a: &[u64], b: &[u64], ell: u32) -> Vec<u64> {
        let n = a.len();
        let mut out = vec![0u64; n];
        for i in 0..n {
            if a[i] == 0 {
                continue;
            }
            for j in 0..n {
                let p = a[i].wrapping_mul(b[j]);
                if i + j < n {
                    out[i + j] = out[i + j].wrapping_add(p);
                } else {
                    out[i + j - n] = out[i + j - n].wrapping_sub(p);
                }
            }
        }
        out.iter().map(|v| v & mask(ell)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::negacyclic;
    use super::*;
    use crate::ring::{mask, matmul_raw};

    #[test]
    fn two_by_two() {
        let g = MatmulGeometry::new(2, 2, 1);
        let w = [1, 2, 3, 4];
        let v = [5, 6];
        let pw = encode(Operand::Weight, &w, &g, 8).unwrap();
        let pv = encode(Operand::Input, &v, &g, 8).unwrap();
        let y = decode(&negacyclic(&pw, &pv, 59), &g).unwrap();
        assert_eq!(y, vec![17, 39]);
    }

    #[test]
    fn overflow_detected() {
        let g = MatmulGeometry::new(4, 4, 2);
        assert!(matches!(
            encode(Operand::Input, &[0; 8], &g, 16),
            Err(Error::GeometryOverflow { needed: 32, degree: 16 })
        ));
    }

    proptest::proptest! {
        #[test]
        fn packed_product_matches_matmul(
            inner in 1usize..6, out in 1usize..6, batch in 1usize..4, seed in proptest::prelude::any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let ell = 59;
            let g = MatmulGeometry::new(inner, out, batch);
            let degree = g.coefficients().next_power_of_two();
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let w: Vec<u64> = (0..g.weight_len()).map(|_| rng.random::<u64>() & mask(ell)).collect();
            let v: Vec<u64> = (0..g.input_len()).map(|_| rng.random::<u64>() & mask(ell)).collect();
            let pw = encode(Operand::Weight, &w, &g, degree).unwrap();
            let pv = encode(Operand::Input, &v, &g, degree).unwrap();
            let y = decode(&negacyclic(&pw, &pv, ell), &g).unwrap();
            proptest::prop_assert_eq!(y, matmul_raw(&w, &v, out, inner, batch, mask(ell)));
        }
    }
}
