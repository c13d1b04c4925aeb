//! Negacyclic number-theoretic transform over Z_q[x]/(x^N + 1).
//!
//! Forward transform is Cooley-Tukey with the 2N-th root folded into the
//! twiddles, producing bit-reversed output; the inverse is Gentleman-Sande
//! and consumes bit-reversed input. Pointwise products in between realise
//! negacyclic convolution.

use super::modulus::Modulus;
use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug)]
pub struct NttTable {
    modulus: Modulus,
    n: usize,
    psi: u64,
    // psi^bitrev(k) and its Shoup companion
    fwd: Vec<u64>,
    fwd_shoup: Vec<u64>,
    // psi^-bitrev(k)
    inv: Vec<u64>,
    inv_shoup: Vec<u64>,
    n_inv: u64,
    n_inv_shoup: u64,
}

fn bit_reverse(mut x: usize, bits: u32) -> usize {
    let mut r = 0;
    for _ in 0..bits {
        r = (r << 1) | (x & 1);
        x >>= 1;
    }
    r
}

/// Smallest-generator primitive 2N-th root of unity, found deterministically.
pub fn find_psi(m: &Modulus, n: usize) -> Result<u64> {
    let q = m.value();
    let two_n = 2 * n as u64;
    ensure!(
        (q - 1).is_multiple_of(two_n),
        Error::Params(format!("{q} is not 1 mod {two_n}"))
    );
    let exp = (q - 1) / two_n;
    for g in 2..q.min(1 << 20) {
        let psi = m.pow(g, exp);
        if m.pow(psi, n as u64) == q - 1 {
            return Ok(psi);
        }
    }
    Err(Error::Params(format!("no 2N-th root of unity mod {q}")))
}

impl NttTable {
    pub fn new(n: usize, modulus: Modulus) -> Result<Self> {
        ensure!(
            n >= 2 && n.is_power_of_two(),
            Error::Params(format!("degree {n} is not a power of two"))
        );
        let psi = find_psi(&modulus, n)?;
        let psi_inv = modulus.inv(psi)?;
        let bits = n.trailing_zeros();
        let mut fwd = vec![0u64; n];
        let mut inv = vec![0u64; n];
        let mut p = 1u64;
        let mut pi = 1u64;
        let mut pows = vec![0u64; n];
        let mut ipows = vec![0u64; n];
        for k in 0..n {
            pows[k] = p;
            ipows[k] = pi;
            p = modulus.mul(p, psi);
            pi = modulus.mul(pi, psi_inv);
        }
        for k in 0..n {
            fwd[k] = pows[bit_reverse(k, bits)];
            inv[k] = ipows[bit_reverse(k, bits)];
        }
        let fwd_shoup = fwd.iter().map(|&w| modulus.shoup(w)).collect();
        let inv_shoup = inv.iter().map(|&w| modulus.shoup(w)).collect();
        let n_inv = modulus.inv(n as u64)?;
        Ok(NttTable {
            modulus,
            n,
            psi,
            fwd,
            fwd_shoup,
            inv,
            inv_shoup,
            n_inv,
            n_inv_shoup: modulus.shoup(n_inv),
        })
    }

    pub fn modulus(&self) -> &Modulus {
        &self.modulus
    }

    pub fn degree(&self) -> usize {
        self.n
    }

    pub fn psi(&self) -> u64 {
        self.psi
    }

    pub fn forward(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let m = &self.modulus;
        let mut t = self.n;
        let mut groups = 1;
        while groups < self.n {
            t >>= 1;
            for i in 0..groups {
                let w = self.fwd[groups + i];
                let ws = self.fwd_shoup[groups + i];
                let start = 2 * i * t;
                let (lo, hi) = a[start..start + 2 * t].split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let u = *x;
                    let v = m.mul_shoup(*y, w, ws);
                    *x = m.add(u, v);
                    *y = m.sub(u, v);
                }
            }
            groups <<= 1;
        }
    }

    pub fn inverse(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let m = &self.modulus;
        let mut t = 1;
        let mut groups = self.n;
        while groups > 1 {
            let h = groups >> 1;
            for i in 0..h {
                let w = self.inv[h + i];
                let ws = self.inv_shoup[h + i];
                let start = 2 * i * t;
                let (lo, hi) = a[start..start + 2 * t].split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let u = *x;
                    let v = *y;
                    *x = m.add(u, v);
                    *y = m.mul_shoup(m.sub(u, v), w, ws);
                }
            }
            t <<= 1;
            groups = h;
        }
        for x in a.iter_mut() {
            *x = m.mul_shoup(*x, self.n_inv, self.n_inv_shoup);
        }
    }
}

/// Schoolbook negacyclic product, used as a test oracle and for tiny degrees.
pub fn negacyclic_mul_naive(a: &[u64], b: &[u64], m: &Modulus) -> Vec<u64> {
    let n = a.len();
    let mut out = vec![0u64; n];
    for i in 0..n {
        for j in 0..n {
            let p = m.mul(a[i], b[j]);
            let k = i + j;
            if k < n {
                out[k] = m.add(out[k], p);
            } else {
                out[k - n] = m.sub(out[k - n], p);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mul_via_ntt(t: &NttTable, a: &[u64], b: &[u64]) -> Vec<u64> {
        let mut x = a.to_vec();
        let mut y = b.to_vec();
        t.forward(&mut x);
        t.forward(&mut y);
        let m = t.modulus();
        let mut z: Vec<u64> = x.iter().zip(&y).map(|(&p, &q)| m.mul(p, q)).collect();
        t.inverse(&mut z);
        z
    }

    #[test]
    fn square_of_one_plus_x() {
        let t = NttTable::new(4, Modulus::new(17).unwrap()).unwrap();
        assert_eq!(mul_via_ntt(&t, &[1, 1, 0, 0], &[1, 1, 0, 0]), vec![1, 2, 1, 0]);
    }

    #[test]
    fn wraparound_is_negated() {
        let t = NttTable::new(4, Modulus::new(17).unwrap()).unwrap();
        // x^3 * x = x^4 = -1
        assert_eq!(mul_via_ntt(&t, &[0, 0, 0, 1], &[0, 1, 0, 0]), vec![16, 0, 0, 0]);
    }

    #[test]
    fn root_has_order_2n() {
        let m = Modulus::new(1152921504606830593).unwrap();
        let psi = find_psi(&m, 8192).unwrap();
        assert_eq!(m.pow(psi, 8192), m.value() - 1);
        assert_eq!(m.pow(psi, 16384), 1);
    }

    #[test]
    fn rejects_incompatible_modulus() {
        // 19 - 1 = 18 is not divisible by 8
        assert!(NttTable::new(4, Modulus::new(19).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn matches_schoolbook(seed in any::<u64>(), logn in 1u32..8) {
            use rand::{Rng, SeedableRng};
            let n = 1usize << logn;
            let q = 1152921504606830593u64;
            let m = Modulus::new(q).unwrap();
            let t = NttTable::new(n, m).unwrap();
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let a: Vec<u64> = (0..n).map(|_| rng.random_range(0..q)).collect();
            let b: Vec<u64> = (0..n).map(|_| rng.random_range(0..q)).collect();
            prop_assert_eq!(mul_via_ntt(&t, &a, &b), negacyclic_mul_naive(&a, &b, &m));
        }

        #[test]
        fn roundtrip(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let q = 1152921504606748673u64;
            let t = NttTable::new(256, Modulus::new(q).unwrap()).unwrap();
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let a: Vec<u64> = (0..256).map(|_| rng.random_range(0..q)).collect();
            let mut b = a.clone();
            t.forward(&mut b);
            t.inverse(&mut b);
            prop_assert_eq!(a, b);
        }
    }
}
