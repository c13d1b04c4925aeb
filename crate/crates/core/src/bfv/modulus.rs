//! Word-sized prime modulus with Barrett and Shoup multiplication.

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modulus {
    value: u64,
    // floor(2^128 / q) split into (high, low) words
    ratio_hi: u64,
    ratio_lo: u64,
}

impl Modulus {
    pub fn new(value: u64) -> Result<Self> {
        ensure!(
            (2..(1 << 62)).contains(&value),
            Error::Params(format!("modulus {value} outside 2..2^62"))
        );
        // floor((2^128 - 1) / q); underestimates only when q is a power of two,
        // which the correction loop in reduce_u128 absorbs
        let ratio = u128::MAX / value as u128;
        Ok(Modulus {
            value,
            ratio_hi: (ratio >> 64) as u64,
            ratio_lo: ratio as u64,
        })
    }

    #[inline]
    pub fn value(&self) -> u64 {
        self.value
    }

    #[inline]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        let s = a + b;
        if s >= self.value {
            s - self.value
        } else {
            s
        }
    }

    #[inline]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        if a >= b {
            a - b
        } else {
            a + self.value - b
        }
    }

    #[inline]
    pub fn neg(&self, a: u64) -> u64 {
        if a == 0 {
            0
        } else {
            self.value - a
        }
    }

    /// Reduce a 128-bit value.
    #[inline]
    pub fn reduce_u128(&self, x: u128) -> u64 {
        let x0 = x as u64;
        let x1 = (x >> 64) as u64;
        let lo = (x0 as u128 * self.ratio_lo as u128) >> 64;
        let mid1 = x1 as u128 * self.ratio_lo as u128;
        let mid2 = x0 as u128 * self.ratio_hi as u128;
        let (s, c1) = mid1.overflowing_add(mid2);
        let (s, c2) = s.overflowing_add(lo);
        let carry = ((c1 as u128) + (c2 as u128)) << 64;
        let qhat = (x1 as u128 * self.ratio_hi as u128)
            .wrapping_add(s >> 64)
            .wrapping_add(carry);
        let mut r = x.wrapping_sub(qhat.wrapping_mul(self.value as u128)) as u64;
        while r >= self.value {
            r -= self.value;
        }
        r
    }

    #[inline]
    pub fn reduce(&self, x: u64) -> u64 {
        if x < self.value {
            x
        } else {
            self.reduce_u128(x as u128)
        }
    }

    #[inline]
    pub fn mul(&self, a: u64, b: u64) -> u64 {
        self.reduce_u128(a as u128 * b as u128)
    }

    /// `floor(w * 2^64 / q)` for use with [`Modulus::mul_shoup`].
    #[inline]
    pub fn shoup(&self, w: u64) -> u64 {
        (((w as u128) << 64) / self.value as u128) as u64
    }

    /// `a * w mod q` given the Shoup companion of `w`; `a` may be any u64.
    #[inline]
    pub fn mul_shoup(&self, a: u64, w: u64, w_shoup: u64) -> u64 {
        let qhat = ((a as u128 * w_shoup as u128) >> 64) as u64;
        let r = a.wrapping_mul(w).wrapping_sub(qhat.wrapping_mul(self.value));
        if r >= self.value {
            r - self.value
        } else {
            r
        }
    }

    pub fn pow(&self, mut base: u64, mut exp: u64) -> u64 {
        let mut acc = 1 % self.value;
        base = self.reduce(base);
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            exp >>= 1;
        }
        acc
    }

    /// Inverse modulo a prime.
    pub fn inv(&self, a: u64) -> Result<u64> {
        let a = self.reduce(a);
        ensure!(a != 0, Error::Params("zero has no inverse".into()));
        let r = self.pow(a, self.value - 2);
        ensure!(
            self.mul(r, a) == 1,
            Error::Params(format!("{a} not invertible mod {}", self.value))
        );
        Ok(r)
    }

    /// Map a signed integer into [0, q).
    #[inline]
    pub fn from_i64(&self, v: i64) -> u64 {
        if v >= 0 {
            self.reduce(v as u64)
        } else {
            self.neg(self.reduce(v.unsigned_abs()))
        }
    }
}

/// Deterministic Miller-Rabin for 64-bit integers.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for p in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n.is_multiple_of(p) {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    let mulmod = |a: u64, b: u64| ((a as u128 * b as u128) % n as u128) as u64;
    let powmod = |mut b: u64, mut e: u64| {
        let mut acc = 1u64;
        while e > 0 {
            if e & 1 == 1 {
                acc = mulmod(acc, b);
            }
            b = mulmod(b, b);
            e >>= 1;
        }
        acc
    };
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = powmod(a, d);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mulmod(x, x);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const Q: u64 = 1152921504606830593;

    #[test]
    fn default_primes_are_prime() {
        assert!(is_prime(Q));
        assert!(is_prime(17));
        assert!(!is_prime(Q + 2));
    }

    #[test]
    fn inverse() {
        let m = Modulus::new(17).unwrap();
        assert_eq!(m.inv(3).unwrap(), 6);
        assert!(m.inv(0).is_err());
    }

    proptest! {
        #[test]
        fn barrett_matches_u128_rem(a in any::<u64>(), b in any::<u64>()) {
            let m = Modulus::new(Q).unwrap();
            let (a, b) = (a % Q, b % Q);
            prop_assert_eq!(m.mul(a, b), ((a as u128 * b as u128) % Q as u128) as u64);
        }

        #[test]
        fn reduce_any_u128(x in any::<u128>(), q in 2u64..(1 << 62)) {
            let m = Modulus::new(q).unwrap();
            prop_assert_eq!(m.reduce_u128(x), (x % q as u128) as u64);
        }

        #[test]
        fn shoup_matches(a in any::<u64>(), w in any::<u64>()) {
            let m = Modulus::new(Q).unwrap();
            let w = w % Q;
            prop_assert_eq!(m.mul_shoup(a, w, m.shoup(w)), ((a as u128 * w as u128) % Q as u128) as u64);
        }
    }
}
