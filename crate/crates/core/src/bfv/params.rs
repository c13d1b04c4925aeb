use std::sync::Arc;

use num_bigint::BigUint;
use sha2::{Digest, Sha256};

use super::modulus::{is_prime, Modulus};
use super::ntt::NttTable;
use super::pool::BufferPool;
use crate::error::{ensure, Error, Result};

/// Bits of headroom required between `q/t` and the worst-case product
/// magnitude `t * N` after one plaintext multiplication.
const NOISE_MARGIN_BITS: u32 = 20;

pub const DEFAULT_MODULI: [u64; 3] = [
    1152921504606830593,
    1152921504606748673,
    1152921504606683137,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SecurityLevel {
    /// Within the 128-bit classical bound for the chosen (N, log q).
    Classical128,
    /// Parameters chosen for speed or testing; no security claim.
    Unchecked,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BfvParams {
    pub degree: usize,
    /// Plaintext modulus is `2^plain_bits`, shared with the secret-sharing ring.
    pub plain_bits: u32,
    pub moduli: Vec<u64>,
    pub security: SecurityLevel,
}

impl Default for BfvParams {
    fn default() -> Self {
        BfvParams {
            degree: 8192,
            plain_bits: 59,
            moduli: DEFAULT_MODULI.to_vec(),
            security: SecurityLevel::Classical128,
        }
    }
}

impl BfvParams {
    pub fn small() -> Self {
        BfvParams {
            degree: 4096,
            plain_bits: 41,
            moduli: DEFAULT_MODULI[..2].to_vec(),
            security: SecurityLevel::Unchecked,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.degree;
        ensure!(
            n >= 2 && n.is_power_of_two(),
            Error::Params(format!("degree {n} is not a power of two"))
        );
        ensure!(
            !self.moduli.is_empty(),
            Error::Params("empty modulus chain".into())
        );
        ensure!(
            (2..=62).contains(&self.plain_bits),
            Error::Params(format!("plaintext width {} outside 2..=62", self.plain_bits))
        );
        for (i, &q) in self.moduli.iter().enumerate() {
            ensure!(
                q < (1 << 62) && is_prime(q),
                Error::Params(format!("modulus {q} is not a prime below 2^62"))
            );
            ensure!(
                (q - 1) % (2 * n as u64) == 0,
                Error::Params(format!("modulus {q} is not 1 mod 2N"))
            );
            ensure!(
                !self.moduli[..i].contains(&q),
                Error::Params(format!("modulus {q} repeated"))
            );
        }
        let log_q = self.log_q();
        let needed = (2 * self.plain_bits) as f64 + n.trailing_zeros() as f64 + NOISE_MARGIN_BITS as f64;
        ensure!(
            log_q >= needed,
            Error::Params(format!(
                "log2 q = {log_q:.1} too small for t = 2^{} at N = {n}; need {needed}",
                self.plain_bits
            ))
        );
        Ok(())
    }

    pub fn log_q(&self) -> f64 {
        self.moduli.iter().map(|&q| (q as f64).log2()).sum()
    }

    /// SHA-256 over a canonical encoding, compared during the handshake.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"bfv-params-v1");
        h.update((self.degree as u64).to_le_bytes());
        h.update(self.plain_bits.to_le_bytes());
        h.update((self.moduli.len() as u32).to_le_bytes());
        for q in &self.moduli {
            h.update(q.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Precomputed tables for one parameter set.
#[derive(Debug)]
pub struct BfvContext {
    pub params: BfvParams,
    pub moduli: Vec<Modulus>,
    pub tables: Vec<NttTable>,
    pub q: BigUint,
    /// floor(q / t) mod q_i
    pub(crate) delta: Vec<u64>,
    /// q mod t
    pub(crate) q_mod_t: u64,
    /// [(q / q_i)^{-1}]_{q_i} and Shoup companions
    pub(crate) punctured_inv: Vec<u64>,
    pub(crate) punctured_inv_shoup: Vec<u64>,
    /// (q / q_i) mod q as big integers, for exact noise measurement
    pub(crate) punctured: Vec<BigUint>,
    pub(crate) pool: BufferPool,
}

impl BfvContext {
    pub fn new(params: BfvParams) -> Result<Arc<Self>> {
        params.validate()?;
        let n = params.degree;
        let moduli = params
            .moduli
            .iter()
            .map(|&q| Modulus::new(q))
            .collect::<Result<Vec<_>>>()?;
        let tables = moduli
            .iter()
            .map(|&m| NttTable::new(n, m))
            .collect::<Result<Vec<_>>>()?;
        let q: BigUint = params.moduli.iter().map(|&q| BigUint::from(q)).product();
        let t = BigUint::from(1u64) << params.plain_bits;
        let delta_big = &q / &t;
        let q_mod_t = u64::try_from(&q % &t).expect("t fits in u64");
        let delta = params
            .moduli
            .iter()
            .map(|&qi| u64::try_from(&delta_big % qi).unwrap())
            .collect();
        let mut punctured_inv = Vec::new();
        let mut punctured = Vec::new();
        for (i, m) in moduli.iter().enumerate() {
            let p = &q / params.moduli[i];
            let p_mod = u64::try_from(&p % params.moduli[i]).unwrap();
            punctured_inv.push(m.inv(p_mod)?);
            punctured.push(p);
        }
        let punctured_inv_shoup = punctured_inv
            .iter()
            .zip(&moduli)
            .map(|(&v, m)| m.shoup(v))
            .collect();
        let rows = params.moduli.len() * n;
        Ok(Arc::new(BfvContext {
            params,
            moduli,
            tables,
            q,
            delta,
            q_mod_t,
            punctured_inv,
            punctured_inv_shoup,
            punctured,
            pool: BufferPool::new(rows),
        }))
    }

    #[inline]
    pub fn degree(&self) -> usize {
        self.params.degree
    }

    #[inline]
    pub fn num_moduli(&self) -> usize {
        self.params.moduli.len()
    }

    #[inline]
    pub fn plain_bits(&self) -> u32 {
        self.params.plain_bits
    }

    #[inline]
    pub fn plain_mask(&self) -> u64 {
        crate::ring::mask(self.params.plain_bits)
    }

    pub fn pool(&self) -> &BufferPool {
        &self.pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_params_valid() {
        BfvParams::default().validate().unwrap();
        BfvParams::small().validate().unwrap();
    }

    #[test]
    fn too_small_modulus_chain_rejected() {
        let mut p = BfvParams::default();
        p.moduli.truncate(2);
        assert!(matches!(p.validate(), Err(Error::Params(_))));
    }

    #[test]
    fn non_ntt_friendly_prime_rejected() {
        let mut p = BfvParams::default();
        // not an NTT-friendly prime
        p.moduli[0] = 1152921504606748673 + 2;
        assert!(p.validate().is_err());
    }

    #[test]
    fn digest_changes_with_params() {
        assert_ne!(BfvParams::default().digest(), BfvParams::small().digest());
    }
}
