//! Leveled RNS-BFV restricted to plaintext-ciphertext operations.

pub mod modulus;
pub mod ntt;
pub mod params;
pub mod pool;
pub mod scheme;
pub mod serialize;

pub use params::{BfvContext, BfvParams, SecurityLevel};
pub use scheme::{
    add, add_assign, add_plain, add_plain_assign, decrypt, encrypt, keygen, mul_plain,
    mul_plain_acc, noise_budget, sub_plain_assign, zero_ciphertext, Ciphertext, Form,
    PlainMultiplier, Plaintext, PublicKey, RnsPoly, SecretKey,
};

/// Size the global worker pool; call once before any parallel work.
pub fn set_threads(threads: usize) -> crate::error::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| crate::error::Error::Config(e.to_string()))
}

/// Workers in the global pool.
pub fn threads() -> usize {
    rayon::current_num_threads()
}
