//! Per-party protocol state: session, OT engine, randomness and keys.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::bfv::serialize::{public_key_from_bytes, public_key_to_bytes};
use crate::bfv::{keygen, BfvContext, BfvParams, PublicKey, SecretKey};
use crate::error::{ensure, Error, Result};
use crate::ot::{OtBackend, OtEngine};
use crate::ring::{RingParams, Role};
use crate::transport::{msg, Hello, Session};

/// Homomorphic-encryption material. Only the data owner holds the secret key.
pub struct HeKeys {
    pub ctx: Arc<BfvContext>,
    pub public: PublicKey,
    pub secret: Option<SecretKey>,
}

pub struct Party {
    pub role: Role,
    pub ring: RingParams,
    pub session: Session,
    pub ot: OtEngine,
    pub rng: ChaCha20Rng,
    pub he: Option<HeKeys>,
}

impl Party {
    pub fn new(session: Session, ring: RingParams, backend: OtBackend, dealer_seed: u64, seed: u64) -> Self {
        let role = session.role();
        // distinct private streams per role even when seeds coincide
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(role.index() as u64 + 1);
        let ot_seed = rng.random();
        Party {
            role,
            ring,
            session,
            ot: OtEngine::new(backend, dealer_seed, ot_seed),
            rng,
            he: None,
        }
    }

    pub fn is_mo(&self) -> bool {
        self.role == Role::ModelOwner
    }

    pub fn he(&self) -> Result<&HeKeys> {
        self.he
            .as_ref()
            .ok_or_else(|| Error::Config("homomorphic keys not set up".into()))
    }

    pub fn mask(&self) -> u64 {
        self.ring.mask()
    }

    /// The data owner generates a key pair and sends the public key.
    pub fn setup_he(&mut self, params: BfvParams) -> Result<()> {
        ensure!(
            params.plain_bits == self.ring.ell,
            Error::Params(format!(
                "plaintext modulus 2^{} differs from the sharing ring 2^{}",
                params.plain_bits, self.ring.ell
            ))
        );
        let ctx = BfvContext::new(params)?;
        if self.is_mo() {
            let pk = public_key_from_bytes(&ctx, &self.session.recv(msg::PUBLIC_KEY)?)?;
            self.he = Some(HeKeys {
                ctx,
                public: pk,
                secret: None,
            });
        } else {
            let (sk, pk) = keygen(&ctx, &mut self.rng);
            self.session.send(msg::PUBLIC_KEY, public_key_to_bytes(&ctx, &pk))?;
            self.he = Some(HeKeys {
                ctx,
                public: pk,
                secret: Some(sk),
            });
        }
        Ok(())
    }
}

/// Agree on parameters with the peer over `session`, then build the party
/// and set up homomorphic keys. `config` describes the run (model, batch,
/// mode) and must match the peer's exactly. The model owner's dealer seed
/// is used by both sides.
pub fn establish(
    mut session: Session,
    ring: RingParams,
    backend: OtBackend,
    he: BfvParams,
    config: &str,
    seed: u64,
) -> Result<Party> {
    let role = session.role();
    let ours = Hello {
        role,
        params_digest: run_digest(&ring, &he),
        config: config.to_string(),
        ot_backend: backend.tag(),
        group_element_width: backend.group_element_width(),
        dealer_seed: seed,
    };
    let theirs = session.handshake(&ours)?;
    let dealer_seed = match role {
        Role::ModelOwner => ours.dealer_seed,
        Role::DataOwner => theirs.dealer_seed,
    };
    // distinct local streams even when both sides are given the same seed
    let local = seed ^ (role.index() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut p = Party::new(session, ring, backend, dealer_seed, local);
    p.setup_he(he)?;
    Ok(p)
}

/// Digest of the ring and encryption parameters exchanged in the handshake.
pub fn run_digest(ring: &RingParams, he: &BfvParams) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(he.digest());
    h.update(ring.ell.to_le_bytes());
    h.update(ring.frac_bits.to_le_bytes());
    h.finalize().into()
}

/// Two connected parties over an in-memory channel, for tests and local runs.
pub fn local_pair(ring: RingParams, backend: OtBackend, seed: u64) -> (Party, Party) {
    let (a, b) = crate::transport::memory_pair();
    (
        Party::new(a, ring, backend, seed, seed),
        Party::new(b, ring, backend, seed, seed ^ 0x5a5a),
    )
}

/// Run `f` for both parties on separate threads and return (model owner, data owner) results.
pub fn run_both<T, F>(mo: &mut Party, dataowner: &mut Party, f: F) -> (T, T)
where
    T: Send,
    F: Fn(&mut Party) -> T + Sync,
{
    std::thread::scope(|s| {
        let h = s.spawn(|| f(dataowner));
        let a = f(mo);
        (a, h.join().expect("data owner thread panicked"))
    })
}
