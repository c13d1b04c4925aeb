//! Chou-Orlandi "simplest OT" over Ristretto. A 1-of-2^m transfer runs m
//! base 1-of-2 transfers of random keys; message `x` is masked with a hash
//! of the keys selected by the bits of `x`.

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_TABLE;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::OtRequest;
use crate::error::{ensure, Error, Result};
use crate::transport::codec::{pack_bits, unpack_bits, Reader};
use crate::transport::{msg, Session};

const POINT_BYTES: usize = 32;

fn random_scalar<R: Rng + ?Sized>(rng: &mut R) -> Scalar {
    let mut wide = [0u8; 64];
    rng.fill(&mut wide[..]);
    Scalar::from_bytes_mod_order_wide(&wide)
}

fn decompress(bytes: &[u8]) -> Result<RistrettoPoint> {
    CompressedRistretto::from_slice(bytes)
        .ok()
        .and_then(|c| c.decompress())
        .ok_or_else(|| Error::Format("invalid group element".into()))
}

fn key_hash(batch: u64, index: usize, p: &RistrettoPoint) -> [u8; 16] {
    let mut h = Sha256::new();
    h.update(b"ot-key");
    h.update(batch.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    h.update(p.compress().as_bytes());
    let d = h.finalize();
    let mut k = [0u8; 16];
    k.copy_from_slice(&d[..16]);
    k
}

/// Pad for message `x` of instance `i` from the keys picked by its bits.
fn pad(batch: u64, i: usize, keys: &[&[u8; 16]], wmask: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"ot-pad");
    h.update(batch.to_le_bytes());
    h.update((i as u64).to_le_bytes());
    for k in keys {
        h.update(k);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap()) & wmask
}

pub(super) fn send<R: Rng + ?Sized>(
    sess: &mut Session,
    req: OtRequest,
    messages: &[u64],
    batch: u64,
    rng: &mut R,
) -> Result<()> {
    let m = req.choice_bits as usize;
    let k = req.messages_per_instance();
    let wmask = req.width_mask();
    let a = random_scalar(rng);
    let big_a = &a * RISTRETTO_BASEPOINT_TABLE;
    sess.send(msg::OT_BASE_SETUP, big_a.compress().as_bytes().to_vec())?;

    let payload = sess.recv(msg::OT_BASE_REPLY)?;
    let mut r = Reader::new(&payload);
    req.check_header(&mut r)?;
    let points = r.rest();
    let total = req.count * m;
    ensure!(
        points.len() == total * POINT_BYTES,
        Error::Format(format!("{} bytes of group elements for {total} transfers", points.len()))
    );
    let a_a = a * big_a;
    let keys: Vec<([u8; 16], [u8; 16])> = points
        .par_chunks(POINT_BYTES)
        .enumerate()
        .map(|(t, bytes)| {
            let b = decompress(bytes)?;
            let ab = a * b;
            Ok((key_hash(batch, t, &ab), key_hash(batch, t, &(ab - a_a))))
        })
        .collect::<Result<_>>()?;

    let out: Vec<u64> = (0..req.count)
        .into_par_iter()
        .flat_map_iter(|i| {
            let keys = &keys;
            (0..k).map(move |x| {
                let sel: Vec<&[u8; 16]> = (0..m)
                    .map(|j| {
                        let (k0, k1) = &keys[i * m + j];
                        if (x >> j) & 1 == 1 {
                            k1
                        } else {
                            k0
                        }
                    })
                    .collect();
                (messages[i * k + x] ^ pad(batch, i, &sel, wmask)) & wmask
            })
        })
        .collect();
    sess.send(msg::OT_MESSAGES, pack_bits(&out, req.width))
}

pub(super) fn receive<R: Rng + ?Sized>(
    sess: &mut Session,
    req: OtRequest,
    choices: &[u64],
    batch: u64,
    rng: &mut R,
) -> Result<Vec<u64>> {
    let m = req.choice_bits as usize;
    let k = req.messages_per_instance();
    let wmask = req.width_mask();
    let big_a = decompress(&sess.recv(msg::OT_BASE_SETUP)?)?;
    let scalars: Vec<Scalar> = (0..req.count * m).map(|_| random_scalar(rng)).collect();
    let pairs: Vec<([u8; POINT_BYTES], [u8; 16])> = scalars
        .par_iter()
        .enumerate()
        .map(|(t, b)| {
            let bit = (choices[t / m] >> (t % m)) & 1;
            let mut p = b * RISTRETTO_BASEPOINT_TABLE;
            if bit == 1 {
                p += big_a;
            }
            (p.compress().to_bytes(), key_hash(batch, t, &(b * big_a)))
        })
        .collect();
    let mut payload = req.header();
    for (p, _) in &pairs {
        payload.extend_from_slice(p);
    }
    sess.send(msg::OT_BASE_REPLY, payload)?;
    let masked = unpack_bits(&sess.recv(msg::OT_MESSAGES)?, req.count * k, req.width)?;
    Ok(choices
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let sel: Vec<&[u8; 16]> = (0..m).map(|j| &pairs[i * m + j].1).collect();
            masked[i * k + c as usize] ^ pad(batch, i, &sel, wmask)
        })
        .collect())
}
