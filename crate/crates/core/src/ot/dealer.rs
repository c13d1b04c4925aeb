//! Seed-expanded random-OT correlations, derandomised with the standard
//! choice-offset trick: the receiver sends `c ^ c'`, the sender answers
//! with `m_x ^ r_{x ^ e}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::OtRequest;
use crate::error::Result;
use crate::transport::codec::{pack_bits, unpack_bits, Reader};
use crate::transport::{msg, Session};

fn correlation_rng(seed: u64, batch: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(batch);
    rng
}

pub(super) fn send(sess: &mut Session, req: OtRequest, messages: &[u64], seed: u64, batch: u64) -> Result<()> {
    let k = req.messages_per_instance();
    let wmask = req.width_mask();
    let payload = sess.recv(msg::OT_CHOICE)?;
    let mut r = Reader::new(&payload);
    req.check_header(&mut r)?;
    let offsets = unpack_bits(r.rest(), req.count, req.choice_bits)?;
    let mut rng = correlation_rng(seed, batch);
    let mut pads = vec![0u64; k];
    let mut out = Vec::with_capacity(req.count * k);
    for (i, &e) in offsets.iter().enumerate() {
        let _receiver_choice: u64 = rng.random();
        for p in pads.iter_mut() {
            *p = rng.random::<u64>() & wmask;
        }
        for x in 0..k {
            out.push((messages[i * k + x] ^ pads[x ^ e as usize]) & wmask);
        }
    }
    sess.send(msg::OT_MESSAGES, pack_bits(&out, req.width))
}

pub(super) fn receive(sess: &mut Session, req: OtRequest, choices: &[u64], seed: u64, batch: u64) -> Result<Vec<u64>> {
    let k = req.messages_per_instance();
    let kmask = k as u64 - 1;
    let wmask = req.width_mask();
    let mut rng = correlation_rng(seed, batch);
    let mut offsets = Vec::with_capacity(req.count);
    let mut keys = Vec::with_capacity(req.count);
    for &c in choices {
        let c_rand = rng.random::<u64>() & kmask;
        let mut key = 0;
        for x in 0..k as u64 {
            let p = rng.random::<u64>() & wmask;
            if x == c_rand {
                key = p;
            }
        }
        offsets.push(c ^ c_rand);
        keys.push(key);
    }
    let mut payload = req.header();
    payload.extend_from_slice(&pack_bits(&offsets, req.choice_bits));
    sess.send(msg::OT_CHOICE, payload)?;
    let masked = unpack_bits(&sess.recv(msg::OT_MESSAGES)?, req.count * k, req.width)?;
    Ok(choices
        .iter()
        .enumerate()
        .map(|(i, &c)| masked[i * k + c as usize] ^ keys[i])
        .collect())
}
