//! Packed plaintext-ciphertext products between the two parties.
//!
//! The data owner encrypts tiles of its operand and sends them; the model
//! owner multiplies them by plaintext tiles of its own operand, masks every
//! coefficient of each output tile with fresh randomness and returns the
//! result. Afterwards the data owner holds `product - s` and the model
//! owner holds `s`, both in the kernel's output layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::bfv::serialize::{ciphertext_from_bytes, ciphertext_to_bytes};
use crate::bfv::{self, Ciphertext, PlainMultiplier, Plaintext};
use crate::encoding::{Operand, Tiling};
use crate::error::{ensure, Error, Result};
use crate::party::Party;

pub(crate) fn tile_count(t: &Tiling, slot: Operand) -> usize {
    match slot {
        Operand::Weight => t.weight_tiles(),
        Operand::Input => t.input_tiles(),
    }
}

fn encode_tile(t: &Tiling, slot: Operand, idx: usize, data: &[u64]) -> Result<Vec<u64>> {
    match slot {
        Operand::Weight => t.encode_weight(idx, data),
        Operand::Input => t.encode_input(idx, data),
    }
}

/// Data owner: encrypt every tile of `data` (kernel layout for `slot`) and send one frame per ciphertext.
pub(crate) fn send_encrypted(p: &mut Party, t: &Tiling, slot: Operand, data: &[u64], kind: u16) -> Result<()> {
    let n = tile_count(t, slot);
    let seeds: Vec<u64> = (0..n).map(|_| p.rng.random()).collect();
    let frames: Vec<Vec<u8>> = {
        let keys = p.he()?;
        let ctx = &keys.ctx;
        (0..n)
            .into_par_iter()
            .map(|i| {
                let pt = Plaintext::new(ctx, encode_tile(t, slot, i, data)?)?;
                let mut rng = ChaCha20Rng::seed_from_u64(seeds[i]);
                let ct = bfv::encrypt(ctx, &keys.public, &pt, &mut rng)?;
                Ok(ciphertext_to_bytes(ctx, &ct))
            })
            .collect::<Result<_>>()?
    };
    for f in frames {
        p.session.send(kind, f)?;
    }
    Ok(())
}

/// Model owner: receive the ciphertexts sent by [`send_encrypted`].
pub(crate) fn recv_encrypted(p: &mut Party, t: &Tiling, slot: Operand, kind: u16) -> Result<Vec<Ciphertext>> {
    let n = tile_count(t, slot);
    let mut raw = Vec::with_capacity(n);
    for _ in 0..n {
        raw.push(p.session.recv(kind)?);
    }
    let ctx = p.he()?.ctx.clone();
    raw.par_iter().map(|b| ciphertext_from_bytes(&ctx, b)).collect()
}

/// Model owner: plaintext multipliers for every tile of its operand.
pub(crate) fn plain_tiles(p: &Party, t: &Tiling, slot: Operand, data: &[u64]) -> Result<Vec<PlainMultiplier>> {
    let ctx = &p.he()?.ctx;
    (0..tile_count(t, slot))
        .into_par_iter()
        .map(|i| {
            let pt = Plaintext::new(ctx, encode_tile(t, slot, i, data)?)?;
            Ok(PlainMultiplier::new(ctx, &pt))
        })
        .collect()
}

/// One summand of a masked product: encrypted tiles fill `enc_slot`, plaintext tiles the other slot.
pub(crate) struct Term<'a> {
    pub enc_slot: Operand,
    pub cts: &'a [Ciphertext],
    pub plain: &'a [PlainMultiplier],
}

/// Model owner: evaluate the sum of `terms`, mask and send each output
/// tile. Returns the model owner's share in kernel output layout.
pub(crate) fn send_masked(p: &mut Party, t: &Tiling, terms: &[Term], kind: u16) -> Result<Vec<u64>> {
    for term in terms {
        let other = match term.enc_slot {
            Operand::Weight => Operand::Input,
            Operand::Input => Operand::Weight,
        };
        ensure!(
            term.cts.len() == tile_count(t, term.enc_slot) && term.plain.len() == tile_count(t, other),
            Error::Shape("tile counts do not match the plan".into())
        );
    }
    let ctx = p.he()?.ctx.clone();
    let degree = ctx.degree();
    let mask = ctx.plain_mask();
    let outputs = t.output_tiles();
    let masks: Vec<Vec<u64>> = (0..outputs)
        .map(|_| (0..degree).map(|_| p.rng.random::<u64>() & mask).collect())
        .collect();
    let frames: Vec<Vec<u8>> = (0..outputs)
        .into_par_iter()
        .map(|o| {
            let mut acc = bfv::zero_ciphertext(&ctx);
            for term in terms {
                for (wt, it) in t.terms(o) {
                    let (ct, pm) = match term.enc_slot {
                        Operand::Input => (&term.cts[it], &term.plain[wt]),
                        Operand::Weight => (&term.cts[wt], &term.plain[it]),
                    };
                    bfv::mul_plain_acc(&ctx, &mut acc, ct, pm)?;
                }
            }
            bfv::sub_plain_assign(&ctx, &mut acc, &Plaintext::new(&ctx, masks[o].clone())?)?;
            Ok(ciphertext_to_bytes(&ctx, &acc))
        })
        .collect::<Result<_>>()?;
    for f in frames {
        p.session.send(kind, f)?;
    }
    let mut share = vec![0u64; t.kernel.output_shape().iter().product()];
    for (o, m) in masks.iter().enumerate() {
        t.decode_output(o, m, &mut share)?;
    }
    Ok(share)
}

/// Data owner: receive, decrypt and decode the masked output tiles.
pub(crate) fn recv_masked(p: &mut Party, t: &Tiling, kind: u16) -> Result<Vec<u64>> {
    let mut raw = Vec::with_capacity(t.output_tiles());
    for _ in 0..t.output_tiles() {
        raw.push(p.session.recv(kind)?);
    }
    let keys = p.he()?;
    let sk = keys
        .secret
        .as_ref()
        .ok_or_else(|| Error::Config("decryption needs the secret key".into()))?;
    let ctx = &keys.ctx;
    let plains: Vec<Plaintext> = raw
        .par_iter()
        .map(|b| bfv::decrypt(ctx, sk, &ciphertext_from_bytes(ctx, b)?))
        .collect::<Result<_>>()?;
    let mut share = vec![0u64; t.kernel.output_shape().iter().product()];
    for (o, pt) in plains.iter().enumerate() {
        t.decode_output(o, &pt.coeffs, &mut share)?;
    }
    Ok(share)
}
