//! Truncation of shared fixed-point values by a public number of bits.

use rand::Rng;

use super::{bits_to_arith, secure_compare};
use crate::error::{ensure, Error, Result};
use crate::ot::OtRequest;
use crate::party::Party;
use crate::ring::ShareTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TruncMode {
    /// Exact arithmetic shift of the reconstructed value.
    Faithful,
    /// Corrects the wrap-around error only; may be one unit below the exact result.
    Approximate,
}

impl std::str::FromStr for TruncMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "faithful" => Ok(TruncMode::Faithful),
            "approx" | "approximate" => Ok(TruncMode::Approximate),
            _ => Err(Error::Config(format!("unknown truncation mode {s:?}"))),
        }
    }
}

/// Shift shares right by `shift` bits, lowering the scale by `shift` when
/// `rescale` is set (pooling divides without changing the scale).
///
/// Requires `|x| < 2^(ell-2)`. The model owner first adds `2^(ell-2)` so the
/// shared value is non-negative with a known zero top bit; then the share
/// wrap-around is `msb(x_0) | msb(x_1)` and the low-bit carry is a
/// comparison of the two `shift`-bit remainders.
pub fn truncate(p: &mut Party, x: &ShareTensor, shift: u32, mode: TruncMode, rescale: bool) -> Result<ShareTensor> {
    let ell = p.ring.ell;
    ensure!(
        shift <= ell - 2,
        Error::Params(format!("cannot truncate {shift} bits in a {ell}-bit ring"))
    );
    let mut out = x.clone();
    if rescale {
        ensure!(
            x.value.scale >= shift,
            Error::Scale {
                expected: shift,
                found: x.value.scale
            }
        );
        out.value.scale -= shift;
    }
    if shift == 0 {
        return Ok(out);
    }
    let mask = p.mask();
    let offset = 1u64 << (ell - 2);
    let shares: Vec<u64> = x
        .value
        .data
        .iter()
        .map(|&v| if p.is_mo() { v.wrapping_add(offset) & mask } else { v })
        .collect();
    let n = shares.len();

    let carry_arith = match mode {
        TruncMode::Faithful => {
            let low = crate::ring::mask(shift);
            let inputs: Vec<u64> = shares
                .iter()
                .map(|&v| if p.is_mo() { low - (v & low) } else { v & low })
                .collect();
            let carry = secure_compare(p, &inputs, shift)?;
            Some(bits_to_arith(p, &carry)?)
        }
        TruncMode::Approximate => None,
    };

    // arithmetic shares of the wrap bit msb(x0) | msb(x1) from one OT
    let msb: Vec<u8> = shares.iter().map(|&v| ((v >> (ell - 1)) & 1) as u8).collect();
    let req = OtRequest::new(1, ell, n.max(1))?;
    let wrap: Vec<u64> = if n == 0 {
        Vec::new()
    } else if p.is_mo() {
        let r: Vec<u64> = (0..n).map(|_| p.rng.random::<u64>() & mask).collect();
        let msgs: Vec<u64> = (0..n)
            .flat_map(|i| {
                let a = msb[i] as u64;
                [r[i].wrapping_add(a) & mask, r[i].wrapping_add(1) & mask]
            })
            .collect();
        p.ot.send(&mut p.session, req, &msgs)?;
        r.iter().map(|&v| v.wrapping_neg() & mask).collect()
    } else {
        let choices: Vec<u64> = msb.iter().map(|&b| b as u64).collect();
        p.ot.receive(&mut p.session, req, &choices)?
    };

    let high = 1u64 << (ell - shift);
    let back = 1u64 << (ell - 2 - shift);
    for i in 0..n {
        let mut v = (shares[i] >> shift)
            .wrapping_sub(wrap[i].wrapping_mul(high));
        if let Some(c) = &carry_arith {
            v = v.wrapping_add(c[i]);
        }
        if p.is_mo() {
            v = v.wrapping_sub(back);
        }
        out.value.data[i] = v & mask;
    }
    Ok(out)
}
