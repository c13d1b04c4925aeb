//! Millionaires' comparison on 4-bit digits and the sign-bit (DReLU) protocol.

use rand::Rng;

use super::{and_bits, BoolShareTensor};
use crate::error::{ensure, Error, Result};
use crate::ot::OtRequest;
use crate::party::Party;
use crate::ring::ShareTensor;

const DIGIT_BITS: u32 = 4;

/// XOR shares of `1{a < b}` where the model owner inputs `a` and the data
/// owner inputs `b`, both below `2^bits`.
///
/// Each 4-bit digit pair yields shared (less-than, equal) flags from one
/// 1-of-16 OT; digits are then merged pairwise, low digit below high:
/// `lt = lt_hi ^ (eq_hi & lt_lo)`, `eq = eq_hi & eq_lo`.
pub fn secure_compare(p: &mut Party, values: &[u64], bits: u32) -> Result<Vec<u8>> {
    ensure!(
        (1..=64).contains(&bits),
        Error::Params(format!("comparison width {bits}"))
    );
    let n = values.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if bits < 64 {
        if let Some(&bad) = values.iter().find(|&&v| v >> bits != 0) {
            return Err(Error::Range(bad));
        }
    }
    let digits = bits.div_ceil(DIGIT_BITS) as usize;
    let digit = |v: u64, j: usize| (v >> (DIGIT_BITS as usize * j)) & 0xF;
    let req = OtRequest::new(DIGIT_BITS, 2, n * digits)?;

    // lt[e * digits + j], eq[...] for element e, digit j (0 = least significant)
    let (mut lt, mut eq): (Vec<u8>, Vec<u8>);
    if p.is_mo() {
        lt = (0..n * digits).map(|_| p.rng.random::<u8>() & 1).collect();
        eq = (0..n * digits).map(|_| p.rng.random::<u8>() & 1).collect();
        let mut msgs = Vec::with_capacity(n * digits * 16);
        for (e, &a) in values.iter().enumerate() {
            for j in 0..digits {
                let aj = digit(a, j);
                let (l0, e0) = (lt[e * digits + j] as u64, eq[e * digits + j] as u64);
                for v in 0..16u64 {
                    msgs.push((l0 ^ (aj < v) as u64) | ((e0 ^ (aj == v) as u64) << 1));
                }
            }
        }
        p.ot.send(&mut p.session, req, &msgs)?;
    } else {
        let choices: Vec<u64> = values
            .iter()
            .flat_map(|&b| (0..digits).map(move |j| digit(b, j)))
            .collect();
        let got = p.ot.receive(&mut p.session, req, &choices)?;
        lt = got.iter().map(|&g| (g & 1) as u8).collect();
        eq = got.iter().map(|&g| ((g >> 1) & 1) as u8).collect();
    }

    let mut width = digits;
    while width > 1 {
        let pairs = width / 2;
        let carry = width % 2;
        let last_level = pairs == 1 && carry == 0;
        // gather AND operands: eq_hi & lt_lo, and (unless final) eq_hi & eq_lo
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for e in 0..n {
            for k in 0..pairs {
                let (lo, hi) = (e * width + 2 * k, e * width + 2 * k + 1);
                xs.push(eq[hi]);
                ys.push(lt[lo]);
                if !last_level {
                    xs.push(eq[hi]);
                    ys.push(eq[lo]);
                }
            }
        }
        let prods = and_bits(p, &xs, &ys)?;
        let next = pairs + carry;
        let mut nlt = Vec::with_capacity(n * next);
        let mut neq = Vec::with_capacity(n * next);
        let per = if last_level { 1 } else { 2 };
        for e in 0..n {
            for k in 0..pairs {
                let hi = e * width + 2 * k + 1;
                let idx = (e * pairs + k) * per;
                nlt.push(lt[hi] ^ prods[idx]);
                neq.push(if last_level { 0 } else { prods[idx + 1] });
            }
            if carry == 1 {
                nlt.push(lt[e * width + width - 1]);
                neq.push(eq[e * width + width - 1]);
            }
        }
        lt = nlt;
        eq = neq;
        width = next;
    }
    Ok(lt)
}

/// XOR shares of `1{x >= 0}` for a shared two's-complement value.
///
/// With `x_i'` the low `ell-1` bits of each share, the top bit of `x` is
/// `msb(x_0) ^ msb(x_1) ^ carry` where `carry = 1{2^(ell-1) - 1 - x_0' < x_1'}`.
pub fn drelu(p: &mut Party, x: &ShareTensor) -> Result<BoolShareTensor> {
    let ell = p.ring.ell;
    ensure!(
        x.value.ell == ell,
        Error::Params("share ring width differs from party ring".into())
    );
    let low = crate::ring::mask(ell - 1);
    let inputs: Vec<u64> = x
        .value
        .data
        .iter()
        .map(|&v| if p.is_mo() { low - (v & low) } else { v & low })
        .collect();
    let carry = secure_compare(p, &inputs, ell - 1)?;
    let bits = x
        .value
        .data
        .iter()
        .zip(&carry)
        .map(|(&v, &c)| {
            let msb = ((v >> (ell - 1)) & 1) as u8;
            if p.is_mo() {
                msb ^ c ^ 1
            } else {
                msb ^ c
            }
        })
        .collect();
    Ok(BoolShareTensor {
        role: p.role,
        shape: x.value.shape.clone(),
        bits,
    })
}
