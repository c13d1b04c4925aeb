//! Non-linear layers over additive shares, built from oblivious transfer.
//!
//! Every function here is called by both parties with their own share; the
//! model owner always acts first as OT sender so both sides agree on the
//! order of batches.

mod compare;
mod layers;
mod trunc;

pub use compare::{drelu, secure_compare};
pub use layers::{avgpool2_backward, avgpool2_forward, relu_backward, relu_forward};
pub use trunc::{truncate, TruncMode};

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::ot::OtRequest;
use crate::party::Party;
use crate::ring::{Role, ShareTensor};

/// XOR-shared bits, one per tensor element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolShareTensor {
    pub role: Role,
    pub shape: Vec<usize>,
    pub bits: Vec<u8>,
}

impl BoolShareTensor {
    pub fn reconstruct(a: &BoolShareTensor, b: &BoolShareTensor) -> Result<Vec<u8>> {
        ensure!(
            a.shape == b.shape && a.role != b.role,
            Error::Shape("bit shares do not pair up".into())
        );
        Ok(a.bits.iter().zip(&b.bits).map(|(x, y)| x ^ y).collect())
    }
}

/// Shares of `x AND y` for XOR-shared bit vectors, via two cross-term OTs.
pub(crate) fn and_bits(p: &mut Party, x: &[u8], y: &[u8]) -> Result<Vec<u8>> {
    let n = x.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let req = OtRequest::new(1, 1, n)?;
    let mut z: Vec<u8> = x.iter().zip(y).map(|(a, b)| a & b).collect();
    // first the model owner's x times the data owner's y, then the reverse
    for sender in [Role::ModelOwner, Role::DataOwner] {
        if p.role == sender {
            let r: Vec<u8> = (0..n).map(|_| p.rng.random::<u8>() & 1).collect();
            let msgs: Vec<u64> = r
                .iter()
                .zip(x)
                .flat_map(|(&r, &x)| [r as u64, (r ^ x) as u64])
                .collect();
            p.ot.send(&mut p.session, req, &msgs)?;
            for (zi, ri) in z.iter_mut().zip(&r) {
                *zi ^= ri;
            }
        } else {
            let choices: Vec<u64> = y.iter().map(|&b| b as u64).collect();
            let got = p.ot.receive(&mut p.session, req, &choices)?;
            for (zi, g) in z.iter_mut().zip(&got) {
                *zi ^= *g as u8;
            }
        }
    }
    Ok(z)
}

/// Convert XOR-shared bits into additive shares over the ring.
pub(crate) fn bits_to_arith(p: &mut Party, b: &[u8]) -> Result<Vec<u64>> {
    let n = b.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mask = p.mask();
    let req = OtRequest::new(1, p.ring.ell, n)?;
    if p.is_mo() {
        let r: Vec<u64> = (0..n).map(|_| p.rng.random::<u64>() & mask).collect();
        let msgs: Vec<u64> = r
            .iter()
            .zip(b)
            .flat_map(|(&r, &b0)| {
                [
                    r.wrapping_add(b0 as u64) & mask,
                    r.wrapping_add((b0 ^ 1) as u64) & mask,
                ]
            })
            .collect();
        p.ot.send(&mut p.session, req, &msgs)?;
        Ok(r.iter().map(|&r| r.wrapping_neg() & mask).collect())
    } else {
        let choices: Vec<u64> = b.iter().map(|&x| x as u64).collect();
        p.ot.receive(&mut p.session, req, &choices)
    }
}

/// Shares of `d * x` for a shared bit `d` and shared ring element `x`.
///
/// Each party, as OT sender, offers `-r + (d_own ^ c) * x_own` for the
/// peer's choice bit `c`; the receiver obtains `-r + d * x_own`.
pub fn select(p: &mut Party, d: &BoolShareTensor, x: &ShareTensor) -> Result<ShareTensor> {
    ensure!(
        d.shape == x.value.shape,
        Error::Shape(format!("select {:?} with {:?}", d.shape, x.value.shape))
    );
    ensure!(
        x.value.ell == p.ring.ell,
        Error::Params("share ring width differs from party ring".into())
    );
    let n = d.bits.len();
    let mask = p.mask();
    let req = OtRequest::new(1, p.ring.ell, n)?;
    let xs = &x.value.data;
    let mut out = vec![0u64; n];
    for sender in [Role::ModelOwner, Role::DataOwner] {
        if p.role == sender {
            let r: Vec<u64> = (0..n).map(|_| p.rng.random::<u64>() & mask).collect();
            let msgs: Vec<u64> = (0..n)
                .flat_map(|i| {
                    let base = r[i].wrapping_neg();
                    let own = d.bits[i] as u64;
                    [
                        base.wrapping_add(xs[i].wrapping_mul(own)) & mask,
                        base.wrapping_add(xs[i].wrapping_mul(own ^ 1)) & mask,
                    ]
                })
                .collect();
            p.ot.send(&mut p.session, req, &msgs)?;
            for (o, ri) in out.iter_mut().zip(&r) {
                *o = o.wrapping_add(*ri) & mask;
            }
        } else {
            let choices: Vec<u64> = d.bits.iter().map(|&b| b as u64).collect();
            let got = p.ot.receive(&mut p.session, req, &choices)?;
            for (o, g) in out.iter_mut().zip(&got) {
                *o = o.wrapping_add(*g) & mask;
            }
        }
    }
    let mut value = x.value.clone();
    value.data = out;
    Ok(ShareTensor::new(p.role, value))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    use super::*;
    use crate::ot::OtBackend;
    use crate::party::{local_pair, run_both};
    use crate::ring::{reconstruct, share, RingParams, RingTensor};

    fn pair(seed: u64) -> (Party, Party) {
        local_pair(RingParams::default(), OtBackend::Dealer, seed)
    }

    fn shared(values: &[i64], scale: u32, seed: u64) -> (ShareTensor, ShareTensor) {
        let ring = RingParams::default();
        let data = values.iter().map(|&v| ring.from_signed(v)).collect();
        let t = RingTensor::from_raw(&[values.len()], data, scale, ring.ell).unwrap();
        share(&t, &mut ChaCha20Rng::seed_from_u64(seed))
    }

    fn compare(a: &[u64], b: &[u64], bits: u32) -> Vec<u8> {
        let (mut mo, mut dataowner) = pair(1);
        let (x, y) = run_both(&mut mo, &mut dataowner, |p| {
            let v = if p.is_mo() { a } else { b };
            secure_compare(p, v, bits).unwrap()
        });
        x.iter().zip(&y).map(|(a, b)| a ^ b).collect()
    }

    #[test]
    fn compare_small_cases() {
        assert_eq!(compare(&[3, 5, 7, 0], &[5, 5, 2, 0], 59), vec![1, 0, 0, 0]);
        assert_eq!(compare(&[0], &[1], 1), vec![1]);
        assert_eq!(compare(&[6], &[7], 3), vec![1]);
    }

    #[test]
    fn compare_random_59_bit() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let m = crate::ring::mask(59);
        let a: Vec<u64> = (0..10_000).map(|_| rng.random::<u64>() & m).collect();
        let mut b: Vec<u64> = (0..10_000).map(|_| rng.random::<u64>() & m).collect();
        // force some shared high digits so the equality path is exercised
        for i in (0..b.len()).step_by(7) {
            b[i] = (a[i] & !0xFFF) | (rng.random::<u64>() & 0xFFF);
        }
        let got = compare(&a, &b, 59);
        for i in 0..a.len() {
            assert_eq!(got[i], (a[i] < b[i]) as u8, "{} vs {}", a[i], b[i]);
        }
    }

    #[test]
    fn compare_rejects_out_of_range() {
        let (mut mo, _d) = pair(2);
        assert!(matches!(secure_compare(&mut mo, &[16], 4), Err(Error::Range(16))));
    }

    #[test]
    fn drelu_and_relu() {
        let vals = [-5i64, 0, 7, -1, 1 << 50, -(1 << 50), 123456789];
        let (s0, s1) = shared(&vals, 0, 3);
        let (mut mo, mut dataowner) = pair(3);
        let (a, b) = run_both(&mut mo, &mut dataowner, |p| {
            let x = if p.is_mo() { &s0 } else { &s1 };
            relu_forward(p, x).unwrap()
        });
        let bits = BoolShareTensor::reconstruct(&a.1, &b.1).unwrap();
        let expect: Vec<u8> = vals.iter().map(|&v| (v >= 0) as u8).collect();
        assert_eq!(bits, expect);
        let y = reconstruct(&a.0, &b.0).unwrap();
        let ring = RingParams::default();
        let ys: Vec<i64> = y.data.iter().map(|&v| ring.to_signed(v)).collect();
        assert_eq!(ys, vals.iter().map(|&v| v.max(0)).collect::<Vec<_>>());
    }

    fn run_trunc(vals: &[i64], shift: u32, mode: TruncMode, seed: u64) -> Vec<i64> {
        let (s0, s1) = shared(vals, 2 * 25, seed);
        let (mut mo, mut dataowner) = pair(seed);
        let (a, b) = run_both(&mut mo, &mut dataowner, |p| {
            let x = if p.is_mo() { &s0 } else { &s1 };
            truncate(p, x, shift, mode, true).unwrap()
        });
        let y = reconstruct(&a, &b).unwrap();
        assert_eq!(y.scale, 50 - shift);
        let ring = RingParams::default();
        y.data.iter().map(|&v| ring.to_signed(v)).collect()
    }

    #[test]
    fn faithful_truncation_is_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let bound = 1i64 << 56;
        let mut vals: Vec<i64> = (0..2000).map(|_| rng.random_range(-bound + 1..bound)).collect();
        vals.extend([0, -1, 1, bound - 1, -bound + 1, -(1 << 25), (1 << 25) - 1]);
        for shift in [1, 12, 25] {
            let got = run_trunc(&vals, shift, TruncMode::Faithful, 5 + shift as u64);
            for (g, v) in got.iter().zip(&vals) {
                assert_eq!(*g, v >> shift, "value {v} shift {shift}");
            }
        }
    }

    #[test]
    fn approximate_truncation_within_one_unit() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let bound = 1i64 << 56;
        let vals: Vec<i64> = (0..2000).map(|_| rng.random_range(-bound + 1..bound)).collect();
        let got = run_trunc(&vals, 25, TruncMode::Approximate, 7);
        let mut low = 0;
        for (g, v) in got.iter().zip(&vals) {
            let d = g - (v >> 25);
            assert!(d == 0 || d == -1, "value {v}: error {d}");
            low += (d == -1) as usize;
        }
        assert!(low > 0, "approximate mode never dropped the carry");
    }

    #[test]
    fn truncation_preserves_sign() {
        let vals = [-(1i64 << 40), -3 << 25, 3 << 25, 1 << 40];
        let got = run_trunc(&vals, 25, TruncMode::Approximate, 8);
        for (g, v) in got.iter().zip(&vals) {
            assert_eq!(g.signum(), v.signum());
        }
    }

    #[test]
    fn avgpool_roundtrip() {
        let ring = RingParams::default();
        let vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.25 - 3.0).collect();
        let x = RingTensor::encode(&ring, &[1, 2, 4, 4], &vals, 25).unwrap();
        let (s0, s1) = share(&x, &mut ChaCha20Rng::seed_from_u64(11));
        let (mut mo, mut dataowner) = pair(11);
        let (a, b) = run_both(&mut mo, &mut dataowner, |p| {
            let x = if p.is_mo() { &s0 } else { &s1 };
            let y = avgpool2_forward(p, x, TruncMode::Faithful).unwrap();
            let g = avgpool2_backward(p, &y, &[1, 2, 4, 4], TruncMode::Faithful).unwrap();
            (y, g)
        });
        let y = reconstruct(&a.0, &b.0).unwrap().decode();
        assert_eq!(y.len(), 8);
        // first window: elements 0,1,4,5
        let w0 = (vals[0] + vals[1] + vals[4] + vals[5]) / 4.0;
        assert!((y[0] - w0).abs() < 1e-6);
        let g = reconstruct(&a.1, &b.1).unwrap().decode();
        assert!((g[0] - w0 / 4.0).abs() < 1e-6);
        assert!((g[5] - w0 / 4.0).abs() < 1e-6);
    }
}
