//! RNS-BFV with a power-of-two plaintext modulus.
//!
//! Only the operations needed by the linear protocols are provided:
//! public-key encryption, decryption, ciphertext addition, plaintext
//! addition and plaintext multiplication. Ciphertexts live in NTT form.

use num_bigint::BigUint;
use num_traits::ToPrimitive;
use rand::{CryptoRng, Rng};
use rayon::prelude::*;

use super::params::BfvContext;
use crate::error::{ensure, Error, Result};

/// Binomial parameter of the error distribution (standard deviation ~3.24).
pub const CBD_ETA: u32 = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Form {
    Coeff,
    Ntt,
}

impl Form {
    pub fn name(self) -> &'static str {
        match self {
            Form::Coeff => "coefficient",
            Form::Ntt => "NTT",
        }
    }
}

/// A polynomial in RNS representation, one row of `N` residues per prime.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RnsPoly {
    pub data: Vec<u64>,
    pub form: Form,
}

impl RnsPoly {
    pub fn zero(ctx: &BfvContext, form: Form) -> Self {
        RnsPoly {
            data: vec![0; ctx.num_moduli() * ctx.degree()],
            form,
        }
    }

    pub fn row(&self, ctx: &BfvContext, i: usize) -> &[u64] {
        let n = ctx.degree();
        &self.data[i * n..(i + 1) * n]
    }

    fn expect(&self, form: Form) -> Result<()> {
        ensure!(
            self.form == form,
            Error::WrongForm {
                expected: form.name(),
                found: self.form.name()
            }
        );
        Ok(())
    }

    /// Lift small signed coefficients into every residue row.
    pub fn from_signed(ctx: &BfvContext, coeffs: &[i64]) -> Self {
        let n = ctx.degree();
        let mut data = vec![0u64; ctx.num_moduli() * n];
        for (i, m) in ctx.moduli.iter().enumerate() {
            for (d, &c) in data[i * n..(i + 1) * n].iter_mut().zip(coeffs) {
                *d = m.from_i64(c);
            }
        }
        RnsPoly {
            data,
            form: Form::Coeff,
        }
    }

    pub fn to_ntt(&mut self, ctx: &BfvContext) {
        if self.form == Form::Ntt {
            return;
        }
        let n = ctx.degree();
        self.data
            .par_chunks_mut(n)
            .zip(ctx.tables.par_iter())
            .for_each(|(row, t)| t.forward(row));
        self.form = Form::Ntt;
    }

    pub fn to_coeff(&mut self, ctx: &BfvContext) {
        if self.form == Form::Coeff {
            return;
        }
        let n = ctx.degree();
        self.data
            .par_chunks_mut(n)
            .zip(ctx.tables.par_iter())
            .for_each(|(row, t)| t.inverse(row));
        self.form = Form::Coeff;
    }

    fn add_assign(&mut self, ctx: &BfvContext, other: &RnsPoly) {
        let n = ctx.degree();
        for (i, m) in ctx.moduli.iter().enumerate() {
            let r = i * n..(i + 1) * n;
            for (a, &b) in self.data[r.clone()].iter_mut().zip(&other.data[r]) {
                *a = m.add(*a, b);
            }
        }
    }

    fn sub_assign(&mut self, ctx: &BfvContext, other: &RnsPoly) {
        let n = ctx.degree();
        for (i, m) in ctx.moduli.iter().enumerate() {
            let r = i * n..(i + 1) * n;
            for (a, &b) in self.data[r.clone()].iter_mut().zip(&other.data[r]) {
                *a = m.sub(*a, b);
            }
        }
    }

    /// Pointwise product, both operands in NTT form.
    fn mul(&self, ctx: &BfvContext, other: &RnsPoly) -> RnsPoly {
        let n = ctx.degree();
        let mut out = self.clone();
        for (i, m) in ctx.moduli.iter().enumerate() {
            let r = i * n..(i + 1) * n;
            for (a, &b) in out.data[r.clone()].iter_mut().zip(&other.data[r]) {
                *a = m.mul(*a, b);
            }
        }
        out
    }

    /// `self += a * b` pointwise.
    fn mul_acc(&mut self, ctx: &BfvContext, a: &RnsPoly, b: &RnsPoly) {
        let n = ctx.degree();
        for (i, m) in ctx.moduli.iter().enumerate() {
            let r = i * n..(i + 1) * n;
            for ((acc, &x), &y) in self.data[r.clone()]
                .iter_mut()
                .zip(&a.data[r.clone()])
                .zip(&b.data[r])
            {
                *acc = m.add(*acc, m.mul(x, y));
            }
        }
    }
}

/// Plaintext polynomial with coefficients in [0, t).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plaintext {
    pub coeffs: Vec<u64>,
}

impl Plaintext {
    pub fn new(ctx: &BfvContext, coeffs: Vec<u64>) -> Result<Self> {
        ensure!(
            coeffs.len() == ctx.degree(),
            Error::Shape(format!(
                "{} coefficients for degree {}",
                coeffs.len(),
                ctx.degree()
            ))
        );
        let mask = ctx.plain_mask();
        if let Some(&bad) = coeffs.iter().find(|&&c| c & !mask != 0) {
            return Err(Error::Range(bad));
        }
        Ok(Plaintext { coeffs })
    }

    pub fn zero(ctx: &BfvContext) -> Self {
        Plaintext {
            coeffs: vec![0; ctx.degree()],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SecretKey {
    pub(crate) s: RnsPoly,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    pub p0: RnsPoly,
    pub p1: RnsPoly,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ciphertext {
    pub c0: RnsPoly,
    pub c1: RnsPoly,
}

/// A plaintext prepared for repeated multiplication: centered lift into
/// every residue, then NTT.
#[derive(Clone, Debug)]
pub struct PlainMultiplier {
    poly: RnsPoly,
}

impl PlainMultiplier {
    pub fn new(ctx: &BfvContext, pt: &Plaintext) -> Self {
        let bits = ctx.plain_bits();
        let half = 1u64 << (bits - 1);
        let t = 1u64 << bits;
        let signed: Vec<i64> = pt
            .coeffs
            .iter()
            .map(|&c| if c >= half { c as i64 - t as i64 } else { c as i64 })
            .collect();
        let mut poly = RnsPoly::from_signed(ctx, &signed);
        poly.to_ntt(ctx);
        PlainMultiplier { poly }
    }
}

fn sample_ternary<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<i64> {
    (0..n).map(|_| rng.random_range(0..3i64) - 1).collect()
}

fn sample_cbd<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<i64> {
    let mask = (1u64 << CBD_ETA) - 1;
    (0..n)
        .map(|_| {
            let a = (rng.random::<u64>() & mask).count_ones() as i64;
            let b = (rng.random::<u64>() & mask).count_ones() as i64;
            a - b
        })
        .collect()
}

fn sample_uniform<R: Rng + ?Sized>(ctx: &BfvContext, rng: &mut R) -> RnsPoly {
    let n = ctx.degree();
    let mut data = vec![0u64; ctx.num_moduli() * n];
    for (i, m) in ctx.moduli.iter().enumerate() {
        for d in data[i * n..(i + 1) * n].iter_mut() {
            *d = rng.random_range(0..m.value());
        }
    }
    RnsPoly {
        data,
        form: Form::Ntt,
    }
}

pub fn keygen<R: Rng + CryptoRng + ?Sized>(ctx: &BfvContext, rng: &mut R) -> (SecretKey, PublicKey) {
    let n = ctx.degree();
    let mut s = RnsPoly::from_signed(ctx, &sample_ternary(n, rng));
    s.to_ntt(ctx);
    let mut e = RnsPoly::from_signed(ctx, &sample_cbd(n, rng));
    e.to_ntt(ctx);
    let a = sample_uniform(ctx, rng);
    // p0 = -(a*s + e)
    let mut p0 = RnsPoly::zero(ctx, Form::Ntt);
    let mut as_e = a.mul(ctx, &s);
    as_e.add_assign(ctx, &e);
    p0.sub_assign(ctx, &as_e);
    (SecretKey { s }, PublicKey { p0, p1: a })
}

/// Coefficient-form `round(q * m / t)` in every residue.
fn scale_plaintext(ctx: &BfvContext, pt: &Plaintext, out: &mut [u64]) {
    let n = ctx.degree();
    let bits = ctx.plain_bits();
    let half_t = 1u128 << (bits - 1);
    let r_t = ctx.q_mod_t as u128;
    for (k, &m) in pt.coeffs.iter().enumerate() {
        let frac = ((r_t * m as u128 + half_t) >> bits) as u64;
        for (i, md) in ctx.moduli.iter().enumerate() {
            let v = md.mul(ctx.delta[i], md.reduce(m));
            out[i * n + k] = md.add(v, md.reduce(frac));
        }
    }
}

fn check_plaintext(ctx: &BfvContext, pt: &Plaintext) -> Result<()> {
    ensure!(
        pt.coeffs.len() == ctx.degree(),
        Error::Shape(format!("plaintext of length {}", pt.coeffs.len()))
    );
    let mask = ctx.plain_mask();
    if let Some(&bad) = pt.coeffs.iter().find(|&&c| c & !mask != 0) {
        return Err(Error::Range(bad));
    }
    Ok(())
}

fn check_ct(ct: &Ciphertext) -> Result<()> {
    ct.c0.expect(Form::Ntt)?;
    ct.c1.expect(Form::Ntt)
}

pub fn encrypt<R: Rng + CryptoRng + ?Sized>(
    ctx: &BfvContext,
    pk: &PublicKey,
    pt: &Plaintext,
    rng: &mut R,
) -> Result<Ciphertext> {
    check_plaintext(ctx, pt)?;
    let n = ctx.degree();
    let mut u = RnsPoly::from_signed(ctx, &sample_ternary(n, rng));
    u.to_ntt(ctx);
    let mut c0 = RnsPoly::from_signed(ctx, &sample_cbd(n, rng));
    let mut scaled = RnsPoly {
        data: ctx.pool.take(),
        form: Form::Coeff,
    };
    scale_plaintext(ctx, pt, &mut scaled.data);
    c0.add_assign(ctx, &scaled);
    ctx.pool.give(scaled.data);
    c0.to_ntt(ctx);
    c0.mul_acc(ctx, &pk.p0, &u);
    let mut c1 = RnsPoly::from_signed(ctx, &sample_cbd(n, rng));
    c1.to_ntt(ctx);
    c1.mul_acc(ctx, &pk.p1, &u);
    Ok(Ciphertext { c0, c1 })
}

/// `c0 + c1 * s` in coefficient form.
fn phase(ctx: &BfvContext, sk: &SecretKey, ct: &Ciphertext) -> RnsPoly {
    let mut x = ct.c0.clone();
    x.mul_acc(ctx, &ct.c1, &sk.s);
    x.to_coeff(ctx);
    x
}

pub fn decrypt(ctx: &BfvContext, sk: &SecretKey, ct: &Ciphertext) -> Result<Plaintext> {
    check_ct(ct)?;
    let x = phase(ctx, sk, ct);
    let n = ctx.degree();
    let bits = ctx.plain_bits();
    let mask = ctx.plain_mask();
    let mut coeffs = vec![0u64; n];
    // m = round(sum_i y_i * t / q_i) mod t, y_i = x_i * [(q/q_i)^-1]_{q_i}
    for (k, out) in coeffs.iter_mut().enumerate() {
        let mut int_sum = 0u64;
        let mut frac_sum = 0u128;
        for (i, md) in ctx.moduli.iter().enumerate() {
            let qi = md.value() as u128;
            let y = md.mul_shoup(x.data[i * n + k], ctx.punctured_inv[i], ctx.punctured_inv_shoup[i]);
            let num = (y as u128) << bits;
            let int = num / qi;
            let rem = num - int * qi;
            int_sum = int_sum.wrapping_add(int as u64);
            frac_sum += (rem << 64) / qi;
        }
        let carry = (frac_sum >> 64) as u64;
        let round = ((frac_sum as u64) >> 63) & 1;
        *out = int_sum.wrapping_add(carry).wrapping_add(round) & mask;
    }
    Ok(Plaintext { coeffs })
}

pub fn add(ctx: &BfvContext, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
    let mut out = a.clone();
    add_assign(ctx, &mut out, b)?;
    Ok(out)
}

pub fn add_assign(ctx: &BfvContext, a: &mut Ciphertext, b: &Ciphertext) -> Result<()> {
    check_ct(a)?;
    check_ct(b)?;
    a.c0.add_assign(ctx, &b.c0);
    a.c1.add_assign(ctx, &b.c1);
    Ok(())
}

pub fn add_plain(ctx: &BfvContext, ct: &Ciphertext, pt: &Plaintext) -> Result<Ciphertext> {
    let mut out = ct.clone();
    add_plain_assign(ctx, &mut out, pt)?;
    Ok(out)
}

pub fn add_plain_assign(ctx: &BfvContext, ct: &mut Ciphertext, pt: &Plaintext) -> Result<()> {
    check_ct(ct)?;
    check_plaintext(ctx, pt)?;
    let mut scaled = RnsPoly {
        data: ctx.pool.take(),
        form: Form::Coeff,
    };
    scale_plaintext(ctx, pt, &mut scaled.data);
    scaled.to_ntt(ctx);
    ct.c0.add_assign(ctx, &scaled);
    ctx.pool.give(scaled.data);
    Ok(())
}

/// `ct - pt`, computed as `ct + (t - pt)`.
pub fn sub_plain_assign(ctx: &BfvContext, ct: &mut Ciphertext, pt: &Plaintext) -> Result<()> {
    check_plaintext(ctx, pt)?;
    let mask = ctx.plain_mask();
    let neg = Plaintext {
        coeffs: pt.coeffs.iter().map(|&c| c.wrapping_neg() & mask).collect(),
    };
    add_plain_assign(ctx, ct, &neg)
}

pub fn mul_plain(ctx: &BfvContext, ct: &Ciphertext, w: &PlainMultiplier) -> Result<Ciphertext> {
    check_ct(ct)?;
    Ok(Ciphertext {
        c0: ct.c0.mul(ctx, &w.poly),
        c1: ct.c1.mul(ctx, &w.poly),
    })
}

/// `acc += ct * w`, the inner step of block matrix products.
pub fn mul_plain_acc(
    ctx: &BfvContext,
    acc: &mut Ciphertext,
    ct: &Ciphertext,
    w: &PlainMultiplier,
) -> Result<()> {
    check_ct(acc)?;
    check_ct(ct)?;
    acc.c0.mul_acc(ctx, &ct.c0, &w.poly);
    acc.c1.mul_acc(ctx, &ct.c1, &w.poly);
    Ok(())
}

pub fn zero_ciphertext(ctx: &BfvContext) -> Ciphertext {
    Ciphertext {
        c0: RnsPoly::zero(ctx, Form::Ntt),
        c1: RnsPoly::zero(ctx, Form::Ntt),
    }
}

fn log2_big(b: &BigUint) -> f64 {
    let bits = b.bits();
    if bits == 0 {
        return f64::NEG_INFINITY;
    }
    if bits <= 64 {
        return b.to_f64().unwrap().log2();
    }
    let shift = bits - 60;
    (b >> shift).to_f64().unwrap().log2() + shift as f64
}

/// Remaining invariant-noise budget in bits; 0 means decryption may fail.
pub fn noise_budget(ctx: &BfvContext, sk: &SecretKey, ct: &Ciphertext) -> Result<u32> {
    check_ct(ct)?;
    let x = phase(ctx, sk, ct);
    let n = ctx.degree();
    let q = &ctx.q;
    let half_q = q >> 1u32;
    let t = BigUint::from(1u64) << ctx.plain_bits();
    let mut worst = BigUint::from(0u32);
    for k in 0..n {
        let mut acc = BigUint::from(0u32);
        for (i, md) in ctx.moduli.iter().enumerate() {
            let y = md.mul(x.data[i * n + k], ctx.punctured_inv[i]);
            acc += &ctx.punctured[i] * y;
        }
        // t * x mod q, centered
        let v = (acc * &t) % q;
        let v = if v > half_q { q - v } else { v };
        if v > worst {
            worst = v;
        }
    }
    if worst.bits() == 0 {
        return Ok(log2_big(q).floor() as u32);
    }
    let budget = log2_big(q) - log2_big(&worst) - 1.0;
    Ok(budget.max(0.0).floor() as u32)
}

#[cfg(test)]
mod tests {
    use super::super::params::BfvParams;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::Arc;

    fn setup() -> (Arc<BfvContext>, SecretKey, PublicKey, ChaCha20Rng) {
        let ctx = BfvContext::new(BfvParams::default()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let (sk, pk) = keygen(&ctx, &mut rng);
        (ctx, sk, pk, rng)
    }

    fn random_pt(ctx: &BfvContext, rng: &mut ChaCha20Rng) -> Plaintext {
        let mask = ctx.plain_mask();
        Plaintext::new(ctx, (0..ctx.degree()).map(|_| rng.random::<u64>() & mask).collect()).unwrap()
    }

    #[test]
    fn encrypt_decrypt_zero_and_edges() {
        let (ctx, sk, pk, mut rng) = setup();
        let mut coeffs = vec![0u64; ctx.degree()];
        coeffs[0] = (1 << 59) - 1;
        coeffs[1] = 1;
        coeffs[2] = 1 << 58;
        let pt = Plaintext::new(&ctx, coeffs).unwrap();
        let ct = encrypt(&ctx, &pk, &pt, &mut rng).unwrap();
        assert_eq!(decrypt(&ctx, &sk, &ct).unwrap(), pt);
    }

    #[test]
    fn fresh_budget_is_large() {
        let (ctx, sk, pk, mut rng) = setup();
        let pt = random_pt(&ctx, &mut rng);
        let ct = encrypt(&ctx, &pk, &pt, &mut rng).unwrap();
        let b = noise_budget(&ctx, &sk, &ct).unwrap();
        assert!(b >= 90, "fresh budget {b}");
    }

    #[test]
    fn plain_mult_matches_negacyclic_product() {
        let (ctx, sk, pk, mut rng) = setup();
        let n = ctx.degree();
        let a = random_pt(&ctx, &mut rng);
        let b = random_pt(&ctx, &mut rng);
        let ct = encrypt(&ctx, &pk, &a, &mut rng).unwrap();
        let prod = mul_plain(&ctx, &ct, &PlainMultiplier::new(&ctx, &b)).unwrap();
        let got = decrypt(&ctx, &sk, &prod).unwrap();
        assert!(noise_budget(&ctx, &sk, &prod).unwrap() > 0);
        // spot-check a handful of coefficients against the mod-2^59 schoolbook
        let mask = ctx.plain_mask();
        for &k in &[0usize, 1, 17, n / 2, n - 1] {
            let mut acc = 0u64;
            for i in 0..n {
                let j = (k + n - i) % n;
                let p = a.coeffs[i].wrapping_mul(b.coeffs[j]);
                if i <= k {
                    acc = acc.wrapping_add(p);
                } else {
                    acc = acc.wrapping_sub(p);
                }
            }
            assert_eq!(got.coeffs[k], acc & mask, "coefficient {k}");
        }
    }

    #[test]
    fn add_and_sub_plain() {
        let (ctx, sk, pk, mut rng) = setup();
        let a = random_pt(&ctx, &mut rng);
        let b = random_pt(&ctx, &mut rng);
        let mask = ctx.plain_mask();
        let mut ct = encrypt(&ctx, &pk, &a, &mut rng).unwrap();
        add_plain_assign(&ctx, &mut ct, &b).unwrap();
        let sum = decrypt(&ctx, &sk, &ct).unwrap();
        for k in 0..ctx.degree() {
            assert_eq!(sum.coeffs[k], a.coeffs[k].wrapping_add(b.coeffs[k]) & mask);
        }
        sub_plain_assign(&ctx, &mut ct, &b).unwrap();
        assert_eq!(decrypt(&ctx, &sk, &ct).unwrap(), a);
        let ct2 = encrypt(&ctx, &pk, &b, &mut rng).unwrap();
        let both = add(&ctx, &ct, &ct2).unwrap();
        assert_eq!(decrypt(&ctx, &sk, &both).unwrap(), sum);
    }

    #[test]
    fn out_of_range_plaintext_rejected() {
        let (ctx, _sk, pk, mut rng) = setup();
        let mut coeffs = vec![0u64; ctx.degree()];
        coeffs[3] = 1 << 59;
        assert!(matches!(Plaintext::new(&ctx, coeffs.clone()), Err(Error::Range(_))));
        let bad = Plaintext { coeffs };
        assert!(matches!(encrypt(&ctx, &pk, &bad, &mut rng), Err(Error::Range(_))));
    }

    #[test]
    fn coefficient_form_ciphertext_rejected() {
        let (ctx, sk, pk, mut rng) = setup();
        let pt = random_pt(&ctx, &mut rng);
        let mut ct = encrypt(&ctx, &pk, &pt, &mut rng).unwrap();
        ct.c0.to_coeff(&ctx);
        assert!(matches!(decrypt(&ctx, &sk, &ct), Err(Error::WrongForm { .. })));
    }
}
