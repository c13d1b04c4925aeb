//! Little-endian wire format for ciphertexts, public keys and plaintexts.
//!
//! Header: magic `PBFV`, version u16, degree u32, row count u8, form u8.
//! A ciphertext (or public key) is followed by the rows of its first
//! component, then the rows of its second. A plaintext carries one row.

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};

use super::params::BfvContext;
use super::scheme::{Ciphertext, Form, Plaintext, PublicKey, RnsPoly};
use crate::error::{ensure, Error, Result};

pub const MAGIC: &[u8; 4] = b"PBFV";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 12;

fn write_header(out: &mut Vec<u8>, degree: usize, rows: usize, form: Form) {
    out.extend_from_slice(MAGIC);
    out.write_u16::<LittleEndian>(VERSION).unwrap();
    out.write_u32::<LittleEndian>(degree as u32).unwrap();
    out.write_u8(rows as u8).unwrap();
    out.write_u8(match form {
        Form::Coeff => 0,
        Form::Ntt => 1,
    })
    .unwrap();
}

fn read_header(mut b: &[u8], degree: usize, rows: usize) -> Result<Form> {
    ensure!(
        b.len() >= HEADER_LEN,
        Error::Format("truncated header".into())
    );
    ensure!(&b[..4] == MAGIC, Error::Format("bad magic".into()));
    b = &b[4..];
    let version = b.read_u16::<LittleEndian>()?;
    ensure!(
        version == VERSION,
        Error::Format(format!("unsupported version {version}"))
    );
    let n = b.read_u32::<LittleEndian>()? as usize;
    ensure!(
        n == degree,
        Error::Format(format!("degree {n}, expected {degree}"))
    );
    let l = b.read_u8()? as usize;
    ensure!(
        l == rows,
        Error::Format(format!("{l} residue rows, expected {rows}"))
    );
    match b.read_u8()? {
        0 => Ok(Form::Coeff),
        1 => Ok(Form::Ntt),
        f => Err(Error::Format(format!("unknown form tag {f}"))),
    }
}

fn write_rows(out: &mut Vec<u8>, data: &[u64]) {
    let start = out.len();
    out.resize(start + 8 * data.len(), 0);
    LittleEndian::write_u64_into(data, &mut out[start..]);
}

fn read_poly(ctx: &BfvContext, bytes: &[u8], form: Form) -> Result<RnsPoly> {
    let n = ctx.degree();
    let mut data = vec![0u64; bytes.len() / 8];
    LittleEndian::read_u64_into(bytes, &mut data);
    for (i, m) in ctx.moduli.iter().enumerate() {
        if let Some(&bad) = data[i * n..(i + 1) * n].iter().find(|&&v| v >= m.value()) {
            return Err(Error::Range(bad));
        }
    }
    Ok(RnsPoly { data, form })
}

fn pair_to_bytes(ctx: &BfvContext, a: &RnsPoly, b: &RnsPoly) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 16 * a.data.len());
    write_header(&mut out, ctx.degree(), ctx.num_moduli(), a.form);
    write_rows(&mut out, &a.data);
    write_rows(&mut out, &b.data);
    out
}

fn pair_from_bytes(ctx: &BfvContext, bytes: &[u8]) -> Result<(RnsPoly, RnsPoly)> {
    let l = ctx.num_moduli();
    let form = read_header(bytes, ctx.degree(), l)?;
    let poly_len = 8 * l * ctx.degree();
    ensure!(
        bytes.len() == HEADER_LEN + 2 * poly_len,
        Error::Format(format!("{} bytes, expected {}", bytes.len(), HEADER_LEN + 2 * poly_len))
    );
    let body = &bytes[HEADER_LEN..];
    Ok((
        read_poly(ctx, &body[..poly_len], form)?,
        read_poly(ctx, &body[poly_len..], form)?,
    ))
}

pub fn ciphertext_size(ctx: &BfvContext) -> usize {
    HEADER_LEN + 16 * ctx.num_moduli() * ctx.degree()
}

pub fn ciphertext_to_bytes(ctx: &BfvContext, ct: &Ciphertext) -> Vec<u8> {
    pair_to_bytes(ctx, &ct.c0, &ct.c1)
}

pub fn ciphertext_from_bytes(ctx: &BfvContext, bytes: &[u8]) -> Result<Ciphertext> {
    let (c0, c1) = pair_from_bytes(ctx, bytes)?;
    Ok(Ciphertext { c0, c1 })
}

pub fn public_key_to_bytes(ctx: &BfvContext, pk: &PublicKey) -> Vec<u8> {
    pair_to_bytes(ctx, &pk.p0, &pk.p1)
}

pub fn public_key_from_bytes(ctx: &BfvContext, bytes: &[u8]) -> Result<PublicKey> {
    let (p0, p1) = pair_from_bytes(ctx, bytes)?;
    ensure!(
        p0.form == Form::Ntt,
        Error::Format("public key must be in NTT form".into())
    );
    Ok(PublicKey { p0, p1 })
}

pub fn plaintext_to_bytes(ctx: &BfvContext, pt: &Plaintext) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * pt.coeffs.len());
    write_header(&mut out, ctx.degree(), 1, Form::Coeff);
    write_rows(&mut out, &pt.coeffs);
    out
}

pub fn plaintext_from_bytes(ctx: &BfvContext, bytes: &[u8]) -> Result<Plaintext> {
    let form = read_header(bytes, ctx.degree(), 1)?;
    ensure!(
        form == Form::Coeff,
        Error::Format("plaintext must be in coefficient form".into())
    );
    ensure!(
        bytes.len() == HEADER_LEN + 8 * ctx.degree(),
        Error::Format("plaintext length".into())
    );
    let mut coeffs = vec![0u64; ctx.degree()];
    LittleEndian::read_u64_into(&bytes[HEADER_LEN..], &mut coeffs);
    Plaintext::new(ctx, coeffs)
}

#[cfg(test)]
mod tests {
    use super::super::params::BfvParams;
    use super::super::scheme::{decrypt, encrypt, keygen};
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn roundtrips() {
        let ctx = BfvContext::new(BfvParams::small()).unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let (sk, pk) = keygen(&ctx, &mut rng);
        let mask = ctx.plain_mask();
        let pt = Plaintext::new(&ctx, (0..ctx.degree()).map(|_| rng.random::<u64>() & mask).collect()).unwrap();
        let ct = encrypt(&ctx, &pk, &pt, &mut rng).unwrap();

        let bytes = ciphertext_to_bytes(&ctx, &ct);
        assert_eq!(bytes.len(), ciphertext_size(&ctx));
        assert_eq!(&bytes[..4], b"PBFV");
        let back = ciphertext_from_bytes(&ctx, &bytes).unwrap();
        assert_eq!(back, ct);
        assert_eq!(decrypt(&ctx, &sk, &back).unwrap(), pt);

        let pk_back = public_key_from_bytes(&ctx, &public_key_to_bytes(&ctx, &pk)).unwrap();
        assert_eq!(pk_back, pk);

        let pt_back = plaintext_from_bytes(&ctx, &plaintext_to_bytes(&ctx, &pt)).unwrap();
        assert_eq!(pt_back, pt);
    }

    #[test]
    fn rejects_corruption() {
        let ctx = BfvContext::new(BfvParams::small()).unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(4);
        let (_sk, pk) = keygen(&ctx, &mut rng);
        let ct = encrypt(&ctx, &pk, &Plaintext::zero(&ctx), &mut rng).unwrap();
        let good = ciphertext_to_bytes(&ctx, &ct);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(ciphertext_from_bytes(&ctx, &bad).is_err());

        let mut bad = good.clone();
        bad.truncate(good.len() - 1);
        assert!(ciphertext_from_bytes(&ctx, &bad).is_err());

        let mut bad = good.clone();
        bad[HEADER_LEN..HEADER_LEN + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(ciphertext_from_bytes(&ctx, &bad), Err(Error::Range(_))));

        let other = BfvContext::new(BfvParams::default()).unwrap();
        assert!(ciphertext_from_bytes(&other, &good).is_err());
    }
}
