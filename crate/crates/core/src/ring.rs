//! Arithmetic in Z_{2^ell}, fixed-point encoding and additive secret sharing.
//!
//! Residues are kept in `u64` with the high `64 - ell` bits cleared. Every
//! tensor carries the number of fractional bits it is scaled by, so values
//! at `f` and `2f` cannot be mixed by accident.

use rand::Rng;

use crate::error::{ensure, Error, Result};

/// Which party holds a share.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// The model owner, share index 0.
    ModelOwner,
    /// A data owner, share index 1.
    DataOwner,
}

impl Role {
    pub fn index(self) -> usize {
        match self {
            Role::ModelOwner => 0,
            Role::DataOwner => 1,
        }
    }

    pub fn peer(self) -> Role {
        match self {
            Role::ModelOwner => Role::DataOwner,
            Role::DataOwner => Role::ModelOwner,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::ModelOwner => "mo",
            Role::DataOwner => "do",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mo" | "model-owner" => Ok(Role::ModelOwner),
            "do" | "data-owner" => Ok(Role::DataOwner),
            _ => Err(Error::Config(format!("unknown role {s:?}"))),
        }
    }
}

/// Ring bit width and fractional precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RingParams {
    pub ell: u32,
    pub frac_bits: u32,
}

impl Default for RingParams {
    fn default() -> Self {
        RingParams { ell: 59, frac_bits: 25 }
    }
}

impl RingParams {
    pub fn new(ell: u32, frac_bits: u32) -> Result<Self> {
        let p = RingParams { ell, frac_bits };
        p.validate()?;
        Ok(p)
    }

    /// Reduced precision profile used for quick runs.
    pub fn small() -> Self {
        RingParams { ell: 41, frac_bits: 12 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            (4..=62).contains(&self.ell),
            Error::Params(format!("ring width {} outside 4..=62", self.ell))
        );
        ensure!(
            self.frac_bits >= 1,
            Error::Params("need at least one fractional bit".into())
        );
        // products sit at 2f and the truncation protocols need two bits of
        // headroom above the largest magnitude
        ensure!(
            2 * self.frac_bits + 2 <= self.ell,
            Error::Params(format!(
                "2*{} fractional bits leave no headroom in a {}-bit ring",
                self.frac_bits, self.ell
            ))
        );
        Ok(())
    }

    #[inline]
    pub fn mask(&self) -> u64 {
        mask(self.ell)
    }

    #[inline]
    pub fn reduce(&self, v: u64) -> u64 {
        v & self.mask()
    }

    /// Encode `x` as `floor(x * 2^f)` in two's complement.
    pub fn encode(&self, x: f64) -> Result<u64> {
        self.encode_at(x, self.frac_bits)
    }

    pub fn encode_at(&self, x: f64, scale: u32) -> Result<u64> {
        let scaled = (x * (scale as f64).exp2()).floor();
        let bound = ((self.ell - 1) as f64).exp2();
        if !scaled.is_finite() || scaled >= bound || scaled < -bound {
            return Err(Error::Overflow(x));
        }
        Ok(from_signed(scaled as i64, self.ell))
    }

    pub fn decode(&self, v: u64) -> f64 {
        self.decode_at(v, self.frac_bits)
    }

    pub fn decode_at(&self, v: u64, scale: u32) -> f64 {
        to_signed(v, self.ell) as f64 / (scale as f64).exp2()
    }

    pub fn to_signed(&self, v: u64) -> i64 {
        to_signed(v, self.ell)
    }

    pub fn from_signed(&self, v: i64) -> u64 {
        from_signed(v, self.ell)
    }

    /// Arithmetic right shift of the two's-complement value.
    pub fn arith_shift(&self, v: u64, bits: u32) -> u64 {
        from_signed(to_signed(v, self.ell) >> bits, self.ell)
    }

    pub fn msb(&self, v: u64) -> bool {
        (v >> (self.ell - 1)) & 1 == 1
    }
}

#[inline]
pub fn mask(ell: u32) -> u64 {
    if ell >= 64 {
        u64::MAX
    } else {
        (1u64 << ell) - 1
    }
}

#[inline]
pub fn to_signed(v: u64, ell: u32) -> i64 {
    let shift = 64 - ell;
    ((v << shift) as i64) >> shift
}

#[inline]
pub fn from_signed(v: i64, ell: u32) -> u64 {
    (v as u64) & mask(ell)
}

/// A dense row-major tensor over Z_{2^ell} with a fixed-point scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RingTensor {
    pub shape: Vec<usize>,
    pub data: Vec<u64>,
    pub scale: u32,
    pub ell: u32,
}

impl RingTensor {
    pub fn zeros(shape: &[usize], scale: u32, ell: u32) -> Self {
        let len = shape.iter().product();
        RingTensor {
            shape: shape.to_vec(),
            data: vec![0; len],
            scale,
            ell,
        }
    }

    pub fn from_raw(shape: &[usize], data: Vec<u64>, scale: u32, ell: u32) -> Result<Self> {
        let len: usize = shape.iter().product();
        ensure!(
            len == data.len(),
            Error::Shape(format!("{} values for shape {:?}", data.len(), shape))
        );
        let m = mask(ell);
        ensure!(
            data.iter().all(|&v| v & !m == 0),
            Error::Range(*data.iter().find(|&&v| v & !m != 0).unwrap())
        );
        Ok(RingTensor {
            shape: shape.to_vec(),
            data,
            scale,
            ell,
        })
    }

    pub fn encode(params: &RingParams, shape: &[usize], values: &[f64], scale: u32) -> Result<Self> {
        let len: usize = shape.iter().product();
        ensure!(
            len == values.len(),
            Error::Shape(format!("{} values for shape {:?}", values.len(), shape))
        );
        let data = values
            .iter()
            .map(|&x| params.encode_at(x, scale))
            .collect::<Result<Vec<_>>>()?;
        Ok(RingTensor {
            shape: shape.to_vec(),
            data,
            scale,
            ell: params.ell,
        })
    }

    pub fn decode(&self) -> Vec<f64> {
        let d = (self.scale as f64).exp2();
        self.data
            .iter()
            .map(|&v| to_signed(v, self.ell) as f64 / d)
            .collect()
    }

    pub fn random<R: Rng + ?Sized>(shape: &[usize], scale: u32, ell: u32, rng: &mut R) -> Self {
        let len: usize = shape.iter().product();
        let m = mask(ell);
        RingTensor {
            shape: shape.to_vec(),
            data: (0..len).map(|_| rng.random::<u64>() & m).collect(),
            scale,
            ell,
        }
    }

    #[inline]
    pub fn mask(&self) -> u64 {
        mask(self.ell)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn with_scale(mut self, scale: u32) -> Self {
        self.scale = scale;
        self
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        ensure!(
            len == self.data.len(),
            Error::Shape(format!("cannot reshape {:?} to {:?}", self.shape, shape))
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn check_same(&self, other: &RingTensor) -> Result<()> {
        ensure!(
            self.shape == other.shape,
            Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape))
        );
        ensure!(
            self.scale == other.scale,
            Error::Scale {
                expected: self.scale,
                found: other.scale
            }
        );
        ensure!(
            self.ell == other.ell,
            Error::Params(format!("ring width {} vs {}", self.ell, other.ell))
        );
        Ok(())
    }

    pub fn add(&self, other: &RingTensor) -> Result<RingTensor> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &RingTensor) -> Result<RingTensor> {
        let mut out = self.clone();
        out.sub_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &RingTensor) -> Result<()> {
        self.check_same(other)?;
        let m = self.mask();
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = a.wrapping_add(b) & m;
        }
        Ok(())
    }

    pub fn sub_assign(&mut self, other: &RingTensor) -> Result<()> {
        self.check_same(other)?;
        let m = self.mask();
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = a.wrapping_sub(b) & m;
        }
        Ok(())
    }

    pub fn neg(&self) -> RingTensor {
        let m = self.mask();
        let mut out = self.clone();
        for a in out.data.iter_mut() {
            *a = a.wrapping_neg() & m;
        }
        out
    }

    /// Multiply every element by a public ring scalar (scale unchanged).
    pub fn scalar_mul(&self, k: u64) -> RingTensor {
        let m = self.mask();
        let mut out = self.clone();
        for a in out.data.iter_mut() {
            *a = a.wrapping_mul(k) & m;
        }
        out
    }

    /// `self += k * other`, both at the same scale.
    pub fn axpy(&mut self, k: u64, other: &RingTensor) -> Result<()> {
        self.check_same(other)?;
        let m = self.mask();
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = a.wrapping_add(b.wrapping_mul(k)) & m;
        }
        Ok(())
    }

    /// Elementwise arithmetic shift, lowering the scale by `bits`.
    pub fn arith_shift(&self, bits: u32) -> RingTensor {
        let ell = self.ell;
        let mut out = self.clone();
        for a in out.data.iter_mut() {
            *a = from_signed(to_signed(*a, ell) >> bits, ell);
        }
        out.scale = self.scale.saturating_sub(bits);
        out
    }

    /// Matrix product of 2-D tensors; the result scale is the sum of scales.
    pub fn matmul(&self, other: &RingTensor) -> Result<RingTensor> {
        ensure!(
            self.shape.len() == 2 && other.shape.len() == 2 && self.shape[1] == other.shape[0],
            Error::Shape(format!("matmul {:?} x {:?}", self.shape, other.shape))
        );
        ensure!(
            self.ell == other.ell,
            Error::Params(format!("ring width {} vs {}", self.ell, other.ell))
        );
        let (n, k, m) = (self.shape[0], self.shape[1], other.shape[1]);
        let data = matmul_raw(&self.data, &other.data, n, k, m, self.mask());
        Ok(RingTensor {
            shape: vec![n, m],
            data,
            scale: self.scale + other.scale,
            ell: self.ell,
        })
    }

    pub fn transpose(&self) -> Result<RingTensor> {
        ensure!(
            self.shape.len() == 2,
            Error::Shape(format!("transpose of {:?}", self.shape))
        );
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(RingTensor {
            shape: vec![c, r],
            data: transpose_raw(&self.data, r, c),
            scale: self.scale,
            ell: self.ell,
        })
    }
}

/// `a (n x k) * b (k x m)` over Z_{2^64}, reduced by `mask` at the end.
pub fn matmul_raw(a: &[u64], b: &[u64], n: usize, k: usize, m: usize, mask: u64) -> Vec<u64> {
    let mut out = vec![0u64; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = o.wrapping_add(aip.wrapping_mul(bv));
            }
        }
    }
    for o in out.iter_mut() {
        *o &= mask;
    }
    out
}

pub fn transpose_raw(a: &[u64], rows: usize, cols: usize) -> Vec<u64> {
    let mut out = vec![0u64; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// One party's additive share of a tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShareTensor {
    pub role: Role,
    pub value: RingTensor,
}

impl ShareTensor {
    pub fn new(role: Role, value: RingTensor) -> Self {
        ShareTensor { role, value }
    }

    pub fn scale(&self) -> u32 {
        self.value.scale
    }

    pub fn shape(&self) -> &[usize] {
        &self.value.shape
    }

    /// Add a public tensor; only share 0 absorbs it.
    pub fn add_public(&self, public: &RingTensor) -> Result<ShareTensor> {
        if self.role == Role::ModelOwner {
            Ok(ShareTensor::new(self.role, self.value.add(public)?))
        } else {
            self.value.check_same(public)?;
            Ok(self.clone())
        }
    }
}

/// Split `x` into `(mo, do)` shares with the model owner's share uniform.
pub fn share<R: Rng + ?Sized>(x: &RingTensor, rng: &mut R) -> (ShareTensor, ShareTensor) {
    let r = RingTensor::random(&x.shape, x.scale, x.ell, rng);
    let other = x.sub(&r).expect("same shape");
    (
        ShareTensor::new(Role::ModelOwner, r),
        ShareTensor::new(Role::DataOwner, other),
    )
}

pub fn reconstruct(a: &ShareTensor, b: &ShareTensor) -> Result<RingTensor> {
    ensure!(
        a.role != b.role,
        Error::Shape("both shares belong to the same party".into())
    );
    a.value.add(&b.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn encode_one() {
        let p = RingParams::default();
        assert_eq!(p.encode(1.0).unwrap(), 33_554_432);
    }

    #[test]
    fn decode_small_ring() {
        let p = RingParams { ell: 8, frac_bits: 2 };
        assert_eq!(p.decode(6), 1.5);
        assert_eq!(p.decode(255), -0.25);
    }

    #[test]
    fn encode_negative_is_floor() {
        let p = RingParams { ell: 8, frac_bits: 2 };
        // -0.3 * 4 = -1.2, floor -> -2
        assert_eq!(p.encode(-0.3).unwrap(), 254);
    }

    #[test]
    fn overflow_rejected() {
        let p = RingParams::default();
        assert!(matches!(p.encode(1e12), Err(Error::Overflow(_))));
        assert!(p.encode(f64::NAN).is_err());
    }

    #[test]
    fn share_of_zero_with_known_mask() {
        let x = RingTensor::zeros(&[1], 25, 59);
        let r = RingTensor::from_raw(&[1], vec![5], 25, 59).unwrap();
        let other = x.sub(&r).unwrap();
        assert_eq!(other.data, vec![(1u64 << 59) - 5]);
    }

    #[test]
    fn scale_mixing_is_an_error() {
        let a = RingTensor::zeros(&[2], 25, 59);
        let b = RingTensor::zeros(&[2], 50, 59);
        assert!(matches!(a.add(&b), Err(Error::Scale { .. })));
    }

    #[test]
    fn invalid_params() {
        assert!(RingParams::new(59, 29).is_err());
        assert!(RingParams::new(59, 25).is_ok());
        assert!(RingParams::new(41, 12).is_ok());
    }

    #[test]
    fn matmul_small() {
        let a = RingTensor::from_raw(&[2, 2], vec![1, 2, 3, 4], 0, 8).unwrap();
        let b = RingTensor::from_raw(&[2, 1], vec![255, 1], 0, 8).unwrap();
        let c = a.matmul(&b).unwrap();
        // [1*-1 + 2, 3*-1 + 4]
        assert_eq!(c.data, vec![1, 1]);
    }

    proptest! {
        #[test]
        fn share_reconstruct_roundtrip(vals in proptest::collection::vec(any::<u64>(), 1..64), seed in any::<u64>()) {
            let ell = 59;
            let data: Vec<u64> = vals.iter().map(|v| v & mask(ell)).collect();
            let x = RingTensor::from_raw(&[data.len()], data, 25, ell).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let (a, b) = share(&x, &mut rng);
            prop_assert_eq!(reconstruct(&a, &b).unwrap(), x);
        }

        #[test]
        fn encode_decode_within_one_ulp(x in -1.0e6f64..1.0e6) {
            let p = RingParams::default();
            let v = p.encode(x).unwrap();
            let back = p.decode(v);
            prop_assert!(back <= x && x - back < 2f64.powi(-25));
        }

        #[test]
        fn shift_matches_floor_division(v in any::<i64>(), s in 0u32..20) {
            let p = RingParams::default();
            let v = v >> 6; // fits in 58 bits
            let shifted = p.to_signed(p.arith_shift(p.from_signed(v), s));
            prop_assert_eq!(shifted, v.div_euclid(1i64 << s));
        }
    }
}
