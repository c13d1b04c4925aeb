//! Linear layers on shares: forward, input gradient, and the reveal of
//! weight and bias gradients to the model owner.
//!
//! The data owner's share is always the encrypted operand. Outputs of the
//! forward and input-gradient procedures are shares at twice the input
//! scale; the caller truncates.

pub mod direct;
mod he;
pub mod ops;

pub(crate) use he::{plain_tiles, recv_encrypted, recv_masked, send_encrypted, send_masked, Term};
pub use ops::{Bilinear, ConvShape, LinearShape, OpKind};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::encoding::{Encrypted, Operand, Tiling};
use crate::error::{ensure, Error, Result};
use crate::party::Party;
use crate::ring::{RingParams, RingTensor, ShareTensor};
use crate::transport::codec::{bytes_to_u64s, u64s_to_bytes};
use crate::transport::msg;

/// Parameters live only at the model owner; the data owner's copy has `None`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub id: u16,
    pub shape: LinearShape,
    /// Weights at scale f.
    pub weight: Option<RingTensor>,
    /// Bias at scale 2f.
    pub bias: Option<RingTensor>,
}

impl LinearLayer {
    pub fn peer_view(&self) -> LinearLayer {
        LinearLayer {
            weight: None,
            bias: None,
            ..self.clone()
        }
    }

    fn params(&self) -> Result<(&RingTensor, &RingTensor)> {
        match (&self.weight, &self.bias) {
            (Some(w), Some(b)) => Ok((w, b)),
            _ => Err(Error::Config(format!("layer {} has no parameters here", self.id))),
        }
    }
}

/// Gaussian perturbation added by the data owner to revealed gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpConfig {
    pub enabled: bool,
    /// Noise multiplier.
    pub sigma: f64,
    /// Estimated per-sample L2 bound of the gradient.
    pub clip: f64,
    pub batch: usize,
}

impl DpConfig {
    pub fn disabled() -> Self {
        DpConfig {
            enabled: false,
            sigma: 0.0,
            clip: 1.0,
            batch: 1,
        }
    }

    pub fn new(sigma: f64, clip: f64, batch: usize) -> Result<Self> {
        ensure!(
            sigma >= 0.0 && clip > 0.0 && batch > 0,
            Error::Config(format!("invalid noise settings sigma={sigma} C={clip} B={batch}"))
        );
        Ok(DpConfig {
            enabled: true,
            sigma,
            clip,
            batch,
        })
    }

    /// Per-element standard deviation `sigma * C / sqrt(B)`.
    pub fn std_dev(&self) -> f64 {
        self.sigma * self.clip / (self.batch as f64).sqrt()
    }
}

pub fn sample_dp_noise<R: Rng + ?Sized>(len: usize, dp: &DpConfig, rng: &mut R) -> Vec<f64> {
    let sd = dp.std_dev();
    if !dp.enabled || sd == 0.0 {
        return vec![0.0; len];
    }
    let normal = Normal::new(0.0, sd).expect("finite positive deviation");
    (0..len).map(|_| normal.sample(rng)).collect()
}

/// Noise encoded at `scale`, ready to add to a revealed share.
pub(crate) fn encoded_noise<R: Rng + ?Sized>(
    ring: &RingParams,
    len: usize,
    dp: &DpConfig,
    scale: u32,
    rng: &mut R,
) -> Result<Vec<u64>> {
    sample_dp_noise(len, dp, rng)
        .into_iter()
        .map(|e| if e == 0.0 { Ok(0) } else { ring.encode_at(e, scale) })
        .collect()
}

fn batch_of(shape: &LinearShape, x: &ShareTensor, as_output: bool) -> Result<usize> {
    let batch = x.shape().first().copied().unwrap_or(0);
    let expected = if as_output {
        shape.output_shape(batch)
    } else {
        shape.input_shape(batch)
    };
    ensure!(
        batch > 0 && x.shape() == expected.as_slice(),
        Error::Shape(format!("tensor {:?} does not fit layer {shape:?}", x.shape()))
    );
    Ok(batch)
}

pub(crate) fn add_raw(a: &mut [u64], b: &[u64], mask: u64) {
    for (x, y) in a.iter_mut().zip(b) {
        *x = x.wrapping_add(*y) & mask;
    }
}

/// Shares of `F(W, v)` where `v` is shared: an encrypted round for the data
/// owner's share plus the model owner's local term.
fn weight_product(
    p: &mut Party,
    layer: &LinearLayer,
    op: OpKind,
    v: &ShareTensor,
    codes: (u16, u16),
) -> Result<Vec<u64>> {
    let batch = v.shape()[0];
    let bil = Bilinear::new(op, layer.shape, batch)?;
    let degree = p.he()?.ctx.degree();
    let tiling = Tiling::plan(
        bil.kernel,
        degree,
        Encrypted {
            weight: false,
            input: true,
        },
    )?;
    let mask = p.mask();
    p.session.set_tag(layer.id);
    if p.is_mo() {
        let (w, _) = layer.params()?;
        let cts = recv_encrypted(p, &tiling, Operand::Input, codes.0)?;
        let plain = plain_tiles(p, &tiling, Operand::Weight, &bil.prepare(Operand::Weight, &w.data)?)?;
        let s = send_masked(
            p,
            &tiling,
            &[Term {
                enc_slot: Operand::Input,
                cts: &cts,
                plain: &plain,
            }],
            codes.1,
        )?;
        let mut out = bil.finish(&s)?;
        add_raw(&mut out, &bil.eval(&w.data, &v.value.data, mask)?, mask);
        Ok(out)
    } else {
        send_encrypted(p, &tiling, Operand::Input, &bil.prepare(Operand::Input, &v.value.data)?, codes.0)?;
        let r = recv_masked(p, &tiling, codes.1)?;
        bil.finish(&r)
    }
}

/// Shares of `W x + b` at scale `x.scale + f`.
pub fn linear_forward(p: &mut Party, layer: &LinearLayer, x: &ShareTensor) -> Result<ShareTensor> {
    let batch = batch_of(&layer.shape, x, false)?;
    let mut out = weight_product(p, layer, OpKind::Forward, x, (msg::FWD_INPUT_CT, msg::FWD_MASKED_CT))?;
    if p.is_mo() {
        let (_, b) = layer.params()?;
        direct::add_bias(&mut out, &b.data, batch, p.mask());
    }
    let scale = x.scale() + p.ring.frac_bits;
    let value = RingTensor::from_raw(&layer.shape.output_shape(batch), out, scale, p.ring.ell)?;
    Ok(ShareTensor::new(p.role, value))
}

/// Shares of the input gradient at scale `gy.scale + f`.
pub fn linear_backward_input(p: &mut Party, layer: &LinearLayer, gy: &ShareTensor) -> Result<ShareTensor> {
    let batch = batch_of(&layer.shape, gy, true)?;
    let out = weight_product(p, layer, OpKind::BackwardInput, gy, (msg::BWD_INPUT_CT, msg::BWD_MASKED_CT))?;
    let scale = gy.scale() + p.ring.frac_bits;
    let value = RingTensor::from_raw(&layer.shape.input_shape(batch), out, scale, p.ring.ell)?;
    Ok(ShareTensor::new(p.role, value))
}

/// Reveal the bias gradient (summed over batch and positions) to the model
/// owner at the scale of `gy`. The data owner perturbs its share when DP is on.
pub fn reveal_grad_bias(p: &mut Party, layer: &LinearLayer, gy: &ShareTensor, dp: &DpConfig) -> Result<Option<RingTensor>> {
    let batch = batch_of(&layer.shape, gy, true)?;
    let mask = p.mask();
    let mut sum = direct::bias_grad(&gy.value.data, &layer.shape, batch, mask);
    p.session.set_tag(layer.id);
    if p.is_mo() {
        let theirs = bytes_to_u64s(&p.session.recv(msg::GRADB_REVEAL)?)?;
        ensure!(theirs.len() == sum.len(), Error::Shape("bias reveal length".into()));
        add_raw(&mut sum, &theirs, mask);
        Ok(Some(RingTensor::from_raw(&[sum.len()], sum, gy.scale(), p.ring.ell)?))
    } else {
        let ring = p.ring;
        let e = encoded_noise(&ring, sum.len(), dp, gy.scale(), &mut p.rng)?;
        add_raw(&mut sum, &e, mask);
        p.session.send(msg::GRADB_REVEAL, u64s_to_bytes(&sum))?;
        Ok(None)
    }
}

/// Reveal the weight gradient to the model owner.
///
/// Both cross terms are evaluated homomorphically into one set of masked
/// output tiles; the data owner adds its local term and perturbation and
/// returns the sum in the clear. The model owner shifts the result from
/// scale `x.scale + gy.scale` down by f bits.
pub fn grad_weight(
    p: &mut Party,
    layer: &LinearLayer,
    x: &ShareTensor,
    gy: &ShareTensor,
    dp: &DpConfig,
) -> Result<Option<RingTensor>> {
    let batch = batch_of(&layer.shape, x, false)?;
    ensure!(
        batch_of(&layer.shape, gy, true)? == batch,
        Error::Shape("input and gradient batches differ".into())
    );
    let bil = Bilinear::new(OpKind::GradWeight, layer.shape, batch)?;
    let degree = p.he()?.ctx.degree();
    let tiling = Tiling::plan(
        bil.kernel,
        degree,
        Encrypted {
            weight: true,
            input: true,
        },
    )?;
    let mask = p.mask();
    let scale = x.scale() + gy.scale();
    p.session.set_tag(layer.id);
    if p.is_mo() {
        let x_cts = recv_encrypted(p, &tiling, Operand::Input, msg::GRADW_INPUT_CT)?;
        let g_cts = recv_encrypted(p, &tiling, Operand::Weight, msg::GRADW_INPUT_CT)?;
        let g_plain = plain_tiles(p, &tiling, Operand::Weight, &bil.prepare(Operand::Weight, &gy.value.data)?)?;
        let x_plain = plain_tiles(p, &tiling, Operand::Input, &bil.prepare(Operand::Input, &x.value.data)?)?;
        let s = send_masked(
            p,
            &tiling,
            &[
                Term {
                    enc_slot: Operand::Input,
                    cts: &x_cts,
                    plain: &g_plain,
                },
                Term {
                    enc_slot: Operand::Weight,
                    cts: &g_cts,
                    plain: &x_plain,
                },
            ],
            msg::GRADW_MASKED_CT,
        )?;
        let mut dw = bil.finish(&s)?;
        let theirs = bytes_to_u64s(&p.session.recv(msg::GRADW_REVEAL)?)?;
        ensure!(theirs.len() == dw.len(), Error::Shape("weight reveal length".into()));
        add_raw(&mut dw, &theirs, mask);
        add_raw(&mut dw, &bil.eval(&gy.value.data, &x.value.data, mask)?, mask);
        let full = RingTensor::from_raw(&layer.shape.weight_shape(), dw, scale, p.ring.ell)?;
        Ok(Some(full.arith_shift(p.ring.frac_bits)))
    } else {
        send_encrypted(p, &tiling, Operand::Input, &bil.prepare(Operand::Input, &x.value.data)?, msg::GRADW_INPUT_CT)?;
        send_encrypted(p, &tiling, Operand::Weight, &bil.prepare(Operand::Weight, &gy.value.data)?, msg::GRADW_INPUT_CT)?;
        let mut share = bil.finish(&recv_masked(p, &tiling, msg::GRADW_MASKED_CT)?)?;
        add_raw(&mut share, &bil.eval(&gy.value.data, &x.value.data, mask)?, mask);
        let ring = p.ring;
        let e = encoded_noise(&ring, share.len(), dp, scale, &mut p.rng)?;
        add_raw(&mut share, &e, mask);
        p.session.send(msg::GRADW_REVEAL, u64s_to_bytes(&share))?;
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    use super::*;
    use crate::bfv::BfvParams;
    use crate::ot::OtBackend;
    use crate::party::{local_pair, run_both};
    use crate::ring::{reconstruct, share};

    fn he_pair(ring: RingParams, params: BfvParams, seed: u64) -> (Party, Party) {
        let (mut a, mut b) = local_pair(ring, OtBackend::Dealer, seed);
        run_both(&mut a, &mut b, |p| p.setup_he(params.clone()).unwrap());
        (a, b)
    }

    fn small() -> (Party, Party) {
        he_pair(RingParams::small(), BfvParams::small(), 1)
    }

    fn layer(shape: LinearShape, ring: &RingParams, rng: &mut ChaCha20Rng) -> LinearLayer {
        let w = RingTensor::random(&shape.weight_shape(), ring.frac_bits, ring.ell, rng);
        let b = RingTensor::random(&[shape.outputs()], 2 * ring.frac_bits, ring.ell, rng);
        LinearLayer {
            id: 3,
            shape,
            weight: Some(w),
            bias: Some(b),
        }
    }

    fn shares(shape: &[usize], ring: &RingParams, rng: &mut ChaCha20Rng) -> (RingTensor, ShareTensor, ShareTensor) {
        let x = RingTensor::random(shape, ring.frac_bits, ring.ell, rng);
        let (a, b) = share(&x, rng);
        (x, a, b)
    }

    fn forward_matches(shape: LinearShape, batch: usize, mo: &mut Party, dataowner: &mut Party) {
        let ring = mo.ring;
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let l = layer(shape, &ring, &mut rng);
        let (x, x0, x1) = shares(&shape.input_shape(batch), &ring, &mut rng);
        let peer = l.peer_view();
        let (y0, y1) = run_both(mo, dataowner, |p| {
            if p.is_mo() {
                linear_forward(p, &l, &x0).unwrap()
            } else {
                linear_forward(p, &peer, &x1).unwrap()
            }
        });
        let y = reconstruct(&y0, &y1).unwrap();
        let w = l.weight.as_ref().unwrap();
        let mut expect = direct::apply(OpKind::Forward, &shape, batch, &w.data, &x.data, ring.mask());
        direct::add_bias(&mut expect, &l.bias.as_ref().unwrap().data, batch, ring.mask());
        assert_eq!(y.data, expect);
        assert_eq!(y.scale, 2 * ring.frac_bits);
    }

    #[test]
    fn identity_forward() {
        let ring = RingParams::small();
        let (mut mo, mut dataowner) = small();
        let shape = LinearShape::Dense { inputs: 2, outputs: 2 };
        let one = |v: f64| ring.encode(v).unwrap();
        let l = LinearLayer {
            id: 1,
            shape,
            weight: Some(RingTensor::from_raw(&[2, 2], vec![one(1.0), 0, 0, one(1.0)], 12, 41).unwrap()),
            bias: Some(RingTensor::encode(&ring, &[2], &[1.0, 1.0], 24).unwrap()),
        };
        let x = RingTensor::encode(&ring, &[1, 2], &[2.0, 3.0], 12).unwrap();
        let (x0, x1) = share(&x, &mut ChaCha20Rng::seed_from_u64(2));
        let peer = l.peer_view();
        let (y0, y1) = run_both(&mut mo, &mut dataowner, |p| {
            let (l, x) = if p.is_mo() { (&l, &x0) } else { (&peer, &x1) };
            linear_forward(p, l, x).unwrap()
        });
        assert_eq!(reconstruct(&y0, &y1).unwrap().decode(), vec![3.0, 4.0]);
    }

    #[test]
    fn dense_forward_default_parameters() {
        let (mut mo, mut dataowner) = he_pair(RingParams::default(), BfvParams::default(), 2);
        forward_matches(LinearShape::Dense { inputs: 256, outputs: 100 }, 32, &mut mo, &mut dataowner);
    }

    #[test]
    fn conv_forward_small_parameters() {
        let (mut mo, mut dataowner) = small();
        let c = ConvShape {
            c_in: 2,
            c_out: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
            size: 9,
        };
        forward_matches(LinearShape::Conv(c), 3, &mut mo, &mut dataowner);
    }

    fn backward_and_grads(shape: LinearShape, batch: usize) {
        let (mut mo, mut dataowner) = small();
        let ring = mo.ring;
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let l = layer(shape, &ring, &mut rng);
        let (x, x0, x1) = shares(&shape.input_shape(batch), &ring, &mut rng);
        let (g, g0, g1) = shares(&shape.output_shape(batch), &ring, &mut rng);
        let peer = l.peer_view();
        let dp = DpConfig::disabled();
        let (a, b) = run_both(&mut mo, &mut dataowner, |p| {
            let (l, x, g) = if p.is_mo() { (&l, &x0, &g0) } else { (&peer, &x1, &g1) };
            let dx = linear_backward_input(p, l, g).unwrap();
            let dw = grad_weight(p, l, x, g, &dp).unwrap();
            let db = reveal_grad_bias(p, l, g, &dp).unwrap();
            (dx, dw, db)
        });
        let m = ring.mask();
        let w = l.weight.as_ref().unwrap();
        let dx = reconstruct(&a.0, &b.0).unwrap();
        assert_eq!(dx.data, direct::apply(OpKind::BackwardInput, &shape, batch, &w.data, &g.data, m));
        let dw = a.1.unwrap();
        let full = direct::apply(OpKind::GradWeight, &shape, batch, &g.data, &x.data, m);
        let shifted: Vec<u64> = full.iter().map(|&v| ring.arith_shift(v, ring.frac_bits)).collect();
        assert_eq!(dw.data, shifted);
        assert_eq!(dw.scale, ring.frac_bits);
        assert!(b.1.is_none() && b.2.is_none());
        assert_eq!(a.2.unwrap().data, direct::bias_grad(&g.data, &shape, batch, m));
    }

    #[test]
    fn dense_backward_and_gradients() {
        backward_and_grads(LinearShape::Dense { inputs: 8, outputs: 4 }, 16);
    }

    #[test]
    fn conv_backward_and_gradients() {
        backward_and_grads(
            LinearShape::Conv(ConvShape {
                c_in: 2,
                c_out: 3,
                kernel: 5,
                stride: 2,
                padding: 2,
                size: 12,
            }),
            4,
        );
    }

    #[test]
    fn outer_product_gradient() {
        let ring = RingParams::small();
        let (mut mo, mut dataowner) = small();
        let shape = LinearShape::Dense { inputs: 2, outputs: 1 };
        let l = LinearLayer {
            id: 0,
            shape,
            weight: Some(RingTensor::zeros(&[1, 2], 12, 41)),
            bias: Some(RingTensor::zeros(&[1], 24, 41)),
        };
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let (x0, x1) = share(&RingTensor::encode(&ring, &[1, 2], &[1.0, 2.0], 12).unwrap(), &mut rng);
        let (g0, g1) = share(&RingTensor::encode(&ring, &[1, 1], &[3.0], 12).unwrap(), &mut rng);
        let peer = l.peer_view();
        let (dw, _) = run_both(&mut mo, &mut dataowner, |p| {
            let (l, x, g) = if p.is_mo() { (&l, &x0, &g0) } else { (&peer, &x1, &g1) };
            grad_weight(p, l, x, g, &DpConfig::disabled()).unwrap()
        });
        assert_eq!(dw.unwrap().decode(), vec![3.0, 6.0]);
    }

    #[test]
    fn masked_messages_differ_between_seeds() {
        let shape = LinearShape::Dense { inputs: 4, outputs: 3 };
        let run = |seed: u64| {
            let (mut mo, mut dataowner) = he_pair(RingParams::small(), BfvParams::small(), seed);
            dataowner.session.record_transcript();
            let ring = mo.ring;
            let mut rng = ChaCha20Rng::seed_from_u64(5);
            let l = layer(shape, &ring, &mut rng);
            let (_, x0, x1) = shares(&[2, 4], &ring, &mut rng);
            let peer = l.peer_view();
            run_both(&mut mo, &mut dataowner, |p| {
                let (l, x) = if p.is_mo() { (&l, &x0) } else { (&peer, &x1) };
                linear_forward(p, l, x).unwrap()
            });
            dataowner.session.transcript().to_vec()
        };
        let (a, b) = (run(1), run(2));
        assert_eq!(a.len(), b.len());
        assert!(!a.is_empty());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0, msg::FWD_MASKED_CT);
            assert_ne!(x.1, y.1);
        }
    }

    #[test]
    fn layer_id_mismatch_is_desync() {
        let (mut mo, mut dataowner) = small();
        let ring = mo.ring;
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let shape = LinearShape::Dense { inputs: 2, outputs: 2 };
        let l = layer(shape, &ring, &mut rng);
        let (_, x0, _) = shares(&[1, 2], &ring, &mut rng);
        let (a, _) = run_both(&mut mo, &mut dataowner, |p| {
            if p.is_mo() {
                linear_forward(p, &l, &x0).map(|_| ())
            } else {
                p.session.set_tag(4);
                p.session.send(msg::FWD_INPUT_CT, vec![0; 8])
            }
        });
        assert!(matches!(a, Err(Error::Desync(_))));
    }

    #[test]
    fn dp_noise_statistics() {
        let dp = DpConfig::new(0.01, 8.0, 64).unwrap();
        let e = sample_dp_noise(1_000_000, &dp, &mut ChaCha20Rng::seed_from_u64(1));
        let n = e.len() as f64;
        let mean = e.iter().sum::<f64>() / n;
        let sd = (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd / 0.01 - 1.0).abs() < 0.05, "std {sd}");
        assert!(mean.abs() < 4.0 * 0.01 / n.sqrt(), "mean {mean}");
        assert!(sample_dp_noise(10, &DpConfig::new(0.0, 8.0, 64).unwrap(), &mut ChaCha20Rng::seed_from_u64(1))
            .iter()
            .all(|&v| v == 0.0));
    }
}
