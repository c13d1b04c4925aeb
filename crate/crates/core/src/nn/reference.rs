//! Cleartext fixed-point engine: the same ring arithmetic, encodings and
//! truncation points as the two-party protocol, with exact shifts and no
//! cryptography.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{ensure, Error, Result};
use crate::linear::{add_raw, direct, encoded_noise, DpConfig, LinearLayer, OpKind};
use crate::ring::{RingParams, RingTensor};

use super::engine::{forward, Engine};
use super::loss::argmax_rows;
use super::model::Network;

pub struct Reference {
    pub ring: RingParams,
    pub dp: DpConfig,
    rng: ChaCha20Rng,
}

impl Reference {
    pub fn new(ring: RingParams, dp: DpConfig, seed: u64) -> Self {
        Reference {
            ring,
            dp,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    fn params(layer: &LinearLayer) -> Result<(&RingTensor, &RingTensor)> {
        match (&layer.weight, &layer.bias) {
            (Some(w), Some(b)) => Ok((w, b)),
            _ => Err(Error::Config(format!("layer {} has no parameters", layer.id))),
        }
    }

    /// Floor division by `2^bits` at an unchanged scale.
    fn shift(&self, x: &RingTensor, bits: u32) -> RingTensor {
        x.arith_shift(bits).with_scale(x.scale)
    }
}

fn window_sum(x: &RingTensor) -> Result<RingTensor> {
    let s = &x.shape;
    ensure!(
        s.len() == 4 && s[2].is_multiple_of(2) && s[3].is_multiple_of(2),
        Error::Shape(format!("2x2 pooling of {s:?}"))
    );
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0u64; s[0] * s[1] * oh * ow];
    for plane in 0..s[0] * s[1] {
        for i in 0..oh {
            for j in 0..ow {
                let base = plane * h * w + 2 * i * w + 2 * j;
                let v = &x.data;
                out[plane * oh * ow + i * ow + j] = v[base]
                    .wrapping_add(v[base + 1])
                    .wrapping_add(v[base + w])
                    .wrapping_add(v[base + w + 1])
                    & x.mask();
            }
        }
    }
    RingTensor::from_raw(&[s[0], s[1], oh, ow], out, x.scale, x.ell)
}

impl Engine for Reference {
    type T = RingTensor;
    type Bits = Vec<u8>;

    fn ring(&self) -> RingParams {
        self.ring
    }

    fn enter(&mut self, _index: usize) {}

    fn input(&mut self, x: Option<&RingTensor>, _shape: &[usize]) -> Result<RingTensor> {
        x.cloned().ok_or_else(|| Error::Config("reference engine needs the input".into()))
    }

    fn linear_forward(&mut self, layer: &LinearLayer, x: &RingTensor) -> Result<RingTensor> {
        let (w, b) = Self::params(layer)?;
        let batch = x.shape[0];
        let mask = self.ring.mask();
        let mut y = direct::apply(OpKind::Forward, &layer.shape, batch, &w.data, &x.data, mask);
        direct::add_bias(&mut y, &b.data, batch, mask);
        RingTensor::from_raw(&layer.shape.output_shape(batch), y, x.scale + self.ring.frac_bits, self.ring.ell)
    }

    fn linear_backward(&mut self, layer: &LinearLayer, gy: &RingTensor) -> Result<RingTensor> {
        let (w, _) = Self::params(layer)?;
        let batch = gy.shape[0];
        let dx = direct::apply(OpKind::BackwardInput, &layer.shape, batch, &w.data, &gy.data, self.ring.mask());
        RingTensor::from_raw(&layer.shape.input_shape(batch), dx, gy.scale + self.ring.frac_bits, self.ring.ell)
    }

    fn grad_weight(&mut self, layer: &LinearLayer, x: &RingTensor, gy: &RingTensor) -> Result<Option<RingTensor>> {
        let batch = x.shape[0];
        let mask = self.ring.mask();
        let scale = x.scale + gy.scale;
        let mut dw = direct::apply(OpKind::GradWeight, &layer.shape, batch, &gy.data, &x.data, mask);
        let e = encoded_noise(&self.ring, dw.len(), &self.dp, scale, &mut self.rng)?;
        add_raw(&mut dw, &e, mask);
        let full = RingTensor::from_raw(&layer.shape.weight_shape(), dw, scale, self.ring.ell)?;
        Ok(Some(full.arith_shift(self.ring.frac_bits)))
    }

    fn grad_bias(&mut self, layer: &LinearLayer, gy: &RingTensor) -> Result<Option<RingTensor>> {
        let mask = self.ring.mask();
        let mut db = direct::bias_grad(&gy.data, &layer.shape, gy.shape[0], mask);
        let e = encoded_noise(&self.ring, db.len(), &self.dp, gy.scale, &mut self.rng)?;
        add_raw(&mut db, &e, mask);
        Ok(Some(RingTensor::from_raw(&[db.len()], db, gy.scale, self.ring.ell)?))
    }

    fn relu(&mut self, x: &RingTensor) -> Result<(RingTensor, Vec<u8>)> {
        let bits: Vec<u8> = x.data.iter().map(|&v| (!self.ring.msb(v)) as u8).collect();
        let y = self.relu_backward(&bits, x)?;
        Ok((y, bits))
    }

    fn relu_backward(&mut self, bits: &Vec<u8>, g: &RingTensor) -> Result<RingTensor> {
        ensure!(bits.len() == g.len(), Error::Shape("sign bits do not match tensor".into()));
        let mut out = g.clone();
        for (v, &b) in out.data.iter_mut().zip(bits) {
            if b == 0 {
                *v = 0;
            }
        }
        Ok(out)
    }

    fn truncate(&mut self, x: &RingTensor, shift: u32) -> Result<RingTensor> {
        ensure!(
            x.scale >= shift,
            Error::Scale {
                expected: shift,
                found: x.scale
            }
        );
        Ok(self.shift(x, shift).with_scale(x.scale - shift))
    }

    fn avgpool(&mut self, x: &RingTensor) -> Result<RingTensor> {
        Ok(self.shift(&window_sum(x)?, 2))
    }

    fn avgpool_backward(&mut self, g: &RingTensor, input_shape: &[usize]) -> Result<RingTensor> {
        let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        ensure!(
            g.shape == [b, c, oh, ow],
            Error::Shape(format!("pool gradient {:?} for input {input_shape:?}", g.shape))
        );
        let mut out = vec![0u64; b * c * h * w];
        for plane in 0..b * c {
            for i in 0..h {
                for j in 0..w {
                    out[plane * h * w + i * w + j] = g.data[plane * oh * ow + (i / 2) * ow + j / 2];
                }
            }
        }
        let spread = RingTensor::from_raw(input_shape, out, g.scale, g.ell)?;
        Ok(self.shift(&spread, 2))
    }

    fn reveal_output(&mut self, y: &RingTensor) -> Result<Option<RingTensor>> {
        Ok(Some(y.clone()))
    }

    fn output_gradient(&mut self, g: Option<RingTensor>, _shape: &[usize], _scale: u32) -> Result<RingTensor> {
        g.ok_or_else(|| Error::Config("reference engine needs the output gradient".into()))
    }
}

/// Class predictions of the fixed-point network, evaluated in chunks.
pub fn predict(ring: &RingParams, net: &Network, images: &[f64], chunk: usize) -> Result<Vec<u8>> {
    let per: usize = net.spec.input_len();
    ensure!(
        per > 0 && images.len().is_multiple_of(per),
        Error::Shape(format!("{} input values for samples of {per}", images.len()))
    );
    let classes = net.spec.classes();
    let mut engine = Reference::new(*ring, DpConfig::disabled(), 0);
    let mut out = Vec::with_capacity(images.len() / per);
    for part in images.chunks(chunk.max(1) * per) {
        let batch = part.len() / per;
        let mut shape = vec![batch];
        shape.extend_from_slice(&net.spec.input);
        let x = RingTensor::encode(ring, &shape, part, ring.frac_bits)?;
        let (y, _) = forward(&mut engine, net, Some(&x), batch)?;
        out.extend(argmax_rows(&y.decode(), classes));
    }
    Ok(out)
}
