//! ReLU and 2x2 average pooling on shares.

use super::{drelu, select, truncate, BoolShareTensor, TruncMode};
use crate::error::{ensure, Error, Result};
use crate::party::Party;
use crate::ring::ShareTensor;

/// `relu(x)` plus the shared sign bits needed by the backward pass.
pub fn relu_forward(p: &mut Party, x: &ShareTensor) -> Result<(ShareTensor, BoolShareTensor)> {
    let d = drelu(p, x)?;
    let y = select(p, &d, x)?;
    Ok((y, d))
}

/// Gradient through ReLU using the cached sign bits; no new comparison.
pub fn relu_backward(p: &mut Party, d: &BoolShareTensor, grad: &ShareTensor) -> Result<ShareTensor> {
    select(p, d, grad)
}

fn pool_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    ensure!(
        shape.len() == 4 && shape[2].is_multiple_of(2) && shape[3].is_multiple_of(2),
        Error::Shape(format!("2x2 pooling needs (B, C, even H, even W), got {shape:?}"))
    );
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// Sum each 2x2 window locally, then divide by 4 with a 2-bit truncation.
pub fn avgpool2_forward(p: &mut Party, x: &ShareTensor, mode: TruncMode) -> Result<ShareTensor> {
    let (b, c, h, w) = pool_dims(&x.value.shape)?;
    let (oh, ow) = (h / 2, w / 2);
    let mask = p.mask();
    let src = &x.value.data;
    let mut out = vec![0u64; b * c * oh * ow];
    for plane in 0..b * c {
        for i in 0..oh {
            for j in 0..ow {
                let base = plane * h * w + 2 * i * w + 2 * j;
                let s = src[base]
                    .wrapping_add(src[base + 1])
                    .wrapping_add(src[base + w])
                    .wrapping_add(src[base + w + 1]);
                out[plane * oh * ow + i * ow + j] = s & mask;
            }
        }
    }
    let mut summed = x.clone();
    summed.value.shape = vec![b, c, oh, ow];
    summed.value.data = out;
    truncate(p, &summed, 2, mode, false)
}

/// Spread each output gradient over its window, divided by 4.
pub fn avgpool2_backward(p: &mut Party, grad: &ShareTensor, input_shape: &[usize], mode: TruncMode) -> Result<ShareTensor> {
    let (b, c, h, w) = pool_dims(input_shape)?;
    let (oh, ow) = (h / 2, w / 2);
    ensure!(
        grad.value.shape == [b, c, oh, ow],
        Error::Shape(format!("pool gradient {:?} for input {input_shape:?}", grad.value.shape))
    );
    let g = &grad.value.data;
    let mut out = vec![0u64; b * c * h * w];
    for plane in 0..b * c {
        for i in 0..h {
            for j in 0..w {
                out[plane * h * w + i * w + j] = g[plane * oh * ow + (i / 2) * ow + j / 2];
            }
        }
    }
    let mut spread = grad.clone();
    spread.value.shape = input_shape.to_vec();
    spread.value.data = out;
    truncate(p, &spread, 2, mode, false)
}
