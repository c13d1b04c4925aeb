//! Straightforward loop implementations of the layer maps over Z_{2^ell}.
//! The reference engine uses these; they share no code with the packed
//! lowering in `ops`.

use rayon::prelude::*;

use super::ops::{ConvShape, LinearShape, OpKind};

/// Evaluate one map directly. Operand order follows [`OpKind`].
pub fn apply(op: OpKind, shape: &LinearShape, batch: usize, left: &[u64], right: &[u64], mask: u64) -> Vec<u64> {
    match (shape, op) {
        (LinearShape::Dense { inputs, outputs }, OpKind::Forward) => {
            dense_forward(left, right, batch, *inputs, *outputs, mask)
        }
        (LinearShape::Dense { inputs, outputs }, OpKind::BackwardInput) => {
            dense_backward_input(left, right, batch, *inputs, *outputs, mask)
        }
        (LinearShape::Dense { inputs, outputs }, OpKind::GradWeight) => {
            dense_grad_weight(left, right, batch, *inputs, *outputs, mask)
        }
        (LinearShape::Conv(c), OpKind::Forward) => conv_forward(left, right, batch, c, mask),
        (LinearShape::Conv(c), OpKind::BackwardInput) => conv_backward_input(left, right, batch, c, mask),
        (LinearShape::Conv(c), OpKind::GradWeight) => conv_grad_weight(left, right, batch, c, mask),
    }
}

/// `Y[b][o] = sum_i W[o][i] X[b][i]`
pub fn dense_forward(w: &[u64], x: &[u64], batch: usize, inputs: usize, outputs: usize, mask: u64) -> Vec<u64> {
    let mut y = vec![0u64; batch * outputs];
    y.par_chunks_mut(outputs).enumerate().for_each(|(b, yr)| {
        let xr = &x[b * inputs..(b + 1) * inputs];
        for (o, out) in yr.iter_mut().enumerate() {
            let wr = &w[o * inputs..(o + 1) * inputs];
            let s = wr.iter().zip(xr).fold(0u64, |a, (p, q)| a.wrapping_add(p.wrapping_mul(*q)));
            *out = s & mask;
        }
    });
    y
}

/// `dX[b][i] = sum_o W[o][i] dY[b][o]`
pub fn dense_backward_input(w: &[u64], gy: &[u64], batch: usize, inputs: usize, outputs: usize, mask: u64) -> Vec<u64> {
    let mut dx = vec![0u64; batch * inputs];
    dx.par_chunks_mut(inputs).enumerate().for_each(|(b, dr)| {
        for o in 0..outputs {
            let g = gy[b * outputs + o];
            for (d, &wv) in dr.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                *d = d.wrapping_add(g.wrapping_mul(wv));
            }
        }
        dr.iter_mut().for_each(|v| *v &= mask);
    });
    dx
}

/// `dW[o][i] = sum_b dY[b][o] X[b][i]`
pub fn dense_grad_weight(gy: &[u64], x: &[u64], batch: usize, inputs: usize, outputs: usize, mask: u64) -> Vec<u64> {
    let mut dw = vec![0u64; outputs * inputs];
    dw.par_chunks_mut(inputs).enumerate().for_each(|(o, dr)| {
        for b in 0..batch {
            let g = gy[b * outputs + o];
            for (d, &xv) in dr.iter_mut().zip(&x[b * inputs..(b + 1) * inputs]) {
                *d = d.wrapping_add(g.wrapping_mul(xv));
            }
        }
        dr.iter_mut().for_each(|v| *v &= mask);
    });
    dw
}

/// Outputs `lo..hi` along one axis whose window offset `k` lands inside
/// the unpadded image: `0 <= o*stride + k - padding < size`.
#[inline]
fn valid_range(c: &ConvShape, k: usize) -> (usize, usize) {
    let lo = c.padding.saturating_sub(k).div_ceil(c.stride);
    let hi = (c.size + c.padding).saturating_sub(k).div_ceil(c.stride).min(c.out_size());
    (lo, hi.max(lo))
}

pub fn conv_forward(w: &[u64], x: &[u64], batch: usize, c: &ConvShape, mask: u64) -> Vec<u64> {
    let (s, n, o) = (c.kernel, c.size, c.out_size());
    let mut y = vec![0u64; batch * c.c_out * o * o];
    y.par_chunks_mut(c.c_out * o * o).enumerate().for_each(|(b, yb)| {
        for co in 0..c.c_out {
            let plane = &mut yb[co * o * o..(co + 1) * o * o];
            for ci in 0..c.c_in {
                let img = &x[(b * c.c_in + ci) * n * n..(b * c.c_in + ci + 1) * n * n];
                for ky in 0..s {
                    let (y0, y1) = valid_range(c, ky);
                    for kx in 0..s {
                        let wv = w[((co * c.c_in + ci) * s + ky) * s + kx];
                        let (x0, x1) = valid_range(c, kx);
                        for oy in y0..y1 {
                            let iy = oy * c.stride + ky - c.padding;
                            for ox in x0..x1 {
                                let ix = ox * c.stride + kx - c.padding;
                                let d = &mut plane[oy * o + ox];
                                *d = d.wrapping_add(wv.wrapping_mul(img[iy * n + ix]));
                            }
                        }
                    }
                }
            }
        }
        yb.iter_mut().for_each(|v| *v &= mask);
    });
    y
}

pub fn conv_backward_input(w: &[u64], gy: &[u64], batch: usize, c: &ConvShape, mask: u64) -> Vec<u64> {
    let (s, n, o) = (c.kernel, c.size, c.out_size());
    let mut dx = vec![0u64; batch * c.c_in * n * n];
    dx.par_chunks_mut(c.c_in * n * n).enumerate().for_each(|(b, db)| {
        for co in 0..c.c_out {
            let g = &gy[(b * c.c_out + co) * o * o..(b * c.c_out + co + 1) * o * o];
            for ci in 0..c.c_in {
                let img = &mut db[ci * n * n..(ci + 1) * n * n];
                for ky in 0..s {
                    let (y0, y1) = valid_range(c, ky);
                    for kx in 0..s {
                        let wv = w[((co * c.c_in + ci) * s + ky) * s + kx];
                        let (x0, x1) = valid_range(c, kx);
                        for oy in y0..y1 {
                            let iy = oy * c.stride + ky - c.padding;
                            for ox in x0..x1 {
                                let ix = ox * c.stride + kx - c.padding;
                                let d = &mut img[iy * n + ix];
                                *d = d.wrapping_add(wv.wrapping_mul(g[oy * o + ox]));
                            }
                        }
                    }
                }
            }
        }
        db.iter_mut().for_each(|v| *v &= mask);
    });
    dx
}

pub fn conv_grad_weight(gy: &[u64], x: &[u64], batch: usize, c: &ConvShape, mask: u64) -> Vec<u64> {
    let (s, n, o) = (c.kernel, c.size, c.out_size());
    let mut dw = vec![0u64; c.c_out * c.c_in * s * s];
    dw.par_chunks_mut(c.c_in * s * s).enumerate().for_each(|(co, dr)| {
        for b in 0..batch {
            let g = &gy[(b * c.c_out + co) * o * o..(b * c.c_out + co + 1) * o * o];
            for ci in 0..c.c_in {
                let img = &x[(b * c.c_in + ci) * n * n..(b * c.c_in + ci + 1) * n * n];
                for ky in 0..s {
                    let (y0, y1) = valid_range(c, ky);
                    for kx in 0..s {
                        let (x0, x1) = valid_range(c, kx);
                        let mut acc = 0u64;
                        for oy in y0..y1 {
                            let iy = oy * c.stride + ky - c.padding;
                            for ox in x0..x1 {
                                let ix = ox * c.stride + kx - c.padding;
                                acc = acc.wrapping_add(g[oy * o + ox].wrapping_mul(img[iy * n + ix]));
                            }
                        }
                        let d = &mut dr[(ci * s + ky) * s + kx];
                        *d = d.wrapping_add(acc);
                    }
                }
            }
        }
        dr.iter_mut().for_each(|v| *v &= mask);
    });
    dw
}

/// Per-output-channel sums of a `(B, outputs)` or `(B, C, H, W)` gradient.
pub fn bias_grad(gy: &[u64], shape: &LinearShape, batch: usize, mask: u64) -> Vec<u64> {
    let outputs = shape.outputs();
    let per = gy.len() / (batch * outputs);
    let mut db = vec![0u64; outputs];
    for b in 0..batch {
        for o in 0..outputs {
            let start = (b * outputs + o) * per;
            for &g in &gy[start..start + per] {
                db[o] = db[o].wrapping_add(g);
            }
        }
    }
    db.iter_mut().for_each(|v| *v &= mask);
    db
}

/// Add a per-output-channel bias to a layer output in place.
pub fn add_bias(y: &mut [u64], bias: &[u64], batch: usize, mask: u64) {
    let outputs = bias.len();
    let per = y.len() / (batch * outputs);
    for (idx, v) in y.iter_mut().enumerate() {
        *v = v.wrapping_add(bias[(idx / per) % outputs]) & mask;
    }
}
