//! Coefficient packing for stride-1 valid 2-D cross-correlation.
//!
//! Input `v` has shape `(batch, c_in, h, w)`, the filter `(c_out, c_in, s, s)`
//! and the output `(batch, c_out, h-s+1, w-s+1)`. With `hw = h*w` and
//! `O = (c_in-1)*hw + (s-1)*w + s-1`:
//!
//! * `v[b][c][i][j]`  -> `b*c_out*c_in*hw + c*hw + i*w + j`
//! * `W[o][c][i][j]`  -> `O + o*c_in*hw - c*hw - i*w - j`
//! * `y[b][o][i][j]` <-  `b*c_out*c_in*hw + O + o*c_in*hw + i*w + j`

use super::matmul::Operand;
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 1 - self.kernel
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn coefficients(&self) -> usize {
        self.batch * self.c_out * self.c_in * self.plane()
    }

    fn offset(&self) -> usize {
        (self.c_in - 1) * self.plane() + (self.kernel - 1) * self.width + self.kernel - 1
    }

    pub fn check(&self, degree: usize) -> Result<()> {
        ensure!(
            self.batch > 0 && self.c_in > 0 && self.c_out > 0 && self.kernel > 0,
            Error::Shape(format!("empty geometry {self:?}"))
        );
        ensure!(
            self.kernel <= self.height && self.kernel <= self.width,
            Error::Shape(format!("kernel {} larger than image", self.kernel))
        );
        // a single channel plane must fit before any block split helps
        ensure!(
            self.plane() <= degree && self.coefficients() <= degree,
            Error::GeometryOverflow {
                needed: self.coefficients(),
                degree
            }
        );
        Ok(())
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.c_in * self.plane()
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.c_out * self.out_height() * self.out_width()
    }
}

pub fn encode(which: Operand, data: &[u64], g: &ConvGeometry, degree: usize) -> Result<Vec<u64>> {
    g.check(degree)?;
    let (hw, w, s) = (g.plane(), g.width, g.kernel);
    let mut coeffs = vec![0u64; degree];
    match which {
        Operand::Input => {
            ensure!(
                data.len() == g.input_len(),
                Error::Shape(format!("input of {} entries for {g:?}", data.len()))
            );
            for b in 0..g.batch {
                for c in 0..g.c_in {
                    let src = &data[(b * g.c_in + c) * hw..(b * g.c_in + c + 1) * hw];
                    let base = b * g.c_out * g.c_in * hw + c * hw;
                    coeffs[base..base + hw].copy_from_slice(src);
                }
            }
        }
        Operand::Weight => {
            ensure!(
                data.len() == g.weight_len(),
                Error::Shape(format!("filter of {} entries for {g:?}", data.len()))
            );
            let o_off = g.offset();
            for o in 0..g.c_out {
                for c in 0..g.c_in {
                    for i in 0..s {
                        for j in 0..s {
                            let idx = o_off + o * g.c_in * hw - c * hw - i * w - j;
                            coeffs[idx] = data[((o * g.c_in + c) * s + i) * s + j];
                        }
                    }
                }
            }
        }
    }
    Ok(coeffs)
}

pub fn decode(coeffs: &[u64], g: &ConvGeometry) -> Result<Vec<u64>> {
    ensure!(
        g.coefficients() <= coeffs.len(),
        Error::GeometryOverflow {
            needed: g.coefficients(),
            degree: coeffs.len()
        }
    );
    let (hw, w) = (g.plane(), g.width);
    let (oh, ow) = (g.out_height(), g.out_width());
    let o_off = g.offset();
    let mut out = vec![0u64; g.output_len()];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let base = b * g.c_out * g.c_in * hw + o_off + o * g.c_in * hw;
            for i in 0..oh {
                for j in 0..ow {
                    out[((b * g.c_out + o) * oh + i) * ow + j] = coeffs[base + i * w + j];
                }
            }
        }
    }
    Ok(out)
}

/// Direct cross-correlation over Z_{2^64}, reduced by `mask`.
pub fn conv_raw(filter: &[u64], input: &[u64], g: &ConvGeometry, mask: u64) -> Vec<u64> {
    let (h, w, s) = (g.height, g.width, g.kernel);
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut out = vec![0u64; g.output_len()];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let dst = &mut out[(b * g.c_out + o) * oh * ow..(b * g.c_out + o + 1) * oh * ow];
            for c in 0..g.c_in {
                let img = &input[(b * g.c_in + c) * h * w..(b * g.c_in + c + 1) * h * w];
                for ki in 0..s {
                    for kj in 0..s {
                        let f = filter[((o * g.c_in + c) * s + ki) * s + kj];
                        if f == 0 {
                            continue;
                        }
                        for i in 0..oh {
                            let row = &img[(i + ki) * w + kj..(i + ki) * w + kj + ow];
                            for (d, &x) in dst[i * ow..(i + 1) * ow].iter_mut().zip(row) {
                                *d = d.wrapping_add(f.wrapping_mul(x));
                            }
                        }
                    }
                }
            }
        }
    }
    for v in out.iter_mut() {
        *v &= mask;
    }
    out
}
