//! The bilinear maps of a linear layer and how each one is lowered onto a
//! packing kernel.
//!
//! Every map is `F(left, right) = finish(K(prepare_left(left), prepare_right(right)))`
//! where `K` is a matmul or stride-1 valid-convolution kernel, `left` fills
//! the kernel's weight slot and `right` its input slot. The prepare and
//! finish steps are linear (transposes, padding, dilation, cropping), so
//! each party can apply them to its own share.

use crate::encoding::{ConvGeometry, Kernel, MatmulGeometry, Operand};
use crate::error::{ensure, Error, Result};
use crate::ring::transpose_raw;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Square input images of this side length.
    pub size: usize,
}

impl ConvShape {
    pub fn padded(&self) -> usize {
        self.size + 2 * self.padding
    }

    pub fn out_size(&self) -> usize {
        (self.padded() - self.kernel) / self.stride + 1
    }

    /// Side of the output gradient after spreading it back to stride 1.
    fn dilated(&self) -> usize {
        (self.out_size() - 1) * self.stride + 1
    }

    fn check(&self) -> Result<()> {
        ensure!(
            self.c_in > 0 && self.c_out > 0 && self.kernel > 0 && self.stride > 0,
            Error::Shape(format!("degenerate convolution {self:?}"))
        );
        ensure!(
            self.kernel <= self.padded(),
            Error::Shape(format!("kernel {} exceeds padded input {}", self.kernel, self.padded()))
        );
        Ok(())
    }
}

/// Layer geometry independent of the batch size. Activations are
/// `(B, inputs)` for dense layers and `(B, C, H, W)` for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LinearShape {
    Dense { inputs: usize, outputs: usize },
    Conv(ConvShape),
}

impl LinearShape {
    pub fn check(&self) -> Result<()> {
        match self {
            LinearShape::Dense { inputs, outputs } => {
                ensure!(
                    *inputs > 0 && *outputs > 0,
                    Error::Shape(format!("degenerate dense layer {self:?}"))
                );
                Ok(())
            }
            LinearShape::Conv(c) => c.check(),
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self {
            LinearShape::Dense { inputs, outputs } => vec![*outputs, *inputs],
            LinearShape::Conv(c) => vec![c.c_out, c.c_in, c.kernel, c.kernel],
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            LinearShape::Dense { outputs, .. } => *outputs,
            LinearShape::Conv(c) => c.c_out,
        }
    }

    pub fn fan_in(&self) -> usize {
        match self {
            LinearShape::Dense { inputs, .. } => *inputs,
            LinearShape::Conv(c) => c.c_in * c.kernel * c.kernel,
        }
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        match self {
            LinearShape::Dense { inputs, .. } => vec![batch, *inputs],
            LinearShape::Conv(c) => vec![batch, c.c_in, c.size, c.size],
        }
    }

    pub fn output_shape(&self, batch: usize) -> Vec<usize> {
        match self {
            LinearShape::Dense { outputs, .. } => vec![batch, *outputs],
            LinearShape::Conv(c) => vec![batch, c.c_out, c.out_size(), c.out_size()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    /// `Y = F(W, X)`
    Forward,
    /// `dX = F(W, dY)`
    BackwardInput,
    /// `dW = F(dY, X)`
    GradWeight,
}

impl OpKind {
    pub fn tag(self) -> u8 {
        match self {
            OpKind::Forward => 0,
            OpKind::BackwardInput => 1,
            OpKind::GradWeight => 2,
        }
    }
}

/// One bilinear map of a layer at a fixed batch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Bilinear {
    pub op: OpKind,
    pub shape: LinearShape,
    pub batch: usize,
    pub kernel: Kernel,
}

impl Bilinear {
    pub fn new(op: OpKind, shape: LinearShape, batch: usize) -> Result<Self> {
        shape.check()?;
        ensure!(batch > 0, Error::Shape("empty batch".into()));
        let kernel = match (shape, op) {
            (LinearShape::Dense { inputs, outputs }, OpKind::Forward) => {
                Kernel::Matmul(MatmulGeometry::new(inputs, outputs, batch))
            }
            (LinearShape::Dense { inputs, outputs }, OpKind::BackwardInput) => {
                Kernel::Matmul(MatmulGeometry::new(outputs, inputs, batch))
            }
            (LinearShape::Dense { inputs, outputs }, OpKind::GradWeight) => {
                Kernel::Matmul(MatmulGeometry::new(batch, outputs, inputs))
            }
            (LinearShape::Conv(c), OpKind::Forward) => Kernel::Conv(ConvGeometry {
                batch,
                c_in: c.c_in,
                c_out: c.c_out,
                height: c.padded(),
                width: c.padded(),
                kernel: c.kernel,
            }),
            (LinearShape::Conv(c), OpKind::BackwardInput) => {
                let e = c.dilated() + 2 * (c.kernel - 1);
                Kernel::Conv(ConvGeometry {
                    batch,
                    c_in: c.c_out,
                    c_out: c.c_in,
                    height: e,
                    width: e,
                    kernel: c.kernel,
                })
            }
            (LinearShape::Conv(c), OpKind::GradWeight) => Kernel::Conv(ConvGeometry {
                batch: c.c_in,
                c_in: batch,
                c_out: c.c_out,
                height: c.padded(),
                width: c.padded(),
                kernel: c.dilated(),
            }),
        };
        Ok(Bilinear {
            op,
            shape,
            batch,
            kernel,
        })
    }

    /// Logical shape of the operand in `slot`.
    pub fn operand_shape(&self, slot: Operand) -> Vec<usize> {
        let b = self.batch;
        match (self.op, slot) {
            (OpKind::Forward, Operand::Weight) | (OpKind::BackwardInput, Operand::Weight) => self.shape.weight_shape(),
            (OpKind::Forward, Operand::Input) | (OpKind::GradWeight, Operand::Input) => self.shape.input_shape(b),
            (OpKind::BackwardInput, Operand::Input) | (OpKind::GradWeight, Operand::Weight) => {
                self.shape.output_shape(b)
            }
        }
    }

    pub fn result_shape(&self) -> Vec<usize> {
        match self.op {
            OpKind::Forward => self.shape.output_shape(self.batch),
            OpKind::BackwardInput => self.shape.input_shape(self.batch),
            OpKind::GradWeight => self.shape.weight_shape(),
        }
    }

    pub fn operand_len(&self, slot: Operand) -> usize {
        self.operand_shape(slot).iter().product()
    }

    pub fn result_len(&self) -> usize {
        self.result_shape().iter().product()
    }

    fn kernel_output_len(&self) -> usize {
        self.kernel.output_shape().iter().product()
    }

    /// Rearrange a logical operand into the kernel's layout for `slot`.
    pub fn prepare(&self, slot: Operand, data: &[u64]) -> Result<Vec<u64>> {
        ensure!(
            data.len() == self.operand_len(slot),
            Error::Shape(format!(
                "{:?} operand of {} entries, expected {:?}",
                slot,
                data.len(),
                self.operand_shape(slot)
            ))
        );
        let b = self.batch;
        Ok(match (self.shape, self.op, slot) {
            (LinearShape::Dense { .. }, OpKind::Forward, Operand::Weight) => data.to_vec(),
            (LinearShape::Dense { inputs, .. }, OpKind::Forward, Operand::Input) => transpose_raw(data, b, inputs),
            (LinearShape::Dense { inputs, outputs }, OpKind::BackwardInput, Operand::Weight) => {
                transpose_raw(data, outputs, inputs)
            }
            (LinearShape::Dense { outputs, .. }, OpKind::BackwardInput, Operand::Input) => {
                transpose_raw(data, b, outputs)
            }
            (LinearShape::Dense { outputs, .. }, OpKind::GradWeight, Operand::Weight) => {
                transpose_raw(data, b, outputs)
            }
            (LinearShape::Dense { .. }, OpKind::GradWeight, Operand::Input) => data.to_vec(),

            (LinearShape::Conv(_), OpKind::Forward, Operand::Weight) => data.to_vec(),
            (LinearShape::Conv(c), OpKind::Forward, Operand::Input) => pad(data, b * c.c_in, c.size, c.padding),
            (LinearShape::Conv(c), OpKind::BackwardInput, Operand::Weight) => {
                // swap channel axes and rotate each filter by 180 degrees
                let s = c.kernel;
                let mut out = vec![0u64; data.len()];
                for o in 0..c.c_out {
                    for ci in 0..c.c_in {
                        for ky in 0..s {
                            for kx in 0..s {
                                out[((ci * c.c_out + o) * s + (s - 1 - ky)) * s + (s - 1 - kx)] =
                                    data[((o * c.c_in + ci) * s + ky) * s + kx];
                            }
                        }
                    }
                }
                out
            }
            (LinearShape::Conv(c), OpKind::BackwardInput, Operand::Input) => {
                let spread = dilate(data, b * c.c_out, c.out_size(), c.stride);
                pad(&spread, b * c.c_out, c.dilated(), c.kernel - 1)
            }
            (LinearShape::Conv(c), OpKind::GradWeight, Operand::Weight) => {
                // dY (B, C_out, o, o) -> filters (C_out, B, d, d)
                let o = c.out_size();
                let swapped = swap_leading(data, b, c.c_out, o * o);
                dilate(&swapped, c.c_out * b, o, c.stride)
            }
            (LinearShape::Conv(c), OpKind::GradWeight, Operand::Input) => {
                // X (B, C_in, H, W) padded -> (C_in, B, Hp, Wp)
                let padded = pad(data, b * c.c_in, c.size, c.padding);
                swap_leading(&padded, b, c.c_in, c.padded() * c.padded())
            }
        })
    }

    /// Map a kernel output (or a share of one) to the logical result layout.
    pub fn finish(&self, out: &[u64]) -> Result<Vec<u64>> {
        ensure!(
            out.len() == self.kernel_output_len(),
            Error::Shape(format!("kernel output of {} entries", out.len()))
        );
        let b = self.batch;
        Ok(match (self.shape, self.op) {
            (LinearShape::Dense { outputs, .. }, OpKind::Forward) => transpose_raw(out, outputs, b),
            (LinearShape::Dense { inputs, .. }, OpKind::BackwardInput) => transpose_raw(out, inputs, b),
            (LinearShape::Dense { .. }, OpKind::GradWeight) => out.to_vec(),
            (LinearShape::Conv(c), OpKind::Forward) => {
                let full = c.padded() - c.kernel + 1;
                let o = c.out_size();
                let mut y = vec![0u64; b * c.c_out * o * o];
                for plane in 0..b * c.c_out {
                    for i in 0..o {
                        for j in 0..o {
                            y[(plane * o + i) * o + j] = out[(plane * full + i * c.stride) * full + j * c.stride];
                        }
                    }
                }
                y
            }
            (LinearShape::Conv(c), OpKind::BackwardInput) => {
                // the product covers the padded input up to row `reach`; crop the padding
                let reach = c.dilated() + c.kernel - 1;
                let (h, p) = (c.size, c.padding);
                let mut dx = vec![0u64; b * c.c_in * h * h];
                for plane in 0..b * c.c_in {
                    for i in 0..h {
                        if i + p >= reach {
                            break;
                        }
                        for j in 0..h {
                            if j + p >= reach {
                                break;
                            }
                            dx[(plane * h + i) * h + j] = out[(plane * reach + i + p) * reach + j + p];
                        }
                    }
                }
                dx
            }
            (LinearShape::Conv(c), OpKind::GradWeight) => {
                // kernel output (C_in, C_out, r, r) -> dW (C_out, C_in, s, s)
                let r = c.padded() - c.dilated() + 1;
                let s = c.kernel;
                let mut dw = vec![0u64; c.c_out * c.c_in * s * s];
                for ci in 0..c.c_in {
                    for o in 0..c.c_out {
                        for ky in 0..s {
                            for kx in 0..s {
                                dw[((o * c.c_in + ci) * s + ky) * s + kx] =
                                    out[((ci * c.c_out + o) * r + ky) * r + kx];
                            }
                        }
                    }
                }
                dw
            }
        })
    }

    /// Evaluate the map in the clear, reduced by `mask`.
    pub fn eval(&self, left: &[u64], right: &[u64], mask: u64) -> Result<Vec<u64>> {
        let l = self.prepare(Operand::Weight, left)?;
        let r = self.prepare(Operand::Input, right)?;
        self.finish(&self.kernel.eval(&l, &r, mask))
    }
}

/// Zero-pad `planes` square images of side `size` by `p` on every side.
fn pad(data: &[u64], planes: usize, size: usize, p: usize) -> Vec<u64> {
    if p == 0 {
        return data.to_vec();
    }
    let side = size + 2 * p;
    let mut out = vec![0u64; planes * side * side];
    for plane in 0..planes {
        for i in 0..size {
            let src = (plane * size + i) * size;
            let dst = (plane * side + i + p) * side + p;
            out[dst..dst + size].copy_from_slice(&data[src..src + size]);
        }
    }
    out
}

/// Spread square images so that consecutive entries sit `stride` apart.
fn dilate(data: &[u64], planes: usize, size: usize, stride: usize) -> Vec<u64> {
    if stride == 1 {
        return data.to_vec();
    }
    let side = (size - 1) * stride + 1;
    let mut out = vec![0u64; planes * side * side];
    for plane in 0..planes {
        for i in 0..size {
            for j in 0..size {
                out[(plane * side + i * stride) * side + j * stride] = data[(plane * size + i) * size + j];
            }
        }
    }
    out
}

/// `(a, b, rest)` -> `(b, a, rest)`.
fn swap_leading(data: &[u64], a: usize, b: usize, rest: usize) -> Vec<u64> {
    let mut out = vec![0u64; data.len()];
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * rest;
            let dst = (j * a + i) * rest;
            out[dst..dst + rest].copy_from_slice(&data[src..src + rest]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::direct;
    use super::*;
    use crate::ring::mask;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random(len: usize, rng: &mut impl Rng) -> Vec<u64> {
        (0..len).map(|_| rng.random::<u64>() & mask(59)).collect()
    }

    fn check_all(shape: LinearShape, batch: usize, seed: u64) {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        for op in [OpKind::Forward, OpKind::BackwardInput, OpKind::GradWeight] {
            let bil = Bilinear::new(op, shape, batch).unwrap();
            let l = random(bil.operand_len(Operand::Weight), &mut rng);
            let r = random(bil.operand_len(Operand::Input), &mut rng);
            let got = bil.eval(&l, &r, mask(59)).unwrap();
            assert_eq!(got.len(), bil.result_len());
            assert_eq!(got, direct::apply(op, &shape, batch, &l, &r, mask(59)), "{op:?} {shape:?}");
        }
    }

    #[test]
    fn dense_transpose_example() {
        let shape = LinearShape::Dense { inputs: 3, outputs: 2 };
        let bil = Bilinear::new(OpKind::BackwardInput, shape, 1).unwrap();
        assert_eq!(bil.eval(&[1, 2, 3, 4, 5, 6], &[1, 0], mask(59)).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn mnist_conv_layer() {
        let c = ConvShape {
            c_in: 1,
            c_out: 5,
            kernel: 5,
            stride: 2,
            padding: 2,
            size: 28,
        };
        assert_eq!(c.out_size(), 14);
        check_all(LinearShape::Conv(c), 2, 1);
    }

    proptest! {
        #[test]
        fn dense_lowering_matches_direct(inputs in 1usize..9, outputs in 1usize..9, batch in 1usize..5, seed in any::<u64>()) {
            check_all(LinearShape::Dense { inputs, outputs }, batch, seed);
        }

        #[test]
        fn conv_lowering_matches_direct(
            c_in in 1usize..3, c_out in 1usize..3, kernel in 1usize..4, stride in 1usize..3,
            padding in 0usize..3, size in 3usize..8, batch in 1usize..3, seed in any::<u64>()
        ) {
            let c = ConvShape { c_in, c_out, kernel, stride, padding, size };
            prop_assume!(kernel <= c.padded());
            check_all(LinearShape::Conv(c), batch, seed);
        }
    }
}
