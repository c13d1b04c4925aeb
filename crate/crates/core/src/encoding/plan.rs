//! Splitting a product that exceeds one polynomial into packed tiles.
//!
//! Both kernels have three dimensions: a contracted `inner` dimension, an
//! `out` dimension carried by the weight, and a `batch` dimension carried by
//! the input. A tiling fixes a tile size per dimension; every output tile is
//! the sum over inner tiles of one packed product, which the caller
//! accumulates homomorphically.

use std::ops::Range;

use super::conv::{self, ConvGeometry};
use super::matmul::{self, MatmulGeometry, Operand};
use crate::error::{ensure, Error, Result};

/// The bilinear map realised by one packed product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kernel {
    /// `out x inner` weight times `inner x batch` input.
    Matmul(MatmulGeometry),
    /// `(c_out, c_in, s, s)` filter over `(batch, c_in, h, w)` input.
    Conv(ConvGeometry),
}

impl Kernel {
    pub fn weight_shape(&self) -> Vec<usize> {
        match self {
            Kernel::Matmul(g) => vec![g.out, g.inner],
            Kernel::Conv(g) => vec![g.c_out, g.c_in, g.kernel, g.kernel],
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Kernel::Matmul(g) => vec![g.inner, g.batch],
            Kernel::Conv(g) => vec![g.batch, g.c_in, g.height, g.width],
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        match self {
            Kernel::Matmul(g) => vec![g.out, g.batch],
            Kernel::Conv(g) => vec![g.batch, g.c_out, g.out_height(), g.out_width()],
        }
    }

    /// (inner, out, batch) extents.
    fn dims(&self) -> [usize; 3] {
        match self {
            Kernel::Matmul(g) => [g.inner, g.out, g.batch],
            Kernel::Conv(g) => [g.c_in, g.c_out, g.batch],
        }
    }

    /// Coefficients used per unit of inner*out*batch.
    fn unit(&self) -> usize {
        match self {
            Kernel::Matmul(_) => 1,
            Kernel::Conv(g) => g.height * g.width,
        }
    }

    fn with_dims(&self, inner: usize, out: usize, batch: usize) -> Kernel {
        match self {
            Kernel::Matmul(_) => Kernel::Matmul(MatmulGeometry::new(inner, out, batch)),
            Kernel::Conv(g) => Kernel::Conv(ConvGeometry {
                batch,
                c_in: inner,
                c_out: out,
                ..*g
            }),
        }
    }

    /// Evaluate the map in the clear over Z_{2^64}, reduced by `mask`.
    pub fn eval(&self, weight: &[u64], input: &[u64], mask: u64) -> Vec<u64> {
        match self {
            Kernel::Matmul(g) => crate::ring::matmul_raw(weight, input, g.out, g.inner, g.batch, mask),
            Kernel::Conv(g) => conv::conv_raw(weight, input, g, mask),
        }
    }

    pub fn encode(&self, which: Operand, data: &[u64], degree: usize) -> Result<Vec<u64>> {
        match self {
            Kernel::Matmul(g) => matmul::encode(which, data, g, degree),
            Kernel::Conv(g) => conv::encode(which, data, g, degree),
        }
    }

    pub fn decode(&self, coeffs: &[u64]) -> Result<Vec<u64>> {
        match self {
            Kernel::Matmul(g) => matmul::decode(coeffs, g),
            Kernel::Conv(g) => conv::decode(coeffs, g),
        }
    }

    pub fn check(&self, degree: usize) -> Result<()> {
        match self {
            Kernel::Matmul(g) => g.check(degree),
            Kernel::Conv(g) => g.check(degree),
        }
    }
}

/// Which operands are sent encrypted, used to weigh the tiling cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Encrypted {
    pub weight: bool,
    pub input: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tiling {
    pub kernel: Kernel,
    pub degree: usize,
    /// tile sizes for (inner, out, batch)
    pub tile: [usize; 3],
    counts: [usize; 3],
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

fn ranges(total: usize, tile: usize) -> Vec<Range<usize>> {
    (0..ceil_div(total, tile))
        .map(|t| t * tile..((t + 1) * tile).min(total))
        .collect()
}

impl Tiling {
    /// Choose tile sizes minimising ciphertexts moved (encrypted operand
    /// tiles plus output tiles), then the number of plaintext products.
    pub fn plan(kernel: Kernel, degree: usize, enc: Encrypted) -> Result<Tiling> {
        let [ni, no, nb] = kernel.dims();
        let unit = kernel.unit();
        ensure!(
            ni > 0 && no > 0 && nb > 0,
            Error::Shape(format!("empty kernel {kernel:?}"))
        );
        ensure!(
            unit <= degree,
            Error::GeometryOverflow {
                needed: unit,
                degree
            }
        );
        let slots = degree / unit;
        let mut best: Option<((usize, usize, usize), [usize; 3])> = None;
        for bi in 1..=ni.min(slots) {
            for bo in 1..=no.min(slots / bi) {
                let bb = nb.min(slots / (bi * bo));
                if bb == 0 {
                    continue;
                }
                let (ti, to, tb) = (ceil_div(ni, bi), ceil_div(no, bo), ceil_div(nb, bb));
                let mut moved = to * tb;
                if enc.input {
                    moved += ti * tb;
                }
                if enc.weight {
                    moved += to * ti;
                }
                let mults = ti * to * tb;
                let key = (moved, mults, usize::MAX - bi);
                if best.as_ref().is_none_or(|(k, _)| key < *k) {
                    best = Some((key, [bi, bo, bb]));
                }
            }
        }
        let (_, tile) = best.expect("unit tile always fits");
        let t = Tiling {
            kernel,
            degree,
            tile,
            counts: [ceil_div(ni, tile[0]), ceil_div(no, tile[1]), ceil_div(nb, tile[2])],
        };
        Ok(t)
    }

    pub fn input_tiles(&self) -> usize {
        self.counts[0] * self.counts[2]
    }

    pub fn weight_tiles(&self) -> usize {
        self.counts[1] * self.counts[0]
    }

    pub fn output_tiles(&self) -> usize {
        self.counts[1] * self.counts[2]
    }

    pub fn products(&self) -> usize {
        self.counts.iter().product()
    }

    /// `(weight tile, input tile)` pairs summed into output tile `o`.
    pub fn terms(&self, o: usize) -> Vec<(usize, usize)> {
        let (io, kb) = (o / self.counts[2], o % self.counts[2]);
        (0..self.counts[0])
            .map(|ji| (io * self.counts[0] + ji, ji * self.counts[2] + kb))
            .collect()
    }

    fn range(&self, dim: usize, idx: usize) -> Range<usize> {
        let total = self.kernel.dims()[dim];
        let r = ranges(total, self.tile[dim]);
        r[idx].clone()
    }

    /// Sub-kernel of one tile. Inner and out extents are always the full
    /// tile sizes (ragged tiles are zero-padded) because both enter the
    /// packing strides shared by all terms of an output tile.
    fn sub_kernel(&self, batch: usize) -> Kernel {
        self.kernel.with_dims(self.tile[0], self.tile[1], batch)
    }

    /// Packed coefficients of input tile `t`.
    pub fn encode_input(&self, t: usize, input: &[u64]) -> Result<Vec<u64>> {
        let ri = self.range(0, t / self.counts[2]);
        let rb = self.range(2, t % self.counts[2]);
        let bi = self.tile[0];
        let sub = self.sub_kernel(rb.len());
        let data = match self.kernel {
            Kernel::Matmul(g) => {
                let mut d = vec![0u64; bi * rb.len()];
                for (a, j) in ri.clone().enumerate() {
                    d[a * rb.len()..(a + 1) * rb.len()]
                        .copy_from_slice(&input[j * g.batch + rb.start..j * g.batch + rb.end]);
                }
                d
            }
            Kernel::Conv(g) => {
                let hw = g.height * g.width;
                let mut d = vec![0u64; rb.len() * bi * hw];
                for (a, b) in rb.clone().enumerate() {
                    let src = (b * g.c_in + ri.start) * hw;
                    d[a * bi * hw..a * bi * hw + ri.len() * hw]
                        .copy_from_slice(&input[src..src + ri.len() * hw]);
                }
                d
            }
        };
        sub.encode(Operand::Input, &data, self.degree)
    }

    /// Packed coefficients of weight tile `t`.
    pub fn encode_weight(&self, t: usize, weight: &[u64]) -> Result<Vec<u64>> {
        let ro = self.range(1, t / self.counts[0]);
        let ri = self.range(0, t % self.counts[0]);
        let (bi, bo) = (self.tile[0], self.tile[1]);
        let sub = self.sub_kernel(1);
        let data = match self.kernel {
            Kernel::Matmul(g) => {
                let mut d = vec![0u64; bo * bi];
                for (a, i) in ro.clone().enumerate() {
                    d[a * bi..a * bi + ri.len()]
                        .copy_from_slice(&weight[i * g.inner + ri.start..i * g.inner + ri.end]);
                }
                d
            }
            Kernel::Conv(g) => {
                let ss = g.kernel * g.kernel;
                let mut d = vec![0u64; bo * bi * ss];
                for (a, o) in ro.clone().enumerate() {
                    let src = (o * g.c_in + ri.start) * ss;
                    d[a * bi * ss..a * bi * ss + ri.len() * ss]
                        .copy_from_slice(&weight[src..src + ri.len() * ss]);
                }
                d
            }
        };
        sub.encode(Operand::Weight, &data, self.degree)
    }

    /// Scatter the decoded values of output tile `o` into the full output.
    pub fn decode_output(&self, o: usize, coeffs: &[u64], output: &mut [u64]) -> Result<()> {
        let ro = self.range(1, o / self.counts[2]);
        let rb = self.range(2, o % self.counts[2]);
        let bo = self.tile[1];
        let sub = self.sub_kernel(rb.len());
        let vals = sub.decode(coeffs)?;
        match self.kernel {
            Kernel::Matmul(g) => {
                for (a, i) in ro.clone().enumerate() {
                    output[i * g.batch + rb.start..i * g.batch + rb.end]
                        .copy_from_slice(&vals[a * rb.len()..(a + 1) * rb.len()]);
                }
            }
            Kernel::Conv(g) => {
                let plane = g.out_height() * g.out_width();
                for (a, b) in rb.clone().enumerate() {
                    let dst = (b * g.c_out + ro.start) * plane;
                    let src = a * bo * plane;
                    output[dst..dst + ro.len() * plane]
                        .copy_from_slice(&vals[src..src + ro.len() * plane]);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::matmul::tests_support::negacyclic;
    use super::*;
    use crate::ring::mask;
    use rand::{Rng, SeedableRng};

    const BOTH_PLAIN: Encrypted = Encrypted {
        weight: false,
        input: true,
    };

    fn tiled_product(t: &Tiling, w: &[u64], v: &[u64]) -> Vec<u64> {
        let out_len: usize = t.kernel.output_shape().iter().product();
        let mut out = vec![0u64; out_len];
        for o in 0..t.output_tiles() {
            let mut acc = vec![0u64; t.degree];
            for (wt, it) in t.terms(o) {
                let p = negacyclic(
                    &t.encode_weight(wt, w).unwrap(),
                    &t.encode_input(it, v).unwrap(),
                    59,
                );
                for (a, b) in acc.iter_mut().zip(p) {
                    *a = a.wrapping_add(b) & mask(59);
                }
            }
            t.decode_output(o, &acc, &mut out).unwrap();
        }
        out
    }

    #[test]
    fn fc_layer_plan_is_compact() {
        let k = Kernel::Matmul(MatmulGeometry::new(784, 128, 32));
        let t = Tiling::plan(k, 8192, BOTH_PLAIN).unwrap();
        let [bi, bo, bb] = t.tile;
        assert!(bi * bo * bb <= 8192);
        // 784*128*32 coefficients need at least 393 products
        assert!(t.products() >= 392);
        assert!(t.input_tiles() + t.output_tiles() <= 41, "{:?}", t);
    }

    #[test]
    fn inner_dimension_smaller_than_tile_pads_cleanly() {
        // inner tile 3 over an inner dimension of 5 leaves a ragged last tile
        let g = MatmulGeometry::new(5, 3, 2);
        let mut t = Tiling::plan(Kernel::Matmul(g), 16, BOTH_PLAIN).unwrap();
        t.tile = [3, 2, 2];
        t.counts = [2, 2, 1];
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        let w: Vec<u64> = (0..15).map(|_| rng.random::<u64>() & mask(59)).collect();
        let v: Vec<u64> = (0..10).map(|_| rng.random::<u64>() & mask(59)).collect();
        assert_eq!(tiled_product(&t, &w, &v), Kernel::Matmul(g).eval(&w, &v, mask(59)));
    }

    proptest::proptest! {
        #[test]
        fn tiled_matmul_matches(inner in 1usize..12, out in 1usize..12, batch in 1usize..6, seed in proptest::prelude::any::<u64>()) {
            let k = Kernel::Matmul(MatmulGeometry::new(inner, out, batch));
            let t = Tiling::plan(k, 32, BOTH_PLAIN).unwrap();
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let w: Vec<u64> = (0..inner * out).map(|_| rng.random::<u64>() & mask(59)).collect();
            let v: Vec<u64> = (0..inner * batch).map(|_| rng.random::<u64>() & mask(59)).collect();
            proptest::prop_assert_eq!(tiled_product(&t, &w, &v), k.eval(&w, &v, mask(59)));
        }

        #[test]
        fn tiled_conv_matches(batch in 1usize..4, c_in in 1usize..4, c_out in 1usize..4, seed in proptest::prelude::any::<u64>()) {
            let g = ConvGeometry { batch, c_in, c_out, height: 4, width: 4, kernel: 3 };
            let k = Kernel::Conv(g);
            let t = Tiling::plan(k, 64, BOTH_PLAIN).unwrap();
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let w: Vec<u64> = (0..g.weight_len()).map(|_| rng.random::<u64>() & mask(59)).collect();
            let v: Vec<u64> = (0..g.input_len()).map(|_| rng.random::<u64>() & mask(59)).collect();
            proptest::prop_assert_eq!(tiled_product(&t, &w, &v), k.eval(&w, &v, mask(59)));
        }
    }
}
