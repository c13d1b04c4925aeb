//! Packing tensors into polynomial coefficients so that a single
//! negacyclic product evaluates a matrix product or a convolution.

pub mod conv;
pub mod matmul;
pub mod plan;

pub use conv::ConvGeometry;
pub use matmul::{MatmulGeometry, Operand};
pub use plan::{Encrypted, Kernel, Tiling};
