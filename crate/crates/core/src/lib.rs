pub mod bfv;
pub mod data;
pub mod encoding;
pub mod error;
pub mod linear;
pub mod nn;
pub mod nonlinear;
pub mod ot;
pub mod party;
pub mod prep;
pub mod privacy;
pub mod ring;
pub mod transport;

pub use error::{Error, Result};
