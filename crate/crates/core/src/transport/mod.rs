//! Framed message transport between the two parties.

pub mod census;
pub mod codec;
pub mod frame;
pub mod msg;
pub mod session;

pub use census::{Census, Counts};
pub use session::{memory_pair, tcp_accept, tcp_connect, Channel, Hello, Session, PROTOCOL_VERSION};
