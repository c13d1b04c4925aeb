use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("fixed-point overflow: {0} does not fit in the ring")]
    Overflow(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("scale mismatch: expected 2^{expected}, found 2^{found}")]
    Scale { expected: u32, found: u32 },

    #[error("invalid parameters: {0}")]
    Params(String),

    #[error("polynomial is in {found} form, operation needs {expected} form")]
    WrongForm {
        expected: &'static str,
        found: &'static str,
    },

    #[error("coefficient {0} out of range")]
    Range(u64),

    #[error("geometry needs {needed} coefficients but the polynomial degree is {degree}")]
    GeometryOverflow { needed: usize, degree: usize },

    #[error("protocol desync: {0}")]
    Desync(String),

    #[error("handshake failed: {0}")]
    Handshake(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("bad dataset: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("peer disconnected")]
    Disconnected,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $err:expr) => {
        if !$cond {
            return Err($err);
        }
    };
}
pub(crate) use ensure;
