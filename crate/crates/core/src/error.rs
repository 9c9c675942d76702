use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point ({x}, {y}) outside sampling domain {w}x{h}")]
    OutOfBounds { x: f64, y: f64, w: usize, h: usize },

    #[error("no valid correspondences after {0} attempts")]
    NoCorrespondences(usize),

    #[error("degenerate synthetic image: {0}")]
    DegenerateImage(String),

    #[error("malformed image file: {0}")]
    ImageFormat(String),

    #[error("bad checkpoint magic {0:?}")]
    CheckpointMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("checkpoint CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    CheckpointCrc { stored: u32, computed: u32 },

    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("malformed dataset manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
