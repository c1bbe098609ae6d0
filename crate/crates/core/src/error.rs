pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("unsupported image format: {0}")]
    UnsupportedImage(String),

    #[error("image dimensions invalid: {0}")]
    ImageDimensions(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("point maps to infinity under homography")]
    DegenerateMapping,

    #[error("homography estimation failed: {0}")]
    EstimationFailure(String),

    #[error("keypoint at ({0}, {1}) too near image border")]
    KeypointNearBorder(f64, f64),

    #[error("template produced too few keypoints: {0}")]
    TooFewKeypoints(usize),

    #[error("snapshot corrupt or incompatible: {0}")]
    Snapshot(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate motion draw after {0} attempts")]
    DegenerateMotion(usize),

    #[error("{0}")]
    InvalidInput(String),
}
