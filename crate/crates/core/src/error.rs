//! Crate-wide error type.
//!
//! All fallible operations return [`Result`]. Validation failures carry the
//! path of the first offending field so a bad config file points the user at
//! the exact entry; binary parse failures carry the byte offset.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A structured input (JSON map, scenario, CSV) failed validation.
    /// `path` locates the first offending field, e.g. `buildings[2].height`.
    #[error("validation failed at {path}: {reason}")]
    Validation { path: String, reason: String },

    /// A grid cell index lies outside the region's cell counts.
    #[error("cell index ({0}, {1}, {2}) out of range for grid with counts ({3}, {4}, {5})")]
    IndexOutOfRange(usize, usize, usize, usize, usize, usize),

    /// A queried position lies outside the map region.
    #[error("position ({0}, {1}, {2}) lies outside the region")]
    OutOfRegion(f64, f64, f64),

    /// A binary payload is malformed; `offset` is the byte where parsing failed.
    #[error("malformed data at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    /// A versioned file declares a format version this build does not support.
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    /// Geometry too degenerate to evaluate (coincident points, zenith ray, ...).
    #[error("singular geometry: {0}")]
    SingularGeometry(String),

    /// Geometry outside the sensor's field of view (target below the array plane).
    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),

    /// A selection had no candidates to choose from.
    #[error("no candidate available: {0}")]
    NoCandidate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand used by the validators.
    pub(crate) fn validation(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation { path: path.into(), reason: reason.into() }
    }

    /// Whether this error indicates bad user-supplied configuration rather
    /// than a runtime condition. The CLI maps these to exit code 2.
    pub fn is_config_error(&self) -> bool {
        !matches!(self, Error::SingularGeometry(_) | Error::UnsupportedGeometry(_))
    }
}
