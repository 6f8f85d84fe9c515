use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the pipeline. The `fallback` variants signal that the
/// run should still emit the sharp conventional exposure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("dimension mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    DimensionMismatch {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("missing stage artifact: {0}")]
    MissingArtifact(String),

    #[error("malformed stage artifact {path}: {reason}")]
    BadArtifact { path: PathBuf, reason: String },

    /// Motion disparity exceeded the kernel cap on too many pixels; the run
    /// should fall back to the sharp exposure.
    #[error("motion disparity overflow: {clamped_fraction:.1}% of pixels above cap")]
    MotionOverflow { clamped_fraction: f32 },

    /// Alignment solver failed to converge; fall back to the sharp exposure.
    #[error("alignment solver diverged on frame pair {pair}")]
    SolverDiverged { pair: usize },

    /// No subject-weighted tracks to align on; fall back to the sharp exposure.
    #[error("no subject tracks found")]
    NoSubjectTracks,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures where the right behavior is to emit only the
    /// conventional sharp exposure instead of aborting.
    pub fn is_sharp_fallback(&self) -> bool {
        matches!(
            self,
            Error::MotionOverflow { .. } | Error::SolverDiverged { .. } | Error::NoSubjectTracks
        )
    }
}
