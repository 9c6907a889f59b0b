use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("points are antipodal (p·z = {dot:.3e}); inverse exponential map undefined")]
    Antipodal { dot: f64 },

    #[error("point lies on a pole of the polar chart")]
    Pole,

    #[error("vector cannot be normalized onto the sphere: {0}")]
    NotUnit(String),

    #[error("dataset is empty")]
    EmptyData,

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("roughness of the current map is infinite ({singular_cells} singular cells)")]
    SingularBase { singular_cells: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Failures caused by numerics rather than by the input files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Antipodal { .. } | Error::Pole | Error::SingularBase { .. }
        )
    }
}
