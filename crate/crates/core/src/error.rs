use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid class id {class_id} (expected 1..={num_classes})")]
    InvalidClass { class_id: usize, num_classes: usize },

    #[error("unknown tissue class `{0}`")]
    UnknownTissue(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("sample of class {sample} pushed into pool for class {pool}")]
    PoolClass { pool: usize, sample: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("incomplete validation: {0}")]
    IncompleteValidation(String),

    #[error("incomplete evaluation: {0}")]
    IncompleteEvaluation(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid label value {0}")]
    InvalidLabel(u8),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("csv error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
