use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {what} (task {task:?}, step {step:?})")]
    NonFinite {
        what: &'static str,
        task: Option<u32>,
        step: Option<usize>,
    },

    #[error(
        "layer {layer}: capacity exhausted for task {task_id}: requested {requested} entries but only \
         {free} of {total} are free; expand the layer's memory rows (expand_capacity) or lower the fraction"
    )]
    CapacityExhausted {
        layer: usize,
        task_id: u32,
        requested: usize,
        free: usize,
        total: usize,
    },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("unknown task {0}")]
    UnknownTask(u32),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("forgetting detected: task {task_id} PSNR changed from {before} to {after} after task {after_task}")]
    Forgetting {
        task_id: u32,
        after_task: u32,
        before: f64,
        after: f64,
    },

    #[error("empty evaluation set")]
    EmptyEvalSet,

    #[error("archive checksum error: {0}")]
    ArchiveChecksum(String),

    #[error("archive version {found} is not supported (expected {expected})")]
    ArchiveVersion { found: u32, expected: u32 },

    #[error("archive format error: {0}")]
    ArchiveFormat(String),

    #[error("geometry mismatch: archive has {archive}, config has {config}")]
    GeometryMismatch { archive: String, config: String },

    #[error("config hash mismatch: archive {archive}, config {config} (use --force to override)")]
    ConfigHashMismatch { archive: String, config: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::CapacityExhausted { .. } => "capacity_exhausted",
            Error::Protocol(_) => "protocol",
            Error::UnknownTask(_) => "unknown_task",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Forgetting { .. } => "forgetting",
            Error::EmptyEvalSet => "empty_eval_set",
            Error::ArchiveChecksum(_) => "archive_checksum",
            Error::ArchiveVersion { .. } => "archive_version",
            Error::ArchiveFormat(_) => "archive_format",
            Error::GeometryMismatch { .. } => "geometry_mismatch",
            Error::ConfigHashMismatch { .. } => "config_hash_mismatch",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
