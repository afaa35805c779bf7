use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] densenet_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: header must be exactly `id,label`, found `{found}`", path.display())]
    ManifestHeader { path: PathBuf, found: String },
    #[error("{}: row {row}: {reason}", path.display())]
    Manifest { path: PathBuf, row: u64, reason: String },
    #[error("{}: {reason}", path.display())]
    Image { path: PathBuf, reason: String },
    #[error("checkpoint: bad magic at offset {offset}")]
    BadMagic { offset: u64 },
    #[error("checkpoint: unsupported version {version} at offset {offset}")]
    UnsupportedVersion { version: u32, offset: u64 },
    #[error("checkpoint: truncated at offset {offset}, {needed} more bytes expected")]
    Truncated { offset: u64, needed: u64 },
    #[error("checkpoint: {reason} at offset {offset}")]
    Corrupt { offset: u64, reason: String },
    #[error("non-finite training loss at batch {batch_index}")]
    NonFiniteLoss { batch_index: u64 },
    #[error("{0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
