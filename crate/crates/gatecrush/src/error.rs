use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] gatecrush_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("missing prerequisite {what}: expected {path}")]
    MissingArtifact { what: &'static str, path: PathBuf },
    #[error("config: {0}")]
    Config(String),
    #[error("timing resolution too coarse: median {median_ns} ns is below 10x the clock granularity of {granularity_ns} ns")]
    TimingResolution { median_ns: u64, granularity_ns: u64 },
    #[error("{failed} of {total} latency measurements failed the stability gate")]
    Unstable { failed: usize, total: usize },
    #[error("latency datasets come from different hosts: {0:?} vs {1:?}")]
    HostMismatch(String, String),
    #[error("latency dataset manifest differs from the requested configuration: {0}")]
    ManifestMismatch(String),
    #[error("LPNet test error {error:.4} is not below the required {limit:.4}")]
    LpNetError { error: f64, limit: f64 },
    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn format_err(path: impl Into<PathBuf>, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.into(),
        msg: msg.into(),
    }
}
