use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("invalid cpu list token {token:?}: {reason}")]
    CpuList { token: String, reason: &'static str },

    #[error("cpu set is empty")]
    EmptyCpuSet,

    #[error("mask buffer of {len} bytes cannot hold cpu {cpu} (need {needed} bytes)")]
    MaskBufferTooSmall { len: usize, cpu: usize, needed: usize },

    #[error("host cpuinfo has no stanza for cpu {0}")]
    MissingStanza(usize),

    #[error("malformed cpuinfo: {0}")]
    CpuInfo(String),

    #[error("invalid environment variable name {0:?}")]
    EnvName(String),

    #[error("control message: {0}")]
    Protocol(&'static str),

    #[error("unsupported control protocol version {0}")]
    ProtocolVersion(u8),

    #[error("shim generation: {0}")]
    Shim(String),

    #[error("invalid tuner grid: {0}")]
    Grid(String),
}
