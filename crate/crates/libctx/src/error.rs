use std::io;
use std::path::PathBuf;

use libctx_core::protocol::ErrorCode;
use libctx_core::{ContextId, CpuSet};
use nix::errno::Errno;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] libctx_core::Error),

    #[error("{what}: {source}")]
    Io {
        what: String,
        #[source]
        source: io::Error,
    },

    #[error("{what}: {errno}")]
    Sys { what: &'static str, errno: Errno },

    #[error("cannot read host cpu topology from {path}: {source}")]
    Topology {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("unknown context {0}")]
    UnknownContext(ContextId),

    #[error("cpus {requested} are not a subset of the online cpus {online}")]
    NotOnline { requested: CpuSet, online: CpuSet },

    #[error("thread {tid} is already bound to {bound}")]
    AlreadyBound { tid: i32, bound: ContextId },

    #[error("context stack of this thread is {0} deep")]
    StackDepth(usize),

    #[error("this thread has not entered a context")]
    NotEntered,

    #[error("the runtime is already initialized in this process")]
    AlreadyInitialized,

    #[error("program {0:?} not found")]
    ProgramNotFound(String),

    #[error("cannot spawn {program:?}: {errno}")]
    Spawn { program: String, errno: Errno },

    #[error("ptrace attach to {pid} denied ({errno}); check kernel.yama.ptrace_scope and CAP_SYS_PTRACE")]
    AttachDenied { pid: i32, errno: Errno },

    #[error("kernel rejected the seccomp filter ({0}); rerun with --trace-all to trace every syscall instead")]
    FilterRejected(Errno),

    #[error("monitor handshake failed: {0}")]
    Handshake(String),

    #[error("monitor replied {0:?}")]
    Monitor(ErrorCode),

    #[error("at most {cap} linker namespaces are available")]
    NamespaceCap { cap: usize },

    #[error("dynamic loader: {0}")]
    Loader(String),

    #[error("symbol {symbol} not found in {library}")]
    UnresolvedSymbol { symbol: String, library: String },

    #[error("symbol {symbol} already resolved to another library in {ctx}")]
    SlotConflict { symbol: String, ctx: ContextId },

    #[error("dispatch: calling thread has not entered a context")]
    DispatchUnbound,

    #[error("dispatch: symbol {symbol} has no slot in {ctx}")]
    DispatchMissingSlot { symbol: String, ctx: ContextId },

    #[error("service context already published {0}")]
    ServicePublished(String),

    #[error("{0} does not export {1}")]
    NotExported(String, String),

    #[error("unsupported architecture for shim generation: {0}")]
    UnsupportedArch(String),

    #[error("interrupted")]
    Interrupted,

    #[error("config {path}: line {line}: {msg}")]
    Config { path: String, line: usize, msg: String },
}

impl Error {
    pub(crate) fn io(what: impl Into<String>, source: io::Error) -> Error {
        Error::Io { what: what.into(), source }
    }

    pub(crate) fn sys(what: &'static str, errno: Errno) -> Error {
        Error::Sys { what, errno }
    }

    /// Code reported over the control channel.
    pub fn code(&self) -> ErrorCode {
        match self {
            Error::UnknownContext(_) => ErrorCode::UnknownContext,
            Error::Core(libctx_core::Error::EmptyCpuSet) => ErrorCode::EmptyCpuSet,
            Error::Core(libctx_core::Error::EnvName(_)) => ErrorCode::InvalidEnvName,
            Error::Core(_) => ErrorCode::Malformed,
            Error::NotOnline { .. } => ErrorCode::NotOnline,
            Error::AlreadyBound { .. } => ErrorCode::AlreadyBound,
            Error::Sys { errno: Errno::ESRCH, .. } => ErrorCode::NoSuchThread,
            _ => ErrorCode::Io,
        }
    }
}
