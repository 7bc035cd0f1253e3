//! Virtual library contexts: run unmodified programs or in-process library
//! instances against a private CPU set and environment.

pub mod affinity;
pub mod arch;
pub mod bench;
pub mod config;
pub mod diag;
pub mod elf;
pub mod error;
pub mod forge;
pub mod host;
pub mod loader;
pub mod monitor;
pub mod registry;
pub mod runtime;
pub mod scope;
pub mod seccomp;
pub mod tracee;
pub mod tune;
pub mod virt;

pub use error::{Error, Result};
pub use libctx_core::{ContextId, CpuSet};
pub use monitor::{ChildReport, ExitStatus, Monitor, MonitorOptions};
pub use runtime::Runtime;
