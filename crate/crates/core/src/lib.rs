//! Pure building blocks for partitioning CPUs among library contexts.
//!
//! Everything in this crate is allocation-only and free of IO so that it can
//! be shared between the tracing monitor, the in-process client, and tests.
//! The `libctx` crate layers the kernel interfaces (ptrace, seccomp, dynamic
//! loader, filesystem) on top of these types.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod clamp;
pub mod context;
pub mod cpuset;
pub mod error;
pub mod filter;
pub mod forge;
pub mod path;
pub mod protocol;
pub mod shim;
pub mod topology;
pub mod tuner;

pub use crate::context::{ContextId, EnvOverride, EnvOverrides};
pub use crate::cpuset::{CpuSet, MAX_CPUS};
pub use crate::error::{Error, Result};
pub use crate::topology::{CpuInfo, HostTopology};
