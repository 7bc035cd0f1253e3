//! Installing the trace filter in the current task.

use libctx_core::filter::{build_trace_filter, Arch, SockFilter};
use nix::errno::Errno;

const SECCOMP_SET_MODE_FILTER: libc::c_uint = 1;
const SECCOMP_FILTER_FLAG_TSYNC: libc::c_uint = 1;

#[repr(C)]
struct SockFprog {
    len: libc::c_ushort,
    filter: *const SockFilter,
}

/// A built filter, ready to install without allocating (usable between
/// `fork` and `exec`).
pub struct FilterProgram {
    insns: Vec<SockFilter>,
}

impl FilterProgram {
    /// Filter returning TRACE for the monitor's syscall set on this arch.
    pub fn native() -> FilterProgram {
        let arch = Arch::NATIVE;
        FilterProgram {
            insns: build_trace_filter(arch, &arch.traced_syscalls()),
        }
    }

    pub fn instructions(&self) -> &[SockFilter] {
        &self.insns
    }

    /// Sets no-new-privileges and installs the filter on the calling thread,
    /// or on every thread of the process when `all_threads` is set.
    ///
    /// Only performs raw syscalls, so it is async-signal-safe.
    pub fn install(&self, all_threads: bool) -> Result<(), Errno> {
        let prog = SockFprog {
            len: self.insns.len() as libc::c_ushort,
            filter: self.insns.as_ptr(),
        };
        let r = unsafe { libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) };
        Errno::result(r)?;
        let flags = if all_threads { SECCOMP_FILTER_FLAG_TSYNC } else { 0 };
        let r = unsafe { libc::syscall(libc::SYS_seccomp, SECCOMP_SET_MODE_FILTER, flags, &prog as *const SockFprog) };
        // With TSYNC a positive result names a thread that could not sync.
        match Errno::result(r)? {
            0 => Ok(()),
            _ => Err(Errno::EBUSY),
        }
    }
}
