//! Classic-BPF seccomp program that hands the resource syscalls to the tracer
//! and lets everything else run untouched.

use alloc::vec::Vec;

pub const SECCOMP_RET_ALLOW: u32 = 0x7fff_0000;
pub const SECCOMP_RET_TRACE: u32 = 0x7ff0_0000;

const BPF_LD_W_ABS: u16 = 0x20;
const BPF_JMP_JEQ_K: u16 = 0x15;
const BPF_RET_K: u16 = 0x06;

// offsets into struct seccomp_data
const OFFSET_NR: u32 = 0;
const OFFSET_ARCH: u32 = 4;

/// One `struct sock_filter` instruction.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SockFilter {
    pub code: u16,
    pub jt: u8,
    pub jf: u8,
    pub k: u32,
}

impl SockFilter {
    const fn stmt(code: u16, k: u32) -> Self {
        SockFilter { code, jt: 0, jf: 0, k }
    }

    const fn jump(code: u16, k: u32, jt: u8, jf: u8) -> Self {
        SockFilter { code, jt, jf, k }
    }
}

/// Syscall numbering for the architectures the monitor supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    X86_64,
    Aarch64,
}

impl Arch {
    #[cfg(target_arch = "x86_64")]
    pub const NATIVE: Arch = Arch::X86_64;
    #[cfg(target_arch = "aarch64")]
    pub const NATIVE: Arch = Arch::Aarch64;

    pub const fn audit_arch(self) -> u32 {
        match self {
            Arch::X86_64 => 0xc000_003e,
            Arch::Aarch64 => 0xc000_00b7,
        }
    }

    pub const fn sched_setaffinity(self) -> u32 {
        match self {
            Arch::X86_64 => 203,
            Arch::Aarch64 => 122,
        }
    }

    pub const fn sched_getaffinity(self) -> u32 {
        match self {
            Arch::X86_64 => 204,
            Arch::Aarch64 => 123,
        }
    }

    pub const fn openat(self) -> u32 {
        match self {
            Arch::X86_64 => 257,
            Arch::Aarch64 => 56,
        }
    }

    /// Legacy `open`; aarch64 only has `openat`.
    pub const fn open(self) -> Option<u32> {
        match self {
            Arch::X86_64 => Some(2),
            Arch::Aarch64 => None,
        }
    }

    /// The syscalls the monitor interposes on.
    pub fn traced_syscalls(self) -> Vec<u32> {
        let mut v = alloc::vec![self.sched_getaffinity(), self.sched_setaffinity(), self.openat()];
        v.extend(self.open());
        v
    }
}

/// Builds the filter: foreign-arch calls and everything outside `traced`
/// return ALLOW, members of `traced` return TRACE.
pub fn build_trace_filter(arch: Arch, traced: &[u32]) -> Vec<SockFilter> {
    assert!(traced.len() < 250, "jump offsets are 8 bits");
    let n = traced.len();
    let mut prog = Vec::with_capacity(n + 6);
    prog.push(SockFilter::stmt(BPF_LD_W_ABS, OFFSET_ARCH));
    prog.push(SockFilter::jump(BPF_JMP_JEQ_K, arch.audit_arch(), 1, 0));
    prog.push(SockFilter::stmt(BPF_RET_K, SECCOMP_RET_ALLOW));
    prog.push(SockFilter::stmt(BPF_LD_W_ABS, OFFSET_NR));
    for (i, &nr) in traced.iter().enumerate() {
        prog.push(SockFilter::jump(BPF_JMP_JEQ_K, nr, (n - i) as u8, 0));
    }
    prog.push(SockFilter::stmt(BPF_RET_K, SECCOMP_RET_ALLOW));
    prog.push(SockFilter::stmt(BPF_RET_K, SECCOMP_RET_TRACE));
    prog
}
