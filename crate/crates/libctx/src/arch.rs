//! Syscall register access for a stopped tracee.

use nix::unistd::Pid;

#[cfg(target_arch = "x86_64")]
mod imp {
    use super::*;

    #[derive(Clone, Copy)]
    pub struct Regs(libc::user_regs_struct);

    impl Regs {
        pub fn read(pid: Pid) -> nix::Result<Regs> {
            nix::sys::ptrace::getregs(pid).map(Regs)
        }

        pub fn write(&self, pid: Pid) -> nix::Result<()> {
            nix::sys::ptrace::setregs(pid, self.0)
        }

        pub fn sysno(&self) -> i64 {
            self.0.orig_rax as i64
        }

        /// A negative number makes the kernel skip the call with `-ENOSYS`.
        pub fn set_sysno(&mut self, nr: i64) {
            self.0.orig_rax = nr as u64;
        }

        pub fn arg(&self, i: usize) -> u64 {
            let r = &self.0;
            [r.rdi, r.rsi, r.rdx, r.r10, r.r8, r.r9][i]
        }

        pub fn set_arg(&mut self, i: usize, v: u64) {
            let r = &mut self.0;
            *[&mut r.rdi, &mut r.rsi, &mut r.rdx, &mut r.r10, &mut r.r8, &mut r.r9][i] = v;
        }

        pub fn ret(&self) -> i64 {
            self.0.rax as i64
        }

        pub fn set_ret(&mut self, v: i64) {
            self.0.rax = v as u64;
        }

        pub fn sp(&self) -> u64 {
            self.0.rsp
        }
    }

    pub fn set_sysno(pid: Pid, regs: &mut Regs, nr: i64) -> nix::Result<()> {
        regs.set_sysno(nr);
        regs.write(pid)
    }
}

#[cfg(target_arch = "aarch64")]
mod imp {
    use super::*;
    use nix::errno::Errno;

    const NT_PRSTATUS: libc::c_int = 1;
    const NT_ARM_SYSTEM_CALL: libc::c_int = 0x404;

    /// General registers plus the syscall number at entry. On aarch64 `x0`
    /// carries both the first argument and the return value, so `arg(0)`
    /// read at exit is the result.
    #[derive(Clone, Copy)]
    pub struct Regs {
        regs: libc::user_regs_struct,
        sysno: i64,
    }

    fn regset<T>(req: libc::c_uint, pid: Pid, kind: libc::c_int, data: &mut T) -> nix::Result<()> {
        let mut iov = libc::iovec {
            iov_base: (data as *mut T).cast(),
            iov_len: std::mem::size_of::<T>(),
        };
        let r = unsafe { libc::ptrace(req, pid.as_raw(), kind as usize as *mut libc::c_void, &mut iov as *mut libc::iovec) };
        Errno::result(r).map(drop)
    }

    impl Regs {
        pub fn read(pid: Pid) -> nix::Result<Regs> {
            let mut regs: libc::user_regs_struct = unsafe { std::mem::zeroed() };
            regset(libc::PTRACE_GETREGSET, pid, NT_PRSTATUS, &mut regs)?;
            let mut nr: libc::c_int = 0;
            regset(libc::PTRACE_GETREGSET, pid, NT_ARM_SYSTEM_CALL, &mut nr)?;
            Ok(Regs { regs, sysno: nr as i64 })
        }

        pub fn write(&self, pid: Pid) -> nix::Result<()> {
            let mut regs = self.regs;
            regset(libc::PTRACE_SETREGSET, pid, NT_PRSTATUS, &mut regs)
        }

        pub fn sysno(&self) -> i64 {
            self.sysno
        }

        pub fn set_sysno(&mut self, nr: i64) {
            self.sysno = nr;
        }

        pub fn arg(&self, i: usize) -> u64 {
            self.regs.regs[i]
        }

        pub fn set_arg(&mut self, i: usize, v: u64) {
            self.regs.regs[i] = v;
        }

        pub fn ret(&self) -> i64 {
            self.regs.regs[0] as i64
        }

        pub fn set_ret(&mut self, v: i64) {
            self.regs.regs[0] = v as u64;
        }

        pub fn sp(&self) -> u64 {
            self.regs.sp
        }
    }

    pub fn set_sysno(pid: Pid, regs: &mut Regs, nr: i64) -> nix::Result<()> {
        regs.set_sysno(nr);
        let mut v = nr as libc::c_int;
        regset(libc::PTRACE_SETREGSET, pid, NT_ARM_SYSTEM_CALL, &mut v)
    }
}

pub use imp::{set_sysno, Regs};

/// Bytes below the stack pointer that the ABI lets leaf code use freely.
#[cfg(target_arch = "x86_64")]
pub const RED_ZONE: u64 = 128;
#[cfg(target_arch = "aarch64")]
pub const RED_ZONE: u64 = 0;
