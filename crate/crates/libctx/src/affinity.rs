//! Kernel affinity calls on arbitrary threads.

use libctx_core::{CpuSet, MAX_CPUS};
use nix::errno::Errno;

/// Mask length used for every affinity call we issue.
pub const MASK_BYTES: usize = MAX_CPUS / 8;

pub fn set_affinity(tid: i32, set: &CpuSet) -> nix::Result<()> {
    let bytes = set.encode_kernel_mask(MASK_BYTES).map_err(|_| Errno::EINVAL)?;
    set_affinity_raw(tid, &bytes)
}

/// `sched_setaffinity` with a prebuilt mask. Async-signal-safe.
pub fn set_affinity_raw(tid: i32, mask: &[u8]) -> nix::Result<()> {
    let r = unsafe { libc::syscall(libc::SYS_sched_setaffinity, tid, mask.len(), mask.as_ptr()) };
    Errno::result(r).map(drop)
}

/// Raw reply of `sched_getaffinity` (the kernel's copied length, then bytes).
pub fn get_affinity_raw(tid: i32) -> nix::Result<Vec<u8>> {
    let mut buf = vec![0u8; MASK_BYTES];
    let r = unsafe { libc::syscall(libc::SYS_sched_getaffinity, tid, buf.len(), buf.as_mut_ptr()) };
    let n = Errno::result(r)? as usize;
    buf.truncate(n);
    Ok(buf)
}

pub fn get_affinity(tid: i32) -> nix::Result<CpuSet> {
    get_affinity_raw(tid).map(|b| CpuSet::decode_kernel_mask(&b))
}

/// Affinity as the kernel holds it, read from procfs so no syscall
/// interposition can alter the answer.
pub fn kernel_affinity(tid: i32) -> std::io::Result<CpuSet> {
    let status = std::fs::read_to_string(format!("/proc/{tid}/task/{tid}/status"))
        .or_else(|_| std::fs::read_to_string(format!("/proc/{tid}/status")))?;
    let list = status
        .lines()
        .find_map(|l| l.strip_prefix("Cpus_allowed_list:"))
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "no Cpus_allowed_list"))?;
    libctx_core::cpuset::parse_cpu_list(list.trim()).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}
