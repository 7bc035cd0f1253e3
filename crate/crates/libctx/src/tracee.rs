//! Byte transfer to and from a stopped tracee's address space.

use std::io::{IoSlice, IoSliceMut};

use nix::errno::Errno;
use nix::sys::uio::{process_vm_readv, process_vm_writev, RemoteIoVec};
use nix::unistd::Pid;

const PAGE: u64 = 4096;

/// Reads exactly `len` bytes at `addr`; a short transfer is `EFAULT`.
pub fn read_mem(pid: Pid, addr: u64, len: usize) -> nix::Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    if len == 0 {
        return Ok(buf);
    }
    let n = process_vm_readv(
        pid,
        &mut [IoSliceMut::new(&mut buf)],
        &[RemoteIoVec { base: addr as usize, len }],
    )?;
    if n != len {
        return Err(Errno::EFAULT);
    }
    Ok(buf)
}

/// Writes all of `bytes` at `addr`; a short transfer is `EFAULT`.
pub fn write_mem(pid: Pid, addr: u64, bytes: &[u8]) -> nix::Result<()> {
    if bytes.is_empty() {
        return Ok(());
    }
    let n = process_vm_writev(
        pid,
        &[IoSlice::new(bytes)],
        &[RemoteIoVec {
            base: addr as usize,
            len: bytes.len(),
        }],
    )?;
    if n != bytes.len() {
        return Err(Errno::EFAULT);
    }
    Ok(())
}

/// Reads a NUL-terminated string of at most `max` bytes, page by page so a
/// string ending just before an unmapped page still reads.
pub fn read_cstring(pid: Pid, addr: u64, max: usize) -> nix::Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut at = addr;
    while out.len() < max {
        let chunk = ((PAGE - at % PAGE) as usize).min(max - out.len());
        let bytes = read_mem(pid, at, chunk)?;
        if let Some(nul) = bytes.iter().position(|&b| b == 0) {
            out.extend_from_slice(&bytes[..nul]);
            return Ok(out);
        }
        out.extend_from_slice(&bytes);
        at += chunk as u64;
    }
    Err(Errno::ENAMETOOLONG)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nix::unistd::getpid;

    // process_vm_* works on our own process, which stands in for a tracee.
    #[test]
    fn write_then_read_is_identity() {
        let mut target = [0u8; 64];
        let addr = target.as_mut_ptr() as u64;
        write_mem(getpid(), addr + 3, b"hello").unwrap();
        assert_eq!(read_mem(getpid(), addr + 3, 5).unwrap(), b"hello");
        assert_eq!(&std::hint::black_box(&target)[3..8], b"hello");
        assert!(read_mem(getpid(), addr, 0).unwrap().is_empty());
    }

    #[test]
    fn reads_c_strings() {
        let s = b"/proc/cpuinfo\0junk";
        assert_eq!(read_cstring(getpid(), s.as_ptr() as u64, 4096).unwrap(), b"/proc/cpuinfo");
        assert_eq!(read_cstring(getpid(), s.as_ptr() as u64, 4), Err(Errno::ENAMETOOLONG));
    }

    #[test]
    fn faults_are_errors() {
        assert!(read_mem(getpid(), 8, 16).is_err());
        assert!(write_mem(getpid(), 8, b"x").is_err());
    }
}
