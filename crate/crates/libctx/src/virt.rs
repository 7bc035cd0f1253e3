//! Interposition handlers for the filtered syscalls. They run on the monitor
//! while the calling thread sits in a seccomp (entry) or syscall-exit stop.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use libctx_core::clamp::{clamp_request, Clamp};
use libctx_core::filter::Arch;
use libctx_core::{path, CpuSet, HostTopology, MAX_CPUS};
use nix::unistd::Pid;

use crate::arch::{self, Regs, RED_ZONE};
use crate::diag::{info, trace};
use crate::error::Result;
use crate::forge::{rule_for, ForgeStore};
use crate::registry::{Context, Registry, Tid};
use crate::tracee::{read_cstring, read_mem, write_mem};

/// Size of the scratch region below the red zone used for redirected paths.
pub const SCRATCH_LEN: u64 = 1024;
const PATH_MAX: usize = 4096;
const AT_FDCWD: i32 = -100;
const MASK_BYTES: usize = MAX_CPUS / 8;

/// Event counters kept by the monitor. All counts only grow.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counters {
    /// Every ptrace stop seen.
    pub stops: u64,
    /// Syscall-entry stops by syscall number.
    pub entries: BTreeMap<i64, u64>,
    /// Syscall-exit stops by syscall number.
    pub exits: BTreeMap<i64, u64>,
    /// Results or arguments modified, by syscall number.
    pub rewritten: BTreeMap<i64, u64>,
    /// Opens sent to a forged file.
    pub redirected: u64,
}

impl Counters {
    pub fn entries_of(&self, nr: u32) -> u64 {
        self.entries.get(&(nr as i64)).copied().unwrap_or(0)
    }

    pub fn exits_of(&self, nr: u32) -> u64 {
        self.exits.get(&(nr as i64)).copied().unwrap_or(0)
    }

    pub fn rewritten_total(&self) -> u64 {
        self.rewritten.values().sum()
    }
}

/// Work left for the syscall-exit stop.
#[derive(Debug)]
pub enum Pending {
    GetAffinity { ctx: Arc<Context>, len: u64, buf: u64 },
    SetAffinity { buf: u64, original: Vec<u8>, rejected: bool },
    Open { arg: usize, path_ptr: u64, scratch: u64, saved: Vec<u8> },
}

pub struct Interposer {
    pub registry: Arc<Registry>,
    /// Topology presented to contexts.
    pub topo: Arc<HostTopology>,
    pub forge: ForgeStore,
    pub counters: Counters,
    arch: Arch,
    pending: HashMap<Tid, (i64, Pending)>,
}

impl Interposer {
    pub fn new(registry: Arc<Registry>, topo: Arc<HostTopology>, forge: ForgeStore) -> Interposer {
        Interposer {
            registry,
            topo,
            forge,
            counters: Counters::default(),
            arch: Arch::NATIVE,
            pending: HashMap::new(),
        }
    }

    fn is_identity(&self, ctx: &Context) -> bool {
        ctx.allowed == self.topo.online
    }

    /// Context governing an affinity call on `target` (`0` is the caller).
    fn affinity_context(&self, caller: Tid, target: i32) -> Option<Arc<Context>> {
        let tid = if target == 0 { caller } else { target };
        self.registry.lookup_context(tid).filter(|c| !self.is_identity(c))
    }

    pub fn has_pending(&self, tid: Tid) -> bool {
        self.pending.contains_key(&tid)
    }

    pub fn forget(&mut self, tid: Tid) {
        self.pending.remove(&tid);
    }

    /// Handles a syscall-entry stop. Returns true when the exit stop is needed.
    pub fn on_entry(&mut self, pid: Pid, regs: &mut Regs) -> bool {
        let nr = regs.sysno();
        *self.counters.entries.entry(nr).or_default() += 1;
        let tid = pid.as_raw();
        let arch = self.arch;
        let pending = if nr == arch.sched_getaffinity() as i64 {
            self.affinity_context(tid, regs.arg(0) as i32).map(|ctx| Pending::GetAffinity {
                ctx,
                len: regs.arg(1),
                buf: regs.arg(2),
            })
        } else if nr == arch.sched_setaffinity() as i64 {
            self.affinity_context(tid, regs.arg(0) as i32)
                .and_then(|ctx| self.setaffinity_entry(pid, regs, &ctx))
        } else if nr == arch.openat() as i64 {
            self.open_entry(pid, regs, 1, Some(regs.arg(0) as i32))
        } else if Some(nr as u32) == arch.open() && nr >= 0 {
            self.open_entry(pid, regs, 0, None)
        } else {
            None
        };
        match pending {
            Some(p) => {
                self.pending.insert(tid, (nr, p));
                true
            }
            None => false,
        }
    }

    /// Handles the syscall-exit stop that follows an entry which asked for it.
    pub fn on_exit(&mut self, pid: Pid, regs: &mut Regs) {
        let tid = pid.as_raw();
        let Some((nr, pending)) = self.pending.remove(&tid) else {
            return;
        };
        *self.counters.exits.entry(nr).or_default() += 1;
        match pending {
            Pending::GetAffinity { ctx, len, buf } => {
                let ret = regs.ret();
                if ret <= 0 {
                    return;
                }
                let n = (len as usize).min(ret as usize);
                match ctx.affinity_reply(&self.topo.online, n) {
                    Ok(bytes) => match write_mem(pid, buf, &bytes) {
                        Ok(()) => {
                            *self.counters.rewritten.entry(nr).or_default() += 1;
                            trace!("{tid}: sched_getaffinity -> {}", ctx.allowed);
                        }
                        Err(e) => info!("{tid}: affinity reply write failed: {e}"),
                    },
                    Err(e) => info!("{tid}: affinity reply not forged: {e}"),
                }
            }
            Pending::SetAffinity { buf, original, rejected } => {
                if rejected {
                    regs.set_ret(-(libc::EINVAL as i64));
                    if let Err(e) = regs.write(pid) {
                        info!("{tid}: cannot set EINVAL result: {e}");
                    }
                } else if let Err(e) = write_mem(pid, buf, &original) {
                    info!("{tid}: cannot restore affinity request buffer: {e}");
                }
            }
            Pending::Open { arg, path_ptr, scratch, saved } => {
                if let Err(e) = write_mem(pid, scratch, &saved) {
                    info!("{tid}: cannot restore scratch region: {e}");
                }
                regs.set_arg(arg, path_ptr);
                if let Err(e) = regs.write(pid) {
                    info!("{tid}: cannot restore path register: {e}");
                }
            }
        }
    }

    fn setaffinity_entry(&mut self, pid: Pid, regs: &mut Regs, ctx: &Context) -> Option<Pending> {
        let (len, buf) = (regs.arg(1) as usize, regs.arg(2));
        let n = len.min(MASK_BYTES);
        if n == 0 {
            return None;
        }
        let original = match read_mem(pid, buf, n) {
            Ok(b) => b,
            Err(e) => {
                info!("{pid}: cannot read affinity request: {e}");
                return None;
            }
        };
        let requested = CpuSet::decode_kernel_mask(&original);
        let nr = regs.sysno();
        match clamp_request(&requested, &ctx.allowed) {
            Clamp::PassThrough => None,
            Clamp::Rewrite(effective) => {
                let mut bytes = vec![0u8; n];
                effective.encode_into(&mut bytes).ok()?;
                if let Err(e) = write_mem(pid, buf, &bytes) {
                    info!("{pid}: cannot rewrite affinity request: {e}");
                    return None;
                }
                *self.counters.rewritten.entry(nr).or_default() += 1;
                trace!("{pid}: sched_setaffinity {requested} clamped to {effective}");
                Some(Pending::SetAffinity { buf, original, rejected: false })
            }
            Clamp::Reject => {
                if let Err(e) = arch::set_sysno(pid, regs, -1) {
                    info!("{pid}: cannot suppress sched_setaffinity: {e}");
                    return None;
                }
                *self.counters.rewritten.entry(nr).or_default() += 1;
                trace!("{pid}: sched_setaffinity {requested} outside {}", ctx.allowed);
                Some(Pending::SetAffinity {
                    buf,
                    original: Vec::new(),
                    rejected: true,
                })
            }
        }
    }

    fn open_entry(&mut self, pid: Pid, regs: &mut Regs, arg: usize, dirfd: Option<i32>) -> Option<Pending> {
        let ctx = self.registry.lookup_context(pid.as_raw())?;
        if self.is_identity(&ctx) {
            return None;
        }
        let path_ptr = regs.arg(arg);
        let raw = read_cstring(pid, path_ptr, PATH_MAX).ok()?;
        let raw = String::from_utf8(raw).ok()?;
        let canonical = if raw.starts_with('/') {
            path::normalize(&raw)?
        } else {
            let base = match dirfd {
                Some(fd) if fd != AT_FDCWD => std::fs::read_link(format!("/proc/{pid}/fd/{fd}")),
                _ => std::fs::read_link(format!("/proc/{pid}/cwd")),
            }
            .ok()?;
            path::resolve(base.to_str()?, &raw)?
        };
        rule_for(&canonical)?;
        let target = match self.forge.redirect_target(&self.topo, ctx.id, &ctx.allowed, &canonical) {
            Ok(Some(p)) => p,
            Ok(None) => return None,
            Err(e) => {
                info!("{pid}: no forged file for {canonical}: {e}");
                return None;
            }
        };
        let mut bytes = target.into_os_string().into_encoded_bytes();
        bytes.push(0);
        if bytes.len() as u64 > SCRATCH_LEN {
            info!("{pid}: forged path too long for the scratch region");
            return None;
        }
        let scratch = (regs.sp() - RED_ZONE - SCRATCH_LEN) & !15;
        let saved = read_mem(pid, scratch, bytes.len()).ok()?;
        if let Err(e) = write_mem(pid, scratch, &bytes) {
            info!("{pid}: scratch write failed: {e}");
            return None;
        }
        regs.set_arg(arg, scratch);
        if let Err(e) = regs.write(pid) {
            info!("{pid}: cannot repoint path argument: {e}");
            let _ = write_mem(pid, scratch, &saved);
            return None;
        }
        self.counters.redirected += 1;
        *self.counters.rewritten.entry(regs.sysno()).or_default() += 1;
        trace!("{pid}: {canonical} redirected for {}", ctx.id);
        Some(Pending::Open { arg, path_ptr, scratch, saved })
    }

    /// Regenerates the forged files of a context after reconfiguration.
    pub fn refresh(&mut self, ctx: &Context) -> Result<()> {
        self.forge.refresh(&self.topo, ctx.id, &ctx.allowed).map(drop)
    }
}
