//! The tracer: spawns or seizes tasks, runs the ptrace event loop and
//! serves the control channel of an in-process client.
//!
//! All tracing happens on the thread that created the [`Monitor`]; ptrace
//! relations belong to a thread, and waits use `__WNOTHREAD` so children of
//! other threads in the same process are left alone.

use std::collections::{HashMap, HashSet};
use std::ffi::{CStr, CString};
use std::fs::File;
use std::io::{Read, Write};
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd, RawFd};
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use libctx_core::protocol::{ErrorCode, Reply, Request};
use libctx_core::{ContextId, CpuSet, HostTopology};
use nix::errno::Errno;
use nix::fcntl::OFlag;
use nix::sys::ptrace::{self, Options};
use nix::unistd::{pipe2, Pid};

use crate::affinity::{self, MASK_BYTES};
use crate::arch::Regs;
use crate::diag::{self, info, trace};
use crate::error::{Error, Result};
use crate::forge::ForgeStore;
use crate::host::read_host_topology;
use crate::registry::{Registry, Tid};
use crate::seccomp::FilterProgram;
use crate::virt::{Counters, Interposer};

#[derive(Debug, Clone)]
pub struct MonitorOptions {
    /// Trace every syscall instead of installing the filter.
    pub trace_all: bool,
    /// Directory under which forged files are created.
    pub forge_root: PathBuf,
    /// Topology presented to contexts in place of the host's. Kernel
    /// affinity is still clipped to the host's online CPUs.
    pub topology: Option<HostTopology>,
}

impl Default for MonitorOptions {
    fn default() -> Self {
        MonitorOptions {
            trace_all: false,
            forge_root: std::env::temp_dir(),
            topology: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Code(i32),
    Signal(i32),
}

impl ExitStatus {
    /// Shell-style status: the exit code, or 128 plus the signal.
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Code(c) => c,
            ExitStatus::Signal(s) => 128 + s,
        }
    }

    pub fn success(self) -> bool {
        self == ExitStatus::Code(0)
    }
}

#[derive(Debug, Clone)]
pub struct ChildReport {
    pub pid: i32,
    pub ctx: ContextId,
    pub status: ExitStatus,
    pub elapsed: Duration,
}

/// Set from a signal handler to make [`Monitor::run`] kill its tracees.
pub static INTERRUPTED: AtomicBool = AtomicBool::new(false);

fn options() -> Options {
    Options::PTRACE_O_TRACESECCOMP
        | Options::PTRACE_O_TRACESYSGOOD
        | Options::PTRACE_O_TRACECLONE
        | Options::PTRACE_O_TRACEFORK
        | Options::PTRACE_O_TRACEVFORK
        | Options::PTRACE_O_TRACEEXEC
        | Options::PTRACE_O_TRACEEXIT
        | Options::PTRACE_O_EXITKILL
}

/// One decoded `waitpid` result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stop {
    Exited(Tid, i32),
    Signaled(Tid, i32),
    Syscall(Tid),
    Event(Tid, i32, i32),
    Signal(Tid, i32),
}

fn wait_any(nohang: bool) -> nix::Result<Option<Stop>> {
    let mut status = 0;
    let flags = libc::__WALL | libc::__WNOTHREAD | if nohang { libc::WNOHANG } else { 0 };
    let pid = Errno::result(unsafe { libc::waitpid(-1, &mut status, flags) })?;
    if pid == 0 {
        return Ok(None);
    }
    Ok(Some(if libc::WIFEXITED(status) {
        Stop::Exited(pid, libc::WEXITSTATUS(status))
    } else if libc::WIFSIGNALED(status) {
        Stop::Signaled(pid, libc::WTERMSIG(status))
    } else {
        let sig = libc::WSTOPSIG(status);
        let event = status >> 16;
        if sig == libc::SIGTRAP | 0x80 {
            Stop::Syscall(pid)
        } else if event != 0 {
            Stop::Event(pid, sig, event)
        } else {
            Stop::Signal(pid, sig)
        }
    }))
}

fn restart(req: libc::c_uint, tid: Tid, sig: i32) -> nix::Result<()> {
    let r = unsafe { libc::ptrace(req, tid, std::ptr::null_mut::<libc::c_void>(), sig as usize as *mut libc::c_void) };
    Errno::result(r).map(drop)
}

struct Root {
    ctx: ContextId,
    started: Instant,
}

pub struct Monitor {
    opts: MonitorOptions,
    interposer: Interposer,
    real_online: CpuSet,
    filter: FilterProgram,
    tasks: HashSet<Tid>,
    /// Created by a traced clone; their first stop has not arrived yet.
    fresh: HashSet<Tid>,
    /// Stopped before their creator's clone event was seen.
    held: HashSet<Tid>,
    roots: HashMap<Tid, Root>,
    reports: Vec<ChildReport>,
    shut_down: bool,
}

impl Monitor {
    pub fn new(opts: MonitorOptions) -> Result<Monitor> {
        let host = read_host_topology()?;
        Monitor::with_host(opts, host)
    }

    fn with_host(opts: MonitorOptions, host: HostTopology) -> Result<Monitor> {
        let real_online = host.online;
        let topo = opts.topology.clone().unwrap_or(host);
        let registry = Arc::new(Registry::new(topo.online));
        let forge = ForgeStore::new(&opts.forge_root)?;
        Ok(Monitor {
            interposer: Interposer::new(registry, Arc::new(topo), forge),
            real_online,
            filter: FilterProgram::native(),
            opts,
            tasks: HashSet::new(),
            fresh: HashSet::new(),
            held: HashSet::new(),
            roots: HashMap::new(),
            reports: Vec::new(),
            shut_down: false,
        })
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.interposer.registry
    }

    /// Topology presented to contexts.
    pub fn topology(&self) -> &HostTopology {
        &self.interposer.topo
    }

    pub fn counters(&self) -> &Counters {
        &self.interposer.counters
    }

    pub fn forge(&self) -> &ForgeStore {
        &self.interposer.forge
    }

    pub fn create_context(&mut self, allowed: CpuSet) -> Result<ContextId> {
        self.registry().create_context(allowed)
    }

    /// Replaces the allowed set, regenerates forged files that exist and
    /// re-pins every bound thread.
    pub fn set_allowed_cpus(&mut self, ctx: ContextId, allowed: CpuSet) -> Result<()> {
        let record = self.registry().set_allowed_cpus(ctx, allowed)?;
        if self.interposer.forge.get(ctx).is_some() {
            self.interposer.refresh(&record)?;
        }
        for tid in self.registry().bound_threads(ctx) {
            self.pin(tid, ctx);
        }
        Ok(())
    }

    pub fn setenv(&mut self, ctx: ContextId, name: &str, value: &str) -> Result<()> {
        self.registry().setenv(ctx, name, value)
    }

    pub fn unsetenv(&mut self, ctx: ContextId, name: &str) -> Result<()> {
        self.registry().unsetenv(ctx, name)
    }

    /// Kernel mask for `ctx`, or `None` when its affinity is left alone.
    fn pin_mask(&self, ctx: ContextId) -> Option<CpuSet> {
        let c = self.registry().get(ctx)?;
        if c.allowed == self.interposer.topo.online {
            return None;
        }
        let set = c.allowed.intersection(&self.real_online);
        (!set.is_empty()).then_some(set)
    }

    /// Applies the context's CPUs to `tid`; a vanished thread loses its binding.
    fn pin(&self, tid: Tid, ctx: ContextId) {
        let Some(set) = self.pin_mask(ctx) else { return };
        match affinity::set_affinity(tid, &set) {
            Ok(()) => trace!("{tid}: pinned to {set}"),
            Err(Errno::ESRCH) => {
                self.registry().unbind(tid);
            }
            Err(e) => info!("{tid}: cannot pin to {set}: {e}"),
        }
    }

    /// Starts `argv` under `ctx`: the child is seized, pinned, filtered and
    /// only then allowed to exec. Returns the child's pid.
    pub fn spawn(&mut self, ctx: ContextId, argv: &[String]) -> Result<i32> {
        self.spawn_with_stdout(ctx, argv, None)
    }

    /// [`spawn`](Self::spawn) with the child's standard output sent to `stdout`.
    pub fn spawn_with_stdout(&mut self, ctx: ContextId, argv: &[String], stdout: Option<RawFd>) -> Result<i32> {
        let record = self.registry().get(ctx).ok_or(Error::UnknownContext(ctx))?;
        let program = argv.first().ok_or_else(|| Error::ProgramNotFound(String::new()))?;
        let path = resolve_program(program).ok_or_else(|| Error::ProgramNotFound(program.clone()))?;

        let cpath = CString::new(path.as_os_str().as_bytes()).map_err(|_| Error::ProgramNotFound(program.clone()))?;
        let cargs: Vec<CString> = argv
            .iter()
            .map(|a| CString::new(a.as_bytes()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::ProgramNotFound(program.clone()))?;
        let cenv: Vec<CString> = record
            .env
            .apply(std::env::vars_os().filter_map(|(k, v)| Some((k.into_string().ok()?, v.into_string().ok()?))))
            .into_iter()
            .filter_map(|(k, v)| CString::new(format!("{k}={v}")).ok())
            .collect();
        let argp = nul_terminated(&cargs);
        let envp = nul_terminated(&cenv);
        let mask = match self.pin_mask(ctx) {
            Some(set) => set.encode_kernel_mask(MASK_BYTES)?,
            None => Vec::new(),
        };
        let filter = (!self.opts.trace_all).then_some(&self.filter);

        let (go_r, go_w) = pipe2(OFlag::O_CLOEXEC).map_err(|e| Error::sys("pipe", e))?;
        let (err_r, err_w) = pipe2(OFlag::O_CLOEXEC).map_err(|e| Error::sys("pipe", e))?;
        let pid = unsafe { libc::fork() };
        if pid < 0 {
            return Err(Error::sys("fork", Errno::last()));
        }
        if pid == 0 {
            unsafe {
                exec_child(go_r.as_raw_fd(), err_w.as_raw_fd(), stdout, &mask, filter, &cpath, &argp, &envp);
            }
        }
        drop(go_r);
        drop(err_w);
        let child = Pid::from_raw(pid);
        if let Err(errno) = ptrace::seize(child, options()) {
            unsafe { libc::kill(pid, libc::SIGKILL) };
            reap(pid);
            return Err(Error::AttachDenied { pid, errno });
        }
        let mut go = File::from(go_w);
        let _ = go.write_all(b"g");
        drop(go);
        let mut report = [0u8; 8];
        let n = read_full(&mut File::from(err_r), &mut report);
        if n == 8 {
            let stage = i32::from_le_bytes(report[..4].try_into().unwrap());
            let errno = Errno::from_raw(i32::from_le_bytes(report[4..].try_into().unwrap()));
            self.drain(pid);
            return Err(match stage {
                STAGE_FILTER => Error::FilterRejected(errno),
                _ => Error::Spawn {
                    program: program.clone(),
                    errno,
                },
            });
        }
        self.registry().bind(pid, ctx)?;
        self.tasks.insert(pid);
        self.roots.insert(
            pid,
            Root {
                ctx,
                started: Instant::now(),
            },
        );
        info!("spawned {program} as {pid} in {ctx}");
        Ok(pid)
    }

    /// Lets a child that failed before exec run to its exit.
    fn drain(&mut self, pid: Tid) {
        loop {
            match wait_any(false) {
                Ok(Some(Stop::Exited(p, _) | Stop::Signaled(p, _))) if p == pid => return,
                Ok(Some(stop)) => self.handle(stop),
                Ok(None) => {}
                Err(Errno::EINTR) => {}
                Err(_) => return,
            }
        }
    }

    /// Runs the event loop until every traced task has exited; returns the
    /// reports of the spawned roots in exit order.
    pub fn run(&mut self) -> Result<Vec<ChildReport>> {
        let mut killed = false;
        while !self.tasks.is_empty() || !self.held.is_empty() {
            if !killed && INTERRUPTED.load(Ordering::Relaxed) {
                self.kill_all();
                killed = true;
            }
            match wait_any(false) {
                Ok(Some(stop)) => self.handle(stop),
                Ok(None) | Err(Errno::EINTR) => {}
                Err(Errno::ECHILD) => break,
                Err(e) => return Err(Error::sys("waitpid", e)),
            }
        }
        self.tasks.clear();
        self.held.clear();
        Ok(std::mem::take(&mut self.reports))
    }

    /// Sends SIGKILL to every traced task.
    pub fn kill_all(&mut self) {
        for &tid in self.tasks.iter().chain(self.held.iter()) {
            unsafe { libc::kill(tid, libc::SIGKILL) };
        }
    }

    fn resume(&self, tid: Tid, sig: i32) {
        let req = if self.opts.trace_all || self.interposer.has_pending(tid) {
            libc::PTRACE_SYSCALL
        } else {
            libc::PTRACE_CONT
        };
        if let Err(e) = restart(req, tid, sig) {
            trace!("{tid}: resume failed: {e}");
        }
    }

    fn handle(&mut self, stop: Stop) {
        self.interposer.counters.stops += 1;
        match stop {
            Stop::Event(tid, _, libc::PTRACE_EVENT_SECCOMP) => {
                self.syscall_entry(tid);
                self.resume(tid, 0);
            }
            Stop::Syscall(tid) => {
                let pid = Pid::from_raw(tid);
                let entering = self.opts.trace_all
                    && ptrace::syscall_info(pid).map(|i| i.op == libc::PTRACE_SYSCALL_INFO_ENTRY).unwrap_or(false);
                if entering {
                    self.syscall_entry(tid);
                } else if let Ok(mut regs) = Regs::read(pid) {
                    self.interposer.on_exit(pid, &mut regs);
                } else {
                    self.interposer.forget(tid);
                }
                self.resume(tid, 0);
            }
            Stop::Event(tid, _, ev @ (libc::PTRACE_EVENT_CLONE | libc::PTRACE_EVENT_FORK | libc::PTRACE_EVENT_VFORK)) => {
                match ptrace::getevent(Pid::from_raw(tid)) {
                    Ok(child) => self.adopt(tid, child as Tid, ev),
                    Err(e) => info!("{tid}: lost new task id: {e}"),
                }
                self.resume(tid, 0);
            }
            Stop::Event(tid, _, libc::PTRACE_EVENT_EXEC) => {
                if let Ok(former) = ptrace::getevent(Pid::from_raw(tid)) {
                    let former = former as Tid;
                    if former != tid {
                        self.registry().rename(former, tid);
                        self.tasks.remove(&former);
                        self.interposer.forget(former);
                    }
                }
                self.interposer.forget(tid);
                trace!("{tid}: exec");
                self.resume(tid, 0);
            }
            Stop::Event(tid, _, libc::PTRACE_EVENT_EXIT) => {
                self.resume(tid, 0);
            }
            Stop::Event(tid, sig, libc::PTRACE_EVENT_STOP) => {
                if self.fresh.remove(&tid) {
                    self.resume(tid, 0);
                } else if !self.tasks.contains(&tid) {
                    self.held.insert(tid);
                } else if matches!(sig, libc::SIGSTOP | libc::SIGTSTP | libc::SIGTTIN | libc::SIGTTOU) {
                    if restart(libc::PTRACE_LISTEN as libc::c_uint, tid, 0).is_err() {
                        self.resume(tid, 0);
                    }
                } else {
                    self.resume(tid, 0);
                }
            }
            Stop::Event(tid, sig, ev) => {
                info!("{tid}: unexpected ptrace event {ev} (signal {sig}); resuming");
                self.resume(tid, 0);
            }
            Stop::Signal(tid, sig) => {
                if !self.tasks.contains(&tid) {
                    self.held.insert(tid);
                } else {
                    self.resume(tid, sig);
                }
            }
            Stop::Exited(tid, code) => self.reap_task(tid, ExitStatus::Code(code)),
            Stop::Signaled(tid, sig) => self.reap_task(tid, ExitStatus::Signal(sig)),
        }
    }

    fn syscall_entry(&mut self, tid: Tid) {
        let pid = Pid::from_raw(tid);
        match Regs::read(pid) {
            Ok(mut regs) => {
                self.interposer.on_entry(pid, &mut regs);
            }
            Err(e) => trace!("{tid}: registers unavailable: {e}"),
        }
    }

    /// A traced task created `child`: inherit the binding and pin it before
    /// it runs any code.
    fn adopt(&mut self, parent: Tid, child: Tid, ev: i32) {
        if let Some(ctx) = self.registry().inherit(parent, child) {
            self.pin(child, ctx);
            trace!("{parent}: new task {child} (event {ev}) joins {ctx}");
        }
        self.tasks.insert(child);
        if self.held.remove(&child) {
            self.resume(child, 0);
        } else {
            self.fresh.insert(child);
        }
    }

    fn reap_task(&mut self, tid: Tid, status: ExitStatus) {
        self.tasks.remove(&tid);
        self.fresh.remove(&tid);
        self.held.remove(&tid);
        self.registry().unbind(tid);
        self.interposer.forget(tid);
        if let Some(root) = self.roots.remove(&tid) {
            info!("{tid} exited with {status:?}");
            self.reports.push(ChildReport {
                pid: tid,
                ctx: root.ctx,
                status,
                elapsed: root.started.elapsed(),
            });
        }
    }

    fn control(&mut self, req: Request) -> Reply {
        if self.shut_down && req != Request::Shutdown {
            return Reply::Err(ErrorCode::Io);
        }
        let res = match req {
            Request::CreateCtx { allowed } => self.create_context(allowed).map(|id| id.0),
            Request::SetCpus { ctx, allowed } => self.set_allowed_cpus(ctx, allowed).map(|_| 0),
            Request::SetEnv { ctx, name, value } => self.setenv(ctx, &name, &value).map(|_| 0),
            Request::UnsetEnv { ctx, name } => self.unsetenv(ctx, &name).map(|_| 0),
            Request::Bind { tid, ctx } => {
                if !Path::new(&format!("/proc/{tid}")).exists() {
                    return Reply::Err(ErrorCode::NoSuchThread);
                }
                self.registry().bind(tid, ctx).map(|_| 0)
            }
            Request::Unbind { tid } => match self.registry().unbind(tid) {
                Some(prev) => Ok(prev.0),
                None => return Reply::Err(ErrorCode::NotBound),
            },
            Request::Shutdown => {
                self.registry().unbind_all();
                self.interposer.forge.clear();
                self.shut_down = true;
                info!("shut down; tracing continues as pass-through");
                Ok(0)
            }
        };
        match res {
            Ok(v) => Reply::Ok(v),
            Err(e) => {
                trace!("control request failed: {e}");
                Reply::Err(e.code())
            }
        }
    }

    /// Seizes every thread of `pid`, repeating until a pass finds no new
    /// thread. Threads created meanwhile by seized threads arrive through
    /// clone events.
    fn seize_process(&mut self, pid: Tid) -> nix::Result<()> {
        loop {
            let mut added = false;
            let dir = std::fs::read_dir(format!("/proc/{pid}/task")).map_err(|_| Errno::ESRCH)?;
            for entry in dir.flatten() {
                let Some(tid) = entry.file_name().to_str().and_then(|s| s.parse::<Tid>().ok()) else {
                    continue;
                };
                if self.tasks.contains(&tid) {
                    continue;
                }
                match ptrace::seize(Pid::from_raw(tid), options()) {
                    Ok(()) => {
                        self.tasks.insert(tid);
                        added = true;
                    }
                    Err(Errno::ESRCH) => {}
                    Err(Errno::EPERM) if self.tasks.contains(&tid) => {}
                    Err(e) => return Err(e),
                }
            }
            if !added {
                return Ok(());
            }
        }
    }

    /// Serves an in-process client until all of its threads have exited.
    fn serve(&mut self, req_fd: OwnedFd, rep_fd: OwnedFd) {
        let mut mask: libc::sigset_t = unsafe { std::mem::zeroed() };
        unsafe {
            libc::sigemptyset(&mut mask);
            libc::sigaddset(&mut mask, libc::SIGCHLD);
            libc::sigprocmask(libc::SIG_BLOCK, &mask, std::ptr::null_mut());
        }
        let sfd = unsafe { libc::signalfd(-1, &mask, libc::SFD_NONBLOCK | libc::SFD_CLOEXEC) };
        if sfd < 0 {
            info!("signalfd failed: {}", Errno::last());
            return;
        }
        let sfd = unsafe { OwnedFd::from_raw_fd(sfd) };
        let mut req = File::from(req_fd);
        let mut rep = File::from(rep_fd);
        let mut buf: Vec<u8> = Vec::new();
        let mut req_open = true;
        loop {
            loop {
                match wait_any(true) {
                    Ok(Some(stop)) => self.handle(stop),
                    Ok(None) | Err(Errno::EINTR) => break,
                    Err(_) => {
                        self.tasks.clear();
                        break;
                    }
                }
            }
            if self.tasks.is_empty() {
                return;
            }
            let mut fds = [
                libc::pollfd {
                    fd: sfd.as_raw_fd(),
                    events: libc::POLLIN,
                    revents: 0,
                },
                libc::pollfd {
                    fd: if req_open { req.as_raw_fd() } else { -1 },
                    events: libc::POLLIN,
                    revents: 0,
                },
            ];
            let r = unsafe { libc::poll(fds.as_mut_ptr(), 2, -1) };
            if r < 0 {
                continue;
            }
            if fds[0].revents != 0 {
                let mut info = [0u8; 128];
                while unsafe { libc::read(sfd.as_raw_fd(), info.as_mut_ptr().cast(), info.len()) } > 0 {}
            }
            if fds[1].revents != 0 {
                let mut chunk = [0u8; 4096];
                match req.read(&mut chunk) {
                    Ok(0) | Err(_) => req_open = false,
                    Ok(n) => buf.extend_from_slice(&chunk[..n]),
                }
                loop {
                    match Request::decode(&buf) {
                        Ok(Some((r, used))) => {
                            buf.drain(..used);
                            let reply = self.control(r);
                            let _ = rep.write_all(&reply.encode());
                        }
                        Ok(None) => break,
                        Err(e) => {
                            info!("dropping malformed control stream: {e}");
                            buf.clear();
                            let _ = rep.write_all(&Reply::Err(ErrorCode::Malformed).encode());
                            break;
                        }
                    }
                }
            }
        }
    }
}

const STAGE_AFFINITY: i32 = 1;
const STAGE_FILTER: i32 = 2;
const STAGE_EXEC: i32 = 3;

fn nul_terminated(v: &[CString]) -> Vec<*const libc::c_char> {
    v.iter().map(|c| c.as_ptr()).chain(std::iter::once(std::ptr::null())).collect()
}

/// Child side of [`Monitor::spawn`]; only async-signal-safe calls.
unsafe fn exec_child(
    go: RawFd,
    err: RawFd,
    stdout: Option<RawFd>,
    mask: &[u8],
    filter: Option<&FilterProgram>,
    path: &CStr,
    argv: &[*const libc::c_char],
    envp: &[*const libc::c_char],
) -> ! {
    let fail = |stage: i32, errno: i32| -> ! {
        let mut msg = [0u8; 8];
        msg[..4].copy_from_slice(&stage.to_le_bytes());
        msg[4..].copy_from_slice(&errno.to_le_bytes());
        libc::write(err, msg.as_ptr().cast(), 8);
        libc::_exit(127)
    };
    let mut b = 0u8;
    if libc::read(go, (&mut b as *mut u8).cast(), 1) != 1 {
        libc::_exit(127);
    }
    let mut set: libc::sigset_t = std::mem::zeroed();
    libc::sigemptyset(&mut set);
    libc::sigprocmask(libc::SIG_SETMASK, &set, std::ptr::null_mut());
    libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    if let Some(fd) = stdout {
        if libc::dup2(fd, 1) < 0 {
            fail(STAGE_EXEC, Errno::last_raw());
        }
    }
    if !mask.is_empty() && affinity::set_affinity_raw(0, mask).is_err() {
        fail(STAGE_AFFINITY, Errno::last_raw());
    }
    if let Some(f) = filter {
        if let Err(e) = f.install(false) {
            fail(STAGE_FILTER, e as i32);
        }
    }
    libc::execve(path.as_ptr(), argv.as_ptr(), envp.as_ptr());
    fail(STAGE_EXEC, Errno::last_raw())
}

fn read_full(f: &mut File, buf: &mut [u8]) -> usize {
    let mut n = 0;
    while n < buf.len() {
        match f.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(_) => break,
        }
    }
    n
}

fn reap(pid: i32) {
    let mut status = 0;
    unsafe { libc::waitpid(pid, &mut status, libc::__WALL) };
}

fn is_executable(p: &Path) -> bool {
    p.is_file() && nix::unistd::access(p, nix::unistd::AccessFlags::X_OK).is_ok()
}

/// Finds `program` the way `execvp` would.
pub fn resolve_program(program: &str) -> Option<PathBuf> {
    if program.is_empty() {
        return None;
    }
    if program.contains('/') {
        let p = PathBuf::from(program);
        return is_executable(&p).then_some(p);
    }
    let path = std::env::var_os("PATH").unwrap_or_else(|| "/usr/local/bin:/usr/bin:/bin".into());
    std::env::split_paths(&path).map(|d| d.join(program)).find(|p| is_executable(p))
}

/// Runs `argv` in a fresh context on `allowed` with `env` applied and waits
/// for the whole process tree.
pub fn spawn_supervised(
    argv: &[String],
    allowed: CpuSet,
    env: &[(String, Option<String>)],
    opts: MonitorOptions,
) -> Result<(ChildReport, Counters)> {
    let mut m = Monitor::new(opts)?;
    let ctx = m.create_context(allowed)?;
    for (k, v) in env {
        match v {
            Some(v) => m.setenv(ctx, k, v)?,
            None => m.unsetenv(ctx, k)?,
        }
    }
    m.spawn(ctx, argv)?;
    let report = m.run()?.pop().expect("root report");
    Ok((report, m.counters().clone()))
}

static ATTACHED: AtomicBool = AtomicBool::new(false);

/// Channel to a monitor serving this process.
#[derive(Debug)]
pub struct Attachment {
    pub monitor_pid: i32,
    pub requests: File,
    pub replies: File,
    /// Online CPUs presented to contexts.
    pub online: CpuSet,
    /// Host online CPUs.
    pub host_online: CpuSet,
}

/// Forks a monitor that seizes every thread of this process, then installs
/// the filter on all threads. Allowed once per process.
pub fn attach_inprocess(opts: MonitorOptions) -> Result<Attachment> {
    if ATTACHED.swap(true, Ordering::SeqCst) {
        return Err(Error::AlreadyInitialized);
    }
    if opts.trace_all {
        ATTACHED.store(false, Ordering::SeqCst);
        return Err(Error::Handshake("tracing every syscall is only available for spawned children".into()));
    }
    let res = attach(opts);
    if res.is_err() {
        ATTACHED.store(false, Ordering::SeqCst);
    }
    res
}

fn attach(opts: MonitorOptions) -> Result<Attachment> {
    diag::level();
    let host = read_host_topology()?;
    let host_online = host.online;
    let online = opts.topology.as_ref().map_or(host.online, |t| t.online);
    let filter = FilterProgram::native();
    let pipe = || pipe2(OFlag::O_CLOEXEC).map_err(|e| Error::sys("pipe", e));
    let (req_r, req_w) = pipe()?;
    let (rep_r, rep_w) = pipe()?;
    let (go_r, go_w) = pipe()?;
    let (ready_r, ready_w) = pipe()?;
    let app = std::process::id() as Tid;

    let pid = unsafe { libc::fork() };
    if pid < 0 {
        return Err(Error::sys("fork", Errno::last()));
    }
    if pid == 0 {
        drop((req_w, rep_r, go_w, ready_r));
        let code = monitor_child(app, opts, host, go_r, ready_w, req_r, rep_w);
        unsafe { libc::_exit(code) };
    }
    drop((req_r, rep_w, go_r, ready_w));
    unsafe { libc::prctl(libc::PR_SET_PTRACER, pid as libc::c_ulong, 0, 0, 0) };
    let mut go = File::from(go_w);
    let _ = go.write_all(b"g");
    let mut status = [0u8; 4];
    let n = read_full(&mut File::from(ready_r), &mut status);
    let errno = i32::from_le_bytes(status);
    if n != 4 || errno != 0 {
        reap(pid);
        return Err(Error::AttachDenied {
            pid: app,
            errno: if n == 4 { Errno::from_raw(errno) } else { Errno::EPIPE },
        });
    }
    if let Err(e) = filter.install(true) {
        unsafe { libc::kill(pid, libc::SIGKILL) };
        return Err(Error::FilterRejected(e));
    }
    info!("in-process monitor {pid} attached");
    Ok(Attachment {
        monitor_pid: pid,
        requests: File::from(req_w),
        replies: File::from(rep_r),
        online,
        host_online,
    })
}

fn monitor_child(app: Tid, opts: MonitorOptions, host: HostTopology, go: OwnedFd, ready: OwnedFd, req: OwnedFd, rep: OwnedFd) -> i32 {
    let mut ready = File::from(ready);
    let mut b = [0u8; 1];
    if read_full(&mut File::from(go), &mut b) != 1 {
        return 1;
    }
    let mut monitor = match Monitor::with_host(opts, host) {
        Ok(m) => m,
        Err(e) => {
            info!("monitor setup failed: {e}");
            let _ = ready.write_all(&(Errno::EIO as i32).to_le_bytes());
            return 1;
        }
    };
    if let Err(e) = monitor.seize_process(app) {
        let _ = ready.write_all(&(e as i32).to_le_bytes());
        return 1;
    }
    // Seized tasks keep running; their first stop is not an initial stop.
    let _ = ready.write_all(&0i32.to_le_bytes());
    drop(ready);
    monitor.serve(req, rep);
    drop(monitor);
    0
}
