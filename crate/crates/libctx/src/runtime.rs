//! In-process API: contexts for the libraries of this process, served by a
//! forked monitor over a private pipe.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use libctx_core::protocol::{ErrorCode, Reply, Request};
use libctx_core::{ContextId, CpuSet};

use crate::affinity;
use crate::error::{Error, Result};
use crate::loader::{LibraryHandle, Loader, ServicePage};
use crate::monitor::{attach_inprocess, MonitorOptions};
use crate::registry::{Context, Registry};
use crate::scope::{self, Frame, MAX_DEPTH};

struct Channel {
    requests: File,
    replies: File,
    buf: Vec<u8>,
}

impl Channel {
    fn call(&mut self, req: &Request) -> Result<u32> {
        self.requests
            .write_all(&req.encode())
            .map_err(|e| Error::io("control channel write", e))?;
        loop {
            if let Some((reply, used)) = Reply::decode(&self.buf)? {
                self.buf.drain(..used);
                return match reply {
                    Reply::Ok(v) => Ok(v),
                    Reply::Err(code) => Err(Error::Monitor(code)),
                };
            }
            let mut chunk = [0u8; 64];
            match self.replies.read(&mut chunk) {
                Ok(0) => return Err(Error::Handshake("monitor closed the control channel".into())),
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::io("control channel read", e)),
            }
        }
    }
}

pub struct Runtime {
    channel: Mutex<Channel>,
    monitor_pid: i32,
    mirror: Registry,
    host_online: CpuSet,
    loader: Mutex<Loader>,
    shut_down: AtomicBool,
}

static RUNTIME: OnceLock<&'static Runtime> = OnceLock::new();

impl Runtime {
    /// Forks the monitor, has it seize this process and installs the
    /// filter. A second call fails with [`Error::AlreadyInitialized`].
    pub fn initialize(opts: MonitorOptions) -> Result<&'static Runtime> {
        let att = attach_inprocess(opts)?;
        let rt: &'static Runtime = Box::leak(Box::new(Runtime {
            channel: Mutex::new(Channel {
                requests: att.requests,
                replies: att.replies,
                buf: Vec::new(),
            }),
            monitor_pid: att.monitor_pid,
            mirror: Registry::new(att.online),
            host_online: att.host_online,
            loader: Mutex::new(Loader::new()),
            shut_down: AtomicBool::new(false),
        }));
        let _ = RUNTIME.set(rt);
        Ok(rt)
    }

    /// The runtime of this process, once initialized.
    pub fn get() -> Option<&'static Runtime> {
        RUNTIME.get().copied()
    }

    pub fn monitor_pid(&self) -> i32 {
        self.monitor_pid
    }

    /// CPUs contexts may be given.
    pub fn online(&self) -> &CpuSet {
        self.mirror.online()
    }

    fn call(&self, req: Request) -> Result<u32> {
        self.channel.lock().unwrap_or_else(|e| e.into_inner()).call(&req)
    }

    pub fn context(&self, ctx: ContextId) -> Option<Arc<Context>> {
        self.mirror.get(ctx)
    }

    pub fn create_context(&self, allowed: CpuSet) -> Result<ContextId> {
        self.mirror.check_allowed(&allowed)?;
        let id = ContextId(self.call(Request::CreateCtx { allowed })?);
        self.mirror.insert_context(id, allowed)?;
        Ok(id)
    }

    /// Changes the CPUs of `ctx`. The monitor re-pins every bound thread and
    /// regenerates the context's forged files.
    pub fn set_allowed_cpus(&self, ctx: ContextId, allowed: CpuSet) -> Result<()> {
        self.mirror.check_allowed(&allowed)?;
        self.mirror.get(ctx).ok_or(Error::UnknownContext(ctx))?;
        self.call(Request::SetCpus { ctx, allowed })?;
        self.mirror.set_allowed_cpus(ctx, allowed).map(drop)
    }

    /// Records an environment override, applied while libraries load into `ctx`.
    pub fn setenv(&self, ctx: ContextId, name: &str, value: &str) -> Result<()> {
        self.mirror.setenv(ctx, name, value)?;
        self.call(Request::SetEnv {
            ctx,
            name: name.into(),
            value: value.into(),
        })
        .map(drop)
    }

    pub fn unsetenv(&self, ctx: ContextId, name: &str) -> Result<()> {
        self.mirror.unsetenv(ctx, name)?;
        self.call(Request::UnsetEnv { ctx, name: name.into() }).map(drop)
    }

    fn rebind(&self, tid: i32, from: Option<ContextId>, to: Option<ContextId>) -> Result<()> {
        if from == to || self.shut_down.load(Ordering::Acquire) {
            return Ok(());
        }
        if from.is_some() {
            match self.call(Request::Unbind { tid }) {
                Ok(_) | Err(Error::Monitor(ErrorCode::NotBound)) => {}
                Err(e) => return Err(e),
            }
        }
        if let Some(ctx) = to {
            if let Err(e) = self.call(Request::Bind { tid, ctx }) {
                if let Some(prev) = from {
                    let _ = self.call(Request::Bind { tid, ctx: prev });
                }
                return Err(e);
            }
        }
        Ok(())
    }

    /// Binds the calling thread to `ctx`, returning the binding it replaced.
    /// A thread with an empty stack may still carry a binding inherited from
    /// the thread that created it.
    fn bind_self(&self, tid: i32, ctx: ContextId) -> Result<Option<ContextId>> {
        if let Some(prev) = scope::current() {
            self.rebind(tid, Some(prev), Some(ctx))?;
            return Ok(Some(prev));
        }
        if self.shut_down.load(Ordering::Acquire) {
            return Ok(None);
        }
        match self.call(Request::Bind { tid, ctx }) {
            Ok(_) => Ok(None),
            Err(Error::Monitor(ErrorCode::AlreadyBound)) => {
                let inherited = ContextId(self.call(Request::Unbind { tid })?);
                self.rebind(tid, None, Some(ctx)).inspect_err(|_| {
                    let _ = self.call(Request::Bind { tid, ctx: inherited });
                })?;
                Ok(Some(inherited))
            }
            Err(e) => Err(e),
        }
    }

    fn enter_frame(&self, ctx: ContextId, saved_affinity: Option<Vec<u8>>) -> Result<()> {
        self.mirror.get(ctx).ok_or(Error::UnknownContext(ctx))?;
        if scope::depth() >= MAX_DEPTH {
            return Err(Error::StackDepth(scope::depth()));
        }
        let tid = nix::unistd::gettid().as_raw();
        let outer = self.bind_self(tid, ctx)?;
        scope::push(Frame { ctx, saved_affinity, outer })
    }

    /// Makes `ctx` the calling thread's context: resource queries from this
    /// thread (and threads it creates) see `ctx`, and calls through shims
    /// dispatch to `ctx`'s library instances. Contexts nest up to 8 deep.
    pub fn enter(&self, ctx: ContextId) -> Result<()> {
        self.enter_frame(ctx, None)
    }

    /// Like [`enter`](Self::enter), and also pins the calling thread to the
    /// context's CPUs until the matching [`exit`](Self::exit).
    pub fn enter_with_affinity(&self, ctx: ContextId) -> Result<()> {
        let saved = affinity::get_affinity_raw(0).map_err(|e| Error::sys("sched_getaffinity", e))?;
        self.enter_frame(ctx, Some(saved))?;
        let record = self.mirror.get(ctx).ok_or(Error::UnknownContext(ctx))?;
        if record.allowed != *self.mirror.online() {
            let set = record.allowed.intersection(&self.host_online);
            if !set.is_empty() {
                if let Err(e) = affinity::set_affinity(0, &set) {
                    let _ = self.exit();
                    return Err(Error::sys("sched_setaffinity", e));
                }
            }
        }
        Ok(())
    }

    /// Leaves the innermost context, returning to the enclosing one.
    pub fn exit(&self) -> Result<ContextId> {
        let frame = scope::pop()?;
        let tid = nix::unistd::gettid().as_raw();
        self.rebind(tid, Some(frame.ctx), frame.outer)?;
        if let Some(saved) = frame.saved_affinity {
            affinity::set_affinity_raw(0, &saved).map_err(|e| Error::sys("sched_setaffinity", e))?;
        }
        Ok(frame.ctx)
    }

    /// Loads `path` into `ctx`'s linker namespace with `ctx`'s environment
    /// overrides applied for the duration of the load.
    pub fn load(&self, ctx: ContextId, path: &Path, symbols: &[String]) -> Result<LibraryHandle> {
        let record = self.mirror.get(ctx).ok_or(Error::UnknownContext(ctx))?;
        self.loader.lock().unwrap().load_into_namespace(ctx, path, symbols, &record.env)
    }

    pub fn load_service(&self, path: &Path, symbols: &[String]) -> Result<ServicePage> {
        self.loader.lock().unwrap().load_service(path, symbols)
    }

    pub fn load_service_shim(&self, ctx: ContextId, shim: &Path, symbols: &[String]) -> Result<LibraryHandle> {
        let record = self.mirror.get(ctx).ok_or(Error::UnknownContext(ctx))?;
        self.loader.lock().unwrap().load_service_shim(ctx, shim, symbols, &record.env)
    }

    pub fn register_shim(&self, shim: &Path, symbols: &[String]) -> Result<usize> {
        self.loader.lock().unwrap().register_shim(shim, symbols)
    }

    /// Drops every binding and forged file. The monitor stays attached and
    /// passes every syscall through unmodified.
    pub fn shutdown(&self) -> Result<()> {
        if self.shut_down.swap(true, Ordering::AcqRel) {
            return Ok(());
        }
        self.call(Request::Shutdown).map(drop)
    }
}
