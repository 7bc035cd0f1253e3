//! Library instances per context: linker namespaces, jump tables, the
//! service context and its address page.

use std::collections::{BTreeMap, HashMap};
use std::ffi::{c_void, CStr, CString};
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use arc_swap::ArcSwap;
use libctx_core::context::{EnvOverride, EnvOverrides};
use libctx_core::shim::{BIND_SYMBOL, JUMP_TABLE_SLOTS, SERVICE_PAGE_ENV, SET_PAGE_SYMBOL};
use libctx_core::ContextId;

use crate::diag::info;
use crate::error::{Error, Result};
use crate::scope;

/// Namespaces this runtime hands out. glibc itself stops at 15 new
/// namespaces beside the base one, and its error is passed through.
pub const NAMESPACE_CAP: usize = 16;

pub type Lmid = libc::c_long;

/// The dynamic-loader entry points used here.
pub trait DynamicLoader: Send {
    /// Loads `path` into a new namespace; returns the handle and namespace.
    fn open_new_namespace(&mut self, path: &Path) -> Result<(usize, Lmid)>;
    fn open_in(&mut self, ns: Lmid, path: &Path) -> Result<usize>;
    /// Loads `path` into the base namespace.
    fn open_global(&mut self, path: &Path) -> Result<usize>;
    fn symbol(&mut self, handle: usize, name: &str) -> Option<usize>;
}

/// glibc's `dlmopen`/`dlopen`, with eager binding.
#[derive(Debug, Default)]
pub struct Glibc;

fn dl_error() -> String {
    let e = unsafe { libc::dlerror() };
    if e.is_null() {
        "unknown loader error".into()
    } else {
        unsafe { CStr::from_ptr(e) }.to_string_lossy().into_owned()
    }
}

fn c_path(path: &Path) -> Result<CString> {
    CString::new(path.as_os_str().as_bytes()).map_err(|_| Error::Loader(format!("path {} contains NUL", path.display())))
}

impl DynamicLoader for Glibc {
    fn open_new_namespace(&mut self, path: &Path) -> Result<(usize, Lmid)> {
        let handle = self.open_in(libc::LM_ID_NEWLM, path)?;
        let mut ns: Lmid = 0;
        let r = unsafe { libc::dlinfo(handle as *mut c_void, libc::RTLD_DI_LMID, (&mut ns as *mut Lmid).cast()) };
        if r != 0 {
            return Err(Error::Loader(dl_error()));
        }
        Ok((handle, ns))
    }

    fn open_in(&mut self, ns: Lmid, path: &Path) -> Result<usize> {
        let c = c_path(path)?;
        let h = unsafe { libc::dlmopen(ns, c.as_ptr(), libc::RTLD_NOW | libc::RTLD_LOCAL) };
        if h.is_null() {
            return Err(Error::Loader(dl_error()));
        }
        Ok(h as usize)
    }

    fn open_global(&mut self, path: &Path) -> Result<usize> {
        let c = c_path(path)?;
        let h = unsafe { libc::dlopen(c.as_ptr(), libc::RTLD_NOW | libc::RTLD_GLOBAL) };
        if h.is_null() {
            return Err(Error::Loader(dl_error()));
        }
        Ok(h as usize)
    }

    fn symbol(&mut self, handle: usize, name: &str) -> Option<usize> {
        let c = CString::new(name).ok()?;
        let p = unsafe { libc::dlsym(handle as *mut c_void, c.as_ptr()) };
        (!p.is_null()).then_some(p as usize)
    }
}

#[derive(Debug, Clone)]
pub struct LibraryHandle {
    pub ctx: ContextId,
    pub namespace: Lmid,
    pub path: PathBuf,
    pub resolved: BTreeMap<String, usize>,
    pub raw: usize,
}

impl LibraryHandle {
    pub fn address(&self, symbol: &str) -> Option<usize> {
        self.resolved.get(symbol).copied()
    }
}

type BindFn = unsafe extern "C" fn(*const usize);

#[derive(Clone, Copy)]
struct ShimBinding {
    bind: BindFn,
    base: usize,
}

/// Symbol ordinals and per-context slot arrays. Readers never lock.
pub struct JumpTables {
    ordinals: ArcSwap<HashMap<String, usize>>,
    tables: ArcSwap<HashMap<ContextId, Arc<[AtomicUsize]>>>,
    shims: ArcSwap<Vec<ShimBinding>>,
    writer: Mutex<()>,
}

/// The process-wide jump tables.
pub fn tables() -> &'static JumpTables {
    static T: OnceLock<JumpTables> = OnceLock::new();
    T.get_or_init(|| JumpTables {
        ordinals: ArcSwap::from_pointee(HashMap::new()),
        tables: ArcSwap::from_pointee(HashMap::new()),
        shims: ArcSwap::from_pointee(Vec::new()),
        writer: Mutex::new(()),
    })
}

impl JumpTables {
    pub fn ordinal(&self, symbol: &str) -> Option<usize> {
        self.ordinals.load().get(symbol).copied()
    }

    /// Ordinals for `symbols`, assigning new ones in list order.
    fn assign(&self, symbols: &[String]) -> Result<Vec<usize>> {
        let _w = self.writer.lock().unwrap();
        let mut map = HashMap::clone(&self.ordinals.load());
        let mut out = Vec::with_capacity(symbols.len());
        for s in symbols {
            let next = map.len();
            let o = *map.entry(s.clone()).or_insert(next);
            if o >= JUMP_TABLE_SLOTS {
                return Err(Error::Loader(format!("more than {JUMP_TABLE_SLOTS} distinct symbols")));
            }
            out.push(o);
        }
        self.ordinals.store(Arc::new(map));
        Ok(out)
    }

    fn table(&self, ctx: ContextId) -> Arc<[AtomicUsize]> {
        if let Some(t) = self.tables.load().get(&ctx) {
            return t.clone();
        }
        let _w = self.writer.lock().unwrap();
        let mut map = HashMap::clone(&self.tables.load());
        let t = map
            .entry(ctx)
            .or_insert_with(|| (0..JUMP_TABLE_SLOTS).map(|_| AtomicUsize::new(0)).collect())
            .clone();
        self.tables.store(Arc::new(map));
        t
    }

    /// Fills a slot; an occupied slot may only be written with the same address.
    fn install(&self, ctx: ContextId, symbol: &str, ordinal: usize, addr: usize) -> Result<()> {
        let slot = &self.table(ctx)[ordinal];
        match slot.compare_exchange(0, addr, Ordering::AcqRel, Ordering::Acquire) {
            Ok(_) => Ok(()),
            Err(cur) if cur == addr => Ok(()),
            Err(_) => Err(Error::SlotConflict {
                symbol: symbol.into(),
                ctx,
            }),
        }
    }

    /// Address of `symbol` in `ctx`'s table.
    pub fn slot(&self, ctx: ContextId, symbol: &str) -> Option<usize> {
        let o = self.ordinal(symbol)?;
        let v = self.tables.load().get(&ctx)?[o].load(Ordering::Acquire);
        (v != 0).then_some(v)
    }

    /// Address of `symbol` for the calling thread's current context.
    pub fn dispatch(&self, symbol: &str) -> Result<usize> {
        let ctx = scope::current().ok_or(Error::DispatchUnbound)?;
        self.slot(ctx, symbol).ok_or_else(|| Error::DispatchMissingSlot {
            symbol: symbol.into(),
            ctx,
        })
    }

    /// Points every registered shim of the calling thread at `ctx`'s table.
    pub(crate) fn bind_thread(&self, ctx: Option<ContextId>) {
        let shims = self.shims.load();
        if shims.is_empty() {
            return;
        }
        let table = ctx.map(|c| self.table(c));
        for s in shims.iter() {
            let p = table.as_ref().map_or(std::ptr::null(), |t| t[s.base..].as_ptr().cast::<usize>());
            unsafe { (s.bind)(p) };
        }
    }
}

/// Resolves `symbol` for the calling thread's context.
pub fn dispatch(symbol: &str) -> Result<usize> {
    tables().dispatch(symbol)
}

/// The published service address page.
#[derive(Debug, Clone)]
pub struct ServicePage {
    pub path: PathBuf,
    pub symbols: Vec<String>,
    pub addr: usize,
    pub len: usize,
}

impl ServicePage {
    /// The page contents: one little-endian address per symbol.
    pub fn bytes(&self) -> &[u8] {
        unsafe { std::slice::from_raw_parts(self.addr as *const u8, self.symbols.len() * 8) }
    }
}

/// Serializes environment changes made around library loads.
pub static ENV_LOCK: Mutex<()> = Mutex::new(());

/// Runs `f` with `env` applied to the process environment, restoring the
/// previous values afterwards.
pub fn with_env<T>(env: &EnvOverrides, f: impl FnOnce() -> T) -> T {
    if env.is_empty() {
        return f();
    }
    let _g = ENV_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let saved: Vec<(String, Option<std::ffi::OsString>)> = env.iter().map(|(k, _)| (k.to_string(), std::env::var_os(k))).collect();
    for (k, v) in env.iter() {
        match v {
            EnvOverride::Set(v) => std::env::set_var(k, v),
            EnvOverride::Unset => std::env::remove_var(k),
        }
    }
    let out = f();
    for (k, v) in saved {
        match v {
            Some(v) => std::env::set_var(&k, v),
            None => std::env::remove_var(&k),
        }
    }
    out
}

pub struct Loader<L: DynamicLoader = Glibc> {
    dl: L,
    namespaces: HashMap<ContextId, Lmid>,
    handles: HashMap<(ContextId, PathBuf), LibraryHandle>,
    service: Option<ServicePage>,
}

impl Loader<Glibc> {
    pub fn new() -> Self {
        Loader::with_loader(Glibc)
    }
}

impl Default for Loader<Glibc> {
    fn default() -> Self {
        Loader::new()
    }
}

impl<L: DynamicLoader> Loader<L> {
    pub fn with_loader(dl: L) -> Self {
        Loader {
            dl,
            namespaces: HashMap::new(),
            handles: HashMap::new(),
            service: None,
        }
    }

    pub fn namespace_count(&self) -> usize {
        self.namespaces.len()
    }

    pub fn namespace_of(&self, ctx: ContextId) -> Option<Lmid> {
        self.namespaces.get(&ctx).copied()
    }

    /// Loads `path` into `ctx`'s namespace, creating the namespace on the
    /// context's first load, and installs `symbols` in its jump table.
    pub fn load_into_namespace(&mut self, ctx: ContextId, path: &Path, symbols: &[String], env: &EnvOverrides) -> Result<LibraryHandle> {
        let key = (ctx, path.to_path_buf());
        if let Some(h) = self.handles.get(&key) {
            if symbols.iter().all(|s| h.resolved.contains_key(s)) {
                return Ok(h.clone());
            }
        }
        if !path.exists() {
            return Err(Error::Loader(format!("{}: no such file", path.display())));
        }
        let (raw, ns) = match self.namespaces.get(&ctx) {
            Some(&ns) => (with_env(env, || self.dl.open_in(ns, path))?, ns),
            None => {
                if self.namespaces.len() >= NAMESPACE_CAP {
                    return Err(Error::NamespaceCap { cap: NAMESPACE_CAP });
                }
                let (raw, ns) = with_env(env, || self.dl.open_new_namespace(path))?;
                self.namespaces.insert(ctx, ns);
                info!("{ctx}: new linker namespace {ns}");
                (raw, ns)
            }
        };
        let mut resolved = self.handles.get(&key).map(|h| h.resolved.clone()).unwrap_or_default();
        for s in symbols {
            let addr = self.dl.symbol(raw, s).ok_or_else(|| Error::UnresolvedSymbol {
                symbol: s.clone(),
                library: path.display().to_string(),
            })?;
            resolved.insert(s.clone(), addr);
        }
        let t = tables();
        let ordinals = t.assign(symbols)?;
        for (s, o) in symbols.iter().zip(ordinals) {
            t.install(ctx, s, o, resolved[s])?;
        }
        let h = LibraryHandle {
            ctx,
            namespace: ns,
            path: path.to_path_buf(),
            resolved,
            raw,
        };
        self.handles.insert(key, h.clone());
        Ok(h)
    }

    pub fn service(&self) -> Option<&ServicePage> {
        self.service.as_ref()
    }

    /// Loads `path` once into the base namespace and publishes the
    /// addresses of `symbols` in a read-only page, in list order.
    pub fn load_service(&mut self, path: &Path, symbols: &[String]) -> Result<ServicePage> {
        if let Some(page) = &self.service {
            if page.path == path {
                return Ok(page.clone());
            }
            return Err(Error::ServicePublished(page.path.display().to_string()));
        }
        let raw = self.dl.open_global(path)?;
        let mut addrs = Vec::with_capacity(symbols.len());
        for s in symbols {
            addrs.push(self.dl.symbol(raw, s).ok_or_else(|| Error::UnresolvedSymbol {
                symbol: s.clone(),
                library: path.display().to_string(),
            })?);
        }
        let page_size = 4096;
        let len = (addrs.len() * 8).div_ceil(page_size).max(1) * page_size;
        let p = unsafe { libc::mmap(std::ptr::null_mut(), len, libc::PROT_READ | libc::PROT_WRITE, libc::MAP_PRIVATE | libc::MAP_ANONYMOUS, -1, 0) };
        if p == libc::MAP_FAILED {
            return Err(Error::io("map service page", std::io::Error::last_os_error()));
        }
        let bytes: Vec<u8> = addrs.iter().flat_map(|a| (*a as u64).to_le_bytes()).collect();
        unsafe {
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), p.cast::<u8>(), bytes.len());
            libc::mprotect(p, len, libc::PROT_READ);
        }
        {
            let _g = ENV_LOCK.lock().unwrap_or_else(|e| e.into_inner());
            std::env::set_var(SERVICE_PAGE_ENV, format!("{:x}", p as usize));
        }
        let page = ServicePage {
            path: path.to_path_buf(),
            symbols: symbols.to_vec(),
            addr: p as usize,
            len,
        };
        info!("service page at {:#x} with {} entries", page.addr, symbols.len());
        self.service = Some(page.clone());
        Ok(page)
    }

    /// Loads a service shim into `ctx`'s namespace and points it at the
    /// published page.
    pub fn load_service_shim(&mut self, ctx: ContextId, shim: &Path, symbols: &[String], env: &EnvOverrides) -> Result<LibraryHandle> {
        let page = self.service.clone().ok_or_else(|| Error::Loader("no service context published".into()))?;
        let h = self.load_into_namespace(ctx, shim, symbols, env)?;
        let set = self.dl.symbol(h.raw, SET_PAGE_SYMBOL).ok_or_else(|| Error::NotExported(shim.display().to_string(), SET_PAGE_SYMBOL.into()))?;
        let set: BindFn = unsafe { std::mem::transmute::<usize, BindFn>(set) };
        unsafe { set(page.addr as *const usize) };
        Ok(h)
    }

    /// Loads a jump-table shim into the base namespace. Its symbols must
    /// hold consecutive ordinals in the shim's own order, which holds when
    /// it was generated from the list used for the namespace loads.
    pub fn register_shim(&mut self, shim: &Path, symbols: &[String]) -> Result<usize> {
        let raw = self.dl.open_global(shim)?;
        let bind = self.dl.symbol(raw, BIND_SYMBOL).ok_or_else(|| Error::NotExported(shim.display().to_string(), BIND_SYMBOL.into()))?;
        let t = tables();
        let ordinals = t.assign(symbols)?;
        let base = ordinals.first().copied().unwrap_or(0);
        if ordinals.iter().enumerate().any(|(i, &o)| o != base + i) {
            return Err(Error::Loader(format!("{}: symbols do not hold consecutive ordinals", shim.display())));
        }
        let binding = ShimBinding {
            bind: unsafe { std::mem::transmute::<usize, BindFn>(bind) },
            base,
        };
        let _w = t.writer.lock().unwrap();
        let mut shims = Vec::clone(&t.shims.load());
        shims.push(binding);
        t.shims.store(Arc::new(shims));
        drop(_w);
        if let Some(ctx) = scope::current() {
            t.bind_thread(Some(ctx));
        }
        Ok(base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hands out fake handles; namespaces are numbered from 1.
    #[derive(Default)]
    struct Mock {
        next_ns: Lmid,
        opens: usize,
    }

    impl DynamicLoader for Mock {
        fn open_new_namespace(&mut self, _: &Path) -> Result<(usize, Lmid)> {
            self.next_ns += 1;
            self.opens += 1;
            Ok((self.next_ns as usize * 0x1000, self.next_ns))
        }
        fn open_in(&mut self, ns: Lmid, _: &Path) -> Result<usize> {
            self.opens += 1;
            Ok(ns as usize * 0x1000)
        }
        fn open_global(&mut self, _: &Path) -> Result<usize> {
            Ok(0x10)
        }
        fn symbol(&mut self, handle: usize, name: &str) -> Option<usize> {
            (name != "missing").then(|| handle + name.len())
        }
    }

    fn syms(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn namespace_cap_is_enforced() {
        let mut l = Loader::with_loader(Mock::default());
        let env = EnvOverrides::default();
        let lib = Path::new("/");
        for i in 0..NAMESPACE_CAP as u32 {
            l.load_into_namespace(ContextId(1000 + i), lib, &syms(&["cap_f"]), &env).unwrap();
        }
        assert_eq!(l.namespace_count(), NAMESPACE_CAP);
        let err = l.load_into_namespace(ContextId(2000), lib, &syms(&["cap_f"]), &env).unwrap_err();
        assert!(matches!(err, Error::NamespaceCap { cap: 16 }));
        assert!(err.to_string().contains("16"));
        // existing namespaces keep working
        l.load_into_namespace(ContextId(1000), lib, &syms(&["cap_g"]), &env).unwrap();
        assert_eq!(l.namespace_count(), NAMESPACE_CAP);
    }

    #[test]
    fn loads_reuse_namespace_and_report_missing_symbols() {
        let mut l = Loader::with_loader(Mock::default());
        let env = EnvOverrides::default();
        let a = l.load_into_namespace(ContextId(3000), Path::new("/"), &syms(&["reuse_a"]), &env).unwrap();
        let b = l.load_into_namespace(ContextId(3000), Path::new("/"), &syms(&["reuse_a"]), &env).unwrap();
        assert_eq!(a.namespace, b.namespace);
        assert_eq!(a.resolved, b.resolved);
        let err = l.load_into_namespace(ContextId(3000), Path::new("/"), &syms(&["missing"]), &env).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }

    #[test]
    fn dispatch_follows_the_scope_stack() {
        let mut l = Loader::with_loader(Mock::default());
        let env = EnvOverrides::default();
        let h1 = l.load_into_namespace(ContextId(4001), Path::new("/"), &syms(&["disp_f"]), &env).unwrap();
        let h2 = l.load_into_namespace(ContextId(4002), Path::new("/"), &syms(&["disp_f"]), &env).unwrap();
        assert_ne!(h1.address("disp_f"), h2.address("disp_f"));
        assert!(matches!(dispatch("disp_f"), Err(Error::DispatchUnbound)));
        scope::enter_local(ContextId(4001)).unwrap();
        assert_eq!(dispatch("disp_f").ok(), h1.address("disp_f"));
        scope::enter_local(ContextId(4002)).unwrap();
        assert_eq!(dispatch("disp_f").ok(), h2.address("disp_f"));
        assert!(matches!(dispatch("never_loaded"), Err(Error::DispatchMissingSlot { .. })));
        scope::exit_local().unwrap();
        assert_eq!(dispatch("disp_f").ok(), h1.address("disp_f"));
        scope::exit_local().unwrap();
    }

    #[test]
    fn slots_are_write_once() {
        let t = tables();
        let o = t.assign(&syms(&["once_f"])).unwrap()[0];
        t.install(ContextId(5000), "once_f", o, 0x1234).unwrap();
        t.install(ContextId(5000), "once_f", o, 0x1234).unwrap();
        assert!(matches!(t.install(ContextId(5000), "once_f", o, 0x9999), Err(Error::SlotConflict { .. })));
    }

    #[test]
    fn env_is_applied_only_during_the_call() {
        let mut env = EnvOverrides::default();
        env.set("LIBCTX_TEST_WITH_ENV", "inside").unwrap();
        std::env::remove_var("LIBCTX_TEST_WITH_ENV");
        let seen = with_env(&env, || std::env::var("LIBCTX_TEST_WITH_ENV").ok());
        assert_eq!(seen.as_deref(), Some("inside"));
        assert!(std::env::var("LIBCTX_TEST_WITH_ENV").is_err());
    }
}
