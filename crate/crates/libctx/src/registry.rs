//! Contexts, their configuration, and the thread-to-context bindings the
//! monitor consults on every interposed syscall.
//!
//! Context records are immutable snapshots; a reconfiguration replaces the
//! record (with an empty reply cache) under a short write lock, so a lookup
//! holds a record that never changes and never sees a stale cache.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use libctx_core::clamp::{visible_mask, ReplyCache};
use libctx_core::{ContextId, CpuSet, EnvOverrides};

use crate::error::{Error, Result};

/// Kernel thread id.
pub type Tid = i32;

#[derive(Debug)]
pub struct Context {
    pub id: ContextId,
    pub allowed: CpuSet,
    pub env: EnvOverrides,
    cache: Mutex<Option<ReplyCache>>,
}

impl Context {
    fn new(id: ContextId, allowed: CpuSet, env: EnvOverrides) -> Context {
        Context {
            id,
            allowed,
            env,
            cache: Mutex::new(None),
        }
    }

    /// Encoded affinity reply of `len` bytes, served from the cache when it
    /// was built for the same mask and length.
    pub fn affinity_reply(&self, online: &CpuSet, len: usize) -> Result<Vec<u8>> {
        let mask = visible_mask(&self.allowed, online);
        let mut cache = self.cache.lock().unwrap();
        if let Some(bytes) = cache.as_ref().and_then(|c| c.get(&mask, len)) {
            return Ok(bytes.to_vec());
        }
        let fresh = ReplyCache::encode(mask, len)?;
        let bytes = fresh.get(&mask, len).unwrap().to_vec();
        *cache = Some(fresh);
        Ok(bytes)
    }

    pub fn cached_reply(&self) -> Option<ReplyCache> {
        self.cache.lock().unwrap().clone()
    }
}

#[derive(Debug)]
pub struct Registry {
    online: CpuSet,
    next_id: AtomicU32,
    writer: Mutex<()>,
    contexts: RwLock<HashMap<ContextId, Arc<Context>>>,
    bindings: RwLock<HashMap<Tid, ContextId>>,
}

impl Registry {
    pub fn new(online: CpuSet) -> Registry {
        Registry {
            online,
            next_id: AtomicU32::new(1),
            writer: Mutex::new(()),
            contexts: RwLock::new(HashMap::new()),
            bindings: RwLock::new(HashMap::new()),
        }
    }

    pub fn online(&self) -> &CpuSet {
        &self.online
    }

    pub fn check_allowed(&self, allowed: &CpuSet) -> Result<()> {
        if allowed.is_empty() {
            return Err(libctx_core::Error::EmptyCpuSet.into());
        }
        if !allowed.is_subset(&self.online) {
            return Err(Error::NotOnline {
                requested: *allowed,
                online: self.online,
            });
        }
        Ok(())
    }

    pub fn create_context(&self, allowed: CpuSet) -> Result<ContextId> {
        self.check_allowed(&allowed)?;
        let _w = self.writer.lock().unwrap();
        let id = ContextId(self.next_id.fetch_add(1, Ordering::Relaxed));
        self.publish(Arc::new(Context::new(id, allowed, EnvOverrides::default())));
        Ok(id)
    }

    /// Registers a context under an id chosen elsewhere (the client mirrors
    /// ids handed out by its monitor).
    pub fn insert_context(&self, id: ContextId, allowed: CpuSet) -> Result<()> {
        self.check_allowed(&allowed)?;
        let _w = self.writer.lock().unwrap();
        self.next_id.fetch_max(id.0 + 1, Ordering::Relaxed);
        self.publish(Arc::new(Context::new(id, allowed, EnvOverrides::default())));
        Ok(())
    }

    fn publish(&self, ctx: Arc<Context>) {
        self.contexts.write().unwrap().insert(ctx.id, ctx);
    }

    fn update(&self, id: ContextId, f: impl FnOnce(&Context) -> Result<(CpuSet, EnvOverrides)>) -> Result<Arc<Context>> {
        let _w = self.writer.lock().unwrap();
        let cur = self.get(id).ok_or(Error::UnknownContext(id))?;
        let (allowed, env) = f(&cur)?;
        let next = Arc::new(Context::new(id, allowed, env));
        self.publish(next.clone());
        Ok(next)
    }

    /// Replaces the allowed set. The new record starts with an empty cache.
    pub fn set_allowed_cpus(&self, id: ContextId, allowed: CpuSet) -> Result<Arc<Context>> {
        self.check_allowed(&allowed)?;
        self.update(id, |c| Ok((allowed, c.env.clone())))
    }

    pub fn setenv(&self, id: ContextId, name: &str, value: &str) -> Result<()> {
        self.update(id, |c| {
            let mut env = c.env.clone();
            env.set(name, value)?;
            Ok((c.allowed, env))
        })
        .map(drop)
    }

    pub fn unsetenv(&self, id: ContextId, name: &str) -> Result<()> {
        self.update(id, |c| {
            let mut env = c.env.clone();
            env.unset(name)?;
            Ok((c.allowed, env))
        })
        .map(drop)
    }

    pub fn get(&self, id: ContextId) -> Option<Arc<Context>> {
        self.contexts.read().unwrap().get(&id).cloned()
    }

    pub fn contexts(&self) -> Vec<Arc<Context>> {
        let mut v: Vec<_> = self.contexts.read().unwrap().values().cloned().collect();
        v.sort_by_key(|c| c.id);
        v
    }

    /// Binds `tid`; rebinding to the same context is a no-op.
    pub fn bind(&self, tid: Tid, ctx: ContextId) -> Result<()> {
        if self.get(ctx).is_none() {
            return Err(Error::UnknownContext(ctx));
        }
        let mut b = self.bindings.write().unwrap();
        match b.get(&tid) {
            Some(&bound) if bound != ctx => Err(Error::AlreadyBound { tid, bound }),
            _ => {
                b.insert(tid, ctx);
                Ok(())
            }
        }
    }

    pub fn unbind(&self, tid: Tid) -> Option<ContextId> {
        self.bindings.write().unwrap().remove(&tid)
    }

    pub fn lookup(&self, tid: Tid) -> Option<ContextId> {
        self.bindings.read().unwrap().get(&tid).copied()
    }

    pub fn lookup_context(&self, tid: Tid) -> Option<Arc<Context>> {
        self.lookup(tid).and_then(|id| self.get(id))
    }

    /// Gives `child` the binding of `parent`, if any.
    pub fn inherit(&self, parent: Tid, child: Tid) -> Option<ContextId> {
        let mut b = self.bindings.write().unwrap();
        let ctx = b.get(&parent).copied()?;
        b.insert(child, ctx);
        Some(ctx)
    }

    /// Moves a binding when a thread's id changes (a non-leader thread
    /// calling execve takes over the leader's id).
    pub fn rename(&self, from: Tid, to: Tid) {
        let mut b = self.bindings.write().unwrap();
        if let Some(ctx) = b.remove(&from) {
            b.insert(to, ctx);
        }
    }

    pub fn bound_threads(&self, ctx: ContextId) -> Vec<Tid> {
        let mut v: Vec<Tid> = self
            .bindings
            .read()
            .unwrap()
            .iter()
            .filter(|(_, &c)| c == ctx)
            .map(|(&t, _)| t)
            .collect();
        v.sort_unstable();
        v
    }

    pub fn unbind_all(&self) {
        self.bindings.write().unwrap().clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use libctx_core::cpuset::parse_cpu_list;

    fn reg() -> Registry {
        Registry::new(CpuSet::range(0, 23))
    }

    #[test]
    fn ids_start_at_one_and_are_not_reused() {
        let r = reg();
        let a = r.create_context(parse_cpu_list("0-11").unwrap()).unwrap();
        let b = r.create_context(parse_cpu_list("12-23").unwrap()).unwrap();
        assert_eq!((a, b), (ContextId(1), ContextId(2)));
        r.insert_context(ContextId(7), CpuSet::range(0, 1)).unwrap();
        assert_eq!(r.create_context(CpuSet::range(0, 1)).unwrap(), ContextId(8));
    }

    #[test]
    fn rejects_empty_and_offline_sets() {
        let r = reg();
        assert!(matches!(r.create_context(CpuSet::new()), Err(Error::Core(libctx_core::Error::EmptyCpuSet))));
        assert!(matches!(r.create_context(CpuSet::range(20, 30)), Err(Error::NotOnline { .. })));
        let a = r.create_context(CpuSet::range(0, 3)).unwrap();
        assert!(r.set_allowed_cpus(a, CpuSet::new()).is_err());
        assert!(matches!(r.set_allowed_cpus(ContextId(99), CpuSet::range(0, 1)), Err(Error::UnknownContext(_))));
    }

    #[test]
    fn overlapping_contexts_are_allowed() {
        let r = reg();
        r.create_context(CpuSet::range(0, 12)).unwrap();
        r.create_context(CpuSet::range(10, 23)).unwrap();
        r.create_context(*r.online()).unwrap();
    }

    #[test]
    fn binding_rules() {
        let r = reg();
        let a = r.create_context(CpuSet::range(0, 11)).unwrap();
        let b = r.create_context(CpuSet::range(12, 23)).unwrap();
        r.bind(100, a).unwrap();
        r.bind(100, a).unwrap();
        assert_eq!(r.lookup(100), Some(a));
        assert!(matches!(r.bind(100, b), Err(Error::AlreadyBound { bound, .. }) if bound == a));
        assert_eq!(r.lookup(555), None);
        assert_eq!(r.inherit(100, 101), Some(a));
        assert_eq!(r.inherit(555, 556), None);
        assert_eq!(r.bound_threads(a), [100, 101]);
        r.rename(101, 200);
        assert_eq!(r.lookup(200), Some(a));
        assert_eq!(r.unbind(100), Some(a));
        r.bind(100, b).unwrap();
        assert!(r.bind(1, ContextId(42)).is_err());
    }

    #[test]
    fn reply_cache_is_dropped_on_reconfiguration() {
        let r = reg();
        let a = r.create_context(CpuSet::range(0, 11)).unwrap();
        let ctx = r.get(a).unwrap();
        assert_eq!(ctx.affinity_reply(r.online(), 8).unwrap()[..2], [0xff, 0x0f]);
        assert!(ctx.cached_reply().is_some());
        r.set_allowed_cpus(a, CpuSet::range(0, 5)).unwrap();
        let fresh = r.get(a).unwrap();
        assert!(fresh.cached_reply().is_none());
        assert_eq!(fresh.affinity_reply(r.online(), 8).unwrap()[0], 0x3f);
        // setting the same value again changes nothing observable
        r.set_allowed_cpus(a, CpuSet::range(0, 5)).unwrap();
        assert_eq!(r.get(a).unwrap().affinity_reply(r.online(), 8).unwrap()[0], 0x3f);
    }

    #[test]
    fn env_overrides() {
        let r = reg();
        let a = r.create_context(CpuSet::range(0, 1)).unwrap();
        r.setenv(a, "OMP_NUM_THREADS", "6").unwrap();
        assert!(r.setenv(a, "BAD=NAME", "1").is_err());
        r.unsetenv(a, "NEVER_SET").unwrap();
        let env = r.get(a).unwrap().env.clone();
        assert_eq!(env.get("OMP_NUM_THREADS"), Some(&libctx_core::EnvOverride::Set("6".into())));
    }

    #[test]
    fn concurrent_lookups_and_updates() {
        let r = Arc::new(reg());
        let a = r.create_context(CpuSet::range(0, 11)).unwrap();
        for t in 0..8 {
            r.bind(1000 + t, a).unwrap();
        }
        let readers: Vec<_> = (0..4)
            .map(|_| {
                let r = r.clone();
                std::thread::spawn(move || {
                    for _ in 0..10_000 {
                        let c = r.lookup_context(1003).unwrap();
                        assert!(c.allowed.count() == 12 || c.allowed.count() == 1);
                    }
                })
            })
            .collect();
        for i in 0..200 {
            let set = if i % 2 == 0 { CpuSet::range(0, 0) } else { CpuSet::range(0, 11) };
            r.set_allowed_cpus(a, set).unwrap();
        }
        for h in readers {
            h.join().unwrap();
        }
    }
}
