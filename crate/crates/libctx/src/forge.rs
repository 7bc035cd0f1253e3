//! Per-context forged resource files on disk.
//!
//! Each context gets a directory `<root>/libctx-forge-<pid>-<ctx>/` holding
//! `cpuinfo` and `online`. Files are replaced by rename, so a reader sees
//! either the old or the new contents in full; descriptors opened before a
//! refresh keep the old contents.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use libctx_core::forge::{forge_cpuinfo, forge_online};
use libctx_core::{ContextId, CpuSet, HostTopology};

use crate::diag::info;
use crate::error::{Error, Result};
use crate::host::{CPUINFO_PATH, ONLINE_PATH};

pub const DIR_PREFIX: &str = "libctx-forge-";

/// A resource file that is redirected to a forged replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RedirectRule {
    pub canonical_path: &'static str,
    pub file_name: &'static str,
}

pub const REDIRECT_RULES: &[RedirectRule] = &[
    RedirectRule {
        canonical_path: CPUINFO_PATH,
        file_name: "cpuinfo",
    },
    RedirectRule {
        canonical_path: ONLINE_PATH,
        file_name: "online",
    },
];

pub fn rule_for(canonical: &str) -> Option<&'static RedirectRule> {
    REDIRECT_RULES.iter().find(|r| r.canonical_path == canonical)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForgedFileSet {
    pub ctx: ContextId,
    pub dir: PathBuf,
    pub files: HashMap<&'static str, PathBuf>,
    pub generation: u64,
}

impl ForgedFileSet {
    /// Forged replica of `canonical`, if it is a redirected file.
    pub fn path_for(&self, canonical: &str) -> Option<&Path> {
        self.files.get(canonical).map(PathBuf::as_path)
    }
}

#[derive(Debug)]
pub struct ForgeStore {
    root: PathBuf,
    owner: u32,
    sets: HashMap<ContextId, ForgedFileSet>,
}

impl ForgeStore {
    /// Opens a store under `root`, removing directories left behind by
    /// monitors that are no longer running.
    pub fn new(root: impl Into<PathBuf>) -> Result<ForgeStore> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(format!("create {}", root.display()), e))?;
        sweep_stale(&root);
        Ok(ForgeStore {
            root,
            owner: std::process::id(),
            sets: HashMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn get(&self, ctx: ContextId) -> Option<&ForgedFileSet> {
        self.sets.get(&ctx)
    }

    /// Regenerates every forged file of `ctx` for `allowed` and bumps the
    /// generation, even when the contents are unchanged.
    pub fn refresh(&mut self, topo: &HostTopology, ctx: ContextId, allowed: &CpuSet) -> Result<&ForgedFileSet> {
        let dir = self.root.join(format!("{DIR_PREFIX}{}-{}", self.owner, ctx.0));
        if !dir.is_dir() {
            fs::create_dir_all(&dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
            fs::set_permissions(&dir, fs::Permissions::from_mode(0o755))
                .map_err(|e| Error::io(format!("chmod {}", dir.display()), e))?;
        }
        let cpuinfo = forge_cpuinfo(topo, allowed)?;
        let online = forge_online(allowed)?;
        let mut files = HashMap::new();
        for rule in REDIRECT_RULES {
            let text = match rule.file_name {
                "cpuinfo" => &cpuinfo,
                _ => &online,
            };
            let path = dir.join(rule.file_name);
            write_atomic(&path, text.as_bytes())?;
            files.insert(rule.canonical_path, path);
        }
        let generation = self.sets.get(&ctx).map_or(0, |s| s.generation) + 1;
        self.sets.insert(
            ctx,
            ForgedFileSet {
                ctx,
                dir,
                files,
                generation,
            },
        );
        Ok(&self.sets[&ctx])
    }

    /// Forged path for `canonical` under `ctx`, regenerating missing files.
    pub fn redirect_target(&mut self, topo: &HostTopology, ctx: ContextId, allowed: &CpuSet, canonical: &str) -> Result<Option<PathBuf>> {
        let Some(rule) = rule_for(canonical) else {
            return Ok(None);
        };
        let present = self
            .sets
            .get(&ctx)
            .and_then(|s| s.path_for(rule.canonical_path))
            .is_some_and(Path::exists);
        if !present {
            info!("regenerating forged files of {ctx}");
            self.refresh(topo, ctx, allowed)?;
        }
        Ok(self.sets[&ctx].path_for(rule.canonical_path).map(Path::to_path_buf))
    }

    pub fn remove(&mut self, ctx: ContextId) {
        if let Some(set) = self.sets.remove(&ctx) {
            let _ = fs::remove_dir_all(&set.dir);
        }
    }

    pub fn clear(&mut self) {
        let ids: Vec<_> = self.sets.keys().copied().collect();
        for id in ids {
            self.remove(id);
        }
    }
}

impl Drop for ForgeStore {
    fn drop(&mut self) {
        // A forked monitor shares the store; only the creating process cleans.
        if std::process::id() == self.owner {
            self.clear();
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.set_permissions(fs::Permissions::from_mode(0o644))?;
        fs::rename(&tmp, path)
    })();
    res.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(format!("write {}", path.display()), e)
    })
}

/// Owner pid encoded in a forge directory name.
fn owner_of(name: &str) -> Option<i32> {
    name.strip_prefix(DIR_PREFIX)?.split('-').next()?.parse().ok()
}

fn sweep_stale(root: &Path) {
    let Ok(entries) = fs::read_dir(root) else { return };
    for entry in entries.flatten() {
        let name = entry.file_name();
        let Some(pid) = name.to_str().and_then(owner_of) else { continue };
        if !Path::new(&format!("/proc/{pid}")).exists() {
            info!("removing stale forge directory {}", entry.path().display());
            let _ = fs::remove_dir_all(entry.path());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use libctx_core::cpuset::parse_cpu_list;

    pub(crate) fn fake_topology(n: usize) -> HostTopology {
        let mut text = String::new();
        for id in 0..n {
            text.push_str(&format!("processor\t: {id}\nmodel name\t: Fake\n\n"));
        }
        HostTopology::from_texts(&format!("0-{}", n - 1), &text).unwrap()
    }

    fn stanzas(path: &Path) -> usize {
        fs::read_to_string(path).unwrap().lines().filter(|l| l.starts_with("processor")).count()
    }

    #[test]
    fn refresh_writes_both_files_and_bumps_generation() {
        let tmp = tempfile::tempdir().unwrap();
        let topo = fake_topology(24);
        let mut store = ForgeStore::new(tmp.path()).unwrap();
        let set = store.refresh(&topo, ContextId(1), &CpuSet::range(0, 11)).unwrap().clone();
        assert_eq!(set.generation, 1);
        assert_eq!(stanzas(set.path_for(CPUINFO_PATH).unwrap()), 12);
        assert_eq!(fs::read_to_string(set.path_for(ONLINE_PATH).unwrap()).unwrap(), "0-11\n");
        let mode = fs::metadata(set.path_for(CPUINFO_PATH).unwrap()).unwrap().permissions().mode();
        assert_eq!(mode & 0o777, 0o644);

        let set = store.refresh(&topo, ContextId(1), &CpuSet::range(0, 5)).unwrap().clone();
        assert_eq!(set.generation, 2);
        assert_eq!(stanzas(set.path_for(CPUINFO_PATH).unwrap()), 6);
        let before = fs::read(set.path_for(CPUINFO_PATH).unwrap()).unwrap();
        let set = store.refresh(&topo, ContextId(1), &CpuSet::range(0, 5)).unwrap().clone();
        assert_eq!(set.generation, 3);
        assert_eq!(fs::read(set.path_for(CPUINFO_PATH).unwrap()).unwrap(), before);
    }

    #[test]
    fn contexts_do_not_share_directories() {
        let tmp = tempfile::tempdir().unwrap();
        let topo = fake_topology(8);
        let mut store = ForgeStore::new(tmp.path()).unwrap();
        let a = store.refresh(&topo, ContextId(1), &parse_cpu_list("0-3").unwrap()).unwrap().clone();
        let b = store.refresh(&topo, ContextId(2), &parse_cpu_list("4-7").unwrap()).unwrap().clone();
        assert_ne!(a.dir, b.dir);
        assert_eq!(fs::read_to_string(a.path_for(ONLINE_PATH).unwrap()).unwrap(), "0-3\n");
        assert_eq!(fs::read_to_string(b.path_for(ONLINE_PATH).unwrap()).unwrap(), "4-7\n");
    }

    #[test]
    fn missing_files_are_regenerated_on_demand() {
        let tmp = tempfile::tempdir().unwrap();
        let topo = fake_topology(4);
        let mut store = ForgeStore::new(tmp.path()).unwrap();
        let allowed = parse_cpu_list("1,3").unwrap();
        let p = store.redirect_target(&topo, ContextId(1), &allowed, CPUINFO_PATH).unwrap().unwrap();
        fs::remove_file(&p).unwrap();
        let p2 = store.redirect_target(&topo, ContextId(1), &allowed, CPUINFO_PATH).unwrap().unwrap();
        assert_eq!(p, p2);
        assert_eq!(stanzas(&p2), 2);
        assert_eq!(store.redirect_target(&topo, ContextId(1), &allowed, "/etc/hosts").unwrap(), None);
    }

    #[test]
    fn stale_directories_are_swept_and_own_are_cleaned() {
        let tmp = tempfile::tempdir().unwrap();
        // pid_max is far below this, so the owner is never alive
        let stale = tmp.path().join(format!("{DIR_PREFIX}999999999-1"));
        fs::create_dir(&stale).unwrap();
        let unrelated = tmp.path().join("keep-me");
        fs::create_dir(&unrelated).unwrap();
        let dir;
        {
            let mut store = ForgeStore::new(tmp.path()).unwrap();
            assert!(!stale.exists());
            dir = store.refresh(&fake_topology(2), ContextId(3), &CpuSet::range(0, 1)).unwrap().dir.clone();
            assert!(dir.exists());
        }
        assert!(!dir.exists());
        assert!(unrelated.exists());
    }

    #[test]
    fn owner_parsing() {
        assert_eq!(owner_of("libctx-forge-123-4"), Some(123));
        assert_eq!(owner_of("other-123-4"), None);
    }
}
