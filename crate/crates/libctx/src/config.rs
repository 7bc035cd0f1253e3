//! JSON run configuration for `libctx run`.
//!
//! ```json
//! {
//!   "contexts": [
//!     {"name": "a", "cpus": "0-11", "env": {"OMP_NUM_THREADS": "12"}, "argv": ["./solver"]},
//!     {"name": "b", "cpus": "12-23", "env": {"DEBUG": null}, "argv": ["./render", "-q"]}
//!   ],
//!   "options": {"trace_all": false, "forge_root": "/tmp"}
//! }
//! ```
//!
//! An `env` value of `null` removes the variable from the child's environment.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use libctx_core::context::validate_env_name;
use libctx_core::cpuset::parse_cpu_list;
use libctx_core::CpuSet;
use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub contexts: Vec<ContextSpec>,
    #[serde(default)]
    pub options: RunOptions,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSpec {
    pub name: String,
    pub cpus: String,
    #[serde(default)]
    pub env: BTreeMap<String, Option<String>>,
    pub argv: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    #[serde(default)]
    pub trace_all: bool,
    #[serde(default)]
    pub forge_root: Option<PathBuf>,
}

impl ContextSpec {
    pub fn cpu_set(&self) -> Result<CpuSet> {
        Ok(parse_cpu_list(&self.cpus)?)
    }
}

/// First line at or after byte `from` containing `needle`.
fn locate(text: &str, needle: &str, from: usize) -> Option<(usize, usize)> {
    let at = from + text.get(from..)?.find(needle)?;
    Some((text[..at].lines().count().max(1) + usize::from(text[..at].ends_with('\n')), at))
}

impl RunConfig {
    pub fn parse(text: &str, path: &str) -> Result<RunConfig> {
        let err = |line: usize, msg: String| Error::Config {
            path: path.to_string(),
            line,
            msg,
        };
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| err(e.line(), e.to_string()))?;
        if cfg.contexts.is_empty() {
            return Err(err(1, "no contexts".into()));
        }
        let mut names = BTreeSet::new();
        let mut cursor = 0;
        for c in &cfg.contexts {
            let quoted = serde_json::to_string(&c.name).unwrap_or_default();
            let (line, at) = locate(text, &quoted, cursor).unwrap_or((1, cursor));
            cursor = at + 1;
            if c.name.is_empty() {
                return Err(err(line, "empty context name".into()));
            }
            if !names.insert(c.name.as_str()) {
                return Err(err(line, format!("duplicate context name {:?}", c.name)));
            }
            let line_of = |needle: &str| locate(text, &serde_json::to_string(needle).unwrap_or_default(), at).map_or(line, |(l, _)| l);
            if let Err(e) = c.cpu_set() {
                return Err(err(line_of(&c.cpus), format!("context {:?}: cpus {:?}: {e}", c.name, c.cpus)));
            }
            if c.argv.is_empty() || c.argv[0].is_empty() {
                return Err(err(line, format!("context {:?}: empty argv", c.name)));
            }
            for (k, v) in &c.env {
                if validate_env_name(k).is_err() || v.as_deref().is_some_and(|v| v.contains('\0')) {
                    return Err(err(line_of(k), format!("context {:?}: invalid environment variable {k:?}", c.name)));
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        RunConfig::parse(&text, &path.display().to_string())
    }
}
