use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

/// Identifier of a context. Ids start at 1 and are never reused by a monitor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextId(pub u32);

impl fmt::Display for ContextId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ctx{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvOverride {
    Set(String),
    Unset,
}

/// Per-context environment overrides, ordered by name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EnvOverrides(BTreeMap<String, EnvOverride>);

pub fn validate_env_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains('=') || name.contains('\0') {
        return Err(Error::EnvName(name.into()));
    }
    Ok(())
}

impl EnvOverrides {
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        validate_env_name(name)?;
        if value.contains('\0') {
            return Err(Error::EnvName(name.into()));
        }
        self.0.insert(name.into(), EnvOverride::Set(value.into()));
        Ok(())
    }

    pub fn unset(&mut self, name: &str) -> Result<()> {
        validate_env_name(name)?;
        self.0.insert(name.into(), EnvOverride::Unset);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&EnvOverride> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EnvOverride)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Applies the overrides to a base environment, keeping base order and
    /// appending newly set names.
    pub fn apply(&self, base: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = base
            .into_iter()
            .filter(|(k, _)| !matches!(self.0.get(k), Some(EnvOverride::Unset)))
            .collect();
        for (name, value) in &self.0 {
            if let EnvOverride::Set(value) = value {
                match out.iter_mut().find(|(k, _)| k == name) {
                    Some(slot) => slot.1 = value.clone(),
                    None => out.push((name.clone(), value.clone())),
                }
            }
        }
        out
    }
}
