//! Host CPU snapshot: the online list plus the CPU-description file split
//! into per-processor stanzas.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::cpuset::{parse_cpu_list, CpuSet};
use crate::error::{Error, Result};

/// `/proc/cpuinfo` split loss-lessly into per-processor stanzas.
///
/// Each stanza keeps its trailing blank line, so concatenating `prefix`,
/// every stanza, and `trailer` reproduces the original text byte for byte.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CpuInfo {
    prefix: String,
    stanzas: Vec<(usize, String)>,
    trailer: String,
}

impl CpuInfo {
    pub fn parse(text: &str) -> Result<CpuInfo> {
        let mut info = CpuInfo::default();
        for chunk in chunks(text) {
            match stanza_id(chunk) {
                Some(id) => {
                    if info.stanzas.iter().any(|(k, _)| *k == id) {
                        return Err(Error::CpuInfo(alloc::format!("duplicate processor {id}")));
                    }
                    if !info.trailer.is_empty() {
                        // Non-processor block sandwiched between stanzas.
                        let block = core::mem::take(&mut info.trailer);
                        info.stanzas.last_mut().unwrap().1.push_str(&block);
                    }
                    info.stanzas.push((id, chunk.to_string()));
                }
                None if info.stanzas.is_empty() => info.prefix.push_str(chunk),
                None => info.trailer.push_str(chunk),
            }
        }
        if info.stanzas.is_empty() {
            return Err(Error::CpuInfo("no processor stanzas".into()));
        }
        Ok(info)
    }

    /// Processor ids in file order.
    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.stanzas.iter().map(|(id, _)| *id)
    }

    pub fn stanza(&self, id: usize) -> Option<&str> {
        self.stanzas
            .iter()
            .find(|(k, _)| *k == id)
            .map(|(_, s)| s.as_str())
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn trailer(&self) -> &str {
        &self.trailer
    }

    pub fn to_text(&self) -> String {
        let mut out = self.prefix.clone();
        for (_, s) in &self.stanzas {
            out.push_str(s);
        }
        out.push_str(&self.trailer);
        out
    }
}

/// Splits into blocks of non-empty lines, each followed by its blank lines.
fn chunks(text: &str) -> impl Iterator<Item = &str> {
    let bytes = text.as_bytes();
    let mut start = 0;
    core::iter::from_fn(move || {
        if start >= bytes.len() {
            return None;
        }
        let mut pos = start;
        let mut seen_content = false;
        let mut after_blank = false;
        while pos < bytes.len() {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map_or(bytes.len(), |i| pos + i + 1);
            let blank = text[pos..end].trim().is_empty();
            if !blank && seen_content && after_blank {
                break;
            }
            seen_content |= !blank;
            after_blank = seen_content && blank;
            pos = end;
        }
        let chunk = &text[start..pos];
        start = pos;
        Some(chunk)
    })
}

fn stanza_id(chunk: &str) -> Option<usize> {
    let first = chunk.lines().find(|l| !l.trim().is_empty())?;
    let (key, value) = first.split_once(':')?;
    if key.trim() != "processor" {
        return None;
    }
    value.trim().parse().ok()
}

/// Snapshot of the host's CPUs, taken once when a monitor starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostTopology {
    pub online: CpuSet,
    pub cpuinfo: CpuInfo,
}

impl HostTopology {
    /// Builds a snapshot from the texts of the online-list and cpuinfo files.
    pub fn from_texts(online: &str, cpuinfo: &str) -> Result<HostTopology> {
        Ok(HostTopology {
            online: parse_cpu_list(online.trim())?,
            cpuinfo: CpuInfo::parse(cpuinfo)?,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn sample_cpuinfo(ids: &[usize]) -> String {
        let mut out = String::new();
        for id in ids {
            out.push_str(&alloc::format!(
                "processor\t: {id}\nvendor_id\t: GenuineIntel\nmodel name\t: Test CPU\ncore id\t\t: {id}\nflags\t\t: fpu sse\n\n"
            ));
        }
        out
    }

    #[test]
    fn splits_and_rejoins_losslessly() {
        let text = sample_cpuinfo(&[0, 1, 2, 3]);
        let info = CpuInfo::parse(&text).unwrap();
        assert_eq!(info.ids().collect::<Vec<_>>(), [0, 1, 2, 3]);
        assert_eq!(info.to_text(), text);
        assert!(info.stanza(2).unwrap().starts_with("processor\t: 2\n"));
        assert!(info.stanza(2).unwrap().ends_with("sse\n\n"));
    }

    #[test]
    fn keeps_prefix_and_trailer() {
        let text = "junk header\n\nprocessor\t: 0\nBogoMIPS\t: 50.00\n\nprocessor\t: 1\nBogoMIPS\t: 50.00\n\nHardware\t: Foo\nRevision\t: 0\n";
        let info = CpuInfo::parse(text).unwrap();
        assert_eq!(info.prefix(), "junk header\n\n");
        assert_eq!(info.trailer(), "Hardware\t: Foo\nRevision\t: 0\n");
        assert_eq!(info.to_text(), text);
    }

    #[test]
    fn rejects_empty_and_duplicates() {
        assert!(CpuInfo::parse("").is_err());
        assert!(CpuInfo::parse("processor : 0\n\nprocessor : 0\n").is_err());
    }

    #[test]
    fn topology_from_texts() {
        let topo = HostTopology::from_texts("0-3\n", &sample_cpuinfo(&[0, 1, 2, 3])).unwrap();
        assert_eq!(topo.online, CpuSet::range(0, 3));
        assert_eq!(topo.cpuinfo.ids().collect::<CpuSet>(), topo.online);
    }
}
