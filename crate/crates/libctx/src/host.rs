use std::fs;
use std::path::Path;

use libctx_core::HostTopology;

use crate::error::{Error, Result};

pub const ONLINE_PATH: &str = "/sys/devices/system/cpu/online";
pub const CPUINFO_PATH: &str = "/proc/cpuinfo";

/// Snapshot of the host's online CPUs and cpuinfo stanzas. CPU hotplug after
/// the snapshot is not tracked.
pub fn read_host_topology() -> Result<HostTopology> {
    read_topology_from(Path::new(ONLINE_PATH), Path::new(CPUINFO_PATH))
}

pub fn read_topology_from(online: &Path, cpuinfo: &Path) -> Result<HostTopology> {
    let read = |p: &Path| {
        fs::read_to_string(p).map_err(|source| Error::Topology {
            path: p.to_owned(),
            source,
        })
    };
    Ok(HostTopology::from_texts(&read(online)?, &read(cpuinfo)?)?)
}

/// An `n`-CPU topology made of copies of the host's first cpuinfo stanza,
/// renumbered `0..n`. Used to exercise contexts larger than the host.
pub fn simulated_topology(n: usize) -> Result<HostTopology> {
    let host = read_host_topology()?;
    let first = host.cpuinfo.ids().next().and_then(|id| host.cpuinfo.stanza(id)).unwrap_or("processor\t: 0\n");
    let mut text = String::new();
    for id in 0..n.max(1) {
        for line in first.trim_end().lines() {
            match line.split_once(':') {
                Some((key, _)) if key.trim() == "processor" => text.push_str(&format!("{key}: {id}\n")),
                _ => {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
        text.push('\n');
    }
    Ok(HostTopology::from_texts(&format!("0-{}\n", n.max(1) - 1), &text)?)
}
