//! Text of the per-context replicas of CPU resource files.

use alloc::string::String;

use crate::cpuset::CpuSet;
use crate::error::{Error, Result};
use crate::topology::HostTopology;

/// The host's cpuinfo restricted to `allowed`: host stanzas in ascending id
/// order, byte-identical and with their original ids.
pub fn forge_cpuinfo(topo: &HostTopology, allowed: &CpuSet) -> Result<String> {
    let info = &topo.cpuinfo;
    let mut out = String::from(info.prefix());
    for cpu in allowed.iter() {
        let stanza = info.stanza(cpu).ok_or(Error::MissingStanza(cpu))?;
        out.push_str(stanza);
        if !stanza.ends_with("\n\n") {
            // the host's last stanza may lack its separator
            out.push_str(if stanza.ends_with('\n') { "\n" } else { "\n\n" });
        }
    }
    out.push_str(info.trailer());
    if allowed.iter().eq(info.ids()) {
        // Identity: keep the host bytes, including a missing final separator.
        return Ok(info.to_text());
    }
    Ok(out)
}

/// Contents of the online-cpus file for `allowed`, e.g. `"0-11\n"`.
pub fn forge_online(allowed: &CpuSet) -> Result<String> {
    if allowed.is_empty() {
        return Err(Error::EmptyCpuSet);
    }
    let mut text = allowed.to_list();
    text.push('\n');
    Ok(text)
}
