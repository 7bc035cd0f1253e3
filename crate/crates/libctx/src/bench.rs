//! Overhead microbenchmarks: syscall latency with and without the monitor,
//! and the latency of the in-process management calls. Each figure is the
//! median over `runs` of a mean over `samples` calls.

use std::collections::BTreeMap;
use std::io::{Read, Seek};
use std::os::fd::AsRawFd;
use std::path::{Path, PathBuf};
use std::process::Command;

use libctx_core::CpuSet;

use crate::error::{Error, Result};
use crate::host::{read_host_topology, simulated_topology};
use crate::monitor::{Monitor, MonitorOptions};

pub const DEFAULT_SAMPLES: usize = 120_000;

/// Row names in report order.
pub const ROWS: [&str; 10] = [
    "getaffinity_untraced",
    "getaffinity_traced",
    "open_untraced",
    "open_traced",
    "mmap_untraced",
    "mmap_traced",
    "create",
    "enter",
    "exit",
    "enter_with_affinity",
];

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub samples: usize,
    pub runs: usize,
    /// The context the traced probe ran in, and on which topology.
    pub setup: String,
    pub ns: BTreeMap<String, f64>,
}

impl BenchReport {
    pub fn get(&self, row: &str) -> Option<f64> {
        self.ns.get(row).copied()
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<24}{:>12}\n", "operation", "mean (us)");
        for row in ROWS {
            if let Some(ns) = self.get(row) {
                out.push_str(&format!("{row:<24}{:>12.3}\n", ns / 1000.0));
            }
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("operation,mean_ns,samples\n");
        for row in ROWS {
            if let Some(ns) = self.get(row) {
                out.push_str(&format!("{row},{ns:.1},{}\n", self.samples));
            }
        }
        out
    }
}

/// Locates a helper executable shipped with this crate: next to the running
/// executable, or one directory up (test binaries live in `deps/`).
pub fn find_helper(name: &str) -> Result<PathBuf> {
    let exe = std::env::current_exe().map_err(|e| Error::io("current_exe", e))?;
    exe.ancestors()
        .skip(1)
        .take(2)
        .map(|d| d.join(name))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::ProgramNotFound(name.into()))
}

/// `key=value` pairs with numeric values.
pub fn parse_values(out: &str) -> BTreeMap<String, f64> {
    out.split_whitespace()
        .filter_map(|w| {
            let (k, v) = w.split_once('=')?;
            Some((k.to_string(), v.parse().ok()?))
        })
        .collect()
}

fn run_untraced(probe: &Path, args: &[&str]) -> Result<BTreeMap<String, f64>> {
    let out = Command::new(probe).args(args).output().map_err(|e| Error::io(format!("run {}", probe.display()), e))?;
    if !out.status.success() {
        return Err(Error::Spawn {
            program: format!("{} {}: {}", probe.display(), args.join(" "), String::from_utf8_lossy(&out.stderr).trim()),
            errno: nix::errno::Errno::UnknownErrno,
        });
    }
    Ok(parse_values(&String::from_utf8_lossy(&out.stdout)))
}

/// Options and context for the traced run. On a single-CPU host the probe
/// runs on a simulated two-CPU topology so its context is a strict subset.
fn traced_setup() -> Result<(MonitorOptions, CpuSet, String)> {
    let host = read_host_topology()?;
    if host.online.count() >= 2 {
        let ctx = host.online.take_lowest(host.online.count() / 2);
        let setup = format!("context {ctx} of host cpus {}", host.online);
        return Ok((MonitorOptions::default(), ctx, setup));
    }
    let opts = MonitorOptions {
        topology: Some(simulated_topology(2)?),
        ..MonitorOptions::default()
    };
    Ok((opts, CpuSet::range(0, 0), "context 0 of simulated cpus 0-1 (single-cpu host)".into()))
}

fn run_traced(probe: &Path, opts: &MonitorOptions, ctx: &CpuSet, samples: usize) -> Result<BTreeMap<String, f64>> {
    let mut m = Monitor::new(opts.clone())?;
    let id = m.create_context(*ctx)?;
    let mut out = tempfile_in_temp()?;
    let argv = [probe.display().to_string(), "bench".into(), samples.to_string()];
    m.spawn_with_stdout(id, &argv, Some(out.as_raw_fd()))?;
    let reports = m.run()?;
    if !reports.iter().all(|r| r.status.success()) {
        return Err(Error::Spawn {
            program: "traced probe".into(),
            errno: nix::errno::Errno::UnknownErrno,
        });
    }
    let mut text = String::new();
    out.rewind().and_then(|_| out.read_to_string(&mut text)).map_err(|e| Error::io("read probe output", e))?;
    Ok(parse_values(&text))
}

fn tempfile_in_temp() -> Result<std::fs::File> {
    let path = std::env::temp_dir().join(format!("libctx-bench-{}", std::process::id()));
    let f = std::fs::OpenOptions::new()
        .create(true)
        .truncate(true)
        .read(true)
        .write(true)
        .open(&path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let _ = std::fs::remove_file(&path);
    Ok(f)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Runs the probe untraced, traced and in API mode `runs` times,
/// interleaved so slow drifts affect both sides alike.
pub fn run(probe: &Path, samples: usize, runs: usize) -> Result<BenchReport> {
    let (opts, ctx, setup) = traced_setup()?;
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let n = samples.to_string();
    for _ in 0..runs.max(1) {
        for (k, v) in run_untraced(probe, &["bench", &n])? {
            acc.entry(format!("{}_untraced", k.trim_end_matches("_ns"))).or_default().push(v);
        }
        for (k, v) in run_traced(probe, &opts, &ctx, samples)? {
            acc.entry(format!("{}_traced", k.trim_end_matches("_ns"))).or_default().push(v);
        }
        for (k, v) in run_untraced(probe, &["bench-api", &n])? {
            let name = match k.trim_end_matches("_ns") {
                "enter_affinity" => "enter_with_affinity",
                other => other,
            };
            acc.entry(name.to_string()).or_default().push(v);
        }
    }
    let ns = acc.into_iter().map(|(k, mut v)| (k, median(&mut v))).collect();
    Ok(BenchReport {
        samples,
        runs: runs.max(1),
        setup,
        ns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_and_medians() {
        let v = parse_values("getaffinity_ns=199.8\nopen_ns=1304.8 junk x=y\n");
        assert_eq!(v["getaffinity_ns"], 199.8);
        assert_eq!(v.len(), 2);
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn report_formats() {
        let r = BenchReport {
            samples: 10,
            runs: 1,
            setup: String::new(),
            ns: [("create".to_string(), 1500.0), ("mmap_traced".to_string(), 800.0)].into_iter().collect(),
        };
        assert_eq!(r.csv(), "operation,mean_ns,samples\nmmap_traced,800.0,10\ncreate,1500.0,10\n");
        assert!(r.table().contains("create                         1.500"));
    }
}
