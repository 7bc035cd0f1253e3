//! Supervised children on a simulated 8-CPU topology (kernel affinity is
//! clipped to the real host), plus identity runs on the real topology.

mod common;

use std::os::fd::AsRawFd;
use std::path::Path;

use common::*;
use libctx::monitor::{spawn_supervised, ExitStatus, Monitor, MonitorOptions};
use libctx::virt::Counters;
use libctx::{CpuSet, Error};
use libctx_core::cpuset::parse_cpu_list;
use libctx_core::filter::Arch;

fn host_online() -> CpuSet {
    libctx::host::read_host_topology().unwrap().online
}

/// Runs the probe with `args` in a context on `cpus`; returns its output,
/// exit status and the monitor's counters.
fn run_in(opts: MonitorOptions, cpus: &str, args: &[&str]) -> (String, ExitStatus, Counters) {
    let mut m = Monitor::new(opts).unwrap();
    let ctx = m.create_context(parse_cpu_list(cpus).unwrap()).unwrap();
    run_ctx(&mut m, ctx, args)
}

fn run_ctx(m: &mut Monitor, ctx: libctx::ContextId, args: &[&str]) -> (String, ExitStatus, Counters) {
    let out = tempfile::tempfile().unwrap();
    m.spawn_with_stdout(ctx, &argv(args), Some(out.as_raw_fd())).unwrap();
    let reports = m.run().unwrap();
    assert_eq!(reports.len(), 1);
    (read_back(out), reports[0].status, m.counters().clone())
}

fn read_back(mut f: std::fs::File) -> String {
    use std::io::{Read, Seek};
    f.rewind().unwrap();
    let mut s = String::new();
    f.read_to_string(&mut s).unwrap();
    s
}

fn untraced(args: &[&str]) -> String {
    let out = std::process::Command::new(PROBE).args(args).output().unwrap();
    assert!(out.status.success());
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn affinity_query_reports_the_context() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, status, c) = run_in(simulated(8, tmp.path()), "0,1", &["affinity"]);
    assert!(status.success());
    assert_eq!(field(&out, "list"), Some("0-1"));
    assert_eq!(field(&out, "count"), Some("2"));
    let kernel = parse_cpu_list(field(&out, "kernel").unwrap()).unwrap();
    assert!(kernel.is_subset(&parse_cpu_list("0,1").unwrap()));
    let nr = Arch::NATIVE.sched_getaffinity();
    assert!(c.entries_of(nr) >= 1);
    assert_eq!(c.entries_of(nr), c.exits_of(nr));
}

#[test]
fn identity_context_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let opts = MonitorOptions {
        forge_root: tmp.path().into(),
        ..Default::default()
    };
    let online = host_online().to_list();
    let (out, status, c) = run_in(opts, &online, &["affinity"]);
    assert!(status.success());
    assert_eq!(out, untraced(&["affinity"]));
    assert_eq!(c.rewritten_total(), 0);
}

#[test]
fn setaffinity_matches_the_clamp_model() {
    let tmp = tempfile::tempdir().unwrap();
    let real = host_online();
    let allowed = parse_cpu_list("0,2,3").unwrap();
    let requests = ["0-7", "0", "1", "2-3", "1,4-7", "0,1"];
    let (out, status, c) = run_in(simulated(8, tmp.path()), "0,2,3", &[&["clamp"][..], &requests[..]].concat());
    assert!(status.success());
    let mut kernel = allowed.intersection(&real);
    for (line, req) in out.lines().zip(requests) {
        let m = parse_cpu_list(req).unwrap();
        let effective = m.intersection(&allowed);
        let applied = effective.intersection(&real);
        if effective.is_empty() || applied.is_empty() {
            assert_eq!(field(line, "errno"), Some("22"), "{line}");
        } else {
            assert_eq!(field(line, "ret"), Some("0"), "{line}");
            kernel = applied;
        }
        assert_eq!(parse_cpu_list(field(line, "kernel").unwrap()).unwrap(), kernel, "{line}");
        assert_eq!(field(line, "restored"), Some("1"), "{line}");
    }
    assert_eq!(out.lines().count(), requests.len());
    let nr = Arch::NATIVE.sched_setaffinity() as i64;
    assert!(c.rewritten.get(&nr).copied().unwrap_or(0) >= 3);
}

#[test]
fn resource_files_are_redirected() {
    let tmp = tempfile::tempdir().unwrap();
    let opts = || simulated(8, tmp.path());
    let (out, _, c) = run_in(opts(), "1,3", &["cpuinfo"]);
    assert_eq!(out.trim(), "processors=2 ids=1,3");
    assert!(c.redirected >= 1);
    let (out, _, _) = run_in(opts(), "1,3", &["online"]);
    assert_eq!(out, "1,3\n");
    let (out, _, _) = run_in(opts(), "1,3", &["cpuinfo-at", "/proc", "cpuinfo"]);
    assert_eq!(out.trim(), "processors=2 ids=1,3");
    let (out, _, _) = run_in(opts(), "1,3", &["cpuinfo-cwd", "/sys/devices", "../devices/system/cpu/../../../../proc/./cpuinfo"]);
    assert_eq!(out.trim(), "processors=2 ids=1,3");
    let (out, _, c) = run_in(opts(), "1,3", &["cat", "/etc/hostname"]);
    assert_eq!(out, std::fs::read_to_string("/etc/hostname").unwrap());
    assert_eq!(c.redirected, 0);
}

#[test]
fn forged_files_follow_reconfiguration() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = Monitor::new(simulated(24, tmp.path())).unwrap();
    let ctx = m.create_context(CpuSet::range(0, 11)).unwrap();
    let (out, _, _) = run_ctx(&mut m, ctx, &["cpuinfo"]);
    assert_eq!(out.trim(), "processors=12 ids=0-11");
    let first = m.forge().get(ctx).unwrap().generation;
    m.set_allowed_cpus(ctx, CpuSet::range(0, 5)).unwrap();
    assert_eq!(m.forge().get(ctx).unwrap().generation, first + 1);
    let (out, _, _) = run_ctx(&mut m, ctx, &["cpuinfo"]);
    assert_eq!(out.trim(), "processors=6 ids=0-5");
    let (out, _, _) = run_ctx(&mut m, ctx, &["affinity"]);
    assert_eq!(field(&out, "count"), Some("6"));
}

#[test]
fn unfiltered_syscalls_cause_no_stops() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, _, base) = run_in(simulated(8, tmp.path()), "0,1", &["affinity"]);
    let (out, _, c) = run_in(simulated(8, tmp.path()), "0,1", &["getpid", "100000"]);
    assert_eq!(field(&out, "count"), Some("2"));
    assert_eq!(c.entries_of(libc::SYS_getpid as u32), 0);
    let nr = Arch::NATIVE.sched_getaffinity();
    assert!(c.entries_of(nr) >= 1);
    assert_eq!(c.entries_of(nr), base.entries_of(nr));
    assert_eq!(c.exits_of(nr), c.entries_of(nr));
    assert!(c.stops <= base.stops, "{} > {}", c.stops, base.stops);
    let traced: Vec<u32> = Arch::NATIVE.traced_syscalls();
    assert!(c.rewritten.keys().all(|&nr| traced.contains(&(nr as u32))), "{:?}", c.rewritten);
    assert!(c.entries.keys().all(|&nr| traced.contains(&(nr as u32))), "{:?}", c.entries);
}

#[test]
fn trace_all_virtualizes_too() {
    let tmp = tempfile::tempdir().unwrap();
    let mut opts = simulated(8, tmp.path());
    opts.trace_all = true;
    let (out, status, c) = run_in(opts, "0,1", &["getpid", "1000"]);
    assert!(status.success());
    assert_eq!(field(&out, "count"), Some("2"));
    assert!(c.entries_of(libc::SYS_getpid as u32) >= 1000);
}

#[test]
fn new_threads_inherit_the_context() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, status, _) = run_in(simulated(8, tmp.path()), "0,1", &["threads", "4"]);
    assert!(status.success());
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4);
    for l in lines {
        assert_eq!(field(l, "seen"), Some("0-1"), "{l}");
        let kernel = parse_cpu_list(field(l, "kernel").unwrap()).unwrap();
        assert!(kernel.is_subset(&parse_cpu_list("0,1").unwrap()), "{l}");
    }
}

#[test]
fn two_contexts_do_not_cross_talk() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = Monitor::new(simulated(24, tmp.path())).unwrap();
    let a = m.create_context(CpuSet::range(0, 11)).unwrap();
    let b = m.create_context(CpuSet::range(12, 23)).unwrap();
    let (fa, fb) = (tempfile::tempfile().unwrap(), tempfile::tempfile().unwrap());
    m.spawn_with_stdout(a, &argv(&["threads", "3"]), Some(fa.as_raw_fd())).unwrap();
    m.spawn_with_stdout(b, &argv(&["threads", "3"]), Some(fb.as_raw_fd())).unwrap();
    let reports = m.run().unwrap();
    assert_eq!(reports.len(), 2);
    assert!(read_back(fa).lines().all(|l| field(l, "seen") == Some("0-11")));
    assert!(read_back(fb).lines().all(|l| field(l, "seen") == Some("12-23")));
}

#[test]
fn exit_status_propagates() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, status, _) = run_in(simulated(4, tmp.path()), "0", &["exit", "7"]);
    assert_eq!(status, ExitStatus::Code(7));
    let (_, status, _) = run_in(simulated(4, tmp.path()), "0", &["kill", "15"]);
    assert_eq!(status, ExitStatus::Signal(15));
    assert_eq!(status.code(), 143);
}

#[test]
fn environment_overrides_reach_the_child() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = Monitor::new(simulated(4, tmp.path())).unwrap();
    let ctx = m.create_context(CpuSet::range(0, 1)).unwrap();
    m.setenv(ctx, "OMP_NUM_THREADS", "6").unwrap();
    m.setenv(ctx, "LIBCTX_TEST_GONE", "x").unwrap();
    m.unsetenv(ctx, "LIBCTX_TEST_GONE").unwrap();
    m.unsetenv(ctx, "PATH").unwrap();
    m.unsetenv(ctx, "NEVER_SET_ANYWHERE").unwrap();
    let (out, _, _) = run_ctx(&mut m, ctx, &["env", "OMP_NUM_THREADS", "LIBCTX_TEST_GONE", "PATH", "NEVER_SET_ANYWHERE"]);
    assert_eq!(out, "OMP_NUM_THREADS=6\nLIBCTX_TEST_GONE unset\nPATH unset\nNEVER_SET_ANYWHERE unset\n");
}

#[test]
fn missing_program_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = Monitor::new(simulated(4, tmp.path())).unwrap();
    let ctx = m.create_context(CpuSet::range(0, 0)).unwrap();
    let err = m.spawn(ctx, &["/nonexistent/program".to_string()]).unwrap_err();
    assert!(matches!(err, Error::ProgramNotFound(_)), "{err}");
    let err = m.spawn(ctx, &["no-such-program-anywhere-xyz".to_string()]).unwrap_err();
    assert!(matches!(err, Error::ProgramNotFound(_)), "{err}");
    assert!(m.run().unwrap().is_empty());
}

#[test]
fn spawn_supervised_wrapper() {
    let tmp = tempfile::tempdir().unwrap();
    let env = [("LIBCTX_X".to_string(), Some("1".to_string()))];
    let (report, counters) = spawn_supervised(&argv(&["exit", "3"]), CpuSet::range(0, 0), &env, simulated(2, tmp.path())).unwrap();
    assert_eq!(report.status, ExitStatus::Code(3));
    assert!(counters.stops > 0);
}

#[test]
fn forged_directories_are_removed_with_the_monitor() {
    let tmp = tempfile::tempdir().unwrap();
    {
        let mut m = Monitor::new(simulated(4, tmp.path())).unwrap();
        let ctx = m.create_context(CpuSet::range(0, 1)).unwrap();
        run_ctx(&mut m, ctx, &["cpuinfo"]);
        assert!(m.forge().get(ctx).unwrap().dir.exists());
    }
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);
    assert!(Path::new(tmp.path()).exists());
}
