//! The in-process runtime. A process can attach only once, so everything
//! runs in one test.

mod common;

use std::io::Read;

use common::*;
use libctx::affinity;
use libctx::runtime::Runtime;
use libctx::{CpuSet, Error, MonitorOptions};
use libctx_core::context::EnvOverride;
use libctx_core::cpuset::parse_cpu_list;
use libctx_core::protocol::ErrorCode;

fn cpuinfo_ids() -> String {
    let mut s = String::new();
    std::fs::File::open("/proc/cpuinfo").unwrap().read_to_string(&mut s).unwrap();
    let ids: CpuSet = s
        .lines()
        .filter(|l| l.starts_with("processor"))
        .filter_map(|l| l.split(':').nth(1)?.trim().parse().ok())
        .collect();
    ids.to_list()
}

#[test]
fn runtime_lifecycle() {
    let before = affinity::get_affinity(0).unwrap();
    let real_cpuinfo = cpuinfo_ids();
    let tmp = tempfile::tempdir().unwrap();

    let mut bad = simulated(8, tmp.path());
    bad.trace_all = true;
    assert!(Runtime::initialize(bad).is_err());

    let rt = Runtime::initialize(simulated(8, tmp.path())).unwrap();
    assert!(rt.monitor_pid() > 0);
    assert_eq!(rt.online().to_list(), "0-7");
    assert!(matches!(Runtime::initialize(MonitorOptions::default()), Err(Error::AlreadyInitialized)));

    let a = rt.create_context(parse_cpu_list("0,1").unwrap()).unwrap();
    let b = rt.create_context(parse_cpu_list("4-7").unwrap()).unwrap();
    assert_ne!(a, b);
    assert!(rt.create_context(CpuSet::new()).is_err());
    assert!(rt.create_context(parse_cpu_list("9").unwrap()).is_err());

    // Outside any context the process sees the host.
    assert_eq!(affinity::get_affinity(0).unwrap(), before);

    rt.enter(a).unwrap();
    assert_eq!(affinity::get_affinity(0).unwrap().to_list(), "0-1");
    assert_eq!(cpuinfo_ids(), "0-1");

    // Threads created inside a context inherit it.
    let seen = std::thread::spawn(|| affinity::get_affinity(0).unwrap()).join().unwrap();
    assert_eq!(seen.to_list(), "0-1");

    rt.enter(b).unwrap();
    assert_eq!(affinity::get_affinity(0).unwrap().to_list(), "4-7");
    assert_eq!(rt.exit().unwrap(), b);
    assert_eq!(affinity::get_affinity(0).unwrap().to_list(), "0-1");

    // A thread that inherited `a` can enter another context and return to `a`;
    // this thread is unaffected.
    let other = std::thread::spawn(move || {
        rt.enter(b).unwrap();
        let inner = affinity::get_affinity(0).unwrap();
        rt.exit().unwrap();
        (inner, affinity::get_affinity(0).unwrap())
    });
    let (inner, after) = other.join().unwrap();
    assert_eq!((inner.to_list().as_str(), after.to_list().as_str()), ("4-7", "0-1"));
    assert_eq!(affinity::get_affinity(0).unwrap().to_list(), "0-1");

    rt.set_allowed_cpus(a, parse_cpu_list("2-5").unwrap()).unwrap();
    assert_eq!(affinity::get_affinity(0).unwrap().to_list(), "2-5");
    assert_eq!(cpuinfo_ids(), "2-5");
    assert_eq!(rt.exit().unwrap(), a);
    assert_eq!(affinity::get_affinity(0).unwrap(), before);
    assert!(matches!(rt.exit(), Err(Error::NotEntered)));

    // Pinning follows the context and is undone on exit.
    let raw_before = affinity::get_affinity_raw(0).unwrap();
    rt.enter_with_affinity(b).unwrap();
    assert_eq!(affinity::get_affinity(0).unwrap().to_list(), "4-7");
    rt.exit().unwrap();
    assert_eq!(affinity::get_affinity_raw(0).unwrap(), raw_before);

    for _ in 0..8 {
        rt.enter(a).unwrap();
    }
    assert!(matches!(rt.enter(a), Err(Error::StackDepth(8))));
    for _ in 0..8 {
        rt.exit().unwrap();
    }

    // A library loaded into a context's namespace sees that context.
    let lib = fixture("probe", tmp.path());
    let h = rt.load(b, &lib, &syms(&["probe_ncpus", "probe_cpuinfo_count"])).unwrap();
    let ncpus: unsafe extern "C" fn() -> i32 = unsafe { std::mem::transmute(h.address("probe_ncpus").unwrap()) };
    let count: unsafe extern "C" fn() -> i32 = unsafe { std::mem::transmute(h.address("probe_cpuinfo_count").unwrap()) };
    rt.enter(b).unwrap();
    assert_eq!(unsafe { (ncpus(), count()) }, (4, 4));
    rt.exit().unwrap();

    rt.setenv(a, "OMP_NUM_THREADS", "2").unwrap();
    assert_eq!(rt.context(a).unwrap().env.get("OMP_NUM_THREADS"), Some(&EnvOverride::Set("2".into())));
    rt.unsetenv(a, "OMP_NUM_THREADS").unwrap();
    assert_eq!(rt.context(a).unwrap().env.get("OMP_NUM_THREADS"), Some(&EnvOverride::Unset));
    assert!(rt.setenv(a, "BAD=NAME", "x").is_err());
    let missing = libctx::ContextId(999);
    assert!(matches!(rt.enter(missing), Err(Error::UnknownContext(_))));

    rt.shutdown().unwrap();
    rt.enter(a).unwrap();
    assert_eq!(affinity::get_affinity(0).unwrap(), before, "shut-down monitor passes through");
    assert_eq!(cpuinfo_ids(), real_cpuinfo);
    rt.exit().unwrap();
    assert!(matches!(rt.create_context(parse_cpu_list("0").unwrap()), Err(Error::Monitor(ErrorCode::Io))));
}
