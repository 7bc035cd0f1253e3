#![allow(dead_code)]

use libctx::monitor::MonitorOptions;
use libctx_core::HostTopology;

pub const PROBE: &str = env!("CARGO_BIN_EXE_ctx-probe");

pub fn fake_topology(n: usize) -> HostTopology {
    let mut text = String::new();
    for id in 0..n {
        text.push_str(&format!("processor\t: {id}\nmodel name\t: Simulated CPU\ncpu cores\t: {n}\n\n"));
    }
    HostTopology::from_texts(&format!("0-{}\n", n - 1), &text).unwrap()
}

pub fn simulated(n: usize, forge_root: &std::path::Path) -> MonitorOptions {
    MonitorOptions {
        trace_all: false,
        forge_root: forge_root.to_path_buf(),
        topology: Some(fake_topology(n)),
    }
}

pub fn argv(items: &[&str]) -> Vec<String> {
    std::iter::once(PROBE).chain(items.iter().copied()).map(String::from).collect()
}

/// Value of `key=` in the probe's output.
pub fn field<'a>(out: &'a str, key: &str) -> Option<&'a str> {
    out.split_whitespace().find_map(|w| w.strip_prefix(key)?.strip_prefix('='))
}

/// Compiles C source into a shared object in `dir`.
pub fn compile_so(source: &std::path::Path, dir: &std::path::Path, name: &str) -> std::path::PathBuf {
    let out = dir.join(format!("{name}.so"));
    let status = std::process::Command::new("gcc")
        .args(["-shared", "-fPIC", "-O2", "-o"])
        .arg(&out)
        .arg(source)
        .status()
        .expect("gcc");
    assert!(status.success(), "gcc failed for {}", source.display());
    out
}

/// Builds one of the C libraries under `tests/c`.
pub fn fixture(name: &str, dir: &std::path::Path) -> std::path::PathBuf {
    let src = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/c").join(format!("{name}.c"));
    compile_so(&src, dir, name)
}

/// Writes shim `source` next to the libraries and compiles it.
pub fn compile_shim(source: &str, dir: &std::path::Path, name: &str) -> std::path::PathBuf {
    let src = dir.join(format!("{name}.c"));
    std::fs::write(&src, source).unwrap();
    compile_so(&src, dir, name)
}

pub fn syms(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Host-side recomputation of the echo library's checksum.
pub fn echo_checksum(i: [i64; 6], f: [f64; 4]) -> u64 {
    let mix = |h: u64, x: u64| h.wrapping_mul(1099511628211).wrapping_add(x);
    let h = i.iter().fold(14695981039346656037u64, |h, &v| mix(h, v as u64));
    f.iter().fold(h, |h, v| mix(h, v.to_bits()))
}
