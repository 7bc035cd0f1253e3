//! Probe helper run under a context by tests and benchmarks. Prints what the
//! process can see as `key=value` lines.

use std::ffi::CString;
use std::hint::black_box;
use std::time::Instant;

use libctx::affinity::{self, MASK_BYTES};
use libctx::runtime::Runtime;
use libctx::{CpuSet, MonitorOptions};
use libctx_core::cpuset::parse_cpu_list;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn count_processors(text: &str) -> (usize, CpuSet) {
    let mut ids = CpuSet::new();
    let mut n = 0;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("processor") {
            n += 1;
            if let Some(id) = rest.split(':').nth(1).and_then(|v| v.trim().parse().ok()) {
                ids.insert(id);
            }
        }
    }
    (n, ids)
}

fn read_fd(fd: i32) -> String {
    use std::io::Read;
    use std::os::fd::FromRawFd;
    let mut f = unsafe { std::fs::File::from_raw_fd(fd) };
    let mut s = String::new();
    f.read_to_string(&mut s).expect("read");
    s
}

fn open_raw(dirfd: i32, path: &str) -> i32 {
    let c = CString::new(path).unwrap();
    let fd = unsafe { libc::openat(dirfd, c.as_ptr(), libc::O_RDONLY | libc::O_CLOEXEC) };
    if fd < 0 {
        eprintln!("open {path}: {}", std::io::Error::last_os_error());
        std::process::exit(1);
    }
    fd
}

fn print_processors(text: &str) {
    let (n, ids) = count_processors(text);
    println!("processors={n} ids={ids}");
}

fn affinity_line() {
    let mut buf = vec![0u8; MASK_BYTES];
    let r = unsafe { libc::syscall(libc::SYS_sched_getaffinity, 0, buf.len(), buf.as_mut_ptr()) };
    if r < 0 {
        println!("ret={} errno={}", r, std::io::Error::last_os_error());
        return;
    }
    buf.truncate(r as usize);
    let set = CpuSet::decode_kernel_mask(&buf);
    println!("ret={r} mask={} list={set} count={}", hex(&buf), set.count());
}

fn kernel_line() {
    let tid = nix::unistd::gettid().as_raw();
    println!("kernel={}", affinity::kernel_affinity(tid).map(|s| s.to_list()).unwrap_or_default());
}

/// Requests each mask in turn and reports the kernel's resulting affinity.
fn clamp(lists: &[String]) {
    let tid = nix::unistd::gettid().as_raw();
    for l in lists {
        let req = if l == "-" { CpuSet::new() } else { parse_cpu_list(l).expect("cpu list") };
        let mut buf = req.encode_kernel_mask(MASK_BYTES).unwrap();
        let before = buf.clone();
        let r = unsafe { libc::syscall(libc::SYS_sched_setaffinity, 0, buf.len(), buf.as_mut_ptr()) };
        let errno = if r < 0 { std::io::Error::last_os_error().raw_os_error().unwrap_or(0) } else { 0 };
        let kernel = affinity::kernel_affinity(tid).unwrap();
        println!("req={l} ret={r} errno={errno} kernel={kernel} restored={}", (buf == before) as u8);
    }
}

fn threads(n: usize) {
    let handles: Vec<_> = (0..n)
        .map(|i| {
            std::thread::spawn(move || {
                let tid = nix::unistd::gettid().as_raw();
                let seen = affinity::get_affinity(0).unwrap();
                let kernel = affinity::kernel_affinity(tid).unwrap();
                format!("thread={i} seen={seen} kernel={kernel}")
            })
        })
        .collect();
    for h in handles {
        println!("{}", h.join().unwrap());
    }
}

fn mean_ns(samples: usize, mut f: impl FnMut()) -> f64 {
    for _ in 0..samples.min(1000) {
        f();
    }
    let t = Instant::now();
    for _ in 0..samples {
        f();
    }
    t.elapsed().as_nanos() as f64 / samples as f64
}

fn bench(samples: usize) {
    let mut buf = vec![0u8; MASK_BYTES];
    let aff = mean_ns(samples, || unsafe {
        black_box(libc::syscall(libc::SYS_sched_getaffinity, 0, buf.len(), buf.as_mut_ptr()));
    });
    let path = CString::new("/proc/cpuinfo").unwrap();
    let open = mean_ns(samples, || unsafe {
        let fd = libc::openat(libc::AT_FDCWD, path.as_ptr(), libc::O_RDONLY);
        libc::close(black_box(fd));
    });
    let mmap = mean_ns(samples, || unsafe {
        let p = libc::mmap(std::ptr::null_mut(), 4096, libc::PROT_READ | libc::PROT_WRITE, libc::MAP_PRIVATE | libc::MAP_ANONYMOUS, -1, 0);
        libc::munmap(black_box(p), 4096);
    });
    println!("getaffinity_ns={aff:.1}");
    println!("open_ns={open:.1}");
    println!("mmap_ns={mmap:.1}");
}

/// Latency of the in-process management calls.
fn bench_api(samples: usize) {
    let rt = Runtime::initialize(MonitorOptions::default()).expect("initialize");
    let online = *rt.online();
    let creates = samples.max(1);
    let t = Instant::now();
    let mut ids = Vec::with_capacity(creates);
    for _ in 0..creates {
        ids.push(rt.create_context(online).unwrap());
    }
    let create = t.elapsed().as_nanos() as f64 / creates as f64;
    let ctx = ids[0];
    let (mut enter, mut leave) = (0u128, 0u128);
    for _ in 0..samples {
        let t = Instant::now();
        rt.enter(ctx).unwrap();
        let m = Instant::now();
        rt.exit().unwrap();
        enter += (m - t).as_nanos();
        leave += m.elapsed().as_nanos();
    }
    let aff_samples = samples.max(1);
    let t = Instant::now();
    for _ in 0..aff_samples {
        rt.enter_with_affinity(ctx).unwrap();
        rt.exit().unwrap();
    }
    let with_aff = t.elapsed().as_nanos() as f64 / aff_samples as f64;
    println!("create_ns={create:.1}");
    println!("enter_ns={:.1}", enter as f64 / samples as f64);
    println!("exit_ns={:.1}", leave as f64 / samples as f64);
    println!("enter_affinity_ns={with_aff:.1}");
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().map(String::as_str).unwrap_or("affinity");
    let arg = |i: usize| args.get(i).cloned().unwrap_or_default();
    let num = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    match mode {
        "affinity" => {
            affinity_line();
            kernel_line();
        }
        "cpuinfo" => print_processors(&read_fd(open_raw(libc::AT_FDCWD, "/proc/cpuinfo"))),
        "online" => print!("{}", read_fd(open_raw(libc::AT_FDCWD, "/sys/devices/system/cpu/online"))),
        "cpuinfo-at" => {
            let dir = open_raw(libc::AT_FDCWD, &arg(1));
            print_processors(&read_fd(open_raw(dir, &arg(2))));
        }
        "cpuinfo-cwd" => {
            std::env::set_current_dir(arg(1)).expect("chdir");
            print_processors(&read_fd(open_raw(libc::AT_FDCWD, &arg(2))));
        }
        "cat" => print!("{}", read_fd(open_raw(libc::AT_FDCWD, &arg(1)))),
        "env" => {
            for name in &args[1..] {
                match std::env::var(name) {
                    Ok(v) => println!("{name}={v}"),
                    Err(_) => println!("{name} unset"),
                }
            }
        }
        "clamp" => clamp(&args[1..]),
        "threads" => threads(num(1, 4)),
        "getpid" => {
            for _ in 0..num(1, 100_000) {
                unsafe { black_box(libc::syscall(libc::SYS_getpid)) };
            }
            affinity_line();
        }
        "spin-cpu" => {
            let until = Instant::now() + std::time::Duration::from_millis(num(1, 200) as u64);
            let mut seen = CpuSet::new();
            while Instant::now() < until {
                let cpu = unsafe { libc::sched_getcpu() };
                if cpu >= 0 {
                    seen.insert(cpu as usize);
                }
            }
            println!("ran_on={seen}");
        }
        "bench" => bench(num(1, 100_000)),
        "bench-api" => bench_api(num(1, 10_000)),
        "exit" => std::process::exit(num(1, 0) as i32),
        "kill" => unsafe {
            libc::raise(num(1, libc::SIGTERM as usize) as i32);
        },
        other => {
            eprintln!("unknown mode {other}");
            std::process::exit(2);
        }
    }
}
