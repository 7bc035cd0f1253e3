//! `libctx`: run programs in CPU contexts, measure overheads, and search
//! core partitions for two concurrent workloads.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use clap::{Parser, Subcommand, ValueEnum};
use libctx::config::RunConfig;
use libctx::monitor::{Monitor, MonitorOptions, INTERRUPTED};
use libctx::tune::{append_csv, describe, grid_search, SupervisedRunner, TuneOptions};
use libctx::{bench, Error};
use libctx_core::shim::ShimKind;
use nix::sys::signal::{sigaction, SaFlags, SigAction, SigHandler, SigSet, Signal};

const CONFIG_ERROR: u8 = 2;
const RUNTIME_ERROR: u8 = 3;

#[derive(Parser)]
#[command(name = "libctx", version, about = "Partition CPUs among programs by virtualizing what they can see")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one supervised program per context of a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Stop on every syscall instead of filtering in the kernel.
        #[arg(long)]
        trace_all: bool,
    },
    /// Syscall and management-call latencies, with and without the monitor.
    Bench {
        #[arg(long, default_value_t = bench::DEFAULT_SAMPLES)]
        samples: usize,
        /// Repetitions; the median of the per-run means is reported.
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Grid search over core partitions for two concurrent workloads.
    Tune {
        /// Command line of workload A, split on whitespace.
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long, default_value_t = 1)]
        grid_step: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long)]
        k_min: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long)]
        csv: PathBuf,
        /// Tag for this run's rows; defaults to the start time and pid.
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Print forwarding-shim source for symbols of a shared library.
    Shim {
        #[arg(long)]
        library: PathBuf,
        /// Comma-separated symbol names; their order fixes the ordinals.
        #[arg(long, value_delimiter = ',', required = true)]
        symbols: Vec<String>,
        #[arg(long, value_enum, default_value_t = Kind::JumpTable)]
        kind: Kind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    JumpTable,
    Service,
}

extern "C" fn on_signal(_: libc::c_int) {
    INTERRUPTED.store(true, Ordering::SeqCst);
}

fn install_signal_handlers() {
    let action = SigAction::new(SigHandler::Handler(on_signal), SaFlags::empty(), SigSet::empty());
    for sig in [Signal::SIGINT, Signal::SIGTERM, Signal::SIGHUP] {
        let _ = unsafe { sigaction(sig, &action) };
    }
}

fn fail(code: u8, e: impl std::fmt::Display) -> ExitCode {
    eprintln!("libctx: {e}");
    ExitCode::from(code)
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config { .. } | Error::NotOnline { .. } | Error::Core(_) | Error::ProgramNotFound(_)
    )
}

fn cmd_run(config: PathBuf, trace_all: bool) -> ExitCode {
    let cfg = match RunConfig::load(&config) {
        Ok(c) => c,
        Err(e) => return fail(CONFIG_ERROR, e),
    };
    let mut opts = MonitorOptions {
        trace_all: trace_all || cfg.options.trace_all,
        ..MonitorOptions::default()
    };
    if let Some(root) = &cfg.options.forge_root {
        opts.forge_root = root.clone();
    }
    let mut monitor = match Monitor::new(opts) {
        Ok(m) => m,
        Err(e) => return fail(RUNTIME_ERROR, e),
    };
    let mut names = HashMap::new();
    let mut ids = Vec::new();
    for c in &cfg.contexts {
        let configured = c.cpu_set().and_then(|cpus| {
            let id = monitor.create_context(cpus)?;
            for (k, v) in &c.env {
                match v {
                    Some(v) => monitor.setenv(id, k, v)?,
                    None => monitor.unsetenv(id, k)?,
                }
            }
            Ok(id)
        });
        match configured {
            Ok(id) => ids.push(id),
            Err(e) => return fail(CONFIG_ERROR, format!("context {:?}: {e}", c.name)),
        }
    }
    for (c, id) in cfg.contexts.iter().zip(ids) {
        match monitor.spawn(id, &c.argv) {
            Ok(pid) => {
                names.insert(pid, c.name.as_str());
            }
            Err(e) => {
                monitor.kill_all();
                let _ = monitor.run();
                let code = if is_config_error(&e) { CONFIG_ERROR } else { RUNTIME_ERROR };
                return fail(code, format!("context {:?}: {e}", c.name));
            }
        }
    }
    let reports = match monitor.run() {
        Ok(r) => r,
        Err(e) => return fail(RUNTIME_ERROR, e),
    };
    let mut ok = !INTERRUPTED.load(Ordering::SeqCst);
    for c in &cfg.contexts {
        let Some(r) = reports.iter().find(|r| names.get(&r.pid) == Some(&c.name.as_str())) else {
            ok = false;
            continue;
        };
        println!("{}\t{:.6}", c.name, r.elapsed.as_secs_f64());
        if !r.status.success() {
            eprintln!("libctx: context {:?}: {:?}", c.name, r.status);
            ok = false;
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(RUNTIME_ERROR)
    }
}

fn cmd_bench(samples: usize, runs: usize, csv: Option<PathBuf>) -> ExitCode {
    let probe = match bench::find_helper("ctx-probe") {
        Ok(p) => p,
        Err(e) => return fail(RUNTIME_ERROR, e),
    };
    let report = match bench::run(&probe, samples, runs) {
        Ok(r) => r,
        Err(e) => return fail(RUNTIME_ERROR, e),
    };
    println!("# {} samples, median of {} runs, traced in {}", report.samples, report.runs, report.setup);
    print!("{}", report.table());
    if let Some(path) = csv {
        if let Err(e) = std::fs::write(&path, report.csv()) {
            return fail(RUNTIME_ERROR, format!("write {}: {e}", path.display()));
        }
    }
    ExitCode::SUCCESS
}

fn cmd_tune(a: String, b: String, opts: TuneOptions, csv: PathBuf, run_id: Option<String>) -> ExitCode {
    let split = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let (a, b) = (split(&a), split(&b));
    if a.is_empty() || b.is_empty() {
        return fail(CONFIG_ERROR, "workload command lines must not be empty");
    }
    let cores = match libctx::host::read_host_topology() {
        Ok(t) => t.online,
        Err(e) => return fail(RUNTIME_ERROR, e),
    };
    let run_id = run_id.unwrap_or_else(|| {
        let secs = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
        format!("{secs}-{}", std::process::id())
    });
    let mut runner = SupervisedRunner {
        a,
        b,
        options: MonitorOptions::default(),
    };
    let result = match grid_search(&cores, &opts, &mut runner) {
        Ok(r) => r,
        Err(e @ Error::Core(_)) => return fail(CONFIG_ERROR, e),
        Err(e) => return fail(RUNTIME_ERROR, e),
    };
    if let Err(e) = append_csv(&csv, &run_id, &result) {
        return fail(RUNTIME_ERROR, e);
    }
    println!("run_id={run_id}");
    for (p, mean) in result.means() {
        match mean {
            Some(m) => println!("{}\tmean={m:.6}", describe(p)),
            None => println!("{}\tfailed", describe(p)),
        }
    }
    match result.best {
        Some(p) => {
            println!("best {}", describe(p));
            ExitCode::SUCCESS
        }
        None => fail(RUNTIME_ERROR, "every cell failed"),
    }
}

fn cmd_shim(library: PathBuf, symbols: Vec<String>, kind: Kind, out: Option<PathBuf>) -> ExitCode {
    let kind = match kind {
        Kind::JumpTable => ShimKind::JumpTable,
        Kind::Service => ShimKind::Service,
    };
    let src = match libctx::elf::generate_shim_for(&library, kind, &symbols) {
        Ok(s) => s,
        Err(e) => return fail(CONFIG_ERROR, e),
    };
    match out {
        Some(path) => match std::fs::write(&path, src) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(RUNTIME_ERROR, format!("write {}: {e}", path.display())),
        },
        None => {
            print!("{src}");
            ExitCode::SUCCESS
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    install_signal_handlers();
    match cli.command {
        Cmd::Run { config, trace_all } => cmd_run(config, trace_all),
        Cmd::Bench { samples, runs, csv } => cmd_bench(samples, runs, csv),
        Cmd::Tune {
            a,
            b,
            grid_step,
            reps,
            k_min,
            k_max,
            csv,
            run_id,
        } => cmd_tune(
            a,
            b,
            TuneOptions {
                grid_step,
                reps,
                k_min,
                k_max,
            },
            csv,
            run_id,
        ),
        Cmd::Shim {
            library,
            symbols,
            kind,
            out,
        } => cmd_shim(library, symbols, kind, out),
    }
}
