//! Synthetic parallel workload. Spawns worker threads that share a fixed
//! amount of work per round and meet at a spinning barrier between rounds.
//! With `--knee K`, workers beyond the first K-1 share one lock, so speedup
//! stops at K threads.

use std::hint::black_box;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use clap::Parser;

#[derive(Parser)]
#[command(about = "Spinning worker threads with a tunable scaling knee")]
struct Args {
    /// Worker count, or `auto` for the number of CPUs the process may use.
    #[arg(long, default_value = "auto")]
    threads: String,
    /// Work units per round, split across workers.
    #[arg(long, default_value_t = 2000)]
    work: usize,
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    /// Threads beyond this count add no speedup; 0 means unlimited.
    #[arg(long, default_value_t = 0)]
    knee: usize,
}

fn unit(seed: u64) -> u64 {
    let mut x = seed.wrapping_mul(2).wrapping_add(1);
    for _ in 0..20_000 {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
    }
    black_box(x)
}

struct Barrier {
    n: usize,
    count: AtomicUsize,
    generation: AtomicUsize,
}

impl Barrier {
    fn wait(&self) {
        let gen = self.generation.load(Ordering::Acquire);
        if self.count.fetch_add(1, Ordering::AcqRel) + 1 == self.n {
            self.count.store(0, Ordering::Release);
            self.generation.fetch_add(1, Ordering::AcqRel);
            return;
        }
        let mut spins = 0u32;
        while self.generation.load(Ordering::Acquire) == gen {
            spins = spins.wrapping_add(1);
            if spins % (1 << 16) == 0 {
                std::thread::yield_now();
            }
            std::hint::spin_loop();
        }
    }
}

fn visible_cpus() -> usize {
    libctx::affinity::get_affinity(0).map(|s| s.count()).unwrap_or(1).max(1)
}

fn main() {
    let args = Args::parse();
    let threads = match args.threads.as_str() {
        "auto" => visible_cpus(),
        n => match n.parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("ctx-spin: --threads takes a positive count or auto");
                std::process::exit(2);
            }
        },
    };
    let barrier = Arc::new(Barrier {
        n: threads,
        count: AtomicUsize::new(0),
        generation: AtomicUsize::new(0),
    });
    let shared = Arc::new(Mutex::new(()));
    let start = Instant::now();
    let workers: Vec<_> = (0..threads)
        .map(|i| {
            let (barrier, shared) = (barrier.clone(), shared.clone());
            let serialized = args.knee > 0 && i + 1 >= args.knee;
            let (work, rounds) = (args.work, args.rounds);
            std::thread::spawn(move || {
                let mut acc = 0u64;
                for r in 0..rounds {
                    for u in (i..work).step_by(threads) {
                        let seed = (r * work + u) as u64;
                        if serialized {
                            let _g = shared.lock().unwrap();
                            acc = acc.wrapping_add(unit(seed));
                        } else {
                            acc = acc.wrapping_add(unit(seed));
                        }
                    }
                    barrier.wait();
                }
                acc
            })
        })
        .collect();
    let sum = workers.into_iter().fold(0u64, |a, w| a.wrapping_add(w.join().unwrap()));
    println!("threads={threads} seconds={:.6} check={sum:x}", start.elapsed().as_secs_f64());
}
