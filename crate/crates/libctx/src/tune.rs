//! Grid search over two-workload core partitions.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use libctx_core::tuner::{assign_cores, enumerate_partitions, makespan, Cell, Partition, TuneResult, CSV_HEADER};
use libctx_core::CpuSet;

use crate::diag::info;
use crate::error::{Error, Result};
use crate::monitor::{Monitor, MonitorOptions, INTERRUPTED};

/// Runs both workloads concurrently on `a` and `b`; returns their wall times,
/// or `None` when either failed.
pub trait CellRunner {
    fn run_cell(&mut self, a: &CpuSet, b: &CpuSet) -> Result<Option<(f64, f64)>>;
}

#[derive(Debug, Clone)]
pub struct TuneOptions {
    pub grid_step: usize,
    pub reps: usize,
    pub k_min: Option<usize>,
    pub k_max: Option<usize>,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            grid_step: 1,
            reps: 3,
            k_min: None,
            k_max: None,
        }
    }
}

/// Evaluates every partition of `cores` in grid order, `reps` times each,
/// one cell at a time.
pub fn grid_search(cores: &CpuSet, opts: &TuneOptions, runner: &mut dyn CellRunner) -> Result<TuneResult> {
    if opts.reps == 0 {
        return Err(libctx_core::Error::Grid("reps must be at least 1".into()).into());
    }
    let grid = enumerate_partitions(cores.count(), opts.grid_step, opts.k_min, opts.k_max)?;
    let mut cells = Vec::with_capacity(grid.len() * opts.reps);
    for rep in 0..opts.reps {
        for &partition in &grid {
            if INTERRUPTED.load(std::sync::atomic::Ordering::Relaxed) {
                return Err(Error::Interrupted);
            }
            let (a, b) = assign_cores(cores, partition);
            let seconds = runner.run_cell(&a, &b)?.map(|(ta, tb)| makespan(ta, tb));
            info!("k={} rep={rep}: {seconds:?}", partition.k);
            cells.push(Cell { partition, rep, seconds });
        }
    }
    Ok(TuneResult::new(grid, cells))
}

/// Appends the result's rows under `run_id`, writing the header only into
/// an empty file.
pub fn append_csv(path: &Path, run_id: &str, result: &TuneResult) -> Result<()> {
    if run_id.is_empty() || run_id.contains([',', '\n']) {
        return Err(libctx_core::Error::Grid(format!("invalid run id {run_id:?}")).into());
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let empty = f.metadata().map(|m| m.len() == 0).unwrap_or(true);
    let mut text = String::new();
    if empty {
        text.push_str(CSV_HEADER);
        text.push('\n');
    }
    text.push_str(&result.to_csv_rows(run_id));
    f.write_all(text.as_bytes()).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn describe(p: Partition) -> String {
    format!("k={} n_minus_k={}", p.k, p.n_minus_k)
}

/// Runs each workload as a supervised child in its own context.
pub struct SupervisedRunner {
    pub a: Vec<String>,
    pub b: Vec<String>,
    pub options: MonitorOptions,
}

impl CellRunner for SupervisedRunner {
    fn run_cell(&mut self, a: &CpuSet, b: &CpuSet) -> Result<Option<(f64, f64)>> {
        let mut m = Monitor::new(self.options.clone())?;
        let ca = m.create_context(*a)?;
        let cb = m.create_context(*b)?;
        let pa = m.spawn(ca, &self.a)?;
        let pb = match m.spawn(cb, &self.b) {
            Ok(p) => p,
            Err(e) => {
                m.kill_all();
                let _ = m.run();
                return Err(e);
            }
        };
        let reports = m.run()?;
        let time_of = |pid| reports.iter().find(|r| r.pid == pid).filter(|r| r.status.success()).map(|r| r.elapsed.as_secs_f64());
        Ok(time_of(pa).zip(time_of(pb)))
    }
}
