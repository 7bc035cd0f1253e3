//! Grid-search bookkeeping for two-workload core partitioning: grid
//! enumeration, core assignment, CSV rows and the argmin over recorded means.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::cpuset::CpuSet;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "run_id,k,n_minus_k,rep,seconds";

/// `k` cores for workload A, `n_minus_k` for workload B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Partition {
    pub k: usize,
    pub n_minus_k: usize,
}

/// Partitions `(k, n - k)` for `k` in `step, 2*step, ..` up to `n - step`,
/// restricted to the optional inclusive `k_min..=k_max` hint.
pub fn enumerate_partitions(n: usize, step: usize, k_min: Option<usize>, k_max: Option<usize>) -> Result<Vec<Partition>> {
    if step == 0 {
        return Err(Error::Grid("grid step must be at least 1".into()));
    }
    if n < 2 * step {
        return Err(Error::Grid(format!("{n} cores cannot be split with grid step {step}")));
    }
    let lo = k_min.unwrap_or(0);
    let hi = k_max.unwrap_or(usize::MAX);
    let grid: Vec<Partition> = (1..)
        .map(|i| i * step)
        .take_while(|&k| k + step <= n)
        .filter(|&k| k >= lo && k <= hi)
        .map(|k| Partition { k, n_minus_k: n - k })
        .collect();
    if grid.is_empty() {
        return Err(Error::Grid(format!("no partition of {n} cores with step {step} lies in the k range")));
    }
    Ok(grid)
}

/// The lowest `k` online cores go to workload A, the rest to workload B.
pub fn assign_cores(online: &CpuSet, p: Partition) -> (CpuSet, CpuSet) {
    let a = online.take_lowest(p.k);
    let mut b = *online;
    for cpu in a.iter() {
        b.remove(cpu);
    }
    (a, b)
}

/// One grid cell: the makespan of both workloads for one repetition, or
/// `None` when a workload failed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub partition: Partition,
    pub rep: usize,
    pub seconds: Option<f64>,
}

pub fn makespan(a_seconds: f64, b_seconds: f64) -> f64 {
    a_seconds.max(b_seconds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub grid: Vec<Partition>,
    pub cells: Vec<Cell>,
    pub best: Option<Partition>,
}

impl TuneResult {
    pub fn new(grid: Vec<Partition>, cells: Vec<Cell>) -> TuneResult {
        let best = best_partition(&cells);
        TuneResult { grid, cells, best }
    }

    /// Mean of the recorded repetitions per partition, in grid order.
    pub fn means(&self) -> Vec<(Partition, Option<f64>)> {
        partition_means(&self.cells)
    }

    pub fn to_csv_rows(&self, run_id: &str) -> String {
        let mut out = String::new();
        for c in &self.cells {
            out.push_str(&csv_row(run_id, c));
        }
        out
    }
}

fn partition_means(cells: &[Cell]) -> Vec<(Partition, Option<f64>)> {
    let mut order: Vec<Partition> = Vec::new();
    for c in cells {
        if !order.contains(&c.partition) {
            order.push(c.partition);
        }
    }
    order
        .into_iter()
        .map(|p| {
            let (sum, n) = cells
                .iter()
                .filter(|c| c.partition == p)
                .filter_map(|c| c.seconds)
                .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
            (p, (n > 0).then(|| sum / n as f64))
        })
        .collect()
}

/// Partition with the smallest mean makespan; ties go to the earlier one.
/// Partitions with no successful repetition are excluded.
pub fn best_partition(cells: &[Cell]) -> Option<Partition> {
    let mut best: Option<(Partition, f64)> = None;
    for (p, mean) in partition_means(cells) {
        if let Some(m) = mean {
            if best.is_none_or(|(_, b)| m < b) {
                best = Some((p, m));
            }
        }
    }
    best.map(|(p, _)| p)
}

/// `run_id,k,n_minus_k,rep,seconds`; a failed cell has an empty seconds
/// field. Seconds use the shortest representation that parses back exactly.
pub fn csv_row(run_id: &str, c: &Cell) -> String {
    match c.seconds {
        Some(s) => format!("{run_id},{},{},{},{s:?}\n", c.partition.k, c.partition.n_minus_k, c.rep),
        None => format!("{run_id},{},{},{},\n", c.partition.k, c.partition.n_minus_k, c.rep),
    }
}

/// Reads cells back from CSV text, keeping only rows of `run_id` (or every
/// row when `None`). The header line is optional and may repeat.
pub fn parse_csv(text: &str, run_id: Option<&str>) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() || line == CSV_HEADER {
            continue;
        }
        let bad = || Error::Grid(format!("csv line {}: {line:?}", lineno + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad());
        }
        if run_id.is_some_and(|id| id != fields[0]) {
            continue;
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let seconds = match fields[4] {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|_| bad())?),
        };
        cells.push(Cell {
            partition: Partition {
                k: num(fields[1])?,
                n_minus_k: num(fields[2])?,
            },
            rep: num(fields[3])?,
            seconds,
        });
    }
    Ok(cells)
}
