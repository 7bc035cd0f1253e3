//! Monitor diagnostics on standard error, controlled by `LIBCTX_LOG`
//! (`off`, `info` or `trace`; unset means off).
//!
//! Lines go out with a single `write(2)` and no locks, so the monitor can
//! log after forking from a multithreaded process.

use std::fmt;
use std::sync::atomic::{AtomicU8, Ordering};

pub const ENV: &str = "LIBCTX_LOG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum Level {
    Off = 0,
    Info = 1,
    Trace = 2,
}

const UNSET: u8 = u8::MAX;
static LEVEL: AtomicU8 = AtomicU8::new(UNSET);

pub fn parse_level(s: &str) -> Level {
    match s.trim().to_ascii_lowercase().as_str() {
        "trace" | "debug" => Level::Trace,
        "info" | "warn" | "error" => Level::Info,
        _ => Level::Off,
    }
}

pub fn level() -> Level {
    match LEVEL.load(Ordering::Relaxed) {
        UNSET => {
            let l = std::env::var(ENV).map(|v| parse_level(&v)).unwrap_or(Level::Off);
            LEVEL.store(l as u8, Ordering::Relaxed);
            l
        }
        2 => Level::Trace,
        1 => Level::Info,
        _ => Level::Off,
    }
}

pub fn set_level(l: Level) {
    LEVEL.store(l as u8, Ordering::Relaxed);
}

#[doc(hidden)]
pub fn emit(l: Level, args: fmt::Arguments<'_>) {
    if l > level() || l == Level::Off {
        return;
    }
    let tag = if l == Level::Trace { "trace" } else { "info" };
    let line = format!("libctx[{}] {tag}: {args}\n", std::process::id());
    let mut buf = line.as_bytes();
    while !buf.is_empty() {
        let n = unsafe { libc::write(2, buf.as_ptr().cast(), buf.len()) };
        if n <= 0 {
            break;
        }
        buf = &buf[n as usize..];
    }
}

macro_rules! info {
    ($($t:tt)*) => { $crate::diag::emit($crate::diag::Level::Info, format_args!($($t)*)) };
}

macro_rules! trace {
    ($($t:tt)*) => { $crate::diag::emit($crate::diag::Level::Trace, format_args!($($t)*)) };
}

pub(crate) use {info, trace};
