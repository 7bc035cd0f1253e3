//! Fixed-capacity sets of logical CPU ids.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};

/// Number of logical CPU ids a [`CpuSet`] can hold.
pub const MAX_CPUS: usize = 1024;

const WORDS: usize = MAX_CPUS / 64;
const WORD_BYTES: usize = core::mem::size_of::<usize>();

/// A bitmask over logical CPU ids `0..MAX_CPUS`.
///
/// Ids are host ids; contexts never renumber them.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CpuSet {
    words: [u64; WORDS],
}

impl CpuSet {
    pub const fn new() -> Self {
        CpuSet { words: [0; WORDS] }
    }

    /// The contiguous range `first..=last`.
    pub fn range(first: usize, last: usize) -> Self {
        assert!(last < MAX_CPUS, "cpu {last} out of range");
        let mut set = CpuSet::new();
        for cpu in first..=last {
            set.insert(cpu);
        }
        set
    }

    /// Inserts `cpu`, returning whether it was newly added.
    ///
    /// Panics if `cpu >= MAX_CPUS`; use [`CpuSet::try_insert`] for untrusted ids.
    pub fn insert(&mut self, cpu: usize) -> bool {
        assert!(cpu < MAX_CPUS, "cpu {cpu} out of range");
        let (w, b) = (cpu / 64, cpu % 64);
        let fresh = self.words[w] & (1 << b) == 0;
        self.words[w] |= 1 << b;
        fresh
    }

    pub fn try_insert(&mut self, cpu: usize) -> Option<bool> {
        (cpu < MAX_CPUS).then(|| self.insert(cpu))
    }

    pub fn remove(&mut self, cpu: usize) -> bool {
        if cpu >= MAX_CPUS {
            return false;
        }
        let (w, b) = (cpu / 64, cpu % 64);
        let present = self.words[w] & (1 << b) != 0;
        self.words[w] &= !(1 << b);
        present
    }

    pub fn contains(&self, cpu: usize) -> bool {
        cpu < MAX_CPUS && self.words[cpu / 64] & (1 << (cpu % 64)) != 0
    }

    /// Number of CPUs in the set.
    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn first(&self) -> Option<usize> {
        self.iter().next()
    }

    pub fn last(&self) -> Option<usize> {
        self.words
            .iter()
            .enumerate()
            .rev()
            .find(|(_, &w)| w != 0)
            .map(|(i, &w)| i * 64 + 63 - w.leading_zeros() as usize)
    }

    pub fn intersection(&self, other: &CpuSet) -> CpuSet {
        let mut out = *self;
        for (a, b) in out.words.iter_mut().zip(other.words.iter()) {
            *a &= *b;
        }
        out
    }

    pub fn union(&self, other: &CpuSet) -> CpuSet {
        let mut out = *self;
        for (a, b) in out.words.iter_mut().zip(other.words.iter()) {
            *a |= *b;
        }
        out
    }

    pub fn is_subset(&self, other: &CpuSet) -> bool {
        self.words
            .iter()
            .zip(other.words.iter())
            .all(|(a, b)| a & !b == 0)
    }

    pub fn is_disjoint(&self, other: &CpuSet) -> bool {
        self.intersection(other).is_empty()
    }

    /// Ascending iterator over member ids.
    pub fn iter(&self) -> Iter<'_> {
        Iter { set: self, next: 0 }
    }

    /// The first `n` members in ascending order.
    pub fn take_lowest(&self, n: usize) -> CpuSet {
        self.iter().take(n).collect()
    }

    /// Smallest buffer length that [`CpuSet::encode_kernel_mask`] accepts:
    /// the bytes needed for the highest member, rounded up to the native word.
    pub fn kernel_mask_len(&self) -> usize {
        match self.last() {
            None => 0,
            Some(hi) => (hi / 8 + 1).div_ceil(WORD_BYTES) * WORD_BYTES,
        }
    }

    /// Encodes the set in the kernel affinity layout: bit `i` of byte `i / 8`
    /// is CPU `8 * (i / 8) + i % 8`, trailing bytes zeroed up to `buffer_len`.
    pub fn encode_kernel_mask(&self, buffer_len: usize) -> Result<Vec<u8>> {
        let mut out = vec![0u8; buffer_len];
        self.encode_into(&mut out)?;
        Ok(out)
    }

    /// Like [`CpuSet::encode_kernel_mask`], writing into an existing buffer.
    pub fn encode_into(&self, buf: &mut [u8]) -> Result<()> {
        let needed = self.kernel_mask_len();
        if buf.len() < needed {
            return Err(Error::MaskBufferTooSmall {
                len: buf.len(),
                cpu: self.last().unwrap_or(0),
                needed,
            });
        }
        buf.fill(0);
        for cpu in self.iter() {
            buf[cpu / 8] |= 1 << (cpu % 8);
        }
        Ok(())
    }

    /// Decodes a kernel affinity mask. Bits at or beyond [`MAX_CPUS`] are ignored.
    pub fn decode_kernel_mask(bytes: &[u8]) -> CpuSet {
        let mut set = CpuSet::new();
        for (i, &byte) in bytes.iter().enumerate().take(MAX_CPUS / 8) {
            if byte != 0 {
                set.words[i / 8] |= (byte as u64) << ((i % 8) * 8);
            }
        }
        set
    }

    /// Canonical list form, e.g. `0-2,5,7-8`. The empty set formats as `""`.
    pub fn to_list(&self) -> String {
        self.to_string()
    }
}

/// Parses the kernel cpu-list syntax: comma separated ids `N` and inclusive
/// ranges `A-B`, whitespace allowed around tokens.
pub fn parse_cpu_list(text: &str) -> Result<CpuSet> {
    if text.trim().is_empty() {
        return Err(Error::CpuList {
            token: text.into(),
            reason: "empty list",
        });
    }
    let mut set = CpuSet::new();
    for raw in text.split(',') {
        let token = raw.trim();
        let bad = |reason| Error::CpuList {
            token: token.into(),
            reason,
        };
        let (lo, hi) = match token.split_once('-') {
            Some((a, b)) => (parse_id(a.trim()).ok_or_else(|| bad("not a cpu id"))?, parse_id(b.trim()).ok_or_else(|| bad("not a cpu id"))?),
            None => {
                let id = parse_id(token).ok_or_else(|| bad("not a cpu id"))?;
                (id, id)
            }
        };
        if lo > hi {
            return Err(bad("reversed range"));
        }
        if hi >= MAX_CPUS {
            return Err(bad("cpu id exceeds MAX_CPUS"));
        }
        for cpu in lo..=hi {
            set.insert(cpu);
        }
    }
    Ok(set)
}

fn parse_id(s: &str) -> Option<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

impl FromStr for CpuSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_cpu_list(s)
    }
}

impl fmt::Display for CpuSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        let mut iter = self.iter().peekable();
        while let Some(start) = iter.next() {
            let mut end = start;
            while iter.peek() == Some(&(end + 1)) {
                end = iter.next().unwrap();
            }
            if !first {
                f.write_str(",")?;
            }
            first = false;
            if start == end {
                write!(f, "{start}")?;
            } else {
                write!(f, "{start}-{end}")?;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for CpuSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CpuSet({self})")
    }
}

impl FromIterator<usize> for CpuSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut set = CpuSet::new();
        for cpu in iter {
            set.insert(cpu);
        }
        set
    }
}

impl<'a> IntoIterator for &'a CpuSet {
    type Item = usize;
    type IntoIter = Iter<'a>;

    fn into_iter(self) -> Iter<'a> {
        self.iter()
    }
}

pub struct Iter<'a> {
    set: &'a CpuSet,
    next: usize,
}

impl Iterator for Iter<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        while self.next < MAX_CPUS {
            let (w, b) = (self.next / 64, self.next % 64);
            let rest = self.set.words[w] >> b;
            if rest == 0 {
                self.next = (w + 1) * 64;
                continue;
            }
            let cpu = self.next + rest.trailing_zeros() as usize;
            self.next = cpu + 1;
            return Some(cpu);
        }
        None
    }
}
