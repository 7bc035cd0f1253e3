//! Decisions taken by the affinity handlers, independent of how the traced
//! task's memory is accessed.

use alloc::vec::Vec;

use crate::cpuset::CpuSet;
use crate::error::Result;

/// What to do with an affinity change request made inside a context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clamp {
    /// The request is already inside the allowed set.
    PassThrough,
    /// Replace the request with this non-empty subset.
    Rewrite(CpuSet),
    /// Nothing of the request is allowed; the call fails with `EINVAL`.
    Reject,
}

pub fn clamp_request(requested: &CpuSet, allowed: &CpuSet) -> Clamp {
    let effective = requested.intersection(allowed);
    if effective.is_empty() {
        Clamp::Reject
    } else if effective == *requested {
        Clamp::PassThrough
    } else {
        Clamp::Rewrite(effective)
    }
}

/// The mask a context's threads observe from an affinity query.
pub fn visible_mask(allowed: &CpuSet, online: &CpuSet) -> CpuSet {
    allowed.intersection(online)
}

/// Encoded affinity reply, reused while the context's set is unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplyCache {
    mask: CpuSet,
    len: usize,
    bytes: Vec<u8>,
}

impl ReplyCache {
    pub fn encode(mask: CpuSet, len: usize) -> Result<ReplyCache> {
        Ok(ReplyCache {
            bytes: mask.encode_kernel_mask(len)?,
            mask,
            len,
        })
    }

    /// Cached bytes if they were produced for this mask and length.
    pub fn get(&self, mask: &CpuSet, len: usize) -> Option<&[u8]> {
        (self.mask == *mask && self.len == len).then_some(&self.bytes[..])
    }

    pub fn mask(&self) -> &CpuSet {
        &self.mask
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_to_intersection() {
        let allowed = CpuSet::range(12, 23);
        assert_eq!(
            clamp_request(&CpuSet::range(0, 23), &allowed),
            Clamp::Rewrite(allowed)
        );
        assert_eq!(clamp_request(&CpuSet::range(12, 13), &allowed), Clamp::PassThrough);
        assert_eq!(clamp_request(&CpuSet::range(0, 11), &allowed), Clamp::Reject);
    }

    // Brute force over every request and allowed mask on 6 cpus.
    #[test]
    fn exhaustive_six_cpu_model() {
        for allowed_bits in 1u32..64 {
            let allowed: CpuSet = (0..6).filter(|i| allowed_bits >> i & 1 == 1).collect();
            for req_bits in 0u32..64 {
                let requested: CpuSet = (0..6).filter(|i| req_bits >> i & 1 == 1).collect();
                let expect = req_bits & allowed_bits;
                let effective = match clamp_request(&requested, &allowed) {
                    Clamp::PassThrough => Some(requested),
                    Clamp::Rewrite(s) => Some(s),
                    Clamp::Reject => None,
                };
                match effective {
                    None => assert_eq!(expect, 0),
                    Some(s) => {
                        let bits = s.iter().fold(0u32, |acc, c| acc | 1 << c);
                        assert_eq!(bits, expect);
                    }
                }
            }
        }
    }

    #[test]
    fn reply_cache_keys_on_mask_and_len() {
        let m = CpuSet::range(0, 5);
        let c = ReplyCache::encode(m, 8).unwrap();
        assert_eq!(c.get(&m, 8), Some(&[0x3f, 0, 0, 0, 0, 0, 0, 0][..]));
        assert_eq!(c.get(&m, 16), None);
        assert_eq!(c.get(&CpuSet::range(0, 4), 8), None);
    }
}
