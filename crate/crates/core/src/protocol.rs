//! Wire format of the control channel between the in-process client and its
//! monitor.
//!
//! Every frame is `version: u8`, `len: u32` (little-endian, bytes that
//! follow), then the body. A request body is an opcode byte followed by its
//! fields; a reply body is a status byte (`0` OK, `1` ERR) followed by a
//! `u32` code. Integers are little-endian, strings are a `u32` byte length
//! plus UTF-8 bytes, and CPU sets are a `u16` byte length plus the kernel
//! affinity mask.

use alloc::string::String;
use alloc::vec::Vec;

use crate::context::ContextId;
use crate::cpuset::CpuSet;
use crate::error::{Error, Result};

pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 5;
pub const MAX_BODY_LEN: usize = 1 << 20;

const OP_CREATE_CTX: u8 = 1;
const OP_SET_CPUS: u8 = 2;
const OP_SETENV: u8 = 3;
const OP_UNSETENV: u8 = 4;
const OP_BIND: u8 = 5;
const OP_UNBIND: u8 = 6;
const OP_SHUTDOWN: u8 = 7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    CreateCtx { allowed: CpuSet },
    SetCpus { ctx: ContextId, allowed: CpuSet },
    SetEnv { ctx: ContextId, name: String, value: String },
    UnsetEnv { ctx: ContextId, name: String },
    Bind { tid: i32, ctx: ContextId },
    /// Replies with the context the thread was bound to.
    Unbind { tid: i32 },
    Shutdown,
}

/// Error codes carried by an ERR reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ErrorCode {
    Malformed = 1,
    UnknownContext = 2,
    EmptyCpuSet = 3,
    NotOnline = 4,
    InvalidEnvName = 5,
    AlreadyBound = 6,
    NotBound = 7,
    Io = 8,
    NoSuchThread = 9,
}

impl ErrorCode {
    pub fn from_u32(v: u32) -> Option<ErrorCode> {
        use ErrorCode::*;
        Some(match v {
            1 => Malformed,
            2 => UnknownContext,
            3 => EmptyCpuSet,
            4 => NotOnline,
            5 => InvalidEnvName,
            6 => AlreadyBound,
            7 => NotBound,
            8 => Io,
            9 => NoSuchThread,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reply {
    /// Success; `CreateCtx` returns the new id, everything else 0.
    Ok(u32),
    Err(ErrorCode),
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        match self {
            Request::CreateCtx { allowed } => {
                body.push(OP_CREATE_CTX);
                put_cpus(&mut body, allowed);
            }
            Request::SetCpus { ctx, allowed } => {
                body.push(OP_SET_CPUS);
                body.extend_from_slice(&ctx.0.to_le_bytes());
                put_cpus(&mut body, allowed);
            }
            Request::SetEnv { ctx, name, value } => {
                body.push(OP_SETENV);
                body.extend_from_slice(&ctx.0.to_le_bytes());
                put_str(&mut body, name);
                put_str(&mut body, value);
            }
            Request::UnsetEnv { ctx, name } => {
                body.push(OP_UNSETENV);
                body.extend_from_slice(&ctx.0.to_le_bytes());
                put_str(&mut body, name);
            }
            Request::Bind { tid, ctx } => {
                body.push(OP_BIND);
                body.extend_from_slice(&tid.to_le_bytes());
                body.extend_from_slice(&ctx.0.to_le_bytes());
            }
            Request::Unbind { tid } => {
                body.push(OP_UNBIND);
                body.extend_from_slice(&tid.to_le_bytes());
            }
            Request::Shutdown => body.push(OP_SHUTDOWN),
        }
        frame(body)
    }

    /// Decodes one request from the front of `buf`. Returns `Ok(None)` until a
    /// whole frame is available, otherwise the request and bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<Option<(Request, usize)>> {
        let Some(body) = split_frame(buf)? else {
            return Ok(None);
        };
        let consumed = HEADER_LEN + body.len();
        let mut r = Reader(body);
        let req = match r.u8()? {
            OP_CREATE_CTX => Request::CreateCtx { allowed: r.cpus()? },
            OP_SET_CPUS => Request::SetCpus {
                ctx: ContextId(r.u32()?),
                allowed: r.cpus()?,
            },
            OP_SETENV => Request::SetEnv {
                ctx: ContextId(r.u32()?),
                name: r.string()?,
                value: r.string()?,
            },
            OP_UNSETENV => Request::UnsetEnv {
                ctx: ContextId(r.u32()?),
                name: r.string()?,
            },
            OP_BIND => Request::Bind {
                tid: r.u32()? as i32,
                ctx: ContextId(r.u32()?),
            },
            OP_UNBIND => Request::Unbind { tid: r.u32()? as i32 },
            OP_SHUTDOWN => Request::Shutdown,
            _ => return Err(Error::Protocol("unknown opcode")),
        };
        if !r.0.is_empty() {
            return Err(Error::Protocol("trailing bytes in request"));
        }
        Ok(Some((req, consumed)))
    }
}

impl Reply {
    pub fn encode(&self) -> Vec<u8> {
        let (status, code) = match *self {
            Reply::Ok(v) => (0u8, v),
            Reply::Err(e) => (1u8, e as u32),
        };
        let mut body = alloc::vec![status];
        body.extend_from_slice(&code.to_le_bytes());
        frame(body)
    }

    pub fn decode(buf: &[u8]) -> Result<Option<(Reply, usize)>> {
        let Some(body) = split_frame(buf)? else {
            return Ok(None);
        };
        let mut r = Reader(body);
        let status = r.u8()?;
        let code = r.u32()?;
        if !r.0.is_empty() {
            return Err(Error::Protocol("trailing bytes in reply"));
        }
        let reply = match status {
            0 => Reply::Ok(code),
            1 => Reply::Err(ErrorCode::from_u32(code).ok_or(Error::Protocol("unknown error code"))?),
            _ => return Err(Error::Protocol("unknown reply status")),
        };
        Ok(Some((reply, HEADER_LEN + body.len())))
    }
}

fn frame(body: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.push(VERSION);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

fn split_frame(buf: &[u8]) -> Result<Option<&[u8]>> {
    if buf.is_empty() {
        return Ok(None);
    }
    if buf[0] != VERSION {
        return Err(Error::ProtocolVersion(buf[0]));
    }
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    let len = u32::from_le_bytes(buf[1..5].try_into().unwrap()) as usize;
    if len == 0 || len > MAX_BODY_LEN {
        return Err(Error::Protocol("bad frame length"));
    }
    Ok(buf.get(HEADER_LEN..HEADER_LEN + len))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_cpus(out: &mut Vec<u8>, set: &CpuSet) {
    let mask = set
        .encode_kernel_mask(set.kernel_mask_len())
        .expect("buffer sized from the set");
    out.extend_from_slice(&(mask.len() as u16).to_le_bytes());
    out.extend_from_slice(&mask);
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::Protocol("truncated body"));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        core::str::from_utf8(bytes)
            .map(String::from)
            .map_err(|_| Error::Protocol("string is not utf-8"))
    }

    fn cpus(&mut self) -> Result<CpuSet> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        Ok(CpuSet::decode_kernel_mask(self.take(n)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use proptest::prelude::*;

    #[test]
    fn bind_frame_layout() {
        let bytes = Request::Bind { tid: 100, ctx: ContextId(1) }.encode();
        assert_eq!(bytes, [VERSION, 9, 0, 0, 0, OP_BIND, 100, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(Reply::Ok(7).encode(), [VERSION, 5, 0, 0, 0, 0, 7, 0, 0, 0]);
        assert_eq!(
            Reply::Err(ErrorCode::UnknownContext).encode(),
            [VERSION, 5, 0, 0, 0, 1, 2, 0, 0, 0]
        );
    }

    #[test]
    fn partial_frames_wait_for_more() {
        let bytes = Request::SetEnv {
            ctx: ContextId(3),
            name: "OMP_NUM_THREADS".into(),
            value: "6".into(),
        }
        .encode();
        for cut in 0..bytes.len() {
            assert_eq!(Request::decode(&bytes[..cut]).unwrap(), None, "cut {cut}");
        }
        let (req, used) = Request::decode(&bytes).unwrap().unwrap();
        assert_eq!(used, bytes.len());
        assert!(matches!(req, Request::SetEnv { ref value, .. } if value == "6"));
    }

    #[test]
    fn rejects_bad_frames() {
        assert_eq!(Request::decode(&[9, 1, 0, 0, 0, 1]), Err(Error::ProtocolVersion(9)));
        assert!(Request::decode(&[VERSION, 1, 0, 0, 0, 99]).is_err());
        assert!(Request::decode(&[VERSION, 2, 0, 0, 0, OP_SHUTDOWN, 0]).is_err());
        assert!(Request::decode(&[VERSION, 0, 0, 0, 0]).is_err());
        assert!(Reply::decode(&[VERSION, 5, 0, 0, 0, 1, 77, 0, 0, 0]).is_err());
    }

    fn arb_request() -> impl Strategy<Value = Request> {
        let cpus = prop::collection::vec(0usize..1024, 0..16).prop_map(|v| v.into_iter().collect::<CpuSet>());
        prop_oneof![
            cpus.clone().prop_map(|allowed| Request::CreateCtx { allowed }),
            (any::<u32>(), cpus).prop_map(|(c, allowed)| Request::SetCpus { ctx: ContextId(c), allowed }),
            (any::<u32>(), "[A-Z_]{1,12}", ".{0,20}").prop_map(|(c, n, v)| Request::SetEnv { ctx: ContextId(c), name: n, value: v }),
            (any::<u32>(), "[A-Z_]{1,12}").prop_map(|(c, n)| Request::UnsetEnv { ctx: ContextId(c), name: n.to_string() }),
            (any::<i32>(), any::<u32>()).prop_map(|(t, c)| Request::Bind { tid: t, ctx: ContextId(c) }),
            any::<i32>().prop_map(|tid| Request::Unbind { tid }),
            Just(Request::Shutdown),
        ]
    }

    proptest! {
        #[test]
        fn requests_round_trip_back_to_back(reqs in prop::collection::vec(arb_request(), 1..5)) {
            let mut stream = Vec::new();
            for r in &reqs {
                stream.extend(r.encode());
            }
            let mut at = 0;
            for r in &reqs {
                let (got, used) = Request::decode(&stream[at..]).unwrap().unwrap();
                prop_assert_eq!(&got, r);
                at += used;
            }
            prop_assert_eq!(at, stream.len());
        }
    }
}
