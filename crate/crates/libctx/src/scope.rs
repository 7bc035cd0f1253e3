//! Per-thread stack of entered contexts.

use std::cell::RefCell;

use libctx_core::ContextId;

use crate::error::{Error, Result};
use crate::loader::tables;

pub const MAX_DEPTH: usize = 8;

#[derive(Debug, Clone)]
pub(crate) struct Frame {
    pub ctx: ContextId,
    /// Raw affinity to restore on exit, for frames entered with affinity.
    pub saved_affinity: Option<Vec<u8>>,
    /// Binding to restore on exit.
    pub outer: Option<ContextId>,
}

thread_local! {
    static STACK: RefCell<Vec<Frame>> = const { RefCell::new(Vec::new()) };
}

/// Innermost context entered by the calling thread.
pub fn current() -> Option<ContextId> {
    STACK.with(|s| s.borrow().last().map(|f| f.ctx))
}

pub fn depth() -> usize {
    STACK.with(|s| s.borrow().len())
}

pub(crate) fn push(frame: Frame) -> Result<()> {
    STACK.with(|s| {
        let mut s = s.borrow_mut();
        if s.len() >= MAX_DEPTH {
            return Err(Error::StackDepth(s.len()));
        }
        s.push(frame);
        Ok(())
    })?;
    tables().bind_thread(current());
    Ok(())
}

pub(crate) fn pop() -> Result<Frame> {
    let f = STACK.with(|s| s.borrow_mut().pop()).ok_or(Error::NotEntered)?;
    tables().bind_thread(current());
    Ok(f)
}

/// Makes `ctx` the calling thread's context for dispatch and shims only,
/// without telling any monitor. [`Runtime::enter`](crate::runtime::Runtime::enter)
/// does this and also binds the thread for syscall virtualization.
pub fn enter_local(ctx: ContextId) -> Result<()> {
    push(Frame {
        ctx,
        saved_affinity: None,
        outer: current(),
    })
}

pub fn exit_local() -> Result<ContextId> {
    pop().map(|f| f.ctx)
}
