//! Generation of forwarding shims: one C translation unit with a top-level
//! assembly block holding a tail-jumping trampoline per exported symbol.
//!
//! A jump-table shim reads the calling thread's table pointer from a
//! thread-local that the runtime sets on context entry, then jumps through
//! slot `ordinal`. A service shim jumps through the shared address page at a
//! fixed index. Neither builds a stack frame, and only the scratch registers
//! `r11` (x86_64) or `x16`/`x17` (aarch64) are touched, so every argument
//! register arrives at the target unchanged.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};
use crate::filter::Arch;

/// Slots per (context, library) table; ordinals must stay below this.
pub const JUMP_TABLE_SLOTS: usize = 4096;

/// Environment variable a service shim reads at load time to find the
/// address page (hex, `0x` prefix optional).
pub const SERVICE_PAGE_ENV: &str = "LIBCTX_SERVICE_PAGE";

/// Exported by jump-table shims: `void libctx_shim_bind(const void *const *table)`.
pub const BIND_SYMBOL: &str = "libctx_shim_bind";
/// Exported by service shims: `void libctx_shim_set_page(const void *const *page)`.
pub const SET_PAGE_SYMBOL: &str = "libctx_shim_set_page";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShimKind {
    /// Dispatch per calling thread through its context's jump table.
    JumpTable,
    /// Forward to the single base-namespace instance via the address page.
    Service,
}

pub fn is_c_identifier(s: &str) -> bool {
    let mut bytes = s.bytes();
    matches!(bytes.next(), Some(b'a'..=b'z' | b'A'..=b'Z' | b'_'))
        && bytes.all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

/// Emits shim source for `symbols`; a symbol's ordinal (or page index) is its
/// position in the list.
pub fn generate_shim(arch: Arch, kind: ShimKind, library: &str, symbols: &[String]) -> Result<String> {
    if symbols.is_empty() {
        return Err(Error::Shim("empty symbol list".into()));
    }
    if symbols.len() > JUMP_TABLE_SLOTS {
        return Err(Error::Shim(format!("more than {JUMP_TABLE_SLOTS} symbols")));
    }
    for (i, s) in symbols.iter().enumerate() {
        if !is_c_identifier(s) || s.starts_with("libctx_") {
            return Err(Error::Shim(format!("invalid symbol name {s:?}")));
        }
        if symbols[..i].contains(s) {
            return Err(Error::Shim(format!("duplicate symbol {s:?}")));
        }
    }

    let mut out = String::new();
    let _ = writeln!(out, "/* Forwarding shim for {library}: {} symbols, {kind:?} dispatch, {arch:?}. */", symbols.len());
    out.push_str("#include <stdio.h>\n#include <stdlib.h>\n\n");
    out.push_str(
        "__attribute__((visibility(\"hidden\"), noreturn, used)) void libctx_shim_fail(void) {\n\
         \x20   fputs(\"libctx shim: call from a thread with no bound context or unresolved slot\\n\", stderr);\n\
         \x20   abort();\n}\n\n",
    );
    match kind {
        ShimKind::JumpTable => out.push_str(
            "__attribute__((visibility(\"hidden\"), tls_model(\"initial-exec\")))\n\
             __thread const void *const *libctx_shim_table;\n\n\
             void libctx_shim_bind(const void *const *table) { libctx_shim_table = table; }\n\n",
        ),
        ShimKind::Service => {
            out.push_str(
                "__attribute__((visibility(\"hidden\"), used)) const void *const *libctx_service_page;\n\n\
                 void libctx_shim_set_page(const void *const *page) { libctx_service_page = page; }\n\n",
            );
            let _ = write!(
                out,
                "__attribute__((constructor)) static void libctx_shim_init(void) {{\n\
                 \x20   const char *v = getenv(\"{SERVICE_PAGE_ENV}\");\n\
                 \x20   if (v && *v) libctx_service_page = (const void *const *)strtoull(v, NULL, 16);\n}}\n\n"
            );
        }
    }
    let _ = writeln!(out, "const unsigned libctx_shim_symbol_count = {};", symbols.len());
    out.push_str("const char *const libctx_shim_symbols[] = {\n");
    for s in symbols {
        let _ = writeln!(out, "    \"{s}\",");
    }
    out.push_str("};\n\n__asm__(\n    \".text\\n\"\n");
    for (ordinal, sym) in symbols.iter().enumerate() {
        for line in trampoline(arch, kind, sym, ordinal * 8) {
            let _ = writeln!(out, "    \"{line}\\n\"");
        }
    }
    out.push_str(");\n");
    Ok(out)
}

fn trampoline(arch: Arch, kind: ShimKind, sym: &str, offset: usize) -> Vec<String> {
    let mut v = Vec::new();
    let header = |v: &mut Vec<String>, ty: &str, align: &str| {
        v.push(format!(".globl {sym}"));
        v.push(format!(".type {sym}, {ty}"));
        v.push(align.into());
        v.push(format!("{sym}:"));
    };
    match arch {
        Arch::X86_64 => {
            header(&mut v, "@function", ".p2align 4");
            match kind {
                ShimKind::JumpTable => {
                    v.push("movq libctx_shim_table@gottpoff(%rip), %r11".into());
                    v.push("movq %fs:(%r11), %r11".into());
                }
                ShimKind::Service => v.push("movq libctx_service_page(%rip), %r11".into()),
            }
            v.push("testq %r11, %r11".into());
            v.push("jz libctx_shim_fail".into());
            v.push(format!("movq {offset}(%r11), %r11"));
            v.push("testq %r11, %r11".into());
            v.push("jz libctx_shim_fail".into());
            v.push("jmpq *%r11".into());
        }
        Arch::Aarch64 => {
            header(&mut v, "%function", ".p2align 3");
            match kind {
                ShimKind::JumpTable => {
                    v.push("adrp x16, :gottprel:libctx_shim_table".into());
                    v.push("ldr x16, [x16, #:gottprel_lo12:libctx_shim_table]".into());
                    v.push("mrs x17, tpidr_el0".into());
                    v.push("ldr x16, [x17, x16]".into());
                }
                ShimKind::Service => {
                    v.push("adrp x16, libctx_service_page".into());
                    v.push("ldr x16, [x16, #:lo12:libctx_service_page]".into());
                }
            }
            v.push("cbz x16, libctx_shim_fail".into());
            v.push(format!("ldr x16, [x16, #{offset}]"));
            v.push("cbz x16, libctx_shim_fail".into());
            v.push("br x16".into());
        }
    }
    v.push(format!(".size {sym}, .-{sym}"));
    v
}
