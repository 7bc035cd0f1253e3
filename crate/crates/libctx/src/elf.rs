//! Reading a shared object's dynamic symbol table, for shim generation.

use std::collections::BTreeSet;
use std::path::Path;

use libctx_core::filter::Arch;
use libctx_core::shim::{generate_shim, ShimKind};
use object::elf;
use object::read::elf::{ElfFile64, FileHeader};
use object::{Endianness, Object, ObjectSymbol};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Exports {
    pub arch: Arch,
    pub functions: BTreeSet<String>,
}

/// Defined, global function symbols of the dynamic symbol table. Versioned
/// names are kept without their version suffix.
pub fn exported_functions(path: &Path) -> Result<Exports> {
    let data = std::fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let file = ElfFile64::<Endianness>::parse(&*data).map_err(|e| Error::Loader(format!("{}: {e}", path.display())))?;
    let machine = file.elf_header().e_machine(file.endian());
    let arch = match machine {
        elf::EM_X86_64 => Arch::X86_64,
        elf::EM_AARCH64 => Arch::Aarch64,
        other => return Err(Error::UnsupportedArch(format!("ELF machine {other}"))),
    };
    let functions = file
        .dynamic_symbols()
        .filter(|s| s.is_definition() && s.is_global() && s.kind() == object::SymbolKind::Text)
        .filter_map(|s| s.name().ok().map(|n| n.split('@').next().unwrap_or(n).to_string()))
        .collect();
    Ok(Exports { arch, functions })
}

/// Shim source for `symbols` of the library at `path`, after checking that
/// each one is exported.
pub fn generate_shim_for(path: &Path, kind: ShimKind, symbols: &[String]) -> Result<String> {
    let exports = exported_functions(path)?;
    if let Some(missing) = symbols.iter().find(|s| !exports.functions.contains(*s)) {
        return Err(Error::NotExported(path.display().to_string(), missing.clone()));
    }
    Ok(generate_shim(exports.arch, kind, &path.display().to_string(), symbols)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_libc_exports() {
        let libc = ["/lib/x86_64-linux-gnu/libc.so.6", "/lib/aarch64-linux-gnu/libc.so.6", "/usr/lib64/libc.so.6"]
            .iter()
            .map(Path::new)
            .find(|p| p.exists());
        let Some(libc) = libc else { return };
        let e = exported_functions(libc).unwrap();
        assert_eq!(e.arch, Arch::NATIVE);
        assert!(e.functions.contains("malloc"));
        assert!(!e.functions.contains("environ"), "data symbols are not functions");
        let src = generate_shim_for(libc, ShimKind::JumpTable, &["malloc".to_string()]).unwrap();
        assert!(src.contains("malloc"));
        assert!(matches!(
            generate_shim_for(libc, ShimKind::JumpTable, &["no_such_function_here".to_string()]),
            Err(Error::NotExported(..))
        ));
    }

    #[test]
    fn non_elf_is_an_error() {
        let tmp = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(tmp.path(), b"not an elf").unwrap();
        assert!(exported_functions(tmp.path()).is_err());
    }
}
