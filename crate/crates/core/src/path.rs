//! Lexical path handling for matching redirected resource files.

use alloc::string::String;
use alloc::vec::Vec;

/// Normalizes an absolute path lexically: collapses repeated separators and
/// `.` components and applies `..` (which stops at the root). Symlinks are
/// not consulted. Returns `None` for relative paths.
pub fn normalize(path: &str) -> Option<String> {
    if !path.starts_with('/') {
        return None;
    }
    let mut parts: Vec<&str> = Vec::new();
    for comp in path.split('/') {
        match comp {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            c => parts.push(c),
        }
    }
    let mut out = String::with_capacity(path.len());
    for p in &parts {
        out.push('/');
        out.push_str(p);
    }
    if out.is_empty() {
        out.push('/');
    }
    Some(out)
}

/// Resolves `path` against the absolute directory `base` and normalizes.
pub fn resolve(base: &str, path: &str) -> Option<String> {
    if path.starts_with('/') {
        return normalize(path);
    }
    let mut joined = String::from(base);
    joined.push('/');
    joined.push_str(path);
    normalize(&joined)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes() {
        assert_eq!(normalize("/proc/cpuinfo").unwrap(), "/proc/cpuinfo");
        assert_eq!(normalize("//proc/./cpuinfo").unwrap(), "/proc/cpuinfo");
        assert_eq!(normalize("/sys/devices/../devices/system/cpu/online/").unwrap(), "/sys/devices/system/cpu/online");
        assert_eq!(normalize("/../..").unwrap(), "/");
        assert_eq!(normalize("proc/cpuinfo"), None);
    }

    #[test]
    fn resolves_relative() {
        assert_eq!(resolve("/proc", "cpuinfo").unwrap(), "/proc/cpuinfo");
        assert_eq!(resolve("/etc", "../proc/cpuinfo").unwrap(), "/proc/cpuinfo");
        assert_eq!(resolve("/etc", "/proc/cpuinfo").unwrap(), "/proc/cpuinfo");
        assert_eq!(resolve("/", "etc/hosts").unwrap(), "/etc/hosts");
    }
}
