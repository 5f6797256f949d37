//! Small shared helpers.

use std::io::Write;
use std::path::Path;

/// Write a file via a sibling temp file + rename so a failure mid-write never
/// leaves a partial output behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    let mut f = std::fs::File::create(&tmp)?;
    let res = f.write_all(bytes).and_then(|()| f.sync_data()).and_then(|()| {
        drop(f);
        std::fs::rename(&tmp, path)
    });
    if res.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    res
}

/// Set the FTZ and DAZ bits in MXCSR so subnormal floats flush to zero.
///
/// Long training runs push softmax outputs toward zero; products of those
/// with small gradients land in the subnormal range, and x86 cores handle
/// subnormal SIMD operands in microcode (~100 cycles per element), slowing
/// the GEMM kernels by two orders of magnitude as training progresses.
/// Values below ~1e-38 are far beneath every tolerance in this crate, so
/// flushing them to zero changes nothing observable except speed.
#[cfg(target_arch = "x86_64")]
pub fn enable_flush_to_zero() {
    let mut mxcsr: u32 = 0;
    unsafe {
        std::arch::asm!("stmxcsr [{}]", in(reg) &mut mxcsr, options(nostack));
        mxcsr |= 0x8040; // FTZ | DAZ
        std::arch::asm!("ldmxcsr [{}]", in(reg) &mxcsr, options(nostack));
    }
}

#[cfg(not(target_arch = "x86_64"))]
pub fn enable_flush_to_zero() {}

/// FNV-1a over a string; used to derive stable per-file seeds.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Worker-thread cap from the CANDID_THREADS environment variable
/// (default 1).
pub fn thread_cap() -> usize {
    std::env::var("CANDID_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}
