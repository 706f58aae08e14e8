//! Small deterministic writers for PGM images and CSV tables.

use std::fs;
use std::io;
use std::path::Path;

/// Binary (P5) graymap with maxval 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> io::Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    create_parent(path)?;
    fs::write(path, buf)
}

/// Comma-separated rows with an optional header; fields are written verbatim.
pub fn write_csv(path: &Path, header: Option<&[&str]>, rows: &[Vec<String>]) -> io::Result<()> {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    create_parent(path)?;
    fs::write(path, out)
}

pub(crate) fn create_parent(path: &Path) -> io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p),
        _ => Ok(()),
    }
}
