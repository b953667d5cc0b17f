//! IDX archives (MNIST / FashionMNIST), plain or gzip-compressed.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::{Error, Result};

fn read_maybe_gz(base: &Path) -> Result<(PathBuf, Vec<u8>)> {
    let gz = PathBuf::from(format!("{}.gz", base.display()));
    if gz.exists() {
        let f = std::fs::File::open(&gz).map_err(|e| Error::io(&gz, e))?;
        let mut out = Vec::new();
        GzDecoder::new(f).read_to_end(&mut out).map_err(|e| Error::io(&gz, e))?;
        return Ok((gz, out));
    }
    if base.exists() {
        let out = std::fs::read(base).map_err(|e| Error::io(base, e))?;
        return Ok((base.to_path_buf(), out));
    }
    Err(Error::io(
        base,
        std::io::Error::new(std::io::ErrorKind::NotFound, "missing IDX archive (.gz or raw)"),
    ))
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

/// Returns `(count, rows, cols, pixels)`.
pub fn read_images(base: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let (path, bytes) = read_maybe_gz(base)?;
    let bad = |why: &str| Error::CorruptData(format!("{}: {why}", path.display()));
    if be_u32(&bytes, 0) != Some(2051) {
        return Err(bad("bad image magic"));
    }
    let n = be_u32(&bytes, 4).ok_or_else(|| bad("truncated header"))? as usize;
    let rows = be_u32(&bytes, 8).ok_or_else(|| bad("truncated header"))? as usize;
    let cols = be_u32(&bytes, 12).ok_or_else(|| bad("truncated header"))? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() != need {
        return Err(bad(&format!("expected {need} bytes, found {}", bytes.len())));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn read_labels(base: &Path) -> Result<Vec<usize>> {
    let (path, bytes) = read_maybe_gz(base)?;
    let bad = |why: &str| Error::CorruptData(format!("{}: {why}", path.display()));
    if be_u32(&bytes, 0) != Some(2049) {
        return Err(bad("bad label magic"));
    }
    let n = be_u32(&bytes, 4).ok_or_else(|| bad("truncated header"))? as usize;
    if bytes.len() != 8 + n {
        return Err(bad("label count does not match file size"));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

#[cfg(test)]
pub(crate) fn write_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::new();
    for v in [2051u32, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    std::fs::write(path, out).unwrap();
}

#[cfg(test)]
pub(crate) fn write_labels(path: &Path, labels: &[u8]) {
    let mut out = Vec::new();
    for v in [2049u32, labels.len() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(labels);
    std::fs::write(path, out).unwrap();
}
