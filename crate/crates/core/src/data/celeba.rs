//! CelebA ingestion: `list_attr_celeba.txt` plus the aligned image directory.

use std::path::Path;

use image::imageops::FilterType;

use crate::{Error, Result};

pub const ATTR_FILE: &str = "list_attr_celeba.txt";
pub const IMAGE_DIR: &str = "img_align_celeba";

#[derive(Debug, Clone)]
pub struct AttrTable {
    pub names: Vec<String>,
    pub rows: Vec<(String, Vec<i8>)>,
}

impl AttrTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n.eq_ignore_ascii_case(name))
    }
}

pub fn parse_attr_table(text: &str) -> Result<AttrTable> {
    let bad = |why: String| Error::CorruptData(format!("{ATTR_FILE}: {why}"));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let count: usize = lines
        .next()
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| bad("missing row count".into()))?;
    let names: Vec<String> = lines
        .next()
        .ok_or_else(|| bad("missing attribute names".into()))?
        .split_whitespace()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let mut parts = line.split_whitespace();
        let file = parts.next().ok_or_else(|| bad(format!("empty row {i}")))?.to_string();
        let vals = parts
            .map(|p| match p {
                "1" => Ok(1i8),
                "-1" => Ok(-1i8),
                other => Err(bad(format!("row {i}: value `{other}` is not ±1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != names.len() {
            return Err(bad(format!("row {i} has {} values, expected {}", vals.len(), names.len())));
        }
        rows.push((file, vals));
    }
    if rows.len() != count {
        return Err(bad(format!("header says {count} rows, found {}", rows.len())));
    }
    Ok(AttrTable { names, rows })
}

/// Loads one image, centre-crops it to a square and resizes to `size`;
/// returns channel-major RGB bytes.
pub fn load_image(path: &Path, size: usize) -> Result<Vec<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::CorruptData(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let crop = image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let small = image::imageops::resize(&crop, size as u32, size as u32, FilterType::Triangle);
    let mut out = vec![0u8; 3 * size * size];
    for (x, y, p) in small.enumerate_pixels() {
        for c in 0..3 {
            out[c * size * size + y as usize * size + x as usize] = p.0[c];
        }
    }
    Ok(out)
}
