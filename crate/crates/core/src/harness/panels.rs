//! Sample-image panels, one row per example: original, attribute-perturbed,
//! joint adversarial, amplified noise map, and the amplified difference
//! between two diversity draws at the same attributes.

use std::path::Path;

use candle_core::{DType, Tensor};
use image::{ImageEncoder, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::grid::attack_seed;
use super::store::write_atomic;
use super::workbench::Workbench;
use crate::attack::{spa_attack_with, AttackConfig, SpaToggles};
use crate::classifier::Classifier;
use crate::generator::{generate_trajectory, NoiseGenerator};
use crate::manipulator::Manipulator;
use crate::nn::ops;
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub label: usize,
    pub alpha: Vec<f64>,
    pub original: Vec<f32>,
    pub attributed: Vec<f32>,
    pub adversarial: Vec<f32>,
    /// Joint sample regenerated with a second diversity draw.
    pub alternate: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSet {
    pub shape: (usize, usize, usize),
    pub rows: Vec<PanelRow>,
}

fn rows_of(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    let b = t.dim(0)?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let per = flat.len().checked_div(b).unwrap_or(0);
    Ok(flat.chunks(per.max(1)).map(<[f32]>::to_vec).collect())
}

/// Attacks the first test images of the bench and keeps the intermediate
/// images of each.
pub fn capture_panels(
    bench: &Workbench<'_>,
    model: &Classifier,
    manipulator: &Manipulator,
    generator: &NoiseGenerator,
    seed: u64,
) -> Result<PanelSet> {
    let cfg = bench.config();
    let n = cfg.report.panel_examples.min(bench.dataset.test.len());
    if n == 0 {
        return Err(Error::Empty("panel examples".into()));
    }
    let batch = bench.dataset.test.batch(&(0..n).collect::<Vec<_>>(), DType::F32)?;
    let attack = AttackConfig { seed: attack_seed(seed), ..cfg.attack.clone() };
    let r = spa_attack_with(&batch.images, &batch.labels, Some(manipulator), Some(generator), model, &attack, SpaToggles::FULL)?;
    let alternate = if cfg.attack.eps > 0.0 {
        let mut g = rng::stream(seed, "panel-alternate-z");
        let z2 = generator.sample_z(&mut g, n)?;
        generate_trajectory(generator, &r.x_attr, &z2, &batch.labels, model, &cfg.attack.budget())?.last().detach()
    } else {
        r.x_adv.clone()
    };
    let alpha: Vec<Vec<f64>> = match &r.alpha {
        Some(a) if a.dim(1)? > 0 => {
            let w = a.dim(1)?;
            ops::to_vec_f64(a)?.chunks(w).map(<[f64]>::to_vec).collect()
        }
        _ => vec![Vec::new(); n],
    };
    let (orig, attr, adv, alt) = (rows_of(&batch.images)?, rows_of(&r.x_attr)?, rows_of(&r.x_adv)?, rows_of(&alternate)?);
    let rows = (0..n)
        .map(|i| PanelRow {
            label: batch.labels[i],
            alpha: alpha[i].clone(),
            original: orig[i].clone(),
            attributed: attr[i].clone(),
            adversarial: adv[i].clone(),
            alternate: alt[i].clone(),
        })
        .collect();
    Ok(PanelSet { shape: bench.dataset.shape(), rows })
}

pub fn write_panels(dir: &Path, panels: &PanelSet) -> Result<()> {
    write_atomic(&dir.join("panels.json"), serde_json::to_string(panels)?.as_bytes())
}

pub fn read_panels(dir: &Path) -> Result<Option<PanelSet>> {
    let path = dir.join("panels.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// `0.5 + gain · (a − b)`, clamped to `[0, 1]`: zero difference is mid-gray.
pub fn difference_map(a: &[f32], b: &[f32], gain: f64) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| (0.5 + gain * (*x as f64 - *y as f64)).clamp(0.0, 1.0) as f32).collect()
}

const ZOOM: u32 = 2;
const GAP: u32 = 2;

fn blit(img: &mut RgbImage, px: &[f32], shape: (usize, usize, usize), x0: u32, y0: u32) {
    let (c, h, w) = shape;
    for y in 0..h {
        for x in 0..w {
            let at = |ch: usize| (px[(ch * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            let rgb = if c >= 3 { [at(0), at(1), at(2)] } else { [at(0); 3] };
            for dy in 0..ZOOM {
                for dx in 0..ZOOM {
                    img.put_pixel(x0 + x as u32 * ZOOM + dx, y0 + y as u32 * ZOOM + dy, Rgb(rgb));
                }
            }
        }
    }
}

/// Tiles the panel set into an RGB image.
pub fn render_panels(panels: &PanelSet, amplification: f64) -> Result<RgbImage> {
    if panels.rows.is_empty() {
        return Err(Error::Empty("panel rows".into()));
    }
    let (_, h, w) = panels.shape;
    let (tw, th) = (w as u32 * ZOOM, h as u32 * ZOOM);
    const COLS: u32 = 5;
    let rows = panels.rows.len() as u32;
    let mut img = RgbImage::from_pixel(COLS * (tw + GAP) + GAP, rows * (th + GAP) + GAP, Rgb([255, 255, 255]));
    for (r, row) in panels.rows.iter().enumerate() {
        let noise = difference_map(&row.adversarial, &row.attributed, amplification);
        let diversity = difference_map(&row.adversarial, &row.alternate, amplification);
        let tiles = [&row.original, &row.attributed, &row.adversarial, &noise, &diversity];
        for (c, tile) in tiles.iter().enumerate() {
            blit(&mut img, tile, panels.shape, GAP + c as u32 * (tw + GAP), GAP + r as u32 * (th + GAP));
        }
    }
    Ok(img)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Serde(e.to_string()))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(delta: f32) -> PanelSet {
        let base = vec![0.25f32; 16];
        let adv: Vec<f32> = base.iter().map(|v| v + delta).collect();
        PanelSet {
            shape: (1, 4, 4),
            rows: vec![PanelRow {
                label: 0,
                alpha: vec![0.0],
                original: base.clone(),
                attributed: base.clone(),
                adversarial: adv.clone(),
                alternate: adv,
            }],
        }
    }

    #[test]
    fn zero_noise_gives_a_mid_gray_noise_map() {
        let img = render_panels(&set(0.0), 30.0).unwrap();
        let (tw, th) = (4 * ZOOM, 4 * ZOOM);
        let x0 = GAP + 3 * (tw + GAP);
        for y in GAP..GAP + th {
            for x in x0..x0 + tw {
                assert_eq!(img.get_pixel(x, y).0, [128, 128, 128]);
            }
        }
    }

    #[test]
    fn noise_maps_are_amplified() {
        let m = difference_map(&[0.51], &[0.5], 30.0);
        assert!((m[0] - 0.8).abs() < 1e-5);
        assert_eq!(difference_map(&[1.0], &[0.0], 30.0), vec![1.0]);
    }

    #[test]
    fn png_encoding_is_deterministic() {
        let img = render_panels(&set(0.01), 30.0).unwrap();
        assert_eq!(encode_png(&img).unwrap(), encode_png(&img).unwrap());
        assert!(render_panels(&PanelSet { shape: (1, 4, 4), rows: vec![] }, 30.0).is_err());
    }
}
