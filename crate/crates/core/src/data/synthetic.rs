//! Procedural two-class shape images with a binary "bar" attribute. Used to
//! exercise the object-level manipulator where no annotated face data is
//! available. Class 0 is a filled square, class 1 a hollow square; the bar
//! is a bright horizontal stroke across the top rows, independent of class.

use rand::Rng;

use crate::rng::SeededRng;

pub const SIZE: usize = 16;

pub struct SyntheticSample {
    pub pixels: Vec<u8>,
    pub label: usize,
    pub bar: bool,
}

pub fn render(rng: &mut SeededRng, label: usize, bar: bool) -> Vec<u8> {
    let mut img = vec![0f64; SIZE * SIZE];
    for p in img.iter_mut() {
        *p = rng.random_range(0.0..0.08);
    }
    let intensity = rng.random_range(0.6..1.0);
    let side = if label == 0 { rng.random_range(4..=6) } else { rng.random_range(6..=8) };
    let top = rng.random_range(6..=(SIZE - side - 1));
    let left = rng.random_range(1..=(SIZE - side - 1));
    for i in top..top + side {
        for j in left..left + side {
            let edge = i == top || i == top + side - 1 || j == left || j == left + side - 1;
            if label == 0 || edge {
                img[i * SIZE + j] = intensity;
            }
        }
    }
    if bar {
        let v = rng.random_range(0.7..1.0);
        let start = rng.random_range(1..=3);
        let end = SIZE - rng.random_range(1..=3);
        for i in 1..3 {
            for j in start..end {
                img[i * SIZE + j] = v;
            }
        }
    }
    img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn generate(rng: &mut SeededRng, n: usize) -> Vec<SyntheticSample> {
    (0..n)
        .map(|_| {
            let label = rng.random_range(0..2);
            let bar = rng.random_bool(0.5);
            SyntheticSample { pixels: render(rng, label, bar), label, bar }
        })
        .collect()
}
