//! Fixtures shared by the benchmarks: random image batches and untrained
//! components of desk size.

use candle_core::{DType, Tensor};
use spa_core::classifier::{Classifier, ClassifierSpec};
use spa_core::data::AttributeSpec;
use spa_core::generator::{GeneratorSpec, NoiseGenerator};
use spa_core::manipulator::{GeometricManipulator, Manipulator, Padding};
use spa_core::rng;

pub const SHAPE: (usize, usize, usize) = (1, 28, 28);

/// Uniform `[0, 1]` images and cyclic labels.
pub fn batch(b: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut r = rng::seeded(seed);
    let (c, h, w) = SHAPE;
    let x = rng::uniform_tensor(&mut r, (b, c, h, w), 0.0, 1.0, DType::F32).expect("uniform batch");
    (x, (0..b).map(|i| i % 10).collect())
}

pub fn classifier() -> Classifier {
    Classifier::new(ClassifierSpec { input_shape: SHAPE, ..Default::default() }).expect("classifier")
}

pub fn generator() -> NoiseGenerator {
    NoiseGenerator::new(GeneratorSpec { input_shape: SHAPE, ..Default::default() }).expect("generator")
}

pub fn rotation() -> Manipulator {
    Manipulator::Geometric(GeometricManipulator::new(vec![AttributeSpec::rotation()], Padding::Zeros).expect("manipulator"))
}
