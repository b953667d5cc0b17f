//! Finite-difference probes shared by the gradient tests and the acceptance
//! suite.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use spa_core::classifier::{Classifier, ClassifierSpec, Profile};
use spa_core::data::AttributeSpec;
use spa_core::manipulator::warp::grid_proximity;
use spa_core::manipulator::{similarity_from_attributes, ApplyMode, GeometricManipulator, Manipulator, Padding};
use spa_core::nn::ops;
use spa_core::rng;

#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

impl FdReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-10);
        self.checked += 1;
        self.worst = self.worst.max(rel);
    }
}

fn image(r: &mut rng::SeededRng, side: usize) -> Tensor {
    rng::uniform_tensor(r, (1, 1, side, side), 0.0, 1.0, DType::F64).unwrap()
}

fn bump(x: &Tensor, index: usize, h: f64) -> Tensor {
    let mut v = ops::to_vec_f64(x).unwrap();
    v[index] += h;
    Tensor::from_vec(v, x.shape(), &Device::Cpu).unwrap()
}

/// Central differences of the cross-entropy against `input_gradient`, one
/// random pixel of one random `(input, class)` pair per probe.
pub fn classifier_probes(profile: Profile, probes: usize, seed: u64) -> FdReport {
    let model = Classifier::new(ClassifierSpec {
        profile,
        input_shape: (1, 16, 16),
        double_precision: true,
        seed,
        ..ClassifierSpec::default()
    })
    .unwrap();
    let mut r = rng::stream(seed, "fd-classifier");
    let h = 1e-6;
    let mut report = FdReport::default();
    for _ in 0..probes {
        let x = image(&mut r, 16);
        let y = [r.random_range(0..10)];
        let i = r.random_range(0..256);
        let g = ops::to_vec_f64(&model.input_gradient(&x, &y).unwrap()).unwrap()[i];
        let lp = ops::scalar(&model.loss(&bump(&x, i, h), &y).unwrap()).unwrap();
        let lm = ops::scalar(&model.loss(&bump(&x, i, -h), &y).unwrap()).unwrap();
        report.record(g, (lp - lm) / (2.0 * h));
    }
    report
}

/// Central differences of `Σ w·h(x, α)` in each attribute against autodiff.
/// Probes whose sampling points sit within the step's reach of a pixel
/// boundary are skipped and redrawn.
pub fn manipulator_probes(probes: usize, seed: u64) -> FdReport {
    let specs = vec![AttributeSpec::rotation(), AttributeSpec::scale()];
    let m = Manipulator::Geometric(GeometricManipulator::new(specs.clone(), Padding::Zeros).unwrap());
    let side = 8;
    let radius = (side as f64) / 2.0 * std::f64::consts::SQRT_2;
    let h: f64 = 1e-3;
    let mut r = rng::stream(seed, "fd-manipulator");
    let mut report = FdReport::default();
    let mut attempts = 0;
    while report.checked < probes && attempts < 200 * probes {
        attempts += 1;
        let x = image(&mut r, side);
        let w = rng::normal_tensor(&mut r, (1, 1, side, side), DType::F64).unwrap();
        let rot = r.random_range(-44.0..44.0);
        let sc: f64 = r.random_range(0.72..1.28);
        let col = r.random_range(0..2);
        // Largest displacement of any sampling point over [α − h, α + h].
        let reach = match col {
            0 => radius / sc * h.to_radians(),
            _ => radius * h / (sc - h).powi(2),
        } * 1.5;
        let alpha = Tensor::new(&[[rot, sc]], &Device::Cpu).unwrap();
        let t = similarity_from_attributes(&specs, &alpha).unwrap();
        if grid_proximity((side, side), &t, reach).unwrap() {
            report.skipped += 1;
            continue;
        }
        let objective = |a: &Tensor| -> Tensor { (m.apply(&x, a, ApplyMode::Train).unwrap() * &w).unwrap().sum_all().unwrap() };
        let v = Var::from_tensor(&alpha).unwrap();
        let grads = objective(v.as_tensor()).backward().unwrap();
        let analytic = ops::to_vec_f64(grads.get(v.as_tensor()).unwrap()).unwrap()[col];
        let shifted = |d: f64| {
            let mut a = [rot, sc];
            a[col] += d;
            ops::scalar(&objective(&Tensor::new(&[a], &Device::Cpu).unwrap())).unwrap()
        };
        report.record(analytic, (shifted(h) - shifted(-h)) / (2.0 * h));
    }
    report
}
