//! The attribute manipulator `h(x, α)`: geometric warps driven by attribute
//! values, and an object-level latent-subspace editor.

pub mod geometric;
pub mod object;
pub mod warp;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::AttributeSpec;
use crate::nn::ops;
use crate::{Error, Result};

pub use geometric::{
    similarity_from_attributes, train_attribute_predictor, AttributePredictor, GeometricManipulator,
    PredictorConfig,
};
pub use object::{train_object_manipulator, ObjectLevelManipulator, ObjectManipulatorConfig};
pub use warp::{warp, Padding, Similarity};

/// How out-of-range attribute targets are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApplyMode {
    /// Clamp into range and log a warning.
    Attack,
    /// Reject with an error.
    Train,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManipulatorTrainReport {
    pub reconstruction_loss: Vec<f64>,
    pub attribute_loss: Vec<f64>,
    /// Held-out mean absolute error per attribute, natural units.
    pub heldout_error: Vec<(String, f64)>,
    /// Set when a threshold was not met within the budget.
    pub warning: Option<String>,
}

impl ManipulatorTrainReport {
    pub fn all_finite(&self) -> bool {
        self.reconstruction_loss
            .iter()
            .chain(&self.attribute_loss)
            .chain(self.heldout_error.iter().map(|(_, v)| v))
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub enum Manipulator {
    /// Leaves the image unchanged; `α` is accepted and ignored.
    Identity(Vec<AttributeSpec>),
    Geometric(GeometricManipulator),
    Object(ObjectLevelManipulator),
}

impl Manipulator {
    pub fn specs(&self) -> &[AttributeSpec] {
        match self {
            Manipulator::Identity(s) => s,
            Manipulator::Geometric(m) => m.specs(),
            Manipulator::Object(m) => m.specs(),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Manipulator::Identity(_))
    }

    /// Canonical attribute values as a `(b, A)` tensor.
    pub fn canonical(&self, b: usize, dtype: DType) -> Result<Tensor> {
        let row: Vec<f64> = self.specs().iter().map(AttributeSpec::canonical).collect();
        let a = row.len();
        let data: Vec<f64> = row.iter().copied().cycle().take(b * a).collect();
        Ok(Tensor::from_vec(data, (b, a), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// `h(x, α)`: output in `[0, 1]`, differentiable with respect to `alpha`.
    pub fn apply(&self, x: &Tensor, alpha: &Tensor, mode: ApplyMode) -> Result<Tensor> {
        let alpha = check_range(self.specs(), alpha, mode)?;
        match self {
            Manipulator::Identity(_) => Ok(x.clone()),
            Manipulator::Geometric(m) => m.apply(x, &alpha),
            Manipulator::Object(m) => m.apply(x, &alpha),
        }
    }
}

/// Verifies `(B, A)` attribute targets against their specs. Values outside
/// the range are clamped in attack mode and rejected in training mode.
pub fn check_range(specs: &[AttributeSpec], alpha: &Tensor, mode: ApplyMode) -> Result<Tensor> {
    let (b, a) = alpha.dims2()?;
    if a != specs.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} attribute columns", specs.len()),
            actual: format!("{a}"),
        });
    }
    if a == 0 {
        return Ok(alpha.clone());
    }
    let vals = ops::to_vec_f64(alpha)?;
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attribute target".into()));
    }
    let tol = |s: &AttributeSpec| 1e-9 * s.width().max(1.0);
    let mut bad = None;
    for i in 0..b {
        for (j, s) in specs.iter().enumerate() {
            let v = vals[i * a + j];
            if v < s.lo - tol(s) || v > s.hi + tol(s) {
                bad.get_or_insert((s, v));
            }
        }
    }
    let Some((s, v)) = bad else { return Ok(alpha.clone()) };
    match mode {
        ApplyMode::Train => Err(Error::AttributeOutOfRange { name: s.name.clone(), value: v, lo: s.lo, hi: s.hi }),
        ApplyMode::Attack => {
            log::warn!("attribute `{}` value {v} outside [{}, {}]; clamping", s.name, s.lo, s.hi);
            let dtype = alpha.dtype();
            let lo: Vec<f64> = specs.iter().map(|s| s.lo).collect();
            let hi: Vec<f64> = specs.iter().map(|s| s.hi).collect();
            let lo = Tensor::from_vec(lo, (1, a), &Device::Cpu)?.to_dtype(dtype)?;
            let hi = Tensor::from_vec(hi, (1, a), &Device::Cpu)?.to_dtype(dtype)?;
            Ok(alpha.broadcast_maximum(&lo)?.broadcast_minimum(&hi)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_of_range_clamps_in_attack_mode_and_errors_in_training() {
        let specs = [AttributeSpec::rotation()];
        let alpha = Tensor::new(&[[60.0f64], [10.0]], &Device::Cpu).unwrap();
        let c = check_range(&specs, &alpha, ApplyMode::Attack).unwrap();
        assert_eq!(ops::to_vec_f64(&c).unwrap(), vec![45.0, 10.0]);
        assert!(matches!(
            check_range(&specs, &alpha, ApplyMode::Train),
            Err(Error::AttributeOutOfRange { .. })
        ));
    }

    #[test]
    fn identity_manipulator_passes_images_through() {
        let m = Manipulator::Identity(vec![AttributeSpec::rotation()]);
        let x = Tensor::rand(0f32, 1f32, (2, 1, 5, 5), &Device::Cpu).unwrap();
        let a = m.canonical(2, DType::F32).unwrap();
        let y = m.apply(&x, &a, ApplyMode::Train).unwrap();
        assert_eq!(ops::to_vec_f64(&x).unwrap(), ops::to_vec_f64(&y).unwrap());
    }
}
