//! Geometric manipulator: attribute values become a similarity warp. An
//! optional attribute predictor estimates the current pose so it can be
//! undone before the target pose is applied.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::warp::{self, Padding, Similarity};
use super::ManipulatorTrainReport;
use crate::data::{self, AttributeKind, AttributeSpec, DatasetHandle};
use crate::nn::{ops, Adam, AdamConfig, Checkpoint, CheckpointMeta, Conv2d, Direction, Linear, ParamStore};
use crate::rng;
use crate::{Error, Result};

/// Builds per-image transforms from a `(B, A)` attribute tensor. Columns of
/// object-level specs are ignored; missing kinds stay at identity.
pub fn similarity_from_attributes(specs: &[AttributeSpec], alpha: &Tensor) -> Result<Similarity> {
    let (b, a) = alpha.dims2()?;
    if a != specs.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} attribute columns", specs.len()),
            actual: format!("{a}"),
        });
    }
    let mut t = Similarity::identity(b, alpha.dtype())?;
    for (j, s) in specs.iter().enumerate() {
        let col = alpha.narrow(1, j, 1)?.squeeze(1)?;
        match s.kind {
            AttributeKind::Rotation => t.rotation_deg = col,
            AttributeKind::Scale => t.scale = col,
            AttributeKind::ShiftX => t.shift_x = col,
            AttributeKind::ShiftY => t.shift_y = col,
            AttributeKind::ObjectLevel => {}
        }
    }
    Ok(t)
}

/// Small CNN regressor from an image to its attribute values, squashed into
/// each spec's range.
#[derive(Debug, Clone)]
pub struct AttributePredictor {
    store: ParamStore,
    c1: Conv2d,
    c2: Conv2d,
    fc1: Linear,
    fc2: Linear,
    lo: Vec<f64>,
    hi: Vec<f64>,
    shape: (usize, usize, usize),
}

impl AttributePredictor {
    pub fn new(shape: (usize, usize, usize), specs: &[AttributeSpec], dtype: DType, seed: u64) -> Result<Self> {
        let (c, h, w) = shape;
        let mut rng = rng::stream(seed, "attribute-predictor");
        let mut store = ParamStore::new(dtype);
        let c1 = Conv2d::new(&mut store, "c1", c, 16, 3, 2, 1, &mut rng)?;
        let c2 = Conv2d::new(&mut store, "c2", 16, 32, 3, 2, 1, &mut rng)?;
        let flat = 32 * h.div_ceil(4) * w.div_ceil(4);
        let fc1 = Linear::new(&mut store, "fc1", flat, 64, &mut rng)?;
        let fc2 = Linear::new(&mut store, "fc2", 64, specs.len(), &mut rng)?;
        Ok(Self {
            store,
            c1,
            c2,
            fc1,
            fc2,
            lo: specs.iter().map(|s| s.lo).collect(),
            hi: specs.iter().map(|s| s.hi).collect(),
            shape,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// `(B, A)` predictions, each inside its spec range.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(x)?.relu()?;
        let h = self.c2.forward(&h)?.relu()?;
        let h = self.fc1.forward(&h.flatten_from(1)?)?.relu()?;
        ops::squash_to_range(&self.fc2.forward(&h)?, &self.lo, &self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Train on warps drawn from the spec ranges; when false, the dataset's
    /// own annotations are the targets.
    pub synthesize: bool,
    pub eval_size: usize,
    /// Held-out MAE thresholds keyed by attribute name; kinds without an
    /// entry use 5° for rotation, 0.05 for scale and 0.5 px for shifts.
    pub thresholds: BTreeMap<String, f64>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 100,
            lr: 0.003,
            seed: 0,
            synthesize: true,
            eval_size: 1000,
            thresholds: BTreeMap::new(),
        }
    }
}

impl PredictorConfig {
    fn threshold(&self, s: &AttributeSpec) -> f64 {
        if let Some(&t) = self.thresholds.get(&s.name) {
            return t;
        }
        match s.kind {
            AttributeKind::Rotation => 5.0,
            AttributeKind::Scale => 0.05,
            AttributeKind::ShiftX | AttributeKind::ShiftY => 0.5,
            AttributeKind::ObjectLevel => 0.1 * s.width(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeometricManipulator {
    specs: Vec<AttributeSpec>,
    padding: Padding,
    bypass: bool,
    predictor: Option<AttributePredictor>,
}

pub const GEOMETRIC_KIND: &str = "geometric-manipulator";

impl GeometricManipulator {
    /// A manipulator in predictor-bypass mode.
    pub fn new(specs: Vec<AttributeSpec>, padding: Padding) -> Result<Self> {
        data::validate_specs(&specs)?;
        if let Some(s) = specs.iter().find(|s| !s.kind.is_geometric()) {
            return Err(Error::IncompatibleSpec(format!("`{}` is not a geometric attribute", s.name)));
        }
        Ok(Self { specs, padding, bypass: true, predictor: None })
    }

    pub fn specs(&self) -> &[AttributeSpec] {
        &self.specs
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn bypass(&self) -> bool {
        self.bypass
    }

    pub fn set_bypass(&mut self, bypass: bool) {
        self.bypass = bypass;
    }

    pub fn predictor(&self) -> Option<&AttributePredictor> {
        self.predictor.as_ref()
    }

    pub fn set_predictor(&mut self, p: AttributePredictor) {
        self.predictor = Some(p);
    }

    /// With bypass the target warp is applied directly. Otherwise the
    /// predicted current pose is inverted first and both transforms are
    /// composed into a single resampling.
    pub fn apply(&self, x: &Tensor, alpha: &Tensor) -> Result<Tensor> {
        let target = similarity_from_attributes(&self.specs, alpha)?;
        let t = if self.bypass {
            target
        } else {
            let p = self
                .predictor
                .as_ref()
                .ok_or_else(|| Error::NotReady("attribute predictor is not trained and bypass is off".into()))?;
            let current = similarity_from_attributes(&self.specs, &p.forward(x)?.detach())?;
            target.compose(&current.inverse()?)?
        };
        ops::clamp_unit_straight_through(&warp::warp(x, &t, self.padding)?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = BTreeMap::new();
        if let Some(p) = &self.predictor {
            for (k, v) in p.store.tensors() {
                tensors.insert(format!("predictor.{k}"), v);
            }
        }
        Ok(Checkpoint::new(
            CheckpointMeta {
                kind: GEOMETRIC_KIND.into(),
                profile: "stn".into(),
                config_hash: String::new(),
                extra: serde_json::json!({
                    "specs": self.specs,
                    "padding": self.padding,
                    "bypass": self.bypass,
                    "shape": self.predictor.as_ref().map(|p| p.shape),
                    "dtype": self.predictor.as_ref().map(|p| format!("{:?}", p.store.dtype())),
                }),
            },
            tensors,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(GEOMETRIC_KIND)?;
        let e = &ck.meta.extra;
        let specs: Vec<AttributeSpec> = serde_json::from_value(e["specs"].clone())?;
        let padding: Padding = serde_json::from_value(e["padding"].clone())?;
        let mut m = Self::new(specs, padding)?;
        m.bypass = e["bypass"].as_bool().unwrap_or(true);
        let shape: Option<(usize, usize, usize)> = serde_json::from_value(e["shape"].clone())?;
        if let Some(shape) = shape {
            let dtype = if e["dtype"].as_str() == Some("F64") { DType::F64 } else { DType::F32 };
            let p = AttributePredictor::new(shape, &m.specs, dtype, 0)?;
            p.store.load(&ck.section("predictor."))?;
            m.predictor = Some(p);
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Trains the attribute predictor on synthesized warps of the training
/// split (or on its annotations) and reports held-out MAE on the
/// validation split.
pub fn train_attribute_predictor(
    m: &mut GeometricManipulator,
    dataset: &DatasetHandle,
    cfg: &PredictorConfig,
) -> Result<ManipulatorTrainReport> {
    if m.specs.is_empty() {
        return Err(Error::Precondition("no attributes to predict".into()));
    }
    let dtype = DType::F32;
    let predictor = AttributePredictor::new(dataset.shape(), &m.specs, dtype, cfg.seed)?;
    let mut opt = Adam::new(predictor.store.trainable(), AdamConfig::with_lr(cfg.lr), Direction::Descend)?;
    let mut sample_rng = rng::stream(cfg.seed, "predictor-samples");
    let lo: Vec<f64> = m.specs.iter().map(|s| s.lo).collect();
    let width: Vec<f64> = m.specs.iter().map(AttributeSpec::width).collect();
    let a = m.specs.len();
    let to_unit = |vals: &Tensor| -> Result<Tensor> {
        let lo_t = Tensor::from_vec(lo.clone(), (1, a), &Device::Cpu)?.to_dtype(dtype)?;
        let w_t = Tensor::from_vec(width.clone(), (1, a), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(vals.broadcast_sub(&lo_t)?.broadcast_div(&w_t)?)
    };
    let column_index = |kind: AttributeKind| dataset.attribute_specs.iter().position(|s| s.kind == kind);

    let mut report = ManipulatorTrainReport::default();
    let mut step = 0;
    let mut epoch = 0u64;
    while step < cfg.steps {
        for idx in dataset.train.batch_order(cfg.batch_size, Some(rng::derive_seed(cfg.seed, &format!("epoch{epoch}")))) {
            if step >= cfg.steps {
                break;
            }
            let batch = dataset.train.batch(&idx, dtype)?;
            let (x, target) = if cfg.synthesize {
                let (x, vals) = data::synthesize_joint(&batch.images, &m.specs, &mut sample_rng, m.padding)?;
                (x, Tensor::from_vec(vals, (idx.len(), a), &Device::Cpu)?.to_dtype(dtype)?)
            } else {
                let cols = m
                    .specs
                    .iter()
                    .map(|s| {
                        let v = match column_index(s.kind) {
                            Some(j) => batch.attributes.narrow(1, j, 1)?,
                            None => Tensor::full(s.canonical() as f32, (idx.len(), 1), &Device::Cpu)?,
                        };
                        Ok(v)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (batch.images.clone(), Tensor::cat(&cols, 1)?)
            };
            let pred = predictor.forward(&x)?;
            let loss = (to_unit(&pred)? - to_unit(&target)?)?.sqr()?.mean_all()?;
            let l = ops::scalar(&loss)?;
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("attribute predictor loss at step {step}")));
            }
            report.attribute_loss.push(l);
            opt.step(&loss.backward()?)?;
            step += 1;
        }
        epoch += 1;
    }

    let n = cfg.eval_size.min(dataset.val.len());
    let mut eval_rng = rng::stream(cfg.seed, "predictor-eval");
    let mut abs_err = vec![0.0; a];
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(cfg.batch_size.max(1)) {
        let batch = dataset.val.batch(chunk, dtype)?;
        let (x, vals) = if cfg.synthesize {
            data::synthesize_joint(&batch.images, &m.specs, &mut eval_rng, m.padding)?
        } else {
            let canon: Vec<f64> = m.specs.iter().map(AttributeSpec::canonical).collect();
            (batch.images.clone(), canon.iter().copied().cycle().take(chunk.len() * a).collect())
        };
        let pred = ops::to_vec_f64(&predictor.forward(&x)?)?;
        for (i, (p, v)) in pred.iter().zip(&vals).enumerate() {
            abs_err[i % a] += (p - v).abs();
        }
    }
    for (j, s) in m.specs.iter().enumerate() {
        let mae = abs_err[j] / n.max(1) as f64;
        if mae > cfg.threshold(s) {
            let msg = format!("`{}` held-out MAE {mae:.4} above threshold {}", s.name, cfg.threshold(s));
            log::warn!("{msg}");
            report.warning = Some(msg);
        }
        report.heldout_error.push((s.name.clone(), mae));
    }
    m.predictor = Some(predictor);
    Ok(report)
}
