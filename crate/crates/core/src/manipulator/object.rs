//! Object-level manipulator: an autoencoder whose latent code is split by a
//! learned matrix `M` into an attribute part and its orthogonal complement.
//! Editing replaces the attribute part, `h' = (I - M⁺M) h + M⁺ u`.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::ManipulatorTrainReport;
use crate::data::{self, AttributeSpec, DatasetHandle};
use crate::nn::{ops, Adam, AdamConfig, Checkpoint, CheckpointMeta, Conv2d, Direction, Linear, ParamStore};
use crate::rng;
use crate::{Error, Result};

pub const OBJECT_KIND: &str = "object-manipulator";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectManipulatorConfig {
    pub latent_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub reconstruction_weight: f64,
    pub attribute_weight: f64,
    pub orthogonality_weight: f64,
    pub eval_size: usize,
    /// Held-out mean L1 reconstruction error above which the report warns.
    pub reconstruction_threshold: f64,
}

impl Default for ObjectManipulatorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            steps: 2000,
            batch_size: 64,
            lr: 0.002,
            seed: 0,
            reconstruction_weight: 1.0,
            attribute_weight: 1.0,
            orthogonality_weight: 0.1,
            eval_size: 500,
            reconstruction_threshold: 0.08,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObjectLevelManipulator {
    specs: Vec<AttributeSpec>,
    shape: (usize, usize, usize),
    latent_dim: usize,
    store: ParamStore,
    e1: Conv2d,
    e2: Conv2d,
    e3: Linear,
    m: Var,
    d1: Linear,
    d2: Conv2d,
    d3: Conv2d,
}

impl ObjectLevelManipulator {
    pub fn new(specs: Vec<AttributeSpec>, shape: (usize, usize, usize), latent_dim: usize, seed: u64) -> Result<Self> {
        data::validate_specs(&specs)?;
        if specs.is_empty() || specs.iter().any(|s| s.kind.is_geometric()) {
            return Err(Error::IncompatibleSpec("object manipulator needs object-level attributes only".into()));
        }
        let (c, h, w) = shape;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Precondition(format!("image size {h}x{w} must be divisible by 4")));
        }
        if latent_dim <= specs.len() {
            return Err(Error::InvalidConfig("latent dimension must exceed the attribute count".into()));
        }
        let mut rng = rng::stream(seed, "object-manipulator");
        let mut store = ParamStore::new(DType::F32);
        let flat = 64 * (h / 4) * (w / 4);
        let e1 = Conv2d::new(&mut store, "enc.c1", c, 32, 3, 2, 1, &mut rng)?;
        let e2 = Conv2d::new(&mut store, "enc.c2", 32, 64, 3, 2, 1, &mut rng)?;
        let e3 = Linear::new(&mut store, "enc.fc", flat, latent_dim, &mut rng)?;
        let m = store.uniform("msp.m", (specs.len(), latent_dim), 1.0 / (latent_dim as f64).sqrt(), &mut rng)?;
        let d1 = Linear::new(&mut store, "dec.fc", latent_dim, flat, &mut rng)?;
        let d2 = Conv2d::new(&mut store, "dec.c1", 64, 32, 3, 1, 1, &mut rng)?;
        let d3 = Conv2d::new(&mut store, "dec.c2", 32, c, 3, 1, 1, &mut rng)?;
        Ok(Self { specs, shape, latent_dim, store, e1, e2, e3, m, d1, d2, d3 })
    }

    pub fn specs(&self) -> &[AttributeSpec] {
        &self.specs
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.e1.forward(x)?.relu()?;
        let h = self.e2.forward(&h)?.relu()?;
        self.e3.forward(&h.flatten_from(1)?)
    }

    pub fn decode(&self, h: &Tensor) -> Result<Tensor> {
        let (_, hh, ww) = self.shape;
        let b = h.dim(0)?;
        let y = self.d1.forward(h)?.relu()?.reshape((b, 64, hh / 4, ww / 4))?;
        let y = ops::upsample_nearest(&y, hh / 2, ww / 2)?;
        let y = self.d2.forward(&y)?.relu()?;
        let y = ops::upsample_nearest(&y, hh, ww)?;
        ops::sigmoid(&self.d3.forward(&y)?)
    }

    /// `M h` for a `(B, L)` batch of latents, in unit attribute coordinates.
    pub fn attribute_part(&self, h: &Tensor) -> Result<Tensor> {
        Ok(h.matmul(&self.m.as_tensor().t()?)?)
    }

    /// The matrix `M` as host rows.
    pub fn matrix(&self) -> Result<Vec<Vec<f64>>> {
        let m = ops::to_vec_f64(self.m.as_tensor())?;
        Ok(m.chunks(self.latent_dim).map(<[f64]>::to_vec).collect())
    }

    /// `(M⁺)ᵀ` as an `(A, L)` constant tensor, with `M⁺ = Mᵀ (M Mᵀ)⁻¹`.
    pub fn pinv_t(&self) -> Result<Tensor> {
        let rows = self.matrix()?;
        let p = pinv_rows(&rows)?;
        let a = rows.len();
        Tensor::from_vec(p.concat(), (a, self.latent_dim), &Device::Cpu)?
            .to_dtype(DType::F32)
            .map_err(Error::from)
    }

    /// Replaces the attribute component of each latent with `u` `(B, A)`.
    pub fn edit(&self, h: &Tensor, u: &Tensor) -> Result<Tensor> {
        let p = self.pinv_t()?;
        let mh = self.attribute_part(h)?;
        Ok(((h - mh.matmul(&p)?)? + u.matmul(&p)?)?)
    }

    /// Maps natural-unit attribute values to `[-1, 1]`.
    pub fn to_unit(&self, alpha: &Tensor) -> Result<Tensor> {
        let a = self.specs.len();
        let lo: Vec<f32> = self.specs.iter().map(|s| s.lo as f32).collect();
        let w: Vec<f32> = self.specs.iter().map(|s| s.width() as f32).collect();
        let lo = Tensor::from_vec(lo, (1, a), &Device::Cpu)?;
        let w = Tensor::from_vec(w, (1, a), &Device::Cpu)?;
        Ok(((alpha.to_dtype(DType::F32)?.broadcast_sub(&lo)?.broadcast_div(&w)? * 2.0)? - 1.0)?)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(&x.to_dtype(DType::F32)?)?)
    }

    pub fn apply(&self, x: &Tensor, alpha: &Tensor) -> Result<Tensor> {
        let dtype = x.dtype();
        let h = self.encode(&x.to_dtype(DType::F32)?)?;
        let out = self.decode(&self.edit(&h, &self.to_unit(alpha)?)?)?;
        Ok(out.to_dtype(dtype)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            CheckpointMeta {
                kind: OBJECT_KIND.into(),
                profile: "msp".into(),
                config_hash: String::new(),
                extra: serde_json::json!({
                    "specs": self.specs,
                    "shape": self.shape,
                    "latent_dim": self.latent_dim,
                }),
            },
            self.store.tensors(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(OBJECT_KIND)?;
        let e = &ck.meta.extra;
        let specs: Vec<AttributeSpec> = serde_json::from_value(e["specs"].clone())?;
        let shape: (usize, usize, usize) = serde_json::from_value(e["shape"].clone())?;
        let latent: usize = serde_json::from_value(e["latent_dim"].clone())?;
        let m = Self::new(specs, shape, latent, 0)?;
        m.store.load(&ck.tensors)?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Rows of `(M⁺)ᵀ = (M Mᵀ)⁻¹ M` for a full-row-rank `M` given as rows.
pub fn pinv_rows(m: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let a = m.len();
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
    let mut g: Vec<Vec<f64>> = (0..a).map(|i| (0..a).map(|j| dot(&m[i], &m[j])).collect()).collect();
    let mut inv: Vec<Vec<f64>> = (0..a).map(|i| (0..a).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for col in 0..a {
        let piv = (col..a)
            .max_by(|&i, &j| g[i][col].abs().total_cmp(&g[j][col].abs()))
            .expect("non-empty range");
        if g[piv][col].abs() < 1e-12 {
            return Err(Error::NonFinite("attribute projection matrix is rank deficient".into()));
        }
        g.swap(col, piv);
        inv.swap(col, piv);
        let d = g[col][col];
        for k in 0..a {
            g[col][k] /= d;
            inv[col][k] /= d;
        }
        for r in 0..a {
            if r != col {
                let f = g[r][col];
                for k in 0..a {
                    g[r][k] -= f * g[col][k];
                    inv[r][k] -= f * inv[col][k];
                }
            }
        }
    }
    let l = m.first().map_or(0, Vec::len);
    Ok((0..a)
        .map(|i| (0..l).map(|k| (0..a).map(|j| inv[i][j] * m[j][k]).sum()).collect())
        .collect())
}

/// Trains encoder, decoder and `M` jointly on reconstruction, attribute
/// regression and an orthogonality penalty on the non-attribute component.
pub fn train_object_manipulator(
    dataset: &DatasetHandle,
    specs: &[AttributeSpec],
    cfg: &ObjectManipulatorConfig,
) -> Result<(ObjectLevelManipulator, ManipulatorTrainReport)> {
    let cols: Vec<usize> = specs
        .iter()
        .map(|s| {
            dataset
                .attribute_specs
                .iter()
                .position(|d| d.name == s.name && !d.kind.is_geometric())
                .ok_or_else(|| Error::IncompatibleSpec(format!("dataset has no annotation for `{}`", s.name)))
        })
        .collect::<Result<_>>()?;
    let m = ObjectLevelManipulator::new(specs.to_vec(), dataset.shape(), cfg.latent_dim, cfg.seed)?;
    let mut opt = Adam::new(m.store.trainable(), AdamConfig::with_lr(cfg.lr), Direction::Descend)?;
    let mut report = ManipulatorTrainReport::default();
    let gather_attrs = |attrs: &Tensor| -> Result<Tensor> {
        let parts = cols.iter().map(|&j| attrs.narrow(1, j, 1)).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 1)?)
    };
    let mut step = 0;
    let mut epoch = 0u64;
    while step < cfg.steps {
        let order = dataset.train.batch_order(cfg.batch_size, Some(rng::derive_seed(cfg.seed, &format!("msp{epoch}"))));
        for idx in order {
            if step >= cfg.steps {
                break;
            }
            let batch = dataset.train.batch(&idx, DType::F32)?;
            let u = m.to_unit(&gather_attrs(&batch.attributes)?)?;
            let h = m.encode(&batch.images)?;
            let recon = (m.decode(&h)? - &batch.images)?.abs()?.mean_all()?;
            let mh = m.attribute_part(&h)?;
            let attr = (&mh - &u)?.sqr()?.mean_all()?;
            let rest = (&h - mh.matmul(&m.pinv_t()?)?)?;
            let orth = rest.sqr()?.mean_all()?;
            let loss = ((recon.clone() * cfg.reconstruction_weight)?
                + (attr.clone() * cfg.attribute_weight)?
                + (orth * cfg.orthogonality_weight)?)?;
            let l = ops::scalar(&loss)?;
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("object manipulator loss at step {step}")));
            }
            report.reconstruction_loss.push(ops::scalar(&recon)?);
            report.attribute_loss.push(ops::scalar(&attr)?);
            opt.step(&loss.backward()?)?;
            step += 1;
        }
        epoch += 1;
    }

    let n = cfg.eval_size.min(dataset.val.len());
    let idx: Vec<usize> = (0..n).collect();
    let (mut l1, mut err) = (0.0, vec![0.0; specs.len()]);
    for chunk in idx.chunks(cfg.batch_size.max(1)) {
        let batch = dataset.val.batch(chunk, DType::F32)?;
        let h = m.encode(&batch.images)?;
        l1 += ops::scalar(&(m.decode(&h)? - &batch.images)?.abs()?.mean_all()?)? * chunk.len() as f64;
        let pred = ops::to_vec_f64(&m.attribute_part(&h)?)?;
        let truth = ops::to_vec_f64(&m.to_unit(&gather_attrs(&batch.attributes)?)?)?;
        for (i, (p, t)) in pred.iter().zip(&truth).enumerate() {
            // back to natural units
            err[i % specs.len()] += (p - t).abs() * specs[i % specs.len()].width() / 2.0;
        }
    }
    let l1 = l1 / n.max(1) as f64;
    report.heldout_error.push(("reconstruction-l1".into(), l1));
    for (s, e) in specs.iter().zip(err) {
        report.heldout_error.push((s.name.clone(), e / n.max(1) as f64));
    }
    if l1 > cfg.reconstruction_threshold {
        let msg = format!("held-out reconstruction L1 {l1:.4} above {}", cfg.reconstruction_threshold);
        log::warn!("{msg}");
        report.warning = Some(msg);
    }
    Ok((m, report))
}

/// Tensors of a trained manipulator keyed by name, for inspection.
pub fn parameter_snapshot(m: &ObjectLevelManipulator) -> BTreeMap<String, Tensor> {
    m.store.tensors()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> AttributeSpec {
        AttributeSpec::object("bar", -1.0, 1.0).unwrap()
    }

    #[test]
    fn projection_is_idempotent_on_random_latents() {
        let m = ObjectLevelManipulator::new(vec![spec(), AttributeSpec::object("b", 0.0, 1.0).unwrap()], (1, 16, 16), 16, 4).unwrap();
        let mut r = rng::seeded(1);
        let h = rng::normal_tensor(&mut r, (20, 16), DType::F32).unwrap();
        let rest = (&h - m.attribute_part(&h).unwrap().matmul(&m.pinv_t().unwrap()).unwrap()).unwrap();
        let back = m.attribute_part(&rest).unwrap();
        let worst = back.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn edit_sets_the_attribute_part() {
        let m = ObjectLevelManipulator::new(vec![spec()], (1, 16, 16), 8, 2).unwrap();
        let h = rng::normal_tensor(&mut rng::seeded(3), (5, 8), DType::F32).unwrap();
        let u = Tensor::new(&[[0.3f32], [-1.0], [1.0], [0.0], [0.5]], &Device::Cpu).unwrap();
        let got = ops::to_vec_f64(&m.attribute_part(&m.edit(&h, &u).unwrap()).unwrap()).unwrap();
        for (g, w) in got.iter().zip([0.3, -1.0, 1.0, 0.0, 0.5]) {
            assert!((g - w).abs() < 1e-5);
        }
    }

    #[test]
    fn pinv_of_identity_rows() {
        let p = pinv_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 4.0]]).unwrap();
        assert_eq!(p, vec![vec![0.5, 0.0, 0.0], vec![0.0, 0.0, 0.25]]);
        assert!(pinv_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]).is_err());
    }

    #[test]
    fn output_is_in_unit_range_and_checkpoints_round_trip() {
        let m = ObjectLevelManipulator::new(vec![spec()], (1, 16, 16), 8, 2).unwrap();
        let x = Tensor::rand(0f32, 1f32, (3, 1, 16, 16), &Device::Cpu).unwrap();
        let a = Tensor::new(&[[1.0f32], [-1.0], [0.2]], &Device::Cpu).unwrap();
        let y = m.apply(&x, &a).unwrap();
        let v = ops::to_vec_f64(&y).unwrap();
        assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
        let back = ObjectLevelManipulator::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(v, ops::to_vec_f64(&back.apply(&x, &a).unwrap()).unwrap());
    }
}
