//! The noise generator `g(x_attr, z; y, δ, ∇L)` and the recursive,
//! projected noise trajectory it drives, plus the diversity objective.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::nn::{ops, Checkpoint, CheckpointMeta, Conv2d, Embedding, Linear, ParamStore};
use crate::rng::{self, SeededRng};
use crate::{Error, Result};

pub const GENERATOR_KIND: &str = "noise-generator";

/// Clamps the noise `candidate - base` to `[-ε, ε]`, then the sum to `[0, 1]`.
pub fn project(base: &Tensor, candidate: &Tensor, eps: f64) -> Result<Tensor> {
    if base.dims() != candidate.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", base.dims()),
            actual: format!("{:?}", candidate.dims()),
        });
    }
    let noise = (candidate - base)?.clamp(-eps, eps)?;
    Ok((base + noise)?.clamp(0.0, 1.0)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub z_dim: usize,
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
    pub width: usize,
    /// Initial weight from each normalized-gradient channel to the matching
    /// output channel of the head.
    pub grad_gain: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self { z_dim: 8, num_classes: 10, input_shape: (1, 28, 28), width: 16, grad_gain: 0.0, seed: 0 }
    }
}

/// Small encoder-decoder. Full-resolution input planes are `x_attr`, `δ`,
/// the normalized input gradient and a label plane; `z` enters as a
/// per-channel bias at the bottleneck. The head sees the upsampled features
/// next to the raw input planes.
#[derive(Debug, Clone)]
pub struct NoiseGenerator {
    spec: GeneratorSpec,
    store: ParamStore,
    label: Embedding,
    enc1: Conv2d,
    enc2: Conv2d,
    zproj: Linear,
    mid: Conv2d,
    dec1: Conv2d,
    head: Conv2d,
}

impl NoiseGenerator {
    pub fn new(spec: GeneratorSpec) -> Result<Self> {
        if spec.z_dim == 0 || spec.num_classes == 0 || spec.width == 0 {
            return Err(Error::InvalidConfig("generator dimensions must be positive".into()));
        }
        let (c, h, w) = spec.input_shape;
        let mut rng = rng::stream(spec.seed, "generator-init");
        let mut store = ParamStore::new(DType::F32);
        let wd = spec.width;
        let label = Embedding::new(&mut store, "label", spec.num_classes, h * w, 0.5, &mut rng)?;
        let enc1 = Conv2d::new(&mut store, "enc1", 3 * c + 1, wd, 3, 2, 1, &mut rng)?;
        let enc2 = Conv2d::new(&mut store, "enc2", wd, 2 * wd, 3, 2, 1, &mut rng)?;
        let zproj = Linear::new(&mut store, "zproj", spec.z_dim, 2 * wd, &mut rng)?;
        let mid = Conv2d::new(&mut store, "mid", 2 * wd, 2 * wd, 3, 1, 1, &mut rng)?;
        let dec1 = Conv2d::new(&mut store, "dec1", 3 * wd, wd, 1, 1, 0, &mut rng)?;
        let head = Conv2d::new(&mut store, "head", wd + 3 * c, c, 1, 1, 0, &mut rng)?;
        if spec.grad_gain != 0.0 {
            let mut wv = head.weight().as_tensor().flatten_all()?.to_vec1::<f32>()?;
            let cols = wd + 3 * c;
            for o in 0..c {
                wv[o * cols + wd + 2 * c + o] = spec.grad_gain as f32;
            }
            head.weight().set(&Tensor::from_vec(wv, (c, cols, 1, 1), &Device::Cpu)?)?;
        }
        Ok(Self { spec, store, label, enc1, enc2, zproj, mid, dec1, head })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn z_dim(&self) -> usize {
        self.spec.z_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn duplicate(&self) -> Result<Self> {
        let g = Self::new(self.spec.clone())?;
        g.store.copy_from(&self.store)?;
        Ok(g)
    }

    /// Sets the output head to a constant pre-activation `bias` with zero
    /// weights, so every pixel of the raw output equals `tanh(bias)`.
    pub fn set_constant_output(&self, bias: f64) -> Result<()> {
        for (name, var) in self.store.trainable_named() {
            if name == "head.weight" {
                var.set(&var.zeros_like()?)?;
            } else if name == "head.bias" {
                var.set(&(var.ones_like()? * bias)?)?;
            }
        }
        Ok(())
    }

    pub fn sample_z(&self, rng: &mut SeededRng, b: usize) -> Result<Tensor> {
        rng::normal_tensor(rng, (b, self.spec.z_dim), DType::F32)
    }

    /// Raw per-step output in `[-1, 1]`.
    pub fn forward(&self, x_attr: &Tensor, z: &Tensor, y: &[usize], delta: &Tensor, grad: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x_attr.dims4()?;
        if (c, h, w) != self.spec.input_shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.spec.input_shape),
                actual: format!("{:?}", (c, h, w)),
            });
        }
        if z.dims() != [b, self.spec.z_dim] || y.len() != b {
            return Err(Error::ShapeMismatch {
                expected: format!("z ({b}, {}) and {b} labels", self.spec.z_dim),
                actual: format!("z {:?} and {} labels", z.dims(), y.len()),
            });
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= self.spec.num_classes) {
            return Err(Error::Precondition(format!("label {bad} out of range")));
        }
        let lp = self.label.forward(&ops::labels_tensor(y)?)?.reshape((b, 1, h, w))?;
        let skip = Tensor::cat(&[x_attr, delta, grad], 1)?;
        let e1 = self.enc1.forward(&Tensor::cat(&[&skip, &lp], 1)?)?.relu()?;
        let zb = self.zproj.forward(z)?.unsqueeze(2)?.unsqueeze(3)?;
        let e2 = self.enc2.forward(&e1)?.broadcast_add(&zb)?.relu()?;
        let m = self.mid.forward(&e2)?.relu()?;
        let (_, _, h1, w1) = e1.dims4()?;
        let d1 = self.dec1.forward(&Tensor::cat(&[&ops::upsample_nearest(&m, h1, w1)?, &e1], 1)?)?.relu()?;
        let d2 = Tensor::cat(&[&ops::upsample_nearest(&d1, h, w)?, &skip], 1)?;
        Ok(self.head.forward(&d2)?.tanh()?)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint::new(
            CheckpointMeta {
                kind: GENERATOR_KIND.into(),
                profile: "encoder-decoder".into(),
                config_hash: config_hash.to_string(),
                extra: serde_json::json!({ "spec": self.spec }),
            },
            self.store.tensors(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        self.to_checkpoint(config_hash).save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(GENERATOR_KIND)?;
        let spec: GeneratorSpec = serde_json::from_value(ck.meta.extra["spec"].clone())?;
        let g = Self::new(spec)?;
        g.store.load(&ck.tensors)?;
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Loads a checkpoint and checks it against the expected layout.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &GeneratorSpec) -> Result<Self> {
        let g = Self::load(path)?;
        let s = &g.spec;
        if s.z_dim != expected.z_dim || s.num_classes != expected.num_classes || s.input_shape != expected.input_shape || s.width != expected.width {
            return Err(Error::Checkpoint(format!(
                "generator layout mismatch: checkpoint has z_dim {} classes {} shape {:?}, expected z_dim {} classes {} shape {:?}",
                s.z_dim, s.num_classes, s.input_shape, expected.z_dim, expected.num_classes, expected.input_shape
            )));
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBudget {
    pub eps: f64,
    pub eps_step: f64,
    pub steps: usize,
}

impl NoiseBudget {
    /// `T` steps of size `ε / T`.
    pub fn even(eps: f64, steps: usize) -> Self {
        Self { eps, eps_step: eps / steps.max(1) as f64, steps }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidConfig(format!("ε must be non-negative, got {}", self.eps)));
        }
        if !(self.eps_step >= 0.0 && self.eps_step <= self.eps + 1e-12) {
            return Err(Error::InvalidConfig(format!("ε_step {} must lie in [0, ε]", self.eps_step)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("recursion depth T must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NoiseTrajectory {
    pub base: Tensor,
    pub z: Tensor,
    /// `x̃^(1..T)`.
    pub steps: Vec<Tensor>,
    /// `δ^(1..T)`.
    pub deltas: Vec<Tensor>,
}

impl NoiseTrajectory {
    pub fn last(&self) -> &Tensor {
        self.steps.last().expect("trajectories have at least one step")
    }

    pub fn last_delta(&self) -> &Tensor {
        self.deltas.last().expect("trajectories have at least one step")
    }

    /// Splits a trajectory over a batch `[a; b]` into the two halves.
    pub fn split_halves(&self) -> Result<(NoiseTrajectory, NoiseTrajectory)> {
        let n = self.base.dim(0)?;
        if n % 2 != 0 {
            return Err(Error::Precondition("cannot halve an odd batch".into()));
        }
        let h = n / 2;
        let part = |t: &Tensor, s: usize| t.narrow(0, s, h);
        let make = |s: usize| -> Result<NoiseTrajectory> {
            Ok(NoiseTrajectory {
                base: part(&self.base, s)?,
                z: part(&self.z, s)?,
                steps: self.steps.iter().map(|t| part(t, s)).collect::<candle_core::Result<_>>()?,
                deltas: self.deltas.iter().map(|t| part(t, s)).collect::<candle_core::Result<_>>()?,
            })
        };
        Ok((make(0)?, make(h)?))
    }
}

/// Scales each image of the gradient to unit mean absolute value (detached).
fn normalize_gradient(g: &Tensor) -> Result<Tensor> {
    let m = g.abs()?.flatten_from(1)?.mean_keepdim(D::Minus1)?;
    let m = (m + 1e-12)?.reshape((g.dim(0)?, 1, 1, 1))?;
    Ok(g.broadcast_div(&m)?.detach())
}

/// Runs the `T`-step projected recursion from `x_attr`. The trajectory is
/// differentiable in `x_attr`, `z` and the generator parameters; the
/// classifier gradient is fed in detached.
pub fn generate_trajectory(
    g: &NoiseGenerator,
    x_attr: &Tensor,
    z: &Tensor,
    y: &[usize],
    model: &Classifier,
    budget: &NoiseBudget,
) -> Result<NoiseTrajectory> {
    budget.validate()?;
    let x_attr = x_attr.to_dtype(DType::F32)?;
    let mut cur = x_attr.clone();
    let mut delta = x_attr.zeros_like()?;
    let mut steps = Vec::with_capacity(budget.steps);
    let mut deltas = Vec::with_capacity(budget.steps);
    for t in 0..budget.steps {
        let grad = model.input_gradient(&cur.detach(), y)?.to_dtype(DType::F32)?;
        let out = g.forward(&x_attr, z, y, &delta, &normalize_gradient(&grad)?)?;
        let next = project(&x_attr, &(&cur + (out * budget.eps_step)?)?, budget.eps)?;
        if !ops::all_finite(&next)? {
            return Err(Error::NonFinite(format!("noise recursion step {}", t + 1)));
        }
        delta = (&next - &x_attr)?;
        steps.push(next.clone());
        deltas.push(delta.clone());
        cur = next;
    }
    Ok(NoiseTrajectory { base: x_attr, z: z.clone(), steps, deltas })
}

/// Mean over steps of the per-example L1 distance between the two
/// trajectories, divided by `‖z1 - z2‖₁`, averaged over the batch.
pub fn diversity_loss(a: &NoiseTrajectory, b: &NoiseTrajectory) -> Result<Tensor> {
    if a.steps.len() != b.steps.len() || a.steps.is_empty() {
        return Err(Error::Precondition("trajectories must share a non-zero depth".into()));
    }
    if a.base.dims() != b.base.dims() {
        return Err(Error::Precondition("trajectories must share their base images".into()));
    }
    let zd = ops::l1_per_example(&(&a.z - &b.z)?)?;
    if ops::to_vec_f64(&zd)?.contains(&0.0) {
        return Err(Error::Precondition("diversity variables must differ (z1 = z2)".into()));
    }
    let mut acc: Option<Tensor> = None;
    for (s1, s2) in a.steps.iter().zip(&b.steps) {
        let d = ops::l1_per_example(&(s1 - s2)?)?;
        acc = Some(match acc {
            None => d,
            Some(x) => (x + d)?,
        });
    }
    let mean_t = (acc.expect("non-empty") / a.steps.len() as f64)?;
    Ok(mean_t.div(&zd)?.mean_all()?)
}

/// Convenience: constant `(b, z_dim)` tensor from host values.
pub fn z_from_values(values: Vec<f32>, b: usize, z_dim: usize) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, (b, z_dim), &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ClassifierSpec, Profile};

    fn setup() -> (NoiseGenerator, Classifier, Tensor) {
        let spec = GeneratorSpec { input_shape: (1, 12, 12), ..GeneratorSpec::default() };
        let g = NoiseGenerator::new(spec).unwrap();
        let m = Classifier::new(ClassifierSpec { profile: Profile::SmallCnn, input_shape: (1, 12, 12), seed: 2, ..ClassifierSpec::default() }).unwrap();
        let x = rng::uniform_tensor(&mut rng::seeded(4), (3, 1, 12, 12), 0.0, 1.0, DType::F32).unwrap();
        (g, m, x)
    }

    fn val(t: &Tensor) -> Vec<f64> {
        ops::to_vec_f64(t).unwrap()
    }

    #[test]
    fn projection_examples() {
        let base = Tensor::new(&[0.5f32, 0.95, 0.3], &Device::Cpu).unwrap();
        let cand = Tensor::new(&[0.9f32, 1.2, 0.3], &Device::Cpu).unwrap();
        let r = val(&project(&base, &cand, 0.1).unwrap());
        assert!((r[0] - 0.6).abs() < 1e-6);
        assert_eq!(r[1], 1.0);
        assert!((r[2] - 0.3).abs() < 1e-7);
        assert_eq!(val(&project(&base, &base, 0.1).unwrap()), val(&base));
    }

    #[test]
    fn zero_head_keeps_trajectory_at_base() {
        let (g, m, x) = setup();
        g.set_constant_output(0.0).unwrap();
        let z = g.sample_z(&mut rng::seeded(1), 3).unwrap();
        let tr = generate_trajectory(&g, &x, &z, &[0, 1, 2], &m, &NoiseBudget::even(0.1, 4)).unwrap();
        for (s, d) in tr.steps.iter().zip(&tr.deltas) {
            assert_eq!(val(s), val(&x));
            assert!(val(d).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn saturated_generator_reaches_the_ball_edge() {
        let (g, m, _) = setup();
        g.set_constant_output(30.0).unwrap();
        let x = Tensor::full(0.5f32, (2, 1, 12, 12), &Device::Cpu).unwrap();
        let z = g.sample_z(&mut rng::seeded(1), 2).unwrap();
        let tr = generate_trajectory(&g, &x, &z, &[0, 1], &m, &NoiseBudget::even(0.1, 4)).unwrap();
        assert!(val(tr.last_delta()).iter().all(|v| (v - 0.1).abs() < 1e-6));
        let x = Tensor::full(0.97f32, (2, 1, 12, 12), &Device::Cpu).unwrap();
        let tr = generate_trajectory(&g, &x, &z, &[0, 1], &m, &NoiseBudget::even(0.1, 4)).unwrap();
        assert!(val(tr.last_delta()).iter().all(|v| (v - 0.03).abs() < 1e-6));
    }

    #[test]
    fn trajectory_stays_in_ball_and_is_a_function_of_z() {
        let (g, m, x) = setup();
        let z = g.sample_z(&mut rng::seeded(8), 3).unwrap();
        let b = NoiseBudget::even(0.1, 4);
        let t1 = generate_trajectory(&g, &x, &z, &[4, 5, 6], &m, &b).unwrap();
        let t2 = generate_trajectory(&g, &x, &z, &[4, 5, 6], &m, &b).unwrap();
        for (s, d) in t1.steps.iter().zip(&t1.deltas) {
            assert!(val(d).iter().all(|v| v.abs() <= 0.1 + 1e-6));
            assert!(val(s).iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(val(t1.last()), val(t2.last()));
    }

    #[test]
    fn hand_computed_diversity() {
        let zeros = Tensor::zeros((1, 1, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let step = |v: f32| Tensor::full(v, (1, 1, 2, 2), &Device::Cpu).unwrap();
        let a = NoiseTrajectory {
            base: zeros.clone(),
            z: Tensor::new(&[[1.0f32, 0.0]], &Device::Cpu).unwrap(),
            steps: vec![zeros.clone(), zeros.clone()],
            deltas: vec![zeros.clone(), zeros.clone()],
        };
        let b = NoiseTrajectory {
            z: Tensor::new(&[[0.0f32, -1.0]], &Device::Cpu).unwrap(),
            steps: vec![step(0.5), step(1.0)],
            ..a.clone()
        };
        let l = ops::scalar(&diversity_loss(&a, &b).unwrap()).unwrap();
        assert!((l - 1.5).abs() < 1e-6);
        assert_eq!(l, ops::scalar(&diversity_loss(&b, &a).unwrap()).unwrap());
        assert_eq!(ops::scalar(&diversity_loss(&b, &NoiseTrajectory { z: a.z.clone(), ..b.clone() }).unwrap()).unwrap(), 0.0);
        assert!(diversity_loss(&a, &a).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_layout_check() {
        let (g, m, x) = setup();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.safetensors");
        g.save(&p, "h").unwrap();
        let back = NoiseGenerator::load_expecting(&p, g.spec()).unwrap();
        let z = g.sample_z(&mut rng::seeded(2), 3).unwrap();
        let b = NoiseBudget::even(0.1, 2);
        let y = [1, 2, 3];
        assert_eq!(
            val(generate_trajectory(&g, &x, &z, &y, &m, &b).unwrap().last()),
            val(generate_trajectory(&back, &x, &z, &y, &m, &b).unwrap().last())
        );
        let wrong = GeneratorSpec { z_dim: 4, ..g.spec().clone() };
        assert!(NoiseGenerator::load_expecting(&p, &wrong).is_err());
        std::fs::write(&p, b"garbage").unwrap();
        assert!(NoiseGenerator::load(&p).is_err());
    }
}
