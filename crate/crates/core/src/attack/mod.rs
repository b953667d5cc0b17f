//! The joint attribute-and-noise attack and the pixel-space and ablated
//! baselines it is compared against.

pub mod audit;
pub mod eval;

pub use eval::{evaluate_attack, AttackContext, AttackSpec, EvalOutcome, ExampleRecord};

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, Mode};
use crate::data::AttributeSpec;
use crate::generator::{generate_trajectory, project, NoiseBudget, NoiseGenerator};
use crate::manipulator::{ApplyMode, Manipulator};
use crate::nn::{ops, Adam, AdamConfig, Direction};
use crate::rng::{self, SeededRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    Adam,
    /// `v ← v + lr · ∇v`.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub rule: StepRule,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum AlphaInit {
    /// Canonical value plus uniform noise of this half-width in the
    /// unconstrained (pre-tanh) coordinates.
    Canonical { noise: f64 },
    /// Uniform over each spec's range.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub eps: f64,
    pub eps_step: f64,
    /// Recursion depth `T`.
    pub steps: usize,
    /// Outer iterations `I`.
    pub iterations: usize,
    pub alpha_optimizer: OptimizerSettings,
    pub z_optimizer: OptimizerSettings,
    pub alpha_init: AlphaInit,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            eps: 0.1,
            eps_step: 0.025,
            steps: 4,
            iterations: 10,
            alpha_optimizer: OptimizerSettings { rule: StepRule::Adam, lr: 0.1 },
            z_optimizer: OptimizerSettings { rule: StepRule::Adam, lr: 0.1 },
            alpha_init: AlphaInit::Canonical { noise: 0.05 },
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        self.budget().validate()?;
        for o in [&self.alpha_optimizer, &self.z_optimizer] {
            if !(o.lr > 0.0 && o.lr.is_finite()) {
                return Err(Error::InvalidConfig(format!("attack learning rate must be positive, got {}", o.lr)));
            }
        }
        Ok(())
    }

    pub fn budget(&self) -> NoiseBudget {
        NoiseBudget { eps: self.eps, eps_step: self.eps_step, steps: self.steps }
    }

    /// Same settings with `ε` replaced and `ε_step = ε / T`.
    pub fn with_eps(&self, eps: f64) -> Self {
        Self { eps, eps_step: eps / self.steps.max(1) as f64, ..self.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct PerturbationResult {
    pub x_adv: Tensor,
    /// `h(x, α_final)`, or the clean input when no attribute was changed.
    pub x_attr: Tensor,
    /// `(B, A)` in natural units.
    pub alpha: Option<Tensor>,
    pub z: Option<Tensor>,
    /// `x_adv − x_attr`.
    pub delta: Tensor,
    /// `[iteration][example]` adversarial loss, including the final sample.
    pub loss_trace: Vec<Vec<f64>>,
    /// `[iteration][example]` correctness; entry `i` is the outcome an
    /// `I = i` attack would have produced.
    pub correct_at: Vec<Vec<bool>>,
    pub success: Vec<bool>,
    pub final_loss: Vec<f64>,
}

impl PerturbationResult {
    pub fn len(&self) -> usize {
        self.success.len()
    }

    pub fn is_empty(&self) -> bool {
        self.success.is_empty()
    }

    pub fn accuracy(&self) -> f64 {
        if self.success.is_empty() {
            return f64::NAN;
        }
        self.success.iter().filter(|s| !**s).count() as f64 / self.success.len() as f64
    }

    pub fn delta_linf(&self) -> Result<Vec<f64>> {
        ops::linf_per_example(&self.delta)
    }

    fn finish(x_adv: Tensor, x_attr: Tensor, model: &Classifier, y: &[usize], eps: f64) -> Result<Self> {
        audit::enforce_ball(&x_attr, &x_adv, eps)?;
        let logits = model.logits(&x_adv, Mode::Eval)?;
        let final_loss = ops::to_vec_f64(&ops::cross_entropy_per_example(&logits, y)?)?;
        let pred = ops::argmax_rows(&logits)?;
        let success: Vec<bool> = pred.iter().zip(y).map(|(p, t)| p != t).collect();
        let delta = (&x_adv - &x_attr)?;
        Ok(Self {
            x_adv,
            x_attr,
            alpha: None,
            z: None,
            delta,
            loss_trace: vec![final_loss.clone()],
            correct_at: vec![success.iter().map(|s| !s).collect()],
            success,
            final_loss,
        })
    }
}

/// Which branches of the joint attack are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaToggles {
    pub manipulator: bool,
    pub generator: bool,
    pub optimize_alpha: bool,
    pub optimize_z: bool,
}

impl SpaToggles {
    pub const FULL: SpaToggles = SpaToggles { manipulator: true, generator: true, optimize_alpha: true, optimize_z: true };
    pub const ATTRIBUTE_ONLY: SpaToggles = SpaToggles { generator: false, optimize_z: false, ..Self::FULL };
    pub const NOISE_ONLY: SpaToggles = SpaToggles { manipulator: false, optimize_alpha: false, ..Self::FULL };
}

enum Stepper {
    Adam(Adam),
    Plain(f64),
}

impl Stepper {
    fn new(var: &Var, s: &OptimizerSettings) -> Result<Self> {
        Ok(match s.rule {
            StepRule::Adam => Stepper::Adam(Adam::new(vec![var.clone()], AdamConfig::with_lr(s.lr), Direction::Ascend)?),
            StepRule::Plain => Stepper::Plain(s.lr),
        })
    }

    fn step(&mut self, var: &Var, grad: Option<Tensor>) -> Result<()> {
        match self {
            Stepper::Adam(a) => a.step_with(&[grad]),
            Stepper::Plain(lr) => {
                if let Some(g) = grad {
                    var.set(&(var.as_tensor() + (g * *lr)?)?)?;
                }
                Ok(())
            }
        }
    }
}

fn spec_bounds(specs: &[AttributeSpec]) -> (Vec<f64>, Vec<f64>) {
    (specs.iter().map(|s| s.lo).collect(), specs.iter().map(|s| s.hi).collect())
}

/// Unconstrained initial attribute coordinates `(b, A)`.
pub fn initial_alpha_coords(specs: &[AttributeSpec], b: usize, init: AlphaInit, rng: &mut SeededRng) -> Result<Tensor> {
    let (lo, hi) = spec_bounds(specs);
    let a = specs.len();
    let coords: Vec<f64> = match init {
        AlphaInit::Canonical { noise } => {
            let canon: Vec<f64> = specs.iter().map(AttributeSpec::canonical).collect();
            let base = ops::unsquash_from_range(&canon, &lo, &hi);
            (0..b * a)
                .map(|i| base[i % a] + if noise > 0.0 { rand::Rng::random_range(rng, -noise..=noise) } else { 0.0 })
                .collect()
        }
        AlphaInit::Uniform => {
            let v: Vec<f64> = (0..b * a).map(|i| rand::Rng::random_range(rng, lo[i % a]..=hi[i % a])).collect();
            ops::unsquash_from_range(&v, &lo, &hi)
        }
    };
    Ok(Tensor::from_vec(coords, (b, a), &Device::Cpu)?.to_dtype(DType::F32)?)
}

/// Algorithm-level joint attack. Each outer iteration applies `h(x, α)`,
/// runs the `T`-step noise recursion from `δ = 0`, and ascends `α` and `z`
/// on the loss of the final iterate; the returned sample is regenerated from
/// the last `(α, z)`. Branches can be switched off for ablations.
#[allow(clippy::too_many_arguments)]
pub fn spa_attack_with(
    x: &Tensor,
    y: &[usize],
    manipulator: Option<&Manipulator>,
    generator: Option<&NoiseGenerator>,
    model: &Classifier,
    cfg: &AttackConfig,
    toggles: SpaToggles,
) -> Result<PerturbationResult> {
    cfg.validate()?;
    let b = x.dim(0)?;
    if y.len() != b {
        return Err(Error::ShapeMismatch { expected: format!("{b} labels"), actual: format!("{}", y.len()) });
    }
    let x = x.to_dtype(DType::F32)?;
    let man = if toggles.manipulator {
        Some(manipulator.ok_or_else(|| Error::NotReady("joint attack needs a manipulator".into()))?)
    } else {
        None
    };
    let man = man.filter(|m| !m.specs().is_empty());
    // with a zero radius the noise branch is identically zero
    let gen = if toggles.generator && cfg.eps > 0.0 {
        Some(generator.ok_or_else(|| Error::NotReady("joint attack needs a noise generator".into()))?)
    } else {
        None
    };
    let eps = if gen.is_some() { cfg.eps } else { 0.0 };

    let mut alpha_rng = rng::stream(cfg.seed, "attack-alpha");
    let mut z_rng = rng::stream(cfg.seed, "attack-z");
    let u = match man {
        Some(m) => Some(Var::from_tensor(&initial_alpha_coords(m.specs(), b, cfg.alpha_init, &mut alpha_rng)?)?),
        None => None,
    };
    let z = match gen {
        Some(g) => Some(Var::from_tensor(&g.sample_z(&mut z_rng, b)?)?),
        None => None,
    };
    let bounds = man.map(|m| spec_bounds(m.specs()));
    let mut u_step = match &u {
        Some(v) if toggles.optimize_alpha => Some(Stepper::new(v, &cfg.alpha_optimizer)?),
        _ => None,
    };
    let mut z_step = match &z {
        Some(v) if toggles.optimize_z => Some(Stepper::new(v, &cfg.z_optimizer)?),
        _ => None,
    };

    let forward = |u: Option<&Var>, z: Option<&Var>| -> Result<(Tensor, Option<Tensor>, Tensor)> {
        let (x_attr, alpha) = match (man, u, &bounds) {
            (Some(m), Some(u), Some((lo, hi))) => {
                let alpha = ops::squash_to_range(u.as_tensor(), lo, hi)?;
                (m.apply(&x, &alpha, ApplyMode::Attack)?, Some(alpha))
            }
            _ => (x.clone(), None),
        };
        let adv = match (gen, z) {
            (Some(g), Some(z)) => generate_trajectory(g, &x_attr, z.as_tensor(), y, model, &cfg.budget())?.last().clone(),
            _ => x_attr.clone(),
        };
        Ok((x_attr, alpha, adv))
    };

    let mut loss_trace = Vec::with_capacity(cfg.iterations + 1);
    let mut correct_at = Vec::with_capacity(cfg.iterations + 1);
    for i in 0..cfg.iterations {
        let (_, _, adv) = forward(u.as_ref(), z.as_ref())?;
        let logits = model.logits(&adv, Mode::Eval)?;
        let per = ops::cross_entropy_per_example(&logits, y)?;
        let lv = ops::to_vec_f64(&per)?;
        if lv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("attack loss at iteration {i}")));
        }
        loss_trace.push(lv);
        correct_at.push(ops::argmax_rows(&logits)?.iter().zip(y).map(|(p, t)| p == t).collect());
        if u_step.is_none() && z_step.is_none() {
            continue;
        }
        let grads = per.sum_all()?.backward()?;
        if let (Some(s), Some(v)) = (u_step.as_mut(), u.as_ref()) {
            s.step(v, grads.get(v.as_tensor()).cloned())?;
        }
        if let (Some(s), Some(v)) = (z_step.as_mut(), z.as_ref()) {
            s.step(v, grads.get(v.as_tensor()).cloned())?;
        }
    }

    let (x_attr, alpha, adv) = forward(u.as_ref(), z.as_ref())?;
    let mut r = PerturbationResult::finish(adv.detach(), x_attr.detach(), model, y, eps)?;
    r.alpha = alpha.map(|a| a.detach());
    r.z = z.map(|v| v.as_tensor().detach());
    loss_trace.push(r.final_loss.clone());
    correct_at.push(r.success.iter().map(|s| !s).collect());
    r.loss_trace = loss_trace;
    r.correct_at = correct_at;
    Ok(r)
}

pub fn spa_attack(
    x: &Tensor,
    y: &[usize],
    manipulator: &Manipulator,
    generator: &NoiseGenerator,
    model: &Classifier,
    cfg: &AttackConfig,
) -> Result<PerturbationResult> {
    spa_attack_with(x, y, Some(manipulator), Some(generator), model, cfg, SpaToggles::FULL)
}

/// The joint attack with the noise branch removed (`δ ≡ 0`).
pub fn attribute_only_attack(
    x: &Tensor,
    y: &[usize],
    manipulator: &Manipulator,
    model: &Classifier,
    cfg: &AttackConfig,
) -> Result<PerturbationResult> {
    spa_attack_with(x, y, Some(manipulator), None, model, cfg, SpaToggles::ATTRIBUTE_ONLY)
}

/// The joint attack with the manipulator branch removed (`x_attr = x`).
pub fn noise_only_attack(
    x: &Tensor,
    y: &[usize],
    generator: &NoiseGenerator,
    model: &Classifier,
    cfg: &AttackConfig,
) -> Result<PerturbationResult> {
    spa_attack_with(x, y, None, Some(generator), model, cfg, SpaToggles::NOISE_ONLY)
}

/// Returns the input itself as the "adversarial" sample.
pub fn identity_attack(x: &Tensor, y: &[usize], model: &Classifier) -> Result<PerturbationResult> {
    let x = x.to_dtype(DType::F32)?;
    PerturbationResult::finish(x.clone(), x, model, y, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub eps: f64,
    pub step: f64,
    pub iterations: usize,
    pub random_start: bool,
    pub seed: u64,
}

impl PgdConfig {
    /// `k` steps of size `2.5 ε / k` with a random start.
    pub fn standard(eps: f64, iterations: usize, seed: u64) -> Self {
        Self { eps, step: 2.5 * eps / iterations.max(1) as f64, iterations, random_start: true, seed }
    }

    pub fn fgsm(eps: f64) -> Self {
        Self { eps, step: eps, iterations: 1, random_start: false, seed: 0 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.step >= 0.0) || self.iterations == 0 {
            return Err(Error::InvalidConfig("PGD needs ε ≥ 0, step ≥ 0 and at least one iteration".into()));
        }
        Ok(())
    }
}

fn random_start(base: &Tensor, eps: f64, seed: u64) -> Result<Tensor> {
    let mut r = rng::stream(seed, "pgd-start");
    let noise = rng::uniform_tensor(&mut r, base.shape().clone(), -eps, eps, base.dtype())?;
    project(base, &(base + noise)?, eps)
}

/// Sign-gradient ascent on `loss(logits)` with projection after each step.
fn sign_ascent(
    base: &Tensor,
    model: &Classifier,
    cfg: &PgdConfig,
    loss: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let mut cur = if cfg.random_start && cfg.eps > 0.0 { random_start(base, cfg.eps, cfg.seed)? } else { base.clone() };
    for _ in 0..cfg.iterations {
        let g = model.input_gradient_of(&cur, &loss)?;
        cur = project(base, &(&cur + (g.sign()? * cfg.step)?)?, cfg.eps)?;
    }
    Ok(cur.detach())
}

pub fn pgd_attack(x: &Tensor, y: &[usize], model: &Classifier, cfg: &PgdConfig) -> Result<PerturbationResult> {
    cfg.validate()?;
    let x = x.to_dtype(DType::F32)?;
    let adv = sign_ascent(&x, model, cfg, |l| Ok(ops::cross_entropy_per_example(l, y)?.sum_all()?))?;
    PerturbationResult::finish(adv, x, model, y, cfg.eps)
}

pub fn fgsm_attack(x: &Tensor, y: &[usize], model: &Classifier, eps: f64) -> Result<PerturbationResult> {
    pgd_attack(x, y, model, &PgdConfig::fgsm(eps))
}

/// Per-example `min(max_{j≠y} z_j − z_y, κ)`.
pub fn cw_margin(logits: &Tensor, y: &[usize], kappa: f64) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    let mut mask = vec![0f32; b * k];
    for (i, &t) in y.iter().enumerate() {
        mask[i * k + t] = 1e4;
    }
    let mask = Tensor::from_vec(mask, (b, k), &Device::Cpu)?.to_dtype(logits.dtype())?;
    let other = (logits - mask)?.max(D::Minus1)?;
    let truth = ops::pick(logits, y)?;
    Ok((other - truth)?.clamp(f64::NEG_INFINITY, kappa)?)
}

/// l-infinity margin attack: PGD on the hinged CW margin. Examples that are
/// already misclassified have zero gradient and do not move.
pub fn cw_margin_attack(x: &Tensor, y: &[usize], model: &Classifier, cfg: &PgdConfig) -> Result<PerturbationResult> {
    cfg.validate()?;
    let x = x.to_dtype(DType::F32)?;
    let adv = sign_ascent(&x, model, cfg, |l| Ok(cw_margin(l, y, 0.0)?.sum_all()?))?;
    PerturbationResult::finish(adv, x, model, y, cfg.eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InnerAttack {
    None,
    Pgd(PgdConfig),
    Cw(PgdConfig),
}

/// Draws `α` uniformly from the spec ranges, applies `h`, then runs a
/// pixel-space attack around the manipulated image.
pub fn hybrid_random_attr_attack(
    x: &Tensor,
    y: &[usize],
    manipulator: &Manipulator,
    inner: &InnerAttack,
    model: &Classifier,
    seed: u64,
) -> Result<PerturbationResult> {
    let b = x.dim(0)?;
    let x = x.to_dtype(DType::F32)?;
    let specs = manipulator.specs();
    let mut r = rng::stream(seed, "random-attribute");
    let vals: Vec<f64> = (0..b * specs.len())
        .map(|i| {
            let s = &specs[i % specs.len()];
            rand::Rng::random_range(&mut r, s.lo..=s.hi)
        })
        .collect();
    let alpha = Tensor::from_vec(vals, (b, specs.len()), &Device::Cpu)?.to_dtype(DType::F32)?;
    let x_attr = if specs.is_empty() { x.clone() } else { manipulator.apply(&x, &alpha, ApplyMode::Attack)?.detach() };
    let mut res = match inner {
        InnerAttack::None => PerturbationResult::finish(x_attr.clone(), x_attr, model, y, 0.0)?,
        InnerAttack::Pgd(c) => pgd_attack(&x_attr, y, model, c)?,
        InnerAttack::Cw(c) => cw_margin_attack(&x_attr, y, model, c)?,
    };
    res.alpha = Some(alpha);
    Ok(res)
}
