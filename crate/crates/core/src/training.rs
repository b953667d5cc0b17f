//! Defense-side training loops: joint attribute-and-noise adversarial
//! training and the baseline defenses it is compared with.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::attack::{self, audit, AttackConfig, AlphaInit, PgdConfig, SpaToggles};
use crate::classifier::{evaluate, BatchStream, Classifier, Mode};
use crate::data::{AttributeSpec, DatasetHandle};
use crate::generator::{diversity_loss, generate_trajectory, NoiseBudget, NoiseGenerator, NoiseTrajectory};
use crate::manipulator::{ApplyMode, Manipulator};
use crate::nn::{ops, Adam, AdamConfig, Direction};
use crate::rng::{self, SeededRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseKind {
    Plain,
    Pgd,
    /// PGD training around randomly drawn attribute changes.
    PgdAttr,
    AttributeAugmented,
    GeneratorOnly,
    Spa,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 6] = [
        DefenseKind::Plain,
        DefenseKind::Pgd,
        DefenseKind::PgdAttr,
        DefenseKind::AttributeAugmented,
        DefenseKind::GeneratorOnly,
        DefenseKind::Spa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::Plain => "plain",
            DefenseKind::Pgd => "pgd",
            DefenseKind::PgdAttr => "pgd-attr",
            DefenseKind::AttributeAugmented => "attribute-augmented",
            DefenseKind::GeneratorOnly => "generator-only",
            DefenseKind::Spa => "spa",
        }
    }

    pub fn needs_manipulator(self) -> bool {
        matches!(self, DefenseKind::PgdAttr | DefenseKind::AttributeAugmented | DefenseKind::Spa)
    }
}

impl std::fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DefenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DefenseKind::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown defense `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub iterations: usize,
    pub batch_size: usize,
    /// Diversity-loss weight.
    pub lambda: f64,
    pub optimizer: AdamConfig,
    pub generator_lr: f64,
    /// Inner joint attack; its `iterations` is the per-batch `I`.
    pub attack: AttackConfig,
    /// PGD steps for the PGD-based defenses.
    pub pgd_iterations: usize,
    /// Outer iterations of the attribute-only inner attack.
    pub augment_iterations: usize,
    pub seed: u64,
    /// Validation probe interval (0 disables).
    pub probe_every: usize,
    pub probe_size: usize,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            kind: DefenseKind::Spa,
            iterations: 1000,
            batch_size: 100,
            lambda: 0.1,
            optimizer: AdamConfig::default(),
            generator_lr: 0.001,
            attack: AttackConfig::default(),
            pgd_iterations: 10,
            augment_iterations: 5,
            seed: 0,
            probe_every: 0,
            probe_size: 200,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("λ must be non-negative, got {}", self.lambda)));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("training budget and batch size must be positive".into()));
        }
        if !(self.generator_lr > 0.0) {
            return Err(Error::InvalidConfig("generator learning rate must be positive".into()));
        }
        self.optimizer.validate()?;
        self.attack.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub clean: f64,
    pub attribute: Option<f64>,
    pub adversarial: Option<f64>,
    pub spa: Option<f64>,
    pub generator_cls: Option<f64>,
    pub diversity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub iteration: usize,
    pub clean_accuracy: f64,
    pub pgd_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
    pub probes: Vec<Probe>,
    pub wall_clock_secs: f64,
}

impl TrainingLog {
    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| {
            [Some(e.clean), e.attribute, e.adversarial, e.spa, e.generator_cls, e.diversity]
                .into_iter()
                .flatten()
                .all(f64::is_finite)
        })
    }

    /// One JSON object per entry, then one per probe.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
        for e in &self.entries {
            serde_json::to_writer(&mut f, &serde_json::json!({ "type": "step", "data": e }))?;
            f.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
        }
        for p in &self.probes {
            serde_json::to_writer(&mut f, &serde_json::json!({ "type": "probe", "data": p }))?;
            f.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
        }
        serde_json::to_writer(&mut f, &serde_json::json!({ "type": "summary", "wall_clock_secs": self.wall_clock_secs }))?;
        f.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
        f.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

fn check_finite(v: f64, what: &str, it: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} at iteration {it}")))
    }
}

/// `(b, A)` attribute values drawn uniformly from each spec's range.
pub fn sample_uniform_attributes(specs: &[AttributeSpec], b: usize, rng: &mut SeededRng) -> Result<Tensor> {
    let vals: Vec<f32> = (0..b * specs.len())
        .map(|i| {
            let s = &specs[i % specs.len()];
            rand::Rng::random_range(rng, s.lo..=s.hi) as f32
        })
        .collect();
    Ok(Tensor::from_vec(vals, (b, specs.len()), &Device::Cpu)?)
}

/// Stacks a batch with itself: both halves share `x`, `α` and `y`, and
/// differ only in the diversity variable.
pub fn duplicate_batch(
    x: &Tensor,
    alpha: &Tensor,
    y: &[usize],
    z1: &Tensor,
    z2: &Tensor,
) -> Result<(Tensor, Tensor, Vec<usize>, Tensor)> {
    let x2 = Tensor::cat(&[x, x], 0)?;
    let a2 = Tensor::cat(&[alpha, alpha], 0)?;
    let y2 = [y, y].concat();
    let z = Tensor::cat(&[z1, z2], 0)?;
    Ok((x2, a2, y2, z))
}

fn audit_trajectory(tr: &NoiseTrajectory, eps: f64) -> Result<()> {
    for s in &tr.steps {
        audit::enforce_ball(&tr.base, &s.detach(), eps)?;
    }
    Ok(())
}

struct GeneratorStep {
    trajectory: NoiseTrajectory,
    cls: f64,
    diversity: f64,
}

/// One ascent step of the generator on `(1/T) Σ_t L(x̃^(t)) + λ L_div` for a
/// duplicated batch with random attributes. `extra` is added to the
/// classification term (the joint-attack loss in full training, whose value
/// does not depend on the generator parameters being updated here).
#[allow(clippy::too_many_arguments)]
fn generator_step(
    x: &Tensor,
    y: &[usize],
    manipulator: &Manipulator,
    generator: &NoiseGenerator,
    model: &Classifier,
    opt: &mut Adam,
    budget: &NoiseBudget,
    lambda: f64,
    rng: &mut SeededRng,
) -> Result<GeneratorStep> {
    let b = x.dim(0)?;
    let specs = manipulator.specs();
    let alpha = if specs.is_empty() {
        Tensor::zeros((b, 0), DType::F32, &Device::Cpu)?
    } else {
        sample_uniform_attributes(specs, b, rng)?
    };
    let z1 = generator.sample_z(rng, b)?;
    let z2 = generator.sample_z(rng, b)?;
    let (x2, a2, y2, z) = duplicate_batch(x, &alpha, y, &z1, &z2)?;
    let x_attr = if specs.is_empty() { x2 } else { manipulator.apply(&x2, &a2, ApplyMode::Train)? };
    let tr = generate_trajectory(generator, &x_attr, &z, &y2, model, budget)?;
    audit_trajectory(&tr, budget.eps)?;
    let mut cls: Option<Tensor> = None;
    for s in &tr.steps {
        let l = ops::logits_cross_entropy(&model.logits(s, Mode::Eval)?, &y2)?;
        cls = Some(match cls {
            None => l,
            Some(c) => (c + l)?,
        });
    }
    let cls = (cls.expect("T ≥ 1") / tr.steps.len() as f64)?;
    let (h1, h2) = tr.split_halves()?;
    let div = diversity_loss(&h1, &h2)?;
    let objective = (&cls + (&div * lambda)?)?;
    opt.step(&objective.backward()?)?;
    Ok(GeneratorStep { cls: ops::scalar(&cls)?, diversity: ops::scalar(&div)?, trajectory: tr })
}

fn probe(model: &Classifier, dataset: &DatasetHandle, cfg: &DefenseConfig, iteration: usize, log: &mut TrainingLog) -> Result<()> {
    if cfg.probe_every == 0 || iteration % cfg.probe_every != 0 || dataset.val.is_empty() {
        return Ok(());
    }
    let n = cfg.probe_size.min(dataset.val.len());
    let clean = evaluate(model, &dataset.val, Some(n))?;
    let b = dataset.val.batch(&(0..n).collect::<Vec<_>>(), DType::F32)?;
    let r = attack::pgd_attack(&b.images, &b.labels, model, &PgdConfig::standard(cfg.attack.eps, 10, cfg.seed))?;
    log.probes.push(Probe { iteration, clean_accuracy: clean, pgd_accuracy: r.accuracy() });
    log::info!("iteration {iteration}: clean {clean:.4}, pgd {:.4}", r.accuracy());
    Ok(())
}

/// Joint adversarial training. Per batch: a joint-attack sample from the
/// current generator; a duplicated batch with fresh random attributes and
/// two diversity draws runs the noise recursion; the generator ascends the
/// recursion loss plus `λ L_div`; the classifier descends the clean, last
/// recursion iterate and joint-attack losses.
pub fn spa_train(
    dataset: &DatasetHandle,
    manipulator: &Manipulator,
    model: &Classifier,
    generator: &NoiseGenerator,
    cfg: &DefenseConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    let start = Instant::now();
    let mut log = TrainingLog::default();
    let mut theta = Adam::new(model.trainable(), cfg.optimizer, Direction::Descend)?;
    let mut phi = Adam::new(generator.params().trainable(), AdamConfig::with_lr(cfg.generator_lr), Direction::Ascend)?;
    let mut stream = BatchStream::new(&dataset.train, cfg.batch_size, rng::derive_seed(cfg.seed, "batches"));
    let mut rng = rng::stream(cfg.seed, "spa-train");
    let budget = cfg.attack.budget();
    for it in 0..cfg.iterations {
        let batch = stream.next_batch(DType::F32)?;
        let (x, y) = (&batch.images, &batch.labels);
        let attack_cfg = AttackConfig { seed: rng::derive_seed(cfg.seed, &format!("inner-attack-{it}")), ..cfg.attack.clone() };
        let toggles = if manipulator.specs().is_empty() { SpaToggles::NOISE_ONLY } else { SpaToggles::FULL };
        let x_spa = attack::spa_attack_with(x, y, Some(manipulator), Some(generator), model, &attack_cfg, toggles)?.x_adv;

        let g = generator_step(x, y, manipulator, generator, model, &mut phi, &budget, cfg.lambda, &mut rng)?;
        let x_last = g.trajectory.last().detach();

        let logits = model.logits(&Tensor::cat(&[x, &x_last, &x_spa], 0)?, Mode::Train)?;
        let b = y.len();
        let l_clean = ops::logits_cross_entropy(&logits.narrow(0, 0, b)?, y)?;
        let l_traj = ops::logits_cross_entropy(&logits.narrow(0, b, 2 * b)?, &[y.as_slice(), y.as_slice()].concat())?;
        let l_spa = ops::logits_cross_entropy(&logits.narrow(0, 3 * b, b)?, y)?;
        let total = ((&l_clean + &l_traj)? + &l_spa)?;
        check_finite(ops::scalar(&total)?, "joint training loss", it)?;
        theta.step(&total.backward()?)?;
        log.entries.push(LogEntry {
            iteration: it,
            clean: ops::scalar(&l_clean)?,
            attribute: None,
            adversarial: Some(ops::scalar(&l_traj)?),
            spa: Some(ops::scalar(&l_spa)?),
            generator_cls: Some(check_finite(g.cls, "generator loss", it)?),
            diversity: Some(check_finite(g.diversity, "diversity loss", it)?),
        });
        probe(model, dataset, cfg, it + 1, &mut log)?;
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Joint training with the manipulator branch removed.
pub fn generator_only_adversarial_train(
    dataset: &DatasetHandle,
    model: &Classifier,
    generator: &NoiseGenerator,
    cfg: &DefenseConfig,
) -> Result<TrainingLog> {
    spa_train(dataset, &Manipulator::Identity(Vec::new()), model, generator, cfg)
}

/// Adversarial training on PGD samples, optionally around random attribute
/// changes.
pub fn pgd_adversarial_train(
    dataset: &DatasetHandle,
    model: &Classifier,
    manipulator: Option<&Manipulator>,
    cfg: &DefenseConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    let start = Instant::now();
    let mut log = TrainingLog::default();
    let mut theta = Adam::new(model.trainable(), cfg.optimizer, Direction::Descend)?;
    let mut stream = BatchStream::new(&dataset.train, cfg.batch_size, rng::derive_seed(cfg.seed, "batches"));
    let mut rng = rng::stream(cfg.seed, "pgd-train");
    for it in 0..cfg.iterations {
        let batch = stream.next_batch(DType::F32)?;
        let (x, y) = (&batch.images, &batch.labels);
        let base = match manipulator.filter(|m| !m.specs().is_empty()) {
            Some(m) => {
                let a = sample_uniform_attributes(m.specs(), y.len(), &mut rng)?;
                m.apply(x, &a, ApplyMode::Train)?.detach()
            }
            None => x.clone(),
        };
        let pgd = PgdConfig::standard(cfg.attack.eps, cfg.pgd_iterations, rng::derive_seed(cfg.seed, &format!("pgd-{it}")));
        let x_adv = attack::pgd_attack(&base, y, model, &pgd)?.x_adv;
        let loss = ops::logits_cross_entropy(&model.logits(&x_adv, Mode::Train)?, y)?;
        let l = check_finite(ops::scalar(&loss)?, "PGD training loss", it)?;
        theta.step(&loss.backward()?)?;
        log.entries.push(LogEntry { iteration: it, clean: f64::NAN, adversarial: Some(l), ..LogEntry::default() });
        if let Some(e) = log.entries.last_mut() {
            e.clean = l;
        }
        probe(model, dataset, cfg, it + 1, &mut log)?;
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Training on clean images plus attribute changes chosen by a short
/// attribute-only attack started from uniformly random attributes.
pub fn attribute_augmented_train(
    dataset: &DatasetHandle,
    manipulator: &Manipulator,
    model: &Classifier,
    cfg: &DefenseConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    let start = Instant::now();
    let mut log = TrainingLog::default();
    let mut theta = Adam::new(model.trainable(), cfg.optimizer, Direction::Descend)?;
    let mut stream = BatchStream::new(&dataset.train, cfg.batch_size, rng::derive_seed(cfg.seed, "batches"));
    for it in 0..cfg.iterations {
        let batch = stream.next_batch(DType::F32)?;
        let (x, y) = (&batch.images, &batch.labels);
        let inner = AttackConfig {
            iterations: cfg.augment_iterations,
            alpha_init: AlphaInit::Uniform,
            seed: rng::derive_seed(cfg.seed, &format!("augment-{it}")),
            ..cfg.attack.clone()
        };
        let x_attr = attack::attribute_only_attack(x, y, manipulator, model, &inner)?.x_adv;
        let logits = model.logits(&Tensor::cat(&[x, &x_attr], 0)?, Mode::Train)?;
        let b = y.len();
        let l_clean = ops::logits_cross_entropy(&logits.narrow(0, 0, b)?, y)?;
        let l_attr = ops::logits_cross_entropy(&logits.narrow(0, b, b)?, y)?;
        let total = (&l_clean + &l_attr)?;
        check_finite(ops::scalar(&total)?, "attribute training loss", it)?;
        theta.step(&total.backward()?)?;
        log.entries.push(LogEntry {
            iteration: it,
            clean: ops::scalar(&l_clean)?,
            attribute: Some(ops::scalar(&l_attr)?),
            ..LogEntry::default()
        });
        probe(model, dataset, cfg, it + 1, &mut log)?;
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub eps: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self { iterations: 500, batch_size: 100, lr: 0.001, lambda: 0.1, eps: 0.1, steps: 4, seed: 0 }
    }
}

/// Trains an attack generator against a frozen classifier: the generator
/// half of joint training, with random attributes from the manipulator.
pub fn train_attack_generator(
    dataset: &DatasetHandle,
    manipulator: &Manipulator,
    model: &Classifier,
    generator: &NoiseGenerator,
    cfg: &GeneratorTrainConfig,
) -> Result<TrainingLog> {
    if !(cfg.lambda >= 0.0 && cfg.lr > 0.0) || cfg.iterations == 0 {
        return Err(Error::InvalidConfig("generator training needs λ ≥ 0, lr > 0 and a positive budget".into()));
    }
    let start = Instant::now();
    let mut log = TrainingLog::default();
    let mut phi = Adam::new(generator.params().trainable(), AdamConfig::with_lr(cfg.lr), Direction::Ascend)?;
    let mut stream = BatchStream::new(&dataset.train, cfg.batch_size, rng::derive_seed(cfg.seed, "generator-batches"));
    let mut rng = rng::stream(cfg.seed, "generator-train");
    let budget = NoiseBudget::even(cfg.eps, cfg.steps);
    for it in 0..cfg.iterations {
        let batch = stream.next_batch(DType::F32)?;
        let g = generator_step(&batch.images, &batch.labels, manipulator, generator, model, &mut phi, &budget, cfg.lambda, &mut rng)?;
        log.entries.push(LogEntry {
            iteration: it,
            clean: f64::NAN,
            generator_cls: Some(check_finite(g.cls, "generator loss", it)?),
            diversity: Some(check_finite(g.diversity, "diversity loss", it)?),
            ..LogEntry::default()
        });
        if let Some(e) = log.entries.last_mut() {
            e.clean = g.cls;
        }
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Runs the defense selected by `cfg.kind`. The generator is required for
/// the generator-based defenses and the manipulator for the attribute-based
/// ones.
pub fn train_defense(
    dataset: &DatasetHandle,
    manipulator: Option<&Manipulator>,
    model: &Classifier,
    generator: Option<&NoiseGenerator>,
    cfg: &DefenseConfig,
) -> Result<TrainingLog> {
    let man = || manipulator.ok_or_else(|| Error::NotReady(format!("defense `{}` needs a manipulator", cfg.kind)));
    let gen = || generator.ok_or_else(|| Error::NotReady(format!("defense `{}` needs a generator", cfg.kind)));
    match cfg.kind {
        DefenseKind::Plain => {
            let tc = crate::classifier::TrainConfig {
                iterations: cfg.iterations,
                batch_size: cfg.batch_size,
                optimizer: cfg.optimizer,
                seed: cfg.seed,
                ..Default::default()
            };
            let start = Instant::now();
            let st = crate::classifier::train_plain(model, dataset, &tc)?;
            Ok(TrainingLog {
                entries: st
                    .losses
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| LogEntry { iteration: i, clean: l, ..LogEntry::default() })
                    .collect(),
                probes: Vec::new(),
                wall_clock_secs: start.elapsed().as_secs_f64(),
            })
        }
        DefenseKind::Pgd => pgd_adversarial_train(dataset, model, None, cfg),
        DefenseKind::PgdAttr => pgd_adversarial_train(dataset, model, Some(man()?), cfg),
        DefenseKind::AttributeAugmented => attribute_augmented_train(dataset, man()?, model, cfg),
        DefenseKind::GeneratorOnly => generator_only_adversarial_train(dataset, model, gen()?, cfg),
        DefenseKind::Spa => spa_train(dataset, man()?, model, gen()?, cfg),
    }
}
