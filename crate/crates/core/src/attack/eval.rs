use std::io::Write;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::{
    cw_margin_attack, hybrid_random_attr_attack, identity_attack, pgd_attack, spa_attack_with, AttackConfig,
    InnerAttack, PerturbationResult, PgdConfig, SpaToggles,
};
use crate::classifier::Classifier;
use crate::data::Split;
use crate::generator::NoiseGenerator;
use crate::manipulator::Manipulator;
use crate::nn::ops;
use crate::rng;
use crate::{Error, Result};

/// Every attack the harness can put in a grid column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackSpec {
    /// Clean inputs.
    Identity,
    Fgsm,
    Pgd,
    Cw,
    /// Joint attack without the noise branch.
    AttributeOnly,
    /// Joint attack without the manipulator branch.
    NoiseOnly,
    Spa,
    /// Joint attack at its initial `(α, z)`.
    SpaFixed,
    /// Joint attack optimizing only `α`.
    SpaAlpha,
    /// Joint attack optimizing only `z`.
    SpaZ,
    /// Random attribute draw only.
    RandAttr,
    PgdAttr,
    CwAttr,
}

impl AttackSpec {
    pub const ALL: [AttackSpec; 13] = [
        AttackSpec::Identity,
        AttackSpec::Fgsm,
        AttackSpec::Pgd,
        AttackSpec::Cw,
        AttackSpec::AttributeOnly,
        AttackSpec::NoiseOnly,
        AttackSpec::Spa,
        AttackSpec::SpaFixed,
        AttackSpec::SpaAlpha,
        AttackSpec::SpaZ,
        AttackSpec::RandAttr,
        AttackSpec::PgdAttr,
        AttackSpec::CwAttr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackSpec::Identity => "identity",
            AttackSpec::Fgsm => "fgsm",
            AttackSpec::Pgd => "pgd",
            AttackSpec::Cw => "cw",
            AttackSpec::AttributeOnly => "attribute-only",
            AttackSpec::NoiseOnly => "noise-only",
            AttackSpec::Spa => "spa",
            AttackSpec::SpaFixed => "spa-fixed",
            AttackSpec::SpaAlpha => "spa-alpha",
            AttackSpec::SpaZ => "spa-z",
            AttackSpec::RandAttr => "rand-attr",
            AttackSpec::PgdAttr => "pgd-attr",
            AttackSpec::CwAttr => "cw-attr",
        }
    }

    pub fn needs_manipulator(self) -> bool {
        matches!(
            self,
            AttackSpec::AttributeOnly
                | AttackSpec::Spa
                | AttackSpec::SpaFixed
                | AttackSpec::SpaAlpha
                | AttackSpec::SpaZ
                | AttackSpec::RandAttr
                | AttackSpec::PgdAttr
                | AttackSpec::CwAttr
        )
    }

    pub fn needs_generator(self) -> bool {
        matches!(self, AttackSpec::NoiseOnly | AttackSpec::Spa | AttackSpec::SpaFixed | AttackSpec::SpaAlpha | AttackSpec::SpaZ)
    }
}

impl std::fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackSpec::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown attack `{s}`")))
    }
}

/// Components and settings shared by every attack in an evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AttackContext<'a> {
    pub model: &'a Classifier,
    pub manipulator: Option<&'a Manipulator>,
    pub generator: Option<&'a NoiseGenerator>,
    pub config: &'a AttackConfig,
    /// Iterations of the PGD and CW baselines.
    pub pgd_iterations: usize,
}

impl AttackContext<'_> {
    fn pgd(&self, seed: u64) -> PgdConfig {
        PgdConfig::standard(self.config.eps, self.pgd_iterations, seed)
    }

    pub fn run(&self, spec: AttackSpec, x: &candle_core::Tensor, y: &[usize], seed: u64) -> Result<PerturbationResult> {
        let cfg = AttackConfig { seed, ..self.config.clone() };
        let man = || self.manipulator.ok_or_else(|| Error::NotReady(format!("attack `{spec}` needs a manipulator")));
        if spec.needs_generator() && self.generator.is_none() {
            return Err(Error::NotReady(format!("attack `{spec}` needs a noise generator")));
        }
        let joint = |t: SpaToggles| spa_attack_with(x, y, self.manipulator, self.generator, self.model, &cfg, t);
        let full = SpaToggles::FULL;
        match spec {
            AttackSpec::Identity => identity_attack(x, y, self.model),
            AttackSpec::Fgsm => super::fgsm_attack(x, y, self.model, cfg.eps),
            AttackSpec::Pgd => pgd_attack(x, y, self.model, &self.pgd(seed)),
            AttackSpec::Cw => cw_margin_attack(x, y, self.model, &PgdConfig { random_start: false, ..self.pgd(seed) }),
            AttackSpec::AttributeOnly => {
                man()?;
                joint(SpaToggles::ATTRIBUTE_ONLY)
            }
            AttackSpec::NoiseOnly => joint(SpaToggles::NOISE_ONLY),
            AttackSpec::Spa => {
                man()?;
                joint(full)
            }
            AttackSpec::SpaFixed => {
                man()?;
                joint(SpaToggles { optimize_alpha: false, optimize_z: false, ..full })
            }
            AttackSpec::SpaAlpha => {
                man()?;
                joint(SpaToggles { optimize_z: false, ..full })
            }
            AttackSpec::SpaZ => {
                man()?;
                joint(SpaToggles { optimize_alpha: false, ..full })
            }
            AttackSpec::RandAttr => hybrid_random_attr_attack(x, y, man()?, &InnerAttack::None, self.model, seed),
            AttackSpec::PgdAttr => hybrid_random_attr_attack(x, y, man()?, &InnerAttack::Pgd(self.pgd(seed)), self.model, seed),
            AttackSpec::CwAttr => hybrid_random_attr_attack(
                x,
                y,
                man()?,
                &InnerAttack::Cw(PgdConfig { random_start: false, ..self.pgd(seed) }),
                self.model,
                seed,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: usize,
    pub success: bool,
    pub final_loss: f64,
    pub alpha: Option<Vec<f64>>,
    pub delta_linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub attack: AttackSpec,
    pub accuracy: f64,
    /// Accuracy an attack with `I = i` outer iterations would reach, for
    /// `i = 0..=I` (joint attacks only; a single entry otherwise).
    pub accuracy_by_iteration: Vec<f64>,
    pub records: Vec<ExampleRecord>,
}

/// Attacks the first `n` examples of a split in batches and reports robust
/// accuracy. Each batch uses its own seed stream derived from the attack
/// seed and the batch position, so results do not depend on scheduling.
pub fn evaluate_attack(
    ctx: &AttackContext<'_>,
    spec: AttackSpec,
    split: &Split,
    n: usize,
    batch_size: usize,
    out: Option<&Path>,
) -> Result<EvalOutcome> {
    if n > split.len() {
        return Err(Error::Precondition(format!("asked for {n} examples but the split has {}", split.len())));
    }
    if n == 0 {
        return Err(Error::Empty("attack evaluation set".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(n);
    let mut correct_by_iter: Vec<usize> = Vec::new();
    for (k, chunk) in idx.chunks(batch_size.max(1)).enumerate() {
        let batch = split.batch(chunk, DType::F32)?;
        let seed = rng::derive_seed(ctx.config.seed, &format!("attack-batch-{k}"));
        let r = ctx.run(spec, &batch.images, &batch.labels, seed)?;
        if correct_by_iter.is_empty() {
            correct_by_iter = vec![0; r.correct_at.len()];
        }
        for (acc, row) in correct_by_iter.iter_mut().zip(&r.correct_at) {
            *acc += row.iter().filter(|c| **c).count();
        }
        let linf = r.delta_linf()?;
        let alpha = match &r.alpha {
            Some(a) if a.dim(1)? > 0 => {
                let v = ops::to_vec_f64(a)?;
                let w = a.dim(1)?;
                Some(v.chunks(w).map(<[f64]>::to_vec).collect::<Vec<_>>())
            }
            _ => None,
        };
        for (j, &id) in chunk.iter().enumerate() {
            records.push(ExampleRecord {
                id,
                success: r.success[j],
                final_loss: r.final_loss[j],
                alpha: alpha.as_ref().map(|a| a[j].clone()),
                delta_linf: linf[j],
            });
        }
    }
    let correct = records.iter().filter(|r| !r.success).count();
    let outcome = EvalOutcome {
        attack: spec,
        accuracy: correct as f64 / n as f64,
        accuracy_by_iteration: correct_by_iter.iter().map(|&c| c as f64 / n as f64).collect(),
        records,
    };
    if let Some(path) = out {
        write_records(path, &outcome.records)?;
    }
    Ok(outcome)
}

/// Writes records as JSON lines via a temporary file and rename.
pub fn write_records(path: &Path, records: &[ExampleRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
    }
    f.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
