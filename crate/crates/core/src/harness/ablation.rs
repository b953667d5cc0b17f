//! Ablation suites: branch toggles, optimization toggles, noise-size and
//! attack-iteration sweeps, and attribute subsets.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::grid::{prepare_target, Cell};
use super::report::{ablation_table, fmt_setting};
use super::store::{write_atomic, ExperimentRecord, ExperimentStore, RunMeta};
use super::workbench::Workbench;
use crate::attack::{AttackConfig, AttackSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    PerturbationModel,
    ParameterOptimization,
    NoiseSize,
    AttackIteration,
    AttributeNumber,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] = [
        AblationKind::PerturbationModel,
        AblationKind::ParameterOptimization,
        AblationKind::NoiseSize,
        AblationKind::AttackIteration,
        AblationKind::AttributeNumber,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::PerturbationModel => "perturbation-model",
            AblationKind::ParameterOptimization => "parameter-optimization",
            AblationKind::NoiseSize => "noise-size",
            AblationKind::AttackIteration => "attack-iteration",
            AblationKind::AttributeNumber => "attribute-number",
        }
    }

    /// Sweeps are laid out with settings as columns; the rest with
    /// defenses as columns.
    pub fn is_sweep(self) -> bool {
        matches!(self, AblationKind::NoiseSize | AblationKind::AttackIteration)
    }
}

impl std::fmt::Display for AblationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub kind: AblationKind,
    pub records: Vec<ExperimentRecord>,
    pub table: String,
    pub dir: PathBuf,
}

impl AblationRun {
    pub fn accuracy(&self, defense: &str, attack: &str, setting: &str) -> Option<f64> {
        let hits: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.defense == defense && r.attack == attack && r.setting == setting)
            .map(|r| r.accuracy)
            .collect();
        (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64)
    }
}

fn fixed_attacks(kind: AblationKind) -> Vec<AttackSpec> {
    match kind {
        AblationKind::PerturbationModel => {
            vec![AttackSpec::Identity, AttackSpec::AttributeOnly, AttackSpec::NoiseOnly, AttackSpec::Spa]
        }
        AblationKind::ParameterOptimization => {
            vec![AttackSpec::SpaFixed, AttackSpec::SpaZ, AttackSpec::SpaAlpha, AttackSpec::Spa]
        }
        _ => Vec::new(),
    }
}

pub fn run_ablation(kind: AblationKind, cfg: &ExperimentConfig, store: &ExperimentStore) -> Result<AblationRun> {
    cfg.validate()?;
    if cfg.ablation.defenses.is_empty() {
        return Err(Error::InvalidConfig("the ablation needs at least one defense".into()));
    }
    if cfg.dataset.attributes.is_empty() {
        return Err(Error::InvalidConfig("ablations of the joint attack need at least one attribute".into()));
    }
    let bench = Workbench::open(cfg, store, cfg.grid.train)?;
    let hash = cfg.hash();
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        for &defense in &cfg.ablation.defenses {
            let mut push = |attack: &str, setting: String, acc: f64, secs: f64| -> Result<()> {
                log::info!("{kind}: {defense} × {attack} [{setting}] (seed {seed}): {acc:.4}");
                records.push(ExperimentRecord::new(defense.name(), attack, &setting, acc, &hash, seed, secs)?);
                Ok(())
            };
            match kind {
                AblationKind::PerturbationModel | AblationKind::ParameterOptimization => {
                    let attacks = fixed_attacks(kind);
                    let t = prepare_target(&bench, defense, &attacks, seed)?;
                    let cell = cell_for(&t, cfg.attack.clone());
                    for a in attacks {
                        let (out, secs) = cell.evaluate(&bench, a, seed)?;
                        push(a.name(), String::new(), out.accuracy, secs)?;
                    }
                }
                AblationKind::NoiseSize => {
                    let attacks = &cfg.ablation.noise_attacks;
                    let t = prepare_target(&bench, defense, attacks, seed)?;
                    for eps in cfg.eps_sweep() {
                        let cell = cell_for(&t, cfg.attack.with_eps(eps));
                        for &a in attacks {
                            let (out, secs) = cell.evaluate(&bench, a, seed)?;
                            push(a.name(), format!("eps={}", fmt_setting(eps)), out.accuracy, secs)?;
                        }
                    }
                }
                AblationKind::AttackIteration => {
                    let sweep = &cfg.ablation.iteration_sweep;
                    let max = sweep.iter().copied().max().unwrap_or(0);
                    let t = prepare_target(&bench, defense, &[AttackSpec::Spa], seed)?;
                    let cell = cell_for(&t, AttackConfig { iterations: max, ..cfg.attack.clone() });
                    let (out, secs) = cell.evaluate(&bench, AttackSpec::Spa, seed)?;
                    for &i in sweep {
                        let acc = *out.accuracy_by_iteration.get(i).ok_or_else(|| {
                            Error::Invariant(format!("no accuracy recorded for iteration {i}"))
                        })?;
                        push(AttackSpec::Spa.name(), format!("iterations={i}"), acc, secs)?;
                    }
                }
                AblationKind::AttributeNumber => {
                    if cfg.ablation.attribute_sets.is_empty() {
                        return Err(Error::InvalidConfig("attribute-number ablation needs attribute_sets".into()));
                    }
                    let model = bench.classifier(defense, seed)?;
                    for set in &cfg.ablation.attribute_sets {
                        let start = Instant::now();
                        let man = bench.manipulator(Some(set))?;
                        let gen = bench.attack_generator(&model, &man, seed)?;
                        log::debug!("components for {set:?} ready in {:.1}s", start.elapsed().as_secs_f64());
                        let cell = Cell {
                            model: &model.value,
                            manipulator: Some(&man.value),
                            generator: Some(&gen.value),
                            attack: cfg.attack.clone(),
                        };
                        for a in [AttackSpec::Spa, AttackSpec::PgdAttr] {
                            let (out, secs) = cell.evaluate(&bench, a, seed)?;
                            push(a.name(), format!("attributes={}", set.join("+")), out.accuracy, secs)?;
                        }
                    }
                }
            }
        }
    }
    let dir = store.run_dir(cfg, kind.name());
    let meta = RunMeta { name: cfg.name.clone(), kind: kind.name().into(), config_hash: hash };
    store.save_run(&dir, cfg, &meta, &records)?;
    let table = ablation_table(kind, &records);
    write_atomic(&dir.join("table.md"), table.as_bytes())?;
    Ok(AblationRun { kind, records, table, dir })
}

fn cell_for(t: &super::grid::Target, attack: AttackConfig) -> Cell<'_> {
    Cell {
        model: &t.model.value,
        manipulator: t.manipulator.as_ref().map(|m| &m.value),
        generator: t.generator.as_ref().map(|g| &g.value),
        attack,
    }
}
