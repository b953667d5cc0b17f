//! The defense × attack accuracy matrix.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use super::config::ExperimentConfig;
use super::panels::{capture_panels, write_panels};
use super::store::{ExperimentRecord, ExperimentStore, RunMeta};
use super::workbench::{Keyed, Workbench};
use crate::attack::{evaluate_attack, AttackConfig, AttackContext, AttackSpec, EvalOutcome};
use crate::classifier::Classifier;
use crate::generator::NoiseGenerator;
use crate::manipulator::Manipulator;
use crate::rng::derive_seed;
use crate::{Error, Result};

/// Records arranged as a matrix. Cells average over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub defenses: Vec<String>,
    pub attacks: Vec<String>,
    pub records: Vec<ExperimentRecord>,
}

impl Grid {
    /// Rows and columns in order of first appearance; ablation settings
    /// become part of the column label.
    pub fn from_records(records: Vec<ExperimentRecord>) -> Self {
        let mut defenses: Vec<String> = Vec::new();
        let mut attacks: Vec<String> = Vec::new();
        for r in &records {
            if !defenses.contains(&r.defense) {
                defenses.push(r.defense.clone());
            }
            let a = r.attack_label();
            if !attacks.contains(&a) {
                attacks.push(a);
            }
        }
        Self { defenses, attacks, records }
    }

    pub fn cell(&self, defense: &str, attack: &str) -> Option<f64> {
        let hits: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.defense == defense && r.attack_label() == attack)
            .map(|r| r.accuracy)
            .collect();
        (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64)
    }

    /// Row-wise minimum over the attack columns.
    pub fn row_min(&self, defense: &str) -> Option<f64> {
        self.attacks.iter().filter_map(|a| self.cell(defense, a)).reduce(f64::min)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.records.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Number of test images each cell is evaluated on.
pub fn sample_count(cfg: &ExperimentConfig, available: usize) -> usize {
    if cfg.grid.full {
        available
    } else {
        cfg.grid.samples.min(available)
    }
}

/// Seed shared by every attack of a run, so ablated variants start from
/// the same `(α, z)` draws as the full attack.
pub fn attack_seed(seed: u64) -> u64 {
    derive_seed(seed, "attack")
}

/// Evaluates one attack against one classifier.
pub struct Cell<'a> {
    pub model: &'a Classifier,
    pub manipulator: Option<&'a Manipulator>,
    pub generator: Option<&'a NoiseGenerator>,
    pub attack: AttackConfig,
}

impl Cell<'_> {
    pub fn evaluate(&self, bench: &Workbench<'_>, spec: AttackSpec, seed: u64) -> Result<(EvalOutcome, f64)> {
        let cfg = bench.config();
        let config = AttackConfig { seed: attack_seed(seed), ..self.attack.clone() };
        let ctx = AttackContext {
            model: self.model,
            manipulator: self.manipulator,
            generator: self.generator,
            config: &config,
            pgd_iterations: cfg.grid.pgd_iterations,
        };
        let n = sample_count(cfg, bench.dataset.test.len());
        let start = Instant::now();
        let out = evaluate_attack(&ctx, spec, &bench.dataset.test, n, cfg.grid.batch_size, None)?;
        Ok((out, start.elapsed().as_secs_f64()))
    }
}

/// Components for attacking one defense: its classifier, the manipulator
/// over all configured attributes, and a generator trained against it when
/// any requested attack needs one.
pub struct Target {
    pub model: Keyed<Classifier>,
    pub manipulator: Option<Keyed<Manipulator>>,
    pub generator: Option<Keyed<NoiseGenerator>>,
}

pub fn prepare_target(
    bench: &Workbench<'_>,
    defense: crate::training::DefenseKind,
    attacks: &[AttackSpec],
    seed: u64,
) -> Result<Target> {
    let model = bench.classifier(defense, seed)?;
    let needs_man = attacks.iter().any(|a| a.needs_manipulator() || a.needs_generator());
    let manipulator = if needs_man && !bench.config().dataset.attributes.is_empty() {
        Some(bench.manipulator(None)?)
    } else {
        None
    };
    let generator = if attacks.iter().any(|a| a.needs_generator()) {
        let man = manipulator
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("generator attacks need configured attributes".into()))?;
        Some(bench.attack_generator(&model, man, seed)?)
    } else {
        None
    };
    Ok(Target { model, manipulator, generator })
}

#[derive(Debug, Clone)]
pub struct GridRun {
    pub grid: Grid,
    pub dir: PathBuf,
    /// Per-iteration accuracies of joint attacks, keyed by `defense/attack`.
    pub curves: BTreeMap<String, Vec<f64>>,
}

pub fn run_grid(cfg: &ExperimentConfig, store: &ExperimentStore) -> Result<GridRun> {
    cfg.validate()?;
    if cfg.grid.defenses.is_empty() || cfg.grid.attacks.is_empty() {
        return Err(Error::InvalidConfig("the grid needs at least one defense and one attack".into()));
    }
    let bench = Workbench::open(cfg, store, cfg.grid.train)?;
    let hash = cfg.hash();
    let mut records = Vec::new();
    let mut curves = BTreeMap::new();
    let mut panel_target: Option<Target> = None;
    for &seed in &cfg.seeds {
        for &defense in &cfg.grid.defenses {
            let target = prepare_target(&bench, defense, &cfg.grid.attacks, seed)?;
            let cell = Cell {
                model: &target.model.value,
                manipulator: target.manipulator.as_ref().map(|m| &m.value),
                generator: target.generator.as_ref().map(|g| &g.value),
                attack: cfg.attack.clone(),
            };
            for &attack in &cfg.grid.attacks {
                let (out, secs) = cell.evaluate(&bench, attack, seed)?;
                log::info!("{defense} × {attack} (seed {seed}): {:.4} in {secs:.1}s", out.accuracy);
                if out.accuracy_by_iteration.len() > 1 {
                    curves.insert(format!("{defense}/{attack}"), out.accuracy_by_iteration.clone());
                }
                records.push(ExperimentRecord::new(defense.name(), attack.name(), "", out.accuracy, &hash, seed, secs)?);
            }
            if panel_target.is_none() && target.generator.is_some() && target.manipulator.is_some() {
                panel_target = Some(target);
            }
        }
    }
    let dir = store.run_dir(cfg, "grid");
    if let Some(t) = &panel_target {
        if cfg.report.panel_examples > 0 {
            let (man, gen) = (t.manipulator.as_ref().expect("checked"), t.generator.as_ref().expect("checked"));
            let panels = capture_panels(&bench, &t.model.value, &man.value, &gen.value, cfg.seeds[0])?;
            write_panels(&dir, &panels)?;
        }
    }
    let meta = RunMeta { name: cfg.name.clone(), kind: "grid".into(), config_hash: hash };
    store.save_run(&dir, cfg, &meta, &records)?;
    super::store::write_atomic(&dir.join("curves.json"), serde_json::to_string_pretty(&curves)?.as_bytes())?;
    Ok(GridRun { grid: Grid::from_records(records), dir, curves })
}
