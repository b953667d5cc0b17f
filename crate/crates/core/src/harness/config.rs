//! Experiment configuration: TOML files with an `include` list of shared
//! defaults, deep-merged, then deserialized into [`ExperimentConfig`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{AttackConfig, AttackSpec};
use crate::classifier::{Profile, TrainConfig};
use crate::data::{AttributeSpec, LoadOptions};
use crate::manipulator::geometric::PredictorConfig;
use crate::manipulator::object::ObjectManipulatorConfig;
use crate::nn::AdamConfig;
use crate::training::{DefenseConfig, DefenseKind, GeneratorTrainConfig};
use crate::{Error, Result};

/// Environment variable naming the experiment root directory.
pub const EXPERIMENT_ROOT_ENV: &str = "SPA_EXPERIMENT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub seed: u64,
    pub attributes: Vec<AttributeSpec>,
    /// Defaults to the data root discovered by [`crate::data::default_root`].
    pub root: Option<PathBuf>,
    pub options: LoadOptions,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: "fashion-mnist".into(),
            seed: 0,
            attributes: vec![AttributeSpec::rotation()],
            root: None,
            options: LoadOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub profile: Profile,
    pub blocks_per_stage: usize,
    pub train: TrainConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            profile: Profile::SmallCnn,
            blocks_per_stage: 3,
            train: TrainConfig { iterations: 2000, ..TrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipulatorConfig {
    /// Attach a trained attribute predictor to geometric manipulators.
    pub train_predictor: bool,
    pub predictor: PredictorConfig,
    pub object: ObjectManipulatorConfig,
}

/// Attack-generator architecture and training budget. The noise budget it
/// is trained for comes from the attack section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub width: usize,
    pub z_dim: usize,
    pub grad_gain: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { width: 16, z_dim: 8, grad_gain: 0.0, iterations: 300, batch_size: 50, lr: 0.001, lambda: 0.1 }
    }
}

impl GeneratorConfig {
    pub fn train_config(&self, attack: &AttackConfig, seed: u64) -> GeneratorTrainConfig {
        GeneratorTrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            lr: self.lr,
            lambda: self.lambda,
            eps: attack.eps,
            steps: attack.steps,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSettings {
    pub iterations: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub optimizer: AdamConfig,
    pub generator_lr: f64,
    /// Outer iterations of the joint attack run inside training.
    pub inner_iterations: usize,
    pub pgd_iterations: usize,
    pub augment_iterations: usize,
    /// Start every defense from the trained plain classifier.
    pub warm_start: bool,
    pub probe_every: usize,
}

impl Default for DefenseSettings {
    fn default() -> Self {
        let d = DefenseConfig::default();
        Self {
            iterations: 600,
            batch_size: 50,
            lambda: d.lambda,
            optimizer: d.optimizer,
            generator_lr: d.generator_lr,
            inner_iterations: 2,
            pgd_iterations: d.pgd_iterations,
            augment_iterations: d.augment_iterations,
            warm_start: true,
            probe_every: 0,
        }
    }
}

impl DefenseSettings {
    pub fn defense_config(&self, kind: DefenseKind, attack: &AttackConfig, seed: u64) -> DefenseConfig {
        DefenseConfig {
            kind,
            iterations: self.iterations,
            batch_size: self.batch_size,
            lambda: self.lambda,
            optimizer: self.optimizer,
            generator_lr: self.generator_lr,
            attack: AttackConfig { iterations: self.inner_iterations, ..attack.clone() },
            pgd_iterations: self.pgd_iterations,
            augment_iterations: self.augment_iterations,
            seed,
            probe_every: self.probe_every,
            ..DefenseConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub defenses: Vec<DefenseKind>,
    pub attacks: Vec<AttackSpec>,
    /// Test images per cell, ignored when `full` is set.
    pub samples: usize,
    pub full: bool,
    pub batch_size: usize,
    /// Iterations of the PGD and CW baselines.
    pub pgd_iterations: usize,
    /// Train missing classifiers and generators instead of failing.
    pub train: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            defenses: vec![DefenseKind::Plain],
            attacks: vec![AttackSpec::Identity],
            samples: 2000,
            full: false,
            batch_size: 100,
            pgd_iterations: 10,
            train: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub defenses: Vec<DefenseKind>,
    /// Defaults to `{0, ε/2, ε, 3ε/2}` around the attack budget.
    pub eps_sweep: Option<Vec<f64>>,
    pub iteration_sweep: Vec<usize>,
    /// Attribute subsets by name for the attribute-number study.
    pub attribute_sets: Vec<Vec<String>>,
    /// Attacks compared across the noise-size sweep.
    pub noise_attacks: Vec<AttackSpec>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            defenses: vec![DefenseKind::Plain],
            eps_sweep: None,
            iteration_sweep: vec![0, 5, 10, 20, 30, 50],
            attribute_sets: Vec::new(),
            noise_attacks: vec![AttackSpec::Pgd, AttackSpec::Spa],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Gain applied to noise maps around mid-gray.
    pub amplification: f64,
    pub panel_examples: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { amplification: 30.0, panel_examples: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub classifier: ClassifierConfig,
    pub manipulator: ManipulatorConfig,
    pub generator: GeneratorConfig,
    pub defense: DefenseSettings,
    pub attack: AttackConfig,
    pub grid: GridConfig,
    pub ablation: AblationConfig,
    pub report: ReportConfig,
    /// Run directory; defaults to `<root>/runs/<name>-<hash>`.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![0],
            dataset: DatasetConfig::default(),
            classifier: ClassifierConfig::default(),
            manipulator: ManipulatorConfig::default(),
            generator: GeneratorConfig::default(),
            defense: DefenseSettings::default(),
            attack: AttackConfig::default(),
            grid: GridConfig::default(),
            ablation: AblationConfig::default(),
            report: ReportConfig::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        self.dataset.name.parse::<crate::data::DatasetName>()?;
        crate::data::validate_specs(&self.dataset.attributes)?;
        self.attack.validate()?;
        let needs_attrs = self.grid.attacks.iter().any(|a| a.needs_manipulator())
            || self.grid.defenses.iter().any(|d| d.needs_manipulator());
        if needs_attrs && self.dataset.attributes.is_empty() {
            return Err(Error::InvalidConfig("attribute-based attacks or defenses need at least one attribute".into()));
        }
        if self.grid.samples == 0 || self.grid.batch_size == 0 {
            return Err(Error::InvalidConfig("grid sample count and batch size must be positive".into()));
        }
        for set in &self.ablation.attribute_sets {
            for name in set {
                if !self.dataset.attributes.iter().any(|s| &s.name == name) {
                    return Err(Error::InvalidConfig(format!("attribute set names unknown attribute `{name}`")));
                }
            }
        }
        if let Some(sweep) = &self.ablation.eps_sweep {
            if sweep.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
                return Err(Error::InvalidConfig("ε sweep values must be finite and non-negative".into()));
            }
        }
        Ok(())
    }

    /// Stable identifier of the resolved configuration: sha256 of its
    /// canonical JSON form (object keys sorted, no whitespace).
    pub fn hash(&self) -> String {
        hash_value(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn eps_sweep(&self) -> Vec<f64> {
        self.ablation.eps_sweep.clone().unwrap_or_else(|| {
            let e = self.attack.eps;
            vec![0.0, e / 2.0, e, 1.5 * e]
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        parse_merged(parse_toml(text)?)
    }
}

/// Serializes with object keys sorted at every level.
pub fn canonical_json(v: &serde_json::Value) -> String {
    fn sort(v: &serde_json::Value) -> serde_json::Value {
        match v {
            serde_json::Value::Object(m) => {
                let sorted: BTreeMap<&String, serde_json::Value> = m.iter().map(|(k, v)| (k, sort(v))).collect();
                serde_json::Value::Object(sorted.into_iter().map(|(k, v)| (k.clone(), v)).collect())
            }
            serde_json::Value::Array(a) => serde_json::Value::Array(a.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    sort(v).to_string()
}

/// First 16 hex digits of the sha256 of [`canonical_json`].
pub fn hash_value(v: &serde_json::Value) -> String {
    let digest = Sha256::digest(canonical_json(v).as_bytes());
    hex::encode(&digest[..8])
}

fn parse_toml(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn parse_merged(table: toml::Table) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Recursively merges `over` into `base`: tables merge key by key, any
/// other value in `over` replaces the one in `base`.
pub fn deep_merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn resolve_file(path: &Path, stack: &mut Vec<PathBuf>) -> Result<toml::Table> {
    let canon = path.canonicalize().map_err(|e| Error::io(path, e))?;
    if stack.contains(&canon) {
        return Err(Error::InvalidConfig(format!("include cycle through {}", canon.display())));
    }
    let text = std::fs::read_to_string(&canon).map_err(|e| Error::io(&canon, e))?;
    let mut table = parse_toml(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", canon.display())))?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(toml::Value::String(s)) => vec![s],
        Some(toml::Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                other => Err(Error::InvalidConfig(format!("include entries must be paths, got {other}"))),
            })
            .collect::<Result<_>>()?,
        Some(other) => return Err(Error::InvalidConfig(format!("include must be a path or list, got {other}"))),
    };
    stack.push(canon.clone());
    let dir = canon.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut merged = toml::Table::new();
    for inc in includes {
        deep_merge(&mut merged, resolve_file(&dir.join(inc), stack)?);
    }
    stack.pop();
    deep_merge(&mut merged, table);
    Ok(merged)
}

/// Reads a config file, resolving includes relative to the including file.
/// Later includes override earlier ones and the file itself overrides all.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_merged(resolve_file(path, &mut Vec::new())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_field_order_in_the_file() {
        let a = "name = \"x\"\nseeds = [1]\n[attack]\neps = 0.2\nsteps = 5\n";
        let b = "[attack]\nsteps = 5\neps = 0.2\n[grid]\n";
        let b = format!("seeds = [1]\nname = \"x\"\n{b}");
        let ca = ExperimentConfig::from_toml_str(a).unwrap();
        let cb = ExperimentConfig::from_toml_str(&b).unwrap();
        assert_eq!(ca.hash(), cb.hash());
        let cc = ExperimentConfig::from_toml_str("name = \"x\"\nseeds = [2]\n").unwrap();
        assert_ne!(ca.hash(), cc.hash());
    }

    #[test]
    fn canonical_json_sorts_nested_keys() {
        let v: serde_json::Value = serde_json::from_str(r#"{"b": {"y": 1, "x": [ {"d": 0, "c": 1} ]}, "a": 2}"#).unwrap();
        assert_eq!(canonical_json(&v), r#"{"a":2,"b":{"x":[{"c":1,"d":0}],"y":1}}"#);
    }

    #[test]
    fn includes_merge_deeply_and_the_includer_wins() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.toml"), "name = \"base\"\n[attack]\neps = 0.3\nsteps = 3\n").unwrap();
        std::fs::write(dir.path().join("run.toml"), "include = \"base.toml\"\n[attack]\neps = 0.05\n").unwrap();
        let cfg = load_config(&dir.path().join("run.toml")).unwrap();
        assert_eq!(cfg.name, "base");
        assert_eq!(cfg.attack.eps, 0.05);
        assert_eq!(cfg.attack.steps, 3);
    }

    #[test]
    fn include_cycles_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.toml"), "include = \"b.toml\"\n").unwrap();
        std::fs::write(dir.path().join("b.toml"), "include = [\"a.toml\"]\n").unwrap();
        assert!(matches!(load_config(&dir.path().join("a.toml")), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn unknown_keys_and_attacks_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("nmae = \"typo\"\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[grid]\nattacks = [\"teleport\"]\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.grid.attacks = vec![AttackSpec::Spa, AttackSpec::Pgd];
        cfg.ablation.attribute_sets = vec![vec!["rotation".into()]];
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn default_eps_sweep_brackets_the_budget() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.eps_sweep(), vec![0.0, 0.05, 0.1, 0.15000000000000002]);
    }
}
