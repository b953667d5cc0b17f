//! Trained components an experiment needs, loaded from the artifact cache
//! or trained on demand. Every artifact key hashes exactly the settings
//! that determine its parameters, so runs that share a classifier or a
//! generator also share the file.

use std::path::{Path, PathBuf};

use serde_json::json;

use super::config::{hash_value, ExperimentConfig};
use super::store::ExperimentStore;
use crate::classifier::{train_plain, Classifier, ClassifierSpec, TrainConfig};
use crate::data::{default_root, load_dataset_with, AttributeSpec, DatasetHandle};
use crate::generator::{GeneratorSpec, NoiseGenerator};
use crate::manipulator::{
    train_attribute_predictor, train_object_manipulator, GeometricManipulator, Manipulator, ObjectLevelManipulator,
};
use crate::rng::derive_seed;
use crate::training::{train_attack_generator, train_defense, DefenseKind};
use crate::{Error, Result};

/// Bumped whenever a change to the training code invalidates old artifacts.
pub const ARTIFACT_VERSION: u32 = 3;

/// A component together with the cache key it was stored under.
#[derive(Debug, Clone)]
pub struct Keyed<T> {
    pub value: T,
    pub key: String,
}

pub struct Workbench<'a> {
    cfg: &'a ExperimentConfig,
    store: &'a ExperimentStore,
    pub dataset: DatasetHandle,
    train: bool,
}

impl<'a> Workbench<'a> {
    /// Loads the dataset. With `train` unset, a missing artifact is an
    /// error instead of a training run.
    pub fn open(cfg: &'a ExperimentConfig, store: &'a ExperimentStore, train: bool) -> Result<Self> {
        let root = cfg.dataset.root.clone().unwrap_or_else(default_root);
        let dataset = load_dataset_with(
            cfg.dataset.name.parse()?,
            &root,
            &cfg.dataset.attributes,
            cfg.dataset.seed,
            &cfg.dataset.options,
        )?;
        Ok(Self { cfg, store, dataset, train })
    }

    pub fn config(&self) -> &ExperimentConfig {
        self.cfg
    }

    fn key(&self, what: serde_json::Value) -> String {
        let mut opts = self.cfg.dataset.options.clone();
        opts.use_cache = true;
        hash_value(&json!({
            "version": ARTIFACT_VERSION,
            "dataset": { "name": self.cfg.dataset.name, "seed": self.cfg.dataset.seed, "options": opts },
            "artifact": what,
        }))
    }

    fn cached<T>(
        &self,
        kind: &str,
        key: &str,
        load: impl FnOnce(&Path) -> Result<T>,
        train: impl FnOnce() -> Result<T>,
        save: impl FnOnce(&T, &Path) -> Result<()>,
    ) -> Result<T> {
        let path = self.store.artifact_path(kind, key);
        if path.exists() {
            log::debug!("loading {kind} from {}", path.display());
            return load(&path);
        }
        if !self.train {
            return Err(Error::NotReady(format!("missing {kind} checkpoint {} and training is disabled", path.display())));
        }
        log::info!("training {kind} ({key})");
        let value = train()?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = partial_path(&path);
        save(&value, &tmp)?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(value)
    }

    /// Attribute specs for a subset of the configured attributes, in the
    /// order given; `None` selects all of them.
    pub fn specs(&self, names: Option<&[String]>) -> Result<Vec<AttributeSpec>> {
        let all = &self.cfg.dataset.attributes;
        match names {
            None => Ok(all.clone()),
            Some(names) => names
                .iter()
                .map(|n| {
                    all.iter()
                        .find(|s| &s.name == n)
                        .cloned()
                        .ok_or_else(|| Error::InvalidConfig(format!("unknown attribute `{n}`")))
                })
                .collect(),
        }
    }

    pub fn manipulator(&self, names: Option<&[String]>) -> Result<Keyed<Manipulator>> {
        let specs = self.specs(names)?;
        let mcfg = &self.cfg.manipulator;
        if specs.iter().all(|s| s.kind.is_geometric()) {
            if !mcfg.train_predictor || specs.is_empty() {
                let key = self.key(json!({ "kind": "geometric", "specs": specs }));
                let m = GeometricManipulator::new(specs, self.dataset.padding())?;
                return Ok(Keyed { value: Manipulator::Geometric(m), key });
            }
            let key = self.key(json!({ "kind": "geometric", "specs": specs, "predictor": mcfg.predictor }));
            let m = self.cached(
                "manipulator",
                &key,
                |p| GeometricManipulator::load(p),
                || {
                    let mut m = GeometricManipulator::new(specs.clone(), self.dataset.padding())?;
                    train_attribute_predictor(&mut m, &self.dataset, &mcfg.predictor)?;
                    Ok(m)
                },
                |m, p| m.save(p),
            )?;
            return Ok(Keyed { value: Manipulator::Geometric(m), key });
        }
        if specs.iter().any(|s| s.kind.is_geometric()) {
            return Err(Error::InvalidConfig("geometric and object-level attributes cannot share a manipulator".into()));
        }
        let key = self.key(json!({ "kind": "object", "specs": specs, "config": mcfg.object }));
        let m = self.cached(
            "manipulator",
            &key,
            |p| ObjectLevelManipulator::load(p),
            || Ok(train_object_manipulator(&self.dataset, &specs, &mcfg.object)?.0),
            |m, p| m.save(p),
        )?;
        Ok(Keyed { value: Manipulator::Object(m), key })
    }

    fn classifier_spec(&self, seed: u64) -> ClassifierSpec {
        ClassifierSpec {
            profile: self.cfg.classifier.profile,
            num_classes: self.dataset.num_classes,
            input_shape: self.dataset.shape(),
            blocks_per_stage: self.cfg.classifier.blocks_per_stage,
            seed: derive_seed(seed, "classifier"),
            ..ClassifierSpec::default()
        }
    }

    pub fn plain_classifier(&self, seed: u64) -> Result<Keyed<Classifier>> {
        let spec = self.classifier_spec(seed);
        let tc = TrainConfig { seed: derive_seed(seed, "plain-train"), ..self.cfg.classifier.train.clone() };
        let key = self.key(json!({ "kind": "plain", "spec": spec, "train": tc }));
        let model = self.cached(
            "classifier",
            &key,
            |p| Classifier::load(p),
            || {
                let m = Classifier::new(spec.clone())?;
                train_plain(&m, &self.dataset, &tc)?;
                Ok(m)
            },
            |m, p| m.save(p, None, &key),
        )?;
        Ok(Keyed { value: model, key })
    }

    fn generator_spec(&self, seed: u64) -> GeneratorSpec {
        let g = &self.cfg.generator;
        GeneratorSpec {
            z_dim: g.z_dim,
            num_classes: self.dataset.num_classes,
            input_shape: self.dataset.shape(),
            width: g.width,
            grad_gain: g.grad_gain,
            seed,
        }
    }

    /// The classifier trained by `kind`.
    pub fn classifier(&self, kind: DefenseKind, seed: u64) -> Result<Keyed<Classifier>> {
        if kind == DefenseKind::Plain {
            return self.plain_classifier(seed);
        }
        let settings = &self.cfg.defense;
        let dcfg = settings.defense_config(kind, &self.cfg.attack, derive_seed(seed, &format!("defense-{kind}")));
        let uses_generator = matches!(kind, DefenseKind::Spa | DefenseKind::GeneratorOnly);
        let gspec = uses_generator.then(|| self.generator_spec(derive_seed(seed, "defense-generator")));
        let start = if settings.warm_start { Some(self.plain_classifier(seed)?) } else { None };
        let attrs = if kind.needs_manipulator() { self.cfg.dataset.attributes.clone() } else { Vec::new() };
        let key = self.key(json!({
            "kind": kind,
            "spec": self.classifier_spec(seed),
            "start": start.as_ref().map(|s| s.key.clone()),
            "defense": dcfg,
            "attributes": attrs,
            "generator": gspec,
        }));
        let model = self.cached(
            "classifier",
            &key,
            |p| Classifier::load(p),
            || {
                let model = match &start {
                    Some(s) => s.value.duplicate()?,
                    None => Classifier::new(self.classifier_spec(seed))?,
                };
                let man = if kind.needs_manipulator() { Some(self.manipulator(None)?.value) } else { None };
                let gen = gspec.clone().map(NoiseGenerator::new).transpose()?;
                let log = train_defense(&self.dataset, man.as_ref(), &model, gen.as_ref(), &dcfg)?;
                if !log.all_finite() {
                    return Err(Error::NonFinite(format!("{kind} training log")));
                }
                log.write_jsonl(&self.store.artifact_path("classifier", &key).with_extension("log.jsonl"))?;
                Ok(model)
            },
            |m, p| m.save(p, None, &key),
        )?;
        Ok(Keyed { value: model, key })
    }

    /// A generator trained to attack `model` through `manipulator`.
    pub fn attack_generator(
        &self,
        model: &Keyed<Classifier>,
        manipulator: &Keyed<Manipulator>,
        seed: u64,
    ) -> Result<Keyed<NoiseGenerator>> {
        let spec = self.generator_spec(derive_seed(seed, "attack-generator"));
        let tc = self.cfg.generator.train_config(&self.cfg.attack, derive_seed(seed, "attack-generator-train"));
        let key = self.key(json!({
            "kind": "attack-generator",
            "model": model.key,
            "manipulator": manipulator.key,
            "spec": spec,
            "train": tc,
        }));
        let gen = self.cached(
            "generator",
            &key,
            |p| NoiseGenerator::load(p),
            || {
                let g = NoiseGenerator::new(spec.clone())?;
                train_attack_generator(&self.dataset, &manipulator.value, &model.value, &g, &tc)?;
                Ok(g)
            },
            |g, p| g.save(p, &key),
        )?;
        Ok(Keyed { value: gen, key })
    }
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".partial{}", std::process::id()));
    path.with_file_name(name)
}
