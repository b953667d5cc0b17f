//! On-disk layout under the experiment root: cached artifacts keyed by the
//! hash of the settings that produced them, one directory per run with
//! its resolved config and records, and an append-only run index.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, EXPERIMENT_ROOT_ENV};
use crate::{Error, Result};

pub const CSV_HEADER: [&str; 5] = ["defense", "attack", "accuracy", "seed", "config_hash"];

/// One evaluated cell. `setting` distinguishes sweep points of an ablation
/// (for example `eps=0.05`) and is folded into the attack column of the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub defense: String,
    pub attack: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub setting: String,
    pub accuracy: f64,
    pub config_hash: String,
    pub seed: u64,
    pub runtime_secs: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl ExperimentRecord {
    pub fn new(defense: &str, attack: &str, setting: &str, accuracy: f64, config_hash: &str, seed: u64, runtime_secs: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Invariant(format!("accuracy {accuracy} outside [0, 1] for {defense}/{attack}")));
        }
        Ok(Self {
            defense: defense.into(),
            attack: attack.into(),
            setting: setting.into(),
            accuracy,
            config_hash: config_hash.into(),
            seed,
            runtime_secs,
            timestamp: now(),
        })
    }

    /// Attack column as written to CSV: `attack` or `attack@setting`.
    pub fn attack_label(&self) -> String {
        if self.setting.is_empty() {
            self.attack.clone()
        } else {
            format!("{}@{}", self.attack, self.setting)
        }
    }

    /// Same measurement, ignoring when and how fast it was taken.
    pub fn same_result(&self, other: &Self) -> bool {
        self.defense == other.defense
            && self.attack == other.attack
            && self.setting == other.setting
            && self.accuracy == other.accuracy
            && self.seed == other.seed
            && self.config_hash == other.config_hash
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn records_to_csv(records: &[ExperimentRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([r.defense.clone(), r.attack_label(), format!("{}", r.accuracy), r.seed.to_string(), r.config_hash.clone()])?;
    }
    w.into_inner().map_err(|e| Error::Serde(e.to_string()))
}

/// Parses the CSV form. Runtime and timestamp are not part of it and come
/// back as zero.
pub fn records_from_csv(bytes: &[u8]) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::CorruptData(format!("unexpected CSV header {header:?}")));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let label = &row[1];
        let (attack, setting) = label.split_once('@').unwrap_or((label, ""));
        let parse_err = |what: &str| Error::CorruptData(format!("bad {what} in CSV row {row:?}"));
        out.push(ExperimentRecord {
            defense: row[0].to_string(),
            attack: attack.to_string(),
            setting: setting.to_string(),
            accuracy: row[2].parse().map_err(|_| parse_err("accuracy"))?,
            seed: row[3].parse().map_err(|_| parse_err("seed"))?,
            config_hash: row[4].to_string(),
            runtime_secs: 0.0,
            timestamp: 0,
        });
    }
    Ok(out)
}

/// What a run directory holds, so the report knows how to lay it out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub name: String,
    /// `grid` or an ablation kind.
    pub kind: String,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentStore {
    root: PathBuf,
}

impl ExperimentStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `$SPA_EXPERIMENT_ROOT`, else `./experiments`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(EXPERIMENT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| "experiments".into()))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn artifact_path(&self, kind: &str, key: &str) -> PathBuf {
        self.root.join("artifacts").join(format!("{kind}-{key}.safetensors"))
    }

    pub fn run_dir(&self, cfg: &ExperimentConfig, kind: &str) -> PathBuf {
        match &cfg.output_dir {
            Some(d) => d.join(kind),
            None => self.root.join("runs").join(format!("{}-{}-{}", cfg.name, kind, cfg.hash())),
        }
    }

    /// Persists a finished run: resolved config, records as CSV and JSON,
    /// and a line in the run index.
    pub fn save_run(&self, dir: &Path, cfg: &ExperimentConfig, meta: &RunMeta, records: &[ExperimentRecord]) -> Result<()> {
        write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
        write_atomic(&dir.join("meta.json"), serde_json::to_string_pretty(meta)?.as_bytes())?;
        write_atomic(&dir.join("records.json"), serde_json::to_string_pretty(records)?.as_bytes())?;
        write_atomic(&dir.join("records.csv"), &records_to_csv(records)?)?;
        self.append_index(dir, meta)
    }

    fn append_index(&self, dir: &Path, meta: &RunMeta) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join("index.jsonl");
        let line = serde_json::json!({ "dir": dir, "kind": meta.kind, "config_hash": meta.config_hash, "timestamp": now() });
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        // One write call per line keeps concurrent appends whole.
        f.write_all(format!("{line}\n").as_bytes()).map_err(|e| Error::io(&path, e))
    }
}

/// Records of a run directory: `records.json` when present, else the CSV.
pub fn read_records(dir: &Path) -> Result<Vec<ExperimentRecord>> {
    let json = dir.join("records.json");
    if json.exists() {
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        return Ok(serde_json::from_str(&text)?);
    }
    let csv = dir.join("records.csv");
    let bytes = std::fs::read(&csv).map_err(|e| Error::io(&csv, e))?;
    records_from_csv(&bytes)
}

pub fn read_meta(dir: &Path) -> Result<Option<RunMeta>> {
    let path = dir.join("meta.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(d: &str, a: &str, s: &str, acc: f64) -> ExperimentRecord {
        ExperimentRecord::new(d, a, s, acc, "abc", 3, 1.5).unwrap()
    }

    #[test]
    fn csv_has_the_fixed_header_and_round_trips() {
        let rs = vec![rec("plain", "spa", "", 0.25), rec("spa", "spa", "eps=0.05", 0.625)];
        let bytes = records_to_csv(&rs).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("defense,attack,accuracy,seed,config_hash\n"));
        assert!(text.contains("spa,spa@eps=0.05,0.625,3,abc"));
        let back = records_from_csv(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in rs.iter().zip(&back) {
            assert!(a.same_result(b));
        }
    }

    #[test]
    fn accuracy_outside_the_unit_interval_is_an_invariant_violation() {
        assert!(matches!(ExperimentRecord::new("p", "a", "", 1.5, "h", 0, 0.0), Err(Error::Invariant(_))));
    }

    #[test]
    fn saved_runs_read_back_and_are_indexed() {
        let dir = tempfile::tempdir().unwrap();
        let store = ExperimentStore::new(dir.path());
        let cfg = ExperimentConfig::default();
        let run = store.run_dir(&cfg, "grid");
        let meta = RunMeta { name: cfg.name.clone(), kind: "grid".into(), config_hash: cfg.hash() };
        let rs = vec![rec("plain", "identity", "", 0.9)];
        store.save_run(&run, &cfg, &meta, &rs).unwrap();
        store.save_run(&run, &cfg, &meta, &rs).unwrap();
        assert_eq!(read_records(&run).unwrap(), rs);
        assert_eq!(read_meta(&run).unwrap(), Some(meta));
        let index = std::fs::read_to_string(dir.path().join("index.jsonl")).unwrap();
        assert_eq!(index.lines().count(), 2);
        let saved = super::super::config::load_config(&run.join("config.toml")).unwrap();
        assert_eq!(saved.hash(), cfg.hash());
    }
}
