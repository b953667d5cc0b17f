//! `spa`: prepare data, train components, run attacks, grids and ablations,
//! and render reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use spa_core::attack::{eval::write_records, evaluate_attack, AttackContext, AttackSpec};
use spa_core::classifier::evaluate;
use spa_core::data::{default_root, load_dataset_with, AttributeSpec, DatasetName, LoadOptions};
use spa_core::harness::grid::{attack_seed, prepare_target, sample_count};
use spa_core::harness::{self, AblationKind, ExperimentConfig, ExperimentStore, Workbench, EXPERIMENT_ROOT_ENV};
use spa_core::training::DefenseKind;

/// Exit code for a violated invariant (ε-ball, pixel range, non-finite
/// values, accuracy range).
const INVARIANT_EXIT: u8 = 3;

#[derive(Parser)]
#[command(name = "spa", version, about = "Semantic-preserving adversarial attacks and training")]
struct Cli {
    /// Experiment root holding artifacts and runs.
    #[arg(long, global = true, env = EXPERIMENT_ROOT_ENV, default_value = "experiments")]
    root: PathBuf,
    /// Worker threads for tensor kernels. One thread is bit-reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset preparation.
    Data {
        #[command(subcommand)]
        action: DataAction,
    },
    /// Train a manipulator, a plain classifier or a defense.
    Train {
        #[command(subcommand)]
        what: TrainWhat,
    },
    /// Single attacks against a trained classifier.
    Attack {
        #[command(subcommand)]
        action: AttackAction,
    },
    /// The defense × attack grid.
    Grid {
        #[command(subcommand)]
        action: RunAction,
    },
    /// Ablation suites.
    Ablation {
        #[command(subcommand)]
        action: AblationAction,
    },
    /// Render tables, plots and panels from a run directory.
    Report {
        /// Run directory holding records.json or records.csv.
        #[arg(long)]
        records: PathBuf,
        /// Output directory (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        amplification: Option<f64>,
    },
}

#[derive(Subcommand)]
enum DataAction {
    /// Load, split and cache a dataset, then print a summary.
    Prepare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "fashion-mnist")]
        dataset: String,
        /// Built-in attributes: rotation, scale, shift-x, shift-y.
        #[arg(long = "attribute")]
        attributes: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        data_root: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = harness::load_config(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum TrainWhat {
    Manipulator {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    Classifier {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    Defense {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        kind: DefenseKind,
    },
}

#[derive(Subcommand)]
enum AttackAction {
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "plain")]
        defense: DefenseKind,
        #[arg(long)]
        attack: AttackSpec,
        /// Overrides the grid sample count.
        #[arg(long)]
        samples: Option<usize>,
        /// Per-example records as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum RunAction {
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Evaluate on the whole test split.
        #[arg(long)]
        full: bool,
        /// Fail instead of training missing components.
        #[arg(long)]
        no_train: bool,
    },
}

#[derive(Subcommand)]
enum AblationAction {
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        kind: AblationKind,
        #[arg(long)]
        no_train: bool,
    },
}

fn builtin_attribute(name: &str) -> Result<AttributeSpec> {
    Ok(match name {
        "rotation" => AttributeSpec::rotation(),
        "scale" => AttributeSpec::scale(),
        "shift-x" => AttributeSpec::shift_x(),
        "shift-y" => AttributeSpec::shift_y(),
        other => bail!("unknown built-in attribute `{other}`"),
    })
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn run(cli: Cli) -> Result<()> {
    let store = ExperimentStore::new(&cli.root);
    match cli.command {
        Command::Data { action: DataAction::Prepare { config, dataset, attributes, seed, data_root } } => {
            let (name, specs, seed, root, opts) = match config {
                Some(path) => {
                    let cfg = harness::load_config(&path)?;
                    let root = cfg.dataset.root.clone().unwrap_or_else(default_root);
                    (cfg.dataset.name, cfg.dataset.attributes, cfg.dataset.seed, root, cfg.dataset.options)
                }
                None => {
                    let specs = attributes.iter().map(|a| builtin_attribute(a)).collect::<Result<Vec<_>>>()?;
                    (dataset, specs, seed, data_root.unwrap_or_else(default_root), LoadOptions::default())
                }
            };
            let parsed: DatasetName = name.parse()?;
            let ds = load_dataset_with(parsed, &root, &specs, seed, &opts)?;
            print_json(&serde_json::json!({
                "dataset": parsed.dir_name(),
                "root": root,
                "shape": ds.shape(),
                "classes": ds.num_classes,
                "train": ds.train.len(),
                "val": ds.val.len(),
                "test": ds.test.len(),
                "attributes": specs.iter().map(|s| &s.name).collect::<Vec<_>>(),
            }));
        }
        Command::Train { what } => match what {
            TrainWhat::Manipulator { cfg } => {
                let cfg = cfg.load()?;
                let bench = Workbench::open(&cfg, &store, true)?;
                let m = bench.manipulator(None)?;
                print_json(&serde_json::json!({ "manipulator": m.key, "attributes": m.value.specs() }));
            }
            TrainWhat::Classifier { cfg } => {
                let cfg = cfg.load()?;
                let bench = Workbench::open(&cfg, &store, true)?;
                for &seed in &cfg.seeds {
                    let m = bench.plain_classifier(seed)?;
                    let acc = evaluate(&m.value, &bench.dataset.test, None)?;
                    print_json(&serde_json::json!({ "classifier": m.key, "seed": seed, "test_accuracy": acc }));
                }
            }
            TrainWhat::Defense { cfg, kind } => {
                let cfg = cfg.load()?;
                let bench = Workbench::open(&cfg, &store, true)?;
                for &seed in &cfg.seeds {
                    let m = bench.classifier(kind, seed)?;
                    let acc = evaluate(&m.value, &bench.dataset.test, None)?;
                    print_json(&serde_json::json!({ "defense": kind, "classifier": m.key, "seed": seed, "test_accuracy": acc }));
                }
            }
        },
        Command::Attack { action: AttackAction::Run { cfg, defense, attack, samples, out } } => {
            let mut cfg = cfg.load()?;
            if let Some(n) = samples {
                cfg.grid.samples = n;
            }
            let bench = Workbench::open(&cfg, &store, cfg.grid.train)?;
            for &seed in &cfg.seeds {
                let t = prepare_target(&bench, defense, &[attack], seed)?;
                let attack_cfg = spa_core::attack::AttackConfig { seed: attack_seed(seed), ..cfg.attack.clone() };
                let ctx = AttackContext {
                    model: &t.model.value,
                    manipulator: t.manipulator.as_ref().map(|m| &m.value),
                    generator: t.generator.as_ref().map(|g| &g.value),
                    config: &attack_cfg,
                    pgd_iterations: cfg.grid.pgd_iterations,
                };
                let n = sample_count(&cfg, bench.dataset.test.len());
                let outcome = evaluate_attack(&ctx, attack, &bench.dataset.test, n, cfg.grid.batch_size, None)?;
                if let Some(path) = &out {
                    write_records(&seeded_path(path, seed, cfg.seeds.len()), &outcome.records)?;
                }
                print_json(&serde_json::json!({
                    "defense": defense,
                    "attack": attack,
                    "seed": seed,
                    "samples": n,
                    "accuracy": outcome.accuracy,
                    "accuracy_by_iteration": outcome.accuracy_by_iteration,
                }));
            }
        }
        Command::Grid { action: RunAction::Run { cfg, full, no_train } } => {
            let mut cfg = cfg.load()?;
            cfg.grid.full |= full;
            cfg.grid.train &= !no_train;
            let run = harness::run_grid(&cfg, &store)?;
            print!("{}", harness::report::grid_table(&run.grid));
            println!("records: {}", run.dir.display());
        }
        Command::Ablation { action: AblationAction::Run { cfg, kind, no_train } } => {
            let mut cfg = cfg.load()?;
            cfg.grid.train &= !no_train;
            let run = harness::run_ablation(kind, &cfg, &store)?;
            print!("{}", run.table);
            println!("records: {}", run.dir.display());
        }
        Command::Report { records, out, amplification } => {
            let mut rc = match records.join("config.toml") {
                p if p.exists() => harness::load_config(&p)?.report,
                _ => Default::default(),
            };
            if let Some(a) = amplification {
                rc.amplification = a;
            }
            let out = out.unwrap_or_else(|| records.clone());
            let r = harness::report(&records, &out, &rc)?;
            print!("{}", r.markdown);
            for f in r.files {
                eprintln!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn seeded_path(path: &Path, seed: u64, seeds: usize) -> PathBuf {
    if seeds <= 1 {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}-seed{seed}{ext}"))
}

fn is_invariant(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(
            e.downcast_ref::<spa_core::Error>(),
            Some(spa_core::Error::Invariant(_) | spa_core::Error::NonFinite(_))
        )
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    // Kernel thread count is read once, on first use.
    std::env::set_var("RAYON_NUM_THREADS", cli.threads.max(1).to_string());
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_invariant(&e) {
                ExitCode::from(INVARIANT_EXIT)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
