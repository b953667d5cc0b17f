use std::path::Path;
use std::process::{Command, Output};

fn spa(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spa"))
        .arg("--root")
        .arg(root)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn spa")
}

#[test]
fn help_lists_every_verb() {
    let dir = tempfile::tempdir().unwrap();
    let out = spa(dir.path(), &["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for verb in ["data", "train", "attack", "grid", "ablation", "report"] {
        assert!(text.contains(verb), "missing `{verb}` in:\n{text}");
    }
}

#[test]
fn report_renders_a_csv_only_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(
        run.join("records.csv"),
        "defense,attack,accuracy,seed,config_hash\n\
         plain,identity,0.9,0,abc\n\
         plain,spa,0.05,0,abc\n\
         spa,identity,0.87,0,abc\n\
         spa,spa,0.61,0,abc\n",
    )
    .unwrap();
    let out = spa(dir.path(), &["report", "--records", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0.6100"), "{stdout}");
    let md = std::fs::read_to_string(run.join("report.md")).unwrap();
    assert!(md.contains("| spa |"), "{md}");
}

#[test]
fn report_on_an_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = spa(dir.path(), &["report", "--records", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[attack]\nepsilon = 0.1\n").unwrap();
    let out = spa(dir.path(), &["grid", "run", "--config", cfg.to_str().unwrap(), "--no-train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsilon"));
}

#[test]
fn unknown_attack_names_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "").unwrap();
    let out = spa(dir.path(), &["attack", "run", "--config", cfg.to_str().unwrap(), "--attack", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_artifacts_fail_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        format!("[dataset]\nname = \"synthetic-objects\"\nroot = \"{}\"\n[dataset.options]\nsynthetic_count = 200\nval_size = 20\n", data.display()),
    )
    .unwrap();
    let out = spa(dir.path(), &["grid", "run", "--config", cfg.to_str().unwrap(), "--no-train"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("training is disabled"));
}
