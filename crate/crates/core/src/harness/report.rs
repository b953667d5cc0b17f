//! Human-readable output from persisted records: markdown tables (with the
//! row-minimum column for grids), SVG line charts for sweeps, and PNG
//! sample panels. Output depends only on the run directory's files, so
//! regenerating a report gives identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::ablation::AblationKind;
use super::config::ReportConfig;
use super::grid::Grid;
use super::panels::{encode_png, read_panels, render_panels};
use super::store::{read_meta, read_records, write_atomic, ExperimentRecord};
use crate::{Error, Result};

/// Shortest decimal form with at most four fractional digits.
pub fn fmt_setting(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into())
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| {} |", header.join(" | "));
    let _ = writeln!(s, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(s, "| {} |", r.join(" | "));
    }
    s
}

/// Defenses as rows, attacks as columns, plus the row minimum.
pub fn grid_table(grid: &Grid) -> String {
    let mut header = vec!["defense".to_string()];
    header.extend(grid.attacks.iter().cloned());
    header.push("Min".into());
    let rows: Vec<Vec<String>> = grid
        .defenses
        .iter()
        .map(|d| {
            let mut row = vec![d.clone()];
            row.extend(grid.attacks.iter().map(|a| fmt_acc(grid.cell(d, a))));
            row.push(fmt_acc(grid.row_min(d)));
            row
        })
        .collect();
    table(&header, &rows)
}

fn unique<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

fn mean_where(records: &[ExperimentRecord], f: impl Fn(&ExperimentRecord) -> bool) -> Option<f64> {
    let v: Vec<f64> = records.iter().filter(|r| f(r)).map(|r| r.accuracy).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn ablation_table(kind: AblationKind, records: &[ExperimentRecord]) -> String {
    let defenses = unique(records.iter().map(|r| r.defense.clone()));
    if kind.is_sweep() {
        let settings = unique(records.iter().map(|r| r.setting.clone()));
        let series = unique(records.iter().map(|r| (r.defense.clone(), r.attack.clone())));
        let mut header = vec!["defense".to_string(), "attack".to_string()];
        header.extend(settings.iter().cloned());
        let rows: Vec<Vec<String>> = series
            .iter()
            .map(|(d, a)| {
                let mut row = vec![d.clone(), a.clone()];
                row.extend(settings.iter().map(|s| {
                    fmt_acc(mean_where(records, |r| &r.defense == d && &r.attack == a && &r.setting == s))
                }));
                row
            })
            .collect();
        return table(&header, &rows);
    }
    let variants = unique(records.iter().map(|r| (r.attack.clone(), r.setting.clone())));
    let mut header = vec!["attack".to_string(), "setting".to_string()];
    header.extend(defenses.iter().cloned());
    let rows: Vec<Vec<String>> = variants
        .iter()
        .map(|(a, s)| {
            let mut row = vec![a.clone(), s.clone()];
            row.extend(defenses.iter().map(|d| {
                fmt_acc(mean_where(records, |r| &r.defense == d && &r.attack == a && &r.setting == s))
            }));
            row
        })
        .collect();
    table(&header, &rows)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// A minimal SVG line chart with accuracy on a fixed `[0, 1]` y-axis.
pub fn line_chart(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (560.0, 360.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let xs: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    let xmin = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let xmax = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (xmin, xmax) = if xs.is_empty() { (0.0, 1.0) } else if xmax > xmin { (xmin, xmax) } else { (xmin - 1.0, xmax + 1.0) };
    let sx = |x: f64| left + (x - xmin) / (xmax - xmin) * pw;
    let sy = |y: f64| top + (1.0 - y.clamp(0.0, 1.0)) * ph;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    for i in 0..=4 {
        let y = i as f64 / 4.0;
        let _ = writeln!(s, r##"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, sy(y), left + pw, sy(y));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y:.2}</text>"#, left - 6.0, sy(y) + 4.0);
    }
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in &ticks {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(*x), top + ph + 18.0, fmt_setting(*x));
    }
    let _ = writeln!(s, r#"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, top + ph, left + pw, top + ph);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#, top + ph);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">accuracy</text>"#, top + ph / 2.0, top + ph / 2.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for (x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(*x), sy(*y));
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, left + pw + 12.0, left + pw + 32.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, left + pw + 38.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// `(defense/attack, [(x, accuracy)])` for records whose setting is
/// `<param>=<number>`.
fn sweep_series(records: &[ExperimentRecord], param: &str) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut series: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in records {
        let Some((p, v)) = r.setting.split_once('=') else { continue };
        if p != param || v.parse::<f64>().is_err() {
            continue;
        }
        let name = format!("{}/{}", r.defense, r.attack);
        if !order.contains(&name) {
            order.push(name.clone());
        }
        series.entry(name).or_default().entry(v.to_string()).or_default().push(r.accuracy);
    }
    order
        .into_iter()
        .map(|name| {
            let mut pts: Vec<(f64, f64)> = series[&name]
                .iter()
                .map(|(x, accs)| (x.parse::<f64>().expect("checked"), accs.iter().sum::<f64>() / accs.len() as f64))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (name, pts)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub files: Vec<PathBuf>,
    pub markdown: String,
}

/// Renders the run in `records_dir` into `out_dir`.
pub fn report(records_dir: &Path, out_dir: &Path, cfg: &ReportConfig) -> Result<ReportOutput> {
    let records = read_records(records_dir)?;
    if records.is_empty() {
        return Err(Error::Empty(format!("no records in {}", records_dir.display())));
    }
    let meta = read_meta(records_dir)?;
    let kind = meta.as_ref().map(|m| m.kind.clone()).unwrap_or_else(|| "grid".into());
    let title = meta.as_ref().map(|m| m.name.clone()).unwrap_or_else(|| "experiment".into());
    let mut files = Vec::new();
    let mut md = String::new();
    let _ = writeln!(md, "# {title}: {kind}\n");
    let ablation = kind.parse::<AblationKind>().ok();
    match ablation {
        Some(k) => md.push_str(&ablation_table(k, &records)),
        None => md.push_str(&grid_table(&Grid::from_records(records.clone()))),
    }
    let hashes = unique(records.iter().map(|r| r.config_hash.clone()));
    let seeds = unique(records.iter().map(|r| r.seed));
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(md, "\nconfig {}; seeds {}\n", hashes.join(", "), seeds.join(", "));

    let mut charts: Vec<(&str, String)> = Vec::new();
    match ablation {
        Some(AblationKind::AttackIteration) => {
            charts.push(("accuracy-vs-iterations.svg", line_chart("Accuracy vs attack iterations", "iterations", &sweep_series(&records, "iterations"))));
        }
        Some(AblationKind::NoiseSize) => {
            charts.push(("accuracy-vs-eps.svg", line_chart("Accuracy vs noise size", "eps", &sweep_series(&records, "eps"))));
        }
        _ => {}
    }
    let curves_path = records_dir.join("curves.json");
    if ablation.is_none() && curves_path.exists() {
        let text = std::fs::read_to_string(&curves_path).map_err(|e| Error::io(&curves_path, e))?;
        let curves: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)?;
        if !curves.is_empty() {
            let series: Vec<(String, Vec<(f64, f64)>)> = curves
                .into_iter()
                .map(|(k, v)| (k, v.iter().enumerate().map(|(i, a)| (i as f64, *a)).collect()))
                .collect();
            charts.push(("accuracy-vs-iterations.svg", line_chart("Accuracy vs attack iterations", "iterations", &series)));
        }
    }
    for (name, svg) in charts {
        let path = out_dir.join(name);
        write_atomic(&path, svg.as_bytes())?;
        let _ = writeln!(md, "![{name}]({name})\n");
        files.push(path);
    }
    if let Some(p) = read_panels(records_dir)? {
        let path = out_dir.join("panels.png");
        write_atomic(&path, &encode_png(&render_panels(&p, cfg.amplification)?)?)?;
        let _ = writeln!(
            md,
            "![panels](panels.png)\n\nColumns: original, attribute-perturbed, joint adversarial, noise ×{}, diversity difference ×{}.\n",
            fmt_setting(cfg.amplification),
            fmt_setting(cfg.amplification)
        );
        files.push(path);
    }
    let path = out_dir.join("report.md");
    write_atomic(&path, md.as_bytes())?;
    files.push(path);
    Ok(ReportOutput { files, markdown: md })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentConfig;
    use crate::harness::store::{ExperimentStore, RunMeta};

    fn rec(d: &str, a: &str, s: &str, acc: f64) -> ExperimentRecord {
        ExperimentRecord::new(d, a, s, acc, "cafe", 0, 2.0).unwrap()
    }

    #[test]
    fn settings_print_compactly() {
        assert_eq!(fmt_setting(0.15000000000000002), "0.15");
        assert_eq!(fmt_setting(0.0), "0");
        assert_eq!(fmt_setting(30.0), "30");
        assert_eq!(fmt_setting(0.025), "0.025");
    }

    #[test]
    fn grid_table_has_a_min_column() {
        let g = Grid::from_records(vec![rec("plain", "identity", "", 0.9), rec("plain", "spa", "", 0.05)]);
        let t = grid_table(&g);
        assert!(t.starts_with("| defense | identity | spa | Min |"));
        assert!(t.contains("| plain | 0.9000 | 0.0500 | 0.0500 |"));
    }

    #[test]
    fn sweep_tables_use_settings_as_columns() {
        let rs = vec![rec("plain", "spa", "eps=0", 0.8), rec("plain", "spa", "eps=0.1", 0.2)];
        let t = ablation_table(AblationKind::NoiseSize, &rs);
        assert!(t.contains("| defense | attack | eps=0 | eps=0.1 |"));
        assert!(t.contains("| plain | spa | 0.8000 | 0.2000 |"));
        let series = sweep_series(&rs, "eps");
        assert_eq!(series, vec![("plain/spa".to_string(), vec![(0.0, 0.8), (0.1, 0.2)])]);
    }

    #[test]
    fn empty_record_sets_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("records.json"), "[]").unwrap();
        assert!(matches!(report(dir.path(), dir.path(), &ReportConfig::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn regenerating_from_persisted_records_is_byte_identical() {
        let root = tempfile::tempdir().unwrap();
        let store = ExperimentStore::new(root.path());
        let cfg = ExperimentConfig::default();
        let run = store.run_dir(&cfg, "noise-size");
        let rs = vec![rec("plain", "spa", "eps=0", 0.8), rec("plain", "spa", "eps=0.05", 0.4), rec("plain", "pgd", "eps=0", 0.8)];
        let meta = RunMeta { name: "t".into(), kind: "noise-size".into(), config_hash: cfg.hash() };
        store.save_run(&run, &cfg, &meta, &rs).unwrap();
        let (a, b) = (root.path().join("a"), root.path().join("b"));
        report(&run, &a, &ReportConfig::default()).unwrap();
        report(&run, &b, &ReportConfig::default()).unwrap();
        // A copy holding only the CSV renders the same report.
        let csv_only = root.path().join("csv");
        std::fs::create_dir_all(&csv_only).unwrap();
        std::fs::copy(run.join("records.csv"), csv_only.join("records.csv")).unwrap();
        std::fs::copy(run.join("meta.json"), csv_only.join("meta.json")).unwrap();
        let c = root.path().join("c");
        report(&csv_only, &c, &ReportConfig::default()).unwrap();
        for f in ["report.md", "accuracy-vs-eps.svg"] {
            let fa = std::fs::read(a.join(f)).unwrap();
            assert_eq!(fa, std::fs::read(b.join(f)).unwrap(), "{f}");
            assert_eq!(fa, std::fs::read(c.join(f)).unwrap(), "{f} from CSV");
        }
    }
}
