use std::process::Command;

use lscd_tta::harness::{
    emit_report, render_report, render_sweep, run_ablation, run_experiment, run_sensitivity,
    ExperimentConfig, ReportFormat, SweepGrid, REPORT_COLUMNS,
};
use lscd_tta::{LossChoice, LossWeights};

const SMALL: &str = r#"
classes = 4
feature_dim = 8
samples_per_class = 50
stream_length = 240
translation = 3.0
hidden = [16]
train_epochs = 6
seeds = [0, 1, 2]
methods = ["none", "lscd", "entropy"]
timing = false
"#;

fn small() -> ExperimentConfig {
    ExperimentConfig::parse(SMALL).unwrap()
}

#[test]
fn aggregates_follow_the_std_convention() {
    let report = run_experiment(&small()).unwrap();
    assert!(report.failures.is_empty());
    assert_eq!(report.records.len(), 9);
    let methods: Vec<&str> = report.records.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["entropy"; 3].iter().chain(&["lscd"; 3]).chain(&["none"; 3]).copied().collect::<Vec<_>>());
    for group in report.records.chunks(3) {
        let accs: Vec<f64> = group.iter().map(|r| r.online_accuracy).collect();
        let mean = accs.iter().sum::<f64>() / 3.0;
        let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0;
        for r in group {
            assert!((r.acc_mean - mean).abs() <= 1e-12);
            assert!((r.acc_std.unwrap() - var.sqrt()).abs() <= 1e-12);
            assert_eq!(r.batches, 240 / 32 + 1);
            assert!(r.ms_per_item.is_none());
            assert_eq!(r.per_batch_accuracy.len(), r.batches);
        }
    }
    assert_eq!(report.seeds.len(), 3);
    for s in &report.seeds {
        assert!(s.source_accuracy > 0.5);
    }
}

#[test]
fn reports_are_reproducible_and_formats_agree() {
    let cfg = small();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    let csv_a = render_report(&a.records, &a.config_hash, ReportFormat::Csv, 1);
    let csv_b = render_report(&b.records, &b.config_hash, ReportFormat::Csv, 2);
    assert_eq!(csv_a.lines().skip(1).collect::<Vec<_>>(), csv_b.lines().skip(1).collect::<Vec<_>>());
    assert_ne!(csv_a, csv_b);

    let json: serde_json::Value =
        serde_json::from_str(&render_report(&a.records, &a.config_hash, ReportFormat::Json, 1)).unwrap();
    let rows: Vec<&str> = csv_a.lines().skip(3).collect();
    let jrows = json["records"].as_array().unwrap();
    assert_eq!(rows.len(), jrows.len());
    for (line, j) in rows.iter().zip(jrows) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], j["method"].as_str().unwrap());
        assert_eq!(cells[1].parse::<u64>().unwrap(), j["seed"].as_u64().unwrap());
        assert_eq!(cells[3].parse::<f64>().unwrap(), j["online_accuracy"].as_f64().unwrap());
        assert_eq!(cells[4].parse::<f64>().unwrap(), j["acc_mean"].as_f64().unwrap());
        assert_eq!(cells[5].parse::<f64>().unwrap(), j["acc_std"].as_f64().unwrap());
    }
    let keys: Vec<&str> = jrows[0].as_object().unwrap().keys().map(|k| k.as_str()).collect();
    let mut expect: Vec<&str> = REPORT_COLUMNS.split(',').collect();
    expect.sort();
    let mut keys = keys;
    keys.sort();
    assert_eq!(keys, expect);
}

#[test]
fn failing_seeds_are_recorded() {
    let cfg = ExperimentConfig::parse(
        "task = \"csv\"\nsource_csv = \"/nonexistent/s.csv\"\ntarget_csv = \"/nonexistent/t.csv\"\nseeds = [4, 5]",
    )
    .unwrap();
    let report = run_experiment(&cfg).unwrap();
    assert!(report.records.is_empty());
    assert_eq!(report.failures.len(), 2);
    assert_eq!(report.failures[0].0, 4);
    assert!(report.failures[0].1.contains("/nonexistent/s.csv"));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty.csv");
    let warnings = emit_report(&report.records, &out, ReportFormat::Csv, &report.config_hash).unwrap();
    assert_eq!(warnings.len(), 1);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().last(), Some(REPORT_COLUMNS));
}

#[test]
fn ablation_has_the_eight_rows() {
    let cfg = ExperimentConfig { seeds: vec![0, 1], ..small() };
    let report = run_ablation(&cfg).unwrap();
    let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["Baseline", "A", "B", "C", "D", "E", "F", "G"]);
    let comps: Vec<(bool, bool, bool)> = report.rows.iter().map(|r| r.components).collect();
    assert_eq!(
        comps,
        [
            (false, false, false),
            (true, false, false),
            (false, true, false),
            (false, false, true),
            (true, true, false),
            (true, false, true),
            (false, true, true),
            (true, true, true),
        ]
    );
    for row in &report.rows {
        assert_eq!(row.per_task.len(), 2);
    }
    // G is the full objective
    let full = run_experiment(&ExperimentConfig { seeds: vec![0, 1], ..small() }).unwrap();
    assert_eq!(report.rows[7].average, full.mean_accuracy("lscd").unwrap());
    assert_eq!(report.rows[0].average, full.mean_accuracy("none").unwrap());
    // omitted terms get weight zero
    let w = LossWeights::default();
    let d = LossChoice::WcseBcse.objective(&w, false).unwrap();
    assert_eq!((d.wcse, d.bcse, d.lsd), (w.alpha, w.beta, 0.0));
}

#[test]
fn sweep_counts_and_consistency() {
    let base = small();
    let single = run_sensitivity(&base).unwrap();
    assert_eq!(single.points.len(), 1);
    let lscd = run_experiment(&base).unwrap();
    assert_eq!(single.points[0].mean, lscd.mean_accuracy("lscd").unwrap());
    let per_seed: Vec<f64> = lscd.records.iter().filter(|r| r.method == "lscd").map(|r| r.online_accuracy).collect();
    assert_eq!(single.points[0].per_seed.iter().map(|p| p.1).collect::<Vec<_>>(), per_seed);

    let cfg = ExperimentConfig {
        sweep: SweepGrid { alpha: vec![0.1, 0.25, 0.5], ..SweepGrid::single(LossWeights::default()) },
        ..base
    };
    let sweep = run_sensitivity(&cfg).unwrap();
    assert_eq!(sweep.points.len(), 3);
    assert_eq!(sweep.points.iter().map(|p| p.per_seed.len()).sum::<usize>(), 9);
    assert_eq!(sweep.points.iter().filter(|p| p.best).count(), 1);
    let best = sweep.points.iter().find(|p| p.best).unwrap();
    assert!(sweep.points.iter().all(|p| p.mean <= best.mean));

    let text = render_sweep(&sweep, ReportFormat::Csv, 0);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[1], "alpha,beta,tau,epsilon,seed,accuracy,best");
    assert_eq!(lines.len(), 2 + 9 + 3);
    assert_eq!(lines.iter().filter(|l| l.contains(",mean,")).count(), 3);
    assert_eq!(lines.iter().filter(|l| l.ends_with(",1")).count(), 1);
}

fn cli(args: &[&str], dir: &std::path::Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lscd-tta"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

#[test]
fn cli_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();

    let o = cli(&["gen-data", "--config", "small.toml", "--seed", "2", "--out", "data"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("data/source.csv").exists() && d.join("data/target.csv").exists());

    let o = cli(&["train-source", "--config", "small.toml", "--seed", "2", "--out", "m.ckpt"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // the CSV task plus the checkpoint reproduces the synthetic run for that seed
    std::fs::write(
        d.join("csv.toml"),
        "task = \"csv\"\nsource_csv = \"data/source.csv\"\ntarget_csv = \"data/target.csv\"\n\
         checkpoint = \"m.ckpt\"\nhidden = [16]\nmethods = [\"none\", \"lscd\"]\ntiming = false\n",
    )
    .unwrap();
    let o = cli(&["adapt", "--config", "csv.toml", "--seed", "2", "--out", "from_csv.csv"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = cli(&["adapt", "--config", "small.toml", "--seed", "2", "--out", "direct.json"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let from_csv = std::fs::read_to_string(d.join("from_csv.csv")).unwrap();
    let direct: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("direct.json")).unwrap()).unwrap();
    let lscd_csv: f64 = from_csv.lines().find(|l| l.starts_with("lscd,")).unwrap().split(',').nth(3).unwrap().parse().unwrap();
    let lscd_json = direct["records"].as_array().unwrap().iter().find(|r| r["method"] == "lscd").unwrap()["online_accuracy"].as_f64().unwrap();
    assert_eq!(lscd_csv, lscd_json);

    let o = cli(&["ablate", "--config", "small.toml", "--seed", "0", "--out", "ab.csv"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(d.join("ab.csv")).unwrap();
    assert_eq!(table.lines().count(), 2 + 8);
    assert!(d.join("ab.records.csv").exists());

    let o = cli(&["sweep", "--config", "small.toml", "--seed", "0", "--out", "sw.csv"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::write(d.join("bad.toml"), "alpah = 1\n").unwrap();
    let o = cli(&["adapt", "--config", "bad.toml"], d);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field"));
}

#[test]
fn shipped_configs_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 1);
    let acc = ExperimentConfig::load(root.join("acceptance.toml")).unwrap();
    assert_eq!(acc.config_hash(), ExperimentConfig::acceptance().config_hash());
}
