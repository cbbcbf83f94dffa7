use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMOKE: &str = r#"
seed = 0

[pretrain]
steps = 400

[pipeline]
pair_budget = 12
min_pairs = 1

[dpo]
steps = 10

[eval]
strengths = [0.0, 0.9]
include_sft = false
steps = [5, 10]
budgets = [8]
budget_iterations = 1
ablation_iterations = 1
"#;

fn grath(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grath"))
        .args(args)
        .current_dir(cwd)
        .env("GRATH_OUTPUT_ROOT", cwd.join("root"))
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn smoke_config(dir: &Path) -> PathBuf {
    let p = dir.join("smoke.toml");
    std::fs::write(&p, SMOKE).unwrap();
    p
}

fn entries(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn unknown_flag_is_a_usage_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let before = entries(dir.path());
    let out = grath(&["truthify", "--bogus", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(entries(dir.path()), before);
    assert_eq!(grath(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(grath(&[], dir.path()).status.code(), Some(1));
}

#[test]
fn help_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = grath(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("truthify"));
}

#[test]
fn bad_config_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[dpo]\nbetta = 0.2\n").unwrap();
    let out = grath(&["world", "gen", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("betta"));
    let out = grath(&["eval", "--model", "missing.grth"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergent_pretraining_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.toml");
    std::fs::write(&cfg, "[pretrain]\nsteps = 5\nwarmup_steps = 1\nlearning_rate = 1e30\n").unwrap();
    let out = grath(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", "p"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn world_gen_uses_the_output_root_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    ok(&grath(&["world", "gen", "--seed", "4"], dir.path()));
    let out = dir.path().join("root/world-seed4");
    for f in [
        "world.json",
        "benchmark.jsonl",
        "corpus.jsonl",
        "in-domain-test.jsonl",
        "ood-questions.jsonl",
        "config.resolved.toml",
    ] {
        assert!(out.join(f).exists(), "{}", f);
    }
    let resolved = std::fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(resolved.starts_with("seed = 4"));
    let bench = std::fs::read_to_string(out.join("benchmark.jsonl")).unwrap();
    assert_eq!(bench.lines().count(), 52);
}

#[test]
fn pipeline_commands_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = smoke_config(d);
    let cfg = cfg.to_str().unwrap();
    ok(&grath(&["pretrain", "--config", cfg, "--out", "pre"], d));
    let model = "pre/pretrained.grth";
    assert!(d.join("pre/pretrain_loss.csv").exists());

    ok(&grath(&["truthify", "--config", cfg, "--model", model, "--iterations", "1", "--out", "run"], d));
    let ledger: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/ledger.json")).unwrap()).unwrap();
    assert_eq!(ledger["phases"].as_array().unwrap().len(), 2);
    let resolved = std::fs::read_to_string(d.join("run/config.resolved.toml")).unwrap();
    assert!(resolved.contains("iterations = 1"));

    let json = ok(&grath(&["report", "--run", "run", "--format", "json"], d));
    let csv_text = ok(&grath(&["report", "--run", "run", "--format", "csv"], d));
    let md = ok(&grath(&["report", "--run", "run", "--format", "markdown"], d));
    assert_eq!(json, ok(&grath(&["report", "--run", "run", "--format", "json"], d)));
    let from_json: Vec<serde_json::Value> = serde_json::from_str(&json).unwrap();
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let header = rdr.headers().unwrap().clone();
    let records: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(records.len(), 2);
    for (row, rec) in from_json.iter().zip(&records) {
        for (name, field) in header.iter().zip(rec.iter()) {
            if let Some(x) = row[name].as_f64() {
                assert_eq!(field.parse::<f64>().unwrap(), x, "{}", name);
            }
        }
    }
    assert_eq!(md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| DPO")).count(), 2);

    let report = ok(&grath(&["eval", "--config", cfg, "--model", "run/phase-1/model.grth", "--heldout"], d));
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    let mc1 = report["mc1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mc1));
    assert!(report["heldout_perplexity"].as_f64().unwrap() > 1.0);

    let audit = ok(&grath(&["audit", "--config", cfg, "--pairs", "run/phase-0/pairs.jsonl"], d));
    let audit: serde_json::Value = serde_json::from_str(&audit).unwrap();
    assert!(audit["overall"]["pairs"].as_u64().unwrap() >= 1);

    ok(&grath(&["datagen", "--config", cfg, "--model", model, "--out", "data"], d));
    assert_eq!(
        std::fs::read(d.join("data/pairs.jsonl")).unwrap(),
        std::fs::read(d.join("run/phase-0/pairs.jsonl")).unwrap()
    );

    let gap = ok(&grath(&["sweep", "domain-gap", "--config", cfg, "--model", model, "--out", "gap"], d));
    assert_eq!(gap.lines().count(), 3);
    assert!(gap.starts_with("strength,method,mc1"));
    let steps = ok(&grath(&["sweep", "steps", "--config", cfg, "--model", model, "--out", "steps", "--parallel"], d));
    assert_eq!(steps.lines().count(), 3);
    let budget = ok(&grath(&["sweep", "budget", "--config", cfg, "--model", model, "--out", "budget"], d));
    assert_eq!(budget.lines().count(), 3);
    let abl = ok(&grath(&["ablate", "reference", "--config", cfg, "--model", model, "--out", "abl"], d));
    assert_eq!(abl.lines().count(), 5);
    assert!(abl.contains("fixed-pretrained"));
}

#[test]
fn report_on_an_incomplete_run_fails() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(
        run.join("ledger.json"),
        r#"{"iterations": 1, "reference_policy": "current-base", "phases": [], "final_checkpoint": ""}"#,
    )
    .unwrap();
    let out = grath(&["report", "--run", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
