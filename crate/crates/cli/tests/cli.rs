use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
name = "cli-tiny"
repeat = 3

[dataset]
source = "synthetic"
n = 150
p = 6
latent_dim = 3
num_components = 4
noise_std = 0.2
seed = 11
tasks = [
    { id = "c", kind = "classification", num_classes = 3 },
    { id = "r", kind = "regression" },
]

[train]
learning_rate = 0.01
batch_size = 16
max_steps = 30
seed = 2

[train.model]
encoder_hidden = [8]
rep_dim = 4
head_hidden = []

[train.dgr]
lambda = 1e-4
"#;

fn dgr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgr")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_one_entry_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let out = tmp.path().join("out");
    let o = dgr(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--jobs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = json(&out.join("report.json"));
    assert_eq!(report["format"], "dgr-report/1");
    assert_eq!(report["seeds"].as_array().unwrap().len(), 3);
    assert_eq!(report["aggregate"]["num_seeds"], 3);
    assert!(report["seeds"][0]["universality"].is_null());
    assert!(report["trend"].is_null());
    for i in 0..3 {
        assert!(out.join(format!("seed_{i}.json")).exists());
        assert!(out.join(format!("history_seed_{i}.jsonl")).exists());
    }
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2 + 2);
}

#[test]
fn report_subcommand_recomputes_the_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let out = tmp.path().join("out");
    assert!(dgr(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let o = dgr(&["report", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = json(&out.join("report.json"));
    assert_eq!(json(&out.join("aggregate.json")), report["aggregate"]);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(dgr(&["train", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(dgr(&["train", "--config", &cfg, "--out", b.to_str().unwrap(), "--jobs", "3"]).status.success());
    for f in ["report.json", "summary.csv", "history_seed_1.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(dgr(&["train", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(dgr(&["train", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "99"]).status.success());
    assert_eq!(json(&b.join("report.json"))["seeds"][0]["seed"], 99);
    assert_ne!(std::fs::read(a.join("report.json")).unwrap(), std::fs::read(b.join("report.json")).unwrap());
}

#[test]
fn grid_writes_sub_reports_and_a_winner() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &CONFIG.replace("repeat = 3", "repeat = 1"));
    let out = tmp.path().join("grid");
    let o = dgr(&["grid", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let g = json(&out.join("grid.json"));
    assert_eq!(g["rows"].as_array().unwrap().len(), 3);
    for l in ["1e-5", "1e-6", "1e-7"] {
        assert!(out.join(format!("lambda_{l}")).join("report.json").exists(), "{l}");
    }
    let best = g["best_lambda"].as_f64().unwrap();
    assert!([1e-5, 1e-6, 1e-7].contains(&best));

    let single = tmp.path().join("single");
    let o = dgr(&["grid", "--config", &cfg, "--out", single.to_str().unwrap(), "--lambda", "3e-4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&single.join("grid.json"))["best_lambda"].as_f64(), Some(3e-4));
}

#[test]
fn evaluation_subcommands_fill_their_sections() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &CONFIG.replace("repeat = 3", "repeat = 1"));
    let u = tmp.path().join("u");
    let o = dgr(&["universality", "--config", &cfg, "--out", u.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let entries = json(&u.join("report.json"))["seeds"][0]["universality"].as_array().unwrap().len();
    assert_eq!(entries, 2 * 3);
    let p = tmp.path().join("p");
    let o = dgr(&["probe", "--config", &cfg, "--out", p.to_str().unwrap(), "--k", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&p.join("report.json"))["seeds"][0]["probe"].as_array().unwrap().len(), 2);
}

#[test]
fn trend_reports_a_correlation() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dgr(&["trend", "--samples", "30", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("spearman"));
    assert_eq!(json(&tmp.path().join("trend.json"))["samples"].as_array().unwrap().len(), 30);
    assert_eq!(dgr(&["trend", "--samples", "1"]).status.code(), Some(1));
}

#[test]
fn config_errors_exit_with_one_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &CONFIG.replace("repeat = 3", "repeat = 0"));
    let o = dgr(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("repeat"), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), &CONFIG.replace("batch_size = 16", "batch_sise = 16"));
    let o = dgr(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("batch_sise"), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), CONFIG);
    let o = dgr(&["train", "--config", &cfg, "--lambda", "-1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lambda"), "{}", stderr(&o));

    assert_eq!(dgr(&["train", "--config", "/nonexistent/exp.toml"]).status.code(), Some(1));
    assert_eq!(dgr(&["train"]).status.code(), Some(1));
    assert_eq!(dgr(&["report", tmp.path().to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn divergence_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let text = CONFIG.replace("learning_rate = 0.01", "learning_rate = 1e300").replace(
        "seed = 2\n",
        "seed = 2\n\n[train.optimizer]\nkind = \"sgd\"\n",
    );
    let cfg = write_config(tmp.path(), &text);
    let o = dgr(&["train", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn shipped_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.toml");
    let text = std::fs::read_to_string(path).unwrap();
    let cfg = dgr_core::ExperimentConfig::from_toml_str(&text).unwrap();
    assert_eq!(cfg.repeat, 5);
    assert_eq!(cfg.train.dgr.num_dummies, 3);
}
