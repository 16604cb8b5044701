use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use neurotrain::campaign::parse_jsonl;
use neurotrain::{MatrixReport, Status};
use neurotrain_cli::{ConfigFile, Experiment};
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neurotrain"))
}

fn synth(classes: usize, inputs: usize, timesteps: usize) -> Value {
    json!({"synth": {"classes": classes, "inputs": inputs, "timesteps": timesteps, "noise": 0.05,
                     "train_per_class": 20, "test_per_class": 10}})
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn minimal_campaign() -> Value {
    json!({
        "mode": "campaign",
        "trainers": ["bptt"],
        "models": [{"kind": "fc", "layer_sizes": [12, 3]}],
        "datasets": [synth(3, 12, 6)],
        "epochs": 1,
        "seed": 4,
        "training": {"batch_size": 8}
    })
}

fn custom(trainer: &str, model: Value, epochs: usize) -> Value {
    json!({
        "mode": "custom",
        "trainer": trainer,
        "model": model,
        "dataset": synth(3, 12, 6),
        "epochs": epochs,
        "seed": 11,
        "hyperparams": {"lr": 0.3},
        "training": {"batch_size": 8}
    })
}

#[test]
fn minimal_campaign_writes_one_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &minimal_campaign());
    let out = dir.path().join("out");
    let o = run(&[
        "campaign",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let records = parse_jsonl(&fs::read_to_string(out.join("results.jsonl")).unwrap()).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].status, Status::Ok);
    assert!(records[0].best);
    let m = MatrixReport::from_csv(&fs::read_to_string(out.join("matrix.csv")).unwrap(), "test_acc").unwrap();
    assert_eq!(m.trainers, vec!["bptt".to_string()]);
    assert!(fs::read_to_string(out.join("summary.txt")).unwrap().contains("1 ok"));
}

#[test]
fn parallelism_changes_only_timing() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal_campaign();
    v["trainers"] = json!(["bptt", "eprop", "dfa"]);
    v["trials"] = json!(2);
    let cfg = write_config(dir.path(), "c.json", &v);
    let mut masked = Vec::new();
    for p in ["1", "4"] {
        let out = dir.path().join(format!("p{p}"));
        let o = run(&[
            "campaign",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--parallelism",
            p,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let recs = parse_jsonl(&fs::read_to_string(out.join("results.jsonl")).unwrap()).unwrap();
        assert_eq!(recs.len(), 6);
        masked.push(recs.iter().map(|r| r.masked().to_json_line()).collect::<Vec<_>>());
    }
    assert_eq!(masked[0], masked[1]);
}

#[test]
fn missing_dataset_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal_campaign();
    v["models"] = json!([{"kind": "fc", "layer_sizes": [784, 10]}]);
    v["datasets"] = json!(["mnist"]);
    let cfg = write_config(dir.path(), "c.json", &v);
    let empty = dir.path().join("nodata");
    fs::create_dir(&empty).unwrap();
    let o = run(&[
        "campaign",
        "--config",
        cfg.to_str().unwrap(),
        "--data-dir",
        empty.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains(empty.join("mnist").to_str().unwrap()),
        "{}",
        stderr(&o)
    );
}

#[test]
fn unknown_key_is_named_with_its_location() {
    let mut v = minimal_campaign();
    v["models"][0]["layer_size"] = json!([1]);
    let e = ConfigFile::parse(&v.to_string(), "c.json").unwrap_err();
    assert_eq!(e.location, "`models[0].layer_size`");
    assert!(e.message.contains("layer_size"), "{e}");

    let mut v = minimal_campaign();
    v["epoch"] = json!(3);
    let e = ConfigFile::parse(&v.to_string(), "c.json").unwrap_err();
    assert!(e.message.contains("`epoch`"), "{e}");

    let mut v = minimal_campaign();
    v["training"]["encoder"] = json!({"timesteps": 4, "rate": 0.5});
    let e = ConfigFile::parse(&v.to_string(), "c.json").unwrap_err();
    assert!(e.location.contains("training.encoder"), "{e}");
    assert!(e.message.contains("rate"), "{e}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &v);
    let o = run(&["campaign", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("training.encoder"), "{}", stderr(&o));
}

#[test]
fn malformed_configs_are_rejected() {
    for (text, needle) in [
        ("{\"mode\": \"campaign\",", "line 1"),
        ("[1, 2]", "JSON object"),
        ("{\"trainers\": []}", "missing key `mode`"),
        ("{\"mode\": \"sweep\"}", "unknown mode"),
        ("{\"mode\": \"campaign\", \"trainers\": [\"nope\"], \"models\": [], \"datasets\": [], \"epochs\": 1}", "nope"),
        ("{\"mode\": \"campaign\", \"trainers\": [], \"models\": [], \"datasets\": [], \"epochs\": 1, \"trials\": 0}", "trials"),
    ] {
        let e = ConfigFile::parse(text, "x.json").unwrap_err();
        assert!(e.to_string().contains(needle), "{text}: {e}");
    }
}

#[test]
fn config_round_trip() {
    let mut camp = minimal_campaign();
    camp["search_space"] = json!({"bptt": {"lr": {"log_uniform": [0.01, 0.5]}}});
    camp["out"] = json!("runs/a");
    let configs = [
        camp,
        custom("eprop", json!({"kind": "rc", "layer_sizes": [12, 8, 3]}), 2),
    ];
    for v in configs {
        let a = ConfigFile::parse(&v.to_string(), "a.json").unwrap();
        let b = ConfigFile::parse(&a.to_json_pretty(), "b.json").unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn run_with_zero_epochs_logs_initial_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "r.json",
        &custom("bptt", json!({"kind": "fc", "layer_sizes": [12, 3]}), 0),
    );
    let o = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("results");
    let log = fs::read_to_string(out.join("training_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], json!(0));
    assert!(out.join("model.ckpt").exists());
    assert_eq!(
        parse_jsonl(&fs::read_to_string(out.join("results.jsonl")).unwrap())
            .unwrap()
            .len(),
        1
    );
}

#[test]
fn rerun_reproduces_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "r.json",
        &custom("eprop", json!({"kind": "fc", "layer_sizes": [12, 10, 3]}), 2),
    );
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        bytes.push(fs::read(out.join("model.ckpt")).unwrap());
    }
    assert!(!bytes[0].is_empty());
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn unsupported_run_names_the_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "r.json", &{
        let mut v = custom("stdp", json!({"kind": "rc", "layer_sizes": [12, 8, 3]}), 1);
        v["hyperparams"] = json!({});
        v
    });
    let o = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("incompatible"), "{}", stderr(&o));
    assert!(stderr(&o).contains("stdp"), "{}", stderr(&o));
}

#[test]
fn mode_must_match_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &minimal_campaign());
    let o = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("campaign"));
}

#[test]
fn paths_are_relative_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("cfg");
    fs::create_dir(&sub).unwrap();
    let mut v = minimal_campaign();
    v["out"] = json!("here");
    let cfg = write_config(&sub, "c.json", &v);
    let o = bin()
        .current_dir(dir.path())
        .args(["campaign", "--config", "cfg/c.json"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(sub.join("here").join("results.jsonl").exists());
    assert!(cfg.exists());
}

#[test]
fn failing_cells_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal_campaign();
    // k above the dataset's 6 timesteps only fails once training starts.
    v["trainers"] = json!(["bptt", "sltt"]);
    v["hyperparams"] = json!({"sltt": {"k": 50}});
    let cfg = write_config(dir.path(), "c.json", &v);
    let out = dir.path().join("out");
    let o = run(&[
        "campaign",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let recs = parse_jsonl(&fs::read_to_string(out.join("results.jsonl")).unwrap()).unwrap();
    let status: Vec<Status> = recs.iter().map(|r| r.status).collect();
    assert_eq!(status, vec![Status::Ok, Status::Failed]);
    assert!(recs[1].message.as_deref().unwrap().contains("k = 50"));
    assert!(fs::read_to_string(out.join("summary.txt"))
        .unwrap()
        .contains("failures"));
}

#[test]
fn report_cases() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal_campaign();
    v["trainers"] = json!(["stdp"]);
    v["models"] = json!([{"kind": "rc", "layer_sizes": [12, 6, 3]}]);
    let cfg = write_config(dir.path(), "c.json", &v);
    let out = dir.path().join("ns");
    let o = run(&[
        "campaign",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let results = out.join("results.jsonl");

    let o = run(&["report", "--results", results.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("N/S"));

    let o = run(&[
        "report",
        "--results",
        results.to_str().unwrap(),
        "--metric",
        "param_count",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("matrix_param_count.csv").exists());

    let o = run(&["report", "--results", results.to_str().unwrap(), "--metric", "accuracy"]);
    assert_eq!(o.status.code(), Some(1));
    for m in neurotrain::campaign::METRICS {
        assert!(stderr(&o).contains(m), "{}", stderr(&o));
    }

    let o = run(&["report", "--results", dir.path().join("none.jsonl").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn parsed_modes() {
    let a = ConfigFile::parse(&minimal_campaign().to_string(), "a").unwrap();
    assert!(matches!(a.experiment, Experiment::Campaign(ref s) if s.trials == 1));
    let b = ConfigFile::parse(
        &custom("dfa", json!({"kind": "fc", "layer_sizes": [12, 3]}), 1).to_string(),
        "b",
    )
    .unwrap();
    assert!(matches!(b.experiment, Experiment::Custom(ref s) if s.trainer == "dfa"));
}

#[test]
fn documented_examples_parse() {
    let doc = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/config.md");
    let text = fs::read_to_string(doc).unwrap();
    let blocks: Vec<&str> = text
        .split("```json")
        .skip(1)
        .map(|b| b.split("```").next().unwrap())
        .collect();
    assert_eq!(blocks.len(), 2);
    for b in blocks {
        ConfigFile::parse(b, "docs/config.md").unwrap();
    }
}
