use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "env": {"grid_size": 6, "n_agents": 2, "n_ghosts": 2, "n_trees": 1, "n_obstacles": 1, "episode_length": 10},
  "train": {"total_env_steps": 30, "rollout_length": 10, "ppo_epochs": 1, "minibatches": 1,
            "belief_width": 6, "message_width": 5, "key_width": 5, "hidden": 8, "slots": 2},
  "variant": "SAF+SP",
  "seeds": [0]
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_saf-marl"));
    c.env_remove("SAF_MARL_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let (header, rows) = csv_rows(path);
    let k = header.iter().position(|h| h == name).unwrap();
    rows.iter().map(|r| r[k].parse().unwrap()).collect()
}

#[test]
fn train_missing_config_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["train", "--config", s(&tmp.path().join("nope.json")), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2);
    let bad = write_config(tmp.path(), "bad.json", r#"{"train": {"lr": -1}}"#);
    assert_eq!(code(&run(&["train", "--config", s(&bad), "--out", s(tmp.path())])), 2);
    let typo = write_config(tmp.path(), "typo.json", r#"{"trian": {}}"#);
    assert_eq!(code(&run(&["train", "--config", s(&typo), "--out", s(tmp.path())])), 2);
}

#[test]
fn zero_step_training_writes_header_only() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &TINY.replace("\"total_env_steps\": 30", "\"total_env_steps\": 0"));
    let out = tmp.path().join("run");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("update_idx,env_steps,mean_return,std_return,mean_selection_kl,selector_entropy,policy_usage_0,"));
    assert!(text.trim_end().ends_with("channel_cost_per_step,loss_policy,loss_value,loss_entropy,loss_kl,wall_time_s"));
}

#[test]
fn training_twice_gives_identical_bytes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&a)])), 0);
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&b)])), 0);
    let ma = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 1 + 3);
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
    assert!(a.join("run.json").exists());
}

#[test]
fn output_directory_from_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", TINY);
    let target = tmp.path().join("from_env");
    let o = bin().args(["train", "--config", s(&cfg)]).env("SAF_MARL_OUT", &target).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(target.join("metrics.csv").exists());
    // the flag wins over the environment
    let flagged = tmp.path().join("flag");
    let o = bin()
        .args(["train", "--config", s(&cfg), "--out", s(&flagged)])
        .env("SAF_MARL_OUT", tmp.path().join("ignored"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(flagged.join("metrics.csv").exists());
    assert!(!tmp.path().join("ignored").exists());
}

#[test]
fn single_cell_matrix() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", TINY);
    let out = tmp.path().join("m");
    let o = run(&["matrix", "--config", s(&cfg), "--variants", "I", "--agents", "2", "--seeds", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (_, rows) = csv_rows(&out.join("runs.csv"));
    assert_eq!(rows.len(), 1);
    assert!(out.join("i_n2_s0").join("metrics.csv").exists());
}

#[test]
fn matrix_runs_every_cell_and_summarizes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", TINY);
    let out = tmp.path().join("m");
    let o = run(&[
        "matrix", "--config", s(&cfg), "--variants", "SAF+SP,I", "--agents", "2,5", "--seeds", "5", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&out.join("runs.csv"));
    assert_eq!(rows.len(), 20);
    let hash_col = header.iter().position(|h| h == "config_hash").unwrap();
    let csv_col = header.iter().position(|h| h == "metrics_csv").unwrap();

    // recompute each group's mean final return from the per-run metrics
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        assert_eq!(r[hash_col].len(), 64);
        let returns = column(&out.join(&r[csv_col]), "mean_return");
        assert_eq!(returns.len(), 3);
        let k = ((returns.len() as f64 * 0.1).ceil() as usize).max(1);
        let tail = &returns[returns.len() - k..];
        groups.entry((r[0].clone(), r[1].clone())).or_default().push(tail.iter().sum::<f64>() / k as f64);
    }
    assert_eq!(groups.len(), 4);
    let (sh, summary) = csv_rows(&out.join("summary.csv"));
    assert_eq!(sh.join(","), "variant,n_agents,runs,mean_final_return,std_final_return");
    assert_eq!(summary.len(), 4);
    for row in summary {
        let finals = &groups[&(row[0].clone(), row[1].clone())];
        assert_eq!(row[2], "5");
        let mean = finals.iter().sum::<f64>() / 5.0;
        let std = (finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((row[3].parse::<f64>().unwrap() - mean).abs() <= 1e-9);
        assert!((row[4].parse::<f64>().unwrap() - std).abs() <= 1e-9);
    }
}

#[test]
fn unknown_variant_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", TINY);
    let o = run(&["matrix", "--config", s(&cfg), "--variants", "SAF,XYZ", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("XYZ"));
}

#[test]
fn config_hash_ignores_key_order() {
    let tmp = TempDir::new().unwrap();
    let a = write_config(tmp.path(), "a.json", TINY);
    let permuted = r#"{
  "seeds": [0],
  "variant": "SAF+SP",
  "train": {"slots": 2, "hidden": 8, "key_width": 5, "message_width": 5, "belief_width": 6,
            "minibatches": 1, "ppo_epochs": 1, "rollout_length": 10, "total_env_steps": 30},
  "env": {"episode_length": 10, "n_obstacles": 1, "n_trees": 1, "n_ghosts": 2, "n_agents": 2, "grid_size": 6}
}"#;
    let b = write_config(tmp.path(), "b.json", permuted);
    let (da, db) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&run(&["train", "--config", s(&a), "--out", s(&da)])), 0);
    assert_eq!(code(&run(&["train", "--config", s(&b), "--out", s(&db)])), 0);
    let hash = |d: &Path| -> String {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run.json")).unwrap()).unwrap();
        v["config_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(hash(&da), hash(&db));
    assert_eq!(fs::read(da.join("metrics.csv")).unwrap(), fs::read(db.join("metrics.csv")).unwrap());
}

#[test]
fn plot_single_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", TINY);
    let runs = tmp.path().join("runs");
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&runs.join("one"))])), 0);
    let svg_path = tmp.path().join("curves.svg");
    let o = run(&["plot", "--runs", s(&runs), "--out", s(&svg_path)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svg = fs::read_to_string(&svg_path).unwrap();
    let doc = roxmltree::Document::parse(&svg).expect("well-formed SVG");
    let has_class = |n: &roxmltree::Node, c: &str| n.attribute("class") == Some(c);
    let curves: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("polyline") && has_class(n, "curve")).collect();
    assert_eq!(curves.len(), 1);
    assert_eq!(doc.descendants().filter(|n| has_class(n, "band")).count(), 0);
    let vertices = curves[0].attribute("points").unwrap().split_whitespace().count();
    let (_, rows) = csv_rows(&runs.join("one").join("metrics.csv"));
    assert_eq!(vertices, rows.len());
}

#[test]
fn plot_multiple_seeds_draws_a_band() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", TINY);
    let runs = tmp.path().join("runs");
    let o = run(&["matrix", "--config", s(&cfg), "--variants", "I", "--seeds", "2", "--out", s(&runs)]);
    assert_eq!(code(&o), 0);
    let svg_path = tmp.path().join("curves.svg");
    assert_eq!(code(&run(&["plot", "--runs", s(&runs), "--out", s(&svg_path)])), 0);
    let svg = fs::read_to_string(&svg_path).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.descendants().filter(|n| n.attribute("class") == Some("band")).count(), 1);
}

#[test]
fn plot_of_empty_directory_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = run(&["plot", "--runs", s(&empty), "--out", s(&tmp.path().join("x.svg"))]);
    assert_eq!(code(&o), 2);
    let o = run(&["plot", "--runs", s(&tmp.path().join("absent")), "--out", s(&tmp.path().join("x.svg"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn check_passes_and_catches_a_broken_softmax() {
    let o = run(&["check"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert!(stdout.lines().all(|l| l.starts_with("PASS")));
    let o = run(&["check", "--inject-softmax-fault"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL gradients"));
}
