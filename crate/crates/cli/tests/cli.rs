use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use vla_cli::config::{RunConfig, FLAGGED};

const TINY: &str = "\
grid_size = 6
d_model = 8
n_layers = 2
n_heads = 2
d_ff = 16
max_seq_len = 256
bins = 16
batch = 4
freeze = 1
eval_episodes = 2
eval_every = 2
save_steps = 3
reasoning_budget = 12
k = 3
";

fn vla(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vla"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn last_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().expect("some output");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {line}"))
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn help_lists_every_flag_with_its_default() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(vla(&["--help"], dir.path()));
    let help = String::from_utf8(out.stdout).unwrap();
    let defaults = serde_json::to_value(RunConfig::default()).unwrap();
    for (key, flag) in FLAGGED {
        let start = help.find(&format!("{flag} <")).unwrap_or_else(|| panic!("{flag} missing from help"));
        let rest = &help[start..];
        let end = rest[2..].find("\n  -").map_or(rest.len(), |i| i + 2);
        let entry = &rest[..end];
        let want = match &defaults[key] {
            Value::String(s) => s.clone(),
            v => v.to_string(),
        };
        assert!(entry.contains(&format!("[default: {want}]")), "{flag}: help says `{entry}`, default is {want}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = vla(&["--bogus", "plot"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"], "usage");
    assert!(err["message"].as_str().unwrap().contains("--bogus"));
}

#[test]
fn unknown_config_key_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "seed = 1\nlamda_r = 0.2\n").unwrap();
    let out = vla(&["--config", "c.toml", "plot"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim().lines().count(), 1);
    let err: Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(err["error"], "runtime");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("lamda_r") && msg.contains("line 2"), "{msg}");
}

#[test]
fn full_pipeline_on_a_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), TINY).unwrap();
    let base = ["--config", "c.toml", "--out", "run"];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str]| {
        let args = with(extra);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        last_json(&ok(vla(&refs, d)))
    };

    let gen = run(&["gen-data", "--n", "6"]);
    assert_eq!(gen["stats"]["episodes"], 6);
    assert!(d.join("run/stats.json").exists());

    let ann = run(&["annotate"]);
    assert_eq!(ann["report"]["steps_failed"], 0);
    assert_eq!(ann["report"]["steps_annotated"], ann["report"]["steps_total"]);

    let tr = run(&["train"]);
    let ckpt = tr["checkpoints"].as_array().unwrap().last().unwrap().as_str().unwrap().to_string();
    assert!(d.join(&ckpt).exists());
    assert!(d.join("run/metrics.jsonl").exists());
    assert!(d.join("run/eval.jsonl").exists());

    let ev = run(&["eval", "--ckpt", &ckpt]);
    assert!(ev["metrics"]["action_accuracy"].is_number());

    let ro = run(&["rollout", "--ckpt", &ckpt, "--n", "2", "--family", "pick"]);
    assert_eq!(ro["summary"]["n"], 2);
    assert!(d.join("run/rollout_pick.json").exists());

    let first_episode: Value = serde_json::from_str(
        std::fs::read_to_string(d.join("run/episodes.jsonl")).unwrap().lines().next().unwrap(),
    )
    .unwrap();
    let id = first_episode["episode_id"].as_str().unwrap();
    let viz = run(&["viz-attn", "--ckpt", &ckpt, "--episode", id, "--step", "0"]);
    let maps = viz["maps"].as_array().unwrap();
    assert_eq!(maps.len(), 7);
    for m in maps {
        assert!(d.join(m["json"].as_str().unwrap()).exists());
        assert!(d.join(m["overlay"].as_str().unwrap()).exists());
    }

    let plot = run(&["plot"]);
    assert_eq!(plot["written"].as_array().unwrap().len(), 3);
    let svg = std::fs::read_to_string(d.join("run/loss.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn missing_episode_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = vla(&["--out", "nowhere", "annotate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"], "runtime");
}
