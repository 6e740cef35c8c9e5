use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;
use tempfile::TempDir;

use trm_core::model::load_checkpoint;

fn trm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trm"))
        .args(args)
        .env_remove("TRM_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn preset(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("presets")
        .join(name)
        .display()
        .to_string()
}

fn grid(seed: usize) -> Vec<Vec<u8>> {
    (0..3).map(|r| (0..3).map(|c| ((seed * 7 + r * 3 + c) % 10) as u8).collect()).collect()
}

fn mirror(g: &[Vec<u8>]) -> Vec<Vec<u8>> {
    g.iter().map(|r| r.iter().rev().copied().collect()).collect()
}

fn mirror_task(seed: usize) -> (serde_json::Value, serde_json::Value) {
    let train: Vec<_> = (0..2)
        .map(|i| json!({"input": grid(seed + i), "output": mirror(&grid(seed + i))}))
        .collect();
    let test = grid(seed + 5);
    (json!({"train": train, "test": [{"input": test}]}), json!([mirror(&test)]))
}

/// Two tiny tasks for pre-training, one new task for post-training.
struct Workspace {
    dir: TempDir,
}

const MODEL: &str = r#"
[model]
hidden_dim = 16
embed_dim = 16
n_trunk_layers = 1
n_heads = 2
ffn_expansion = 2
lower_cycles = 1
higher_cycles = 1
supervision_steps = 1
canvas_side = 4
"#;

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        fs::create_dir(&data).unwrap();
        let (a, a_sol) = mirror_task(0);
        let (b, b_sol) = mirror_task(11);
        let (c, c_sol) = mirror_task(23);
        let write = |name: &str, value: serde_json::Value| fs::write(data.join(name), value.to_string()).unwrap();
        write("pre_challenges.json", json!({"aaaa0001": a, "aaaa0002": b}));
        write("pre_solutions.json", json!({"aaaa0001": a_sol, "aaaa0002": b_sol}));
        write("new_challenges.json", json!({"bbbb0001": c}));
        write("new_solutions.json", json!({"bbbb0001": c_sol}));
        write("empty_challenges.json", json!({}));
        write("empty_solutions.json", json!({}));
        fs::write(
            dir.path().join("mix.txt"),
            "pre_challenges.json, true, false, pre_solutions.json\n",
        )
        .unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn config(&self, name: &str, text: &str) -> String {
        let path = self.path(name);
        fs::write(&path, text).unwrap();
        path.display().to_string()
    }

    fn pretrain_config(&self, manifest: &str) -> String {
        self.config(
            "pretrain.toml",
            &format!(
                r#"
output_dir = "pre"
manifest = "{manifest}"
data_root = "data"
{MODEL}
[plan]
steps = 6
batch_size = 2
eval_every = 3
augs_per_task = 4
eval_augs = 2
max_eval_pairs = 4

[plan.augmentation]
canvas_side = 4
"#
            ),
        )
    }

    fn posttrain_config(&self, strategy: &str, n_augs: usize) -> String {
        self.config(
            "posttrain.toml",
            &format!(
                r#"
output_dir = "post"
checkpoint = "pre/checkpoint.bin"
data_root = "data"
tasks = "new_challenges.json"
solutions = "new_solutions.json"

[strategy]
kind = "{strategy}"

[plan]
steps = 5
batch_size = 2
augs_per_task = 4
eval_every = 0
eval_augs = 0

[plan.augmentation]
canvas_side = 4

[vote]
n_augs = {n_augs}
ks = [1, 2]
"#
            ),
        )
    }

    fn evaluate_config(&self, tasks: &str) -> String {
        self.config(
            "evaluate.toml",
            &format!(
                r#"
output_dir = "eval"
checkpoint = "post/checkpoint.bin"
registry = "post/registry.bin"
data_root = "data"
tasks = "{tasks}_challenges.json"
solutions = "{tasks}_solutions.json"

[vote]
n_augs = 4
ks = [2, 1000]
"#
            ),
        )
    }
}

#[test]
fn plan_prints_fraction_and_steps() {
    let out = trm(&["plan", "--wall-hours", "12", "--reserved-hours", "1", "--step-seconds", "2.64"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("1/32"), "{text}");
    assert!(text.contains("planned steps: 15000"), "{text}");
}

#[test]
fn plan_rejects_zero_step_time() {
    let out = trm(&["plan", "--wall-hours", "12", "--step-seconds", "0"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error:"));
}

#[test]
fn replication_preset_echoes_its_plan() {
    let out = trm(&["pretrain", "--config", &preset("pretrain_replication.toml"), "--dry-run"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    for expected in ["steps 750000", "batch 768", "augs/task 1000", "trunk lr 1e-4", "embedding lr 1e-2", "L=4"] {
        assert!(text.contains(expected), "missing `{expected}` in {text}");
    }
}

#[test]
fn extended_and_hard_presets_double_the_rates() {
    for name in ["pretrain_extended.toml", "pretrain_hard.toml"] {
        let out = trm(&["pretrain", "--config", &preset(name), "--dry-run"]);
        assert!(out.status.success(), "{name}: {}", stderr(&out));
        let text = stdout(&out);
        assert!(text.contains("batch 1536") && text.contains("trunk lr 2e-4") && text.contains("embedding lr 2e-2"));
    }
}

#[test]
fn competition_posttrain_presets() {
    let cases = [
        ("posttrain_replication.toml", "steps 12500", "512 augmentations"),
        ("posttrain_extended.toml", "steps 15000", "256 augmentations"),
        ("posttrain_hard.toml", "steps 15000", "256 augmentations"),
    ];
    for (name, steps, augs) in cases {
        let out = trm(&["posttrain", "--config", &preset(name), "--dry-run"]);
        assert!(out.status.success(), "{name}: {}", stderr(&out));
        let text = stdout(&out);
        for expected in ["staged (embeddings only for the first 0.25)", steps, "batch 384", "trunk lr 2e-4", augs] {
            assert!(text.contains(expected), "{name}: missing `{expected}` in {text}");
        }
    }
}

#[test]
fn missing_manifest_fails_without_outputs() {
    let ws = Workspace::new();
    let config = ws.pretrain_config("no_such_manifest.txt");
    let out = trm(&["pretrain", "--config", &config]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no_such_manifest.txt"), "{}", stderr(&out));
    assert!(!ws.path("pre").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let ws = Workspace::new();
    let config = ws.config(
        "typo.toml",
        "output_dir = \"pre\"\nmanifest = \"mix.txt\"\n[plan]\nstep = 10\n",
    );
    let out = trm(&["pretrain", "--config", &config]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("step"), "{}", stderr(&out));
    assert!(!ws.path("pre").exists());
}

#[test]
fn vote_count_above_registry_size_is_rejected() {
    let ws = Workspace::new();
    let config = ws.posttrain_config("full", 5);
    let out = trm(&["posttrain", "--config", &config, "--dry-run"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("n_augs"), "{}", stderr(&out));
}

#[test]
fn pretrain_posttrain_evaluate_diagnose() {
    let ws = Workspace::new();
    let pre = ws.pretrain_config("mix.txt");
    let out = trm(&["pretrain", "--config", &pre]);
    assert!(out.status.success(), "{}", stderr(&out));
    for file in ["checkpoint.bin", "registry.bin", "metrics.jsonl", "config.toml"] {
        assert!(ws.path("pre").join(file).exists(), "{file}");
    }
    let metrics = fs::read_to_string(ws.path("pre/metrics.jsonl")).unwrap();
    let steps: Vec<u64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, [0, 3, 6]);
    assert_eq!(fs::read_to_string(ws.path("pre/config.toml")).unwrap(), fs::read_to_string(&pre).unwrap());

    let again = trm(&["pretrain", "--config", &pre]);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"));
    let forced = trm(&["pretrain", "--config", &pre, "--force"]);
    assert!(forced.status.success(), "{}", stderr(&forced));

    let post = ws.posttrain_config("embeddings_only", 4);
    let out = trm(&["posttrain", "--config", &post]);
    assert!(out.status.success(), "{}", stderr(&out));
    let before = load_checkpoint(&ws.path("pre/checkpoint.bin"), None).unwrap();
    let after = load_checkpoint(&ws.path("post/checkpoint.bin"), None).unwrap();
    assert_eq!(before.state.params.trunk_checksum(), after.state.params.trunk_checksum());
    assert_ne!(before.state.params.task_embeddings, after.state.params.task_embeddings);
    let submission: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("post/submission.json")).unwrap()).unwrap();
    let attempts = &submission["bbbb0001"][0];
    assert!(attempts.get("attempt_1").is_some() && attempts.get("attempt_2").is_some(), "{submission}");

    let eval = ws.evaluate_config("new");
    let out = trm(&["evaluate", "--config", &eval]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(ws.path("eval/scores.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "k,pass_at_k");
    assert!(rows[1].starts_with("2,") && rows[2].starts_with("1000,"), "{csv}");
    let scores: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("eval/scores.json")).unwrap()).unwrap();
    assert_eq!(scores["n_tasks"], 1);

    let report = ws.path("cosine.json");
    let (pre_checkpoint, pre_registry) = (ws.arg("pre/checkpoint.bin"), ws.arg("pre/registry.bin"));
    let args = [
        "diagnose",
        "--checkpoint",
        &pre_checkpoint,
        "--registry",
        &pre_registry,
        "--output",
        report.to_str().unwrap(),
    ];
    let out = trm(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let cosine: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(cosine["n_across_pairs"], 1);
    assert!(cosine["cos_within"].is_f64());
    assert!(!trm(&args).status.success(), "diagnose overwrote its report without --force");

    // a registry from another run must not pair with this checkpoint
    let post_checkpoint = ws.arg("post/checkpoint.bin");
    let mismatched = ["diagnose", "--checkpoint", &post_checkpoint, "--registry", &pre_registry];
    assert!(!trm(&mismatched).status.success());
}

#[test]
fn empty_task_list_fails() {
    let ws = Workspace::new();
    assert!(trm(&["pretrain", "--config", &ws.pretrain_config("mix.txt")]).status.success());
    assert!(trm(&["posttrain", "--config", &ws.posttrain_config("full", 4)]).status.success());
    let out = trm(&["evaluate", "--config", &ws.evaluate_config("empty")]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no tasks"), "{}", stderr(&out));
    assert!(!ws.path("eval").exists());
}
