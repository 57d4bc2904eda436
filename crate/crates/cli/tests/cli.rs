use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn deskbc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deskbc")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"
bins_per_side = 4

[model]
frame_resolution = 16
history_length = 4
encoder_channels = [4, 8]

[model.backbone]
num_layers = 1
hidden_dim = 16
query_heads = 2
kv_heads = 2
mlp_ratio = 2

[model.action_decoder]
num_layers = 1
query_heads = 2
kv_heads = 2

[train]
steps = 6
batch_size = 2
window = 4
learning_rate = 1e-3
eval_every = 3
eval_windows = 2
"#;

fn small_corridor(dir: &Path, episodes: &str) {
    let cfg = dir.join("collect.toml");
    fs::write(&cfg, "max_steps = 40\n[corridor]\nresolution = 16\n").unwrap();
    let o = deskbc(&["gen-data", "--episodes", episodes, "--out", p(&dir.join("data")), "--config", p(&cfg), "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn fit_scaling_uses_given_parameters() {
    let o = deskbc(&["fit-scaling", "--use-params", "1.111,17,0.2336", "--predict", "17"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("L(17) = 2.111000"), "{}", stdout(&o));
}

#[test]
fn fit_scaling_recovers_points_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let pts = dir.path().join("pts.csv");
    let law = |d: f64| 1.111 + (17.0 / d).powf(0.2336);
    let mut text = String::from("D,L\n");
    for d in [5.0, 10.0, 50.0, 100.0, 500.0] {
        text += &format!("{d},{}\n", law(d));
    }
    fs::write(&pts, text).unwrap();
    let out = dir.path().join("fit");
    let o = deskbc(&["fit-scaling", "--points", p(&pts), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("fit.json")).unwrap()).unwrap();
    assert!((fit["alpha"].as_f64().unwrap() - 0.2336).abs() < 1e-3);
    let man: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(man["command"], "fit-scaling");
    assert!(man["artifacts"]["fit.json"].is_string());
    assert_eq!(man["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn invalid_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert_eq!(deskbc(&["filter", "--data", p(&missing), "--out", p(&dir.path().join("o"))]).status.code(), Some(1));
    assert_eq!(deskbc(&["fit-scaling", "--use-params", "1,2"]).status.code(), Some(1));
    assert_eq!(deskbc(&["gen-data", "--out", p(&dir.path().join("o")), "--env", "mars"]).status.code(), Some(1));
    assert_eq!(deskbc(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(deskbc(&["--help"]).status.code(), Some(0));
}

#[test]
fn corrupt_dataset_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    small_corridor(dir.path(), "1");
    let data = dir.path().join("data");
    fs::write(data.join("traj_00000/frames.bin"), b"garbage").unwrap();
    let o = deskbc(&["filter", "--data", p(&data), "--out", p(&dir.path().join("f"))]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = deskbc(&["--dry-run", "gen-data", "--episodes", "2", "--out", p(&out)]);
    assert!(o.status.success());
    assert!(!out.exists());
    let o = deskbc(&["--dry-run", "fit-scaling", "--use-params", "1.111,17,0.2336", "--out", p(&dir.path().join("f"))]);
    assert!(o.status.success());
    assert!(!dir.path().join("f").exists());
}

#[test]
fn gen_data_is_deterministic_across_worker_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_corridor(a.path(), "3");
    let cfg = b.path().join("collect.toml");
    fs::write(&cfg, "max_steps = 40\n[corridor]\nresolution = 16\n").unwrap();
    let o = deskbc(&["gen-data", "--episodes", "3", "--out", p(&b.path().join("data")), "--config", p(&cfg)]);
    assert!(o.status.success());
    let man = |d: &Path| -> serde_json::Value { serde_json::from_str(&fs::read_to_string(d.join("data/manifest.json")).unwrap()).unwrap() };
    let (ma, mb) = (man(a.path()), man(b.path()));
    let strip = |m: &serde_json::Value| {
        let mut a = m["artifacts"].clone();
        a.as_object_mut().unwrap().remove("manifest.json");
        a
    };
    assert_eq!(strip(&ma), strip(&mb));
    assert_eq!(ma["config_hash"], mb["config_hash"]);
}

#[test]
fn pipeline_train_evaluate_probe() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corridor(d, "3");
    let cfg = d.join("train.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = d.join("data");
    let run = d.join("run");

    let o = deskbc(&["filter", "--data", p(&data), "--out", p(&d.join("filtered"))]);
    assert!(o.status.success());
    assert!(d.join("filtered/quality.csv").exists());

    let o = deskbc(&["train", "--data", p(&data), "--out", p(&run), "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["ckpt-0000000.bin", "ckpt-0000003.bin", "ckpt-0000006.bin", "checkpoints.csv", "train_loss.csv", "best.json", "manifest.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let ckpt = run.join("ckpt-0000006.bin");

    let o = deskbc(&["eval-perplexity", "--checkpoint", p(&ckpt), "--data", p(&data)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("keyboard perplexity"));

    let out = d.join("caus");
    let o = deskbc(&["eval-causality", "--run", p(&run), "--data", p(&data), "--seq-len", "10", "--chunks", "5", "--eval-seeds", "2", "--out", p(&out), "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("causality.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "checkpoint_step,test_loss,causality_score");
    assert_eq!(table.lines().count(), 4);

    let out = d.join("gap");
    let o = deskbc(&["gap-probe", "--checkpoint", p(&ckpt), "--data", p(&data), "--seq-len", "6", "--samples", "2", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("gap.csv")).unwrap().lines().count(), 4);

    let out = d.join("bench");
    let o = deskbc(&["benchmark", "--checkpoint", p(&ckpt), "--steps", "100", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(out.join("latency.csv")).unwrap().starts_with("step,encode_us,backbone_us,decode_us,sample_us"));

    let o = deskbc(&["rollout", "--checkpoint", p(&ckpt), "--out", p(&d.join("roll")), "--episodes", "1", "--budget", "20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = deskbc(&["evaluate", "--policy", p(&ckpt), "--episodes", "2", "--budget", "20", "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("completion"));

    let idm = d.join("idm");
    let o = deskbc(&["train-idm", "--data", p(&data), "--out", p(&idm), "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = deskbc(&["pseudo-label", "--idm", p(&idm.join("idm.bin")), "--data", p(&data), "--out", p(&d.join("labeled"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // A policy checkpoint is not an IDM.
    let o = deskbc(&["pseudo-label", "--idm", p(&ckpt), "--data", p(&data), "--out", p(&d.join("x"))]);
    assert!(!o.status.success());
}

#[test]
fn expert_and_random_evaluation() {
    let o = deskbc(&["evaluate", "--policy", "expert", "--episodes", "2", "--budget", "600"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("completion 1.000"), "{}", stdout(&o));
    let o = deskbc(&["evaluate", "--policy", "random", "--episodes", "2", "--budget", "200"]);
    assert!(stdout(&o).starts_with("completion 0.000"), "{}", stdout(&o));
    let o = deskbc(&["evaluate", "--policy", "expert", "--env", "target-tap", "--episodes", "2", "--budget", "100"]);
    assert!(stdout(&o).contains("hits mean"));
}

#[test]
fn toy_run_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy");
    let o = deskbc(&["toy-run", "--depths", "0,1", "--steps", "200", "--seeds", "2", "--eval-every", "100", "--out", p(&out), "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert!(curves.starts_with("depth,seed,step,c"));
    assert!(fs::read_to_string(out.join("summary.csv")).unwrap().lines().count() == 3);
}
