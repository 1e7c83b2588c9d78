use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use slidessl::checkpoint::Checkpoint;
use slidessl::config::default_toml;

fn slidessl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slidessl"))
        .args(args)
        .env("SLIDESSL_LOG", "info")
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"
[data]
bags_per_class = 60
tokens_per_bag = 128
grid_side = 16

[transforms]
max_token_limit = 64

[model]
d_model = 32
n_heads = 4
n_layers = 2
ffn_mult = 2
fourier_dim = 16
pos_hidden = 32
proj_hidden = 64
d_proj = 32

[objective]
temperature = 0.2

[optim]
batch_size = 32
epochs = 40
lr_min = 1e-5
seed = 3
"#;

#[test]
fn gradcheck_objectives_prints_table() {
    let out = slidessl(&["gradcheck", "--component", "objectives"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("max_rel_err"));
    for kind in ["simclr", "supcon", "vicreg", "byol"] {
        assert!(stdout.contains(&format!("objective.{kind}")), "{stdout}");
    }
    assert!(stdout.contains("PASS"));
}

#[test]
fn unknown_component_is_a_config_error() {
    let out = slidessl(&["gradcheck", "--component", "decoder"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("component"));
}

#[test]
fn lr_min_above_lr_max_exits_1_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[optim]\nlr_max = 1e-4\nlr_min = 1e-3\n").unwrap();
    let out = slidessl(&["train", "--config", path(&cfg), "--data", "unused", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("optim.lr_min"), "{}", text(&out.stderr));
}

#[test]
fn unknown_config_key_exits_1_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[model]\nd_modle = 16\n").unwrap();
    let out = slidessl(&["generate", "--spec", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("model.d_modle"), "{}", text(&out.stderr));
}

#[test]
fn usage_errors_exit_1_and_runtime_errors_exit_2() {
    assert_eq!(slidessl(&["train"]).status.code(), Some(1));
    assert_eq!(slidessl(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ok.toml");
    fs::write(&cfg, "").unwrap();
    let missing = dir.path().join("missing");
    let out = slidessl(&["train", "--config", path(&cfg), "--data", path(&missing), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out.stderr));
}

#[test]
fn help_lists_every_config_key_with_its_default() {
    let out = slidessl(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let help = text(&out.stdout);
    for line in default_toml().lines().filter(|l| l.contains(" = ")) {
        assert!(help.contains(line), "missing `{line}`");
    }
}

#[test]
fn generate_train_eval_heatmap_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("cfg.toml");
    fs::write(&cfg, SMALL).unwrap();
    let data = root.join("data");

    let gen = slidessl(&["generate", "--spec", path(&cfg), "--out", path(&data)]);
    assert_eq!(gen.status.code(), Some(0), "{}", text(&gen.stderr));
    let log = text(&gen.stderr);
    assert!(log.contains("resolved config") && log.contains("seed: 7"), "{log}");
    for f in ["train/manifest.json", "val/manifest.json", "phenotypes.json", "resolved_config.toml"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let train_dir = data.join("train");
    let val_dir = data.join("val");

    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--config", path(&cfg), "--data", path(&train_dir), "--out", path(out)];
        args.extend_from_slice(extra);
        let o = slidessl(&args);
        assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
        assert!(text(&o.stderr).contains("seed: 3"));
    };
    train(&root.join("run-a"), &[]);
    train(&root.join("run-b"), &[]);
    train(&root.join("run-w"), &["--workers", "2"]);
    train(&root.join("init"), &["--stop-after", "0"]);
    let a = fs::read(root.join("run-a/final.ckpt")).unwrap();
    assert!(a == fs::read(root.join("run-b/final.ckpt")).unwrap(), "repeat run differs");
    let load = |d: &str| Checkpoint::load(&root.join(d).join("final.ckpt")).unwrap();
    assert!(load("run-a").state == load("run-w").state, "worker count changed the weights");
    assert!(root.join("run-a/resolved_config.toml").exists());
    let metrics = fs::read_to_string(root.join("run-a/metrics.ndjson")).unwrap();
    assert_eq!(metrics.lines().count(), 120);

    // Re-running from the logged resolved config reproduces the checkpoint.
    let resolved = root.join("run-a/resolved_config.toml");
    let o = slidessl(&["train", "--config", path(&resolved), "--data", path(&train_dir), "--out", path(&root.join("run-c"))]);
    assert_eq!(o.status.code(), Some(0));
    assert!(a == fs::read(root.join("run-c/final.ckpt")).unwrap(), "resolved config does not reproduce");

    let eval = |ckpt: Option<&Path>, protocol: &str, name: &str| -> f64 {
        let report = root.join(name);
        let mut args = vec!["eval", "--train-data", path(&train_dir), "--val-data", path(&val_dir), "--protocol", protocol, "--report", path(&report)];
        match ckpt {
            Some(c) => args.extend_from_slice(&["--ckpt", path(c)]),
            None => args.push("--mean-pool"),
        }
        let o = slidessl(&args);
        assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(v["protocol"], protocol);
        v["mca"].as_f64().unwrap()
    };
    let trained = eval(Some(&root.join("run-a/final.ckpt")), "knn", "trained.json");
    let untrained = eval(Some(&root.join("init/final.ckpt")), "knn", "untrained.json");
    let linear = eval(Some(&root.join("run-a/final.ckpt")), "linear", "linear.json");
    let pooled = eval(None, "knn", "pooled.json");
    println!("kNN MCA trained {trained:.3}, untrained {untrained:.3}, mean-pool {pooled:.3}; linear {linear:.3}");
    assert!(untrained > 1.0 / 3.0 + 0.05, "untrained {untrained}");
    assert!(trained > untrained, "trained {trained} vs untrained {untrained}");

    let bag = fs::read_dir(&val_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "bag"))
        .unwrap();
    let hm = root.join("hm.json");
    let o = slidessl(&["heatmap", "--ckpt", path(&root.join("run-a/final.ckpt")), "--bag", path(&bag), "--out", path(&hm)]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&hm).unwrap()).unwrap();
    assert_eq!(v["cells"].as_array().unwrap().len(), 128);
    assert!(fs::read(root.join("hm.png")).unwrap().starts_with(b"\x89PNG"));
    let o = slidessl(&["heatmap", "--ckpt", path(&root.join("run-a/final.ckpt")), "--bag", path(&bag), "--out", path(&hm), "--layer", "5"]);
    assert_eq!(o.status.code(), Some(2));
}
