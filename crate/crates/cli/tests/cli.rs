use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rethead_cli::manifest::hash_tree;

const TINY: &str = r#"
version = 1
seed = 5

[model]
vocab_size = 64
n_layers = 2
n_heads = 2
d_model = 16
d_mlp = 32
max_seq_len = 64
positional = "rotary"

[tasks]
n_train = 1600
n_heldout = 16
n_detect = 8
n_eval = 8
n_instructions = 120

[detect]
tau = 0.5

[pretrain]
eval_every = 50
patience = 10
min_delta = 0.0

[pretrain.optim]
peak_lr = 0.01
min_lr = 0.001
warmup_fraction = 0.05
weight_decay = 0.1
beta1 = 0.9
beta2 = 0.95
batch_size = 16
epochs = 1
max_grad_norm = 1.0
seed = 0

[synth.smaller_model]
vocab_size = 64
n_layers = 1
n_heads = 2
d_model = 8
d_mlp = 16
max_seq_len = 64
positional = "rotary"
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rethead"));
    c.arg("--quiet");
    c
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str], cfg: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn detect_before_pretrain_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = run(&["detect"], &cfg, &dir.path().join("run"));
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("run pretrain first"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let bad_version = write_config(dir.path(), &TINY.replace("version = 1", "version = 9"));
    let o = run(&["pretrain"], &bad_version, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("version"));
    let unknown = write_config(dir.path(), &format!("{TINY}\n[ablate]\nthreshold = 0.1\n"));
    assert_eq!(run(&["pretrain"], &unknown, &out).status.code(), Some(2));
}

#[test]
fn default_config_reparses() {
    let o = bin().arg("default-config").output().unwrap();
    ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(
        rethead_cli::RunConfig::parse(&text).unwrap(),
        rethead_cli::RunConfig::default()
    );
}

fn tree(dir: &Path) -> BTreeMap<String, String> {
    hash_tree(dir).unwrap()
}

#[test]
fn pipeline_is_reproducible_resumable_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&run(&["run-all"], &cfg, &a));
    ok(&run(&["run-all"], &cfg, &b));
    let ta = tree(&a);
    assert_eq!(ta, tree(&b));
    for f in [
        "pretrain/model.ckpt",
        "detect/scores.csv",
        "ablate/mask.json",
        "synth/pairs.jsonl",
        "dpo/model.ckpt",
        "eval/summary.json",
        "reports/manifest.json",
        "reports/distribution.svg",
        "reports/deltas.svg",
    ] {
        assert!(ta.contains_key(f), "{f} missing");
    }
    let manifest = fs::read_to_string(a.join("pretrain/run-manifest.json")).unwrap();
    assert!(manifest.contains("config_hash"));
    assert!(!manifest.contains("wall_clock_ms"));

    // a finished run is up to date
    ok(&run(&["run-all"], &cfg, &a));
    assert_eq!(tree(&a), ta);

    // changing an input of a finished stage needs --force
    let changed = write_config(dir.path(), &TINY.replace("n_eval = 8", "n_eval = 9"));
    let o = run(&["eval"], &changed, &a);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    ok(&bin()
        .args(["eval", "--force", "--config"])
        .arg(&changed)
        .arg("--out")
        .arg(&a)
        .output()
        .unwrap());

    // comparing a run with itself
    let cmp = bin().arg("compare").arg(&b).arg(&b).output().unwrap();
    ok(&cmp);
    let text = String::from_utf8(cmp.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1]);

    // a re-evaluated run sits on a different eval set
    let cmp = bin().arg("compare").arg(&a).arg(&b).output().unwrap();
    ok(&bin()
        .args(["report", "--force", "--config"])
        .arg(&changed)
        .arg("--out")
        .arg(&a)
        .output()
        .unwrap());
    let cmp2 = bin().arg("compare").arg(&a).arg(&b).output().unwrap();
    assert!(cmp.status.success());
    assert!(!cmp2.status.success());
    assert!(String::from_utf8_lossy(&cmp2.stderr).contains("different test sets"));
}

#[test]
fn rejected_sampler_flag_tags_the_training_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    for stage in ["pretrain", "detect", "ablate", "synth", "dpo"] {
        ok(&bin()
            .args([stage, "--rejected-sampler", "random-mask", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap());
    }
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("dpo/train.json")).unwrap()).unwrap();
    assert_eq!(report["tag"], "random-mask");
    let mask: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("ablate/mask.json")).unwrap()).unwrap();
    assert_eq!(mask["strategy"], "random");
}

#[test]
fn timing_is_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    ok(&bin()
        .args(["pretrain", "--record-timing", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap());
    let manifest = fs::read_to_string(out.join("pretrain/run-manifest.json")).unwrap();
    assert!(manifest.contains("wall_clock_ms"));
    assert!(fs::read_to_string(out.join("pretrain/train.csv"))
        .unwrap()
        .starts_with("step,loss,lr,grad_norm,margin,wall_ms"));
}
