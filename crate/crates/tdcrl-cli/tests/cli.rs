//! End-to-end runs of the `tdcrl` binary: generate, train, eval, probe,
//! oracle, export, plus failure exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tdcrl"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn tdcrl");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        r#"
seed = 11

[synthetic]
classes = 3
embed_dim = 24

[benchmark]
train_styles = 3
heldout_styles = 2
word_dim = 8
images_per_class_style = 12

[aug]
M = 12

[train]
N = 3
batch = 16
epochs = 3
layers = 2
"#,
    )
    .unwrap();
    path
}

#[test]
fn full_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write_small_config(dir.path());

    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("gen-synthetic"));
    assert!(out.join("style_basis.tdeb").exists());
    assert!(out.join("images_train.tdeb").exists());
    assert!(out.join("images_heldout.tdeb").exists());

    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("train")
        .arg("--eval-table")
        .arg(out.join("images_heldout.tdeb")));
    assert!(out.join("checkpoint.tdeb").exists());
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["epoch"].is_number());
        assert!(v["lr"].is_number());
        assert!(v["loss_c"].is_number());
        assert!(v["loss_g"].is_number());
        assert!(v["eval_accuracy"].is_number());
    }

    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("eval")
        .arg("--checkpoint")
        .arg(out.join("checkpoint.tdeb"))
        .arg("--images")
        .arg(out.join("images_heldout.tdeb")));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report[0]["report"]["mean_accuracy"].is_number());

    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("probe")
        .arg("--checkpoint")
        .arg(out.join("checkpoint.tdeb"))
        .arg("--images")
        .arg(out.join("images_heldout.tdeb")));
    let probe: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("probe.json")).unwrap()).unwrap();
    assert!(probe["probe_ce_pre"].is_number());
    assert!(probe["probe_ce_post"].is_number());

    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("export-features")
        .arg("--checkpoint")
        .arg(out.join("checkpoint.tdeb"))
        .arg("--images")
        .arg(out.join("images_heldout.tdeb"))
        .arg("--stage")
        .arg("intervened"));
    assert!(out.join("features_intervened.tdeb").exists());
}

#[test]
fn reruns_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write_small_config(dir.path());

    for _ in 0..2 {
        run_ok(bin()
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .arg("gen-synthetic"));
        run_ok(bin()
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .arg("train"));
    }
    let first_ckpt = std::fs::read(out.join("checkpoint.tdeb")).unwrap();

    // Re-running overwrites outputs with identical bytes.
    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("train"));
    let second_ckpt = std::fs::read(out.join("checkpoint.tdeb")).unwrap();
    assert_eq!(first_ckpt, second_ckpt);
}

#[test]
fn oracle_passes_and_exits_zero() {
    let out = bin().arg("oracle").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS"), "{text}");
}

#[test]
fn malformed_config_names_the_key_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "mystery_knob = true\n").unwrap();
    let out = bin()
        .arg("--config")
        .arg(&config)
        .arg("gen-synthetic")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("mystery_knob"), "{text}");
}

#[test]
fn missing_file_exits_3() {
    let out = bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg("/nonexistent/checkpoint.tdeb")
        .arg("--images")
        .arg("/nonexistent/images.tdeb")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn corrupt_table_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = write_small_config(dir.path());
    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .arg("gen-synthetic"));
    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .arg("train"));

    let table = out_dir.join("images_heldout.tdeb");
    let mut bytes = std::fs::read(&table).unwrap();
    bytes[0] ^= 0xFF;
    std::fs::write(&table, bytes).unwrap();
    let out = bin()
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .arg("eval")
        .arg("--checkpoint")
        .arg(out_dir.join("checkpoint.tdeb"))
        .arg("--images")
        .arg(&table)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn empty_eval_table_errors_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    std::fs::create_dir_all(&out_dir).unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        r#"
seed = 11

[synthetic]
classes = 3
embed_dim = 24

[benchmark]
train_styles = 3
heldout_styles = 0
word_dim = 8
images_per_class_style = 12

[aug]
M = 12

[train]
N = 3
batch = 16
epochs = 1
layers = 2
"#,
    )
    .unwrap();
    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .arg("gen-synthetic"));
    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .arg("train"));
    let out = bin()
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .arg("eval")
        .arg("--checkpoint")
        .arg(out_dir.join("checkpoint.tdeb"))
        .arg("--images")
        .arg(out_dir.join("images_heldout.tdeb"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(7));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("empty"), "{text}");
}
