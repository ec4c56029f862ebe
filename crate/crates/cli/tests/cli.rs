use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stitchfusion"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn param_count_example() {
    let o = cli(&[
        "param-count", "--preset", "b2-like", "--modalities", "2", "--density", "pair-bi", "--stages", "1,2,3,4",
        "--r", "8", "--include-bias",
    ]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("total=144000"), "{out}");
    assert!(out.contains("agree=true"));
    assert!(out.contains("weights only"));
}

#[test]
fn config_file_feeds_flags_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    fs::write(&file, "[count]\npreset = \"b2-like\"\nmodalities = 3\ninclude_bias = true\n").unwrap();
    let o = cli(&["--config", path(&file), "param-count"]);
    assert!(stdout(&o).contains("total=432000"), "{}", stdout(&o));
    let o = cli(&["--config", path(&file), "param-count", "--modalities", "2"]);
    assert!(stdout(&o).contains("total=144000"));
}

#[test]
fn unknown_keys_and_flags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    fs::write(&file, "[count]\nbogus = 1\n").unwrap();
    let o = cli(&["--config", path(&file), "param-count"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    assert_eq!(code(&cli(&["param-count", "--bogus"])), 2);
    assert_eq!(code(&cli(&["param-count", "--modalities", "1"])), 2);
}

#[test]
fn equivalence_command_passes() {
    let o = cli(&["equiv-check", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("equivalence checks passed"));
}

#[test]
fn grad_check_single_seed() {
    let o = cli(&["grad-check", "--seeds", "1", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failed"));
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    let eval = dir.path().join("eval");
    let run = dir.path().join("run");
    let scored = dir.path().join("scored");
    assert_eq!(code(&cli(&["synth-data", "--samples", "6", "--seed", "4", "--out", path(&train)])), 0);
    let o = cli(&["synth-data", "--samples", "3", "--seed", "4", "--split", "eval", "--out", path(&eval)]);
    assert_eq!(code(&o), 0);
    assert!(train.join("manifest.json").exists() && train.join("resolved_config.toml").exists());

    let o = cli(&[
        "train", "--data", path(&train), "--eval-data", path(&eval), "--out", path(&run), "--epochs", "2",
        "--warmup", "1", "--batch-size", "3", "--lr", "1e-3", "--ffm", "--stages", "2,4", "--density", "pair-uni",
        "--seed", "4",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint/manifest.json", "train_log.csv", "resolved_config.toml", "metrics.txt", "metrics.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let resolved = fs::read_to_string(run.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("pair-uni") && resolved.contains("seed = 4"), "{resolved}");
    assert_eq!(fs::read_to_string(run.join("train_log.csv")).unwrap().lines().count(), 3);

    let o = cli(&["eval", "--checkpoint", path(&run.join("checkpoint")), "--data", path(&eval), "--out", path(&scored)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(run.join("metrics.csv")).unwrap(),
        fs::read_to_string(scored.join("metrics.csv")).unwrap()
    );
}

#[test]
fn empty_training_set_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty");
    assert_eq!(code(&cli(&["synth-data", "--samples", "0", "--out", path(&data)])), 0);
    let o = cli(&["train", "--data", path(&data), "--out", path(&dir.path().join("run"))]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["train", "--data", path(&dir.path().join("nope")), "--out", path(dir.path())]);
    assert_eq!(code(&o), 3);
    assert_eq!(code(&cli(&["train", "--out", path(dir.path())])), 2);
    assert_eq!(code(&cli(&["synth-data", "--classes", "2", "--out", path(dir.path())])), 2);
}

#[test]
fn help_lists_flags() {
    let out = stdout(&cli(&["train", "--help"]));
    for flag in ["--density", "--stages", "--ffm", "--lr", "--warmup", "--decay", "--eval-data", "--config", "--seed"] {
        assert!(out.contains(flag), "{flag} missing from help");
    }
}
