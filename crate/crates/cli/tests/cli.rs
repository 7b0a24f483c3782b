use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const SUBCOMMANDS: [&str; 5] = ["synth", "train", "eval", "aggregate", "params"];

fn omniseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omniseg")).args(args).output().expect("binary runs")
}

fn run_with(config: &Path, args: &[&str]) -> Output {
    let mut all = vec![args[0], "--config", config.to_str().unwrap()];
    all.extend_from_slice(&args[1..]);
    omniseg(&all)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

#[test]
fn help_matches_golden_files() {
    for sub in SUBCOMMANDS {
        let out = omniseg(&[sub, "--help"]);
        assert!(out.status.success());
        let path = golden_dir().join(format!("{sub}.txt"));
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            fs::write(&path, stdout(&out)).unwrap();
        }
        let expected = fs::read_to_string(&path).unwrap();
        assert_eq!(stdout(&out), expected, "{sub} --help drifted from {}", path.display());
        for flag in ["--config", "--seed", "--deterministic"] {
            assert!(expected.contains(flag), "{sub} help lacks {flag}");
        }
    }
}

/// Tiny corpus and model so every subcommand finishes in seconds.
fn smoke_config(dir: &Path) -> PathBuf {
    let config = json!({
        "backbone": {"channel_ladder": [4, 8], "groupnorm_groups": 2},
        "train": {"epochs": 2, "lr": 0.01},
        "data": {
            "root": "corpus",
            "synth": {"num_images_per_class": 10, "image_size": 32, "patch_size": 32, "num_patients": 10},
            "target_per_class": 4,
        },
        "aggregate": {"stride": 16},
        "seed": 3,
    });
    let path = dir.join("run.json");
    fs::write(&path, config.to_string()).unwrap();
    path
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect()
}

#[test]
fn synth_train_eval_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(dir.path());

    let out = run_with(&config, &["synth"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary = &json_lines(&stdout(&out))[0];
    assert_eq!(summary["manifest_rows"], 60);
    assert!(dir.path().join("corpus/splits.csv").exists());

    let run = dir.path().join("run");
    let out = run_with(&config, &["train", "--out", run.to_str().unwrap(), "--deterministic"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["epoch_000.ckpt", "epoch_001.ckpt", "best.ckpt", "train_log.jsonl"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let epochs = json_lines(&stdout(&out)).iter().filter(|v| v.get("epoch").is_some()).count();
    assert_eq!(epochs, 2);

    let ckpt = run.join("best.ckpt");
    let eval_dir = dir.path().join("eval");
    let out = run_with(
        &config,
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 1 + 6 * 3 + 3);
    assert!(eval_dir.join("metrics.txt").exists());

    let (img, _) = omniseg_core::data::synth_composite(&Default::default(), &[1, 2], 40, 5);
    let image = dir.path().join("composite.png");
    omniseg_core::data::save_rgb(&image, img.view()).unwrap();
    let agg = dir.path().join("agg");
    let out = run_with(
        &config,
        &[
            "aggregate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            image.to_str().unwrap(),
            "--out",
            agg.to_str().unwrap(),
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read_dir(&agg).unwrap().count(), 3 + 6);

    let small = dir.path().join("small.png");
    omniseg_core::data::save_rgb(&small, img.slice(ndarray::s![.., ..20, ..20])).unwrap();
    let out = run_with(
        &config,
        &["aggregate", "--checkpoint", ckpt.to_str().unwrap(), "--image", small.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("shape error"), "{}", stderr(&out));

    let out = run_with(&config, &["aggregate", "--checkpoint", "/nonexistent.ckpt", "--image", image.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // A checkpoint for three classes does not fit a six-class config.
    let three = dir.path().join("three.json");
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    v["classes"] = json!([{"name": "DT", "id": 1}, {"name": "PT", "id": 2}, {"name": "CAP", "id": 3}]);
    fs::write(&three, v.to_string()).unwrap();
    let model = omniseg_core::OmniSeg::<f32>::new(
        &omniseg_core::BackboneConfig::tiny(&[4, 8], 2),
        3,
        0,
    )
    .unwrap();
    let reg3 = omniseg_cli::RunConfig::load(&three).unwrap().registry().unwrap();
    let ck3 = dir.path().join("three.ckpt");
    omniseg_core::checkpoint::save_checkpoint(&ck3, &model, &reg3, None).unwrap();
    let out = run_with(&config, &["eval", "--checkpoint", ck3.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn deterministic_training_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(dir.path());
    assert!(run_with(&config, &["synth"]).status.success());
    let mut logs = Vec::new();
    for k in 0..2 {
        let run = dir.path().join(format!("run{k}"));
        let out = run_with(&config, &["train", "--out", run.to_str().unwrap(), "--deterministic", "--seed", "11"]);
        assert!(out.status.success(), "{}", stderr(&out));
        logs.push(fs::read_to_string(run.join("train_log.jsonl")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"batchsize": 4}}"#).unwrap();
    let out = run_with(&bad, &["params"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("batchsize"), "{}", stderr(&out));

    let out = run_with(&dir.path().join("missing.json"), &["params"]);
    assert_eq!(out.status.code(), Some(2));

    let file = dir.path().join("file");
    fs::write(&file, "").unwrap();
    let config = smoke_config(dir.path());
    let out = run_with(&config, &["synth", "--out", file.join("corpus").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("i/o error"), "{}", stderr(&out));

    let out = run_with(&config, &["train", "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "training without a corpus");
}

#[test]
fn params_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("default.json");
    fs::write(&path, "{}").unwrap();
    let out = run_with(&path, &["params"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let value = |key: &str| -> u64 {
        let line = text.lines().find(|l| l.starts_with(key)).unwrap();
        line[key.len()..].split_whitespace().next().unwrap().parse().unwrap()
    };
    assert_eq!(value("dynamic head parameters:"), 162);
    assert_eq!(value("controller parameters:"), 42_606);
    assert_eq!(value("multi-network equivalent:"), 6 * value("backbone parameters:"));
    assert_eq!(
        value("total parameters:"),
        value("backbone parameters:") + value("controller parameters:")
    );
}
