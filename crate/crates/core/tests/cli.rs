use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use modality_tta::cli::{load_split, ExperimentConfig};
use modality_tta::data::accuracy;
use modality_tta::model::{load_checkpoint, Modality};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_modality-tta");

/// Keeps every invocation small enough for a debug build.
const SMALL: [&str; 6] = [
    "--data.synthetic.samples_per_class",
    "40",
    "--pretrain.epochs",
    "5",
    "--model.hidden_dim",
    "12",
];

fn cli(args: &[&str]) -> Output {
    Command::new(BIN).args(args).args(SMALL).output().expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    for pair in SMALL.chunks(2) {
        c.apply_override(pair[0].trim_start_matches("--"), pair[1]).unwrap();
    }
    c
}

#[test]
fn pretrain_writes_reloadable_deterministic_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = cli(&["pretrain", "--seed", "3", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["multimodal.ckpt", "audio_only.ckpt", "video_only.ckpt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }

    let log = json(&a.join("train_log.json"));
    assert_eq!(log["config"]["seed"], 3);
    let reports = log["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 3);

    let split = load_split(&small_config(3)).unwrap();
    let model = load_checkpoint(a.join("multimodal.ckpt")).unwrap();
    let logged = reports.iter().find(|r| r["modality"] == "AV").unwrap()["val_accuracy"].as_f64().unwrap();
    assert_eq!(accuracy(&model, &split.val, Modality::AudioVisual).unwrap(), logged);
}

#[test]
fn run_outputs_and_baseline_identities() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt_dir = dir.path().join("ckpt");
    assert!(cli(&["pretrain", "--out", ckpt_dir.to_str().unwrap()]).status.success());
    let ckpt = ckpt_dir.join("multimodal.ckpt");
    let pretrain_val = json(&ckpt_dir.join("train_log.json"))["reports"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["modality"] == "AV")
        .unwrap()["val_accuracy"]
        .as_f64()
        .unwrap();

    let run = |name: &str, method: &str, rate: &str| {
        let out = dir.path().join(name);
        let o = cli(&[
            "run",
            "--method",
            method,
            "--missing-rate",
            rate,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
        (json(&out.join("summary.json")), trace)
    };

    let (none0, trace) = run("none0", "none", "0");
    assert_eq!(none0["accuracy"].as_f64().unwrap(), pretrain_val);
    assert_eq!(none0["config"]["adapter"]["method"], "none");
    assert!(trace.starts_with("t,modality,predicted,label,correct,"));
    assert_eq!(trace.lines().count(), 1 + none0["audio_visual"]["total"].as_u64().unwrap() as usize);

    let (midl1, midl_trace) = run("midl1", "midl", "1");
    let (none1, none_trace) = run("none1", "none", "1");
    assert_eq!(midl1["accuracy"], none1["accuracy"]);
    assert_eq!(midl1["adapted_steps"], 0);
    let predicted = |t: &str| t.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().to_string()).collect::<Vec<_>>();
    assert_eq!(predicted(&midl_trace), predicted(&none_trace));
}

#[test]
fn sweep_writes_table_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = cli(&[
        "sweep",
        "--sweep.methods",
        "[\"none\", \"shot\"]",
        "--sweep.missing_rates",
        "[0.0, 1.0]",
        "--sweep.seeds",
        "[0, 1]",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    let lines: Vec<_> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("method,"));
    assert!(lines[1].starts_with("none,"));
    assert!(lines[2].starts_with("shot,"));
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * 2 * 2);
    let summary = json(&out.join("summary.json"));
    let rows = summary["table"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    // each method keeps its own default batch size inside one sweep
    for r in rows {
        let want = if r["method"] == "shot" { 8 } else { 1 };
        assert_eq!(r["batch_size"], want);
    }
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let code = |args: &[&str]| cli(args).status.code().unwrap();
    assert_eq!(code(&["sweep", "--sweep.seeds", "[]", "--out", out]), 2);
    assert_eq!(code(&["run", "--missing-rate", "1.5", "--out", out]), 2);
    assert_eq!(code(&["run", "--adapter.no_such_field", "1", "--out", out]), 2);
    assert_eq!(code(&["run", "--checkpoint", "/nonexistent/model.ckpt", "--out", out]), 2);
    assert_eq!(code(&["bogus"]), 2);

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[adapter]\nlearning_rate = -1.0\n").unwrap();
    assert_eq!(code(&["run", "--config", cfg.to_str().unwrap(), "--out", out]), 2);
    assert_eq!(Command::new(BIN).arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn default_dataset_degrades_when_video_is_missing() {
    let mut cfg = ExperimentConfig::default();
    cfg.sweep.methods = vec![modality_tta::adapt::Method::None];
    cfg.sweep.missing_rates = vec![0.0, 1.0];
    cfg.sweep.seeds = vec![0];
    let split = load_split(&cfg).unwrap();
    let model = modality_tta::cli::obtain_model(&cfg, &split).unwrap();
    let av = accuracy(&model, &split.val, Modality::AudioVisual).unwrap();
    for m in [Modality::Audio, Modality::Video] {
        assert!(av > accuracy(&model, &split.val, m).unwrap());
    }
    let table = modality_tta::cli::run_sweep(&cfg, &model, &split.val, None);
    assert_eq!(table.cells.len(), 2);
    let none = modality_tta::adapt::Method::None;
    assert!(table.cell(none, 0.0).unwrap().mean_accuracy >= table.cell(none, 1.0).unwrap().mean_accuracy);
}
