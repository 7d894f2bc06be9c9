use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seqenc::encoder::IGNORE;
use seqenc::synthdata::read_dataset;
use seqenc_cli::images::{Image, PALETTE};

fn seqenc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqenc")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = seqenc(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    seqenc(args, cwd).status.code().expect("exit code")
}

fn manifest(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Tiny dataset plus a briefly trained GRU checkpoint.
fn trained(dir: &Path) {
    ok(&["generate", "--out", "d.mtse", "--samples", "12", "--tile", "12", "--t", "8", "--seed", "5"], dir);
    ok(&["train", "--data", "d.mtse", "--out", "run", "--cell", "gru", "--r", "4", "--epochs", "2", "--n-keep", "5"], dir);
}

#[test]
fn generate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for (out, seed) in [("a.mtse", "3"), ("b.mtse", "3"), ("c.mtse", "4")] {
        ok(&["generate", "--out", out, "--samples", "6", "--tile", "10", "--t", "6", "--seed", seed], p);
    }
    let read = |f: &str| fs::read(p.join(f)).unwrap();
    assert_eq!(read("a.mtse"), read("b.mtse"));
    assert_ne!(read("a.mtse"), read("c.mtse"));
    let m = manifest(p.join("a.mtse.manifest.json"));
    assert_eq!(m["command"], "generate");
    assert_eq!(m["details"]["split_sizes"]["train"], 4);
    assert!(!p.join("a.mtse.lock").exists());
}

#[test]
fn generate_handles_the_class_limit() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["generate", "--out", "d.mtse", "--samples", "3", "--classes", "17", "--tile", "20", "--t", "5", "--ratio", "1:1:1"], p);
    let ds = read_dataset(&p.join("d.mtse")).unwrap();
    assert_eq!(ds.n_classes, 17);
    assert_eq!(code(&["generate", "--out", "e.mtse", "--classes", "18"], p), 2);
    assert_eq!(code(&["generate", "--out", "e.mtse", "--ratio", "4:1"], p), 2);
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&["train", "--data", "missing.mtse", "--out", "run"], p), 3);
    fs::write(p.join("junk.mtse"), b"not a dataset").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", "x", "--data", "junk.mtse", "--out", "ev"], p), 3);
    assert_eq!(code(&["gradcheck", "--cells", "lstm", "--probes", "16", "--inject-wrong-gradient", "head.proj"], p), 4);
    assert_eq!(code(&["gradcheck", "--cells", "cnn"], p), 2);
    assert_eq!(code(&["train"], p), 2);
    assert_eq!(code(&["bogus"], p), 2);
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("gen.json"), r#"{"out": "cfg.mtse", "samples": 4, "tile": 10, "t": 5, "seed": 9, "classes": 3}"#).unwrap();
    ok(&["generate", "--config", "gen.json", "--classes", "4"], p);
    let ds = read_dataset(&p.join("cfg.mtse")).unwrap();
    assert_eq!((ds.len(), ds.t, ds.n_classes), (4, 5, 4));
}

#[test]
fn locked_output_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::create_dir(p.join("run")).unwrap();
    fs::write(p.join("run/.lock"), b"").unwrap();
    ok(&["generate", "--out", "d.mtse", "--samples", "6", "--tile", "10", "--t", "5"], p);
    assert_eq!(code(&["train", "--data", "d.mtse", "--out", "run", "--r", "2", "--epochs", "1"], p), 2);
}

#[test]
fn train_writes_history_checkpoints_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["generate", "--out", "d.mtse", "--samples", "12", "--tile", "12", "--t", "8", "--seed", "5"], p);
    ok(
        &["train", "--data", "d.mtse", "--out", "run", "--cell", "lstm", "--r", "3", "--epochs", "1", "--checkpoint-every", "1"],
        p,
    );
    let history = fs::read_to_string(p.join("run/history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "step,epoch,loss");
    assert_eq!(lines.len(), 3, "8 training samples in batches of 4");
    assert!(p.join("run/checkpoints/step-000001.mtck").exists());
    assert!(p.join("run/checkpoints/step-000002.mtck").exists());
    let m = manifest(p.join("run/manifest.json"));
    assert_eq!(m["details"]["steps"], 2);
    assert!(m["outputs"].as_object().unwrap().keys().any(|k| k.ends_with("checkpoint.mtck")));
    assert_eq!(m["details"]["cell_param_count"], 4 * (9 * (3 + 15) * 3 + 3));
}

#[test]
fn eval_heatmap_matches_confusion_csv() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    trained(p);
    ok(&["eval", "--checkpoint", "run/checkpoint.mtck", "--data", "d.mtse", "--out", "ev", "--cell-px", "3"], p);
    let csv = fs::read_to_string(p.join("ev/confusion.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        csv.lines().skip(1).map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect()).collect();
    let img = Image::load(&p.join("ev/confusion.ppm")).unwrap();
    assert_eq!((img.width, img.height), (3 * rows.len(), 3 * rows.len()));
    for (i, row) in rows.iter().enumerate() {
        let total: f64 = row.iter().sum();
        for (j, &v) in row.iter().enumerate() {
            let share = if total > 0.0 { v / total } else { 0.0 };
            assert_eq!(img.pixel(3 * i + 1, 3 * j + 1)[0], (255.0 * share).round() as u8);
        }
    }
    let metrics = fs::read_to_string(p.join("ev/metrics.csv")).unwrap();
    assert!(metrics.starts_with("row,precision,recall,f_measure,conditional_kappa,support,degenerate,value\n"));
    assert!(metrics.contains("\noverall_accuracy,") && metrics.contains("\nkappa,"));
}

#[test]
fn eval_of_reference_labels_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    trained(p);
    ok(&["eval", "--checkpoint", "run/checkpoint.mtck", "--data", "d.mtse", "--out", "ev", "--debug-perfect"], p);
    let m = manifest(p.join("ev/manifest.json"));
    assert_eq!(m["details"]["overall_accuracy"], 1.0);
    assert_eq!(m["details"]["kappa"], 1.0);
}

#[test]
fn infer_prediction_is_argmax_of_activation_maps() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    trained(p);
    ok(&["infer", "--checkpoint", "run/checkpoint.mtck", "--data", "d.mtse", "--sample", "1", "--out", "inf"], p);
    let pred = Image::load(&p.join("inf/prediction.ppm")).unwrap();
    let maps: Vec<Image> = (0..8).map(|k| Image::load(&p.join(format!("inf/activation_class{k:02}.pgm"))).unwrap()).collect();
    for y in 0..pred.height {
        for x in 0..pred.width {
            let class = PALETTE.iter().position(|c| c == pred.pixel(y, x)).expect("palette colour");
            let best = maps.iter().map(|m| m.pixel(y, x)[0]).max().unwrap();
            // 8-bit quantisation can tie the winner with a runner-up.
            assert_eq!(maps[class].pixel(y, x)[0], best);
        }
    }
    let ds = read_dataset(&p.join("d.mtse")).unwrap();
    let labels = Image::load(&p.join("inf/labels.ppm")).unwrap();
    let truth = &ds.samples[1].sample.labels;
    for (i, &l) in truth.labels.iter().enumerate() {
        let want = if l == IGNORE { [0, 0, 0] } else { PALETTE[l as usize] };
        assert_eq!(labels.pixel(i / labels.width, i % labels.width), want);
    }
    let loss = Image::load(&p.join("inf/loss.pgm")).unwrap();
    for (i, &l) in truth.labels.iter().enumerate() {
        if l == IGNORE {
            assert_eq!(loss.data[i], 0);
        }
    }
    assert_eq!(Image::load(&p.join("inf/rgb.ppm")).unwrap().channels, 3);
    assert_eq!(code(&["infer", "--checkpoint", "run/checkpoint.mtck", "--data", "d.mtse", "--sample", "99", "--out", "x"], p), 2);
}

#[test]
fn activations_export_maps_grid_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["generate", "--out", "d.mtse", "--samples", "6", "--tile", "10", "--t", "6", "--seed", "2"], p);
    ok(&["train", "--data", "d.mtse", "--out", "run", "--cell", "lstm", "--r", "3", "--epochs", "1"], p);
    ok(
        &["activations", "--checkpoint", "run/checkpoint.mtck", "--data", "d.mtse", "--sample", "0", "--cells", "0,2", "--inject-cloud", "1", "--out", "act"],
        p,
    );
    let csv = fs::read_to_string(p.join("act/activations.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,frame,cell,map,mean,min,max"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let ds = read_dataset(&p.join("d.mtse")).unwrap();
    let steps = ds.samples[0].sample.observed().len();
    assert_eq!(rows.len(), steps * 2 * 5);
    for r in &rows {
        let (lo, hi): (f64, f64) = (r[5].parse().unwrap(), r[6].parse().unwrap());
        match r[3] {
            "i" | "f" | "o" => assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi)),
            "j" => assert!(lo >= -1.0 && hi <= 1.0),
            "c" => {}
            other => panic!("unexpected map {other}"),
        }
    }
    for name in ["i", "j", "f", "o", "c"] {
        let g = Image::load(&p.join(format!("act/grid_{name}.pgm"))).unwrap();
        assert_eq!((g.width, g.height), (10 * steps, 10 * 2));
    }
    assert!(p.join("act/maps/step000_cell002_f.pgm").exists());
    let m = manifest(p.join("act/manifest.json"));
    let s = &m["details"]["cloud_sensitivity"];
    assert_eq!(s["gate"], "i");
    assert_eq!(s["per_cell"].as_array().unwrap().len(), 2);
    assert_eq!(code(&["activations", "--checkpoint", "run/checkpoint.mtck", "--data", "d.mtse", "--sample", "0", "--cells", "3", "--out", "bad"], p), 2);
}

#[test]
fn gradcheck_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let stdout = ok(&["gradcheck", "--cells", "gru", "--probes", "32", "--out", "gc"], p);
    assert_eq!(stdout.lines().filter(|l| l.ends_with("PASS")).count(), 6);
    let report: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(p.join("gc/report.json")).unwrap()).unwrap();
    assert!(report.iter().all(|e| e["pass"] == true));
}

#[test]
fn perfect_predictor_has_an_all_zero_loss_map() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    trained(p);
    ok(&["infer", "--checkpoint", "run/checkpoint.mtck", "--data", "d.mtse", "--sample", "0", "--out", "inf", "--debug-perfect"], p);
    let loss = Image::load(&p.join("inf/loss.pgm")).unwrap();
    assert!(loss.data.iter().all(|&v| v == 0));
    let written = fs::read_dir(p.join("inf")).unwrap().filter(|e| {
        e.as_ref().unwrap().file_name().to_string_lossy().starts_with("activation_class")
    });
    assert_eq!(written.count(), 8);
}

#[test]
fn manifests_record_gru_and_lstm_counts_in_ratio_three_to_four() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["generate", "--out", "d.mtse", "--samples", "6", "--tile", "10", "--t", "5", "--seed", "4"], p);
    let mut counts = Vec::new();
    for cell in ["gru", "lstm"] {
        ok(&["train", "--data", "d.mtse", "--out", cell, "--cell", cell, "--r", "5", "--epochs", "1"], p);
        counts.push(manifest(p.join(cell).join("manifest.json"))["details"]["cell_param_count"].as_u64().unwrap());
    }
    assert_eq!(4 * counts[0], 3 * counts[1]);
}

#[test]
fn reruns_produce_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    trained(p);
    for out in ["e1", "e2"] {
        ok(&["infer", "--checkpoint", "run/checkpoint.mtck", "--data", "d.mtse", "--sample", "2", "--out", out], p);
    }
    let a = manifest(p.join("e1/manifest.json"));
    let b = manifest(p.join("e2/manifest.json"));
    let hashes = |m: &serde_json::Value| -> Vec<String> {
        m["outputs"].as_object().unwrap().values().map(|v| v.as_str().unwrap().to_string()).collect()
    };
    assert_eq!(hashes(&a), hashes(&b));
}
