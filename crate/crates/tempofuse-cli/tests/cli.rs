//! End-to-end tests that drive the compiled binary the way a user would:
//! synthesize a corpus, extract features, train, evaluate, and predict,
//! checking the printed contracts and on-disk artifacts along the way.

use std::path::Path;
use std::process::Output;

use tempofuse::data::{read_manifest_csv, read_split_csv};
use tempofuse::models::{ArchConfig, Checkpoint, Model, ModelKind};
use tempofuse::train::fit_normalization;

/// One Fourier tempogram bin in BPM for the fixed analysis recipe.
const BIN_BPM: f64 = 60.0 * (22050.0 / 512.0) / 384.0;

fn tempofuse(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_tempofuse"))
        .args(args)
        // Keep the suite hermetic even if the outer shell points the
        // cache somewhere else.
        .env_remove("TEMPOFUSE_CACHE")
        .output()
        .expect("spawn tempofuse")
}

fn ok_stdout(args: &[&str]) -> String {
    let out = tempofuse(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn write_two_class_spec(path: &Path, songs_per_class: usize, duration_s: f64) {
    let spec = format!(
        concat!(
            "{{\"classes\":[",
            "{{\"name\":\"bpm090\",\"bpm\":90.0,\"timbre\":\"click\",\"jitter\":0.02}},",
            "{{\"name\":\"bpm140\",\"bpm\":140.0,\"timbre\":\"click\",\"jitter\":0.02}}],",
            "\"songs_per_class\":{},\"duration_s\":{:.1},\"sample_rate\":22050}}"
        ),
        songs_per_class, duration_s
    );
    std::fs::write(path, spec).expect("write spec");
}

fn s(path: &Path) -> &str {
    path.to_str().expect("utf8 path")
}

#[test]
fn pipeline_from_synthesis_to_prediction() {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path().join("corpus");
    let spec = dir.path().join("spec.json");
    write_two_class_spec(&spec, 10, 12.0);

    let out = ok_stdout(&[
        "synth",
        "--out",
        s(&root),
        "--spec",
        s(&spec),
        "--seed",
        "7",
    ]);
    assert!(out.contains("synthesized 20 songs in 2 classes"), "{out}");
    assert!(root.join("manifest.csv").is_file());

    let out = ok_stdout(&["extract", "--root", s(&root)]);
    assert!(out.contains("extracted 20 skipped 0"), "{out}");
    // A second pass must not redo work: cached features are immutable.
    let out = ok_stdout(&["extract", "--root", s(&root)]);
    assert!(out.contains("extracted 0 skipped 20"), "{out}");

    let tempo_csv = root.join("tempo.csv");
    ok_stdout(&["tempo", "--root", s(&root), "--out", s(&tempo_csv)]);
    let text = std::fs::read_to_string(&tempo_csv).expect("tempo csv");
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let mut fields = line.split(',');
        let _song = fields.next().expect("song field");
        let class = fields.next().expect("class field");
        let bpm: f64 = fields.next().expect("bpm field").parse().expect("bpm");
        let want: f64 = class[3..].parse().expect("class bpm");
        assert!(
            (bpm - want).abs() <= BIN_BPM + 1e-9,
            "{class} estimated at {bpm}"
        );
        rows += 1;
    }
    assert_eq!(rows, 20);

    let run = root.join("run");
    let out = ok_stdout(&[
        "train",
        "--root",
        s(&root),
        "--mode",
        "ftg_only",
        "--out",
        s(&run),
        "--reduced",
        "--epochs",
        "12",
        "--patience",
        "0",
        "--batch-size",
        "32",
        "--dropout",
        "0.1",
    ]);
    assert!(out.contains("best epoch"), "{out}");
    assert!(root.join("split.csv").is_file(), "train draws the split");
    assert!(run.join("model.tfck").is_file());
    assert!(run.join("epochs.csv").is_file());

    let eval_dir = root.join("eval");
    let out = ok_stdout(&[
        "eval",
        "--checkpoint",
        s(&run.join("model.tfck")),
        "--root",
        s(&root),
        "--out",
        s(&eval_dir),
    ]);
    let song_acc: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("song_accuracy,"))
        .expect("song_accuracy line")
        .parse()
        .expect("accuracy value");
    assert!((0.0..=1.0).contains(&song_acc));
    assert!(eval_dir.join("per_class.csv").is_file());
    assert!(eval_dir.join("confusion.pgm").is_file());

    // One test song per class, so every confusion row sums to one.
    let confusion = std::fs::read_to_string(eval_dir.join("confusion.csv")).expect("confusion");
    for line in confusion.lines().skip(1) {
        let total: u32 = line
            .split(',')
            .skip(1)
            .map(|v| v.parse::<u32>().expect("count"))
            .sum();
        assert_eq!(total, 1, "unexpected row in {confusion}");
    }

    let manifest = read_manifest_csv(&root.join("manifest.csv")).expect("manifest");
    let wav = root.join(&manifest.entries()[0].relative_path);
    let out = ok_stdout(&[
        "predict",
        "--checkpoint",
        s(&run.join("model.tfck")),
        "--wav",
        s(&wav),
    ]);
    assert!(out.contains("score,bpm090,"), "{out}");
    assert!(out.contains("score,bpm140,"), "{out}");
    let scores: f64 = out
        .lines()
        .filter_map(|l| l.strip_prefix("score,"))
        .map(|l| l.split(',').nth(1).expect("score").parse::<f64>().unwrap())
        .sum();
    assert!((scores - 1.0).abs() < 1e-3, "softmax scores sum to {scores}");
    let winner = out
        .lines()
        .find_map(|l| l.strip_prefix("prediction,"))
        .expect("prediction line");
    assert!(winner == "bpm090" || winner == "bpm140", "{winner}");
}

#[test]
fn eval_rejects_a_split_without_the_requested_partition() {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path().join("corpus");
    let spec = dir.path().join("spec.json");
    write_two_class_spec(&spec, 2, 6.0);
    ok_stdout(&["synth", "--out", s(&root), "--spec", s(&spec)]);
    ok_stdout(&["extract", "--root", s(&root)]);

    let manifest = read_manifest_csv(&root.join("manifest.csv")).expect("manifest");
    let mut split = String::from("song_id,partition\n");
    for e in manifest.entries() {
        split.push_str(&format!("{},train\n", e.song_id));
    }
    let split_path = root.join("split.csv");
    std::fs::write(&split_path, split).expect("write split");

    // A checkpoint with untrained weights is enough: the failure must
    // happen while gathering the partition, before any scoring.
    let split = read_split_csv(&split_path).expect("split");
    let stats = fit_normalization(&manifest, &split, &root.join("feature_cache")).expect("stats");
    let ckpt = Checkpoint {
        model: Model::<f32>::init(ArchConfig::reduced(ModelKind::FtgOnly, 2), 0).expect("model"),
        class_names: manifest.classes().to_vec(),
        stats: stats.to_vec(),
    };
    let ckpt_path = root.join("model.tfck");
    ckpt.save(&ckpt_path).expect("save checkpoint");

    let out = tempofuse(&[
        "eval",
        "--checkpoint",
        s(&ckpt_path),
        "--root",
        s(&root),
        "--out",
        s(&root.join("eval")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: "), "{err}");
    assert!(err.contains("empty split"), "{err}");
}

#[test]
fn config_file_sets_defaults_and_flags_win() {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path().join("corpus");
    let spec = dir.path().join("spec.json");
    write_two_class_spec(&spec, 10, 6.0);
    ok_stdout(&["synth", "--out", s(&root), "--spec", s(&spec)]);
    ok_stdout(&["extract", "--root", s(&root)]);

    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"epochs": 2, "patience": 0, "dropout": 0.0}"#).expect("config");

    let base = [
        "train",
        "--root",
        s(&root),
        "--mode",
        "ftg_only",
        "--reduced",
        "--config",
        s(&config),
    ];
    let mut args = base.to_vec();
    let out_a = root.join("a");
    args.extend(["--out", s(&out_a)]);
    let out = ok_stdout(&args);
    assert!(out.contains("; 2 epochs run"), "{out}");

    let mut args = base.to_vec();
    let out_b = root.join("b");
    args.extend(["--out", s(&out_b), "--epochs", "1"]);
    let out = ok_stdout(&args);
    assert!(out.contains("; 1 epochs run"), "{out}");

    std::fs::write(&config, r#"{"epoch": 2}"#).expect("config");
    let mut args = base.to_vec();
    let out_c = root.join("c");
    args.extend(["--out", s(&out_c)]);
    let out = tempofuse(&args);
    assert!(!out.status.success(), "typo keys must not pass silently");
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn unknown_mode_is_a_single_error_line() {
    let out = tempofuse(&[
        "train",
        "--root",
        "/nonexistent",
        "--mode",
        "quux",
        "--out",
        "/nonexistent/out",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    assert!(err.contains("quux"), "{err}");
}

#[test]
fn cache_env_var_is_honored() {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path().join("corpus");
    let cache = dir.path().join("elsewhere");
    let spec = dir.path().join("spec.json");
    write_two_class_spec(&spec, 2, 6.0);
    ok_stdout(&["synth", "--out", s(&root), "--spec", s(&spec)]);

    let out = std::process::Command::new(env!("CARGO_BIN_EXE_tempofuse"))
        .args(["extract", "--root", s(&root)])
        .env("TEMPOFUSE_CACHE", s(&cache))
        .output()
        .expect("spawn tempofuse");
    assert!(out.status.success());
    let cached = std::fs::read_dir(&cache).expect("cache dir").count();
    assert_eq!(cached, 4, "four songs cached in $TEMPOFUSE_CACHE");
    assert!(!root.join("feature_cache").exists());
}

#[test]
fn help_documents_the_analysis_recipe() {
    let out = ok_stdout(&["extract", "--help"]);
    assert!(out.contains("2048-sample windows"), "{out}");
    assert!(out.contains("hop 512"), "{out}");
    assert!(out.contains("128 Mel bins"), "{out}");
    assert!(out.contains("200-frame chunks"), "{out}");

    let out = ok_stdout(&["train", "--help"]);
    assert!(out.contains("8:1:1"), "{out}");
    assert!(out.contains("[default: 200]"), "{out}");
    assert!(out.contains("[default: 256]"), "{out}");
    assert!(out.contains("[default: 0.005]"), "{out}");
}
