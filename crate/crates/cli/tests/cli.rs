use std::path::Path;
use std::process::{Command, Output};

use asc_core::audio::{write_wav, AudioClip, SampleFormat};
use asc_core::checkpoint::{load_features, Checkpoint};
use asc_core::eval::EvalReport;

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcnn-asc")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_MODEL: &str = "[model]\nchannels = [2, 8, 8, 16]\nglobal_hidden = 32\n";

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn synth(dir: &Path, out: &str, spec: &str) {
    write(dir, "synth.toml", spec);
    let o = run(&["synth", "--spec", "synth.toml", "--out-dir", out], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn synth_counts_clips_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = "num_scenes = 4\nnum_cities = 4\nclips_per_pair = 10\nseed = 3\n";
    synth(tmp.path(), "a", spec);
    synth(tmp.path(), "b", spec);
    let manifest = std::fs::read_to_string(tmp.path().join("a/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 160);
    let a = dir_bytes(&tmp.path().join("a"));
    assert_eq!(a.len(), 161);
    assert_eq!(a, dir_bytes(&tmp.path().join("b")));
}

#[test]
fn features_shape_idempotence_and_missing_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let ten_seconds = |phase: f32| (0..480_000).map(|i| (0.001 * i as f32 + phase).sin() * 0.25).collect::<Vec<f32>>();
    let clip = AudioClip::new(vec![ten_seconds(0.0), ten_seconds(1.0)], 48_000).unwrap();
    std::fs::create_dir(dir.join("audio")).unwrap();
    let names = ["park-lyon-1-1-a.wav", "park-milan-2-1-a.wav", "bus-lyon-3-1-a.wav"];
    for n in names {
        write_wav(dir.join("audio").join(n), &clip, SampleFormat::Pcm16).unwrap();
    }
    let mut manifest = String::from("path\tscene_label\tsplit\n");
    for n in names {
        manifest.push_str(&format!("{n}\t{}\ttrain\n", n.split('-').next().unwrap()));
    }
    write(dir, "m.tsv", &manifest);
    let args = ["features", "--manifest", "m.tsv", "--audio-dir", "audio", "--mel-bins", "40", "--out", "feat"];

    let first = run(&args, dir);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert!(stdout(&first).contains("3 written, 0 up to date"));
    let t = load_features(&dir.join("feat/park-lyon-1-1-a.feat")).unwrap();
    assert_eq!(t.shape(), &[2, 40, 467]);
    assert_eq!(std::fs::read_to_string(dir.join("feat/index.tsv")).unwrap().lines().count(), 4);

    let again = run(&args, dir);
    assert!(stdout(&again).contains("0 written, 3 up to date"), "{}", stdout(&again));

    manifest.push_str("metro-lyon-9-1-a.wav\tmetro\ttrain\n");
    write(dir, "m.tsv", &manifest);
    let missing = run(&args, dir);
    assert_eq!(code(&missing), 2);
    assert!(stderr(&missing).contains("row 5"), "{}", stderr(&missing));
    assert!(dir.join("feat/bus-lyon-3-1-a.feat").exists());
    assert_eq!(std::fs::read_to_string(dir.join("feat/index.tsv")).unwrap().lines().count(), 4);
}

#[test]
fn mixup_with_triplet_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "d", "num_scenes = 2\nnum_cities = 2\nclips_per_pair = 4\n");
    let o = run(
        &["train", "--manifest", "d/manifest.tsv", "--features-dir", "d", "--loss", "ce+triplet", "--augment", "mixup", "--out-checkpoint", "m.ckpt"],
        tmp.path(),
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("mixup cannot be combined with the triplet loss"), "{}", stderr(&o));
    assert!(!tmp.path().join("m.ckpt").exists());
}

#[test]
fn train_is_reproducible_and_eval_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "d", "num_scenes = 3\nnum_cities = 3\nclips_per_pair = 4\n");
    write(dir, "c.toml", &format!("{TINY_MODEL}[train]\nepochs = 2\nbatch_size = 8\nlast_k = 1\n[train.augment.specaug]\nmax_time_width = 8\n"));
    let train = |out: &str| {
        let o = run(
            &["train", "--manifest", "d/manifest.tsv", "--features-dir", "d", "--config", "c.toml", "--loss", "ce+triplet",
              "--augment", "specaug", "--seed", "7", "--quiet", "--out-checkpoint", out],
            dir,
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    train("a/m.ckpt");
    train("b/m.ckpt");
    let report_a = std::fs::read(dir.join("a/m.report.toml")).unwrap();
    assert_eq!(report_a, std::fs::read(dir.join("b/m.report.toml")).unwrap());
    assert_eq!(std::fs::read(dir.join("a/m.ckpt")).unwrap(), std::fs::read(dir.join("b/m.ckpt")).unwrap());
    assert_eq!(std::fs::read_to_string(dir.join("a/m.curve.csv")).unwrap().lines().count(), 3);

    // The stored report scores the final model on the eval split; eval must agree.
    let o = run(&["eval", "--checkpoint", "a/m.ckpt", "--manifest", "d/manifest.tsv", "--features-dir", "d"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let evaluated = EvalReport::from_text(&stdout(&o)).unwrap();
    let stored = EvalReport::from_text(std::str::from_utf8(&report_a).unwrap()).unwrap();
    assert_eq!(evaluated.overall_accuracy, stored.overall_accuracy);
    assert_eq!(evaluated.unseen_city_accuracy, stored.unseen_city_accuracy);
    assert_eq!(evaluated.confusion, stored.confusion);

    let o = run(&["inspect", "--checkpoint", "a/m.ckpt"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let model = Checkpoint::load(&dir.join("a/m.ckpt")).unwrap().model().unwrap();
    let total_line = stdout(&o).lines().find(|l| l.starts_with("total")).unwrap().to_string();
    assert_eq!(total_line.split_whitespace().nth(1).unwrap(), model.parameter_count().to_string());
}

#[test]
fn eval_rejects_mel_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "d40", "num_scenes = 2\nnum_cities = 2\nclips_per_pair = 4\n");
    synth(dir, "d48", "num_scenes = 2\nnum_cities = 2\nclips_per_pair = 4\nmel_bins = 48\n");
    write(dir, "c.toml", &format!("{TINY_MODEL}[train]\nepochs = 1\nbatch_size = 8\nlast_k = 1\n"));
    let o = run(
        &["train", "--manifest", "d40/manifest.tsv", "--features-dir", "d40", "--config", "c.toml", "--quiet", "--out-checkpoint", "m.ckpt"],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["eval", "--checkpoint", "m.ckpt", "--manifest", "d48/manifest.tsv", "--features-dir", "d48"], dir);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("48 mel bins"), "{}", stderr(&o));
}

#[test]
fn eval_on_training_split_of_an_overfit_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "d", "num_scenes = 3\nnum_cities = 1\nclips_per_pair = 8\neval_fraction = 0.0\nnoise_level = 0.3\n");
    write(dir, "c.toml", &format!("{TINY_MODEL}dropout = 0.0\n[train]\nepochs = 60\nbatch_size = 8\nlast_k = 1\n"));
    let o = run(
        &["train", "--manifest", "d/manifest.tsv", "--features-dir", "d", "--config", "c.toml", "--quiet", "--out-checkpoint", "m.ckpt"],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["eval", "--checkpoint", "m.ckpt", "--manifest", "d/manifest.tsv", "--features-dir", "d", "--split", "train"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = EvalReport::from_text(&stdout(&o)).unwrap();
    assert_eq!(report.clips, 24);
    assert!(report.overall_accuracy >= 0.99, "{}", report.overall_accuracy);
}

#[test]
fn inspect_presets_show_the_reduction() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["inspect", "--preset", "logmel200"], tmp.path());
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("factorized 686440 / full 2235092"), "{out}");
    let full = run(&["inspect", "--preset", "logmel200", "--full"], tmp.path());
    assert!(stdout(&full).lines().any(|l| l.starts_with("total") && l.ends_with("2235092")));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&run(&["frobnicate"], dir)), 1);
    assert_eq!(code(&run(&["--help"], dir)), 0);
    assert_eq!(code(&run(&["inspect"], dir)), 1);

    write(dir, "bad.tsv", "path\tscene_label\tcity\tsplit\nx.wav\tpark\tc\ttrain\nx.wav\tpark\tc\ttrain\n");
    let o = run(&["train", "--manifest", "bad.tsv", "--features-dir", ".", "--out-checkpoint", "m.ckpt"], dir);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    write(dir, "bad.toml", "[train]\nlr = -1.0\n");
    synth(dir, "d", "num_scenes = 2\nnum_cities = 2\nclips_per_pair = 2\n");
    let o = run(&["train", "--manifest", "d/manifest.tsv", "--features-dir", "d", "--config", "bad.toml", "--out-checkpoint", "m.ckpt"], dir);
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    write(dir, "junk.ckpt", "not a checkpoint");
    assert_eq!(code(&run(&["inspect", "--checkpoint", "junk.ckpt"], dir)), 2);
    assert_eq!(code(&run(&["inspect", "--checkpoint", "absent.ckpt"], dir)), 2);
}
