use std::path::Path;
use std::process::{Command, Output};

use hingenet::data::{broaden, load_dataset, read_annotation};
use hingenet::hingenet::ActivationPair;
use hingenet::postprocess::save_activations;
use hingenet::tensorcore::{Shape, Tensor};

fn hingenet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hingenet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = hingenet(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], cwd: &Path, code: i32) -> String {
    let out = hingenet(args, cwd);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

const TINY: [&str; 14] = [
    "--set",
    "data.n_items=6",
    "--set",
    "data.duration_s=4",
    "--set",
    "stub.hidden=32",
    "--set",
    "stub.n_layers=2",
    "--set",
    "hinge.projection_factor=2",
    "--set",
    "train.max_epochs=2",
    "--set",
    "train.augmentation=false",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(TINY);
    v
}

#[test]
fn intervals_for_twelve_bins() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ok(&["intervals", "--Q", "12", "--n", "5"], dir.path()), "12 7 5 4\n");
    assert_eq!(ok(&["intervals"], dir.path()), "12 7 5 4\n");
    fails_with(&["intervals", "--n", "1"], dir.path(), 2);
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--seed", "7", "--out", "a"], dir.path());
    ok(&["gen-data", "--seed", "7", "--out", "b"], dir.path());
    let a = tree(&dir.path().join("a"));
    assert_eq!(a.len(), 2 * 60 + 1);
    assert_eq!(a, tree(&dir.path().join("b")));
    ok(&["gen-data", "--seed", "8", "--out", "c"], dir.path());
    assert_ne!(a, tree(&dir.path().join("c")));
}

#[test]
fn decoding_a_clean_activation_scores_its_own_annotation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "gen-data",
            "--seed",
            "3",
            "--set",
            "data.n_items=3",
            "--set",
            "data.noise_sigma=0",
            "--set",
            "data.tempo_jitter=0",
            "--out",
            "clean",
        ],
        d,
    );
    let ds = load_dataset(&d.join("clean")).unwrap();
    for (k, ex) in ds.items.iter().enumerate() {
        let ann = read_annotation(&d.join(format!("clean/item_{k}.beats"))).unwrap();
        let (t, fr) = (ex.n_frames(), ex.frame_rate);
        let row = |v: Vec<f64>| Tensor::new(Shape::new(1, 1, t), v).unwrap();
        let pair = ActivationPair {
            beat: row(broaden(&ann.beat_times, t, fr)),
            downbeat: row(broaden(&ann.downbeat_times(), t, fr)),
            frame_rate: fr,
        };
        let act = d.join(format!("item_{k}.act"));
        save_activations(&pair, &act).unwrap();
        let est = format!("item_{k}.est");
        ok(&["decode", "--activations", act.to_str().unwrap(), "--out", &est], d);
        let report: serde_json::Value = serde_json::from_str(&ok(
            &["evaluate", "--est", &est, "--ref", &format!("clean/item_{k}.beats")],
            d,
        ))
        .unwrap();
        let f = report["report"]["f_measure"].as_f64().unwrap();
        assert!(f >= 0.99, "item {k}: F {f}");
        // decoding is idempotent
        let first = std::fs::read(d.join(&est)).unwrap();
        ok(&["decode", "--activations", act.to_str().unwrap(), "--out", &est], d);
        assert_eq!(std::fs::read(d.join(&est)).unwrap(), first);
    }
}

#[test]
fn unknown_keys_are_rejected_with_the_valid_list() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails_with(&["gen-data", "--set", "data.n_itemz=3", "--out", "x"], dir.path(), 2);
    assert!(err.contains("data.n_items") && err.contains("train.lr"), "{err}");
    std::fs::write(dir.path().join("c.json"), r#"{"hinge": {"r": 4}}"#).unwrap();
    let err = fails_with(&["gen-data", "--config", "c.json", "--out", "x"], dir.path(), 2);
    assert!(err.contains("hinge.r") && err.contains("hinge.projection_factor"));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn exit_codes_by_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fails_with(&["no-such-command"], d, 2);
    fails_with(&["gen-data"], d, 2);
    fails_with(&["train", "--data", "missing", "--out", "run"], d, 3);
    std::fs::write(d.join("junk.hgnm"), b"HGNM not really").unwrap();
    fails_with(&["inspect", "junk.hgnm"], d, 3);
    std::fs::write(d.join("bad.act"), "# frame_rate 50\n0.1\t2.0\n").unwrap();
    fails_with(&["decode", "--activations", "bad.act"], d, 3);

    std::fs::write(d.join("nan.act"), "# frame_rate 50\n0.1\t0.2\nNaN\t0.2\n").unwrap();
    let err = fails_with(&["decode", "--activations", "nan.act"], d, 4);
    assert!(err.contains("NaN"), "{err}");
}

#[test]
fn train_decode_evaluate_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&with_tiny(&["gen-data", "--seed", "2", "--out", "data"]), d);
    let line = ok(&with_tiny(&["train", "--data", "data", "--seed", "2", "--out", "run"]), d);
    assert!(line.starts_with("hinge: 2 epochs"), "{line}");
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("run/run.json")).unwrap()).unwrap();
    assert_eq!(run["record"]["epochs_run"], 2);
    assert_eq!(run["config"]["seed"], 2);

    let info: serde_json::Value = serde_json::from_str(&ok(&["inspect", "run/model.hgnm"], d)).unwrap();
    assert_eq!(info["kind"], "hinge");
    assert_eq!(info["spec"]["hidden"], 32);
    let trainable = info["counts"]["trainable"].as_u64().unwrap();
    let listed: u64 = info["parameters"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| p["trainable"].as_bool().unwrap())
        .map(|p| p["shape"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).product::<u64>())
        .sum();
    assert_eq!(trainable, listed);
    assert_eq!(info["param_digest"].as_str().unwrap().len(), 64);

    ok(&["decode", "--model", "run/model.hgnm", "--data", "data", "--split", "all", "--out", "est"], d);
    for k in 0..6 {
        assert!(d.join(format!("est/item_{k}.act")).is_file());
        assert!(d.join(format!("est/item_{k}.beats")).is_file());
    }
    let summary: serde_json::Value =
        serde_json::from_str(&ok(&["evaluate", "--est", "est", "--ref", "data", "--out", "scores.csv"], d)).unwrap();
    assert_eq!(summary["items"], 6);
    let csv = std::fs::read_to_string(d.join("scores.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6 + 2 - summary["excluded"].as_u64().unwrap() as usize);
}
