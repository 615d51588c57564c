use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "dataset.synthetic.image_size=32",
    "--set",
    "dataset.synthetic.train_per_class=3",
    "--set",
    "dataset.synthetic.val_per_class=2",
    "--set",
    "dataset.synthetic.test_per_class=2",
    "--set",
    "train.resize=32",
    "--set",
    "train.crop=32",
    "--set",
    "train.stage1_epochs=1",
    "--set",
    "train.stage2_epochs=1",
    "--set",
    "train.batch_size=4",
    "--set",
    "train.n_minus_grid=[0.3]",
    "--set",
    "train.alpha_grid=[1.0]",
    "--set",
    "eval.timing_runs=2",
    "--set",
    "eval.save_cams=true",
];

fn fcam(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcam"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> serde_json::Value {
    let out = fcam(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn failure(dir: &Path, args: &[&str]) -> (i32, serde_json::Value) {
    let out = fcam(dir, args);
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    (out.status.code().unwrap(), err)
}

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TINY.iter().copied()).collect()
}

#[test]
fn generate_is_deterministic_and_protects_existing_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = ok(a.path(), &with_tiny(&["generate", "--seed", "7"]));
    let mb = ok(b.path(), &with_tiny(&["generate", "--seed", "7"]));
    assert_eq!(ma, mb);
    for f in ["manifest.json", "train.tsv", "test.tsv", "images/train_00_0000.fcr", "masks/val_02_0001.fcr"] {
        assert_eq!(
            fs::read(a.path().join("data").join(f)).unwrap(),
            fs::read(b.path().join("data").join(f)).unwrap(),
            "{f}"
        );
    }
    let (code, err) = failure(a.path(), &with_tiny(&["generate", "--seed", "7"]));
    assert_eq!(code, 2);
    assert_eq!(err["error"], "config");
}

#[test]
fn exit_codes_are_distinct() {
    let d = tempfile::tempdir().unwrap();
    let (code, err) = failure(d.path(), &["train", "--set", "train.bogus=1"]);
    assert_eq!((code, err["error"].as_str().unwrap()), (2, "config"));
    let (code, _) = failure(d.path(), &["train", "--config", "missing.toml"]);
    assert_eq!(code, 2);
    let (code, err) = failure(d.path(), &["train"]);
    assert_eq!((code, err["error"].as_str().unwrap()), (4, "dataset_not_found"));
    let (code, err) = failure(d.path(), &["finetune"]);
    assert_eq!((code, err["error"].as_str().unwrap()), (3, "missing_checkpoint"));
    let (code, _) = failure(d.path(), &["eval", "--methods", "fcam"]);
    assert_eq!(code, 3);
}

#[test]
fn full_workflow_on_a_tiny_dataset() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &with_tiny(&["generate"]));
    let manifest_before = fs::read(p.join("data/manifest.json")).unwrap();

    let s1 = ok(p, &with_tiny(&["train"]));
    assert_eq!(s1["stage"], "classifier");
    assert!(p.join("run/config.toml").is_file());
    assert!(p.join("run/logs/stage1_epochs.jsonl").is_file());

    // the stored snapshot carries the tiny settings forward
    let s2 = ok(p, &["finetune"]);
    assert_eq!(s2["stage"], "decoder");
    assert_eq!(s2["epochs"], 1);

    let e1 = ok(p, &["eval", "--timing"]);
    let first = fs::read_to_string(p.join("run/reports/fcam_test.json")).unwrap();
    ok(p, &["eval"]);
    let second = fs::read_to_string(p.join("run/reports/fcam_test.json")).unwrap();
    assert_eq!(first, second);
    assert!(e1["timing"]["fcam_median_ms"].as_f64().unwrap() > 0.0);
    for r in e1["reports"].as_array().unwrap() {
        assert!(r["top5_loc"].as_f64() >= r["top1_loc"].as_f64());
    }

    let stored_a = ok(p, &["eval", "--cams", "run/cams/fcam_test"]);
    let stored_b = ok(p, &["eval", "--cams", "run/cams/fcam_test"]);
    assert_eq!(stored_a, stored_b);
    let direct: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(stored_a["max_box_acc_v2"], direct["max_box_acc_v2"]);

    let inferred = ok(p, &["infer", "data/images/test_01_0000.fcr", "--out", "maps"]);
    assert!(p.join(inferred[0]["map"].as_str().unwrap()).is_file());

    let rows = ok(p, &["ablate"]);
    let names: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["row"].as_str().unwrap()).collect();
    assert_eq!(names, ["baseline", "+SR", "+SR+CRF", "+SR+CRF+ASC"]);
    assert_eq!(rows[0]["delta_max_box_acc"], 0.0);

    let sweep = ok(p, &["sweep"]);
    assert_eq!(sweep["points"].as_array().unwrap().len(), 1);
    assert!(p.join("run/sweep/tau_curves.csv").is_file());

    let plots = ok(p, &["plot"]);
    assert!(plots.as_array().unwrap().iter().any(|f| f.as_str().unwrap().ends_with("tau_sensitivity_test.svg")));
    assert!(p.join("run/plots/n_minus.svg").is_file());

    assert_eq!(fs::read(p.join("data/manifest.json")).unwrap(), manifest_before);
}
