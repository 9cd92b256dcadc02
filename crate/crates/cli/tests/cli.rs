use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semicircle_core::nn::{Checkpoint, Model, ModelSpec};
use semicircle_core::synth::{self, generate, Dataset, GeneratorSpec};

fn semicircle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semicircle")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn kitti_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/kitti").join(name)
}

fn gen_small(dir: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let o = semicircle(&["gen", "--count", "120", "--kappa", "0.5", "--seed", "7", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn gen_writes_loadable_deterministic_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = semicircle(&["gen", "--count", "1000", "--kappa", "0.5", "--seed", "7", "--out", p(&dir.path().join("d.bin"))]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("samples 1000"));
    assert!(stdout(&o).contains("label_balance"));
    let d = synth::load(dir.path().join("d.bin")).unwrap();
    assert_eq!(d.len(), 1000);
    semicircle(&["gen", "--count", "1000", "--kappa", "0.5", "--seed", "7", "--out", p(&dir.path().join("e.bin"))]);
    assert_eq!(fs::read(dir.path().join("d.bin")).unwrap(), fs::read(dir.path().join("e.bin")).unwrap());
}

#[test]
fn gen_rejects_bad_kappa() {
    let dir = tempfile::tempdir().unwrap();
    let o = semicircle(&["gen", "--kappa", "1.5", "--out", p(&dir.path().join("d.bin"))]);
    assert_eq!(code(&o), 1);
    assert!(!dir.path().join("d.bin").exists());
}

#[test]
fn unwritable_output_is_an_io_error() {
    let o = semicircle(&["gen", "--count", "4", "--out", "/nonexistent-dir/d.bin"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn vanilla_run_completes() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), "d.bin");
    let out = dir.path().join("run");
    let o = semicircle(&[
        "train", "--mode", "vanilla", "--scale", "desk", "--dataset", p(&data), "--out-dir", p(&out),
        "--stage1-iters", "40",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stages"].as_array().unwrap().len(), 1);
    assert_eq!(manifest["config"]["mode"], "vanilla");
    assert!(out.join("final.ckpt").exists());
    assert!(fs::read_to_string(out.join("train_log.csv")).unwrap().starts_with("stage,iteration,total,ce,mse,unsup,holdout_accuracy\n"));
}

#[test]
fn supervised_run_writes_three_stage_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), "d.bin");
    let out = dir.path().join("run");
    let o = semicircle(&[
        "train", "--mode", "supervised", "--scale", "desk", "--dataset", p(&data), "--out-dir", p(&out),
        "--stage1-iters", "30", "--stage2-iters", "20", "--stage3-iters", "10",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for s in 1..=3 {
        assert!(Checkpoint::load(out.join(format!("stage{s}.ckpt"))).is_ok());
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let iters: Vec<u64> = manifest["stages"].as_array().unwrap().iter().map(|s| s["iterations"].as_u64().unwrap()).collect();
    assert_eq!(iters, [30, 20, 10]);
    assert!(manifest["config_text"].as_str().unwrap().contains("stage2.iters = 20"));
}

#[test]
fn semisupervised_manifest_has_two_stages() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), "d.bin");
    let out = dir.path().join("run");
    let config = dir.path().join("run.cfg");
    fs::write(&config, "mode = semisupervised\nstage1.iters = 20\nstage3.iters = 10\n").unwrap();
    let o = semicircle(&["train", "--config", p(&config), "--dataset", p(&data), "--out-dir", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let ids: Vec<u64> = manifest["stages"].as_array().unwrap().iter().map(|s| s["stage_id"].as_u64().unwrap()).collect();
    assert_eq!(ids, [1, 3]);
}

#[test]
fn invalid_training_requests_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), "d.bin");
    let out = dir.path().join("run");
    let o = semicircle(&["train", "--mode", "greedy", "--dataset", p(&data), "--out-dir", p(&out)]);
    assert_eq!(code(&o), 1);
    let o = semicircle(&["train", "--mode", "semisupervised", "--stage2-iters", "5", "--dataset", p(&data), "--out-dir", p(&out)]);
    assert_eq!(code(&o), 1);
    let o = semicircle(&["train", "--dataset", p(&dir.path().join("missing.bin")), "--out-dir", p(&out)]);
    assert_eq!(code(&o), 2);
}

/// A checkpoint whose classifier always answers the non-negative
/// semicircle, and a dataset holding only such orientations.
fn oracle_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let mut model = Model::new(ModelSpec::desk(32), 1).unwrap();
    model.param_mut("classifier.weight").unwrap().values.iter_mut().for_each(|v| *v = 0.0);
    model.param_mut("classifier.bias").unwrap().values = vec![10.0, -10.0];
    let ck = dir.join("oracle.ckpt");
    Checkpoint::new(model).save(&ck).unwrap();
    let all = generate(&GeneratorSpec {
        count: 60,
        ..Default::default()
    })
    .unwrap();
    let samples: Vec<_> = all.samples.into_iter().filter(|s| s.decomposition.epsilon == 1).collect();
    let spec = GeneratorSpec {
        count: samples.len(),
        ..all.spec
    };
    let data = dir.join("right.bin");
    synth::save(&Dataset { spec, samples }, &data).unwrap();
    (ck, data)
}

#[test]
fn eval_reports_accuracy_and_writes_formats() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, data) = oracle_fixture(dir.path());
    let out = dir.path().join("report.json");
    let o = semicircle(&["eval", "--model", p(&ck), "--data", p(&data), "--out", p(&out), "--format", "json,csv,svg"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("semicircle_accuracy 1.0000"));
    assert!(stdout(&o).contains("confusion_mass"));
    let svg = fs::read_to_string(dir.path().join("report.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert!(fs::read_to_string(dir.path().join("report.csv")).unwrap().starts_with("bin,lower,upper,count,mean_sq_error\n"));

    let rendered = dir.path().join("again.svg");
    let o = semicircle(&["report", "--input", p(&out), "--format", "svg", "--out", p(&rendered)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(rendered).unwrap(), svg);
}

#[test]
fn eval_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, _) = oracle_fixture(dir.path());
    let o = semicircle(&["gen", "--count", "8", "--side", "16", "--out", p(&dir.path().join("small.bin"))]);
    assert_eq!(code(&o), 0);
    let out = dir.path().join("r.json");
    let o = semicircle(&["eval", "--model", p(&ck), "--data", p(&dir.path().join("small.bin")), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    let o = semicircle(&["eval", "--model", p(&dir.path().join("missing.ckpt")), "--data", p(&dir.path().join("small.bin")), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn kitti_score_on_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let basic = kitti_fixture("basic");
    let out = dir.path().join("aos.json");
    let o = semicircle(&[
        "kitti-score", "--gt-dir", p(&basic.join("gt")), "--pred-dir", p(&basic.join("pred")), "--class", "Car", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let expected = (4.0 + 3.0 * 0.75 + 4.0 * 0.625) / 11.0;
    assert!((report["aos"].as_f64().unwrap() - expected).abs() < 1e-9);
    assert_eq!(report["true_positives"], 3);
    assert!((report["mean_orientation_similarity"].as_f64().unwrap() - 2.5 / 3.0).abs() < 1e-9);
    assert!(stdout(&o).contains("aos 0.795455"));
}

#[test]
fn kitti_score_perfect_predictions_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let gt = kitti_fixture("basic").join("gt");
    let pred = dir.path().join("pred");
    fs::create_dir(&pred).unwrap();
    for entry in fs::read_dir(&gt).unwrap() {
        let path = entry.unwrap().path();
        let text: String = fs::read_to_string(&path).unwrap().lines().map(|l| format!("{l} 0.5\n")).collect();
        fs::write(pred.join(path.file_name().unwrap()), text).unwrap();
    }
    let out = dir.path().join("aos.json");
    let o = semicircle(&["kitti-score", "--gt-dir", p(&gt), "--pred-dir", p(&pred), "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("aos 1.000000"));

    let o = semicircle(&["kitti-score", "--gt-dir", p(&gt), "--pred-dir", p(&pred), "--difficulty", "extreme", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("easy, moderate, hard"));

    let o = semicircle(&["kitti-score", "--gt-dir", p(&gt), "--pred-dir", p(&pred), "--class", "Cyclist", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no `Cyclist` ground truth"));
}

#[test]
fn help_documents_every_flag() {
    let cases: [(&str, &[&str]); 5] = [
        ("gen", &["--count", "--kappa", "--noise", "--seed", "--side", "--out"]),
        ("train", &["--config", "--mode", "--scale", "--seed", "--dataset", "--out-dir", "--stage3-flip-augment", "--resume"]),
        ("eval", &["--model", "--data", "--out", "--format"]),
        ("kitti-score", &["--gt-dir", "--pred-dir", "--class", "--difficulty", "--iou"]),
        ("report", &["--input", "--format", "--out"]),
    ];
    for (sub, flags) in cases {
        let o = semicircle(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{sub} help lacks {f}");
        }
    }
}
