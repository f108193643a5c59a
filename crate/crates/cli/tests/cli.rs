//! End-to-end runs of the `gvae` binary on a small synthetic IDX dataset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gvae_core::data::{serialize_idx_images, serialize_idx_labels};
use gvae_core::ndcore::{SeededRng, Tensor2};

const PER_LABEL: usize = 24;

/// Three labels, each a bright horizontal band at a different height.
fn write_fixture(dir: &Path) {
    for (prefix, seed) in [("train", 1), ("t10k", 2)] {
        let mut rng = SeededRng::new(seed);
        let labels: Vec<usize> = (0..3 * PER_LABEL).map(|j| j % 3).collect();
        let images = Tensor2::from_fn(784, labels.len(), |p, c| {
            let row = p / 28;
            let band = 4 + 8 * labels[c];
            let base = if row >= band && row < band + 6 { 0.9 } else { 0.05 };
            (base + rng.uniform(-0.05, 0.05)).clamp(0.0, 1.0)
        });
        fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), serialize_idx_images(&images, 28, 28).unwrap())
            .unwrap();
        fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), serialize_idx_labels(&labels)).unwrap();
    }
}

fn gvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gvae")).args(args).output().expect("binary runs")
}

fn train_args<'a>(data: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--data-dir", data, "--labels", "0,1,2", "--epochs", "2", "--hidden", "16", "--replay", "20",
        "--batch-size", "16", "--out", out,
    ]
}

#[test]
fn train_sample_common_eval_round() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir(&data).unwrap();
    write_fixture(&data);
    let (data_s, run) = (data.to_str().unwrap(), tmp.path().join("run"));
    let run_s = run.to_str().unwrap();

    let out = gvae(&train_args(data_s, run_s));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("category")).count(), 6);
    for k in 1..=3 {
        assert!(run.join(format!("cat-{k:02}.gvae")).is_file());
    }
    assert!(!run.join("cat-04.gvae").exists());
    assert_eq!(fs::read_to_string(run.join("history.tsv")).unwrap().lines().count(), 1 + 6);

    // same seed, same bytes
    let again = tmp.path().join("again");
    assert!(gvae(&train_args(data_s, again.to_str().unwrap())).status.success());
    assert_eq!(fs::read(run.join("final.gvae")).unwrap(), fs::read(again.join("final.gvae")).unwrap());

    let final_ckpt = run.join("final.gvae");
    let ckpt = final_ckpt.to_str().unwrap();
    let grid = tmp.path().join("s.pgm");
    let out = gvae(&["sample", "--checkpoint", ckpt, "--label", "2", "--n", "10", "--out", grid.to_str().unwrap()]);
    assert!(out.status.success());
    let bytes = fs::read(&grid).unwrap();
    assert!(bytes.starts_with(b"P5\n112 84\n255\n"));

    let out = gvae(&["sample", "--checkpoint", ckpt, "--label", "3", "--out", grid.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    let common = tmp.path().join("common");
    let c1 = run.join("cat-01.gvae");
    let out = gvae(&[
        "common", "--checkpoint", c1.to_str().unwrap(), "--checkpoint", ckpt, "--n", "4", "--out",
        common.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(common.join("common-01.pgm").is_file() && common.join("common-03.pgm").is_file());

    let records = tmp.path().join("metrics.tsv");
    let out = gvae(&[
        "eval", "--checkpoint", ckpt, "--data-dir", data_s, "--n-per-label", "20", "--classifier-epochs", "3",
        "--out", records.to_str().unwrap(), "--run-id", "fixture",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Acc ") && stdout.contains("r-Acc ") && stdout.contains('%'));
    let text = fs::read_to_string(&records).unwrap();
    let metrics: Vec<&str> = text.lines().map(|l| l.split('\t').nth(1).unwrap()).collect();
    assert_eq!(metrics, ["classifier_acc", "acc", "r_acc"]);
}

#[test]
fn ablate_and_joint_train() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(tmp.path());
    let data = tmp.path().to_str().unwrap();
    let out_dir = tmp.path().join("abl");
    let common = ["--data-dir", data, "--labels", "0,1,2", "--epochs", "1", "--hidden", "8", "--replay", "10"];
    let mut args = vec!["ablate"];
    args.extend(common);
    args.extend(["--extents", "none,0,1", "--n-per-label", "10", "--classifier-epochs", "2"]);
    args.extend(["--out", out_dir.to_str().unwrap()]);
    let out = gvae(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let curve = fs::read_to_string(out_dir.join("ablation.tsv")).unwrap();
    let xs: Vec<&str> = curve.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(xs, ["none", "0", "1"]);

    let mut args = vec!["joint-train"];
    args.extend(common);
    args.extend(["--out", out_dir.to_str().unwrap()]);
    assert!(gvae(&args).status.success());
    let ckpt = gvae::Checkpoint::load(&out_dir.join("joint.gvae")).unwrap();
    assert_eq!(ckpt.n_categories(), 3);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.gvae");
    let out = gvae(&["sample", "--checkpoint", missing.to_str().unwrap(), "--label", "0", "--out", "x.pgm"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.gvae"));

    assert_eq!(gvae(&["train", "--epochs", "many"]).status.code(), Some(1));
    assert_eq!(gvae(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(gvae(&["--help"]).status.code(), Some(0));

    let conf = tmp.path().join("bad.conf");
    fs::write(&conf, "epochs: 5\n").unwrap();
    assert_eq!(gvae(&["train", "--config", conf.to_str().unwrap()]).status.code(), Some(1));

    // no data files
    let empty = tmp.path().to_str().unwrap();
    assert_eq!(gvae(&["train", "--data-dir", empty, "--out", empty]).status.code(), Some(2));

    // a learning rate this large overflows the weights on the first steps
    write_fixture(tmp.path());
    let run = tmp.path().join("run");
    let out = gvae(&[
        "train", "--data-dir", empty, "--labels", "0", "--epochs", "3", "--hidden", "8", "--lr", "1e300", "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
