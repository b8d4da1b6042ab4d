use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uap::oracle::formats::{write_idx_images, write_idx_labels, IdxImages};

fn uap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uap")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Vec<serde_json::Value> {
    let out = uap(args);
    assert!(
        out.status.success(),
        "uap {args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// 8x8 images: class 0 bright on the left half, class 1 on the right.
fn write_archive(dir: &Path, name: &str, count: usize, seed: u64) -> (PathBuf, PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(count * 64);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let y: u8 = rng.gen_range(0..2);
        for _i in 0..8 {
            for j in 0..8 {
                let bright = (j < 4) == (y == 0);
                let base = if bright { 160.0 } else { 95.0 };
                // wide noise keeps images further than 2 * epsilon apart
                pixels.push((base + rng.gen_range(-95.0..95.0f64)).round() as u8);
            }
        }
        labels.push(y);
    }
    let images = IdxImages { count, rows: 8, cols: 8, pixels };
    let (ip, lp) = (dir.join(format!("{name}-images")), dir.join(format!("{name}-labels")));
    fs::write(&ip, write_idx_images(&images).unwrap()).unwrap();
    fs::write(&lp, write_idx_labels(&labels).unwrap()).unwrap();
    (ip, lp)
}

struct World {
    _dir: tempfile::TempDir,
    root: PathBuf,
    train: (PathBuf, PathBuf),
    test: (PathBuf, PathBuf),
    model: PathBuf,
}

fn world() -> World {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let train = write_archive(&root, "train", 600, 1);
    let test = write_archive(&root, "test", 200, 2);
    let model = root.join("model.nnw");
    let lines = ok(&[
        "train-oracle",
        "--dataset", train.0.to_str().unwrap(),
        "--labels", train.1.to_str().unwrap(),
        "--holdout", test.0.to_str().unwrap(),
        "--holdout-labels", test.1.to_str().unwrap(),
        "--hidden", "4",
        "--classes", "2",
        "--epochs", "5",
        "--out", model.to_str().unwrap(),
    ]);
    assert!(lines[0]["holdout_accuracy"].as_f64().unwrap() > 0.9, "{}", lines[0]);
    World { _dir: dir, root, train, test, model }
}

#[test]
fn attack_evaluate_and_audit_round_trip() {
    let w = world();
    let out = w.root.join("yoqt");
    let lines = ok(&[
        "attack",
        "--algorithm", "yoqt",
        "--dataset", w.train.0.to_str().unwrap(),
        "--labels", w.train.1.to_str().unwrap(),
        "--holdout", w.test.0.to_str().unwrap(),
        "--holdout-labels", w.test.1.to_str().unwrap(),
        "--oracle", w.model.to_str().unwrap(),
        "--epsilon", "0.15",
        "--tile-side", "4",
        "--batch", "5",
        "--directions", "4",
        "--basis", "fft",
        "--basis-size", "8",
        "--mu", "0.001",
        "--repetitions", "3",
        "--seed", "9",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(lines.len(), 4);
    for (r, line) in lines[..3].iter().enumerate() {
        assert_eq!(line["seed"], 9 + r as u64);
        assert_eq!(line["max_queries_per_image"], 2);
        assert_eq!(line["ledger_violations"], 0);
        assert_eq!(line["total_queries"], 2 * line["images_consumed"].as_u64().unwrap());
    }
    let results = fs::read_to_string(out.join("results.jsonl")).unwrap();
    assert_eq!(results.lines().count(), 4);

    // the saved file scores the same as the run that produced it
    let eval = ok(&[
        "evaluate",
        "--oracle", w.model.to_str().unwrap(),
        "--perturbation", out.join("run-1/perturbation.uapt").to_str().unwrap(),
        "--holdout", w.test.0.to_str().unwrap(),
        "--holdout-labels", w.test.1.to_str().unwrap(),
        "--epsilon", "0.15",
    ]);
    let saved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run-1/evaluation.json")).unwrap()).unwrap();
    assert_eq!(eval[0]["success_count"], saved["success_count"]);
    assert_eq!(eval[0]["eligible_count"], saved["eligible_count"]);

    let ledger = out.join("run-0/ledger.jsonl");
    let audit = ok(&["audit-ledger", "--ledger", ledger.to_str().unwrap(), "--dataset", w.train.0.to_str().unwrap()]);
    assert_eq!(audit[0]["clean"], true);
    assert_eq!(audit[0]["audit"]["max_per_image"], 2);

    // a third query on one image must be flagged
    let text = fs::read_to_string(&ledger).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let mut extra: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
    extra["query_index"] = 2.into();
    let extra = extra.to_string();
    lines.push(&extra);
    let tampered = w.root.join("tampered.jsonl");
    fs::write(&tampered, lines.join("\n")).unwrap();
    let res = uap(&["audit-ledger", "--ledger", tampered.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn yoqo_from_config_file_with_flag_override() {
    let w = world();
    let cfg = w.root.join("yoqo.cfg");
    fs::write(&cfg, "# small CMA-ES run\nalgorithm = yoqo\ntile_size = 2\npopulation = 8\nbatch = 2\nepsilon = 0.2\nrepetitions = 2\nseed = 3\n").unwrap();
    let out = w.root.join("yoqo");
    let lines = ok(&[
        "attack",
        "--config", cfg.to_str().unwrap(),
        "--dataset", w.train.0.to_str().unwrap(),
        "--labels", w.train.1.to_str().unwrap(),
        "--oracle", w.model.to_str().unwrap(),
        "--iterations", "5",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(lines.len(), 3);
    for line in &lines[..2] {
        assert_eq!(line["max_queries_per_image"], 1);
        assert_eq!(line["images_consumed"], 5 * 8 * 2);
        assert_eq!(line["total_queries"], 5 * 8 * 2);
    }
    let saved = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(saved.contains("iterations = 5"), "{saved}");
}

#[test]
fn bad_input_fails_before_any_work() {
    let w = world();
    let cfg = w.root.join("bad.cfg");
    fs::write(&cfg, "algorithm = yoqt\nbogus = 1\n").unwrap();
    let base = [
        "--dataset", w.train.0.to_str().unwrap(),
        "--labels", w.train.1.to_str().unwrap(),
        "--oracle", w.model.to_str().unwrap(),
    ];
    let out = w.root.join("never");
    let mut args = vec!["attack", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(base);
    let res = uap(&args);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("unknown key: bogus"));
    assert!(!out.exists());

    let mut args = vec!["attack", "--algorithm", "yoqt", "--basis", "wavelet", "--out", out.to_str().unwrap()];
    args.extend(base);
    assert!(!uap(&args).status.success());
}
