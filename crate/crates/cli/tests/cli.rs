use std::path::Path;
use std::process::{Command, Output};

fn seglm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seglm"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_corpus(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    let words = ["the", "dog", "a", "cat", "sees", "you"];
    let mut k = 7usize;
    for (name, n) in [("train.txt", 20), ("valid.txt", 4), ("test.txt", 4)] {
        let mut text = String::new();
        for _ in 0..n {
            let len = 2 + k % 3;
            let line: Vec<&str> = (0..len)
                .map(|_| {
                    k = k.wrapping_mul(2654435761).wrapping_add(12345) % 1_000_003;
                    words[k % words.len()]
                })
                .collect();
            text.push_str(&line.join(" "));
            text.push('\n');
        }
        std::fs::write(dir.join(name), text).unwrap();
    }
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let out = seglm(&["--dataset", "br-text", "--print-config"], dir);
    assert_eq!(code(&out), 0);
    let text = stdout(&out)
        .replace("embed_dim = 512", "embed_dim = 6")
        .replace("hidden = 512", "hidden = 6")
        .replace("min_freq = 10", "min_freq = 3")
        .replace("max_epochs = 100", "max_epochs = 2");
    let path = dir.join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert_eq!(code(&seglm(&[], p)), 1);
    assert_eq!(code(&seglm(&["frobnicate"], p)), 1);
    assert_eq!(code(&seglm(&["--dataset", "wsj", "train"], p)), 1);
    assert_eq!(code(&seglm(&["train"], p)), 1, "no corpus given");
    assert_eq!(code(&seglm(&["--corpus", "missing", "train"], p)), 2);
    assert_eq!(code(&seglm(&["--checkpoint", "missing.ckpt", "inspect"], p)), 2);
    assert_eq!(code(&seglm(&["--help"], p)), 0);
}

#[test]
fn presets_print_their_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stdout(&seglm(&["--dataset", "ctb", "--seed", "3", "--print-config"], tmp.path()));
    assert!(out.contains("max_len = 5"));
    assert!(out.contains("min_freq = 25"));
    assert!(out.contains("seed = 3"));
}

#[test]
fn segmentation_file_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    std::fs::write(data.join("train.txt"), "do you see a boy\n").unwrap();
    std::fs::write(data.join("valid.txt"), "").unwrap();
    std::fs::write(data.join("test.txt"), "").unwrap();
    std::fs::write(tmp.path().join("pred.txt"), "doyou see a boy\n").unwrap();
    let out = seglm(&["--corpus", "data", "eval", "--segmentation", "pred.txt"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(r["precision"], 75.0);
    assert_eq!(r["recall"], 60.0);
    assert_eq!(format!("{:.1}", r["f1"].as_f64().unwrap()), "66.7");
    assert_eq!(r["split_policy"], "union");

    std::fs::write(tmp.path().join("bad.txt"), "do you see a toy\n").unwrap();
    assert_eq!(code(&seglm(&["--corpus", "data", "eval", "--segmentation", "bad.txt"], tmp.path())), 2);
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    write_corpus(&p.join("data"));
    let cfg = small_config(p);
    let cfg = cfg.to_str().unwrap();
    for run in ["a", "b"] {
        let ck = format!("{run}/ck");
        let o = seglm(&["--config", cfg, "--corpus", "data", "--checkpoint", &ck, "train"], p);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let seg = format!("{run}/seg.txt");
        let o = seglm(&["--config", cfg, "--corpus", "data", "--checkpoint", &ck, "segment", "--output", &seg], p);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let m = format!("{run}/metrics.jsonl");
        let o = seglm(&["--config", cfg, "--corpus", "data", "--checkpoint", &ck, "eval", "--output", &m], p);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["seg.txt", "seg.txt.meta.json", "metrics.jsonl"] {
        let a = std::fs::read(p.join("a").join(f)).unwrap();
        let b = std::fs::read(p.join("b").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f} differs");
    }
    let metrics = std::fs::read_to_string(p.join("a/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.contains("\"config_hash\""));

    let info = stdout(&seglm(&["--checkpoint", "a/ck", "inspect"], p));
    let v: serde_json::Value = serde_json::from_str(&info).unwrap();
    assert_eq!(v["kind"], "snlm");
    assert_eq!(v["epoch"], 2);

    let lex = stdout(&seglm(&["--checkpoint", "a/ck", "lexicon"], p));
    assert!(lex.lines().all(|l| l.split('\t').count() == 2));

    // another seed changes the hash, so the directory refuses to resume
    let o = seglm(&["--config", cfg, "--corpus", "data", "--seed", "9", "--checkpoint", "a/ck", "train"], p);
    assert_eq!(code(&o), 2);
}

#[test]
fn bayesian_baseline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    write_corpus(&p.join("data"));
    let cfg = small_config(p);
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("iterations = 1000", "iterations = 6")
        .replace("alpha0 = [1.0, 10.0, 100.0, 1000.0]", "alpha0 = [1.0, 100.0]")
        .replace("p_end = [0.1, 0.3, 0.5]", "p_end = [0.3]");
    std::fs::write(&cfg, text).unwrap();
    let o = seglm(&["--config", cfg.to_str().unwrap(), "--corpus", "data", "baseline", "dp", "--output", "out"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["dp.seg", "dp.seg.meta.json", "dp_grid.jsonl", "dp_metrics.jsonl"] {
        assert!(p.join("out").join(f).exists(), "{f}");
    }
    let grid = std::fs::read_to_string(p.join("out/dp_grid.jsonl")).unwrap();
    assert_eq!(grid.lines().count(), 6);
    assert_eq!(code(&seglm(&["--corpus", "data", "baseline", "surprisal"], p)), 1);
}
