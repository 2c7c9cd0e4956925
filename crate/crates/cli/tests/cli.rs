use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_overdilute")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_dataset(dir: &Path, nodes: usize, edges: &[(usize, usize)], attrs: &[(usize, usize)]) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("meta.txt"), format!("name=toy\nnum_nodes={nodes}\nnum_attributes=2\n")).unwrap();
    let tsv = |pairs: &[(usize, usize)]| pairs.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect::<String>();
    fs::write(dir.join("edges.tsv"), tsv(edges)).unwrap();
    fs::write(dir.join("attrs.tsv"), tsv(attrs)).unwrap();
}

/// `(node, hop) -> delta` rows of dilution_inter.csv.
fn inter_rows(dir: &Path) -> Vec<(usize, usize, f64)> {
    fs::read_to_string(dir.join("dilution_inter.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn analyze_two_nodes_and_an_isolated_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("k2");
    write_dataset(&data, 3, &[(0, 1)], &[(0, 0), (1, 1), (2, 0), (2, 1)]);
    let out = tmp.path().join("an");
    ok(&["analyze", "--data", p(&data), "--hops", "3", "--out", p(&out)]);
    for (v, hop, delta) in inter_rows(&out) {
        let want = if hop == 0 || v == 2 { 1.0 } else { 0.5 };
        assert!((delta - want).abs() < 1e-12, "node {v} hop {hop}: {delta}");
    }
    for f in ["dilution_intra.csv", "decomposition.csv", "receptive_fields.csv", "histograms.csv", "manifest.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let intra = fs::read_to_string(out.join("dilution_intra.csv")).unwrap();
    assert!(intra.lines().any(|l| l == "2,0,0.5,0"));
}

#[test]
fn bad_input_exits_non_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let missing = run(&["analyze", "--data", "/nonexistent/dataset", "--out", p(&out)]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    let data = tmp.path().join("k2");
    write_dataset(&data, 2, &[(0, 1)], &[(0, 0), (1, 1)]);
    assert!(!run(&["analyze", "--data", p(&data), "--hops", "0", "--out", p(&out)]).status.success());

    write_dataset(&data, 2, &[(0, 5)], &[(0, 0)]);
    assert!(!run(&["analyze", "--data", p(&data), "--out", p(&out)]).status.success());
}

#[test]
fn thread_variable_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_overdilute"))
        .args(["gen-base", "--seed", "0", "--out", p(&tmp.path().join("b"))])
        .env("OVERDILUTE_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn train_eval_and_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("base");
    ok(&["gen-base", "--seed", "3", "--out", p(&base)]);

    let train = tmp.path().join("train");
    let args = [
        "train", "--data", p(&base), "--model", "gcn", "--hidden", "8", "--epochs", "3", "--seeds", "1", "--subsets",
        "--out", p(&train),
    ];
    ok(&args);
    let runs = fs::read_to_string(train.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 2);
    assert!(runs.starts_with("seed,best_epoch,"));
    assert!(fs::read_to_string(train.join("summary.csv")).unwrap().contains("\ntest,"));

    let eval = tmp.path().join("eval");
    ok(&[
        "eval", "--data", p(&base), "--checkpoint", p(&train.join("seed_1/model.ckpt")), "--out", p(&eval),
    ]);
    let eval_csv = fs::read_to_string(eval.join("eval.csv")).unwrap();
    let test_hits = |csv: &str, col: usize| -> f64 {
        let line = csv.lines().find(|l| l.starts_with("test,") || l.starts_with("1,")).unwrap();
        line.split(',').nth(col).unwrap().parse().unwrap()
    };
    assert_eq!(test_hits(&eval_csv, 1), test_hits(&runs, 5));

    let again = tmp.path().join("again");
    ok(&["rerun", p(&train.join("manifest.txt")), "--out", p(&again)]);
    for f in ["runs.csv", "summary.csv", "seed_1/run_metrics.csv", "seed_1/model.ckpt", "manifest.txt"] {
        assert_eq!(fs::read(train.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn synthetic_node_classification() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("base");
    ok(&["gen-base", "--seed", "0", "--out", p(&base)]);
    let synth = tmp.path().join("synth");
    ok(&["synth", "--base", p(&base), "--seed", "2", "--total-attributes", "100", "--out", p(&synth)]);
    assert!(synth.join("split.tsv").exists());
    let train = tmp.path().join("nc");
    ok(&[
        "train", "--data", p(&synth), "--task", "nodeclass", "--model", "natr-gcn", "--hidden", "8", "--heads", "2",
        "--d-ffn", "16", "--enc-layers", "1", "--epochs", "2", "--out", p(&train),
    ]);
    let out = tmp.path().join("an");
    ok(&[
        "analyze", "--data", p(&synth), "--hops", "2", "--model", p(&train.join("seed_0/model.ckpt")),
        "--oracle-nodes", "4", "--out", p(&out),
    ]);
    let model_csv = fs::read_to_string(out.join("dilution_model.csv")).unwrap();
    assert_eq!(model_csv.lines().count(), 5);
}
