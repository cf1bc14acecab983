use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use xmq_core::io::save_matrix;
use xmq_core::DenseMatrix;

fn xmq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmq"))
        .current_dir(dir)
        .args(args)
        .args(["--threads", "1", "--log-level", "warn"])
        .output()
        .expect("xmq runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = xmq(dir, args);
    assert!(
        out.status.success(),
        "xmq {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn train_args<'a>(bits: &'a str, pca_dim: &'a str, num_bases: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--features-a", "data/features_a.xmqm", "--features-b", "data/features_b.xmqm", "--out", "model",
        "--k", "16", "--bits", bits, "--pca-dim", pca_dim, "--num-bases", num_bases, "--outer-rounds", "2",
    ]
}

/// synth → train → encode → search → eval in `dir`.
fn pipeline(dir: &Path) {
    ok(
        dir,
        &[
            "synth", "--out-dir", "data", "--num-pairs", "200", "--num-queries", "30", "--dim-a", "24", "--dim-b",
            "16", "--latent-dim", "6", "--clusters", "4",
        ],
    );
    ok(dir, &train_args("8", "12", "24"));
    ok(
        dir,
        &["encode", "--model", "model", "--features", "data/features_b.xmqm", "--modality", "b", "--out", "codes_b.xmqm"],
    );
    ok(
        dir,
        &[
            "search", "--model", "model", "--codes", "codes_b.xmqm", "--queries", "data/queries_a.xmqm",
            "--query-modality", "a", "--top-t", "50", "--out", "results.csv",
        ],
    );
    ok(
        dir,
        &[
            "eval", "--results", "results.csv", "--query-labels", "data/query_labels.txt", "--database-labels",
            "data/labels.txt", "--out-prefix", "metrics",
        ],
    );
}

#[test]
fn pipeline_writes_outputs_and_run_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);
    for f in [
        "data.run.json",
        "model/manifest.json",
        "model/trace.csv",
        "model.run.json",
        "codes_b.xmqm",
        "codes_b.xmqm.run.json",
        "results.csv.run.json",
        "metrics.json",
        "metrics.csv",
        "metrics.json.run.json",
    ] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let results = fs::read_to_string(dir.join("results.csv")).unwrap();
    assert!(results.starts_with("queryId,rank,itemId,score\n"));
    assert_eq!(results.lines().count(), 1 + 30 * 50);

    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("metrics.json")).unwrap()).unwrap();
    let map50 = metrics["mapAtT"]["50"].as_f64().unwrap();
    assert!(map50 > 0.5, "MAP@50 {map50}");

    let run: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("model.run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "train");
    assert_eq!(run["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(run["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(run["summary"]["resolvedConfig"]["M"], 2);
}

#[test]
fn identical_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in [
        "data/features_a.xmqm",
        "data/labels.txt",
        "model/manifest.json",
        "model/mapping/basis.xmqm",
        "model/mapping/sparse_codes.xmqm",
        "model/quant_a/dict_0.xmqm",
        "model/quant_b/quantizer.json",
        "model/codes_a.xmqm",
        "model/codes_b.xmqm",
        "model/trace.csv",
        "codes_b.xmqm",
        "results.csv",
        "metrics.json",
    ] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

fn small_model(dir: &Path, bits: &str) {
    ok(
        dir,
        &[
            "synth", "--out-dir", "data", "--num-pairs", "60", "--num-queries", "5", "--dim-a", "12", "--dim-b", "8",
            "--latent-dim", "4", "--clusters", "3",
        ],
    );
    ok(dir, &train_args(bits, "8", "12"));
}

#[test]
fn top_t_beyond_database_is_clamped_with_a_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_model(dir, "8");
    let out = ok(
        dir,
        &[
            "search", "--model", "model", "--queries", "data/queries_b.xmqm", "--query-modality", "b", "--top-t",
            "1000", "--out", "r.csv",
        ],
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceeds the database size"));
    let text = fs::read_to_string(dir.join("r.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 5 * 60);
}

#[test]
fn single_dictionary_exhaustive_and_table_rankings_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // 4 bits with K=16 gives one dictionary, so there is no cross term
    small_model(dir, "4");
    let mut rankings = Vec::new();
    for (name, flag) in [("table.csv", None), ("full.csv", Some("--exhaustive"))] {
        let mut args = vec![
            "search", "--model", "model", "--queries", "data/queries_a.xmqm", "--query-modality", "a", "--top-t", "60",
            "--out", name,
        ];
        args.extend(flag);
        ok(dir, &args);
        let ids: Vec<(String, String)> = fs::read_to_string(dir.join(name))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0].to_string(), f[2].to_string())
            })
            .collect();
        rankings.push(ids);
    }
    assert_eq!(rankings[0], rankings[1]);
}

#[test]
fn bad_inputs_fail_with_messages() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_model(dir, "8");

    save_matrix(&DenseMatrix::zeros(12, 0), dir.join("empty.xmqm")).unwrap();
    let out = xmq(dir, &["encode", "--model", "model", "--features", "empty.xmqm", "--modality", "a", "--out", "c.xmqm"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no items"));

    // modality B features fed as modality A
    let out = xmq(
        dir,
        &["encode", "--model", "model", "--features", "data/features_b.xmqm", "--modality", "a", "--out", "c.xmqm"],
    );
    assert!(!out.status.success());

    fs::write(dir.join("bad.csv"), "query,rank\n0,1\n").unwrap();
    let out = xmq(
        dir,
        &[
            "eval", "--results", "bad.csv", "--query-labels", "data/query_labels.txt", "--database-labels",
            "data/labels.txt", "--out-prefix", "m",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("header"));

    let out = xmq(dir, &["train", "--features-a", "data/features_a.xmqm", "--features-b", "data/features_b.xmqm", "--out", "m2", "--k", "10"]);
    assert!(!out.status.success(), "K=10 is not a power of two");
}
