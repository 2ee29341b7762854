use std::path::Path;
use std::process::{Command, Output};

fn crowdtsc(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_crowdtsc"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap();
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = crowdtsc(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn staged_run_from_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["make-synthetic", "--out", "data", "--train-docs", "300", "--test-docs", "100", "--seed", "3"]);

    // nothing before ingest
    assert!(!crowdtsc(dir, &["sample"]).status.success());

    let ingest = ok(
        dir,
        &[
            "ingest", "--train", "data/train.csv", "--test", "data/test.csv", "--classes", "2", "--embeddings",
            "data/vectors.txt", "--dim", "16", "--min-freq", "1",
        ],
    );
    assert!(ingest.contains("ingest: ran"), "{ingest}");
    let expand = crowdtsc(dir, &["expand"]);
    assert!(!expand.status.success());
    assert!(String::from_utf8_lossy(&expand.stderr).contains("requires"));

    ok(dir, &["sample"]);
    ok(dir, &["simulate-annotations", "--oracle", "label"]);
    ok(dir, &["cluster", "--method", "dbscan", "--eps", "1.0"]);
    ok(dir, &["expand"]);
    let train = ok(dir, &["train", "--model", "hdnn_c", "--epochs", "2", "--hidden", "8", "--channels", "8", "--lr", "0.01"]);
    assert!(train.contains("best epoch"), "{train}");
    let eval = ok(dir, &["eval"]);
    assert!(eval.to_lowercase().contains("accuracy"), "{eval}");

    let status = ok(dir, &["status"]);
    assert_eq!(status.matches("up to date").count(), 7, "{status}");
    let rerun = ok(dir, &["run"]);
    assert_eq!(rerun.matches("skipped (up to date)").count(), 7, "{rerun}");

    let predicted = ok(dir, &["predict", "--text", "w1 k0x2 w3", "--text", "w4 k1x5 w6"]);
    assert_eq!(predicted.lines().count(), 3, "{predicted}");

    let ablation = ok(dir, &["ablate", "--variants", "full,N", "--seeds", "1"]);
    assert!(ablation.contains("full") && ablation.contains("N"), "{ablation}");
    assert!(dir.join("artifacts/ablation.csv").exists());

    assert!(!crowdtsc(dir, &["train", "--variant", "bogus"]).status.success());
}
