//! End-to-end exercise of the binary: keygen -> gen-weights -> encrypt ->
//! infer -> decrypt, on the clear backend for speed.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_enshroud")
}

fn run(args: &[&str], dir: &PathBuf) -> String {
    let out = Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "`enshroud {}` failed:\n{}\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).to_string()
}

#[test]
fn file_pipeline_round_trips() {
    let dir = std::env::temp_dir().join(format!("enshroud-cli-test-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();

    // Config: clear backend, generous depth.
    let config = run(&["config", "--profile", "desk"], &dir);
    let config = config
        .replace("\"backend\": \"ckks\"", "\"backend\": \"clear\"")
        .replace("\"max_level\": 16", "\"max_level\": 40");
    fs::write(dir.join("run.json"), &config).unwrap();

    run(
        &["keygen", "--config", "run.json", "--out-dir", "keys"],
        &dir,
    );
    run(
        &["gen-weights", "--config", "run.json", "--out", "layer.ensw"],
        &dir,
    );

    // 8x16 input matching the desk model dims.
    let mut csv = String::new();
    for i in 0..8 {
        let row: Vec<String> = (0..16)
            .map(|j| format!("{:.3}", ((i * 16 + j) as f64 * 0.37).sin() * 0.8))
            .collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    fs::write(dir.join("x.csv"), &csv).unwrap();

    run(
        &[
            "encrypt",
            "--config",
            "run.json",
            "--keys",
            "keys/secret.ensk",
            "--input",
            "x.csv",
            "--out",
            "x.ensm",
        ],
        &dir,
    );
    let report = run(
        &[
            "infer",
            "--config",
            "run.json",
            "--keys",
            "keys/eval.ensk",
            "--weights",
            "layer.ensw",
            "--input",
            "x.ensm",
            "--out",
            "y.ensm",
            "--kernel",
            "layer",
            "--report",
            "records",
        ],
        &dir,
    );
    assert!(report.contains("\"label\":\"transformer_layer\""));
    run(
        &[
            "decrypt",
            "--config",
            "run.json",
            "--keys",
            "keys/secret.ensk",
            "--input",
            "y.ensm",
            "--out",
            "y.csv",
        ],
        &dir,
    );

    let y = fs::read_to_string(dir.join("y.csv")).unwrap();
    assert_eq!(y.lines().count(), 8);
    assert!(y.lines().all(|l| l.split(',').count() == 16));

    // Round trip sanity: encrypt -> decrypt reproduces the input.
    run(
        &[
            "decrypt",
            "--config",
            "run.json",
            "--keys",
            "keys/secret.ensk",
            "--input",
            "x.ensm",
            "--out",
            "x_back.csv",
        ],
        &dir,
    );
    let back = fs::read_to_string(dir.join("x_back.csv")).unwrap();
    for (a, b) in csv.lines().zip(back.lines()) {
        for (va, vb) in a.split(',').zip(b.split(',')) {
            let (va, vb): (f64, f64) = (va.parse().unwrap(), vb.parse().unwrap());
            assert!((va - vb).abs() < 1e-9);
        }
    }

    fs::remove_dir_all(&dir).ok();
}

#[test]
fn decrypt_refuses_evaluation_keys() {
    let dir = std::env::temp_dir().join(format!("enshroud-cli-neg-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    let config = run(&["config", "--profile", "desk"], &dir);
    fs::write(dir.join("run.json"), config).unwrap();
    run(
        &["keygen", "--config", "run.json", "--out-dir", "keys"],
        &dir,
    );
    fs::write(dir.join("junk.ensm"), b"ENSMxxxx").unwrap();
    let out = Command::new(bin())
        .args([
            "decrypt",
            "--config",
            "run.json",
            "--keys",
            "keys/eval.ensk",
            "--input",
            "junk.ensm",
            "--out",
            "out.csv",
        ])
        .current_dir(&dir)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no secret key"));
    fs::remove_dir_all(&dir).ok();
}
