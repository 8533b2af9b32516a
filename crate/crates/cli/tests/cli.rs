use std::path::Path;
use std::process::{Command, Output};

use iaflow::csv::parse_samples_csv;

fn iaflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iaflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn out_arg(dir: &Path) -> &str {
    dir.to_str().unwrap()
}

#[test]
fn check_passes_with_at_least_six_suites() {
    let o = iaflow(&["check"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8(o.stdout).unwrap();
    let passes = text.lines().filter(|l| l.starts_with("PASS")).count();
    assert!(passes >= 6, "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn config_errors_exit_with_two() {
    let o = iaflow(&["train", "--lambda", "-1"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("lambda") && err.contains(">= 0"), "{err}");

    let o = iaflow(&["train", "--learning_rate", "1"]);
    assert_eq!(o.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    std::fs::write(&file, "# comment\niaf_steps = 2\niaf_mode = sideways\n").unwrap();
    let o = iaflow(&["train", "--config", file.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("iaf_mode") && err.contains("line 3"), "{err}");
}

#[test]
fn missing_checkpoint_is_a_run_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = iaflow(&["eval", "--out", out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ckpt.txt"));
}

#[test]
fn train_then_eval_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let cfg = dir.path().join("digits.cfg");
    std::fs::write(
        &cfg,
        "n_train = 200\nn_test = 20\nepochs = 2\nlatent_dim = 4\niaf_steps = 1\n",
    )
    .unwrap();
    let common = ["--config", cfg.to_str().unwrap()];

    let o = iaflow(&[&["train"][..], &common, &["--out", out]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "metrics.csv",
        "eval.csv",
        "ckpt.txt",
        "posterior_samples.csv",
        "samples.pgm",
        "samples.csv",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let rows = parse_samples_csv(
        &std::fs::read_to_string(dir.path().join("posterior_samples.csv")).unwrap(),
    )
    .unwrap();
    assert_eq!(rows[0].z.len(), 4);

    // one importance sample: log p̂ is the single-sample bound
    let o = iaflow(
        &[
            &["eval"][..],
            &common,
            &["--out", out, "--iwae_samples", "1"],
        ]
        .concat(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let cells: Vec<&str> = eval.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(cells[1], cells[3], "{eval}");
    assert_eq!(cells[5], "1");

    std::fs::remove_file(dir.path().join("samples.pgm")).unwrap();
    let o = iaflow(&[&["sample"][..], &common, &["--out", out]].concat());
    assert!(o.status.success());
    let pgm = std::fs::read_to_string(dir.path().join("samples.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n73 73\n255\n"));
}

#[test]
fn toy_runs_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = iaflow(&[
            "toy",
            "--seed",
            "7",
            "--epochs",
            "50",
            "--iwae_samples",
            "20",
            "--out",
            out_arg(d.path()),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "toy_summary.csv",
        "diagonal/posterior_samples.csv",
        "iaf/posterior_samples.csv",
        "iaf/metrics.csv",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let summary = std::fs::read_to_string(a.path().join("toy_summary.csv")).unwrap();
    assert!(summary.starts_with("posterior,final_elbo"));
    assert_eq!(summary.lines().count(), 3);
}
