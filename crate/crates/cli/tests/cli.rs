use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ctsrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctsrec"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn probe_time_with_explicit_frequency() {
    let dir = tempfile::tempdir().unwrap();
    let pi = std::f64::consts::PI.to_string();
    let out = ok(&ctsrec(dir.path(), &["--run-id", "probe", "probe-time", "--omega", &pi, "--pairs", "1:0,0.5:0.5,2:0"]));
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    let psi: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!((psi[0] + 1.0).abs() < 1e-12, "{out}");
    assert!((psi[1] - 1.0).abs() < 1e-12);
    assert!((psi[2] - 1.0).abs() < 1e-12);
    let written = fs::read_to_string(dir.path().join("runs/probe/kernel.tsv")).unwrap();
    assert_eq!(written, out);
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctsrec(dir.path(), &["eval"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));

    fs::write(dir.path().join("bad.toml"), "[model]\ndim = 6\nheads = 4\n").unwrap();
    let out = ctsrec(dir.path(), &["--config", "bad.toml", "train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("heads"));

    let out = ctsrec(dir.path(), &["--config", "missing.toml", "train"]);
    assert!(!out.status.success());

    fs::write(dir.path().join("broken.tsv"), "a\tb\t1\nc\td\txyz\n").unwrap();
    let out = ctsrec(dir.path(), &["ingest", "--input", "broken.tsv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = ctsrec(dir.path(), &["--mode", "sideways", "eval"]);
    assert!(!out.status.success());
}

const CONFIG: &str = r#"
[data]
path = "data.tsv"

[model]
dim = 8
time_dim = 4
neighbors = 4

[train]
epochs = 2
batch_size = 128
learning_rate = 0.01
keep_best = true

[paths]
output_dir = "runs"
"#;

#[test]
fn end_to_end_and_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&ctsrec(d, &["synth", "--output", "data.tsv", "--seed", "3"]));
    fs::write(d.join("run.toml"), CONFIG).unwrap();
    let cfg = ["--config", "run.toml", "--run-id", "r"];
    let with = |extra: &[&str]| -> Vec<String> { cfg.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str]| {
        let args = with(extra);
        ok(&ctsrec(d, &args.iter().map(String::as_str).collect::<Vec<_>>()))
    };

    let summary = run(&["ingest"]);
    assert!(summary.contains("users\t200"), "{summary}");
    assert!(summary.contains("items\t100"));

    run(&["train"]);
    let run_dir = d.join("runs/r");
    let ckpt = fs::read(run_dir.join("model.ckpt")).unwrap();
    let log = fs::read_to_string(run_dir.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    run(&["eval", "--top", "3"]);
    let metrics = fs::read_to_string(run_dir.join("metrics_full.tsv")).unwrap();
    assert!(metrics.starts_with("recall@10\trecall@20\tndcg@10\tndcg@20\tmrr\tn"));
    let ranks = fs::read_to_string(run_dir.join("ranks_full.tsv")).unwrap();
    assert!(ranks.lines().count() > 3);

    run(&["--mode", "sampled:20", "eval"]);
    let sampled = fs::read_to_string(run_dir.join("metrics_sampled-20.tsv")).unwrap();
    let rec = |text: &str| -> f64 { text.lines().nth(1).unwrap().split('\t').next().unwrap().parse().unwrap() };
    assert!(rec(&sampled) >= rec(&metrics));

    let att = run(&["export-attention", "--user", "u5", "--offsets", "+5d,+30d"]);
    let weights = |label: &str| -> Vec<String> {
        att.lines()
            .filter(|l| l.starts_with(label))
            .map(|l| l.splitn(2, '\t').nth(1).unwrap().to_string())
            .collect()
    };
    let (a, b) = (weights("+5d"), weights("+30d"));
    assert!(!a.is_empty() && !b.is_empty());
    assert_ne!(a, b);
    for label in ["+5d", "+30d"] {
        let total: f64 = att
            .lines()
            .filter(|l| l.starts_with(label))
            .map(|l| l.rsplit('\t').next().unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-4, "{label}: {total}");
    }

    let kernel = run(&["probe-time", "--pairs", "0:0,0.25:0"]);
    assert!(kernel.lines().nth(1).unwrap().ends_with("1.000000000000"));

    // same inputs and seeds reproduce every artifact byte for byte
    run(&["train"]);
    assert_eq!(fs::read(run_dir.join("model.ckpt")).unwrap(), ckpt);
    let strip = |s: &str| -> Vec<String> { s.lines().map(|l| l.rsplitn(2, '\t').nth(1).unwrap_or(l).to_string()).collect() };
    assert_eq!(strip(&fs::read_to_string(run_dir.join("train_log.tsv")).unwrap()), strip(&log));
    run(&["eval"]);
    assert_eq!(fs::read_to_string(run_dir.join("metrics_full.tsv")).unwrap(), metrics);
    assert_eq!(run(&["export-attention", "--user", "u5", "--offsets", "+5d,+30d"]), att);

    // a different seed gives a different model under its own hashed run id
    let out = ok(&ctsrec(d, &["--config", "run.toml", "--seed-init", "9", "train"]));
    let other: Vec<_> = fs::read_dir(d.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "r")
        .collect();
    assert_eq!(other.len(), 1, "{out}");
    assert_eq!(other[0].len(), 12);
    assert_ne!(fs::read(d.join("runs").join(&other[0]).join("model.ckpt")).unwrap(), ckpt);
}

#[test]
fn sweep_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&ctsrec(d, &["synth", "--output", "data.tsv"]));
    let config = CONFIG.replace("epochs = 2", "epochs = 1") + "\n[sweep]\ndim = [4, 8]\nlayers = [0, 1]\n";
    fs::write(d.join("sweep.toml"), config).unwrap();
    let out = ok(&ctsrec(d, &["--config", "sweep.toml", "--run-id", "sw", "sweep"]));
    assert_eq!(out.lines().count(), 5, "{out}");
    assert!(d.join("runs/sw/sweep_full.tsv").exists());
}
