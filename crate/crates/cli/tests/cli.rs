use std::path::Path;
use std::process::{Command, Output};

fn aape(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aape"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).expect("utf-8")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn version_lists_formats() {
    let o = aape(&["--version"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("config schema 1"));
    assert!(out.contains("AAPT tensor format 1"));
    assert!(out.contains("AAPC checkpoint format 1"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(aape(&["--bogus"]).status.code(), Some(1));
    assert_eq!(aape(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(aape(&[]).status.code(), Some(1));
    assert_eq!(aape(&["--threads", "0", "spectrum"]).status.code(), Some(1));
    assert_eq!(
        aape(&["embed", "--input", "/nonexistent.aapt", "--out", "/tmp/x"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn spectrum_csv_is_seed_independent() {
    let a = aape(&["--seed", "1", "spectrum"]);
    let b = aape(&["--seed", "2", "spectrum"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert!(text.starts_with("omega,magnitude,gradient,window_kind\n"));
    assert!(text.contains(",two_sided_exp\n") && text.contains(",gaussian\n"));
}

#[test]
fn fit_tone_csv() {
    let o = aape(&["fit-tone", "--steps", "5"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,beta,E");
    assert_eq!(lines.len(), 1 + 6);
    assert!(lines[1].starts_with("0,14.5,"));
}

#[test]
fn check_commands_pass_and_report_json() {
    let o = aape(&["oracle-sweep", "--cases", "20"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["pass"], true);

    let o = aape(&["gradcheck", "--profile", "quick"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["pass"], true);
    assert_eq!(v["conv"]["cases"].as_array().unwrap().len(), 18);

    let o = aape(&["verify-derivations"]);
    assert_eq!(o.status.code(), Some(0));
    let table = stdout(&o);
    assert!(table.contains("PASS") && !table.contains("FAIL"));
}

#[test]
fn bench_reports_halved_counts() {
    let o = aape(&[
        "bench", "--hidden", "4", "--frames", "32", "--kernel", "15", "--reps", "1",
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["base_convolutions"], 2 * 4 * 32);
    assert_eq!(v["base_convolutions_reference"], 4 * 4 * 32);
    assert_eq!(v["threads"], 1);
}

#[test]
fn synth_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = aape(&[
            "synth-data",
            "--n",
            "3",
            "--f",
            "16",
            "--t",
            "32",
            "--seed",
            "7",
            "--out",
            s(d),
        ]);
        assert!(o.status.success());
    }
    for i in 0..3 {
        let name = format!("synth_{i:05}.aapt");
        let x = std::fs::read(a.join(&name)).unwrap();
        assert_eq!(x, std::fs::read(b.join(&name)).unwrap());
        assert_eq!(&x[..4], b"AAPT");
        assert_eq!(x.len(), 4 + 4 + 2 + 16 + 16 * 32 * 4);
    }
    let other = dir.path().join("c");
    aape(&[
        "synth-data",
        "--n",
        "1",
        "--f",
        "16",
        "--t",
        "32",
        "--seed",
        "8",
        "--out",
        s(&other),
    ]);
    assert_ne!(
        std::fs::read(a.join("synth_00000.aapt")).unwrap(),
        std::fs::read(other.join("synth_00000.aapt")).unwrap()
    );
}

#[test]
fn embed_pretrain_and_lambda_stats() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(aape(&[
        "synth-data",
        "--n",
        "1",
        "--f",
        "32",
        "--t",
        "64",
        "--out",
        s(&data)
    ])
    .status
    .success());
    let input = data.join("synth_00000.aapt");

    let tokens = dir.path().join("tokens.aapt");
    let field = dir.path().join("lambda.aapt");
    let o = aape(&[
        "embed",
        "--input",
        s(&input),
        "--out",
        s(&tokens),
        "--lambda-out",
        s(&field),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = aape_core::io::load_tensor(&tokens).unwrap();
    assert_eq!(t.shape(), &[48, 8, 16]);
    let l = aape_core::io::load_tensor(&field).unwrap();
    assert_eq!(l.shape(), &[2, 16, 64]);

    let cfg = dir.path().join("cfg.json");
    let mut rc = aape_core::config::RunConfig::toy();
    rc.train.steps = 2;
    std::fs::write(&cfg, rc.to_json()).unwrap();
    let run = dir.path().join("run");
    let o = aape(&["pretrain-toy", "--config", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let man: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(man["config_sha256"], rc.sha256());
    assert_eq!(man["steps"], 2);

    let o = aape(&[
        "lambda-stats",
        "--ckpt",
        s(&run.join("student.aapc")),
        "--input",
        s(&input),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("patch,f_patch,t_patch,alpha_min"));
    assert_eq!(text.lines().count(), 1 + 8 * 16);

    let mut bad = serde_json::to_value(&rc).unwrap();
    bad["unknown"] = serde_json::json!(1);
    std::fs::write(&cfg, bad.to_string()).unwrap();
    let o = aape(&["pretrain-toy", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(1));
}
