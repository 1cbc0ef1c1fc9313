use super::*;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("cloudfit").chain(args.iter().copied());
    let code = run_cli_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

#[test]
fn summarize_and_usage_errors() {
    let (code, out, _) = run(&["--seed", "3", "summarize", "--arch", "pixel_net"]);
    assert_eq!(code, 0);
    assert!(out.starts_with("seed=3\n"));
    let flops = count_flops_line(&out);
    assert!(out.contains(&format!("params=68289 flops={flops}")));
    assert_eq!(run(&["summarize", "--arch", "bogus"]).0, 2);
    assert_eq!(run(&["summarize", "--arch", "pixel_net", "--frobnicate"]).0, 2);
    assert_eq!(run(&["frobnicate"]).0, 2);
    assert_eq!(run(&["--help"]).0, 0);
}

fn count_flops_line(out: &str) -> u64 {
    let line = out.lines().last().unwrap();
    line.split("flops=").nth(1).unwrap().parse().unwrap()
}

#[test]
fn capacity_check_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let (code, out, _) = run(&["--out-dir", dir, "check", "--arch", "scene_net", "--input", "512"]);
    assert_eq!(code, 1);
    assert!(out.lines().any(|l| l == "CAPACITY=FAIL step=conv1"), "{out}");
    let (code, out, _) = run(&["--out-dir", dir, "check", "--arch", "scene_net"]);
    assert_eq!(code, 0);
    assert!(out.contains("CAPACITY=OK"));
    let (code, out, _) = run(&["--out-dir", dir, "compile", "--arch", "u_net"]);
    assert_eq!(code, 0, "{out}");
    let report = fs::read_to_string(tmp.path().join("plans/u_net_256.txt")).unwrap();
    assert!(report.ends_with("CAPACITY=OK\n"));
    // a tighter device rejects u_net
    let (code, _, _) = run(&["--out-dir", dir, "--device-capacity-bytes", "1000000", "check", "--arch", "u_net"]);
    assert_eq!(code, 1);
    let (code, _, err) = run(&["--out-dir", dir, "check", "--arch", "pixel_net", "--input", "64"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("ERROR kind=ArchError"));
}

#[test]
fn missing_model_is_a_domain_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let (code, _, err) = run(&["check", "--model", missing.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.starts_with("ERROR kind="));
}

#[test]
fn pixel_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().to_str().unwrap();
    let p = |rel: &str| tmp.path().join(rel).to_str().unwrap().to_string();
    let ok = |args: &[&str]| {
        let (code, out, err) = run(args);
        assert_eq!(code, 0, "{args:?}\n{out}\n{err}");
        out
    };
    ok(&["--out-dir", o, "gen-data", "--task", "pixel", "--scenes", "2", "--scene-size", "64", "--n-per-class", "60"]);
    ok(&["--out-dir", o, "train", "--arch", "pixel_net", "--data", &p("data/pixel"), "--epochs", "2", "--patience", "2"]);
    ok(&["--out-dir", o, "train", "--init", &p("models/pixel_net"), "--qat", "--data", &p("data/pixel"), "--epochs", "1", "--patience", "1"]);
    assert!(tmp.path().join("models/pixel_net_qat").join(QAT_TABLE).exists());
    ok(&["--out-dir", o, "quantize", "--model", &p("models/pixel_net_qat")]);
    ok(&["--out-dir", o, "calibrate", "--model", &p("models/pixel_net"), "--data", &p("data/pixel")]);
    ok(&["--out-dir", o, "quantize", "--model", &p("models/pixel_net"), "--table", &p("quant/pixel_net.json")]);
    let out = ok(&["--out-dir", o, "evaluate", "--model", &p("models/pixel_net_qat_int8"), "--data", &p("data/pixel/val")]);
    assert!(out.contains("level=sample accuracy="));
    ok(&["--out-dir", o, "infer", "--model", &p("models/pixel_net_int8"), "--data", &p("data/pixel/val")]);
    let out = ok(&["--out-dir", o, "benchmark", "--model", &p("models/pixel_net_int8"), "--runs", "3", "--warmup", "0"]);
    assert!(out.contains("executor=int8"));
    let out = ok(&["--out-dir", o, "compile", "--model", &p("models/pixel_net_int8")]);
    assert!(out.contains("CAPACITY=OK"));
    let metrics = fs::read_to_string(tmp.path().join("metrics_pixel_net_qat_int8.txt")).unwrap();
    assert!(metrics.contains("(FP)"));
    // float models are required where training happens
    let (code, _, _) = run(&["--out-dir", o, "prune", "--model", &p("models/pixel_net_int8"), "--data", &p("data/pixel"), "--pr", "0.3"]);
    assert_eq!(code, 2);
    let (code, _, _) = run(&["--out-dir", o, "prune", "--model", &p("models/pixel_net"), "--data", &p("data/pixel"), "--pr", "1.5"]);
    assert_eq!(code, 2);
}
