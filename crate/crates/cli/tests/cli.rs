use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cfg(rel: &str) -> String {
    configs().join(rel).display().to_string()
}

fn paramnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paramnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn analyze_llama_1b_matches_quoted_size() {
    let out = paramnet(&["analyze", &cfg("models/llama-1b.json"), "--expect-params", "0.94e9", "--tol", "0.01"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let doc = json(&out);
    assert_eq!(doc["passed"], true);
    let params = doc["totals"]["params"].as_u64().unwrap();
    assert!((params as f64 - 0.94e9).abs() / 0.94e9 <= 0.01, "{params}");
}

#[test]
fn analyze_fails_a_wrong_expectation_with_exit_1() {
    let out = paramnet(&["analyze", &cfg("models/llama-1b.json"), "--expect-params", "1.2e9"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("total_params"), "{}", stderr(&out));
}

#[test]
fn analyze_moe8_up_proj_is_2_35b() {
    let out = paramnet(&["analyze", &cfg("models/llama-1b-moe8-up-proj.json"), "--expect-params", "2.35e9", "--tol", "0.01"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn analyze_dynamic_conv_reports_exact_flops_ratio() {
    let out = paramnet(&["analyze", &cfg("models/dynamic-conv.json")]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = &json(&out)["ratios"];
    let r_flops = r["r_flops"]["value"].as_f64().unwrap();
    assert!((r_flops - 1.021).abs() < 5e-4, "{r_flops}");
    assert_eq!(r["param_regime"], true);
    assert_eq!(r["flops_regime"], true);
}

#[test]
fn analyze_csv_and_text_formats_render() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    let out = paramnet(&["analyze", &cfg("models/toy-cnn.json"), "--format", "csv", "-o", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = fs::read_to_string(csv).unwrap();
    assert!(text.lines().count() > 3);
    let out = paramnet(&["analyze", &cfg("models/toy-cnn.json"), "--format", "text"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("total params"));
}

#[test]
fn analyze_names_the_malformed_descriptor() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken-model.json");
    fs::write(&bad, "{\"kind\": \"cnn\",\n \"name\": }").unwrap();
    let out = paramnet(&["analyze", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("broken-model.json") && err.contains("line 2"), "{err}");
}

#[test]
fn gradcheck_passes_dense_and_dynamic_cnns() {
    for model in ["models/tiny-cnn.json", "models/tiny-cnn-dynamic4.json"] {
        let out = paramnet(&["gradcheck", &cfg(model), "--seeds", "2"]);
        assert_eq!(out.status.code(), Some(0), "{model}: {}", stderr(&out));
        let doc = json(&out);
        assert_eq!(doc["passed"], true);
        assert!(doc["layers"].as_array().unwrap().len() >= 8);
    }
}

#[test]
fn gradcheck_injected_fault_fails_naming_the_layer() {
    let out = paramnet(&["gradcheck", &cfg("models/tiny-cnn.json"), "--seeds", "1", "--inject-fault", "conv2d"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("layer stem"), "{err}");
    assert!(!err.contains("layer classifier"), "{err}");
}

#[test]
fn train_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = paramnet(&[
            "train",
            &cfg("models/tiny-cnn.json"),
            &cfg("train/blobs.json"),
            "--data",
            &cfg("data/blobs.json"),
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        (out, out_dir)
    };
    let (a, da) = run("a");
    let (b, db) = run("b");
    assert_eq!(a.stdout, b.stdout);
    for file in ["run.jsonl", "summary.json", "checkpoint.bin"] {
        assert_eq!(fs::read(da.join(file)).unwrap(), fs::read(db.join(file)).unwrap(), "{file}");
    }
    let summary = json(&a);
    assert!(summary["train_accuracy"].as_f64().unwrap() >= 0.99);
}

#[test]
fn train_reports_divergence_with_its_step() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("hot.json");
    fs::write(&config, r#"{"steps": 200, "batch_size": 16, "base_lr": 1e300, "seed": 1}"#).unwrap();
    let out = paramnet(&[
        "train",
        &cfg("models/tiny-cnn.json"),
        config.to_str().unwrap(),
        "--data",
        &cfg("data/blobs.json"),
        "--out-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("diverged at step"), "{err}");
}

#[test]
fn sweep_params_are_affine_in_expert_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = paramnet(&[
        "sweep",
        &cfg("models/tiny-cnn.json"),
        &cfg("train/blobs.json"),
        "--data",
        &cfg("data/blobs.json"),
        "--experts",
        "1,2,4,8",
        "--count-only",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(table.as_bytes());
    let rows: Vec<(f64, f64)> = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[1].parse().unwrap(), r[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 4);
    let slope = (rows[1].1 - rows[0].1) / (rows[1].0 - rows[0].0);
    assert!(slope > 0.0);
    for &(m, p) in &rows {
        assert_eq!(p, rows[0].1 + slope * (m - rows[0].0), "m={m}");
    }
}

#[test]
fn report_tabulates_runs_and_checks_flops_spread() {
    let dir = tempfile::tempdir().unwrap();
    let sweep_dir = dir.path().join("sweep");
    let out = paramnet(&[
        "sweep",
        &cfg("models/tiny-cnn.json"),
        &cfg("train/blobs.json"),
        "--data",
        &cfg("data/blobs.json"),
        "--experts",
        "dense,4",
        "--out-dir",
        sweep_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let out = paramnet(&["report", sweep_dir.to_str().unwrap(), "--max-flops-spread", "0.05", "--monotone-params"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("model,params,flops,metric"));
    assert_eq!(lines.count(), 2);

    let out = paramnet(&["report", sweep_dir.to_str().unwrap(), "--max-flops-spread", "0.001"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_names_a_malformed_record_and_rejects_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("torn-summary.json");
    fs::write(&bad, "{\"model\": \"x\",").unwrap();
    let out = paramnet(&["report", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("torn-summary.json"), "{}", stderr(&out));

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = paramnet(&["report", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no run records"), "{}", stderr(&out));
}
