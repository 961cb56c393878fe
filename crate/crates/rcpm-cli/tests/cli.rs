//! End-to-end checks of the command-line surface: exit codes, artifact
//! files, manifests, and determinism across reruns.

use std::path::Path;
use std::process::{Command, Output};

fn rcpm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcpm")).args(args).output().expect("spawn rcpm")
}

fn write_sphere_config(path: &Path) {
    let config = r#"{
        "manifold": {"kind": "sphere", "n": 2},
        "target": {"kind": "sphere_mixture4"},
        "loss": "kl",
        "blocks": 2,
        "layers": 1,
        "components": 32,
        "gamma": 0.1,
        "alpha_min": 0.1,
        "alpha_range": 0.5,
        "learning_rate": 0.02,
        "batch_size": 32,
        "steps": 30,
        "seed": 5,
        "eval_samples": 2000
    }"#;
    std::fs::write(path, config).unwrap();
}

fn write_torus_nll_config(path: &Path) {
    let config = r#"{
        "manifold": {"kind": "product", "factors": [{"kind":"sphere","n":1},{"kind":"sphere","n":1}]},
        "target": {"kind": "torus3_modal"},
        "loss": "nll",
        "blocks": 1,
        "layers": 1,
        "components": 24,
        "gamma": 0.5,
        "learning_rate": 0.005,
        "batch_size": 32,
        "steps": 20,
        "seed": 6,
        "eval_samples": 2000
    }"#;
    std::fs::write(path, config).unwrap();
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    write_sphere_config(&config);

    let out1 = dir.path().join("run1");
    let st = rcpm(&["train", "--config", config.to_str().unwrap(), "--out", out1.to_str().unwrap()]);
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    for f in ["model.json", "trace.csv", "eval.json", "manifest.json"] {
        assert!(out1.join(f).exists(), "missing {f}");
    }
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out1.join("eval.json")).unwrap()).unwrap();
    assert!(eval.get("kl_nats").is_some());
    assert!(eval.get("ess_percent").is_some());

    let trace = std::fs::read_to_string(out1.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,loss,wallclock\n"));
    assert_eq!(trace.lines().count(), 31);

    // rerun into a second directory: model bytes identical
    let out2 = dir.path().join("run2");
    let st =
        rcpm(&["train", "--config", config.to_str().unwrap(), "--out", out2.to_str().unwrap()]);
    assert!(st.status.success());
    assert_eq!(
        std::fs::read(out1.join("model.json")).unwrap(),
        std::fs::read(out2.join("model.json")).unwrap(),
        "same seed/config must reproduce model.json byte-identically"
    );

    // seed override changes the model
    let out3 = dir.path().join("run3");
    let st = rcpm(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out3.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    assert!(st.status.success());
    assert_ne!(
        std::fs::read(out1.join("model.json")).unwrap(),
        std::fs::read(out3.join("model.json")).unwrap()
    );
}

#[test]
fn missing_config_exits_one_and_names_the_path() {
    let st = rcpm(&["train", "--config", "/nonexistent/cfg.json", "--out", "/tmp/never"]);
    assert_eq!(st.status.code(), Some(1));
    let err = String::from_utf8_lossy(&st.stderr);
    assert!(err.contains("/nonexistent/cfg.json"), "stderr: {err}");
}

#[test]
fn out_of_sweep_learning_rate_warns_but_trains() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    write_sphere_config(&config_path);
    let text = std::fs::read_to_string(&config_path)
        .unwrap()
        .replace("\"learning_rate\": 0.02", "\"learning_rate\": 0.5");
    std::fs::write(&config_path, text).unwrap();

    let out = dir.path().join("run");
    let st =
        rcpm(&["train", "--config", config_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(st.status.success());
    let err = String::from_utf8_lossy(&st.stderr);
    assert!(err.contains("warning") && err.contains("sweep"), "stderr: {err}");
}

#[test]
fn sample_density_geodesics_and_verify_on_a_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    write_sphere_config(&config);
    let out = dir.path().join("run");
    assert!(rcpm(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .status
        .success());
    let model = out.join("model.json");
    let model = model.to_str().unwrap();

    // sample
    let csv = dir.path().join("samples.csv");
    let st = rcpm(&["sample", "--model", model, "-n", "5", "--out", csv.to_str().unwrap()]);
    assert!(st.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 6, "header + 5 rows");
    assert!(text.starts_with("x0,x1,x2,log_density"));
    assert!(csv.with_file_name("samples.csv.manifest.json").exists());

    // density grid: 20 x 40 rows plus header and integral line
    let dcsv = dir.path().join("density.csv");
    let st = rcpm(&["density", "--model", model, "--grid", "20", "--out", dcsv.to_str().unwrap()]);
    assert!(st.status.success());
    let text = std::fs::read_to_string(&dcsv).unwrap();
    assert_eq!(text.lines().count(), 1 + 800 + 1);
    assert!(text.lines().last().unwrap().starts_with("# quadrature_integral"));

    // geodesics error out on multi-block models with an explanation
    let gcsv = dir.path().join("geo.csv");
    let st = rcpm(&[
        "geodesics",
        "--model",
        model,
        "--grid-starts",
        "4",
        "--steps",
        "8",
        "--out",
        gcsv.to_str().unwrap(),
    ]);
    assert_eq!(st.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&st.stderr).contains("single-block"));

    // logdet audit of the trained model
    let st = rcpm(&["verify", "logdet-audit", "--model", model, "-n", "2000"]);
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&st.stdout).expect("json report on stdout");
    assert_eq!(report["all_positive"], serde_json::Value::Bool(true));
}

#[test]
fn geodesics_on_single_block_model() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    write_sphere_config(&config_path);
    let text = std::fs::read_to_string(&config_path)
        .unwrap()
        .replace("\"blocks\": 2", "\"blocks\": 1");
    std::fs::write(&config_path, text).unwrap();
    let out = dir.path().join("run");
    assert!(rcpm(&[
        "train",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap()
    ])
    .status
    .success());

    let gcsv = dir.path().join("geo.csv");
    let st = rcpm(&[
        "geodesics",
        "--model",
        out.join("model.json").to_str().unwrap(),
        "--grid-starts",
        "3",
        "--steps",
        "4",
        "--out",
        gcsv.to_str().unwrap(),
    ]);
    assert!(st.status.success());
    let text = std::fs::read_to_string(&gcsv).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 5, "header + 3 polylines of 5 points");
}

#[test]
fn nll_trained_model_refuses_forward_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    write_torus_nll_config(&config);
    let out = dir.path().join("run");
    assert!(rcpm(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .status
        .success());
    let st = rcpm(&[
        "sample",
        "--model",
        out.join("model.json").to_str().unwrap(),
        "-n",
        "3",
        "--out",
        dir.path().join("s.csv").to_str().unwrap(),
    ]);
    assert_eq!(st.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&st.stderr).contains("forward"));
}

#[test]
fn gradcheck_command_passes_on_a_soft_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    write_sphere_config(&config);
    let st = rcpm(&["gradcheck", "--config", config.to_str().unwrap(), "--batch", "16"]);
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    let report: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(report["pass"], serde_json::Value::Bool(true));
}

#[test]
fn verify_involution_and_epsilon_net_reports() {
    let st = rcpm(&["verify", "involution", "--res", "256"]);
    assert!(st.status.success());
    let report: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(report["pass"], serde_json::Value::Bool(true));
    assert!(report["defect"].as_f64().unwrap() <= report["bound"].as_f64().unwrap());

    let st = rcpm(&["verify", "epsilon-net", "--sizes", "16,64", "--res", "1024"]);
    assert!(st.status.success());
    let report: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(report["pass"], serde_json::Value::Bool(true));
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
}
