//! Drives the installed binary end to end: the single-scene pipeline, the
//! failure exit codes, and a two-cell sweep with its report bundle.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_carf"));
    cmd.env_remove("CARF_OUT_ROOT");
    cmd
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("carf_cli_test").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// A micro run: large enough to exercise every stage, nowhere near
/// converged.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    let base = format!(
        "scene = wave\n\
         scene_complexity = 2\n\
         scene_seed = 11\n\
         image_size = 16\n\
         width = 16\n\
         grid_levels = 4\n\
         grid_table = 1024\n\
         train_iters = 120\n\
         acaq_iters = 150\n\
         batch = 64\n\
         seed = 11\n\
         out_dir = {}\n\
         {extra}",
        dir.display()
    );
    std::fs::write(&path, base).unwrap();
    path
}

/// Parse the JSON document a command prints after its progress lines.
fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let start = text.find('{').unwrap_or_else(|| panic!("no JSON in: {text}"));
    serde_json::from_str(text[start..].trim())
        .unwrap_or_else(|e| panic!("bad JSON ({e}): {text}"))
}

#[test]
fn run_pipeline_produces_every_artifact() {
    let dir = fresh_dir("pipeline");
    let cfg = write_config(&dir, "");
    let emitted = dir.join("emitted.json");
    let out = bin()
        .args([
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--emit-record",
            emitted.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "run failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    for artifact in [
        "config.cfg",
        "target_000.png",
        "model.carc",
        "fp_loss.json",
        "quant.carc",
        "telemetry.csv",
        "model.carf",
        "record.json",
        "emitted.json",
    ] {
        assert!(dir.join(artifact).is_file(), "missing {artifact}");
    }
    assert_eq!(
        std::fs::read_to_string(dir.join("record.json")).unwrap(),
        std::fs::read_to_string(&emitted).unwrap()
    );

    let record = stdout_json(&out);
    assert_eq!(record["scene"], "wave_k2_s11");
    assert_eq!(record["mode"], "mdl");
    assert!(record["complexity"].as_f64().unwrap() > 0.0);
    assert!(record["psnr"].as_f64().unwrap() > 5.0);
    assert!(record["fqr"].as_f64().unwrap() >= 2.0);
    assert!(record["storage_bytes"].as_u64().unwrap() > 0);

    // evaluate the quantized checkpoint explicitly
    let eval_out = dir.join("eval.json");
    let out = bin()
        .args([
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--checkpoint",
            dir.join("quant.carc").to_str().unwrap(),
            "--quant",
            "fake",
            "--out",
            eval_out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&eval_out).unwrap()).unwrap();
    assert_eq!(eval["quant"], "fake");
    assert_eq!(eval["psnr"], record["psnr"]);
    assert_eq!(eval["fqr"], record["fqr"]);
    assert!(eval["config_fingerprint"].is_string());

    // the baseline checkpoint has no quantizers to fake-quantize with
    let out = bin()
        .args([
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--checkpoint",
            dir.join("model.carc").to_str().unwrap(),
            "--quant",
            "fake",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("quantizer"));

    // integer replay agrees with the fake-quant float path
    let out = bin()
        .args([
            "check-int",
            "--checkpoint",
            dir.join("quant.carc").to_str().unwrap(),
            "--int",
            dir.join("model.carf").to_str().unwrap(),
            "--probes",
            "32",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let check = stdout_json(&out);
    assert_eq!(check["probes"], 32);
    assert_eq!(check["max_abs_deviation"].as_f64().unwrap(), 0.0);
}

#[test]
fn config_errors_exit_two_and_runtime_errors_exit_three() {
    let dir = fresh_dir("exit_codes");
    let cfg = write_config(&dir, "no_such_key = 1\n");
    let out = bin()
        .args(["train", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    // acaq without a trained baseline checkpoint is a runtime failure
    let cfg = write_config(&dir, "");
    let out = bin()
        .args(["acaq", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    let garbage = dir.join("garbage.carf");
    std::fs::write(&garbage, b"junk").unwrap();
    let out = bin()
        .args([
            "check-int",
            "--checkpoint",
            dir.join("missing.carc").to_str().unwrap(),
            "--int",
            garbage.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn sweep_writes_records_and_report_bundle() {
    let dir = fresh_dir("sweep");
    let cfg = write_config(&dir, "");
    let out = bin()
        .args([
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--complexities",
            "1,2",
            "--seeds",
            "3",
            "--modes",
            "mdl",
            "--jobs",
            "2",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "sweep failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    let csv = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "expected header plus two rows: {csv}");
    assert!(lines[0].starts_with("scene,complexity,mode,"));
    assert!(lines[1].starts_with("wave_k1_s3,"));
    assert!(lines[2].starts_with("wave_k2_s3,"));
    for f in ["report.json", "complexity_vs_fqr.svg", "psnr_vs_fqr.svg"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    assert!(!dir.join("failures.json").exists());
    for cell in ["wave_k1_s3_mdl", "wave_k2_s3_mdl"] {
        let record = dir.join("cells").join(cell).join("record.json");
        assert!(record.is_file(), "missing {}", record.display());
    }

    // regenerate the bundle from the collected CSV
    let regen_dir = dir.join("regen");
    let out = bin()
        .args([
            "report",
            "--records",
            dir.join("report.csv").to_str().unwrap(),
            "--out-dir",
            regen_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let regen = std::fs::read_to_string(regen_dir.join("report.csv")).unwrap();
    assert_eq!(regen, csv);
    assert!(regen_dir.join("psnr_vs_fqr.svg").is_file());
}
