//! End-to-end checks against the compiled `audit` binary.

use std::fs;
use std::path::Path;
use std::process::Command;

use audit_core::biaslab::{synth_world, token_embeddings, BiasKind, BiasSpec, SynthWorldSpec};
use audit_core::ingest::emit_dataset;

fn audit_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_audit"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

/// Emits a small synthetic world as a manifest-backed dataset plus a
/// token table.
fn synth_manifest(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let world = SynthWorldSpec::default();
    let bias = BiasSpec {
        kind: BiasKind::SpuriousCorrelation,
        train_size: 100,
        test_size: 120,
        ..BiasSpec::default()
    };
    let (_, test) = synth_world(&world, &bias, 9).unwrap();
    let manifest = emit_dataset(&test, &dir.join("data")).unwrap();

    let table = token_embeddings(&world, world.dims["img"]).unwrap();
    let mut csv = String::from("token");
    for j in 0..world.dims["img"] {
        csv.push_str(&format!(",v{j}"));
    }
    csv.push('\n');
    for (token, vec) in &table {
        csv.push_str(token);
        for v in vec {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    let table_path = dir.join("tokens.csv");
    fs::write(&table_path, csv).unwrap();
    (manifest, table_path)
}

#[test]
fn bench_is_byte_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"iterations": 3, "bias": {"kind": "noisy_label", "target_class": 1,
            "attr": "attr0", "strength": 0.3, "train_size": 120, "test_size": 100,
            "test_underperforming_fraction": 0.2}}"#,
    );
    for out in ["a", "b"] {
        let status = audit_bin()
            .args(["bench", "--config"])
            .arg(&config)
            .args(["--seed", "5", "--out"])
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = fs::read(dir.path().join("a/report.json")).unwrap();
    let b = fs::read(dir.path().join("b/report.json")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "report.json must be byte-identical");
    for name in ["summary.csv", "tokens.csv"] {
        assert!(dir.path().join("a").join(name).exists());
    }
}

#[test]
fn run_audits_a_manifest_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, table) = synth_manifest(dir.path());
    let config = write_config(dir.path(), r#"{"k_slices": 4}"#);

    let output = audit_bin()
        .args(["run", "--manifest"])
        .arg(&manifest)
        .args(["--config"])
        .arg(&config)
        .args(["--token-table"])
        .arg(&table)
        .args(["--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));

    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("out/run_report.json")).unwrap()).unwrap();
    let slices = report["slices"].as_array().unwrap();
    assert_eq!(slices.len(), 4);
    // ranked by error rate; the planted slice should sit on top with its
    // marker token explained
    let top = &slices[0];
    assert!(top["error_rate"].as_f64().unwrap() > 0.2);
    let tokens = top["token_report"]["tokens"].as_array().unwrap();
    assert!(!tokens.is_empty());
    assert!(tokens[0]["r_attr"].is_number());
}

#[test]
fn explain_reports_external_schema() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = synth_manifest(dir.path());

    // take the planted group as the slice to explain
    let dataset = audit_core::ingest::load_dataset(&manifest).unwrap();
    let ids: Vec<String> = dataset
        .samples
        .iter()
        .filter(|s| s.label == 1 && s.group_tag("attr0") == Some(1))
        .map(|s| s.id.clone())
        .collect();
    assert!(!ids.is_empty());
    let slice_path = dir.path().join("slice.json");
    fs::write(
        &slice_path,
        serde_json::to_string(&serde_json::json!({"slice_id": 2, "ids": ids})).unwrap(),
    )
    .unwrap();

    let output = audit_bin()
        .args(["explain", "--manifest"])
        .arg(&manifest)
        .args(["--slice-file"])
        .arg(&slice_path)
        .args(["--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));

    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("out/explanation.json")).unwrap())
            .unwrap();
    assert_eq!(report["slice_id"], 2);
    assert!(report["reference_size"].as_u64().unwrap() > 0);
    let tokens = report["tokens"].as_array().unwrap();
    assert!(tokens.iter().any(|t| t["token"] == "portable"));
}

#[test]
fn run_fails_cleanly_on_missing_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let output = audit_bin()
        .args(["run", "--manifest"])
        .arg(dir.path().join("nope.json"))
        .args(["--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("nope.json"), "{stderr}");
}
