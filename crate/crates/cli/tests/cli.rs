use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "system": { "r": 1.0, "delays": [1.0], "weights": [-1.5707963267948966] },
  "perturbations": { "F": "eta(-1)", "G": "-(eta(0)^3)+eta(-1)" },
  "noise": { "Q": [[-1.0, 1.0], [1.0, -1.0]], "sigma": [-1.0, 1.0] },
  "sim": { "eps": [0.5, 0.4], "dt": 0.02, "T": 0.5, "n_paths": 40, "seed": 3 },
  "limit": { "dt": 0.005, "cache_radius": 2.0, "cache_step": 0.05 },
  "validation": { "psd_points": 4, "negative_control_drift_scale": null }
}"#;

fn hopfavg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hopfavg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn spectrum_succeeds_and_seed_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let out = tmp.path().join("spec");
    let o = hopfavg(&[
        "spectrum",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "17",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stdout).contains("omega_c = 1.570796326795"));
    assert_eq!(manifest(&out)["seed"], 17);
}

#[test]
fn mismatched_limit_fails_validation_with_code_1() {
    let tmp = tempfile::tempdir().unwrap();
    let text = CONFIG.replace(
        "\"cache_step\": 0.05",
        "\"cache_step\": 0.05, \"drift_scale\": 4.0",
    );
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("val");
    let o = hopfavg(&["validate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stdout).contains("verdict: FAIL"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["verdict"], false);
    assert_eq!(report["trend_based"], true);
}

#[test]
fn config_and_assumption_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let cfg = write_config(tmp.path(), &CONFIG.replace("\"dt\": 0.02", "\"dt\": -0.02"));
    let o = hopfavg(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sim.dt"));
    // L0 = -2 η(-1) has roots with positive real part.
    let cfg = write_config(tmp.path(), &CONFIG.replace("-1.5707963267948966", "-2.0"));
    let o = hopfavg(&["spectrum", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let read = |threads: &str| {
        let out = tmp.path().join(format!("sim{threads}"));
        let o = hopfavg(&[
            "simulate",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert_eq!(o.status.code(), Some(0));
        let mut m = manifest(&out);
        m.as_object_mut().unwrap().remove("timings_ms");
        (
            m,
            std::fs::read(out.join("dde_ensemble_eps0.4.csv")).unwrap(),
        )
    };
    assert_eq!(read("1"), read("2"));
}
