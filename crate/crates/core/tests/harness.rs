use hopfavg_core::harness::{
    run_coeffs, run_dde_ensemble, run_spectrum, run_validation, Experiment, HarnessError,
};

fn config(perturbations: &str, noise: &str, sim: &str) -> String {
    format!(
        r#"{{
  "system": {{ "r": 1.0, "delays": [1.0], "weights": [-1.5707963267948966] }},
  "perturbations": {perturbations},
  "noise": {noise},
  "sim": {sim},
  "limit": {{ "dt": 0.005, "cache_radius": 2.0, "cache_step": 0.05 }},
  "validation": {{ "psd_points": 4 }},
  "coeffs": {{ "rho_max": 1.0, "n_rho": 3, "n_phi": 4 }}
}}"#
    )
}

const TELEGRAPH: &str = r#"{ "Q": [[-1.0, 1.0], [1.0, -1.0]], "sigma": [-1.0, 1.0] }"#;
const SCALAR: &str = r#"{ "F": "eta(-1)", "G": "-(eta(0)^3)+eta(-1)", "Gq": "0" }"#;
const SMALL_SIM: &str = r#"{ "eps": [0.5, 0.4], "dt": 0.02, "T": 0.5, "n_paths": 16, "seed": 1 }"#;

#[test]
fn zero_perturbations_pass_trivially() {
    let text = config(r#"{}"#, r#"{ "Q": [[0.0]], "sigma": [0.0] }"#, SMALL_SIM);
    let exp = Experiment::from_json_str(&text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = run_validation(&exp, dir.path()).unwrap();
    assert!(r.verdict);
    for l in &r.levels {
        assert_eq!(l.ks_h, 0.0);
        let m = l.stats.moments.unwrap();
        assert_eq!((m.mean_se, m.cov_se), ([0.0; 2], [0.0; 3]));
        assert!((m.mean[0] - 1.0).abs() < 1e-6 && m.mean[1].abs() < 1e-6);
    }
    let lm = r.limit.stats.moments.unwrap();
    assert_eq!(
        (lm.mean, lm.mean_se, lm.cov),
        ([1.0, 0.0], [0.0; 2], [0.0; 3])
    );
}

#[test]
fn spectrum_artifacts_of_the_scalar_example() {
    let exp = Experiment::from_json_str(&config(SCALAR, TELEGRAPH, SMALL_SIM)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s = run_spectrum(&exp, dir.path()).unwrap();
    assert!((s.omega - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    // The quoted digits are truncated, so compare them at 1e-5 and the closed form exactly.
    assert!((s.psi0[0] - 0.57680).abs() < 1e-5 && (s.psi0[1] - 0.90603).abs() < 1e-5);
    let pi = std::f64::consts::PI;
    let d = 1.0 + pi * pi / 4.0;
    assert!((s.psi0[0] - 2.0 / d).abs() < 1e-12 && (s.psi0[1] - pi / d).abs() < 1e-12);
    for f in [
        "spectrum.json",
        "fundamental.csv",
        "stable_norms.csv",
        "manifest.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "spectrum");
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn coefficient_table_is_reproducible() {
    let exp = Experiment::from_json_str(&config(SCALAR, TELEGRAPH, SMALL_SIM)).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let s = run_coeffs(&exp, a.path()).unwrap();
    run_coeffs(&exp, b.path()).unwrap();
    assert_eq!(s.grid_points, 12);
    assert!(s.centering.passed && s.psd.min_eigenvalue >= -1e-9);
    let read = |d: &std::path::Path| std::fs::read(d.join("coefficients.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(
        String::from_utf8(read(a.path())).unwrap().lines().count(),
        13
    );
}

#[test]
fn empty_ensemble_is_rejected() {
    let sim = SMALL_SIM.replace("\"n_paths\": 16", "\"n_paths\": 0");
    let exp = Experiment::from_json_str(&config(SCALAR, TELEGRAPH, &sim)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        run_dde_ensemble(&exp, dir.path()),
        Err(HarnessError::EmptyEnsemble(_))
    ));
}

#[test]
fn uncentered_gq_is_an_assumption_error() {
    let p = r#"{ "F": "eta(-1)", "Gq": "eta(0)" }"#;
    let exp = Experiment::from_json_str(&config(p, TELEGRAPH, SMALL_SIM)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        run_validation(&exp, dir.path()),
        Err(HarnessError::Centering(r)) if r > 0.1
    ));
}

#[test]
fn validation_needs_two_eps_levels() {
    let sim = SMALL_SIM.replace("[0.5, 0.4]", "[0.5]");
    let exp = Experiment::from_json_str(&config(SCALAR, TELEGRAPH, &sim)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        run_validation(&exp, dir.path()),
        Err(HarnessError::TooFewEps(1))
    ));
}

#[test]
fn escapes_are_counted_and_bounded() {
    // A destabilizing cubic blows up before T = 1 from |z0| = 3.
    let p = r#"{ "G": "eta(0)^3" }"#;
    let sim = r#"{ "eps": [0.5, 0.4], "dt": 0.02, "T": 1.0, "n_paths": 6, "z0": [3.0, 0.0] }"#;
    let exp = Experiment::from_json_str(&config(p, TELEGRAPH, sim)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s = run_dde_ensemble(&exp, dir.path()).unwrap();
    for l in &s.levels {
        assert_eq!(l.stats.completed + l.stats.escaped, l.stats.n_paths);
        assert_eq!(l.stats.escaped, 6);
    }
    assert!(matches!(
        run_validation(&exp, dir.path()),
        Err(HarnessError::Escapes { .. })
    ));
}

#[test]
fn config_errors_carry_paths() {
    let bad = config(SCALAR, TELEGRAPH, SMALL_SIM).replace("\"T\": 0.5", "\"T\": -0.5");
    let err = Experiment::from_json_str(&bad).unwrap_err().to_string();
    assert!(err.contains("sim.T"), "{err}");
    let bad = config(r#"{ "F": "eta(-1" }"#, TELEGRAPH, SMALL_SIM);
    let err = Experiment::from_json_str(&bad).unwrap_err().to_string();
    assert!(err.contains("perturbations.F"), "{err}");
}
