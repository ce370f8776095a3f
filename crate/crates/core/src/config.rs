//! JSON experiment configuration.
//!
//! Every section except `system` and `sim` has defaults. Unknown keys are
//! rejected and errors carry the JSON path of the offending value.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::averaged::QuadratureConfig;
use crate::expr::ParsedFunctional;
use crate::noise::MarkovNoiseModel;
use crate::sde_sim::DiffusionConvention;
use crate::spectral::{DelayOperator, PointDelay, SpectralSettings};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config value at `{path}`: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        path: path.into(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub r: f64,
    #[serde(default)]
    pub instantaneous: f64,
    pub delays: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationConfig {
    #[serde(rename = "F")]
    pub f: String,
    #[serde(rename = "G")]
    pub g: String,
    #[serde(rename = "Gq")]
    pub gq: String,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            f: "0".into(),
            g: "0".into(),
            gq: "0".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub auto_center: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            q: vec![vec![0.0]],
            sigma: vec![0.0],
            auto_center: false,
        }
    }
}

fn default_record_stride() -> usize {
    100
}

fn default_z0() -> [f64; 2] {
    [1.0, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    pub eps: Vec<f64>,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_record_stride")]
    pub record_stride: usize,
    /// Initial critical coordinates; the history is `Φ z0`.
    #[serde(default = "default_z0")]
    pub z0: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimitSettings {
    pub dt: f64,
    /// Defaults to `sim.n_paths`.
    pub n_paths: Option<usize>,
    pub cache_radius: f64,
    pub cache_step: f64,
    pub convention: DiffusionConvention,
    pub drift_scale: f64,
}

impl Default for LimitSettings {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            n_paths: None,
            cache_radius: 4.0,
            cache_step: 0.02,
            convention: DiffusionConvention::Symmetrized,
            drift_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationSettings {
    /// Absolute floor of the moment tolerance.
    pub abs_tol: f64,
    pub max_escape_fraction: f64,
    /// Values of `H` closer than this are ties in the KS statistic.
    pub ks_tie_tol: f64,
    /// Drift multiplier of the negative control; `null` skips it.
    pub negative_control_drift_scale: Option<f64>,
    pub psd_points: usize,
    pub psd_radius: f64,
}

impl Default for ValidationSettings {
    fn default() -> Self {
        Self {
            abs_tol: 0.1,
            max_escape_fraction: 0.1,
            ks_tie_tol: 1e-6,
            negative_control_drift_scale: Some(2.0),
            psd_points: 50,
            psd_radius: 2.0,
        }
    }
}

/// Polar grid of the coefficient table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoeffGrid {
    pub rho_max: f64,
    pub n_rho: usize,
    pub n_phi: usize,
}

impl Default for CoeffGrid {
    fn default() -> Self {
        Self {
            rho_max: 2.0,
            n_rho: 11,
            n_phi: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    #[serde(default)]
    pub perturbations: PerturbationConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub spectral: SpectralSettings,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    pub sim: SimSettings,
    #[serde(default)]
    pub limit: LimitSettings,
    #[serde(default)]
    pub validation: ValidationSettings,
    #[serde(default)]
    pub coeffs: CoeffGrid,
}

/// The model objects a validated config describes.
#[derive(Debug, Clone)]
pub struct ModelParts {
    pub operator: DelayOperator,
    pub f: ParsedFunctional,
    pub g: ParsedFunctional,
    pub gq: ParsedFunctional,
    pub noise: MarkovNoiseModel,
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(
            path,
            format!("must be positive and finite, got {v}"),
        ))
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn sha256(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn limit_paths(&self) -> usize {
        self.limit.n_paths.unwrap_or(self.sim.n_paths)
    }

    /// Checks ranges that serde cannot express.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.system;
        positive("system.r", s.r)?;
        if s.delays.len() != s.weights.len() {
            return Err(invalid(
                "system.weights",
                format!("{} weights for {} delays", s.weights.len(), s.delays.len()),
            ));
        }
        let sim = &self.sim;
        if sim.eps.is_empty() {
            return Err(invalid("sim.eps", "at least one value is required"));
        }
        for (i, &e) in sim.eps.iter().enumerate() {
            positive(&format!("sim.eps[{i}]"), e)?;
        }
        positive("sim.dt", sim.dt)?;
        positive("sim.T", sim.horizon)?;
        if sim.record_stride == 0 {
            return Err(invalid("sim.record_stride", "must be at least 1"));
        }
        if !sim.z0.iter().all(|v| v.is_finite()) {
            return Err(invalid("sim.z0", "must be finite"));
        }
        let l = &self.limit;
        positive("limit.dt", l.dt)?;
        positive("limit.cache_radius", l.cache_radius)?;
        positive("limit.cache_step", l.cache_step)?;
        if !l.drift_scale.is_finite() {
            return Err(invalid("limit.drift_scale", "must be finite"));
        }
        let v = &self.validation;
        positive("validation.abs_tol", v.abs_tol)?;
        if !(0.0..=1.0).contains(&v.max_escape_fraction) {
            return Err(invalid(
                "validation.max_escape_fraction",
                "must lie in [0, 1]",
            ));
        }
        if !(v.ks_tie_tol >= 0.0) {
            return Err(invalid("validation.ks_tie_tol", "must be non-negative"));
        }
        positive("validation.psd_radius", v.psd_radius)?;
        let c = &self.coeffs;
        positive("coeffs.rho_max", c.rho_max)?;
        if c.n_rho < 2 || c.n_phi < 1 {
            return Err(invalid("coeffs", "need n_rho >= 2 and n_phi >= 1"));
        }
        Ok(())
    }

    /// Builds the operator, functionals and noise chain.
    pub fn model_parts(&self) -> Result<ModelParts, ConfigError> {
        let s = &self.system;
        let delays = s
            .delays
            .iter()
            .zip(&s.weights)
            .map(|(&delay, &weight)| PointDelay { delay, weight })
            .collect();
        let operator =
            DelayOperator::new(s.r, s.instantaneous, delays).map_err(|e| invalid("system", e))?;
        let parse = |path: &str, text: &str| {
            ParsedFunctional::parse(text, s.r).map_err(|e| invalid(path, e))
        };
        let p = &self.perturbations;
        let f = parse("perturbations.F", &p.f)?;
        let g = parse("perturbations.G", &p.g)?;
        let gq = parse("perturbations.Gq", &p.gq)?;
        let n = &self.noise;
        let noise = MarkovNoiseModel::new(n.q.clone(), n.sigma.clone(), n.auto_center)
            .map_err(|e| invalid("noise", e))?;
        Ok(ModelParts {
            operator,
            f,
            g,
            gq,
            noise,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "system": {"r": 1.0, "delays": [1.0], "weights": [-1.5707963267948966]},
        "sim": {"eps": [0.3], "dt": 0.01, "T": 1.0, "n_paths": 4}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_json_str(MINIMAL).unwrap();
        assert_eq!(c.perturbations, PerturbationConfig::default());
        assert_eq!(c.limit_paths(), 4);
        assert_eq!(c.sim.z0, [1.0, 0.0]);
        let parts = c.model_parts().unwrap();
        assert!(parts.f.is_zero() && parts.noise.is_silent());
        assert_eq!(c.sha256().len(), 64);
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let text = MINIMAL.replace("\"n_paths\": 4", "\"n_paths\": 4, \"bogus\": 1");
        match ExperimentConfig::from_json_str(&text) {
            Err(ConfigError::Parse { path, message }) => {
                assert_eq!(path, "sim.bogus");
                assert!(message.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
        let text = MINIMAL.replace("\"dt\": 0.01", "\"dt\": \"x\"");
        assert!(matches!(
            ExperimentConfig::from_json_str(&text),
            Err(ConfigError::Parse { path, .. }) if path == "sim.dt"
        ));
    }

    #[test]
    fn range_errors_report_their_path() {
        let text = MINIMAL.replace("[0.3]", "[0.3, -1]");
        assert!(matches!(
            ExperimentConfig::from_json_str(&text),
            Err(ConfigError::Invalid { path, .. }) if path == "sim.eps[1]"
        ));
        let mut c = ExperimentConfig::from_json_str(MINIMAL).unwrap();
        c.perturbations.g = "eta(-2)".into();
        assert!(matches!(
            c.model_parts(),
            Err(ConfigError::Invalid { path, .. }) if path == "perturbations.G"
        ));
        c.perturbations.g = "0".into();
        c.noise.sigma = vec![1.0];
        c.noise.q = vec![vec![-1.0, 1.0], vec![1.0, -1.0]];
        assert!(matches!(
            c.model_parts(),
            Err(ConfigError::Invalid { path, .. }) if path == "noise"
        ));
    }
}
