//! Euler–Maruyama simulation of a 2-D diffusion with generator
//!
//! ```text
//! L = Σᵢ bᵢ(ž) ∂ᵢ + ½ Σᵢⱼ Dᵢⱼ(ž) ∂ᵢ∂ⱼ,
//! ```
//!
//! stepped as `ž ← ž + b dt + D^{1/2} √dt η` with `η` standard normal.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::averaged::{sym_eigenvalues, AveragedError, RadialCache};
use crate::rng::{stream, Purpose};
use crate::stats::EnsembleResult;

pub const PSD_TOL: f64 = 1e-9;
pub const ESCAPE_RADIUS: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("diffusion matrix has eigenvalue {0:e} < -{PSD_TOL:e}")]
    NotPsd(f64),
    #[error("step {dt} violates dt <= 1e-2 * max(1, 1/|b|) = {limit} at the initial point")]
    StepTooLarge { dt: f64, limit: f64 },
    #[error("horizon and step must be positive (T = {horizon}, dt = {dt})")]
    Grid { horizon: f64, dt: f64 },
    #[error(transparent)]
    Coefficients(#[from] AveragedError),
}

/// Drift `b` and covariance rate `D` (the second-order part of the generator is `½ D : ∇²`).
pub trait Diffusion: Sync {
    fn coefficients(&self, z: [f64; 2]) -> Result<([f64; 2], [[f64; 2]; 2]), SdeError>;
}

/// A diffusion given by a closure.
pub struct FnDiffusion<F>(pub F);

impl<F> Diffusion for FnDiffusion<F>
where
    F: Fn([f64; 2]) -> ([f64; 2], [[f64; 2]; 2]) + Sync,
{
    fn coefficients(&self, z: [f64; 2]) -> Result<([f64; 2], [[f64; 2]; 2]), SdeError> {
        Ok((self.0)(z))
    }
}

/// How the averaged matrix `a` enters the covariance rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionConvention {
    /// `D = a + aᵀ`.
    #[default]
    Symmetrized,
    /// `D = ½(a + aᵀ)`.
    Halved,
}

/// The limit diffusion with coefficients from a [`RadialCache`].
#[derive(Debug, Clone)]
pub struct LimitDiffusion {
    pub cache: RadialCache,
    pub drift_scale: f64,
    pub convention: DiffusionConvention,
}

impl Diffusion for LimitDiffusion {
    fn coefficients(&self, z: [f64; 2]) -> Result<([f64; 2], [[f64; 2]; 2]), SdeError> {
        let c = self.cache.eval(z)?;
        let b = c.drift();
        let k = match self.convention {
            DiffusionConvention::Symmetrized => 2.0,
            DiffusionConvention::Halved => 1.0,
        };
        let s = c.a_sym();
        Ok((
            [self.drift_scale * b[0], self.drift_scale * b[1]],
            [[k * s[0][0], k * s[0][1]], [k * s[1][0], k * s[1][1]]],
        ))
    }
}

/// Symmetric square root `S` with `S Sᵀ = ½(m + mᵀ)`, clipping eigenvalues in
/// `[-PSD_TOL, 0)` to zero.
pub fn sqrt_psd(m: [[f64; 2]; 2]) -> Result<[[f64; 2]; 2], SdeError> {
    let off = 0.5 * (m[0][1] + m[1][0]);
    let (a, c) = (m[0][0], m[1][1]);
    let lam = sym_eigenvalues([[a, off], [off, c]]);
    if lam[0] < -PSD_TOL {
        return Err(SdeError::NotPsd(lam[0]));
    }
    let theta = 0.5 * (2.0 * off).atan2(a - c);
    let (s, co) = theta.sin_cos();
    // Eigenvector (co, s) carries the larger eigenvalue.
    let l1 = lam[1].max(0.0).sqrt();
    let l2 = lam[0].max(0.0).sqrt();
    Ok([
        [l1 * co * co + l2 * s * s, (l1 - l2) * co * s],
        [(l1 - l2) * co * s, l1 * s * s + l2 * co * co],
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdePath {
    pub times: Vec<f64>,
    pub z: Vec<[f64; 2]>,
    pub escaped_at: Option<f64>,
}

impl SdePath {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,zc1,zc2\n");
        for (t, z) in self.times.iter().zip(&self.z) {
            out.push_str(&format!("{t:?},{:?},{:?}\n", z[0], z[1]));
        }
        out
    }
}

fn check_grid(
    spec: &dyn Diffusion,
    z0: [f64; 2],
    dt: f64,
    horizon: f64,
) -> Result<usize, SdeError> {
    if !(dt > 0.0 && horizon > 0.0) {
        return Err(SdeError::Grid { horizon, dt });
    }
    let (b, _) = spec.coefficients(z0)?;
    let nb = b[0].hypot(b[1]);
    let limit = 1e-2 * if nb > 0.0 { (1.0 / nb).max(1.0) } else { 1.0 };
    if dt > limit * (1.0 + 1e-12) {
        return Err(SdeError::StepTooLarge { dt, limit });
    }
    Ok((horizon / dt).round().max(1.0) as usize)
}

fn integrate<R: Rng + ?Sized>(
    spec: &dyn Diffusion,
    z0: [f64; 2],
    dt: f64,
    steps: usize,
    rng: &mut R,
    mut record: impl FnMut(usize, [f64; 2]),
) -> Result<Option<f64>, SdeError> {
    let sq = dt.sqrt();
    let mut z = z0;
    record(0, z);
    for k in 0..steps {
        let (b, d) = spec.coefficients(z)?;
        let f = sqrt_psd(d)?;
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        z = [
            z[0] + b[0] * dt + sq * (f[0][0] * e0 + f[0][1] * e1),
            z[1] + b[1] * dt + sq * (f[1][0] * e0 + f[1][1] * e1),
        ];
        if !(z[0].is_finite() && z[1].is_finite()) || z[0].hypot(z[1]) > ESCAPE_RADIUS {
            return Ok(Some((k + 1) as f64 * dt));
        }
        record(k + 1, z);
    }
    Ok(None)
}

/// One path on `[0, T]` recorded at every step.
pub fn euler_maruyama<R: Rng + ?Sized>(
    spec: &dyn Diffusion,
    z0: [f64; 2],
    dt: f64,
    horizon: f64,
    rng: &mut R,
) -> Result<SdePath, SdeError> {
    let steps = check_grid(spec, z0, dt, horizon)?;
    let mut times = Vec::with_capacity(steps + 1);
    let mut z = Vec::with_capacity(steps + 1);
    let escaped_at = integrate(spec, z0, dt, steps, rng, |k, v| {
        times.push(k as f64 * dt);
        z.push(v);
    })?;
    Ok(SdePath {
        times,
        z,
        escaped_at,
    })
}

/// Terminal values of `n_paths` paths; path `i` draws from Brownian stream `i` of `seed`.
pub fn ensemble(
    spec: &dyn Diffusion,
    n_paths: usize,
    z0: [f64; 2],
    dt: f64,
    horizon: f64,
    seed: u64,
) -> Result<EnsembleResult, SdeError> {
    let steps = check_grid(spec, z0, dt, horizon)?;
    let finals = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, Purpose::Brownian, i);
            let mut last = z0;
            let escaped = integrate(spec, z0, dt, steps, &mut rng, |_, v| last = v)?;
            Ok(escaped.is_none().then_some(last))
        })
        .collect::<Result<Vec<_>, SdeError>>()?;
    Ok(EnsembleResult { finals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Moments;

    fn check_factor(m: [[f64; 2]; 2]) -> f64 {
        let f = sqrt_psd(m).unwrap();
        let mut r = 0.0f64;
        for i in 0..2 {
            for j in 0..2 {
                let v = f[i][0] * f[j][0] + f[i][1] * f[j][1];
                r += (v - m[i][j]).powi(2);
            }
        }
        r.sqrt()
    }

    #[test]
    fn sqrt_psd_examples() {
        assert_eq!(
            sqrt_psd([[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            [[1.0, 0.0], [0.0, 1.0]]
        );
        let f = sqrt_psd([[4.0, 0.0], [0.0, 9.0]]).unwrap();
        assert!((f[0][0] - 2.0).abs() < 1e-15 && (f[1][1] - 3.0).abs() < 1e-15);
        assert!(f[0][1].abs() < 1e-15);
        assert!(check_factor([[1.0, 1.0], [1.0, 1.0]]) <= 1e-12);
        assert!(check_factor([[2.0, -0.7], [-0.7, 0.5]]) <= 1e-12);
        assert!(matches!(
            sqrt_psd([[1.0, 0.0], [0.0, -1e-6]]),
            Err(SdeError::NotPsd(_))
        ));
        assert!(sqrt_psd([[1.0, 0.0], [0.0, -1e-12]]).is_ok());
    }

    #[test]
    fn deterministic_decay() {
        let spec = FnDiffusion(|z: [f64; 2]| ([-z[0], -z[1]], [[0.0; 2]; 2]));
        let p = euler_maruyama(
            &spec,
            [1.0, 0.0],
            1e-4,
            1.0,
            &mut stream(0, Purpose::Brownian, 0),
        )
        .unwrap();
        let z = p.z.last().unwrap();
        assert!((z[0] - (-1.0f64).exp()).abs() < 1e-3 && z[1] == 0.0);
        assert_eq!(p.times.len(), 10_001);
    }

    #[test]
    fn zero_coefficients_freeze_the_state() {
        let spec = FnDiffusion(|_: [f64; 2]| ([0.0; 2], [[0.0; 2]; 2]));
        let e = ensemble(&spec, 5, [0.3, -0.2], 1e-2, 1.0, 9).unwrap();
        assert!(e.finals.iter().all(|f| *f == Some([0.3, -0.2])));
    }

    #[test]
    fn brownian_variance_and_reproducibility() {
        let spec = FnDiffusion(|_: [f64; 2]| ([0.0; 2], [[1.0, 0.0], [0.0, 1.0]]));
        let e = ensemble(&spec, 20_000, [0.0, 0.0], 1e-2, 1.0, 3).unwrap();
        let m = Moments::of(&e.survivors());
        assert!((m.cov[0] - 1.0).abs() < 0.04 && (m.cov[2] - 1.0).abs() < 0.04);
        assert_eq!(
            e,
            ensemble(&spec, 20_000, [0.0, 0.0], 1e-2, 1.0, 3).unwrap()
        );
        let single = ensemble(&spec, 1, [0.0, 0.0], 1e-2, 1.0, 3).unwrap();
        let path = euler_maruyama(
            &spec,
            [0.0, 0.0],
            1e-2,
            1.0,
            &mut stream(3, Purpose::Brownian, 0),
        )
        .unwrap();
        assert_eq!(single.finals[0], path.z.last().copied());
    }

    #[test]
    fn step_precondition() {
        let spec = FnDiffusion(|z: [f64; 2]| ([-0.5 * z[0], 0.0], [[0.0; 2]; 2]));
        assert!(matches!(
            ensemble(&spec, 1, [1.0, 0.0], 0.05, 1.0, 0),
            Err(SdeError::StepTooLarge { .. })
        ));
        assert!(ensemble(&spec, 1, [1.0, 0.0], 0.01, 1.0, 0).is_ok());
    }
}
