//! Ensemble summaries: terminal samples, moments with standard errors, and the
//! two-sample Kolmogorov–Smirnov distance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    Empty,
}

/// Terminal values of an ensemble; escaped paths are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub finals: Vec<Option<[f64; 2]>>,
}

impl EnsembleResult {
    pub fn escaped(&self) -> usize {
        self.finals.iter().filter(|f| f.is_none()).count()
    }

    pub fn escape_fraction(&self) -> f64 {
        self.escaped() as f64 / self.finals.len().max(1) as f64
    }

    pub fn survivors(&self) -> Vec<[f64; 2]> {
        self.finals.iter().flatten().copied().collect()
    }

    /// `H = ½‖ž‖²` of every surviving path.
    pub fn energies(&self) -> Vec<f64> {
        self.finals
            .iter()
            .flatten()
            .map(|z| 0.5 * (z[0] * z[0] + z[1] * z[1]))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("path_id,zc1,zc2,escaped\n");
        for (i, f) in self.finals.iter().enumerate() {
            match f {
                Some(z) => out.push_str(&format!("{i},{:?},{:?},0\n", z[0], z[1])),
                None => out.push_str(&format!("{i},,,1\n")),
            }
        }
        out
    }
}

/// Sample mean and covariance of 2-vectors with their standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: usize,
    pub mean: [f64; 2],
    pub mean_se: [f64; 2],
    /// `[c11, c12, c22]`.
    pub cov: [f64; 3],
    pub cov_se: [f64; 3],
}

impl Moments {
    pub fn of(samples: &[[f64; 2]]) -> Self {
        let n = samples.len();
        let nf = n as f64;
        // Shifted by the first sample, so identical samples have zero spread.
        let origin = samples.first().copied().unwrap_or([0.0; 2]);
        let mut shift = [0.0; 2];
        for z in samples {
            shift[0] += z[0] - origin[0];
            shift[1] += z[1] - origin[1];
        }
        let mean = [origin[0] + shift[0] / nf, origin[1] + shift[1] / nf];
        let pairs = [(0, 0), (0, 1), (1, 1)];
        let prods: Vec<[f64; 3]> = samples
            .iter()
            .map(|z| pairs.map(|(i, j)| (z[i] - mean[i]) * (z[j] - mean[j])))
            .collect();
        let mut cov = [0.0; 3];
        for p in &prods {
            for k in 0..3 {
                cov[k] += p[k];
            }
        }
        let denom = (nf - 1.0).max(1.0);
        let cov_unbiased = cov.map(|c| c / denom);
        let cov_mean = cov.map(|c| c / nf);
        let mut cov_var = [0.0; 3];
        for p in &prods {
            for k in 0..3 {
                cov_var[k] += (p[k] - cov_mean[k]).powi(2);
            }
        }
        let cov_se = cov_var.map(|v| (v / denom / nf).sqrt());
        let mean_se = [(cov_unbiased[0] / nf).sqrt(), (cov_unbiased[2] / nf).sqrt()];
        Self {
            n,
            mean,
            mean_se,
            cov: cov_unbiased,
            cov_se,
        }
    }
}

/// `sup_x |F_a(x) - F_b(x)|` of the empirical distribution functions.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    ks_two_sample_tol(a, b, 0.0)
}

/// As [`ks_two_sample`], with values closer than `tie_tol` to the running
/// threshold counted as ties.
pub fn ks_two_sample_tol(a: &[f64], b: &[f64], tie_tol: f64) -> Result<f64, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    // Track |i·nb - j·na| in integers so equal distances compare equal.
    let (na, nb) = (a.len() as u128, b.len() as u128);
    let (mut i, mut j) = (0, 0);
    let mut d = 0u128;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]) + tie_tol;
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as u128 * nb).abs_diff(j as u128 * na));
    }
    Ok(d as f64 / (na * nb) as f64)
}
