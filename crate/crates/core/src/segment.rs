//! History segments: real functions on `[-r, 0]`.

/// A function of the delay argument `θ ∈ [-r, 0]`.
pub trait Segment {
    fn at(&self, theta: f64) -> f64;
}

impl<F: Fn(f64) -> f64> Segment for F {
    fn at(&self, theta: f64) -> f64 {
        self(theta)
    }
}

/// A segment sampled on the uniform grid `θ_j = -r + j·h`, `j = 0..=n`.
///
/// Between samples the value is linearly interpolated. The sample at `θ = 0`
/// is stored as-is, so segments with a jump at zero (such as the unit jump
/// used for the fundamental solution) are represented exactly at the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSegment {
    max_delay: f64,
    step: f64,
    values: Vec<f64>,
}

impl SampledSegment {
    /// `values[j]` is the sample at `-max_delay + j * step`; the last entry is `θ = 0`.
    pub fn new(max_delay: f64, values: Vec<f64>) -> Self {
        assert!(
            values.len() >= 2,
            "a sampled segment needs at least two samples"
        );
        let step = max_delay / (values.len() - 1) as f64;
        Self {
            max_delay,
            step,
            values,
        }
    }

    pub fn from_fn(max_delay: f64, intervals: usize, f: impl Fn(f64) -> f64) -> Self {
        let step = max_delay / intervals as f64;
        let values = (0..=intervals)
            .map(|j| f(-max_delay + j as f64 * step))
            .collect();
        Self::new(max_delay, values)
    }

    pub fn max_delay(&self) -> f64 {
        self.max_delay
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn theta(&self, j: usize) -> f64 {
        if j + 1 == self.values.len() {
            0.0
        } else {
            -self.max_delay + j as f64 * self.step
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Segment for SampledSegment {
    fn at(&self, theta: f64) -> f64 {
        let n = self.values.len() - 1;
        if theta >= 0.0 {
            return self.values[n];
        }
        let pos = ((theta + self.max_delay) / self.step).max(0.0);
        let j = (pos.floor() as usize).min(n - 1);
        let frac = pos - j as f64;
        self.values[j] * (1.0 - frac) + self.values[j + 1] * frac
    }
}
