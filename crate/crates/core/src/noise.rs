//! Finite-state Markov chain noise `σ(ξ_t)`.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MEAN_ZERO_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("generator must be a non-empty square matrix; got {rows} rows for {states} states")]
    Shape { rows: usize, states: usize },
    #[error("sigma has {got} entries, expected {expected}")]
    SigmaLength { got: usize, expected: usize },
    #[error("negative off-diagonal rate Q[{i}][{j}] = {value}")]
    NegativeRate { i: usize, j: usize, value: f64 },
    #[error("row {row} of the generator sums to {sum}, not 0")]
    RowSum { row: usize, sum: f64 },
    #[error("non-finite entry in the noise model")]
    NonFinite,
    #[error("chain is reducible: state {to} is not reachable from state {from}")]
    Reducible { from: usize, to: usize },
    #[error(
        "stationary mean of sigma is {mean:e}, not zero (enable auto-centering to subtract it)"
    )]
    NonZeroMean { mean: f64 },
    #[error("absorbing state {0} encountered while sampling")]
    Absorbing(usize),
    #[error("horizon must be positive, got {0}")]
    Horizon(f64),
}

/// Generator `Q`, values `σ` and stationary law `ν̄` of the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovNoiseModel {
    generator: DMatrix<f64>,
    sigma: Vec<f64>,
    stationary: Vec<f64>,
    jumps: Vec<Option<WeightedIndex<f64>>>,
}

impl MarkovNoiseModel {
    /// Validates the chain. With `auto_center` the stationary mean of `σ` is
    /// subtracted; otherwise a non-zero mean is an error.
    pub fn new(q: Vec<Vec<f64>>, sigma: Vec<f64>, auto_center: bool) -> Result<Self, NoiseError> {
        let n = sigma.len();
        if q.is_empty() {
            return Err(NoiseError::Shape { rows: 0, states: n });
        }
        if q.len() != n {
            return Err(NoiseError::SigmaLength {
                got: n,
                expected: q.len(),
            });
        }
        for row in &q {
            if row.len() != n {
                return Err(NoiseError::Shape {
                    rows: q.len(),
                    states: row.len(),
                });
            }
        }
        if q.iter().flatten().chain(&sigma).any(|v| !v.is_finite()) {
            return Err(NoiseError::NonFinite);
        }
        let scale = q.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
        for (i, row) in q.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i != j && v < 0.0 {
                    return Err(NoiseError::NegativeRate { i, j, value: v });
                }
            }
            let sum: f64 = row.iter().sum();
            if sum.abs() > 1e-12 * scale * n as f64 {
                return Err(NoiseError::RowSum { row: i, sum });
            }
        }
        check_irreducible(&q)?;
        let generator = DMatrix::from_fn(n, n, |i, j| q[i][j]);
        let stationary = stationary_distribution(&generator);
        let mut sigma = sigma;
        let mean: f64 = stationary.iter().zip(&sigma).map(|(p, s)| p * s).sum();
        let sigma_scale = sigma.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if mean.abs() > MEAN_ZERO_TOL * sigma_scale {
            if auto_center {
                log::info!("centering sigma by its stationary mean {mean:e}");
                sigma.iter_mut().for_each(|s| *s -= mean);
            } else {
                return Err(NoiseError::NonZeroMean { mean });
            }
        }
        let jumps = q
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let w: Vec<f64> = row
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| if i == j { 0.0 } else { v })
                    .collect();
                WeightedIndex::new(w).ok()
            })
            .collect();
        Ok(Self {
            generator,
            sigma,
            stationary,
            jumps,
        })
    }

    /// Two states with symmetric switching rate `rate` and `σ = (-1, 1)`.
    pub fn telegraph(rate: f64) -> Result<Self, NoiseError> {
        Self::new(
            vec![vec![-rate, rate], vec![rate, -rate]],
            vec![-1.0, 1.0],
            false,
        )
    }

    /// The constant chain `σ ≡ 0`.
    pub fn silent() -> Self {
        Self::new(vec![vec![0.0]], vec![0.0], false).expect("valid one-state chain")
    }

    pub fn states(&self) -> usize {
        self.sigma.len()
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    pub fn is_silent(&self) -> bool {
        self.sigma.iter().all(|s| *s == 0.0)
    }

    /// `R(t) = Σ_ξ ν̄_ξ σ_ξ (e^{tQ}σ)_ξ`.
    pub fn autocorrelation(&self, t: f64) -> f64 {
        assert!(t >= 0.0, "autocorrelation needs t >= 0");
        let p = (&self.generator * t).exp();
        let s = DVector::from_column_slice(&self.sigma);
        let ps = p * &s;
        self.stationary
            .iter()
            .zip(&self.sigma)
            .zip(ps.iter())
            .map(|((nu, sg), v)| nu * sg * v)
            .sum()
    }

    /// `R` on the grid `t_k = k·h`, `k = 0..=n`, by repeated multiplication.
    pub fn autocorrelation_grid(&self, h: f64, n: usize) -> Vec<f64> {
        let step = (&self.generator * h).exp();
        let weighted: Vec<f64> = self
            .stationary
            .iter()
            .zip(&self.sigma)
            .map(|(nu, s)| nu * s)
            .collect();
        let mut v = DVector::from_column_slice(&self.sigma);
        let mut out = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            out.push(weighted.iter().zip(v.iter()).map(|(a, b)| a * b).sum());
            v = &step * v;
        }
        out
    }

    /// `R(0) = Σ ν̄ᵢ σᵢ²`.
    pub fn variance(&self) -> f64 {
        self.stationary
            .iter()
            .zip(&self.sigma)
            .map(|(p, s)| p * s * s)
            .sum()
    }

    /// Smallest `-Re λ` over the non-zero eigenvalues of `Q` (infinite for one state).
    pub fn spectral_gap(&self) -> f64 {
        let eig = self.generator.complex_eigenvalues();
        let mut re: Vec<f64> = eig.iter().map(|l| -l.re).collect();
        re.sort_by(f64::total_cmp);
        // The eigenvalue closest to zero is the stationary one.
        re.get(1).copied().unwrap_or(f64::INFINITY)
    }

    /// `max_k |R(t_k)| / (R(0) e^{-γ t_k})` over `samples` points in `[0, t_max]`.
    pub fn envelope_ratio(&self, t_max: f64, samples: usize) -> f64 {
        let r0 = self.variance();
        if r0 == 0.0 {
            return 0.0;
        }
        let gamma = self.spectral_gap();
        (0..samples)
            .map(|k| {
                let t = t_max * k as f64 / (samples - 1) as f64;
                self.autocorrelation(t).abs() / (r0 * (-gamma * t).exp())
            })
            .fold(0.0, f64::max)
    }

    /// Exact simulation on `[0, t_max]` from the stationary law.
    pub fn sample_path<R: Rng + ?Sized>(
        &self,
        t_max: f64,
        rng: &mut R,
    ) -> Result<NoisePath, NoiseError> {
        if !(t_max > 0.0 && t_max.is_finite()) {
            return Err(NoiseError::Horizon(t_max));
        }
        let mut state = WeightedIndex::new(&self.stationary)
            .map(|d| d.sample(rng))
            .unwrap_or(0);
        let mut starts = vec![0.0];
        let mut states = vec![state];
        if self.states() == 1 {
            return Ok(NoisePath {
                starts,
                states,
                t_max,
            });
        }
        let mut t = 0.0;
        loop {
            let rate = -self.generator[(state, state)];
            let jump = self.jumps[state]
                .as_ref()
                .ok_or(NoiseError::Absorbing(state))?;
            if rate <= 0.0 {
                return Err(NoiseError::Absorbing(state));
            }
            let hold: f64 = Exp::new(rate).expect("positive rate").sample(rng);
            t += hold;
            if t >= t_max {
                break;
            }
            state = jump.sample(rng);
            starts.push(t);
            states.push(state);
        }
        Ok(NoisePath {
            starts,
            states,
            t_max,
        })
    }
}

fn check_irreducible(q: &[Vec<f64>]) -> Result<(), NoiseError> {
    let n = q.len();
    for forward in [true, false] {
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let rate = if forward { q[i][j] } else { q[j][i] };
                if i != j && rate > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            let (from, to) = if forward { (0, k) } else { (k, 0) };
            return Err(NoiseError::Reducible { from, to });
        }
    }
    Ok(())
}

/// `ν̄` with `ν̄Q = 0`, `Σν̄ = 1`; the chain must be irreducible.
pub fn stationary_distribution(q: &DMatrix<f64>) -> Vec<f64> {
    let n = q.nrows();
    let mut a = q.transpose();
    let mut b = DVector::zeros(n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    b[n - 1] = 1.0;
    let nu = a
        .lu()
        .solve(&b)
        .expect("irreducible generator has a unique stationary law");
    nu.iter().map(|v| v.max(0.0)).collect()
}

/// Piecewise-constant state path: `states[i]` holds on `[starts[i], starts[i+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePath {
    starts: Vec<f64>,
    states: Vec<usize>,
    t_max: f64,
}

impl NoisePath {
    pub fn constant(state: usize, t_max: f64) -> Self {
        Self {
            starts: vec![0.0],
            states: vec![state],
            t_max,
        }
    }

    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    /// Times at which the state changes.
    pub fn jump_times(&self) -> &[f64] {
        &self.starts[1..]
    }

    pub fn state_at(&self, t: f64) -> usize {
        let i = self.starts.partition_point(|s| *s <= t);
        self.states[i.saturating_sub(1)]
    }

    /// Fraction of `[0, t_max]` spent in `state`.
    pub fn occupation(&self, state: usize) -> f64 {
        let mut total = 0.0;
        for (i, &s) in self.states.iter().enumerate() {
            if s == state {
                let end = self.starts.get(i + 1).copied().unwrap_or(self.t_max);
                total += end - self.starts[i];
            }
        }
        total / self.t_max
    }

    pub fn cursor(&self) -> NoiseCursor<'_> {
        NoiseCursor {
            path: self,
            next: 1,
        }
    }
}

/// Forward-only iterator over the jumps of a path.
#[derive(Debug, Clone)]
pub struct NoiseCursor<'a> {
    path: &'a NoisePath,
    next: usize,
}

impl NoiseCursor<'_> {
    /// State on the current holding interval.
    pub fn state(&self) -> usize {
        self.path.states[self.next - 1]
    }

    /// Jumps in `(a, b]`, as positions relative to the step (`(t - a) / (b - a)`),
    /// pushed into `breaks`; the states after each jump are pushed into `states`
    /// (the first entry is the state at `a`).
    pub fn advance(&mut self, a: f64, b: f64, breaks: &mut Vec<f64>, states: &mut Vec<usize>) {
        breaks.clear();
        states.clear();
        states.push(self.state());
        while self.next < self.path.starts.len() && self.path.starts[self.next] <= b {
            let frac = (self.path.starts[self.next] - a) / (b - a);
            let s = self.path.states[self.next];
            self.next += 1;
            if frac <= 0.0 {
                *states.last_mut().unwrap() = s;
            } else if frac >= 1.0 {
                // Takes effect from the next step on.
            } else {
                breaks.push(frac);
                states.push(s);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn stationary_examples() {
        let sym = MarkovNoiseModel::telegraph(3.0).unwrap();
        assert!((sym.stationary()[0] - 0.5).abs() < 1e-15);
        let q = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 2.0, -2.0]);
        let nu = stationary_distribution(&q);
        assert!((nu[0] - 2.0 / 3.0).abs() < 1e-15 && (nu[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(MarkovNoiseModel::silent().stationary(), &[1.0]);
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(
            MarkovNoiseModel::new(
                vec![vec![-1.0, 1.0], vec![0.0, 0.0]],
                vec![-1.0, 1.0],
                false
            ),
            Err(NoiseError::Reducible { .. })
        ));
        assert!(matches!(
            MarkovNoiseModel::new(
                vec![vec![-1.0, 1.0], vec![1.0, -2.0]],
                vec![-1.0, 1.0],
                false
            ),
            Err(NoiseError::RowSum { row: 1, .. })
        ));
        assert!(matches!(
            MarkovNoiseModel::new(
                vec![vec![1.0, -1.0], vec![1.0, -1.0]],
                vec![-1.0, 1.0],
                false
            ),
            Err(NoiseError::NegativeRate { .. })
        ));
        let skew = || {
            MarkovNoiseModel::new(
                vec![vec![-1.0, 1.0], vec![2.0, -2.0]],
                vec![-1.0, 1.0],
                false,
            )
        };
        assert!(matches!(skew(), Err(NoiseError::NonZeroMean { .. })));
        let centered = MarkovNoiseModel::new(
            vec![vec![-1.0, 1.0], vec![2.0, -2.0]],
            vec![-1.0, 1.0],
            true,
        )
        .unwrap();
        let mean: f64 = centered
            .stationary()
            .iter()
            .zip(centered.sigma())
            .map(|(p, s)| p * s)
            .sum();
        assert!(mean.abs() < 1e-15);
    }

    #[test]
    fn telegraph_autocorrelation_closed_form() {
        let q = 0.7;
        let m = MarkovNoiseModel::telegraph(q).unwrap();
        for k in 0..20 {
            let t = 0.37 * k as f64;
            assert!((m.autocorrelation(t) - (-2.0 * q * t).exp()).abs() < 1e-12);
        }
        let grid = m.autocorrelation_grid(0.01, 300);
        assert!((grid[300] - (-2.0 * q * 3.0f64).exp()).abs() < 1e-12);
        assert!((m.spectral_gap() - 2.0 * q).abs() < 1e-12);
        assert!(m.envelope_ratio(10.0, 50) <= 1.0 + 1e-6);
    }

    #[test]
    fn three_state_chain_decays_with_unit_variance_at_zero() {
        let m = MarkovNoiseModel::new(
            vec![
                vec![-2.0, 1.0, 1.0],
                vec![1.0, -2.0, 1.0],
                vec![1.0, 1.0, -2.0],
            ],
            vec![-1.0, 0.0, 1.0],
            false,
        )
        .unwrap();
        assert!((m.autocorrelation(0.0) - 2.0 / 3.0).abs() < 1e-14);
        assert!(m.autocorrelation(30.0).abs() < 1e-12);
        assert!(m.envelope_ratio(5.0, 50) <= 1.0 + 1e-6);
    }

    #[test]
    fn sample_paths_are_well_formed() {
        let m = MarkovNoiseModel::telegraph(1.0).unwrap();
        let p = m
            .sample_path(50.0, &mut stream(1, Purpose::Noise, 0))
            .unwrap();
        assert_eq!(p.starts()[0], 0.0);
        assert!(p.starts().windows(2).all(|w| w[0] < w[1]));
        assert!(p.states().windows(2).all(|w| w[0] != w[1]));
        assert!(*p.starts().last().unwrap() < 50.0);
        let single = MarkovNoiseModel::silent()
            .sample_path(3.0, &mut stream(1, Purpose::Noise, 0))
            .unwrap();
        assert_eq!(single.starts(), &[0.0]);
    }

    #[test]
    fn cursor_splits_steps_at_jumps() {
        let p = NoisePath {
            starts: vec![0.0, 0.25, 1.0, 1.5],
            states: vec![0, 1, 0, 1],
            t_max: 2.0,
        };
        let mut c = p.cursor();
        let (mut br, mut st) = (Vec::new(), Vec::new());
        c.advance(0.0, 0.5, &mut br, &mut st);
        assert_eq!(br, vec![0.5]);
        assert_eq!(st, vec![0, 1]);
        c.advance(0.5, 1.0, &mut br, &mut st);
        assert!(br.is_empty());
        assert_eq!(st, vec![1]);
        c.advance(1.0, 1.5, &mut br, &mut st);
        assert_eq!(st, vec![0]);
        assert_eq!(p.state_at(1.2), 0);
        assert_eq!(p.state_at(1.5), 1);
    }
}
