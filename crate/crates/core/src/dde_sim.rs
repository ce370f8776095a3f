//! Path simulation of the perturbed delay equation
//!
//! ```text
//! ẋ(t) = L0(x_t) + ε G_q(x_t) + ε² G(x_t) + ε σ(ξ_t) F(x_t)
//! ```
//!
//! and extraction of the slow critical coordinates `ž_t = e^{-Bt/ε²} z(t/ε²)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::ParsedFunctional;
use crate::history::{rk4_step, HistoryBuffer, InitialHistory};
use crate::noise::{MarkovNoiseModel, NoiseError, NoisePath};
use crate::rng::{stream, Purpose};
use crate::spectral::{AdjointBasis, DelayOperator, SpectralError, WindowProjector};
use crate::stats::EnsembleResult;

pub const ESCAPE_GUARD: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("horizon T must be positive, got {0}")]
    Horizon(f64),
    #[error("step {dt} exceeds r/50 = {limit}")]
    StepTooLarge { dt: f64, limit: f64 },
    #[error("functional tap {theta} lies inside the first step (|θ| < dt = {dt})")]
    TapInsideStep { theta: f64, dt: f64 },
    #[error("record stride must be at least 1")]
    Stride,
    #[error("functional max delay {got} differs from the operator's {expected}")]
    MaxDelayMismatch { got: f64, expected: f64 },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub eps: f64,
    /// Step in unscaled time.
    pub dt: f64,
    /// Horizon in rescaled time; the equation runs to `T/ε²`.
    pub horizon: f64,
    /// Record every `record_stride` steps (the last step is always recorded).
    pub record_stride: usize,
}

/// Linear part, perturbation functionals and noise.
#[derive(Debug, Clone)]
pub struct PerturbedDde {
    pub operator: DelayOperator,
    pub f: ParsedFunctional,
    pub g: ParsedFunctional,
    pub gq: ParsedFunctional,
    pub noise: MarkovNoiseModel,
}

impl PerturbedDde {
    pub fn max_delay(&self) -> f64 {
        self.operator.max_delay()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    /// Rescaled sample times `t = ε² τ`.
    pub times: Vec<f64>,
    pub z: Vec<[f64; 2]>,
    pub z_rot: Vec<[f64; 2]>,
    /// `‖y‖∞` over the window nodes.
    pub ynorm: Vec<f64>,
    /// Rescaled time at which `|x|` exceeded the guard.
    pub escaped_at: Option<f64>,
    /// Final history window `x(τ_N + θ)` on the grid, oldest first.
    pub terminal: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn final_rotated(&self) -> Option<[f64; 2]> {
        if self.escaped_at.is_some() {
            None
        } else {
            self.z_rot.last().copied()
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,z1,z2,zc1,zc2,ynorm\n");
        for i in 0..self.times.len() {
            out.push_str(&format!(
                "{:?},{:?},{:?},{:?},{:?},{:?}\n",
                self.times[i],
                self.z[i][0],
                self.z[i][1],
                self.z_rot[i][0],
                self.z_rot[i][1],
                self.ynorm[i]
            ));
        }
        out
    }
}

/// `ž = e^{-Bτ} z` with `e^{-Bτ} = [[cos ωτ, -sin ωτ], [sin ωτ, cos ωτ]]`.
pub fn rotate_back(z: [f64; 2], omega: f64, tau: f64) -> [f64; 2] {
    let (s, c) = (omega * tau).sin_cos();
    [c * z[0] - s * z[1], s * z[0] + c * z[1]]
}

/// Rotating-frame coordinates for `z` sampled at rescaled times `t` (unscaled `t/ε²`).
pub fn extract_rotating(times: &[f64], z: &[[f64; 2]], omega: f64, eps: f64) -> Vec<[f64; 2]> {
    times
        .iter()
        .zip(z)
        .map(|(t, v)| rotate_back(*v, omega, t / (eps * eps)))
        .collect()
}

/// Where a tap `θ` sits relative to the stage time, in cells.
#[derive(Debug, Clone, Copy)]
enum Tap {
    Current,
    Past(f64),
}

/// Everything a single path needs, validated once per ensemble.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    model: &'a PerturbedDde,
    cfg: SimConfig,
    omega: f64,
    projector: WindowProjector,
    taps: Vec<Tap>,
    /// Indices into `taps` for L0's delays, F, G and G_q.
    op_idx: Vec<usize>,
    f_idx: Vec<usize>,
    g_idx: Vec<usize>,
    gq_idx: Vec<usize>,
    steps: usize,
    window: usize,
}

impl<'a> Simulator<'a> {
    pub fn new(
        model: &'a PerturbedDde,
        basis: &AdjointBasis,
        cfg: SimConfig,
    ) -> Result<Self, SimError> {
        if !(cfg.eps > 0.0 && cfg.eps.is_finite()) {
            return Err(SimError::Epsilon(cfg.eps));
        }
        if !(cfg.horizon > 0.0 && cfg.horizon.is_finite()) {
            return Err(SimError::Horizon(cfg.horizon));
        }
        if cfg.record_stride == 0 {
            return Err(SimError::Stride);
        }
        let r = model.max_delay();
        if cfg.dt > r / 50.0 * (1.0 + 1e-12) {
            return Err(SimError::StepTooLarge {
                dt: cfg.dt,
                limit: r / 50.0,
            });
        }
        for func in [&model.f, &model.g, &model.gq] {
            if !func.is_zero() && (func.max_delay() - r).abs() > 1e-12 {
                return Err(SimError::MaxDelayMismatch {
                    got: func.max_delay(),
                    expected: r,
                });
            }
        }
        model.operator.grid_offsets(cfg.dt)?;
        let projector = WindowProjector::new(&model.operator, basis, cfg.dt)?;

        let mut thetas: Vec<f64> = vec![0.0];
        let mut index = |theta: f64| -> Result<usize, SimError> {
            if theta != 0.0 && theta > -cfg.dt * (1.0 - 1e-9) {
                return Err(SimError::TapInsideStep { theta, dt: cfg.dt });
            }
            if let Some(i) = thetas.iter().position(|t| (t - theta).abs() <= 1e-12) {
                return Ok(i);
            }
            thetas.push(theta);
            Ok(thetas.len() - 1)
        };
        let op_idx = model
            .operator
            .delays()
            .iter()
            .map(|p| index(-p.delay))
            .collect::<Result<Vec<_>, _>>()?;
        let mut idx_of = |func: &ParsedFunctional| -> Result<Vec<usize>, SimError> {
            func.taps().iter().map(|&t| index(t)).collect()
        };
        let f_idx = idx_of(&model.f)?;
        let g_idx = idx_of(&model.g)?;
        let gq_idx = idx_of(&model.gq)?;
        let taps = thetas
            .iter()
            .map(|&theta| {
                if theta == 0.0 {
                    Tap::Current
                } else {
                    let cells = theta / cfg.dt;
                    let rounded = cells.round();
                    Tap::Past(if (cells - rounded).abs() < 1e-9 {
                        rounded
                    } else {
                        cells
                    })
                }
            })
            .collect();
        let steps = (cfg.horizon / (cfg.eps * cfg.eps * cfg.dt))
            .round()
            .max(1.0) as usize;
        let window = projector.steps();
        Ok(Self {
            model,
            cfg,
            omega: basis.omega,
            projector,
            taps,
            op_idx,
            f_idx,
            g_idx,
            gq_idx,
            steps,
            window,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Unscaled horizon `N·dt`.
    pub fn t_max(&self) -> f64 {
        self.steps as f64 * self.cfg.dt
    }

    /// Runs one path; `noise` must cover `[0, t_max]`.
    pub fn run(&self, initial: &InitialHistory, noise: &NoisePath) -> TrajectoryRecord {
        let dt = self.cfg.dt;
        let eps = self.cfg.eps;
        let eps2 = eps * eps;
        let model = self.model;
        let c0 = model.operator.instantaneous();
        let weights: Vec<f64> = model.operator.delays().iter().map(|p| p.weight).collect();
        let sigma = model.noise.sigma();
        let (use_f, use_g, use_gq) = (!model.f.is_zero(), !model.g.is_zero(), !model.gq.is_zero());

        let mut buf = HistoryBuffer::new(initial.clone(), dt, self.window + 2);
        let mut values = vec![0.0; self.taps.len()];
        let mut scratch = vec![
            0.0;
            self.f_idx
                .len()
                .max(self.g_idx.len())
                .max(self.gq_idx.len())
        ];
        let mut breaks = Vec::new();
        let mut states = Vec::new();
        let mut cursor = noise.cursor();

        let mut rec = TrajectoryRecord {
            times: Vec::new(),
            z: Vec::new(),
            z_rot: Vec::new(),
            ynorm: Vec::new(),
            escaped_at: None,
            terminal: Vec::new(),
        };
        self.record(&buf, &mut rec);

        for step in 0..self.steps {
            let n = buf.current_index() as i64;
            let a = step as f64 * dt;
            cursor.advance(a, a + dt, &mut breaks, &mut states);
            let taps = &self.taps;
            rk4_step(&mut buf, &breaks, |b, frac, x, piece| {
                for (v, tap) in values.iter_mut().zip(taps) {
                    *v = match *tap {
                        Tap::Current => x,
                        Tap::Past(cells) => {
                            let pos = frac + cells;
                            let j = pos.ceil() - 1.0;
                            b.cell_value(n + j as i64, pos - j)
                        }
                    };
                }
                let mut rhs = c0 * x;
                for (w, &i) in weights.iter().zip(&self.op_idx) {
                    rhs += w * values[i];
                }
                let mut eval = |func: &ParsedFunctional, idx: &[usize]| {
                    for (s, &i) in scratch.iter_mut().zip(idx) {
                        *s = values[i];
                    }
                    func.eval_taps(&scratch[..idx.len()])
                };
                if use_gq {
                    rhs += eps * eval(&model.gq, &self.gq_idx);
                }
                if use_g {
                    rhs += eps2 * eval(&model.g, &self.g_idx);
                }
                let s = sigma[states[piece]];
                if use_f && s != 0.0 {
                    rhs += eps * s * eval(&model.f, &self.f_idx);
                }
                rhs
            });
            let x = buf.current_value();
            let done = step + 1 == self.steps;
            if !x.is_finite() || x.abs() > ESCAPE_GUARD {
                rec.escaped_at = Some(buf.current_time() * eps2);
                self.record(&buf, &mut rec);
                break;
            }
            if done || (step + 1) % self.cfg.record_stride == 0 {
                self.record(&buf, &mut rec);
            }
        }
        rec.terminal = buf.window(self.window);
        rec
    }

    fn record(&self, buf: &HistoryBuffer, rec: &mut TrajectoryRecord) {
        let window = buf.window(self.window);
        let z = self.projector.project(&window);
        let tau = buf.current_time();
        rec.times.push(tau * self.cfg.eps * self.cfg.eps);
        rec.z.push(z);
        rec.z_rot.push(rotate_back(z, self.omega, tau));
        rec.ynorm.push(self.projector.stable_norm(&window, z));
    }

    /// Samples the noise from stream `index` of `seed` and runs one path.
    pub fn run_seeded(
        &self,
        initial: &InitialHistory,
        seed: u64,
        index: u64,
    ) -> Result<TrajectoryRecord, SimError> {
        let noise = if self.model.noise.states() == 1 {
            NoisePath::constant(0, self.t_max())
        } else {
            self.model
                .noise
                .sample_path(self.t_max(), &mut stream(seed, Purpose::Noise, index))?
        };
        Ok(self.run(initial, &noise))
    }
}

/// Runs `n_paths` independent paths in parallel; path `i` uses noise stream `i`.
pub fn run_ensemble(
    sim: &Simulator<'_>,
    initial: &InitialHistory,
    n_paths: usize,
    seed: u64,
) -> Result<EnsembleResult, SimError> {
    let finals = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| sim.run_seeded(initial, seed, i).map(|r| r.final_rotated()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EnsembleResult { finals })
}
