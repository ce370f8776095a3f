//! Averaged drift and diffusion coefficients of the limiting diffusion for `ž`.
//!
//! With `u(t) = e^{-tB}Ψ0` and `F(t) = F(Φe^{tB}ž)` every coefficient is an
//! average over one period `T_p = 2π/ω_c`:
//!
//! ```text
//! a_ij    = ⟨ ∫₀^∞ R(s) F(τ) F(τ+s) u_i(τ) u_j(τ+s) ds ⟩_τ
//! b^{F,P} = ⟨ ∫₀^∞ R(s) F(τ) DF(τ+s)[Φ(·+s)Ψ0] u(τ+s) ds ⟩_τ
//! b^{F,Q} = ⟨ ∫₀^∞ R(s) F(τ) DF(τ+s)[w_s] u(τ+s) ds ⟩_τ
//! b^G     = ⟨ G(τ) u(τ) ⟩_τ
//! b^{Gq,P} = ⟨ ∫_τ^{T_p} Gq(τ) DGq(v)[Φ(·+v-τ)Ψ0] u(v) dv ⟩_τ
//! b^{Gq,Q} = ⟨ ∫₀^∞ Gq(τ) DGq(τ+s)[w_s] u(τ+s) ds ⟩_τ
//! ```
//!
//! The τ-average uses the periodic trapezoid rule, which is exact for the
//! trigonometric polynomials produced by polynomial functionals. The
//! s-integrals use composite Simpson on pieces whose ends are the points where
//! a tap of `w_s` crosses a kink of the fundamental solution; the jump at
//! `s + θ = 0` is evaluated one-sidedly on each neighbouring piece.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::ParsedFunctional;
use crate::noise::MarkovNoiseModel;
use crate::quad::simpson_weights;
use crate::spectral::{FundamentalSolution, Side, SpectralData};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AveragedError {
    #[error("invalid quadrature configuration: {0}")]
    Config(String),
    #[error("{part}: tail bound {bound:e} beyond s_max exceeds tolerance {tol:e}; increase s_max")]
    TailBound {
        part: &'static str,
        bound: f64,
        tol: f64,
    },
    #[error("fundamental solution covers [0, {available}] but s_max + r = {needed}")]
    TableHorizon { needed: f64, available: f64 },
    #[error("non-finite point {0:?}")]
    NonFinite([f64; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureConfig {
    /// Outer nodes per period.
    pub n_tau: usize,
    pub s_max: f64,
    /// Upper bound on the inner Simpson step.
    pub ds: f64,
    pub tail_tol: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            n_tau: 64,
            s_max: 16.0,
            ds: 0.01,
            tail_tol: 1e-9,
        }
    }
}

impl QuadratureConfig {
    pub fn refined(&self) -> Self {
        Self {
            n_tau: 2 * self.n_tau,
            ds: self.ds / 2.0,
            ..*self
        }
    }
}

/// All coefficient parts at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Coefficients {
    pub a: [[f64; 2]; 2],
    pub b_fp: [f64; 2],
    pub b_fq: [f64; 2],
    pub b_g: [f64; 2],
    pub b_gq_p: [f64; 2],
    pub b_gq_q: [f64; 2],
}

impl Coefficients {
    pub fn b_gq(&self) -> [f64; 2] {
        add(self.b_gq_p, self.b_gq_q)
    }

    /// `b = b^{F,P} + b^{F,Q} + b^G + b^{Gq}`.
    pub fn drift(&self) -> [f64; 2] {
        add(add(self.b_fp, self.b_fq), add(self.b_g, self.b_gq()))
    }

    /// `½(a + aᵀ)`.
    pub fn a_sym(&self) -> [[f64; 2]; 2] {
        let off = 0.5 * (self.a[0][1] + self.a[1][0]);
        [[self.a[0][0], off], [off, self.a[1][1]]]
    }

    /// Flattened in CSV column order.
    pub fn to_row(&self) -> [f64; 12] {
        let bgq = self.b_gq();
        [
            self.a[0][0],
            self.a[0][1],
            self.a[1][0],
            self.a[1][1],
            self.b_fp[0],
            self.b_fp[1],
            self.b_fq[0],
            self.b_fq[1],
            self.b_g[0],
            self.b_g[1],
            bgq[0],
            bgq[1],
        ]
    }

    fn from_row(r: &[f64; 14]) -> Self {
        Self {
            a: [[r[0], r[1]], [r[2], r[3]]],
            b_fp: [r[4], r[5]],
            b_fq: [r[6], r[7]],
            b_g: [r[8], r[9]],
            b_gq_p: [r[10], r[11]],
            b_gq_q: [r[12], r[13]],
        }
    }

    fn to_full_row(self) -> [f64; 14] {
        [
            self.a[0][0],
            self.a[0][1],
            self.a[1][0],
            self.a[1][1],
            self.b_fp[0],
            self.b_fp[1],
            self.b_fq[0],
            self.b_fq[1],
            self.b_g[0],
            self.b_g[1],
            self.b_gq_p[0],
            self.b_gq_p[1],
            self.b_gq_q[0],
            self.b_gq_q[1],
        ]
    }

    /// `R c(ž) Rᵀ` for `a` and `R c(ž)` for the drifts.
    pub fn rotated(&self, r: [[f64; 2]; 2]) -> Self {
        let mv = |v: [f64; 2]| mat_vec(r, v);
        let ra = mat_mul(mat_mul(r, self.a), transpose(r));
        Self {
            a: ra,
            b_fp: mv(self.b_fp),
            b_fq: mv(self.b_fq),
            b_g: mv(self.b_g),
            b_gq_p: mv(self.b_gq_p),
            b_gq_q: mv(self.b_gq_q),
        }
    }

    /// Largest absolute difference over all entries.
    pub fn max_diff(&self, other: &Self) -> f64 {
        self.to_full_row()
            .iter()
            .zip(other.to_full_row())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub const COEFF_CSV_HEADER: &str = "zc1,zc2,a11,a12,a21,a22,bFP1,bFP2,bFQ1,bFQ2,bG1,bG2,bGq1,bGq2";

fn add(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

fn mat_vec(m: [[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
    ]
}

fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn transpose(a: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

/// `e^{θB} = [[cos ωθ, sin ωθ], [-sin ωθ, cos ωθ]]` written in terms of `φ = ωθ`.
pub fn rotation(phi: f64) -> [[f64; 2]; 2] {
    let (s, c) = phi.sin_cos();
    [[c, s], [-s, c]]
}

/// Eigenvalues of a symmetric 2×2 matrix, ascending.
pub fn sym_eigenvalues(m: [[f64; 2]; 2]) -> [f64; 2] {
    let tr = 0.5 * (m[0][0] + m[1][1]);
    let d = (0.5 * (m[0][0] - m[1][1])).hypot(m[0][1]);
    [tr - d, tr + d]
}

#[derive(Debug, Clone, Copy)]
struct InnerNode {
    s: f64,
    weight: f64,
    side: Side,
}

/// Composite Simpson nodes on `[0, s_max]` with pieces split at `breaks`.
fn inner_nodes(breaks: &[f64], s_max: f64, ds: f64) -> Vec<InnerNode> {
    let mut ends: Vec<f64> = breaks
        .iter()
        .copied()
        .filter(|b| *b > 1e-12 && *b < s_max - 1e-12)
        .collect();
    ends.push(0.0);
    ends.push(s_max);
    ends.sort_by(f64::total_cmp);
    ends.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    let mut nodes = Vec::new();
    for piece in ends.windows(2) {
        let (a, b) = (piece[0], piece[1]);
        let mut n = ((b - a) / ds).ceil() as usize;
        if n % 2 == 1 {
            n += 1;
        }
        let n = n.max(2);
        let h = (b - a) / n as f64;
        for (i, w) in simpson_weights(n, h).into_iter().enumerate() {
            let side = if i == n { Side::Left } else { Side::Right };
            let s = if i == n { b } else { a + i as f64 * h };
            nodes.push(InnerNode { s, weight: w, side });
        }
    }
    nodes
}

/// A functional restricted to the critical orbit `t ↦ Φe^{tB}ž`.
#[derive(Debug, Clone)]
struct OrbitFunctional {
    func: ParsedFunctional,
    /// `(cos ωθ_k, sin ωθ_k)` per tap.
    taps: Vec<(f64, f64)>,
}

impl OrbitFunctional {
    fn new(func: &ParsedFunctional, omega: f64) -> Self {
        let taps = func
            .taps()
            .iter()
            .map(|&th| ((omega * th).cos(), (omega * th).sin()))
            .collect();
        Self {
            func: func.clone(),
            taps,
        }
    }

    fn n_taps(&self) -> usize {
        self.taps.len()
    }

    fn is_zero(&self) -> bool {
        self.func.is_zero()
    }

    /// Tap values of `Φe^{tB}ž`, `x_k = ž₁ cos ω(θ_k+t) + ž₂ sin ω(θ_k+t)`, given
    /// `(c, s) = (cos ωt, sin ωt)`.
    #[inline]
    fn tap_values(&self, z: [f64; 2], c: f64, s: f64, out: &mut [f64]) {
        for (o, &(ck, sk)) in out.iter_mut().zip(&self.taps) {
            let cos = c * ck - s * sk;
            let sin = s * ck + c * sk;
            *o = z[0] * cos + z[1] * sin;
        }
    }

    #[inline]
    fn value(&self, z: [f64; 2], c: f64, s: f64, buf: &mut [f64]) -> f64 {
        self.tap_values(z, c, s, buf);
        self.func.eval_taps(buf)
    }

    /// Fills `grad` and returns the value.
    #[inline]
    fn value_grad(&self, z: [f64; 2], c: f64, s: f64, buf: &mut [f64], grad: &mut [f64]) -> f64 {
        self.tap_values(z, c, s, buf);
        self.func.gradient_taps(buf, grad);
        self.func.eval_taps(buf)
    }
}

/// Precomputed quadrature tables for one model.
#[derive(Debug, Clone)]
pub struct AveragedModel {
    omega: f64,
    psi0: [f64; 2],
    period: f64,
    cfg: QuadratureConfig,
    f: OrbitFunctional,
    g: OrbitFunctional,
    gq: OrbitFunctional,
    noise_silent: bool,
    /// `(cos, sin)` of `ωτ_m`.
    tau_trig: Vec<(f64, f64)>,
    nodes: Vec<InnerNode>,
    /// `(cos, sin)` of `ω s_j`.
    s_trig: Vec<(f64, f64)>,
    r_vals: Vec<f64>,
    /// `Φ(θ_k + s_j)Ψ0` for the taps of F.
    dir_p: Vec<Vec<f64>>,
    /// `w_{s_j}(θ_k)` for the taps of F and of G_q.
    dir_q_f: Vec<Vec<f64>>,
    dir_q_gq: Vec<Vec<f64>>,
    /// `Φ(θ_k + d·T_p/N)Ψ0` for the taps of G_q, `d = 0..N`.
    dir_gq_p: Vec<Vec<f64>>,
    /// Weights for `∫_{τ_m}^{T_p} h(v) dv = Σ_l kernel[m][l] h(τ_l)`.
    gq_kernel: Vec<Vec<f64>>,
    noise_gap: f64,
    noise_envelope: f64,
    kappa: f64,
    k_hat: f64,
}

impl AveragedModel {
    pub fn new(
        spectral: &SpectralData,
        noise: &MarkovNoiseModel,
        f: &ParsedFunctional,
        g: &ParsedFunctional,
        gq: &ParsedFunctional,
        cfg: QuadratureConfig,
    ) -> Result<Self, AveragedError> {
        let r = spectral.operator.max_delay();
        let omega = spectral.omega();
        let psi0 = spectral.psi0();
        let period = 2.0 * PI / omega;
        let noise_silent = noise.is_silent();
        let noise_gap = if noise_silent {
            f64::INFINITY
        } else {
            noise.spectral_gap()
        };
        let kappa = spectral.gap.kappa;
        let k_hat = spectral.gap.prefactor;
        if cfg.n_tau < 64 || cfg.n_tau % 2 == 1 {
            return Err(AveragedError::Config(format!(
                "n_tau must be even and at least 64, got {}",
                cfg.n_tau
            )));
        }
        if !(cfg.s_max >= r) {
            return Err(AveragedError::Config(format!(
                "s_max = {} is shorter than r = {r}",
                cfg.s_max
            )));
        }
        let ds_limit = if noise_silent {
            0.1 / kappa
        } else {
            (1.0 / (2.0 * noise_gap)).min(1.0 / kappa) / 10.0
        };
        if !(cfg.ds > 0.0 && cfg.ds <= ds_limit * (1.0 + 1e-12)) {
            return Err(AveragedError::Config(format!(
                "ds = {} must lie in (0, {ds_limit}]",
                cfg.ds
            )));
        }
        if !(cfg.tail_tol > 0.0) {
            return Err(AveragedError::Config("tail_tol must be positive".into()));
        }
        let fundamental: &FundamentalSolution = spectral.table.fundamental();
        if fundamental.t_max() + 1e-9 < cfg.s_max {
            return Err(AveragedError::TableHorizon {
                needed: cfg.s_max,
                available: fundamental.t_max(),
            });
        }

        let f_orb = OrbitFunctional::new(f, omega);
        let g_orb = OrbitFunctional::new(g, omega);
        let gq_orb = OrbitFunctional::new(gq, omega);

        // Kinks of x(s + θ_k) sit where s + θ_k is a sum of at most three delays.
        let delays: Vec<f64> = spectral.operator.delays().iter().map(|p| p.delay).collect();
        let mut sums = vec![0.0];
        for _ in 0..3 {
            let mut next = sums.clone();
            for s in &sums {
                for d in &delays {
                    next.push(s + d);
                }
            }
            next.sort_by(f64::total_cmp);
            next.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
            sums = next;
        }
        let mut breaks = Vec::new();
        for th in f.taps().iter().chain(gq.taps()) {
            for s in &sums {
                breaks.push(s - th);
            }
        }
        let nodes = inner_nodes(&breaks, cfg.s_max, cfg.ds);
        let s_trig = nodes
            .iter()
            .map(|n| ((omega * n.s).cos(), (omega * n.s).sin()))
            .collect();
        let r_vals = if noise_silent {
            vec![0.0; nodes.len()]
        } else {
            nodes.iter().map(|n| noise.autocorrelation(n.s)).collect()
        };
        let phi_psi = |t: f64| psi0[0] * (omega * t).cos() + psi0[1] * (omega * t).sin();
        let w =
            |s: f64, th: f64, side: Side| fundamental.value_side(s + th, side) - phi_psi(s + th);
        let dir_p = nodes
            .iter()
            .map(|n| f.taps().iter().map(|&th| phi_psi(th + n.s)).collect())
            .collect();
        let dir_q_f = nodes
            .iter()
            .map(|n| f.taps().iter().map(|&th| w(n.s, th, n.side)).collect())
            .collect();
        let dir_q_gq = nodes
            .iter()
            .map(|n| gq.taps().iter().map(|&th| w(n.s, th, n.side)).collect())
            .collect();

        let n = cfg.n_tau;
        let h_tau = period / n as f64;
        let tau_trig = (0..n)
            .map(|m| {
                let a = 2.0 * PI * m as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .collect();
        let dir_gq_p = (0..n)
            .map(|d| {
                gq.taps()
                    .iter()
                    .map(|&th| phi_psi(th + d as f64 * h_tau))
                    .collect()
            })
            .collect();
        let gq_kernel = if gq.is_zero() {
            Vec::new()
        } else {
            tail_kernel(n, period)
        };

        let noise_envelope = if noise_silent {
            0.0
        } else {
            noise.variance() * noise.envelope_ratio(cfg.s_max, 50)
        };
        Ok(Self {
            omega,
            psi0,
            period,
            cfg,
            f: f_orb,
            g: g_orb,
            gq: gq_orb,
            noise_silent,
            tau_trig,
            nodes,
            s_trig,
            r_vals,
            dir_p,
            dir_q_f,
            dir_q_gq,
            dir_gq_p,
            gq_kernel,
            noise_gap,
            noise_envelope,
            kappa,
            k_hat,
        })
    }

    pub fn config(&self) -> &QuadratureConfig {
        &self.cfg
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn psi0(&self) -> [f64; 2] {
        self.psi0
    }

    pub fn inner_node_count(&self) -> usize {
        self.nodes.len()
    }

    /// `u(τ_m) = e^{-τ_m B}Ψ0`.
    #[inline]
    fn u(&self, c: f64, s: f64) -> [f64; 2] {
        [
            c * self.psi0[0] - s * self.psi0[1],
            s * self.psi0[0] + c * self.psi0[1],
        ]
    }

    /// `(max |F|, max Σ|∂F|)` over a fine sample of the orbit.
    fn orbit_bounds(&self, func: &OrbitFunctional, z: [f64; 2]) -> (f64, f64) {
        let m = 4 * self.cfg.n_tau;
        let mut buf = vec![0.0; func.n_taps()];
        let mut grad = vec![0.0; func.n_taps()];
        let (mut cf, mut cd) = (0.0f64, 0.0f64);
        for i in 0..m {
            let a = 2.0 * PI * i as f64 / m as f64;
            let v = func.value_grad(z, a.cos(), a.sin(), &mut buf, &mut grad);
            cf = cf.max(v.abs());
            cd = cd.max(grad.iter().map(|g| g.abs()).sum());
        }
        // The sampled maximum of a trigonometric polynomial can undershoot slightly.
        (1.05 * cf, 1.05 * cd)
    }

    fn check_tail(&self, part: &'static str, bound: f64) -> Result<(), AveragedError> {
        if bound > self.cfg.tail_tol {
            Err(AveragedError::TailBound {
                part,
                bound,
                tol: self.cfg.tail_tol,
            })
        } else {
            Ok(())
        }
    }

    /// Tail bounds of `(a, b^{F,P}, b^{F,Q}, b^{Gq,Q})` beyond `s_max` at `ž`.
    pub fn tail_bounds(&self, z: [f64; 2]) -> [f64; 4] {
        let psi = self.psi0[0].hypot(self.psi0[1]);
        let s = self.cfg.s_max;
        let mut out = [0.0; 4];
        if !self.noise_silent && !self.f.is_zero() {
            let (cf, cd) = self.orbit_bounds(&self.f, z);
            let g = self.noise_gap;
            let e = self.noise_envelope * (-g * s).exp() / g;
            out[0] = e * cf * cf * psi * psi;
            out[1] = e * cf * cd * psi * psi;
            let gk = g + self.kappa;
            out[2] = self.noise_envelope * cf * cd * self.k_hat * psi * (-gk * s).exp() / gk;
        }
        if !self.gq.is_zero() {
            let (cf, cd) = self.orbit_bounds(&self.gq, z);
            out[3] = cf * cd * self.k_hat * psi * (-self.kappa * s).exp() / self.kappa;
        }
        out
    }

    /// Every coefficient part at `ž`.
    pub fn coefficients(&self, z: [f64; 2]) -> Result<Coefficients, AveragedError> {
        if !(z[0].is_finite() && z[1].is_finite()) {
            return Err(AveragedError::NonFinite(z));
        }
        let tails = self.tail_bounds(z);
        for (part, bound) in ["a", "b^{F,P}", "b^{F,Q}", "b^{Gq,Q}"]
            .into_iter()
            .zip(tails)
        {
            self.check_tail(part, bound)?;
        }
        let mut c = Coefficients::default();
        if !self.noise_silent && !self.f.is_zero() {
            let (a, bp, bq) = self.noise_parts(z);
            c.a = a;
            c.b_fp = bp;
            c.b_fq = bq;
        }
        c.b_g = self.tau_average(&self.g, z);
        if !self.gq.is_zero() {
            c.b_gq_p = self.gq_p(z);
            c.b_gq_q = self.gq_q(z);
        }
        Ok(c)
    }

    pub fn diffusion_a(&self, z: [f64; 2]) -> Result<[[f64; 2]; 2], AveragedError> {
        Ok(self.coefficients(z)?.a)
    }

    pub fn drift_b_fp(&self, z: [f64; 2]) -> Result<[f64; 2], AveragedError> {
        Ok(self.coefficients(z)?.b_fp)
    }

    pub fn drift_b_fq(&self, z: [f64; 2]) -> Result<[f64; 2], AveragedError> {
        Ok(self.coefficients(z)?.b_fq)
    }

    pub fn drift_b_g(&self, z: [f64; 2]) -> [f64; 2] {
        self.tau_average(&self.g, z)
    }

    pub fn drift_b_gq(&self, z: [f64; 2]) -> Result<[f64; 2], AveragedError> {
        Ok(self.coefficients(z)?.b_gq())
    }

    pub fn full_drift(&self, z: [f64; 2]) -> Result<[f64; 2], AveragedError> {
        Ok(self.coefficients(z)?.drift())
    }

    /// `⟨H(Φe^{τB}ž) u(τ)⟩_τ`.
    fn tau_average(&self, func: &OrbitFunctional, z: [f64; 2]) -> [f64; 2] {
        if func.is_zero() {
            return [0.0; 2];
        }
        let mut buf = vec![0.0; func.n_taps()];
        let mut acc = [0.0; 2];
        for &(c, s) in &self.tau_trig {
            let v = func.value(z, c, s, &mut buf);
            let u = self.u(c, s);
            acc[0] += v * u[0];
            acc[1] += v * u[1];
        }
        let n = self.tau_trig.len() as f64;
        [acc[0] / n, acc[1] / n]
    }

    /// `a`, `b^{F,P}`, `b^{F,Q}` in one sweep over the `(τ, s)` grid.
    fn noise_parts(&self, z: [f64; 2]) -> ([[f64; 2]; 2], [f64; 2], [f64; 2]) {
        let k = self.f.n_taps();
        let per_tau: Vec<[f64; 8]> = self
            .tau_trig
            .iter()
            .map(|&(cm, sm)| {
                let mut buf = vec![0.0; k];
                let mut grad = vec![0.0; k];
                let mut acc = [0.0; 8];
                let f_tau = self.f.value(z, cm, sm, &mut buf);
                if f_tau == 0.0 {
                    return acc;
                }
                let u_tau = self.u(cm, sm);
                for (j, node) in self.nodes.iter().enumerate() {
                    let wr = node.weight * self.r_vals[j];
                    if wr == 0.0 {
                        continue;
                    }
                    let (cj, sj) = self.s_trig[j];
                    let c = cm * cj - sm * sj;
                    let s = sm * cj + cm * sj;
                    let f_t = self.f.value_grad(z, c, s, &mut buf, &mut grad);
                    let ut = self.u(c, s);
                    let dp: f64 = grad.iter().zip(&self.dir_p[j]).map(|(g, d)| g * d).sum();
                    let dq: f64 = grad.iter().zip(&self.dir_q_f[j]).map(|(g, d)| g * d).sum();
                    let wa = wr * f_tau * f_t;
                    acc[0] += wa * u_tau[0] * ut[0];
                    acc[1] += wa * u_tau[0] * ut[1];
                    acc[2] += wa * u_tau[1] * ut[0];
                    acc[3] += wa * u_tau[1] * ut[1];
                    let wp = wr * f_tau * dp;
                    acc[4] += wp * ut[0];
                    acc[5] += wp * ut[1];
                    let wq = wr * f_tau * dq;
                    acc[6] += wq * ut[0];
                    acc[7] += wq * ut[1];
                }
                acc
            })
            .collect();
        let n = self.tau_trig.len() as f64;
        let mut t = [0.0; 8];
        for acc in &per_tau {
            for (ti, ai) in t.iter_mut().zip(acc) {
                *ti += ai;
            }
        }
        t.iter_mut().for_each(|v| *v /= n);
        ([[t[0], t[1]], [t[2], t[3]]], [t[4], t[5]], [t[6], t[7]])
    }

    fn gq_q(&self, z: [f64; 2]) -> [f64; 2] {
        let k = self.gq.n_taps();
        let mut buf = vec![0.0; k];
        let mut grad = vec![0.0; k];
        let mut acc = [0.0; 2];
        for &(cm, sm) in &self.tau_trig {
            let g_tau = self.gq.value(z, cm, sm, &mut buf);
            if g_tau == 0.0 {
                continue;
            }
            for (j, node) in self.nodes.iter().enumerate() {
                let (cj, sj) = self.s_trig[j];
                let c = cm * cj - sm * sj;
                let s = sm * cj + cm * sj;
                self.gq.value_grad(z, c, s, &mut buf, &mut grad);
                let dq: f64 = grad.iter().zip(&self.dir_q_gq[j]).map(|(g, d)| g * d).sum();
                let ut = self.u(c, s);
                let w = node.weight * g_tau * dq;
                acc[0] += w * ut[0];
                acc[1] += w * ut[1];
            }
        }
        let n = self.tau_trig.len() as f64;
        [acc[0] / n, acc[1] / n]
    }

    fn gq_p(&self, z: [f64; 2]) -> [f64; 2] {
        let n = self.tau_trig.len();
        let k = self.gq.n_taps();
        let mut buf = vec![0.0; k];
        let mut vals = vec![0.0; n];
        let mut grads = vec![vec![0.0; k]; n];
        for (l, &(c, s)) in self.tau_trig.iter().enumerate() {
            vals[l] = self.gq.value_grad(z, c, s, &mut buf, &mut grads[l]);
        }
        let us: Vec<[f64; 2]> = self.tau_trig.iter().map(|&(c, s)| self.u(c, s)).collect();
        let mut acc = [0.0; 2];
        for m in 0..n {
            if vals[m] == 0.0 {
                continue;
            }
            let mut inner = [0.0; 2];
            for l in 0..n {
                let dir = &self.dir_gq_p[(l + n - m) % n];
                let d: f64 = grads[l].iter().zip(dir).map(|(g, d)| g * d).sum();
                let w = self.gq_kernel[m][l] * d;
                inner[0] += w * us[l][0];
                inner[1] += w * us[l][1];
            }
            acc[0] += vals[m] * inner[0];
            acc[1] += vals[m] * inner[1];
        }
        [acc[0] / n as f64, acc[1] / n as f64]
    }

    /// Max residual `|⟨Gq(Φe^{τB}ž) u(τ)⟩_τ|` over `points`.
    pub fn centering_residual(&self, points: &[[f64; 2]]) -> f64 {
        points
            .iter()
            .map(|&z| {
                let v = self.tau_average(&self.gq, z);
                v[0].hypot(v[1])
            })
            .fold(0.0, f64::max)
    }
}

/// Weights `K[m][l]` with `∫_{τ_m}^{T} h = Σ_l K[m][l] h(τ_l)` exactly for
/// trigonometric polynomials `h` of degree below `n/2` on the grid `τ_l = lT/n`.
fn tail_kernel(n: usize, period: f64) -> Vec<Vec<f64>> {
    let omega = 2.0 * PI / period;
    let a = 2.0 * PI / n as f64;
    let inv = 1.0 / n as f64;
    (0..n)
        .map(|m| {
            let tau = m as f64 * period * inv;
            (0..n)
                .map(|l| {
                    let mut v = (period - tau) * inv;
                    for k in 1..n / 2 {
                        let kf = k as f64;
                        v += 2.0
                            * inv
                            * (-(kf * a * l as f64).sin() - (kf * a * (m as f64 - l as f64)).sin())
                            / (kf * omega);
                    }
                    v
                })
                .collect()
        })
        .collect()
}

/// Default points for the centering check: 8 angles on circles of radius 1 and 2.
pub fn centering_points() -> Vec<[f64; 2]> {
    let mut pts = Vec::new();
    for r in [1.0, 2.0] {
        for k in 0..8 {
            let a = 2.0 * PI * k as f64 / 8.0 + 0.1;
            pts.push([r * a.cos(), r * a.sin()]);
        }
    }
    pts
}

pub const CENTERING_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteringReport {
    pub max_residual: f64,
    pub passed: bool,
}

pub fn centering_check(model: &AveragedModel, points: &[[f64; 2]]) -> CenteringReport {
    let max_residual = model.centering_residual(points);
    CenteringReport {
        max_residual,
        passed: max_residual <= CENTERING_TOL,
    }
}

/// Coefficients tabulated along the ray `(ρ, 0)` and extended to the plane by
/// rotation equivariance, `c(e^{θB}ž) = e^{θB} c(ž) (e^{θB})ᵀ`.
#[derive(Debug, Clone)]
pub struct RadialCache {
    step: f64,
    rows: Vec<[f64; 14]>,
    model: Arc<AveragedModel>,
}

impl RadialCache {
    pub fn build(model: Arc<AveragedModel>, radius: f64, step: f64) -> Result<Self, AveragedError> {
        if !(radius > 0.0 && step > 0.0) {
            return Err(AveragedError::Config(format!(
                "cache radius {radius} and step {step} must be positive"
            )));
        }
        let n = (radius / step).ceil() as usize + 2;
        let rows = (0..=n)
            .into_par_iter()
            .map(|i| {
                model
                    .coefficients([i as f64 * step, 0.0])
                    .map(|c| c.to_full_row())
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { step, rows, model })
    }

    pub fn radius(&self) -> f64 {
        (self.rows.len() - 3) as f64 * self.step
    }

    pub fn model(&self) -> &AveragedModel {
        &self.model
    }

    fn radial(&self, rho: f64) -> Coefficients {
        let last = self.rows.len() - 1;
        let pos = rho / self.step;
        let i = (pos.floor() as usize).min(last - 1);
        let start = i.saturating_sub(1).min(last - 3);
        let x = pos - start as f64;
        // Four-point Lagrange basis on nodes 0, 1, 2, 3.
        let l = [
            -(x - 1.0) * (x - 2.0) * (x - 3.0) / 6.0,
            x * (x - 2.0) * (x - 3.0) / 2.0,
            -x * (x - 1.0) * (x - 3.0) / 2.0,
            x * (x - 1.0) * (x - 2.0) / 6.0,
        ];
        let mut row = [0.0; 14];
        for (k, lk) in l.iter().enumerate() {
            for (r, v) in row.iter_mut().zip(&self.rows[start + k]) {
                *r += lk * v;
            }
        }
        Coefficients::from_row(&row)
    }

    /// Interpolated coefficients; points outside the cache are computed directly.
    pub fn eval(&self, z: [f64; 2]) -> Result<Coefficients, AveragedError> {
        let rho = z[0].hypot(z[1]);
        if rho > self.radius() {
            return self.model.coefficients(z);
        }
        if rho == 0.0 {
            return Ok(self.radial(0.0));
        }
        let c = z[0] / rho;
        let s = -z[1] / rho;
        Ok(self.radial(rho).rotated([[c, s], [-s, c]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{DelayOperator, SpectralSettings};
    use std::f64::consts::FRAC_PI_2;

    fn spectral() -> SpectralData {
        let op = DelayOperator::single_delay(1.0, -FRAC_PI_2);
        SpectralData::analyze(
            &op,
            &SpectralSettings {
                s_max: 16.0,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn parse(s: &str) -> ParsedFunctional {
        ParsedFunctional::parse(s, 1.0).unwrap()
    }

    fn model(f: &str, g: &str, gq: &str, noise: MarkovNoiseModel) -> AveragedModel {
        AveragedModel::new(
            &spectral(),
            &noise,
            &parse(f),
            &parse(g),
            &parse(gq),
            QuadratureConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn tail_kernel_integrates_trig_polynomials() {
        let period = 4.0;
        let n = 16;
        let k = tail_kernel(n, period);
        let w = 2.0 * PI / period;
        let h = |v: f64| 1.5 + (w * v).cos() - 0.5 * (3.0 * w * v).sin();
        let exact = |a: f64| {
            let prim = |v: f64| 1.5 * v + (w * v).sin() / w + 0.5 * (3.0 * w * v).cos() / (3.0 * w);
            prim(period) - prim(a)
        };
        for m in 0..n {
            let tau = m as f64 * period / n as f64;
            let approx: f64 = (0..n)
                .map(|l| k[m][l] * h(l as f64 * period / n as f64))
                .sum();
            assert!((approx - exact(tau)).abs() < 1e-12, "m = {m}");
        }
    }

    #[test]
    fn inner_nodes_integrate_piecewise_cubics() {
        let nodes = inner_nodes(&[1.0, 2.5], 4.0, 0.1);
        let f = |s: f64, side: Side| {
            let jump = if s > 1.0 || (s == 1.0 && side == Side::Right) {
                1.0
            } else {
                0.0
            };
            s * s * s + jump
        };
        let v: f64 = nodes.iter().map(|n| n.weight * f(n.s, n.side)).sum();
        assert!((v - (256.0 / 4.0 + 3.0)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn b_g_linear_closed_form() {
        let m = model("0", "eta(0)", "0", MarkovNoiseModel::silent());
        let p = m.psi0();
        for z in [[1.0, 0.0], [0.3, -1.2]] {
            let b = m.drift_b_g(z);
            let e = [
                0.5 * (p[0] * z[0] - p[1] * z[1]),
                0.5 * (p[1] * z[0] + p[0] * z[1]),
            ];
            assert!((b[0] - e[0]).abs() < 1e-12 && (b[1] - e[1]).abs() < 1e-12);
        }
        let c = model("0", "3", "0", MarkovNoiseModel::silent());
        let b = c.drift_b_g([0.7, 0.2]);
        assert!(b[0].abs() < 1e-14 && b[1].abs() < 1e-14);
        let cubic = model("0", "-(eta(0)^3)", "0", MarkovNoiseModel::silent());
        assert_eq!(cubic.drift_b_g([0.0, 0.0]), [0.0, 0.0]);
    }

    #[test]
    fn silent_noise_gives_zero_noise_parts() {
        let m = model("eta(-1)", "0", "0", MarkovNoiseModel::silent());
        let c = m.coefficients([1.0, 0.5]).unwrap();
        assert_eq!(c, Coefficients::default());
    }

    #[test]
    fn centering_examples() {
        let pts = centering_points();
        let quad = model("0", "0", "eta(0)^2", MarkovNoiseModel::silent());
        assert!(centering_check(&quad, &pts).passed);
        let konst = model("0", "0", "2", MarkovNoiseModel::silent());
        assert!(centering_check(&konst, &pts).passed);
        let lin = model("0", "0", "eta(0)", MarkovNoiseModel::silent());
        let r = centering_check(&lin, &[[1.0, 0.0]]);
        let p = lin.psi0();
        assert!(!r.passed);
        assert!((r.max_residual - 0.5 * p[0].hypot(p[1])).abs() < 1e-12);
    }

    #[test]
    fn linear_f_at_origin_vanishes() {
        let m = model(
            "eta(-1)",
            "0",
            "0",
            MarkovNoiseModel::telegraph(1.0).unwrap(),
        );
        let c = m.coefficients([0.0, 0.0]).unwrap();
        assert_eq!(c.a, [[0.0; 2]; 2]);
    }

    #[test]
    fn radial_cache_matches_direct_evaluation() {
        let m = Arc::new(model(
            "eta(-1)",
            "-(eta(0)^3)+eta(-1)",
            "0",
            MarkovNoiseModel::telegraph(1.0).unwrap(),
        ));
        let cache = RadialCache::build(m.clone(), 1.5, 0.02).unwrap();
        for z in [[0.3, 0.4], [-1.1, 0.2], [0.0, -0.9], [0.01, 0.0]] {
            let a = cache.eval(z).unwrap();
            let b = m.coefficients(z).unwrap();
            assert!(a.max_diff(&b) < 1e-6, "{z:?}: {}", a.max_diff(&b));
        }
    }
}
