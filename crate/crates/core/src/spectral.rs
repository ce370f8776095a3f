//! Spectral reduction of the linear delay equation `ẋ(t) = L0(x_t)`.
//!
//! `L0` is a finite sum of point delays plus an optional instantaneous term:
//!
//! ```text
//! L0(η) = c₀ η(0) + Σₖ cₖ η(-dₖ)
//! Δ(λ)  = λ - c₀ - Σₖ cₖ e^{-λ dₖ}
//! ```
//!
//! The critical pair `±iω_c` spans `P = span{cos(ω_c·), sin(ω_c·)}`; the
//! adjoint basis `Ψ` on `[0, r]` is obtained by inverting the Gram matrix of
//! the bilinear form
//!
//! ```text
//! ⟨φ, ψ⟩ = φ(0)ψ(0) + Σₖ cₖ ∫_{-dₖ}^0 φ(u) ψ(u + dₖ) du.
//! ```

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::history::{rk4_step, HistoryBuffer, InitialHistory};
use crate::quad::{simpson, simpson_weights};
use crate::segment::{SampledSegment, Segment};

const NEWTON_TOL: f64 = 1e-13;
const NEWTON_MAX_ITER: usize = 100;
const NEWTON_GRID: f64 = 0.25;
const ROOT_DEDUP: f64 = 1e-7;
/// Simpson subintervals per unit of delay in the bilinear form.
const BILINEAR_INTERVALS_PER_UNIT: f64 = 2000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("invalid delay operator: {0}")]
    InvalidOperator(String),
    #[error("no purely imaginary root of the characteristic equation in (0, {omega_max}]")]
    NoImaginaryRoot { omega_max: f64 },
    #[error("more than one purely imaginary root: {roots:?}")]
    MultipleImaginaryRoots { roots: Vec<f64> },
    #[error("argument-principle contour passes through a root of the characteristic function")]
    ContourHitsRoot,
    #[error("spectral assumption violated: {0}")]
    AssumptionViolated(String),
    #[error("Gram matrix is singular (det = {0:e})")]
    SingularGram(f64),
    #[error("step {dt} does not divide delay {delay}")]
    MisalignedStep { dt: f64, delay: f64 },
    #[error("stable-segment horizon {s_max} is shorter than the maximal delay {r}")]
    HorizonTooShort { s_max: f64, r: f64 },
    #[error("no non-critical root in the search box; enlarge the box")]
    NoStableRoots,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointDelay {
    pub delay: f64,
    pub weight: f64,
}

/// `L0(η) = c₀ η(0) + Σₖ cₖ η(-dₖ)` with `0 < dₖ ≤ r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayOperator {
    max_delay: f64,
    instantaneous: f64,
    delays: Vec<PointDelay>,
}

impl DelayOperator {
    pub fn new(
        max_delay: f64,
        instantaneous: f64,
        delays: Vec<PointDelay>,
    ) -> Result<Self, SpectralError> {
        if !(max_delay.is_finite() && max_delay > 0.0) {
            return Err(SpectralError::InvalidOperator(format!(
                "max delay must be positive, got {max_delay}"
            )));
        }
        if !instantaneous.is_finite() {
            return Err(SpectralError::InvalidOperator(
                "instantaneous weight must be finite".into(),
            ));
        }
        for p in &delays {
            if !(p.delay > 0.0 && p.delay <= max_delay * (1.0 + 1e-12)) {
                return Err(SpectralError::InvalidOperator(format!(
                    "delay {} outside (0, {max_delay}]",
                    p.delay
                )));
            }
            if !p.weight.is_finite() {
                return Err(SpectralError::InvalidOperator(format!(
                    "weight of delay {} is not finite",
                    p.delay
                )));
            }
        }
        Ok(Self {
            max_delay,
            instantaneous,
            delays,
        })
    }

    /// `L0 = weight · η(-delay)` on `[-delay, 0]`.
    pub fn single_delay(delay: f64, weight: f64) -> Self {
        Self::new(delay, 0.0, vec![PointDelay { delay, weight }]).expect("valid single delay")
    }

    pub fn max_delay(&self) -> f64 {
        self.max_delay
    }

    pub fn instantaneous(&self) -> f64 {
        self.instantaneous
    }

    pub fn delays(&self) -> &[PointDelay] {
        &self.delays
    }

    /// Bound `|c₀| + Σ|cₖ|` on the operator norm.
    pub fn norm_bound(&self) -> f64 {
        self.instantaneous.abs() + self.delays.iter().map(|p| p.weight.abs()).sum::<f64>()
    }

    pub fn apply(&self, eta: &impl Segment) -> f64 {
        self.instantaneous * eta.at(0.0)
            + self
                .delays
                .iter()
                .map(|p| p.weight * eta.at(-p.delay))
                .sum::<f64>()
    }

    /// `Δ(λ) = λ - c₀ - Σₖ cₖ e^{-λ dₖ}`.
    pub fn char_fn(&self, lambda: Complex64) -> Complex64 {
        let mut v = lambda - self.instantaneous;
        for p in &self.delays {
            v -= p.weight * (-lambda * p.delay).exp();
        }
        v
    }

    /// `Δ'(λ) = 1 + Σₖ cₖ dₖ e^{-λ dₖ}`.
    pub fn char_fn_derivative(&self, lambda: Complex64) -> Complex64 {
        let mut v = Complex64::new(1.0, 0.0);
        for p in &self.delays {
            v += p.weight * p.delay * (-lambda * p.delay).exp();
        }
        v
    }

    /// Number of grid steps per delay; fails unless every delay is a multiple of `dt`.
    pub fn grid_offsets(&self, dt: f64) -> Result<Vec<usize>, SpectralError> {
        self.delays
            .iter()
            .map(|p| {
                let m = (p.delay / dt).round();
                if m < 1.0 || (p.delay - m * dt).abs() > 1e-9 {
                    Err(SpectralError::MisalignedStep { dt, delay: p.delay })
                } else {
                    Ok(m as usize)
                }
            })
            .collect()
    }

    fn newton(&self, start: Complex64) -> Option<Complex64> {
        let mut z = start;
        for _ in 0..NEWTON_MAX_ITER {
            let d = self.char_fn_derivative(z);
            if d.norm() == 0.0 {
                return None;
            }
            let step = self.char_fn(z) / d;
            z -= step;
            if !z.re.is_finite() || !z.im.is_finite() {
                return None;
            }
            if step.norm() <= NEWTON_TOL * z.norm().max(1.0) {
                let res = self.char_fn(z).norm();
                return (res <= 1e-8 * (1.0 + z.norm())).then_some(z);
            }
        }
        None
    }
}

/// Critical frequency `ω_c > 0` with `Δ(iω_c) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalPair {
    pub omega: f64,
    pub residual: f64,
}

impl CriticalPair {
    pub fn period(&self) -> f64 {
        2.0 * PI / self.omega
    }
}

/// Finds the unique `ω ∈ (0, ω_max]` with `Δ(iω) = 0`.
///
/// Local minima of `|Δ(iω)|` on a fine scan seed a complex Newton iteration;
/// only limits lying on the imaginary axis are accepted.
pub fn find_critical_frequency(
    op: &DelayOperator,
    omega_max: f64,
) -> Result<CriticalPair, SpectralError> {
    if !(omega_max.is_finite() && omega_max > 0.0) {
        return Err(SpectralError::InvalidOperator(format!(
            "omega_max must be positive, got {omega_max}"
        )));
    }
    let n = ((omega_max / 1e-3).ceil() as usize).clamp(2000, 200_000);
    let h = omega_max / n as f64;
    let mag = |w: f64| op.char_fn(Complex64::new(0.0, w)).norm();
    let values: Vec<f64> = (1..=n).map(|i| mag(i as f64 * h)).collect();
    let mut found: Vec<f64> = Vec::new();
    for i in 0..values.len() {
        let left = if i == 0 { f64::INFINITY } else { values[i - 1] };
        let right = values.get(i + 1).copied().unwrap_or(f64::INFINITY);
        if !(values[i] <= left && values[i] <= right) {
            continue;
        }
        let w0 = (i + 1) as f64 * h;
        let Some(root) = op.newton(Complex64::new(0.0, w0)) else {
            continue;
        };
        if root.re.abs() > 1e-8 || root.im <= 0.0 || root.im > omega_max * (1.0 + 1e-9) {
            continue;
        }
        if found.iter().all(|w| (w - root.im).abs() > ROOT_DEDUP) {
            found.push(root.im);
        }
    }
    match found.len() {
        0 => Err(SpectralError::NoImaginaryRoot { omega_max }),
        1 => {
            let omega = found[0];
            let residual = op.char_fn(Complex64::new(0.0, omega)).norm();
            Ok(CriticalPair { omega, residual })
        }
        _ => Err(SpectralError::MultipleImaginaryRoots { roots: found }),
    }
}

/// Search box for roots: `Re λ ∈ [re_min, delta]`, `Im λ ∈ [0, im_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumBox {
    pub re_min: f64,
    pub delta: f64,
    pub im_max: f64,
}

impl Default for SpectrumBox {
    fn default() -> Self {
        Self {
            re_min: -10.0,
            delta: 0.1,
            im_max: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Roots with `Im λ ≥ 0` found by Newton iteration from a grid over the box,
    /// sorted by decreasing real part.
    pub roots: Vec<[f64; 2]>,
    /// Roots counted by the argument principle in the box and its mirror image.
    pub contour_count: usize,
    /// Whether the contour count agrees with the Newton roots (conjugates included).
    pub counts_consistent: bool,
    /// Roots with `Re λ > -δ` counted over a region certified to contain all of them.
    pub strip_count: usize,
    /// Newton roots with `Re λ > -δ` other than `iω_c`.
    pub offending_roots: Vec<[f64; 2]>,
    pub critical_residual: f64,
    pub passed: bool,
}

/// Winding number of `Δ` around the rectangle `[x0, x1] × [y0, y1]`.
fn winding_number(
    op: &DelayOperator,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
) -> Result<i64, SpectralError> {
    let corners = [
        Complex64::new(x0, y0),
        Complex64::new(x1, y0),
        Complex64::new(x1, y1),
        Complex64::new(x0, y1),
    ];
    let mut total = 0.0;
    for e in 0..4 {
        let a = corners[e];
        let b = corners[(e + 1) % 4];
        let pieces = (((b - a).norm() / 0.05).ceil() as usize).max(4);
        for k in 0..pieces {
            let p = a + (b - a) * (k as f64 / pieces as f64);
            let q = a + (b - a) * ((k + 1) as f64 / pieces as f64);
            total += arg_change(op, p, q, 0)?;
        }
    }
    Ok((total / (2.0 * PI)).round() as i64)
}

fn arg_change(
    op: &DelayOperator,
    a: Complex64,
    b: Complex64,
    depth: usize,
) -> Result<f64, SpectralError> {
    let fa = op.char_fn(a);
    let fb = op.char_fn(b);
    let floor = 1e-10 * (1.0 + a.norm());
    if fa.norm() < floor || fb.norm() < floor {
        return Err(SpectralError::ContourHitsRoot);
    }
    let d = (fb / fa).arg();
    if d.abs() < 0.5 {
        return Ok(d);
    }
    if depth > 40 {
        return Err(SpectralError::ContourHitsRoot);
    }
    let m = (a + b) * 0.5;
    Ok(arg_change(op, a, m, depth + 1)? + arg_change(op, m, b, depth + 1)?)
}

/// Retries the contour with slightly enlarged extents if it grazes a root.
fn robust_winding(
    op: &DelayOperator,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
) -> Result<i64, SpectralError> {
    let mut scale = 1.0;
    for _ in 0..6 {
        match winding_number(op, x0 * scale, x1 * scale, y0 * scale, y1 * scale) {
            Err(SpectralError::ContourHitsRoot) => scale *= 1.0137,
            other => return other,
        }
    }
    Err(SpectralError::ContourHitsRoot)
}

/// Newton roots (upper half plane, real axis included) inside the box.
pub fn scan_roots(op: &DelayOperator, bx: &SpectrumBox) -> Vec<Complex64> {
    let nx = ((bx.delta - bx.re_min) / NEWTON_GRID).ceil() as usize;
    let ny = (bx.im_max / NEWTON_GRID).ceil() as usize;
    let mut roots: Vec<Complex64> = Vec::new();
    for i in 0..=nx {
        for j in 0..=ny {
            let start = Complex64::new(bx.re_min + i as f64 * NEWTON_GRID, j as f64 * NEWTON_GRID);
            let Some(mut z) = op.newton(start) else {
                continue;
            };
            if z.im < 0.0 {
                z = z.conj();
            }
            if z.im.abs() < 1e-10 {
                z.im = 0.0;
            }
            let inside = z.re >= bx.re_min - 1e-9 && z.re <= bx.delta + 1e-9 && z.im <= bx.im_max;
            if inside && roots.iter().all(|r| (r - z).norm() > ROOT_DEDUP) {
                roots.push(z);
            }
        }
    }
    roots.sort_by(|a, b| b.re.total_cmp(&a.re).then(a.im.total_cmp(&b.im)));
    roots
}

/// Checks that `±iω_c` are the only roots with `Re λ > -δ`.
///
/// Roots with `Re λ ≥ -δ` satisfy `|λ| ≤ |c₀| + Σ|cₖ| e^{δ dₖ}`, so an
/// argument-principle count over that bounded strip is exhaustive. The search
/// box is additionally scanned with Newton starts and cross-checked against
/// its own contour count.
pub fn verify_spectrum(
    op: &DelayOperator,
    omega_c: f64,
    bx: &SpectrumBox,
) -> Result<SpectrumReport, SpectralError> {
    if !(bx.delta > 0.0) {
        return Err(SpectralError::InvalidOperator(
            "margin delta must be positive".into(),
        ));
    }
    let roots = scan_roots(op, bx);
    let contour_count = robust_winding(op, bx.re_min, bx.delta, -bx.im_max, bx.im_max)?;
    let expected: usize = roots.iter().map(|r| if r.im == 0.0 { 1 } else { 2 }).sum();
    let counts_consistent = contour_count >= 0 && contour_count as usize == expected;

    let bound = op.instantaneous.abs()
        + op.delays
            .iter()
            .map(|p| p.weight.abs() * (bx.delta * p.delay).exp())
            .sum::<f64>()
        + 1.0;
    let strip_count = robust_winding(op, -bx.delta, bound, -bound, bound)?.max(0) as usize;

    let critical = Complex64::new(0.0, omega_c);
    let critical_residual = op.char_fn(critical).norm();
    let offending_roots: Vec<[f64; 2]> = roots
        .iter()
        .filter(|r| r.re > -bx.delta && (*r - critical).norm() > 1e-6)
        .map(|r| [r.re, r.im])
        .collect();
    let passed = omega_c > 0.0
        && critical_residual <= 1e-10
        && strip_count == 2
        && offending_roots.is_empty();
    Ok(SpectrumReport {
        roots: roots.iter().map(|r| [r.re, r.im]).collect(),
        contour_count: contour_count.max(0) as usize,
        counts_consistent,
        strip_count,
        offending_roots,
        critical_residual,
        passed,
    })
}

/// `⟨φ, ψ⟩` for `φ` on `[-r, 0]` and `ψ` on `[0, r]`.
pub fn bilinear_form(op: &DelayOperator, phi: &impl Segment, psi: &impl Fn(f64) -> f64) -> f64 {
    let mut v = phi.at(0.0) * psi(0.0);
    for p in &op.delays {
        let n = (BILINEAR_INTERVALS_PER_UNIT * p.delay).ceil() as usize;
        v += p.weight * simpson(|u| phi.at(u) * psi(u + p.delay), -p.delay, 0.0, n);
    }
    v
}

/// Biorthogonal basis `Ψⱼ(s) = αⱼ cos(ω_c s) + βⱼ sin(ω_c s)` on `[0, r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjointBasis {
    pub omega: f64,
    /// `[[α₁, β₁], [α₂, β₂]]`.
    pub coeffs: [[f64; 2]; 2],
    /// `M_ij = ⟨Φᵢ, basisⱼ⟩` with basis `(cos(ω_c·), sin(ω_c·))`.
    pub gram: [[f64; 2]; 2],
}

impl AdjointBasis {
    /// `Ψ(0) = (α₁, α₂)`.
    pub fn psi0(&self) -> [f64; 2] {
        [self.coeffs[0][0], self.coeffs[1][0]]
    }

    pub fn psi(&self, j: usize, s: f64) -> f64 {
        let (c, sn) = ((self.omega * s).cos(), (self.omega * s).sin());
        self.coeffs[j][0] * c + self.coeffs[j][1] * sn
    }

    /// `Φ(θ) v`.
    pub fn phi(&self, theta: f64, v: [f64; 2]) -> f64 {
        v[0] * (self.omega * theta).cos() + v[1] * (self.omega * theta).sin()
    }
}

pub fn adjoint_basis(op: &DelayOperator, omega: f64) -> Result<AdjointBasis, SpectralError> {
    let phi = |i: usize, t: f64| {
        if i == 0 {
            (omega * t).cos()
        } else {
            (omega * t).sin()
        }
    };
    let mut gram = [[0.0; 2]; 2];
    for (i, row) in gram.iter_mut().enumerate() {
        for (j, m) in row.iter_mut().enumerate() {
            *m = bilinear_form(op, &|t: f64| phi(i, t), &|t: f64| phi(j, t));
        }
    }
    let det = gram[0][0] * gram[1][1] - gram[0][1] * gram[1][0];
    let scale = gram.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if det.abs() <= 1e-12 * scale * scale {
        return Err(SpectralError::SingularGram(det));
    }
    let inv = [
        [gram[1][1] / det, -gram[0][1] / det],
        [-gram[1][0] / det, gram[0][0] / det],
    ];
    // Column j of M⁻¹ holds the coefficients of Ψⱼ.
    let coeffs = [[inv[0][0], inv[1][0]], [inv[0][1], inv[1][1]]];
    Ok(AdjointBasis {
        omega,
        coeffs,
        gram,
    })
}

/// `max |⟨Φᵢ, Ψⱼ⟩ - δᵢⱼ|`.
pub fn biorthogonality_residual(op: &DelayOperator, basis: &AdjointBasis) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..2 {
        let v = if i == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
        for j in 0..2 {
            let m = bilinear_form(op, &|t: f64| basis.phi(t, v), &|s| basis.psi(j, s));
            let delta = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((m - delta).abs());
        }
    }
    worst
}

/// Critical coordinates `zⱼ = ⟨η, Ψⱼ⟩`.
pub fn project(op: &DelayOperator, basis: &AdjointBasis, eta: &impl Segment) -> [f64; 2] {
    [0, 1].map(|j| bilinear_form(op, eta, &|s| basis.psi(j, s)))
}

/// `y = η - Φ z` for the projection `z` of `η`.
pub fn stable_part<'a, S: Segment>(
    basis: &'a AdjointBasis,
    eta: &'a S,
    z: [f64; 2],
) -> impl Fn(f64) -> f64 + 'a {
    move |t| eta.at(t) - basis.phi(t, z)
}

/// Precomputed weights turning a history window into critical coordinates.
///
/// `z = Σᵢ w[i] · x(t - (k - i)·h)` for the window returned by
/// [`HistoryBuffer::window`] with `k = r / h` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowProjector {
    weights: [Vec<f64>; 2],
    steps: usize,
    step: f64,
    omega: f64,
}

impl WindowProjector {
    pub fn new(op: &DelayOperator, basis: &AdjointBasis, step: f64) -> Result<Self, SpectralError> {
        let steps = (op.max_delay / step).round() as usize;
        if steps == 0 || (op.max_delay - steps as f64 * step).abs() > 1e-9 {
            return Err(SpectralError::MisalignedStep {
                dt: step,
                delay: op.max_delay,
            });
        }
        let offsets = op.grid_offsets(step)?;
        let mut weights = [vec![0.0; steps + 1], vec![0.0; steps + 1]];
        for (j, w) in weights.iter_mut().enumerate() {
            w[steps] += basis.psi(j, 0.0);
            for (p, &m) in op.delays.iter().zip(&offsets) {
                let q = simpson_weights(m, step);
                for (i, qi) in q.iter().enumerate() {
                    // Node i of the delay interval sits at u = -d + i·h.
                    let u = -p.delay + i as f64 * step;
                    w[steps - m + i] += p.weight * qi * basis.psi(j, u + p.delay);
                }
            }
        }
        Ok(Self {
            weights,
            steps,
            step,
            omega: basis.omega,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn project(&self, window: &[f64]) -> [f64; 2] {
        debug_assert_eq!(window.len(), self.steps + 1);
        [0, 1].map(|j| self.weights[j].iter().zip(window).map(|(w, x)| w * x).sum())
    }

    /// Sup norm of `y = η - Φz` over the window nodes.
    pub fn stable_norm(&self, window: &[f64], z: [f64; 2]) -> f64 {
        window
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let theta = -((self.steps - i) as f64) * self.step;
                let phi = z[0] * (self.omega * theta).cos() + z[1] * (self.omega * theta).sin();
                (x - phi).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Projection of a sampled segment, using its own grid for the quadrature.
pub fn project_sampled(
    op: &DelayOperator,
    basis: &AdjointBasis,
    seg: &SampledSegment,
) -> Result<[f64; 2], SpectralError> {
    let proj = WindowProjector::new(op, basis, seg.step())?;
    Ok(proj.project(seg.values()))
}

/// Solution of `ẋ = L0(x_t)` with `x(0) = 1`, `x(u) = 0` for `u < 0`.
#[derive(Debug, Clone)]
pub struct FundamentalSolution {
    history: HistoryBuffer,
    t_max: f64,
}

/// Side from which a piecewise-smooth function is evaluated at a breakpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl FundamentalSolution {
    pub fn dt(&self) -> f64 {
        self.history.dt()
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    /// Right-continuous value: `x(0) = 1`.
    pub fn value(&self, t: f64) -> f64 {
        self.value_side(t, Side::Right)
    }

    /// `x(t)`, with `t` within `1e-12` of zero resolved by `side`.
    pub fn value_side(&self, t: f64, side: Side) -> f64 {
        if t.abs() <= 1e-12 {
            return match side {
                Side::Left => 0.0,
                Side::Right => 1.0,
            };
        }
        if t < 0.0 {
            return 0.0;
        }
        debug_assert!(t <= self.t_max + 1e-9, "t = {t} beyond table");
        self.history.value_at(t.min(self.t_max))
    }

    /// Value at grid node `j` (`x(j·dt)`, zero for negative `j`).
    pub fn node(&self, j: i64) -> f64 {
        if j < 0 {
            0.0
        } else {
            self.history.node(j)
        }
    }
}

pub fn fundamental_solution(
    op: &DelayOperator,
    t_max: f64,
    dt: f64,
) -> Result<FundamentalSolution, SpectralError> {
    let offsets = op.grid_offsets(dt)?;
    let steps = (t_max / dt).ceil() as usize;
    let mut history = HistoryBuffer::new(InitialHistory::UnitJump, dt, steps + 1);
    let c0 = op.instantaneous;
    let weights: Vec<f64> = op.delays.iter().map(|p| p.weight).collect();
    for _ in 0..steps {
        let n = history.current_index() as i64;
        rk4_step(&mut history, &[], |buf, frac, x, _| {
            let mut v = c0 * x;
            for (w, &m) in weights.iter().zip(&offsets) {
                v += w * buf.cell_value(n - m as i64, frac);
            }
            v
        });
    }
    Ok(FundamentalSolution {
        history,
        t_max: steps as f64 * dt,
    })
}

/// Tabulated `w_s = T̂(s)(I - π̂)𝟙`:
/// `w_s(θ) = x(s + θ) - Φ(θ) e^{sB} Ψ(0) = x(s + θ) - Φ(θ + s) Ψ(0)`.
#[derive(Debug, Clone)]
pub struct StableSegmentTable {
    fundamental: Arc<FundamentalSolution>,
    omega: f64,
    psi0: [f64; 2],
    max_delay: f64,
    s_step: f64,
    segments: Vec<SampledSegment>,
}

impl StableSegmentTable {
    pub fn new(
        fundamental: Arc<FundamentalSolution>,
        basis: &AdjointBasis,
        max_delay: f64,
        s_max: f64,
        s_step: f64,
    ) -> Result<Self, SpectralError> {
        if s_max < max_delay {
            return Err(SpectralError::HorizonTooShort {
                s_max,
                r: max_delay,
            });
        }
        let dt = fundamental.dt();
        let theta_steps = (max_delay / dt).round() as usize;
        if (max_delay - theta_steps as f64 * dt).abs() > 1e-9 {
            return Err(SpectralError::MisalignedStep {
                dt,
                delay: max_delay,
            });
        }
        let per_s = ((s_step / dt).round() as usize).max(1);
        let s_step = per_s as f64 * dt;
        let count = (s_max / s_step).floor() as usize;
        if count as f64 * s_step > fundamental.t_max() + 1e-9 {
            return Err(SpectralError::HorizonTooShort {
                s_max: fundamental.t_max(),
                r: s_max,
            });
        }
        let omega = basis.omega;
        let psi0 = basis.psi0();
        let segments = (0..=count)
            .map(|i| {
                let s = i as f64 * s_step;
                let values = (0..=theta_steps)
                    .map(|j| {
                        let node = (i * per_s + j) as i64 - theta_steps as i64;
                        let theta = -((theta_steps - j) as f64) * dt;
                        fundamental.node(node) - basis.phi(theta + s, psi0)
                    })
                    .collect();
                SampledSegment::new(max_delay, values)
            })
            .collect();
        Ok(Self {
            fundamental,
            omega,
            psi0,
            max_delay,
            s_step,
            segments,
        })
    }

    pub fn s_step(&self) -> f64 {
        self.s_step
    }

    pub fn s_max(&self) -> f64 {
        (self.segments.len() - 1) as f64 * self.s_step
    }

    pub fn max_delay(&self) -> f64 {
        self.max_delay
    }

    pub fn segments(&self) -> &[SampledSegment] {
        &self.segments
    }

    pub fn fundamental(&self) -> &FundamentalSolution {
        &self.fundamental
    }

    pub fn s_at(&self, i: usize) -> f64 {
        i as f64 * self.s_step
    }

    /// `‖w_s‖∞` at every tabulated `s`.
    pub fn norms(&self) -> Vec<f64> {
        self.segments.iter().map(SampledSegment::sup_norm).collect()
    }

    /// `w_s(θ)` from the fundamental solution directly (no table interpolation).
    pub fn tap_value(&self, s: f64, theta: f64, side: Side) -> f64 {
        let u = s + theta;
        let x = self.fundamental.value_side(u, side);
        let a = self.omega * u;
        x - (self.psi0[0] * a.cos() + self.psi0[1] * a.sin())
    }

    /// Segment at arbitrary `s`, linearly interpolated between table rows.
    pub fn segment(&self, s: f64) -> SampledSegment {
        let pos = (s / self.s_step).clamp(0.0, (self.segments.len() - 1) as f64);
        let i = (pos.floor() as usize).min(self.segments.len() - 2);
        let f = pos - i as f64;
        let a = self.segments[i].values();
        let b = self.segments[i + 1].values();
        SampledSegment::new(
            self.max_delay,
            a.iter()
                .zip(b)
                .map(|(x, y)| x * (1.0 - f) + y * f)
                .collect(),
        )
    }

    /// Least-squares line through `(s, ln ‖w_s‖)` for tabulated `s ∈ [s_lo, s_hi]`.
    pub fn decay_fit(&self, s_lo: f64, s_hi: f64) -> DecayFit {
        let pts: Vec<(f64, f64)> = self
            .norms()
            .iter()
            .enumerate()
            .map(|(i, n)| (self.s_at(i), *n))
            .filter(|(s, n)| *s >= s_lo - 1e-12 && *s <= s_hi + 1e-12 && *n > 0.0)
            .map(|(s, n)| (s, n.ln()))
            .collect();
        DecayFit::from_points(&pts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl DecayFit {
    fn from_points(pts: &[(f64, f64)]) -> Self {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let r_squared = if syy > 0.0 {
            sxy * sxy / (sxx * syy)
        } else {
            1.0
        };
        Self {
            slope,
            intercept,
            r_squared,
        }
    }
}

/// Decay constants of the stable semigroup, `‖T̂(s)φ‖ ≤ K̂ e^{-κ̂ s}‖φ‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralGap {
    /// `-Re` of the leading non-critical root.
    pub kappa: f64,
    /// Smallest `K̂` with `‖w_s‖ ≤ K̂ e^{-κ̂ s}` over the tabulated `s ≥ r`.
    pub prefactor: f64,
    pub second_root: [f64; 2],
    /// Decay rate fitted to the table, for cross-checking `kappa`.
    pub fitted_kappa: f64,
    pub fit_r_squared: f64,
}

pub fn estimate_gap(
    report: &SpectrumReport,
    omega_c: f64,
    table: &StableSegmentTable,
) -> Result<SpectralGap, SpectralError> {
    let second = report
        .roots
        .iter()
        .filter(|r| (Complex64::new(r[0], r[1]) - Complex64::new(0.0, omega_c)).norm() > 1e-6)
        .max_by(|a, b| a[0].total_cmp(&b[0]))
        .copied()
        .ok_or(SpectralError::NoStableRoots)?;
    if second[0] >= 0.0 {
        return Err(SpectralError::AssumptionViolated(format!(
            "non-critical root {} + {}i has non-negative real part",
            second[0], second[1]
        )));
    }
    let kappa = -second[0];
    let r = table.max_delay();
    let prefactor = table
        .norms()
        .iter()
        .enumerate()
        .filter(|(i, _)| table.s_at(*i) >= r - 1e-12)
        .map(|(i, n)| n * (kappa * table.s_at(i)).exp())
        .fold(0.0, f64::max);
    let s_hi = table.s_max();
    let s_lo = (2.0 * r).min(s_hi / 2.0);
    let fit = table.decay_fit(s_lo, s_hi);
    Ok(SpectralGap {
        kappa,
        prefactor,
        second_root: second,
        fitted_kappa: -fit.slope,
        fit_r_squared: fit.r_squared,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralSettings {
    pub omega_max: f64,
    pub search_box: SpectrumBox,
    /// Integration step of the fundamental solution; also the θ-grid step.
    pub dt: f64,
    /// Horizon of the stable-segment table.
    pub s_max: f64,
    pub table_step: f64,
}

impl Default for SpectralSettings {
    fn default() -> Self {
        Self {
            omega_max: 10.0,
            search_box: SpectrumBox::default(),
            dt: 1e-3,
            s_max: 12.0,
            table_step: 0.05,
        }
    }
}

/// Everything the averaging and simulation stages need from the linear part.
#[derive(Debug, Clone)]
pub struct SpectralData {
    pub operator: DelayOperator,
    pub critical: CriticalPair,
    pub basis: AdjointBasis,
    pub report: SpectrumReport,
    pub table: Arc<StableSegmentTable>,
    pub gap: SpectralGap,
}

impl SpectralData {
    pub fn analyze(op: &DelayOperator, settings: &SpectralSettings) -> Result<Self, SpectralError> {
        let critical = find_critical_frequency(op, settings.omega_max)?;
        let report = verify_spectrum(op, critical.omega, &settings.search_box)?;
        if !report.passed {
            return Err(SpectralError::AssumptionViolated(format!(
                "roots with Re > -{} besides ±i{:.6}: strip count {}, offending {:?}",
                settings.search_box.delta,
                critical.omega,
                report.strip_count,
                report.offending_roots
            )));
        }
        let basis = adjoint_basis(op, critical.omega)?;
        let s_max = settings.s_max.max(op.max_delay);
        let fundamental = Arc::new(fundamental_solution(op, s_max + op.max_delay, settings.dt)?);
        let table = Arc::new(StableSegmentTable::new(
            fundamental,
            &basis,
            op.max_delay,
            s_max,
            settings.table_step,
        )?);
        let gap = estimate_gap(&report, critical.omega, &table)?;
        Ok(Self {
            operator: op.clone(),
            critical,
            basis,
            report,
            table,
            gap,
        })
    }

    pub fn omega(&self) -> f64 {
        self.critical.omega
    }

    pub fn psi0(&self) -> [f64; 2] {
        self.basis.psi0()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn hopf_op() -> DelayOperator {
        DelayOperator::single_delay(1.0, -FRAC_PI_2)
    }

    #[test]
    fn char_fn_examples() {
        let op = hopf_op();
        assert!(op.char_fn(Complex64::new(0.0, FRAC_PI_2)).norm() < 1e-15);
        assert!((op.char_fn(Complex64::new(0.0, 0.0)).re - FRAC_PI_2).abs() < 1e-15);
        let zero = DelayOperator::new(1.0, 0.0, vec![]).unwrap();
        assert_eq!(
            zero.char_fn(Complex64::new(1.0, 0.0)),
            Complex64::new(1.0, 0.0)
        );
    }

    #[test]
    fn critical_frequency_of_hopf_example() {
        let pair = find_critical_frequency(&hopf_op(), 10.0).unwrap();
        assert!((pair.omega - FRAC_PI_2).abs() < 1e-10);
        assert!(pair.residual <= 1e-12);
    }

    #[test]
    fn no_imaginary_root_cases() {
        let off_axis = DelayOperator::single_delay(1.0, -PI);
        assert!(matches!(
            find_critical_frequency(&off_axis, 10.0),
            Err(SpectralError::NoImaginaryRoot { .. })
        ));
        let growth = DelayOperator::new(1.0, 1.0, vec![]).unwrap();
        assert!(matches!(
            find_critical_frequency(&growth, 10.0),
            Err(SpectralError::NoImaginaryRoot { .. })
        ));
    }

    #[test]
    fn multiple_imaginary_roots_are_rejected() {
        // Weights (c₀, c₁, c₂, c₃) for delays 1, 2, 3 such that Δ(i) = Δ(2i) = 0.
        let (w1, w2) = (1.0f64, 2.0f64);
        let mut a = nalgebra::Matrix4::zeros();
        let mut rhs = nalgebra::Vector4::zeros();
        for (row, w) in [(0, w1), (2, w2)] {
            a[(row, 0)] = 1.0;
            for d in 1..=3 {
                a[(row, d)] = (w * d as f64).cos();
                a[(row + 1, d)] = -(w * d as f64).sin();
            }
            rhs[row + 1] = w;
        }
        let c = a.lu().solve(&rhs).unwrap();
        let op = DelayOperator::new(
            3.0,
            c[0],
            (1..=3)
                .map(|d| PointDelay {
                    delay: d as f64,
                    weight: c[d],
                })
                .collect(),
        )
        .unwrap();
        for w in [w1, w2] {
            assert!(op.char_fn(Complex64::new(0.0, w)).norm() < 1e-12);
        }
        match find_critical_frequency(&op, 3.0) {
            Err(SpectralError::MultipleImaginaryRoots { roots }) => {
                assert!(roots.iter().any(|r| (r - w1).abs() < 1e-9));
                assert!(roots.iter().any(|r| (r - w2).abs() < 1e-9));
            }
            other => panic!("expected two roots, got {other:?}"),
        }
        let pair = find_critical_frequency(&hopf_op(), 1.6).unwrap();
        assert!((pair.omega - FRAC_PI_2).abs() < 1e-10);
    }

    #[test]
    fn verify_spectrum_examples() {
        let bx = SpectrumBox::default();
        let report = verify_spectrum(&hopf_op(), FRAC_PI_2, &bx).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.strip_count, 2);
        assert!(report.counts_consistent, "{report:?}");
        let first = report.roots[0];
        assert!(first[0].abs() < 1e-12 && (first[1] - FRAC_PI_2).abs() < 1e-10);

        // Leading root 0.05635 + 1.60587i.
        let unstable = DelayOperator::single_delay(1.0, -1.7);
        let r = verify_spectrum(&unstable, FRAC_PI_2, &bx).unwrap();
        assert!(!r.passed);
        assert!((r.roots[0][0] - 0.056347231714687).abs() < 1e-9);
        assert_eq!(r.offending_roots.len(), 1);
        // Leading root 0.1728 + 1.6737i lies right of the box; the strip count still sees it.
        let r = verify_spectrum(&DelayOperator::single_delay(1.0, -2.0), FRAC_PI_2, &bx).unwrap();
        assert!(!r.passed);

        let zero = DelayOperator::new(1.0, 0.0, vec![]).unwrap();
        let r = verify_spectrum(&zero, 1.0, &bx).unwrap();
        assert!(!r.passed);
        assert_eq!(r.strip_count, 1);
    }

    #[test]
    fn bilinear_form_trig_values() {
        let op = hopf_op();
        let w = FRAC_PI_2;
        let c = move |t: f64| (w * t).cos();
        let s = move |t: f64| (w * t).sin();
        assert!((bilinear_form(&op, &c, &c) - 0.5).abs() < 1e-12);
        assert!((bilinear_form(&op, &s, &c) - PI / 4.0).abs() < 1e-12);
        assert!((bilinear_form(&op, &c, &s) + PI / 4.0).abs() < 1e-12);
        assert!((bilinear_form(&op, &s, &s) - 0.5).abs() < 1e-12);
        let zero = DelayOperator::new(1.0, 0.0, vec![]).unwrap();
        let phi = |t: f64| 3.0 + t;
        assert_eq!(bilinear_form(&zero, &phi, &|s: f64| 2.0 - s), 6.0);
    }

    #[test]
    fn adjoint_basis_closed_form() {
        let op = hopf_op();
        let basis = adjoint_basis(&op, FRAC_PI_2).unwrap();
        let expected = [0.5, -PI / 4.0, PI / 4.0, 0.5];
        for (m, e) in basis.gram.iter().flatten().zip(expected) {
            assert!((m - e).abs() < 1e-12);
        }
        let d = 1.0 + PI * PI / 4.0;
        let psi0 = basis.psi0();
        assert!((psi0[0] - 2.0 / d).abs() < 1e-12);
        assert!((psi0[1] - PI / d).abs() < 1e-12);
        let one = project(&op, &basis, &|_: f64| 1.0);
        assert!((one[0] - PI / d).abs() < 1e-10);
        assert!((one[1] + 2.0 / d).abs() < 1e-10);
        assert!(biorthogonality_residual(&op, &basis) <= 1e-10);
    }

    #[test]
    fn projection_of_critical_segments() {
        let op = hopf_op();
        let basis = adjoint_basis(&op, FRAC_PI_2).unwrap();
        let phi1 = |t: f64| (FRAC_PI_2 * t).cos();
        let z = project(&op, &basis, &phi1);
        assert!((z[0] - 1.0).abs() < 1e-10 && z[1].abs() < 1e-10);
        let y = stable_part(&basis, &phi1, z);
        assert!((-10..=0).all(|k| y(k as f64 / 10.0).abs() < 1e-10));
        let v = [0.3, -0.7];
        let z = project(&op, &basis, &|t: f64| basis.phi(t, v));
        assert!((z[0] - v[0]).abs() < 1e-10 && (z[1] - v[1]).abs() < 1e-10);
    }

    #[test]
    fn window_projector_matches_closure_projection() {
        let op = hopf_op();
        let basis = adjoint_basis(&op, FRAC_PI_2).unwrap();
        let f = |t: f64| (3.0 * t).sin() + t * t;
        let seg = SampledSegment::from_fn(1.0, 1000, f);
        let a = project_sampled(&op, &basis, &seg).unwrap();
        let b = project(&op, &basis, &f);
        assert!((a[0] - b[0]).abs() < 1e-10 && (a[1] - b[1]).abs() < 1e-10);
    }

    #[test]
    fn fundamental_solution_method_of_steps() {
        let op = hopf_op();
        let x = fundamental_solution(&op, 3.0, 1e-3).unwrap();
        assert_eq!(x.value(0.0), 1.0);
        assert_eq!(x.value_side(0.0, Side::Left), 0.0);
        assert!((x.value(0.5) - 1.0).abs() < 1e-12);
        assert!((x.value(2.0) - (1.0 - FRAC_PI_2)).abs() < 1e-6);
        let x3 = 1.0 - PI + PI * PI / 8.0;
        assert!((x.value(3.0) - x3).abs() < 1e-6);
        // Second interval: x(t) = 1 - (π/2)(t - 1).
        assert!((x.value(1.37) - (1.0 - FRAC_PI_2 * 0.37)).abs() < 1e-10);

        let zero = DelayOperator::new(1.0, 0.0, vec![]).unwrap();
        let one = fundamental_solution(&zero, 5.0, 1e-2).unwrap();
        assert!((0..50).all(|i| one.value(i as f64 * 0.1) == 1.0));
    }

    #[test]
    fn misaligned_step_is_rejected() {
        assert!(matches!(
            fundamental_solution(&hopf_op(), 1.0, 0.3),
            Err(SpectralError::MisalignedStep { .. })
        ));
    }

    #[test]
    fn stable_table_initial_segment_and_horizon() {
        let op = hopf_op();
        let basis = adjoint_basis(&op, FRAC_PI_2).unwrap();
        let fund = Arc::new(fundamental_solution(&op, 3.0, 1e-3).unwrap());
        let table = StableSegmentTable::new(fund.clone(), &basis, 1.0, 2.0, 0.1).unwrap();
        let w0 = &table.segments()[0];
        let psi0 = basis.psi0();
        assert!((w0.at(-0.3) + basis.phi(-0.3, psi0)).abs() < 1e-12);
        assert!((w0.at(0.0) - (1.0 - psi0[0])).abs() < 1e-12);
        assert!(matches!(
            StableSegmentTable::new(fund, &basis, 1.0, 0.5, 0.1),
            Err(SpectralError::HorizonTooShort { .. })
        ));
    }
}
