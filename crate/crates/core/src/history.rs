//! Method-of-steps integration on a uniform grid.
//!
//! The solution is stored at grid nodes `t_j = j·dt` together with one-sided
//! derivatives at both ends of every cell `[t_j, t_{j+1}]`. Inside a cell the
//! solution is the cubic Hermite interpolant of that data, so kinks and jumps
//! at grid nodes (the fundamental solution jumps at `t = 0`) never leak into
//! neighbouring cells. Delays are grid aligned, hence every delayed RK4 stage
//! value comes from a single cell of the past.

use crate::segment::{SampledSegment, Segment};

/// Initial history `x(u)`, `u ≤ 0`.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialHistory {
    /// `Φ(u)·v = v₁ cos(ωu) + v₂ sin(ωu)`.
    Critical { omega: f64, coords: [f64; 2] },
    /// `x(0) = 1`, `x(u) = 0` for `u < 0`.
    UnitJump,
    /// An arbitrary sampled segment on `[-r, 0]`.
    Sampled(SampledSegment),
}

impl InitialHistory {
    pub fn value(&self, u: f64) -> f64 {
        match self {
            InitialHistory::Critical { omega, coords } => {
                coords[0] * (omega * u).cos() + coords[1] * (omega * u).sin()
            }
            InitialHistory::UnitJump => {
                if u >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            InitialHistory::Sampled(seg) => seg.at(u),
        }
    }

    /// `lim_{u→0⁻} x(u)`.
    pub fn left_limit_at_zero(&self) -> f64 {
        match self {
            InitialHistory::UnitJump => 0.0,
            other => other.value(0.0),
        }
    }
}

#[inline]
fn hermite(x0: f64, x1: f64, m0: f64, m1: f64, s: f64) -> f64 {
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    h00 * x0 + h10 * m0 + h01 * x1 + h11 * m1
}

/// Solution history on a uniform grid, kept in a ring buffer.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    dt: f64,
    initial: InitialHistory,
    nodes: Vec<f64>,
    d_left: Vec<f64>,
    d_right: Vec<f64>,
    cap: usize,
    current: usize,
}

impl HistoryBuffer {
    /// `window_cells` is the number of past cells that must stay addressable
    /// (at least `r / dt`). Pass the total step count to keep everything.
    pub fn new(initial: InitialHistory, dt: f64, window_cells: usize) -> Self {
        let cap = window_cells + 3;
        let mut nodes = vec![0.0; cap];
        nodes[0] = initial.value(0.0);
        Self {
            dt,
            initial,
            nodes,
            d_left: vec![0.0; cap],
            d_right: vec![0.0; cap],
            cap,
            current: 0,
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Index `n` of the newest node `t_n = n·dt`.
    pub fn current_index(&self) -> usize {
        self.current
    }

    pub fn current_time(&self) -> f64 {
        self.current as f64 * self.dt
    }

    pub fn current_value(&self) -> f64 {
        self.nodes[self.current % self.cap]
    }

    pub fn initial(&self) -> &InitialHistory {
        &self.initial
    }

    /// Value at node `j` (negative indices fall back to the initial history).
    #[inline]
    pub fn node(&self, j: i64) -> f64 {
        if j < 0 {
            self.initial.value(j as f64 * self.dt)
        } else {
            debug_assert!(j as usize <= self.current && self.current - (j as usize) < self.cap);
            self.nodes[j as usize % self.cap]
        }
    }

    /// Value inside cell `j` at relative position `frac ∈ [0, 1]`, using the
    /// one-sided data of that cell.
    #[inline]
    pub fn cell_value(&self, j: i64, frac: f64) -> f64 {
        if j < 0 {
            if j == -1 && frac >= 1.0 {
                return self.initial.left_limit_at_zero();
            }
            return self.initial.value((j as f64 + frac) * self.dt);
        }
        let j = j as usize;
        debug_assert!(j < self.current && self.current - j < self.cap);
        let a = j % self.cap;
        let b = (j + 1) % self.cap;
        hermite(
            self.nodes[a],
            self.nodes[b],
            self.d_right[a] * self.dt,
            self.d_left[a] * self.dt,
            frac,
        )
    }

    /// Value at absolute time `u ≤ t_n`.
    #[inline]
    pub fn value_at(&self, u: f64) -> f64 {
        let pos = u / self.dt;
        if pos >= self.current as f64 {
            return self.current_value();
        }
        let j = pos.floor() as i64;
        self.cell_value(j, pos - j as f64)
    }

    /// Appends node `n+1` with the one-sided derivatives of cell `n`.
    pub fn push(&mut self, x_next: f64, d_right_start: f64, d_left_end: f64) {
        let a = self.current % self.cap;
        self.d_right[a] = d_right_start;
        self.d_left[a] = d_left_end;
        self.current += 1;
        self.nodes[self.current % self.cap] = x_next;
    }

    /// Samples `x(t_n + θ)` on the grid `θ = -k·dt, …, 0`, oldest first.
    pub fn window(&self, k: usize) -> Vec<f64> {
        let n = self.current as i64;
        (0..=k as i64)
            .map(|i| self.node(n - k as i64 + i))
            .collect()
    }
}

/// One classical RK4 step over `[t_n, t_{n+1}]`, split at the fractional
/// positions `breaks` (strictly increasing, inside `(0, 1)`).
///
/// `rhs(buffer, frac, x, piece)` evaluates the right-hand side at time
/// `t_n + frac·dt` with current value `x`; `piece` indexes the sub-interval so
/// that piecewise-constant forcing can be selected by the caller.
pub fn rk4_step<R>(buffer: &mut HistoryBuffer, breaks: &[f64], mut rhs: R)
where
    R: FnMut(&HistoryBuffer, f64, f64, usize) -> f64,
{
    let mut x = buffer.current_value();
    let mut d_start = 0.0;
    let mut a = 0.0;
    let pieces = breaks.len() + 1;
    for piece in 0..pieces {
        let b = if piece < breaks.len() {
            breaks[piece]
        } else {
            1.0
        };
        let h = (b - a) * buffer.dt;
        let mid = 0.5 * (a + b);
        let k1 = rhs(buffer, a, x, piece);
        if piece == 0 {
            d_start = k1;
        }
        let k2 = rhs(buffer, mid, x + 0.5 * h * k1, piece);
        let k3 = rhs(buffer, mid, x + 0.5 * h * k2, piece);
        let k4 = rhs(buffer, b, x + h * k3, piece);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        a = b;
    }
    let d_end = rhs(buffer, 1.0, x, pieces - 1);
    buffer.push(x, d_start, d_end);
}
