//! Composite quadrature rules.

/// Weights of the composite rule on `n` equal intervals of width `h`
/// (`n + 1` nodes): Simpson for even `n`, Simpson plus a closing 3/8 panel for
/// odd `n ≥ 3`, trapezoid for `n = 1`.
pub fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    assert!(n >= 1, "need at least one interval");
    let mut w = vec![0.0; n + 1];
    if n == 1 {
        w[0] = 0.5 * h;
        w[1] = 0.5 * h;
        return w;
    }
    let simpson_end = if n.is_multiple_of(2) { n } else { n - 3 };
    let mut i = 0;
    while i < simpson_end {
        w[i] += h / 3.0;
        w[i + 1] += 4.0 * h / 3.0;
        w[i + 2] += h / 3.0;
        i += 2;
    }
    if simpson_end < n {
        let c = 3.0 * h / 8.0;
        w[simpson_end] += c;
        w[simpson_end + 1] += 3.0 * c;
        w[simpson_end + 2] += 3.0 * c;
        w[simpson_end + 3] += c;
    }
    w
}

/// Composite Simpson integral of `f` over `[a, b]` with at least `min_intervals`
/// intervals (rounded up to an even count).
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, min_intervals: usize) -> f64 {
    let mut n = min_intervals.max(2);
    if n % 2 == 1 {
        n += 1;
    }
    let h = (b - a) / n as f64;
    let mut sum = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        sum += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    sum * h / 3.0
}
