use std::f64::consts::FRAC_PI_2;

use hopfavg_core::averaged::rotation;
use hopfavg_core::dde_sim::rotate_back;
use hopfavg_core::expr::ParsedFunctional;
use hopfavg_core::spectral::{adjoint_basis, project, DelayOperator};
use proptest::prelude::*;

fn coeff() -> impl Strategy<Value = f64> {
    (-30i32..=30).prop_map(|k| k as f64 / 10.0)
}

fn functional_text(c: [f64; 4]) -> String {
    format!(
        "{} * eta(0)^2 + {} * eta(-0.5) * eta(-1) - {} * eta(-1)^3 + {} * eta(-0.25)",
        c[0], c[1], c[2], c[3]
    )
}

proptest! {
    #[test]
    fn derivative_matches_central_difference(
        c in [coeff(), coeff(), coeff(), coeff()],
        a in [-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0],
        b in [-2.0f64..2.0, -2.0f64..2.0],
    ) {
        let f = ParsedFunctional::parse(&functional_text(c), 1.0).unwrap();
        let eta = move |t: f64| a[0] + a[1] * t + a[2] * (3.0 * t).sin();
        let zeta = move |t: f64| b[0] * (2.0 * t).cos() + b[1] * t * t;
        let h = 1e-5;
        let plus = move |t: f64| eta(t) + h * zeta(t);
        let minus = move |t: f64| eta(t) - h * zeta(t);
        let fd = (f.evaluate(&plus) - f.evaluate(&minus)) / (2.0 * h);
        let exact = f.directional_derivative(&eta, &zeta);
        prop_assert!((fd - exact).abs() <= 1e-5 * (1.0 + exact.abs()), "{fd} vs {exact}");
    }

    #[test]
    fn print_parse_round_trip(
        c in [coeff(), coeff(), coeff(), coeff()],
        a in [-2.0f64..2.0, -2.0f64..2.0],
    ) {
        let f = ParsedFunctional::parse(&functional_text(c), 1.0).unwrap();
        let g = ParsedFunctional::parse(&f.to_string(), 1.0).unwrap();
        prop_assert_eq!(f.to_string(), g.to_string());
        let eta = move |t: f64| a[0] + a[1] * (t + 0.3).powi(2);
        let (x, y) = (f.evaluate(&eta), g.evaluate(&eta));
        prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
    }

    #[test]
    fn projection_is_idempotent(a in [-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0]) {
        let op = DelayOperator::single_delay(1.0, -FRAC_PI_2);
        let basis = adjoint_basis(&op, FRAC_PI_2).unwrap();
        let eta = move |t: f64| a[0] + a[1] * t + a[2] * t * t * t;
        let z = project(&op, &basis, &eta);
        let again = project(&op, &basis, &|t: f64| basis.phi(t, z));
        prop_assert!((z[0] - again[0]).abs() < 1e-10 && (z[1] - again[1]).abs() < 1e-10);
    }

    #[test]
    fn rotations_preserve_the_norm(
        z in [-5.0f64..5.0, -5.0f64..5.0],
        phi in -10.0f64..10.0,
        tau in 0.0f64..100.0,
    ) {
        let n = z[0].hypot(z[1]);
        let r = rotation(phi);
        let rz = [r[0][0] * z[0] + r[0][1] * z[1], r[1][0] * z[0] + r[1][1] * z[1]];
        prop_assert!((rz[0].hypot(rz[1]) - n).abs() <= 1e-12 * (1.0 + n));
        let b = rotate_back(z, FRAC_PI_2, tau);
        prop_assert!((b[0].hypot(b[1]) - n).abs() <= 1e-12 * (1.0 + n));
    }
}
