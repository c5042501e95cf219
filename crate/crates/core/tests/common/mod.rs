//! Shared fixtures and independent numerical oracles for the integration
//! suites: plants, compatible initial data, a least-squares rate fit, high
//! order finite-difference stencils, and an adaptive RKF45 integrator.

#![allow(dead_code)]

use kdv_backstep::gains::Plant;
use kdv_backstep::linops::{mat_from_rows, Mat, Vector};
use kdv_backstep::transform::{feedback_u, KernelTable, SampledState};
use nalgebra::DVector;

pub fn demo_plant_with(lambda: f64, l: f64) -> Plant {
    Plant::new(
        mat_from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]),
        Mat::from_column_slice(2, 1, &[0.0, 1.0]),
        Mat::from_row_slice(1, 2, &[-3.0, -4.0]),
        l,
        lambda,
    )
    .unwrap()
}

pub fn demo_plant() -> Plant {
    demo_plant_with(1.0, 1.0)
}

/// Scalar plant whose closed-loop ODE pole (-15.5) is faster than any of the
/// swept field decay rates, so the fitted trajectory rate tracks the field.
pub fn fast_plant(lambda: f64) -> Plant {
    Plant::new(
        Mat::from_row_slice(1, 1, &[0.5]),
        Mat::from_row_slice(1, 1, &[1.0]),
        Mat::from_row_slice(1, 1, &[-16.0]),
        1.0,
        lambda,
    )
    .unwrap()
}

/// First-order compatible bump: value, first and third derivative vanish at
/// the left end, sixth-order zero at the right end. Depends only on x/l.
pub fn compat_field(n: usize) -> Vec<f64> {
    (0..=n)
        .map(|j| {
            let xi = j as f64 / n as f64;
            (xi * xi + 6.0 * xi * xi * xi) * (1.0 - xi).powi(6)
        })
        .collect()
}

/// Corrects `base` along the first coordinate so the initial actuation
/// matches the field value at x = 0 (exact startup compatibility):
/// U(0) = int q(0,y) u0 dy + phi(0) X0 = u0(0).
pub fn compatible_x0(table: &KernelTable, u0: &[f64], base: &Vector) -> Vector {
    let l = table.l();
    let state = SampledState::new(base.clone(), u0.to_vec(), l).unwrap();
    let u_base = feedback_u(&state, table).unwrap();
    let phi0 = table.phi_row(0)[(0, 0)];
    assert!(
        phi0.abs() > 1e-10,
        "phi(0) e1 component too small to correct against"
    );
    let mut x0 = base.clone();
    x0[0] += (u0[0] - u_base) / phi0;
    x0
}

/// Least-squares slope of -log(series) over t in [t0, t1].
pub fn lsq_rate(times: &[f64], series: &[f64], t0: f64, t1: f64) -> f64 {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(series)
        .filter(|(t, _)| **t >= t0 && **t <= t1)
        .map(|(t, s)| {
            assert!(
                *s > 0.0,
                "rate fit needs positive samples, got {s} at t={t}"
            );
            (*t, s.ln())
        })
        .collect();
    assert!(
        pts.len() >= 2,
        "rate fit needs at least two samples in window"
    );
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (sxx, sxy) = pts
        .iter()
        .fold((0.0, 0.0), |a, p| (a.0 + p.0 * p.0, a.1 + p.0 * p.1));
    -((n * sxy - sx * sy) / (n * sxx - sx * sx))
}

/// Sixth-order central first derivative (7-point stencil).
pub fn fd1(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x - 3.0 * h) + 9.0 * f(x - 2.0 * h) - 45.0 * f(x - h) + 45.0 * f(x + h)
        - 9.0 * f(x + 2.0 * h)
        + f(x + 3.0 * h))
        / (60.0 * h)
}

/// Sixth-order central third derivative (9-point stencil).
pub fn fd3(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let c = [
        -7.0 / 240.0,
        3.0 / 10.0,
        -169.0 / 120.0,
        61.0 / 30.0,
        0.0,
        -61.0 / 30.0,
        169.0 / 120.0,
        -3.0 / 10.0,
        7.0 / 240.0,
    ];
    let mut acc = 0.0;
    for (k, ck) in c.iter().enumerate() {
        let offset = k as f64 - 4.0;
        acc += ck * f(x + offset * h);
    }
    acc / (h * h * h)
}

/// Adaptive RKF45 from x0 to x1 (either direction), local tolerance `tol`
/// per unit step on the max norm.
pub fn rk45(
    f: &dyn Fn(f64, &DVector<f64>) -> DVector<f64>,
    y0: DVector<f64>,
    x0: f64,
    x1: f64,
    tol: f64,
) -> DVector<f64> {
    let dir = if x1 >= x0 { 1.0 } else { -1.0 };
    let mut x = x0;
    let mut y = y0;
    let mut h = dir * (x1 - x0).abs().clamp(1e-12, 1e-2);
    let mut steps = 0usize;
    while (x1 - x) * dir > 1e-14 {
        if (x + h - x1) * dir > 0.0 {
            h = x1 - x;
        }
        let k1 = f(x, &y);
        let k2 = f(x + h / 4.0, &(&y + &k1 * (h / 4.0)));
        let k3 = f(
            x + 3.0 * h / 8.0,
            &(&y + &k1 * (3.0 * h / 32.0) + &k2 * (9.0 * h / 32.0)),
        );
        let k4 = f(
            x + 12.0 * h / 13.0,
            &(&y + &k1 * (1932.0 * h / 2197.0) - &k2 * (7200.0 * h / 2197.0)
                + &k3 * (7296.0 * h / 2197.0)),
        );
        let k5 = f(
            x + h,
            &(&y + &k1 * (439.0 * h / 216.0) - &k2 * (8.0 * h) + &k3 * (3680.0 * h / 513.0)
                - &k4 * (845.0 * h / 4104.0)),
        );
        let k6 = f(
            x + h / 2.0,
            &(&y - &k1 * (8.0 * h / 27.0) + &k2 * (2.0 * h) - &k3 * (3544.0 * h / 2565.0)
                + &k4 * (1859.0 * h / 4104.0)
                - &k5 * (11.0 * h / 40.0)),
        );
        let y5 = &y
            + &k1 * (16.0 * h / 135.0)
            + &k3 * (6656.0 * h / 12825.0)
            + &k4 * (28561.0 * h / 56430.0)
            - &k5 * (9.0 * h / 50.0)
            + &k6 * (2.0 * h / 55.0);
        let y4 = &y
            + &k1 * (25.0 * h / 216.0)
            + &k3 * (1408.0 * h / 2565.0)
            + &k4 * (2197.0 * h / 4104.0)
            - &k5 * (h / 5.0);
        let err = (&y5 - &y4).amax();
        let scale = tol * h.abs().max(1e-12);
        if err <= scale || h.abs() <= 1e-12 {
            x += h;
            y = y5;
        }
        let factor = if err > 0.0 {
            0.9 * (scale / err).powf(0.2)
        } else {
            2.0
        };
        h *= factor.clamp(0.2, 2.0);
        steps += 1;
        assert!(steps < 2_000_000, "rk45 failed to reach the endpoint");
    }
    y
}
