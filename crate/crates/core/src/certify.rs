//! Lyapunov certification of the designed decay rate.
//!
//! The certificate combines the ODE Lyapunov matrix with the field energy:
//! `V(X, w) = X'PX + (mu/2)||w||^2`, where `P` solves the closed-loop
//! Lyapunov equation `P(A+BK) + (A+BK)'P = -Q`. The weight `mu` is placed
//! strictly above `max(2|PB|^2/lambda_min(Q), 2 lambda_max(P))`, which makes
//! the cross terms in `Vdot` absorbable and yields the explicit rate
//! `delta = min(lambda_min(Q), 4 lambda)/mu` together with the sandwich
//! `alpha1 ||.||_H^2 <= V <= alpha2 ||.||_H^2`.

use crate::gains::{Plant, PlantError};
use crate::linops::{solve_lyapunov, sym_eig_bounds, LinopsError, Mat};
use crate::sim::SimTrace;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error(transparent)]
    Linops(#[from] LinopsError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("decay fit rejected: {0}")]
    Fit(String),
}

/// Lyapunov design data plus (optionally) a trace verdict. `design` leaves
/// `passed` false and `margin` zero; `check_envelope` supplies the verdict.
#[derive(Debug, Clone)]
pub struct Certificate {
    pub p: Mat,
    pub q: Mat,
    pub mu: f64,
    pub delta: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub passed: bool,
    pub margin: f64,
}

impl Certificate {
    pub fn with_verdict(&self, passed: bool, margin: f64) -> Certificate {
        Certificate {
            passed,
            margin,
            ..self.clone()
        }
    }

    /// Deterministic JSON rendering with 17-significant-digit floats.
    pub fn to_json(&self) -> String {
        let mut rows = Vec::new();
        for i in 0..self.p.nrows() {
            let cols: Vec<String> = (0..self.p.ncols())
                .map(|j| format!("{:.16e}", self.p[(i, j)]))
                .collect();
            rows.push(format!("[{}]", cols.join(", ")));
        }
        format!(
            "{{\n  \"P\": [{}],\n  \"mu\": {:.16e},\n  \"delta\": {:.16e},\n  \"alpha1\": {:.16e},\n  \"alpha2\": {:.16e},\n  \"passed\": {},\n  \"margin\": {:.16e}\n}}\n",
            rows.join(", "),
            self.mu,
            self.delta,
            self.alpha1,
            self.alpha2,
            self.passed,
            self.margin
        )
    }
}

/// Solves the Lyapunov equation for the closed-loop matrix and assembles
/// the certificate constants. The 1.05 factor keeps `mu` strictly above the
/// bound while staying deterministic.
pub fn design(plant: &Plant, q: &Mat) -> Result<Certificate, CertifyError> {
    let a_cl = plant.a_cl();
    let p = solve_lyapunov(&a_cl, q)?;
    let (q_min, _) = sym_eig_bounds(q)?;
    let (p_min, p_max) = sym_eig_bounds(&p)?;
    let pb = &p * plant.b();
    let pb_sq = pb.norm_squared();
    let bound = (2.0 * pb_sq / q_min).max(2.0 * p_max);
    let mu = 1.05 * bound;
    let delta = q_min.min(4.0 * plant.lambda()) / mu;
    Ok(Certificate {
        p,
        q: q.clone(),
        mu,
        delta,
        alpha1: p_min.min(mu / 2.0),
        alpha2: p_max.max(mu / 2.0),
        passed: false,
        margin: 0.0,
    })
}

/// `V_k = X_k' P X_k + (mu/2) ||w_k||^2` along a target-system trace. The
/// field norm reuses the trace's Simpson values.
pub fn evaluate_v(trace: &SimTrace, cert: &Certificate) -> Result<Vec<f64>, CertifyError> {
    let n = cert.p.nrows();
    if let Some(x) = trace.x_states.first() {
        if x.len() != n {
            return Err(CertifyError::Dimension(format!(
                "P is {n}x{n} but the trace carries X of dimension {}",
                x.len()
            )));
        }
    }
    Ok((0..trace.len())
        .map(|k| {
            let x = &trace.x_states[k];
            let quad = (&cert.p * x).dot(x);
            quad + 0.5 * cert.mu * trace.u_norm[k] * trace.u_norm[k]
        })
        .collect())
}

/// Envelope test `V_k <= V_0 e^{-delta t_k} (1 + tol)`; returns the verdict
/// and the worst-case slack. A zero initial value degenerates to requiring
/// the whole series be zero.
pub fn check_envelope(times: &[f64], v: &[f64], delta: f64, tol: f64) -> (bool, f64) {
    assert_eq!(times.len(), v.len());
    let v0 = v.first().copied().unwrap_or(0.0);
    let mut margin = f64::INFINITY;
    for (t, vk) in times.iter().zip(v) {
        let cap = v0 * (-delta * t).exp() * (1.0 + tol);
        margin = margin.min(cap - vk);
    }
    if !margin.is_finite() {
        return (false, f64::MAX);
    }
    (margin >= 0.0, margin)
}

/// Least-squares exponential rate over the second half of the horizon:
/// the slope of `-log(series)` against time. The window must be strictly
/// positive and hold at least two samples.
pub fn decay_fit(times: &[f64], series: &[f64]) -> Result<f64, CertifyError> {
    if times.len() != series.len() {
        return Err(CertifyError::Fit(format!(
            "series of length {} against {} times",
            series.len(),
            times.len()
        )));
    }
    let start = times.len() / 2;
    let window = &series[start..];
    if window.len() < 2 {
        return Err(CertifyError::Fit(format!(
            "fit window holds {} samples, need at least 2",
            window.len()
        )));
    }
    if let Some(bad) = window.iter().find(|v| **v <= 0.0) {
        return Err(CertifyError::Fit(format!(
            "non-positive value {bad:e} in the fit window"
        )));
    }
    let ts = &times[start..];
    let n = ts.len() as f64;
    let (st, sy, stt, sty) = ts.iter().zip(window).fold(
        (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64),
        |(st, sy, stt, sty), (&t, &v)| {
            let y = v.ln();
            (st + t, sy + y, stt + t * t, sty + t * y)
        },
    );
    let denom = n * stt - st * st;
    if denom <= 0.0 {
        return Err(CertifyError::Fit("degenerate time window".into()));
    }
    Ok(-(n * sty - st * sy) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{mat_from_rows, Vector};
    use crate::sim::{simulate_target, SimConfig};
    use crate::transform::grid_x;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn demo_plant() -> Plant {
        Plant::new(
            mat_from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]),
            Mat::from_column_slice(2, 1, &[0.0, 1.0]),
            Mat::from_row_slice(1, 2, &[-3.0, -4.0]),
            1.0,
            1.0,
        )
        .unwrap()
    }

    fn scalar_plant(lambda: f64) -> Plant {
        Plant::new(
            Mat::from_element(1, 1, 0.5),
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, -1.5),
            1.0,
            lambda,
        )
        .unwrap()
    }

    #[test]
    fn scalar_design_example() {
        // a + bk = -1, Q = 2: P = 1, bound = max(2/2, 2) = 2, mu = 2.1,
        // delta = min(2, 4)/2.1.
        let cert = design(&scalar_plant(1.0), &Mat::from_element(1, 1, 2.0)).unwrap();
        assert_abs_diff_eq!(cert.p[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cert.mu, 2.1, epsilon = 1e-12);
        assert_abs_diff_eq!(cert.delta, 2.0 / 2.1, epsilon = 1e-12);
        assert_abs_diff_eq!(cert.alpha1, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cert.alpha2, 1.05, epsilon = 1e-12);
        assert!(!cert.passed);
    }

    #[test]
    fn large_lambda_saturates_delta_at_q_min() {
        let cert = design(&scalar_plant(100.0), &Mat::from_element(1, 1, 2.0)).unwrap();
        assert_abs_diff_eq!(cert.delta, 2.0 / cert.mu, epsilon = 1e-15);
    }

    #[test]
    fn demo_design_matches_hand_computation() {
        // P for the demo closed loop with Q = I is [[11/8, 1/4], [1/4, 3/16]];
        // the rest follows from the 2x2 eigenvalue closed form.
        let cert = design(&demo_plant(), &Mat::identity(2, 2)).unwrap();
        assert_abs_diff_eq!(cert.p[(0, 0)], 11.0 / 8.0, epsilon = 1e-10);
        assert_abs_diff_eq!(cert.p[(0, 1)], 0.25, epsilon = 1e-10);
        assert_abs_diff_eq!(cert.p[(1, 0)], 0.25, epsilon = 1e-10);
        assert_abs_diff_eq!(cert.p[(1, 1)], 3.0 / 16.0, epsilon = 1e-10);
        assert!((cert.p.clone() - cert.p.transpose()).norm() <= 1e-14);

        let m: f64 = (11.0 / 8.0 + 3.0 / 16.0) / 2.0;
        let det = 11.0 / 8.0 * 3.0 / 16.0 - 0.0625;
        let disc = (m * m - det).sqrt();
        let (p_min, p_max) = (m - disc, m + disc);
        let pb_sq: f64 = 0.25 * 0.25 + (3.0 / 16.0) * (3.0 / 16.0);
        let mu = 1.05 * (2.0 * pb_sq).max(2.0 * p_max);
        assert_abs_diff_eq!(cert.mu, mu, epsilon = 1e-10);
        assert_abs_diff_eq!(cert.delta, 1.0 / mu, epsilon = 1e-10);
        assert_abs_diff_eq!(cert.alpha1, p_min, epsilon = 1e-10);
        assert_abs_diff_eq!(cert.alpha2, p_max.max(mu / 2.0), epsilon = 1e-10);
    }

    fn target_trace(plant: &Plant, t_final: f64) -> SimTrace {
        let n = 64;
        let cfg = SimConfig::new(n, 1e-3, t_final, 10).unwrap();
        let w0: Vec<f64> = (0..=n)
            .map(|j| {
                let x = grid_x(plant.l(), n, j) / plant.l();
                (x * x + 6.0 * x * x * x) * (1.0 - x).powi(6)
            })
            .collect();
        simulate_target(plant, &w0, &Vector::from_vec(vec![0.5, -0.3]), &cfg).unwrap()
    }

    #[test]
    fn evaluate_v_examples_and_sandwich() {
        let plant = demo_plant();
        let cert = design(&plant, &Mat::identity(2, 2)).unwrap();

        let cfg = SimConfig::new(32, 1e-2, 0.5, 5).unwrap();
        let zero = simulate_target(&plant, &vec![0.0; 33], &Vector::zeros(2), &cfg).unwrap();
        assert!(evaluate_v(&zero, &cert).unwrap().iter().all(|&v| v == 0.0));

        // w = 0 leaves only the quadratic ODE part.
        let x0 = Vector::from_vec(vec![0.7, 2.0_f64.sqrt()]);
        let ode_only = simulate_target(&plant, &vec![0.0; 33], &x0, &cfg).unwrap();
        let v = evaluate_v(&ode_only, &cert).unwrap();
        for k in 0..ode_only.len() {
            let x = &ode_only.x_states[k];
            assert_abs_diff_eq!(v[k], (&cert.p * x).dot(x), epsilon = 1e-14);
        }

        let trace = target_trace(&plant, 1.2);
        let v = evaluate_v(&trace, &cert).unwrap();
        for k in 0..trace.len() {
            let h2 = trace.h_norm[k] * trace.h_norm[k];
            assert!(cert.alpha1 * h2 <= v[k] * (1.0 + 1e-12));
            assert!(v[k] <= cert.alpha2 * h2 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn evaluate_v_rejects_dimension_mismatch() {
        let plant = demo_plant();
        let cert = design(&plant, &Mat::identity(2, 2)).unwrap();
        let scalar = scalar_plant(1.0);
        let cfg = SimConfig::new(32, 1e-2, 0.5, 5).unwrap();
        let trace =
            simulate_target(&scalar, &vec![0.0; 33], &Vector::from_element(1, 1.0), &cfg).unwrap();
        assert!(matches!(
            evaluate_v(&trace, &cert),
            Err(CertifyError::Dimension(_))
        ));
    }

    #[test]
    fn v_nonincreasing_and_envelope_on_demo_target() {
        let plant = demo_plant();
        let cert = design(&plant, &Mat::identity(2, 2)).unwrap();
        let trace = target_trace(&plant, 1.2);
        let v = evaluate_v(&trace, &cert).unwrap();
        let slack = 1e-6 * v[0];
        for k in 0..v.len() - 1 {
            assert!(
                v[k + 1] <= v[k] + slack,
                "V increased at step {k}: {} -> {}",
                v[k],
                v[k + 1]
            );
        }
        let (passed, margin) = check_envelope(&trace.times, &v, cert.delta, 0.05);
        assert!(passed, "margin {margin:e}");
        assert!(margin > 0.0);
    }

    #[test]
    fn envelope_synthetic_examples() {
        let times: Vec<f64> = (0..200).map(|k| k as f64 * 0.05).collect();
        let delta = 0.7;

        let fast: Vec<f64> = times
            .iter()
            .map(|t| 3.0 * (-2.0 * delta * t).exp())
            .collect();
        let (passed, margin) = check_envelope(&times, &fast, delta, 0.05);
        assert!(passed && margin > 0.0);

        let flat = vec![3.0; times.len()];
        let (passed, _) = check_envelope(&times, &flat, delta, 0.05);
        assert!(!passed);

        // Exactly the certified rate: the slack is the entire margin, and the
        // minimum sits at t = 0 where the envelope is tightest relatively.
        let exact: Vec<f64> = times.iter().map(|t| 3.0 * (-delta * t).exp()).collect();
        let (passed, margin) = check_envelope(&times, &exact, delta, 0.05);
        assert!(passed);
        assert!(margin > 0.0 && margin <= 0.05 * 3.0 + 1e-12);

        let (passed, margin) = check_envelope(&[0.0, 1.0], &[0.0, 0.0], delta, 0.05);
        assert!(passed && margin == 0.0);
    }

    #[test]
    fn decay_fit_examples() {
        let times: Vec<f64> = (0..=400).map(|k| k as f64 * 0.025).collect();

        let pure: Vec<f64> = times.iter().map(|t| 5.0 * (-2.0 * t).exp()).collect();
        assert_abs_diff_eq!(decay_fit(&times, &pure).unwrap(), 2.0, epsilon = 1e-6);

        let flat = vec![1.3; times.len()];
        assert_abs_diff_eq!(decay_fit(&times, &flat).unwrap(), 0.0, epsilon = 1e-12);

        let wobble: Vec<f64> = times
            .iter()
            .map(|t| (-t).exp() * (2.0 + (10.0 * t).sin()))
            .collect();
        let rate = decay_fit(&times, &wobble).unwrap();
        assert!((rate - 1.0).abs() <= 0.05, "rate {rate}");

        let mut with_zero = pure.clone();
        let n = with_zero.len();
        with_zero[n - 1] = 0.0;
        assert!(matches!(
            decay_fit(&times, &with_zero),
            Err(CertifyError::Fit(_))
        ));
        assert!(decay_fit(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn certificate_json_is_deterministic_and_complete() {
        let cert = design(&demo_plant(), &Mat::identity(2, 2)).unwrap();
        let cert = cert.with_verdict(true, 0.125);
        let a = cert.to_json();
        let b = cert.to_json();
        assert_eq!(a, b);
        for key in [
            "\"P\"",
            "\"mu\"",
            "\"delta\"",
            "\"alpha1\"",
            "\"alpha2\"",
            "\"passed\"",
            "\"margin\"",
        ] {
            assert!(a.contains(key), "missing {key} in {a}");
        }
        assert!(a.contains("true"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// Certificate invariants hold for arbitrary SPD weights.
        #[test]
        fn design_invariants_hold_for_random_spd_q(
            m00 in -2.0_f64..2.0, m01 in -2.0_f64..2.0,
            m10 in -2.0_f64..2.0, m11 in -2.0_f64..2.0,
        ) {
            let m = mat_from_rows(&[vec![m00, m01], vec![m10, m11]]);
            let q = m.transpose() * &m + Mat::identity(2, 2) * 0.1;
            let cert = design(&demo_plant(), &q).unwrap();
            let (q_min, _) = sym_eig_bounds(&q).unwrap();
            let (p_min, p_max) = sym_eig_bounds(&cert.p).unwrap();
            let pb = &cert.p * demo_plant().b();
            let bound = (2.0 * pb.norm_squared() / q_min).max(2.0 * p_max);
            prop_assert!(cert.mu > bound);
            prop_assert!(cert.delta > 0.0);
            prop_assert!(p_min > 0.0);
            prop_assert!(cert.alpha1 <= cert.alpha2);
            prop_assert!(cert.alpha1 > 0.0);
        }
    }
}
