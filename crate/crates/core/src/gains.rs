//! Plant data and boundary gain functions.
//!
//! The gain rows phi and psi solve third-order linear ODE systems
//!
//! ```text
//!   phi''' + phi' + phi (A + lambda I) = 0,   phi(l) = K, phi'(l) = 0, phi''(l) = 0
//!   psi''' + psi' + psi (A + B K)      = 0,   psi(l) = K, psi'(l) = 0, psi''(l) = 0
//! ```
//!
//! integrated in closed form through a 3n x 3n companion system: with
//! `Y(x) = (K, 0, 0) exp((x - l) M)` the block segments of `Y` are exactly
//! `(phi, phi', phi'')`, and evaluation reduces to one matrix exponential per
//! point. `theta_series` expands the kernel boundary data
//! `int_0^t int_0^tau phi(l - xi) B dxi dtau` as an exact power series in `t`
//! with a reported truncation tail bound.

use crate::linops::{self, Mat};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("A must be square, got {rows}x{cols}")]
    ANotSquare { rows: usize, cols: usize },
    #[error("B must be {n}x1, got {rows}x{cols}")]
    BadB { n: usize, rows: usize, cols: usize },
    #[error("K must be 1x{n}, got {rows}x{cols}")]
    BadK { n: usize, rows: usize, cols: usize },
    #[error("non-finite entry in plant data")]
    NonFinite,
    #[error("not_controllable: Kalman rank of (A, B) is deficient")]
    NotControllable,
    #[error("not_hurwitz: A + BK has spectral abscissa {abscissa:e}")]
    NotHurwitz { abscissa: f64 },
    #[error("lambda_nonpositive: lambda = {0}")]
    LambdaNonpositive(f64),
    #[error("length_nonpositive: l = {0}")]
    LengthNonpositive(f64),
    #[error("linear algebra failure: {0}")]
    Linops(#[from] linops::LinopsError),
}

/// Which kernel a gain row or boundary series belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// Direct transform kernel `q`; companion corner is `-(A + lambda I)`.
    Direct,
    /// Inverse transform kernel `h`; companion corner is `-(A + B K)`.
    Inverse,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Direct => "direct",
            KernelKind::Inverse => "inverse",
        }
    }
}

/// Validated plant datum: ODE pair `(A, B)`, stabilizing gain `K`, domain
/// length `l`, and target damping `lambda`.
#[derive(Debug, Clone)]
pub struct Plant {
    a: Mat,
    b: Mat,
    k: Mat,
    l: f64,
    lambda: f64,
}

impl Plant {
    /// Validates dimensions, finiteness, `l > 0`, `lambda > 0`,
    /// controllability of `(A, B)`, and that `A + BK` is Hurwitz.
    pub fn new(a: Mat, b: Mat, k: Mat, l: f64, lambda: f64) -> Result<Plant, PlantError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(PlantError::ANotSquare {
                rows: a.nrows(),
                cols: a.ncols(),
            });
        }
        if b.nrows() != n || b.ncols() != 1 {
            return Err(PlantError::BadB {
                n,
                rows: b.nrows(),
                cols: b.ncols(),
            });
        }
        if k.nrows() != 1 || k.ncols() != n {
            return Err(PlantError::BadK {
                n,
                rows: k.nrows(),
                cols: k.ncols(),
            });
        }
        let finite = |m: &Mat| m.iter().all(|c| c.is_finite());
        if !finite(&a) || !finite(&b) || !finite(&k) || !l.is_finite() || !lambda.is_finite() {
            return Err(PlantError::NonFinite);
        }
        if l <= 0.0 {
            return Err(PlantError::LengthNonpositive(l));
        }
        if lambda <= 0.0 {
            return Err(PlantError::LambdaNonpositive(lambda));
        }
        if !linops::is_controllable(&a, &b)? {
            return Err(PlantError::NotControllable);
        }
        let a_cl = &a + &b * &k;
        let (hurwitz, abscissa) = linops::is_hurwitz(&a_cl)?;
        if !hurwitz {
            return Err(PlantError::NotHurwitz { abscissa });
        }
        Ok(Plant { a, b, k, l, lambda })
    }

    /// Skips all validation. For fixtures and experiments only; the synthesis
    /// pipeline assumes a validated plant.
    pub fn new_unchecked(a: Mat, b: Mat, k: Mat, l: f64, lambda: f64) -> Plant {
        Plant { a, b, k, l, lambda }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn a(&self) -> &Mat {
        &self.a
    }
    pub fn b(&self) -> &Mat {
        &self.b
    }
    pub fn k(&self) -> &Mat {
        &self.k
    }
    pub fn l(&self) -> f64 {
        self.l
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    /// Closed-loop ODE matrix `A + B K`.
    pub fn a_cl(&self) -> Mat {
        &self.a + &self.b * &self.k
    }
}

/// Companion matrix of the third-order gain ODE. Block layout (n x n blocks):
///
/// ```text
///   [ 0  0  -C ]
///   [ I  0  -I ]        C = A + lambda I (direct)  or  A + B K (inverse)
///   [ 0  I   0 ]
/// ```
///
/// so that a row vector `Y = (Y1, Y2, Y3)` obeys `Y' = Y M` with `Y1' = Y2`,
/// `Y2' = Y3`, `Y3' = -Y1 C - Y2`.
pub fn companion(plant: &Plant, kind: KernelKind) -> Mat {
    let n = plant.n();
    let c = match kind {
        KernelKind::Direct => &plant.a + Mat::identity(n, n) * plant.lambda,
        KernelKind::Inverse => plant.a_cl(),
    };
    let mut m = Mat::zeros(3 * n, 3 * n);
    m.view_mut((n, 0), (n, n)).copy_from(&Mat::identity(n, n));
    m.view_mut((2 * n, n), (n, n))
        .copy_from(&Mat::identity(n, n));
    m.view_mut((0, 2 * n), (n, n)).copy_from(&(-&c));
    m.view_mut((n, 2 * n), (n, n))
        .copy_from(&(-Mat::identity(n, n)));
    m
}

/// Propagated companion state `(K, 0, 0) exp((x - l) M)` as a 1 x 3n row.
/// Analytic in `x`; no domain restriction (the kernel boundary series needs
/// values outside `[0, l]`).
fn gain_state(plant: &Plant, kind: KernelKind, x: f64) -> Result<Mat, PlantError> {
    let n = plant.n();
    let m = companion(plant, kind);
    let e = linops::mat_exp(&(m * (x - plant.l)))?;
    let mut row = Mat::zeros(1, 3 * n);
    row.view_mut((0, 0), (1, n)).copy_from(plant.k());
    Ok(row * e)
}

fn check_domain(plant: &Plant, x: f64) -> Result<(), PlantError> {
    // Domain slack covers grid-node rounding at the endpoints.
    if !x.is_finite() || x < -1e-12 || x > plant.l + 1e-12 {
        return Err(PlantError::Linops(linops::LinopsError::Dimension(format!(
            "gain argument x = {x} outside [0, {}]",
            plant.l
        ))));
    }
    Ok(())
}

/// Gain row and its first two derivatives, read off the block segments of the
/// propagated companion state.
fn gain_derivs(plant: &Plant, kind: KernelKind, x: f64) -> Result<(Mat, Mat, Mat), PlantError> {
    let n = plant.n();
    let y = gain_state(plant, kind, x)?;
    Ok((
        y.view((0, 0), (1, n)).into_owned(),
        y.view((0, n), (1, n)).into_owned(),
        y.view((0, 2 * n), (1, n)).into_owned(),
    ))
}

/// Direct gain row `phi(x)`, `x` in `[0, l]`.
pub fn phi(plant: &Plant, x: f64) -> Result<Mat, PlantError> {
    check_domain(plant, x)?;
    Ok(gain_derivs(plant, KernelKind::Direct, x)?.0)
}

/// `(phi, phi', phi'')` at `x` in `[0, l]`.
pub fn phi_derivs(plant: &Plant, x: f64) -> Result<(Mat, Mat, Mat), PlantError> {
    check_domain(plant, x)?;
    gain_derivs(plant, KernelKind::Direct, x)
}

/// Inverse gain row `psi(x)`, `x` in `[0, l]`.
pub fn psi(plant: &Plant, x: f64) -> Result<Mat, PlantError> {
    check_domain(plant, x)?;
    Ok(gain_derivs(plant, KernelKind::Inverse, x)?.0)
}

/// `(psi, psi', psi'')` at `x` in `[0, l]`.
pub fn psi_derivs(plant: &Plant, x: f64) -> Result<(Mat, Mat, Mat), PlantError> {
    check_domain(plant, x)?;
    gain_derivs(plant, KernelKind::Inverse, x)
}

/// Analytic continuation of the gain row of `kind` to arbitrary `x`; used by
/// the boundary series and its quadrature oracle.
pub fn gain_row_analytic(plant: &Plant, kind: KernelKind, x: f64) -> Result<Mat, PlantError> {
    Ok(gain_derivs(plant, kind, x)?.0)
}

/// Power series of the kernel boundary data
/// `theta(t) = int_0^t int_0^tau g(l - xi) B dxi dtau`, where `g` is `phi`
/// for the direct kernel and `-psi` for the inverse kernel.
#[derive(Debug, Clone)]
pub struct ThetaSeries {
    /// `coeffs[j]` multiplies `t^j`; `coeffs[0] = coeffs[1] = 0`.
    pub coeffs: Vec<f64>,
    /// Bound on the dropped series tail, from the Frobenius norm of the
    /// companion matrix: `sum_{k > cap-2} |row| |M|_F^k |E B| / k!`.
    pub tail_bound: f64,
}

impl ThetaSeries {
    pub fn eval(&self, t: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
    }
}

/// Expands `theta` to degree `cap`: `g(l - xi) B = sum_k c_k xi^k` with
/// `c_k = (K, 0, 0) (-M)^k E B / k!` (the kind selects the companion matrix,
/// so `g` is the matching gain row), hence
/// `theta(t) = sum_k c_k t^{k+2} / ((k+1)(k+2))`.
pub fn theta_series(
    plant: &Plant,
    kind: KernelKind,
    cap: usize,
) -> Result<ThetaSeries, PlantError> {
    let n = plant.n();
    let m = companion(plant, kind);
    // E B = [B; 0; 0] as a 3n column.
    let mut eb = Mat::zeros(3 * n, 1);
    eb.view_mut((0, 0), (n, 1)).copy_from(plant.b());
    let mut row = Mat::zeros(1, 3 * n);
    row.view_mut((0, 0), (1, n)).copy_from(plant.k());

    let mut coeffs = vec![0.0; cap + 1];
    let mut cur = row.clone(); // (K,0,0) (-M)^k / k!
    for k in 0..=cap.saturating_sub(2) {
        let ck = (&cur * &eb)[(0, 0)];
        coeffs[k + 2] = ck / ((k + 1) as f64 * (k + 2) as f64);
        cur = (&cur * &m).scale(-1.0 / (k + 1) as f64);
    }

    // Tail bound for the dropped xi^k terms, k > cap - 2.
    let m_norm = m.norm();
    let row_norm = row.norm();
    let eb_norm = eb.norm();
    let mut tail = 0.0;
    // term_k = |M|^k / k!, carried iteratively from k = cap - 1.
    let k0 = cap.saturating_sub(1).max(1);
    let mut term = (1..=k0).fold(1.0_f64, |acc, k| acc * m_norm / k as f64);
    let mut k = k0;
    while term > 1e-300 && k < k0 + 400 {
        tail += term;
        k += 1;
        term *= m_norm / k as f64;
    }
    Ok(ThetaSeries {
        coeffs,
        tail_bound: row_norm * eb_norm * tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::mat_from_rows;
    use crate::quad::simpson_fn;
    use approx::assert_abs_diff_eq;

    pub(crate) fn demo_plant() -> Plant {
        Plant::new(
            mat_from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]),
            Mat::from_column_slice(2, 1, &[0.0, 1.0]),
            Mat::from_row_slice(1, 2, &[-3.0, -4.0]),
            1.0,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn plant_validation_rejects_bad_data() {
        let a = mat_from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let b = Mat::from_column_slice(2, 1, &[0.0, 1.0]);
        let k = Mat::from_row_slice(1, 2, &[-3.0, -4.0]);

        assert!(matches!(
            Plant::new(a.clone(), b.clone(), k.clone(), 1.0, -1.0),
            Err(PlantError::LambdaNonpositive(_))
        ));
        assert!(matches!(
            Plant::new(a.clone(), b.clone(), k.clone(), 0.0, 1.0),
            Err(PlantError::LengthNonpositive(_))
        ));
        // K = 0 leaves A + BK = A with eigenvalues +-1.
        assert!(matches!(
            Plant::new(a.clone(), b.clone(), Mat::zeros(1, 2), 1.0, 1.0),
            Err(PlantError::NotHurwitz { .. })
        ));
        // B aligned with a single eigenvector of a diagonal A.
        let a_diag = mat_from_rows(&[vec![-1.0, 0.0], vec![0.0, -2.0]]);
        let b_bad = Mat::from_column_slice(2, 1, &[1.0, 0.0]);
        assert!(matches!(
            Plant::new(a_diag, b_bad, k.clone(), 1.0, 1.0),
            Err(PlantError::NotControllable)
        ));
        assert!(matches!(
            Plant::new(a.clone(), Mat::zeros(3, 1), k, 1.0, 1.0),
            Err(PlantError::BadB { .. })
        ));
        assert!(Plant::new(a, b, Mat::from_row_slice(1, 2, &[-3.0, -4.0]), 1.0, 1.0).is_ok());
    }

    #[test]
    fn gain_rows_meet_terminal_conditions() {
        let plant = demo_plant();
        let l = plant.l();
        for (value, d1, d2) in [
            phi_derivs(&plant, l).unwrap(),
            psi_derivs(&plant, l).unwrap(),
        ] {
            assert!((value - plant.k()).norm() <= 1e-12);
            assert!(d1.norm() <= 1e-12, "first derivative at l: {:e}", d1.norm());
            assert!(
                d2.norm() <= 1e-12,
                "second derivative at l: {:e}",
                d2.norm()
            );
        }
    }

    #[test]
    fn companion_state_satisfies_block_shift() {
        // Y' = Y M implies the block identities Y1' = Y2 and Y2' = Y3;
        // checked with a centered difference on the propagated state.
        let plant = demo_plant();
        let h = 1e-5;
        for kind in [KernelKind::Direct, KernelKind::Inverse] {
            for x in [0.2, 0.55, 0.9] {
                let (_, d1, d2) = gain_derivs(&plant, kind, x).unwrap();
                let (vp, d1p, _) = gain_derivs(&plant, kind, x + h).unwrap();
                let (vm, d1m, _) = gain_derivs(&plant, kind, x - h).unwrap();
                let fd1 = (vp - vm) / (2.0 * h);
                let fd2 = (d1p - d1m) / (2.0 * h);
                assert!((fd1 - &d1).norm() <= 1e-8, "Y1' != Y2 at {x}");
                assert!((fd2 - &d2).norm() <= 1e-8, "Y2' != Y3 at {x}");
            }
        }
    }

    #[test]
    fn gain_rows_reject_out_of_domain_points() {
        let plant = demo_plant();
        assert!(phi(&plant, -0.5).is_err());
        assert!(psi(&plant, 1.5).is_err());
        assert!(phi(&plant, 0.0).is_ok());
        // The analytic continuation accepts the same point.
        assert!(gain_row_analytic(&plant, KernelKind::Direct, -0.5).is_ok());
    }

    #[test]
    fn theta_series_low_order_structure() {
        let plant = demo_plant();
        for kind in [KernelKind::Direct, KernelKind::Inverse] {
            let th = theta_series(&plant, kind, 40).unwrap();
            assert_eq!(th.coeffs[0], 0.0);
            assert_eq!(th.coeffs[1], 0.0);
            // theta''(0) = g(l) B and both gain rows equal K at x = l.
            let kb = (plant.k() * plant.b())[(0, 0)];
            assert_abs_diff_eq!(2.0 * th.coeffs[2], kb, epsilon = 1e-14);
            assert!(th.tail_bound.is_finite() && th.tail_bound >= 0.0);
            assert!(th.tail_bound < 1e-12, "tail {:e}", th.tail_bound);
        }
    }

    #[test]
    fn theta_scalar_example() {
        // n = 1, A = 0, B = 1, K = -1, lambda = 1: phi(l) B = -1, so the
        // series opens with -t^2 / 2.
        let plant = Plant::new(
            Mat::from_element(1, 1, 0.0),
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, -1.0),
            1.0,
            1.0,
        )
        .unwrap();
        let th = theta_series(&plant, KernelKind::Direct, 30).unwrap();
        assert_abs_diff_eq!(th.coeffs[2], -0.5, epsilon = 1e-15);
    }

    #[test]
    fn theta_matches_quadrature_of_double_integral() {
        // The defining double integral collapses by Fubini to
        // int_0^t (t - xi) g(l - xi) B dxi; quadrature of that through the
        // analytic gain row must match the series on [0, 2l].
        let plant = demo_plant();
        for kind in [KernelKind::Direct, KernelKind::Inverse] {
            let th = theta_series(&plant, kind, 40).unwrap();
            for t in [0.3, 0.7, 1.3, 2.0] {
                let oracle = simpson_fn(
                    |xi| {
                        let row = gain_row_analytic(&plant, kind, plant.l() - xi).unwrap();
                        (t - xi) * (row * plant.b())[(0, 0)]
                    },
                    0.0,
                    t,
                    256,
                );
                assert_abs_diff_eq!(th.eval(t), oracle, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn theta_is_quadratically_bounded_near_zero() {
        let plant = demo_plant();
        let th = theta_series(&plant, KernelKind::Direct, 40).unwrap();
        let mut rho: f64 = 0.0;
        for k in 1..=40 {
            let t = 2.0 * plant.l() * k as f64 / 40.0;
            rho = rho.max(th.eval(t).abs() / (t * t));
        }
        assert!(rho.is_finite());
        for k in 1..=40 {
            let t = 2.0 * plant.l() * k as f64 / 40.0;
            assert!(th.eval(t).abs() <= rho * t * t + 1e-15);
        }
    }
}
