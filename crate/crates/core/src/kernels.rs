//! Transform kernels by successive approximation in coefficient space.
//!
//! In the triangle coordinates `s = x + y`, `t = y - x` the direct kernel
//! `q(x, y) = G(s, t)` satisfies the integral equation
//!
//! ```text
//!   G = theta(t) - (lambda t / 6)(2l - s)
//!       - 2 int_0^t G_s dtau
//!       - int_0^t int_0^tau (G_ss + G) dxi dtau
//!       - 1/6 int_0^t int_0^tau int_s^{2l-xi}
//!             (4 G_sss + 4 G_s - lambda G + 12 G_sst) deta dxi dtau
//! ```
//!
//! whose unique fixed point is the kernel; the inverse kernel `h` satisfies
//! the same equation with `+lambda H` in the band integrand and `theta` built
//! from `-psi B`. [`iterate_once`] applies one step of the recursion in the
//! form `theta + L[G]`; [`solve_kernel`] iterates the full affine map
//! (seed term included, so the fixed point keeps the diagonal derivative
//! condition) until the coefficient change drops below tolerance.
//!
//! Everything here is exact polynomial arithmetic; the only approximations
//! are the degree cap and the truncation of the `theta` series, both
//! surfaced in the solution report.

use crate::gains::{self, KernelKind, Plant, ThetaSeries};
use crate::parallel;
use crate::poly2::{Poly2, Var};
use crate::quad::simpson_fn;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error(
        "kernel iteration did not converge: {iterations} iterations, last delta {last_delta:e}"
    )]
    NoConvergence {
        iterations: usize,
        last_delta: f64,
        history: Vec<f64>,
    },
    #[error("point ({x}, {y}) outside the kernel triangle 0 <= x <= y <= {l}")]
    Domain { x: f64, y: f64, l: f64 },
    #[error("expected a {expected} kernel solution, got {got}")]
    KindMismatch {
        expected: &'static str,
        got: &'static str,
    },
    #[error(transparent)]
    Plant(#[from] gains::PlantError),
    #[error("malformed kernel dump: {0}")]
    Parse(String),
}

/// Options for [`solve_kernel`].
#[derive(Debug, Clone)]
pub struct KernelSolveOptions {
    /// Total-degree cap of the polynomial representation.
    pub degree_cap: usize,
    /// Convergence threshold on the sup coefficient change per iteration.
    pub tol: f64,
    /// Iteration budget.
    pub max_iter: usize,
}

impl Default for KernelSolveOptions {
    fn default() -> Self {
        KernelSolveOptions {
            degree_cap: 40,
            tol: 1e-13,
            max_iter: 60,
        }
    }
}

/// Converged kernel in triangle coordinates, with its iteration record.
#[derive(Debug, Clone)]
pub struct KernelSolution {
    pub kind: KernelKind,
    /// Kernel polynomial `G(s, t)`; evaluate at `(x + y, y - x)`.
    pub g: Poly2,
    pub lambda: f64,
    pub l: f64,
    pub iterations: usize,
    /// Per-iteration sup coefficient changes.
    pub deltas: Vec<f64>,
    /// Reported bound on the truncated tail of the boundary series.
    pub theta_tail_bound: f64,
}

impl KernelSolution {
    /// Kernel value in plant coordinates; `(x, y)` must lie in the triangle
    /// `0 <= x <= y <= l` (slack 1e-12 for grid rounding).
    pub fn eval_xy(&self, x: f64, y: f64) -> Result<f64, KernelError> {
        let eps = 1e-12;
        if !(x >= -eps && y >= x - eps && y <= self.l + eps) {
            return Err(KernelError::Domain { x, y, l: self.l });
        }
        Ok(self.g.eval(x + y, y - x))
    }
}

/// Seed iterate `G1(s, t) = -(lambda t / 6)(2l - s)`.
pub fn seed(cap: usize, lambda: f64, l: f64) -> Poly2 {
    Poly2::from_terms(
        cap,
        &[(0, 1, -lambda / 6.0 * 2.0 * l), (1, 1, lambda / 6.0)],
    )
}

/// Converts a boundary series into the polynomial representation.
pub fn theta_poly(theta: &ThetaSeries, cap: usize) -> Poly2 {
    let terms: Vec<(usize, usize, f64)> = theta
        .coeffs
        .iter()
        .enumerate()
        .map(|(j, &c)| (0, j, c))
        .collect();
    Poly2::from_terms(cap, &terms)
}

/// Sign of the `lambda G` term in the band integrand: `-1` for the direct
/// kernel, `+1` for the inverse kernel.
pub fn sign_lambda(kind: KernelKind) -> f64 {
    match kind {
        KernelKind::Direct => -1.0,
        KernelKind::Inverse => 1.0,
    }
}

/// One application of the successive-approximation operator
/// `G -> theta + L[G]` (the recursion exactly as the derivation states it;
/// the seed term is carried separately by [`solve_kernel`]).
pub fn iterate_once(g: &Poly2, theta: &Poly2, lambda: f64, l: f64, kind: KernelKind) -> Poly2 {
    let sigma = sign_lambda(kind);
    let g_s = g.diff(Var::S, 1);
    let g_ss = g.diff(Var::S, 2);

    // -2 int_0^t G_s dtau
    let term1 = g_s.int_first_from_0(Var::T).scale(-2.0);

    // -int_0^t int_0^tau (G_ss + G) dxi dtau
    let term2 = g_ss
        .add(g)
        .int_first_from_0(Var::T)
        .int_first_from_0(Var::T)
        .scale(-1.0);

    // -1/6 int_0^t int_0^tau int_s^{2l-xi}
    //      (4 G_eee + 4 G_e + sigma lambda G + 12 G_eet) deta dxi dtau
    let band_integrand = g
        .diff(Var::S, 3)
        .scale(4.0)
        .add_scaled(4.0, &g_s)
        .add_scaled(sigma * lambda, g)
        .add_scaled(12.0, &g_ss.diff(Var::T, 1));
    let term3 = band_integrand
        .int_eta_band(l)
        .int_first_from_0(Var::T)
        .int_first_from_0(Var::T)
        .scale(-1.0 / 6.0);

    theta.add(&term1).add(&term2).add(&term3)
}

/// The explicit second iterate of the direct-kernel recursion: `theta(t)`
/// plus a fixed polynomial in `(s, t)`, transcribed from the derivation.
/// Counterpart of `iterate_once(seed, theta, ...)` for cross-checks.
pub fn second_iterate_closed_form(theta: &Poly2, lambda: f64, l: f64, cap: usize) -> Poly2 {
    let part = Poly2::from_terms(
        cap,
        &[
            (0, 2, -lambda / 6.0),
            (
                0,
                3,
                (lambda * l / 9.0 - lambda * lambda * l * l / 18.0) / 6.0,
            ),
            (0, 4, lambda / 18.0 / 6.0),
            (0, 5, lambda * lambda / 240.0 / 6.0),
            (1, 3, (l * lambda * lambda - lambda) / 18.0 / 6.0),
            (2, 3, -lambda * lambda / 72.0 / 6.0),
        ],
    );
    theta.add(&part)
}

/// Solves for the kernel of `kind` by iterating the affine map
/// `G -> G1 + theta + L[G]` from `G1` until the sup coefficient change is at
/// most `tol`. The seed term `G1` is part of the map's affine part: it is
/// what carries the diagonal derivative condition
/// `dG/dt(s, 0) = (lambda/6)(s - 2l)` into the fixed point.
pub fn solve_kernel(
    plant: &Plant,
    kind: KernelKind,
    opts: &KernelSolveOptions,
) -> Result<KernelSolution, KernelError> {
    let cap = opts.degree_cap;
    let theta = gains::theta_series(plant, kind, cap)?;
    let th_poly = theta_poly(&theta, cap);
    let g1 = seed(cap, plant.lambda(), plant.l());

    let mut g = g1.clone();
    let mut deltas = Vec::new();
    for iter in 1..=opts.max_iter {
        let next = g1.add(&iterate_once(&g, &th_poly, plant.lambda(), plant.l(), kind));
        let delta = next.coeff_sup_diff(&g);
        deltas.push(delta);
        g = next;
        if delta <= opts.tol {
            return Ok(KernelSolution {
                kind,
                g,
                lambda: plant.lambda(),
                l: plant.l(),
                iterations: iter,
                deltas,
                theta_tail_bound: theta.tail_bound,
            });
        }
    }
    Err(KernelError::NoConvergence {
        iterations: opts.max_iter,
        last_delta: *deltas.last().unwrap_or(&f64::NAN),
        history: deltas,
    })
}

/// Direct kernel value `q(x, y)`.
pub fn q_eval(sol: &KernelSolution, x: f64, y: f64) -> Result<f64, KernelError> {
    if sol.kind != KernelKind::Direct {
        return Err(KernelError::KindMismatch {
            expected: "direct",
            got: sol.kind.name(),
        });
    }
    sol.eval_xy(x, y)
}

/// Inverse kernel value `h(x, y)`.
pub fn h_eval(sol: &KernelSolution, x: f64, y: f64) -> Result<f64, KernelError> {
    if sol.kind != KernelKind::Inverse {
        return Err(KernelError::KindMismatch {
            expected: "inverse",
            got: sol.kind.name(),
        });
    }
    sol.eval_xy(x, y)
}

/// Residuals of the defining system, evaluated from exact polynomial
/// derivatives on a uniform triangle grid.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ResidualReport {
    /// Sup of the PDE residual over the triangle.
    pub pde_sup: f64,
    /// Sup of the boundary-condition residual along `y = l`.
    pub bc_sup: f64,
    /// Sup of `|q(x, x)|` (exactly zero by construction of the iteration).
    pub diag_sup: f64,
    /// Sup of `|q_x(x, x) - (lambda/3)(l - x)|`.
    pub diag_deriv_sup: f64,
    /// True if any nonzero coefficient was dropped at the degree cap.
    pub truncated: bool,
}

impl ResidualReport {
    pub fn max_residual(&self) -> f64 {
        self.pde_sup
            .max(self.bc_sup)
            .max(self.diag_sup)
            .max(self.diag_deriv_sup)
    }
}

/// Evaluates [`ResidualReport`] on an `(grid_n x grid_n)` sampling of the
/// triangle (plus 1-D boundary and diagonal grids of the same resolution).
pub fn kernel_residuals(
    sol: &KernelSolution,
    plant: &Plant,
    grid_n: usize,
) -> Result<ResidualReport, KernelError> {
    assert!(grid_n >= 2);
    let (lambda, l) = (sol.lambda, sol.l);
    let sigma = sign_lambda(sol.kind);
    let g = &sol.g;

    let g_s = g.diff(Var::S, 1);
    let g_t = g.diff(Var::T, 1);
    // PDE in triangle coordinates: 6 G_tts + 2 G_sss + 2 G_s = sigma_pde lambda G
    // where sigma_pde = -1 for q and +1 for h, i.e. residual = ... - sigma lambda G.
    let pde = g
        .diff(Var::S, 3)
        .scale(2.0)
        .add_scaled(6.0, &g_s.diff(Var::T, 2))
        .add_scaled(2.0, &g_s)
        .add_scaled(-sigma * lambda, g);

    let m = grid_n - 1;
    let pde_rows = parallel::map_indexed(grid_n, |i| {
        let t = l * i as f64 / m as f64;
        let mut sup = 0.0_f64;
        for j in 0..grid_n {
            let s = t + (2.0 * l - 2.0 * t) * j as f64 / m as f64;
            sup = sup.max(pde.eval(s, t).abs());
        }
        sup
    });
    let pde_sup = pde_rows.into_iter().fold(0.0_f64, f64::max);

    // Boundary condition along y = l, i.e. t = 2l - s for s in [l, 2l]:
    // (G + G_ss + 2 G_st + G_tt)(s, 2l - s) equals phi(s - l) B for the
    // direct kernel and psi(s - l) B for the inverse one. Both carry a plus
    // sign: the inverse data is pinned at the corner s = 2l, where the
    // resolvent identity h = q + int h q forces the traces of h and q to
    // agree, and there the direct condition reads K B.
    let bc_poly = g
        .add(&g.diff(Var::S, 2))
        .add_scaled(2.0, &g_s.diff(Var::T, 1))
        .add(&g.diff(Var::T, 2));
    let bc_vals = parallel::map_indexed(grid_n, |j| {
        let s = l + l * j as f64 / m as f64;
        let x = s - l;
        let row = match sol.kind {
            KernelKind::Direct => gains::phi(plant, x),
            KernelKind::Inverse => gains::psi(plant, x),
        };
        match row {
            Ok(r) => {
                let target = (r * plant.b())[(0, 0)];
                (bc_poly.eval(s, 2.0 * l - s) - target).abs()
            }
            Err(_) => f64::NAN,
        }
    });
    let bc_sup = bc_vals.into_iter().fold(0.0_f64, f64::max);

    let mut diag_sup = 0.0_f64;
    let mut diag_deriv_sup = 0.0_f64;
    for j in 0..grid_n {
        let x = l * j as f64 / m as f64;
        diag_sup = diag_sup.max(g.eval(2.0 * x, 0.0).abs());
        // q_x(x, x) = (G_s - G_t)(2x, 0)
        let qx = g_s.eval(2.0 * x, 0.0) - g_t.eval(2.0 * x, 0.0);
        diag_deriv_sup = diag_deriv_sup.max((qx - lambda / 3.0 * (l - x)).abs());
    }

    Ok(ResidualReport {
        pde_sup,
        bc_sup,
        diag_sup,
        diag_deriv_sup,
        truncated: g.truncated(),
    })
}

/// Reciprocity residuals tying the two kernels and two gain rows together:
///
/// ```text
///   h(x, z) = q(x, z) + int_x^z h(x, y) q(y, z) dy
///   psi(x)  = phi(x)  + int_x^l h(x, y) phi(y) dy
/// ```
#[derive(Debug, Clone, serde::Serialize)]
pub struct ReciprocityReport {
    pub kernel_sup: f64,
    pub gain_sup: f64,
}

/// Checks both reciprocity identities with Simpson quadrature (`panels`
/// panels, so `panels + 1` nodes) over a `grid_n` point triangle grid.
pub fn reciprocity_check(
    direct: &KernelSolution,
    inverse: &KernelSolution,
    plant: &Plant,
    grid_n: usize,
    panels: usize,
) -> Result<ReciprocityReport, KernelError> {
    if direct.kind != KernelKind::Direct {
        return Err(KernelError::KindMismatch {
            expected: "direct",
            got: direct.kind.name(),
        });
    }
    if inverse.kind != KernelKind::Inverse {
        return Err(KernelError::KindMismatch {
            expected: "inverse",
            got: inverse.kind.name(),
        });
    }
    let l = plant.l();
    let m = grid_n - 1;

    let kernel_rows = parallel::map_indexed(grid_n, |i| {
        let x = l * i as f64 / m as f64;
        let mut sup = 0.0_f64;
        for j in i..grid_n {
            let z = l * j as f64 / m as f64;
            let integral = simpson_fn(
                |y| inverse.g.eval(x + y, y - x) * direct.g.eval(y + z, z - y),
                x,
                z,
                panels,
            );
            let defect = inverse.g.eval(x + z, z - x) - direct.g.eval(x + z, z - x) - integral;
            sup = sup.max(defect.abs());
        }
        sup
    });
    let kernel_sup = kernel_rows.into_iter().fold(0.0_f64, f64::max);

    let n = plant.n();
    let gain_rows: Vec<Result<f64, KernelError>> = parallel::map_indexed(grid_n, |i| {
        let x = l * i as f64 / m as f64;
        let phi_x = gains::phi(plant, x)?;
        let psi_x = gains::psi(plant, x)?;
        // Tabulate phi rows once per x; all components share the nodes.
        let h = if panels == 0 {
            0.0
        } else {
            (l - x) / panels as f64
        };
        let mut rows = Vec::with_capacity(panels + 1);
        for k in 0..=panels {
            let y = x + k as f64 * h;
            let w = inverse.g.eval(x + y, y - x);
            rows.push((y, w, gains::phi(plant, y.min(l))?));
        }
        let mut sup = 0.0_f64;
        for c in 0..n {
            let integral = if x == l {
                0.0
            } else {
                let vals: Vec<f64> = rows.iter().map(|(_, w, r)| w * r[(0, c)]).collect();
                crate::quad::simpson_uniform(&vals, h)
            };
            sup = sup.max((psi_x[(0, c)] - phi_x[(0, c)] - integral).abs());
        }
        Ok(sup)
    });
    let mut gain_sup = 0.0_f64;
    for r in gain_rows {
        gain_sup = gain_sup.max(r?);
    }

    Ok(ReciprocityReport {
        kernel_sup,
        gain_sup,
    })
}

/// Serializes a kernel solution with its residual report. Coefficients are
/// written as 17-significant-digit decimals so a reload is bit-exact.
pub fn dump_json(sol: &KernelSolution, residuals: &ResidualReport) -> String {
    let mut out = String::new();
    out.push_str("{\n");
    out.push_str(&format!("  \"which\": \"{}\",\n", sol.kind.name()));
    out.push_str(&format!("  \"lambda\": {:.16e},\n", sol.lambda));
    out.push_str(&format!("  \"l\": {:.16e},\n", sol.l));
    out.push_str(&format!("  \"deg_cap\": {},\n", sol.g.cap()));
    out.push_str(&format!("  \"iterations\": {},\n", sol.iterations));
    out.push_str(&format!(
        "  \"theta_tail_bound\": {:.16e},\n",
        sol.theta_tail_bound
    ));
    out.push_str(&format!("  \"truncated\": {},\n", sol.g.truncated()));
    out.push_str("  \"coeffs\": [\n");
    let mut first = true;
    for i in 0..=sol.g.cap() {
        for j in 0..=sol.g.cap() {
            let c = sol.g.coeff(i, j);
            if c != 0.0 {
                if !first {
                    out.push_str(",\n");
                }
                out.push_str(&format!("    [{i}, {j}, {c:.16e}]"));
                first = false;
            }
        }
    }
    out.push_str("\n  ],\n");
    out.push_str("  \"residuals\": {\n");
    out.push_str(&format!("    \"pde_sup\": {:.16e},\n", residuals.pde_sup));
    out.push_str(&format!("    \"bc_sup\": {:.16e},\n", residuals.bc_sup));
    out.push_str(&format!("    \"diag_sup\": {:.16e},\n", residuals.diag_sup));
    out.push_str(&format!(
        "    \"diag_deriv_sup\": {:.16e}\n",
        residuals.diag_deriv_sup
    ));
    out.push_str("  }\n}\n");
    out
}

/// Reloads a kernel dump produced by [`dump_json`]. The iteration history is
/// not serialized; `deltas` comes back empty.
pub fn parse_json(text: &str) -> Result<KernelSolution, KernelError> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| KernelError::Parse(e.to_string()))?;
    let which = v["which"]
        .as_str()
        .ok_or_else(|| KernelError::Parse("missing which".into()))?;
    let kind = match which {
        "direct" => KernelKind::Direct,
        "inverse" => KernelKind::Inverse,
        other => return Err(KernelError::Parse(format!("unknown kind {other}"))),
    };
    let get = |key: &str| -> Result<f64, KernelError> {
        v[key]
            .as_f64()
            .ok_or_else(|| KernelError::Parse(format!("missing {key}")))
    };
    let cap = get("deg_cap")? as usize;
    let terms: Vec<(usize, usize, f64)> = v["coeffs"]
        .as_array()
        .ok_or_else(|| KernelError::Parse("missing coeffs".into()))?
        .iter()
        .map(|triple| {
            let arr = triple
                .as_array()
                .filter(|a| a.len() == 3)
                .ok_or_else(|| KernelError::Parse("bad coefficient triple".into()))?;
            Ok((
                arr[0]
                    .as_u64()
                    .ok_or_else(|| KernelError::Parse("bad i".into()))? as usize,
                arr[1]
                    .as_u64()
                    .ok_or_else(|| KernelError::Parse("bad j".into()))? as usize,
                arr[2]
                    .as_f64()
                    .ok_or_else(|| KernelError::Parse("bad c".into()))?,
            ))
        })
        .collect::<Result<_, KernelError>>()?;
    Ok(KernelSolution {
        kind,
        g: Poly2::from_terms(cap, &terms),
        lambda: get("lambda")?,
        l: get("l")?,
        iterations: get("iterations")? as usize,
        deltas: Vec::new(),
        theta_tail_bound: get("theta_tail_bound")?,
    })
}
