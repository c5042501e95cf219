//! Grid evaluation of the state transforms and the boundary feedback law.
//!
//! States live on a uniform grid `x_j = j l / N`. The forward transform maps
//! a plant state `(X, u)` to the target state `(X, w)`,
//!
//! ```text
//!   w_j = u_j - int_{x_j}^l q(x_j, y) u(y) dy - phi(x_j) X,
//! ```
//!
//! the inverse transform mirrors it with `h`, `psi` and plus signs, and the
//! feedback law closes the loop at the left boundary:
//!
//! ```text
//!   U = int_0^l q(0, y) u(y) dy + phi(0) X.
//! ```
//!
//! Kernel and gain values are tabulated once into a [`KernelTable`]; the
//! transforms are plain quadratures over the table rows afterwards.

use crate::gains::{self, KernelKind, Plant, PlantError};
use crate::kernels::{KernelError, KernelSolution};
use crate::linops::{Mat, Vector};
use crate::parallel;
use crate::quad::{simpson_uniform, tail_quad};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("invalid sampled state: {0}")]
    BadState(String),
    #[error("grid mismatch: state has {state} panels over length {state_l}, table has {table} over {table_l}")]
    GridMismatch {
        state: usize,
        table: usize,
        state_l: f64,
        table_l: f64,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Plant(#[from] PlantError),
}

/// Grid node `x_j = l * j / n_panels`, exact at both endpoints.
pub fn grid_x(l: f64, n_panels: usize, j: usize) -> f64 {
    l * (j as f64 / n_panels as f64)
}

/// A cascade state `(X, u)` with `u` sampled on the uniform grid.
#[derive(Debug, Clone)]
pub struct SampledState {
    pub x_ode: Vector,
    pub u: Vec<f64>,
    pub l: f64,
}

impl SampledState {
    /// `u` must hold `N + 1` samples with `N` even and at least 8.
    pub fn new(x_ode: Vector, u: Vec<f64>, l: f64) -> Result<Self, TransformError> {
        if u.len() < 9 || (u.len() - 1) % 2 != 0 {
            return Err(TransformError::BadState(format!(
                "need an odd sample count of at least 9, got {}",
                u.len()
            )));
        }
        if !(l > 0.0) || !l.is_finite() {
            return Err(TransformError::BadState(format!("bad length {l}")));
        }
        if u.iter().any(|v| !v.is_finite()) || x_ode.iter().any(|v| !v.is_finite()) {
            return Err(TransformError::BadState("non-finite sample".into()));
        }
        Ok(SampledState { x_ode, u, l })
    }

    pub fn zero(n_ode: usize, n_panels: usize, l: f64) -> Result<Self, TransformError> {
        SampledState::new(Vector::zeros(n_ode), vec![0.0; n_panels + 1], l)
    }

    pub fn n_panels(&self) -> usize {
        self.u.len() - 1
    }

    pub fn dx(&self) -> f64 {
        self.l / self.n_panels() as f64
    }

    /// Cascade norm `(|X|^2 + ||u||_L2^2)^(1/2)`, the field part by composite
    /// Simpson over the grid.
    pub fn h_norm(&self) -> f64 {
        let sq: Vec<f64> = self.u.iter().map(|v| v * v).collect();
        (self.x_ode.norm_squared() + simpson_uniform(&sq, self.dx())).sqrt()
    }
}

/// Kernel and gain values tabulated on the transform grid. Rows are indexed
/// by `j` (the lower integration limit); entries below the diagonal are
/// never read and stay zero.
#[derive(Debug, Clone)]
pub struct KernelTable {
    n_panels: usize,
    l: f64,
    q: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    phi: Vec<Mat>,
    psi: Vec<Mat>,
}

impl KernelTable {
    /// Tabulates both kernels and both gain rows at the grid nodes.
    pub fn build(
        plant: &Plant,
        direct: &KernelSolution,
        inverse: &KernelSolution,
        n_panels: usize,
    ) -> Result<KernelTable, TransformError> {
        if direct.kind != KernelKind::Direct || inverse.kind != KernelKind::Inverse {
            return Err(TransformError::BadState(
                "kernel solutions passed in the wrong order".into(),
            ));
        }
        if (direct.l - plant.l()).abs() > 1e-12 || (inverse.l - plant.l()).abs() > 1e-12 {
            return Err(TransformError::BadState(
                "kernel length does not match the plant".into(),
            ));
        }
        if n_panels < 8 || n_panels % 2 != 0 {
            return Err(TransformError::BadState(format!(
                "need an even panel count of at least 8, got {n_panels}"
            )));
        }
        let l = plant.l();
        let rows: Vec<Result<(Vec<f64>, Vec<f64>, Mat, Mat), TransformError>> =
            parallel::map_indexed(n_panels + 1, |j| {
                let x = grid_x(l, n_panels, j);
                let mut qrow = vec![0.0; n_panels + 1];
                let mut hrow = vec![0.0; n_panels + 1];
                for k in j..=n_panels {
                    let y = grid_x(l, n_panels, k);
                    qrow[k] = direct.eval_xy(x, y)?;
                    hrow[k] = inverse.eval_xy(x, y)?;
                }
                Ok((qrow, hrow, gains::phi(plant, x)?, gains::psi(plant, x)?))
            });
        let mut q = Vec::with_capacity(n_panels + 1);
        let mut h = Vec::with_capacity(n_panels + 1);
        let mut phi = Vec::with_capacity(n_panels + 1);
        let mut psi = Vec::with_capacity(n_panels + 1);
        for row in rows {
            let (qr, hr, pr, sr) = row?;
            q.push(qr);
            h.push(hr);
            phi.push(pr);
            psi.push(sr);
        }
        Ok(KernelTable {
            n_panels,
            l,
            q,
            h,
            phi,
            psi,
        })
    }

    pub fn n_panels(&self) -> usize {
        self.n_panels
    }

    pub fn l(&self) -> f64 {
        self.l
    }

    /// Gain row `phi(x_j)`.
    pub fn phi_row(&self, j: usize) -> &Mat {
        &self.phi[j]
    }

    /// Gain row `psi(x_j)`.
    pub fn psi_row(&self, j: usize) -> &Mat {
        &self.psi[j]
    }

    fn check_grid(&self, state: &SampledState) -> Result<(), TransformError> {
        if state.n_panels() != self.n_panels || (state.l - self.l).abs() > 1e-12 {
            return Err(TransformError::GridMismatch {
                state: state.n_panels(),
                table: self.n_panels,
                state_l: state.l,
                table_l: self.l,
            });
        }
        Ok(())
    }
}

/// Forward transform `(X, u) -> (X, w)`. The tail integral over `[x_j, l]`
/// uses composite Simpson when the tail has an even panel count and
/// composite trapezoid otherwise.
pub fn forward(state: &SampledState, table: &KernelTable) -> Result<SampledState, TransformError> {
    table.check_grid(state)?;
    let dx = state.dx();
    let w = parallel::map_indexed(state.u.len(), |j| {
        let vals: Vec<f64> = (j..state.u.len())
            .map(|k| table.q[j][k] * state.u[k])
            .collect();
        state.u[j] - tail_quad(&vals, dx) - (&table.phi[j] * &state.x_ode)[(0, 0)]
    });
    Ok(SampledState {
        x_ode: state.x_ode.clone(),
        u: w,
        l: state.l,
    })
}

/// Inverse transform `(X, w) -> (X, u)`; mirror of [`forward`] with the
/// inverse kernel, `psi`, and plus signs.
pub fn inverse(state: &SampledState, table: &KernelTable) -> Result<SampledState, TransformError> {
    table.check_grid(state)?;
    let dx = state.dx();
    let u = parallel::map_indexed(state.u.len(), |j| {
        let vals: Vec<f64> = (j..state.u.len())
            .map(|k| table.h[j][k] * state.u[k])
            .collect();
        state.u[j] + tail_quad(&vals, dx) + (&table.psi[j] * &state.x_ode)[(0, 0)]
    });
    Ok(SampledState {
        x_ode: state.x_ode.clone(),
        u,
        l: state.l,
    })
}

/// Boundary feedback `U = int_0^l q(0, y) u(y) dy + phi(0) X`, full-grid
/// composite Simpson.
pub fn feedback_u(state: &SampledState, table: &KernelTable) -> Result<f64, TransformError> {
    table.check_grid(state)?;
    let vals: Vec<f64> = state
        .u
        .iter()
        .enumerate()
        .map(|(k, &uk)| table.q[0][k] * uk)
        .collect();
    Ok(simpson_uniform(&vals, state.dx()) + (&table.phi[0] * &state.x_ode)[(0, 0)])
}
