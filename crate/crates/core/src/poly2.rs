//! Exact dense bivariate polynomials in the kernel variables `(s, t)`.
//!
//! The kernel fixed-point iteration lives entirely in coefficient space:
//! differentiation, integration from zero, and the band integral
//! `int_s^{2l-t} p(eta, t) deta` are all coefficient-exact f64 operations, so
//! the iteration introduces no quadrature error. A total-degree cap bounds the
//! representation; any nonzero coefficient pushed past the cap is dropped and
//! recorded on a sticky truncation flag, which turns the tail of the series
//! argument into a measurable event instead of a silent error.

use thiserror::Error;

/// Variable selector for differentiation and integration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    /// First variable (`s`, or `eta` inside the band integral).
    S,
    /// Second variable (`t`, or `xi` inside the band integral).
    T,
}

#[derive(Debug, Error)]
pub enum Poly2Error {
    #[error("degree cap mismatch: {0} vs {1}")]
    CapMismatch(usize, usize),
    #[error("malformed dump line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Dense bivariate polynomial `sum c[i][j] s^i t^j` with `i + j <= cap`.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly2 {
    /// Row `i` holds the coefficients of `s^i t^j` for `j = 0..=cap`.
    coeffs: Vec<Vec<f64>>,
    cap: usize,
    truncated: bool,
}

impl Poly2 {
    pub fn zero(cap: usize) -> Self {
        Poly2 {
            coeffs: vec![vec![0.0; cap + 1]; cap + 1],
            cap,
            truncated: false,
        }
    }

    pub fn constant(cap: usize, c: f64) -> Self {
        let mut p = Poly2::zero(cap);
        p.coeffs[0][0] = c;
        p
    }

    /// Builds a polynomial from `(i, j, c)` monomial terms. Terms beyond the
    /// cap are dropped and flagged; repeated `(i, j)` terms accumulate.
    pub fn from_terms(cap: usize, terms: &[(usize, usize, f64)]) -> Self {
        let mut p = Poly2::zero(cap);
        for &(i, j, c) in terms {
            if i + j > cap {
                if c != 0.0 {
                    p.truncated = true;
                }
            } else {
                p.coeffs[i][j] += c;
            }
        }
        p
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// True if any nonzero coefficient has been dropped at the cap, in this
    /// polynomial or any operand it was derived from.
    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn coeff(&self, i: usize, j: usize) -> f64 {
        if i <= self.cap && j <= self.cap {
            self.coeffs[i][j]
        } else {
            0.0
        }
    }

    pub fn deg_s(&self) -> usize {
        (0..=self.cap)
            .rev()
            .find(|&i| self.coeffs[i].iter().any(|&c| c != 0.0))
            .unwrap_or(0)
    }

    pub fn deg_t(&self) -> usize {
        (0..=self.cap)
            .rev()
            .find(|&j| (0..=self.cap).any(|i| self.coeffs[i][j] != 0.0))
            .unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|row| row.iter().all(|&c| c == 0.0))
    }

    /// Largest absolute coefficient.
    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs
            .iter()
            .flat_map(|row| row.iter())
            .fold(0.0_f64, |m, &c| m.max(c.abs()))
    }

    /// Sup-norm of the coefficient difference; the convergence metric of the
    /// kernel iteration.
    pub fn coeff_sup_diff(&self, other: &Poly2) -> f64 {
        assert_eq!(self.cap, other.cap, "cap mismatch in coeff_sup_diff");
        let mut sup = 0.0_f64;
        for i in 0..=self.cap {
            for j in 0..=self.cap {
                sup = sup.max((self.coeffs[i][j] - other.coeffs[i][j]).abs());
            }
        }
        sup
    }

    /// Horner evaluation: the polynomial is read as a polynomial in `s` whose
    /// coefficients are Horner-evaluated polynomials in `t`.
    pub fn eval(&self, s: f64, t: f64) -> f64 {
        let mut acc = 0.0;
        for i in (0..=self.cap).rev() {
            let row = &self.coeffs[i];
            let mut inner = 0.0;
            for j in (0..=self.cap).rev() {
                inner = inner * t + row[j];
            }
            acc = acc * s + inner;
        }
        acc
    }

    /// Exact partial derivative of the given order.
    pub fn diff(&self, var: Var, order: usize) -> Poly2 {
        let mut out = self.clone();
        for _ in 0..order {
            out = out.diff_once(var);
        }
        out
    }

    fn diff_once(&self, var: Var) -> Poly2 {
        let mut out = Poly2::zero(self.cap);
        out.truncated = self.truncated;
        match var {
            Var::S => {
                for i in 1..=self.cap {
                    for j in 0..=self.cap {
                        out.coeffs[i - 1][j] = self.coeffs[i][j] * i as f64;
                    }
                }
            }
            Var::T => {
                for i in 0..=self.cap {
                    for j in 1..=self.cap {
                        out.coeffs[i][j - 1] = self.coeffs[i][j] * j as f64;
                    }
                }
            }
        }
        out
    }

    /// Exact integral from 0 in the given variable:
    /// `int_0^s p(sigma, t) dsigma` or `int_0^t p(s, tau) dtau`.
    pub fn int_first_from_0(&self, var: Var) -> Poly2 {
        let mut out = Poly2::zero(self.cap);
        out.truncated = self.truncated;
        for i in 0..=self.cap {
            for j in 0..=self.cap {
                let c = self.coeffs[i][j];
                if c == 0.0 {
                    continue;
                }
                let (ni, nj, scaled) = match var {
                    Var::S => (i + 1, j, c / (i + 1) as f64),
                    Var::T => (i, j + 1, c / (j + 1) as f64),
                };
                if ni + nj > self.cap {
                    out.truncated = true;
                } else {
                    out.coeffs[ni][nj] += scaled;
                }
            }
        }
        out
    }

    /// Band integral `int_s^{2l - t} p(eta, t) deta`, reading `self` as a
    /// polynomial in `(eta, t)`. The upper limit substitutes `eta = 2l - t`
    /// by exact binomial expansion; the result is again a polynomial in
    /// `(s, t)`.
    pub fn int_eta_band(&self, l: f64) -> Poly2 {
        let cap = self.cap;
        let binom = pascal_rows(cap + 2);
        let mut out = Poly2::zero(cap);
        out.truncated = self.truncated;
        for i in 0..=cap {
            for j in 0..=cap {
                let c = self.coeffs[i][j];
                if c == 0.0 {
                    continue;
                }
                let a = c / (i + 1) as f64; // antiderivative coefficient of eta^(i+1) t^j
                let k = i + 1;
                // Lower limit: -a s^k t^j.
                if k + j > cap {
                    out.truncated = true;
                } else {
                    out.coeffs[k][j] -= a;
                }
                // Upper limit: a (2l - t)^k t^j expanded binomially.
                let two_l = 2.0 * l;
                for m in 0..=k {
                    let term = a * binom[k][m] * two_l.powi((k - m) as i32) * neg_one_pow(m);
                    if j + m > cap {
                        if term != 0.0 {
                            out.truncated = true;
                        }
                    } else {
                        out.coeffs[0][j + m] += term;
                    }
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Poly2) -> Poly2 {
        assert_eq!(self.cap, other.cap, "cap mismatch in add");
        let mut out = self.clone();
        out.truncated = self.truncated || other.truncated;
        for i in 0..=self.cap {
            for j in 0..=self.cap {
                out.coeffs[i][j] += other.coeffs[i][j];
            }
        }
        out
    }

    pub fn scale(&self, k: f64) -> Poly2 {
        let mut out = self.clone();
        for row in &mut out.coeffs {
            for c in row.iter_mut() {
                *c *= k;
            }
        }
        out
    }

    /// `self + k * other`, the workhorse combination in the kernel iteration.
    pub fn add_scaled(&self, k: f64, other: &Poly2) -> Poly2 {
        assert_eq!(self.cap, other.cap, "cap mismatch in add_scaled");
        let mut out = self.clone();
        out.truncated = self.truncated || other.truncated;
        for i in 0..=self.cap {
            for j in 0..=self.cap {
                out.coeffs[i][j] += k * other.coeffs[i][j];
            }
        }
        out
    }

    /// Debug dump: one line `i j c` per nonzero coefficient, `(i, j)`
    /// lexicographic, with 17-significant-digit decimals so a reparse is
    /// bit-exact.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for i in 0..=self.cap {
            for j in 0..=self.cap {
                let c = self.coeffs[i][j];
                if c != 0.0 {
                    out.push_str(&format!("{i} {j} {c:.16e}\n"));
                }
            }
        }
        out
    }

    /// Parses the [`dump`](Self::dump) format.
    pub fn parse(text: &str, cap: usize) -> Result<Poly2, Poly2Error> {
        let mut p = Poly2::zero(cap);
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let err = |reason: &str| Poly2Error::Parse {
                line: idx + 1,
                reason: reason.to_string(),
            };
            let i: usize = parts
                .next()
                .ok_or_else(|| err("missing i"))?
                .parse()
                .map_err(|_| err("bad i"))?;
            let j: usize = parts
                .next()
                .ok_or_else(|| err("missing j"))?
                .parse()
                .map_err(|_| err("bad j"))?;
            let c: f64 = parts
                .next()
                .ok_or_else(|| err("missing c"))?
                .parse()
                .map_err(|_| err("bad c"))?;
            if parts.next().is_some() {
                return Err(err("trailing tokens"));
            }
            if i + j > cap {
                return Err(err("term beyond degree cap"));
            }
            p.coeffs[i][j] = c;
        }
        Ok(p)
    }
}

/// Pascal's triangle up to row `n` inclusive, built by exact f64 additions.
fn pascal_rows(n: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let mut row = vec![1.0; k + 1];
        if k >= 2 {
            let prev = &rows[k - 1];
            for m in 1..k {
                row[m] = prev[m - 1] + prev[m];
            }
        }
        rows.push(row);
    }
    rows
}

fn neg_one_pow(m: usize) -> f64 {
    if m % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}
