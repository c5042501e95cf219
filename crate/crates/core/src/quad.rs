//! Quadrature rules shared by the transform, simulation, and verification
//! stages. All grids here are uniform.

/// Composite Simpson rule over an odd number of uniformly spaced values
/// (even panel count). Panics on an even length; callers own that invariant.
pub fn simpson_uniform(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    assert!(n >= 3 && n % 2 == 1, "Simpson needs an even panel count");
    let mut acc = values[0] + values[n - 1];
    for (k, &v) in values.iter().enumerate().take(n - 1).skip(1) {
        acc += if k % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    acc * h / 3.0
}

/// Composite trapezoid rule over uniformly spaced values.
pub fn trapezoid_uniform(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let interior: f64 = values[1..n - 1].iter().sum();
    (0.5 * (values[0] + values[n - 1]) + interior) * h
}

/// Tail rule used by the integral transforms on `[x_j, l]`: composite Simpson
/// when the tail has an even panel count, composite trapezoid fallback
/// otherwise. Returns 0 for fewer than two values.
pub fn tail_quad(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        0.0
    } else if n % 2 == 1 {
        simpson_uniform(values, h)
    } else {
        trapezoid_uniform(values, h)
    }
}

/// Simpson quadrature of a function on `[a, b]` with the given even panel
/// count; used where the integrand is analytically evaluable (kernel
/// reciprocity checks).
pub fn simpson_fn(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    assert!(panels >= 2 && panels % 2 == 0, "need an even panel count");
    if a == b {
        return 0.0;
    }
    let h = (b - a) / panels as f64;
    let mut acc = f(a) + f(b);
    for k in 1..panels {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + k as f64 * h);
    }
    acc * h / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn simpson_is_exact_for_cubics() {
        let n = 9;
        let h = 1.0 / (n - 1) as f64;
        let vals: Vec<f64> = (0..n)
            .map(|k| {
                let x = k as f64 * h;
                x * x * x - 2.0 * x + 1.0
            })
            .collect();
        assert_abs_diff_eq!(simpson_uniform(&vals, h), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn trapezoid_is_exact_for_linear() {
        let vals = [1.0, 1.5, 2.0, 2.5];
        assert_abs_diff_eq!(trapezoid_uniform(&vals, 0.5), 2.625, epsilon = 1e-15);
    }

    #[test]
    fn tail_rule_selects_by_parity() {
        // sin on [0, 1]: 5 values -> Simpson accuracy, 4 values -> trapezoid.
        let f = |x: f64| x.sin();
        let exact = 1.0 - 1.0_f64.cos();
        let five: Vec<f64> = (0..5).map(|k| f(k as f64 * 0.25)).collect();
        assert_abs_diff_eq!(tail_quad(&five, 0.25), exact, epsilon = 5e-5);
        let four: Vec<f64> = (0..4).map(|k| f(k as f64 / 3.0)).collect();
        let err = (tail_quad(&four, 1.0 / 3.0) - exact).abs();
        assert!(
            err > 5e-5 && err < 1e-2,
            "trapezoid-scale error, got {err:e}"
        );
        assert_eq!(tail_quad(&[3.0], 0.1), 0.0);
    }

    #[test]
    fn simpson_fn_matches_closed_form() {
        let v = simpson_fn(|x| (2.0 * x).exp(), 0.0, 1.0, 128);
        assert_abs_diff_eq!(v, (2.0_f64.exp() - 1.0) / 2.0, epsilon = 1e-8);
        assert_eq!(simpson_fn(|x| x, 0.5, 0.5, 4), 0.0);
    }
}
