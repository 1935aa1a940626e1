//! Weighted polynomial least squares.
//!
//! The fit is computed in a centered and scaled abscissa `u = (x − m)/s`
//! (`m` = midpoint of the data, `s` = half-range), where the normal
//! equations are well conditioned even for code ranges in the hundreds, and
//! the solution is then expanded back into ordinary monomial coefficients.
//! Solving the raw-basis normal equations directly would lose ~10 digits to
//! conditioning at degree 2 over x ∈ [0, 255].

use thiserror::Error;

use super::linalg::cholesky_solve_in_place;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum PolyfitError {
    #[error("input lengths differ: {xs} abscissas, {ys} ordinates, {ws} weights")]
    LengthMismatch { xs: usize, ys: usize, ws: usize },
    #[error("fit of degree {degree} needs {needed} positively weighted points, got {got}")]
    InsufficientPoints {
        degree: usize,
        needed: usize,
        got: usize,
    },
    #[error("non-finite input at index {index}")]
    NonFinite { index: usize },
    #[error("negative weight at index {index}")]
    NegativeWeight { index: usize },
    #[error("abscissas span a single point; cannot fit degree {degree}")]
    DegenerateAbscissa { degree: usize },
    #[error("normal equations are singular")]
    Singular,
}

/// Fit `y ≈ Σ_j c_j x^j` (degree `degree`) minimizing `Σ_i w_i (y_i − p(x_i))²`.
/// Returns the `degree + 1` monomial coefficients, constant term first.
pub fn weighted_polyfit(
    x: &[f64],
    y: &[f64],
    w: &[f64],
    degree: usize,
) -> Result<Vec<f64>, PolyfitError> {
    if x.len() != y.len() || x.len() != w.len() {
        return Err(PolyfitError::LengthMismatch {
            xs: x.len(),
            ys: y.len(),
            ws: w.len(),
        });
    }
    for i in 0..x.len() {
        if !(x[i].is_finite() && y[i].is_finite() && w[i].is_finite()) {
            return Err(PolyfitError::NonFinite { index: i });
        }
        if w[i] < 0.0 {
            return Err(PolyfitError::NegativeWeight { index: i });
        }
    }
    let active: Vec<usize> = (0..x.len()).filter(|&i| w[i] > 0.0).collect();
    let needed = degree + 1;
    if active.len() < needed {
        return Err(PolyfitError::InsufficientPoints {
            degree,
            needed,
            got: active.len(),
        });
    }

    let lo = active.iter().map(|&i| x[i]).fold(f64::INFINITY, f64::min);
    let hi = active.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
    let m = (lo + hi) / 2.0;
    let s = (hi - lo) / 2.0;
    if s == 0.0 {
        if degree == 0 {
            // All abscissas equal: the weighted mean is still well defined.
            let wsum: f64 = active.iter().map(|&i| w[i]).sum();
            let ysum: f64 = active.iter().map(|&i| w[i] * y[i]).sum();
            return Ok(vec![ysum / wsum]);
        }
        return Err(PolyfitError::DegenerateAbscissa { degree });
    }

    // Normal equations in the scaled basis: A_jk = Σ w u^{j+k}, b_j = Σ w u^j y.
    let n = needed;
    let mut power_sums = vec![0.0f64; 2 * degree + 1];
    let mut rhs = vec![0.0f64; n];
    for &i in &active {
        let u = (x[i] - m) / s;
        let mut up = 1.0;
        for (j, ps) in power_sums.iter_mut().enumerate() {
            *ps += w[i] * up;
            if j < n {
                rhs[j] += w[i] * up * y[i];
            }
            up *= u;
        }
    }
    let mut a = vec![0.0f64; n * n];
    for j in 0..n {
        for k in 0..n {
            a[j * n + k] = power_sums[j + k];
        }
    }
    if !cholesky_solve_in_place(&mut a, &mut rhs, n) {
        return Err(PolyfitError::Singular);
    }

    // Expand q(u) with u = (x − m)/s back into monomials of x via Horner in
    // coefficient space.
    let mut out = vec![rhs[degree]];
    for j in (0..degree).rev() {
        let mut next = vec![0.0f64; out.len() + 1];
        for (k, &c) in out.iter().enumerate() {
            next[k + 1] += c / s;
            next[k] -= c * m / s;
        }
        next[0] += rhs[j];
        out = next;
    }
    if out.iter().any(|c| !c.is_finite()) {
        return Err(PolyfitError::Singular);
    }
    Ok(out)
}

/// Evaluate a monomial-coefficient polynomial (constant term first) at `x`.
pub fn eval_poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}
