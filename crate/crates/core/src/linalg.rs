//! Dense linear algebra used by the first-passage and eigenvalue routines.
//!
//! Small desk-scale systems only (n up to a few hundred), so everything is
//! dense and row-major through `nalgebra::DMatrix`.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Pivots smaller than this are treated as singular.
pub const PIVOT_THRESHOLD: f64 = 1e-12;

const REFINEMENT_STEPS: usize = 3;

/// LU factorization with partial pivoting, kept so one factorization can be
/// reused for iterative refinement.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &Matrix) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::Dimension(format!(
                "LU of non-square {}x{} matrix",
                n,
                a.ncols()
            )));
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let (pivot_row, pivot_abs) = (col..n)
                .map(|r| (r, lu[(r, col)].abs()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot_abs < PIVOT_THRESHOLD {
                return Err(Error::Singular { pivot: pivot_abs });
            }
            if pivot_row != col {
                lu.swap_rows(pivot_row, col);
                perm.swap(pivot_row, col);
            }
            let pivot = lu[(col, col)];
            for r in col + 1..n {
                let factor = lu[(r, col)] / pivot;
                lu[(r, col)] = factor;
                if factor != 0.0 {
                    for c in col + 1..n {
                        lu[(r, c)] -= factor * lu[(col, c)];
                    }
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn solve_in_place(&self, b: &Vector) -> Vector {
        let n = self.lu.nrows();
        let mut x = Vector::from_iterator(n, self.perm.iter().map(|&p| b[p]));
        for r in 0..n {
            let mut s = x[r];
            for c in 0..r {
                s -= self.lu[(r, c)] * x[c];
            }
            x[r] = s;
        }
        for r in (0..n).rev() {
            let mut s = x[r];
            for c in r + 1..n {
                s -= self.lu[(r, c)] * x[c];
            }
            x[r] = s / self.lu[(r, r)];
        }
        x
    }
}

/// Solves `a x = b` by LU with a few rounds of residual refinement.
pub fn solve(a: &Matrix, b: &Vector) -> Result<Vector> {
    if a.nrows() != b.len() {
        return Err(Error::Dimension(format!(
            "system of order {} with rhs of length {}",
            a.nrows(),
            b.len()
        )));
    }
    if a.nrows() == 0 {
        return Ok(Vector::zeros(0));
    }
    let lu = Lu::factor(a)?;
    let mut x = lu.solve_in_place(b);
    for _ in 0..REFINEMENT_STEPS {
        let residual = b - a * &x;
        if residual.amax() == 0.0 {
            break;
        }
        x += lu.solve_in_place(&residual);
    }
    Ok(x)
}

/// Spectral radius from the real Schur form. Independent of the Perron
/// iteration below, which makes it usable as a cross-check.
pub fn spectral_radius(a: &Matrix) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Perron root and positive right eigenvector of an irreducible nonnegative
/// matrix.
#[derive(Debug, Clone)]
pub struct Perron {
    pub root: f64,
    pub vector: Vector,
    pub iterations: usize,
}

/// Power iteration on `I + M`, which is primitive whenever `M` is
/// irreducible, so periodic chains still converge. Stops once the
/// Collatz-Wielandt bracket `min (Mx)/x <= rho <= max (Mx)/x` has relative
/// width below `rel_tol`. The returned vector is scaled to 1 at `pin`.
pub fn perron(m: &Matrix, pin: usize, rel_tol: f64, max_iter: usize) -> Result<Perron> {
    let n = m.nrows();
    if n == 0 || n != m.ncols() || pin >= n {
        return Err(Error::Dimension(format!("perron on {}x{} matrix", n, m.ncols())));
    }
    let mut x = Vector::from_element(n, 1.0);
    let mut width = f64::INFINITY;
    for it in 1..=max_iter {
        let mx = m * &x;
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for k in 0..n {
            let ratio = mx[k] / x[k];
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
        width = hi - lo;
        if width <= rel_tol * hi.max(f64::MIN_POSITIVE) {
            let root = 0.5 * (lo + hi);
            let scale = x[pin];
            return Ok(Perron {
                root,
                vector: x / scale,
                iterations: it,
            });
        }
        let next = mx + &x;
        let norm = next.amax();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Reducible("power iteration lost positivity".into()));
        }
        x = next / norm;
        if x.iter().any(|&v| v <= 0.0) {
            // Zero entries after many sweeps mean some state is never reached.
            if it > n {
                return Err(Error::Reducible("Perron vector has zero entries".into()));
            }
        }
    }
    Err(Error::NoConvergence {
        what: "power iteration",
        iterations: max_iter,
        residual: width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_small_system() {
        let a = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let b = Vector::from_vec(vec![3.0, 5.0]);
        let x = solve(&a, &b).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-14);
        assert!((x[1] - 1.4).abs() < 1e-14);
    }

    #[test]
    fn singular_system_is_rejected() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = Vector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(solve(&a, &b), Err(Error::Singular { .. })));
    }

    #[test]
    fn perron_matches_schur_on_periodic_matrix() {
        // Period-2 pattern: plain power iteration would oscillate.
        let m = Matrix::from_row_slice(2, 2, &[0.0, 2.0, 0.5, 0.0]);
        let p = perron(&m, 0, 1e-13, 100_000).unwrap();
        assert!((p.root - 1.0).abs() < 1e-12);
        assert!((spectral_radius(&m) - 1.0).abs() < 1e-12);
        assert!((p.vector[1] - 0.5).abs() < 1e-10);
    }
}
