use crate::error::SolveError;
use crate::scalar::Scalar;

use super::matrix::{norm_inf, Matrix};
use super::{condition_limit, SolveDiagnostics};

/// `P A = L U` with partial (row) pivoting.
#[derive(Debug, Clone)]
pub struct LuFactors<T> {
    lu: Matrix<T>,
    pivots: Vec<usize>,
}

impl<T: Scalar> LuFactors<T> {
    pub fn factor(a: &Matrix<T>) -> Result<Self, SolveError> {
        let m = a.rows();
        if a.cols() != m {
            return Err(SolveError::DimensionMismatch(format!(
                "system matrix is {}x{}, not square",
                m,
                a.cols()
            )));
        }
        if !a.is_finite() {
            return Err(SolveError::NonFinite("system matrix"));
        }
        let mut lu = a.clone();
        let mut pivots: Vec<usize> = (0..m).collect();
        for k in 0..m {
            let (piv, big) = (k..m)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, T::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
            if big == T::zero() {
                return Err(SolveError::Singular { column: k });
            }
            if piv != k {
                for j in 0..m {
                    let t = lu[(k, j)];
                    lu[(k, j)] = lu[(piv, j)];
                    lu[(piv, j)] = t;
                }
                pivots.swap(k, piv);
            }
            let d = lu[(k, k)];
            for i in k + 1..m {
                let f = lu[(i, k)] / d;
                lu[(i, k)] = f;
                if f != T::zero() {
                    for j in k + 1..m {
                        lu[(i, j)] = lu[(i, j)] - f * lu[(k, j)];
                    }
                }
            }
        }
        Ok(Self { lu, pivots })
    }

    pub fn dim(&self) -> usize {
        self.lu.rows()
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let m = self.dim();
        let mut x: Vec<T> = self.pivots.iter().map(|&p| b[p]).collect();
        for i in 0..m {
            let mut s = x[i];
            for j in 0..i {
                s = s - self.lu[(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..m).rev() {
            let mut s = x[i];
            for j in i + 1..m {
                s = s - self.lu[(i, j)] * x[j];
            }
            x[i] = s / self.lu[(i, i)];
        }
        x
    }

    /// `||A||_1 ||A^{-1}||_1`, with the inverse formed column by column.
    pub fn condition_1(&self, a: &Matrix<T>) -> f64 {
        let m = self.dim();
        let mut inv_norm = T::zero();
        for j in 0..m {
            let mut e = vec![T::zero(); m];
            e[j] = T::one();
            let col = self.solve(&e);
            inv_norm = inv_norm.max(col.iter().fold(T::zero(), |s, v| s + v.abs()));
        }
        (a.norm_1() * inv_norm).to_f64_lossy()
    }
}

/// Solves a square system, rejecting singular or ill-conditioned matrices
/// instead of regularising them.
pub fn solve_linear_system<T: Scalar>(a: &Matrix<T>, b: &[T]) -> Result<Vec<T>, SolveError> {
    solve_linear_system_diagnosed(a, b).map(|(x, _)| x)
}

pub fn solve_linear_system_diagnosed<T: Scalar>(
    a: &Matrix<T>,
    b: &[T],
) -> Result<(Vec<T>, SolveDiagnostics), SolveError> {
    if b.len() != a.rows() {
        return Err(SolveError::DimensionMismatch(format!(
            "right-hand side has length {}, system has {} rows",
            b.len(),
            a.rows()
        )));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(SolveError::NonFinite("right-hand side"));
    }
    let lu = LuFactors::factor(a)?;
    let condition = lu.condition_1(a);
    let limit = condition_limit::<T>();
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN counts as ill conditioned
    if !(condition <= limit) {
        return Err(SolveError::IllConditioned { condition, limit });
    }
    let mut x = lu.solve(b);
    // one step of iterative refinement
    let r: Vec<T> = b.iter().zip(a.matvec(&x)).map(|(&bi, ax)| bi - ax).collect();
    let dx = lu.solve(&r);
    for (xi, d) in x.iter_mut().zip(dx) {
        *xi = *xi + d;
    }
    let residual: Vec<T> = b.iter().zip(a.matvec(&x)).map(|(&bi, ax)| bi - ax).collect();
    let mut diag = SolveDiagnostics::direct(a.rows(), a.rows(), condition);
    diag.gradient_norm = norm_inf(&residual).to_f64_lossy();
    Ok((x, diag))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_returns_rhs() {
        let b = [3.0, -1.5, 2.25];
        let x = solve_linear_system(&Matrix::identity(3), &b).unwrap();
        assert_eq!(x, b.to_vec());
    }

    #[test]
    fn diagonal_system() {
        let a = Matrix::from_rows(&[[2.0_f64, 0.0], [0.0, 4.0]]).unwrap();
        let x = solve_linear_system(&a, &[2.0, 8.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn needs_row_pivoting() {
        let a = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let x = solve_linear_system(&a, &[5.0, 7.0]).unwrap();
        assert_eq!(x, vec![7.0, 5.0]);
    }

    #[test]
    fn singular_is_reported() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap();
        let err = solve_linear_system(&a, &[1.0, 2.0]).unwrap_err();
        assert!(matches!(
            err,
            SolveError::Singular { .. } | SolveError::IllConditioned { .. }
        ));
    }

    #[test]
    fn nearly_singular_is_ill_conditioned() {
        let a = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0 + 1e-14]]).unwrap();
        assert!(matches!(
            solve_linear_system(&a, &[1.0, 1.0]),
            Err(SolveError::IllConditioned { .. })
        ));
    }

    #[test]
    fn non_square_rejected() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(
            solve_linear_system(&a, &[1.0]),
            Err(SolveError::DimensionMismatch(_))
        ));
    }
}
