use crate::error::SolveError;
use crate::scalar::Scalar;

use super::matrix::{dot, Matrix};
use super::SolveDiagnostics;

/// Householder QR with column pivoting, `X P = Q R`.
///
/// Columns are kept column-major during the factorisation. Reflector `k`
/// acts on rows `k..n` and is stored unnormalised with `tau = 2 / (v.v)`.
#[derive(Debug, Clone)]
pub struct PivotedQr<T> {
    n: usize,
    p: usize,
    /// `r[j][i]` holds `R[i][j]` for `i <= j`.
    r: Vec<Vec<T>>,
    reflectors: Vec<(Vec<T>, T)>,
    perm: Vec<usize>,
    rank: usize,
}

impl<T: Scalar> PivotedQr<T> {
    pub fn factor(x: &Matrix<T>) -> Result<Self, SolveError> {
        if !x.is_finite() {
            return Err(SolveError::NonFinite("design matrix"));
        }
        let (n, p) = (x.rows(), x.cols());
        let mut cols: Vec<Vec<T>> = (0..p).map(|j| x.column(j)).collect();
        let mut perm: Vec<usize> = (0..p).collect();
        let mut reflectors = Vec::new();
        let steps = n.min(p);

        for k in 0..steps {
            let tail_norm = |c: &Vec<T>| c[k..].iter().fold(T::zero(), |a, &v| a + v * v);
            let mut best = k;
            let mut best_norm = tail_norm(&cols[k]);
            for j in k + 1..p {
                let nj = tail_norm(&cols[j]);
                if nj > best_norm {
                    best = j;
                    best_norm = nj;
                }
            }
            cols.swap(k, best);
            perm.swap(k, best);
            if best_norm == T::zero() {
                break;
            }

            let norm = best_norm.sqrt();
            let x0 = cols[k][k];
            let alpha = if x0 >= T::zero() { -norm } else { norm };
            let mut v: Vec<T> = cols[k][k..].to_vec();
            v[0] = v[0] - alpha;
            let vv = dot(&v, &v);
            if vv == T::zero() {
                reflectors.push((v, T::zero()));
                continue;
            }
            let tau = T::lit(2.0) / vv;
            cols[k][k] = alpha;
            for c in cols[k][k + 1..].iter_mut() {
                *c = T::zero();
            }
            for col in cols.iter_mut().skip(k + 1) {
                let s = tau * dot(&v, &col[k..]);
                for (ci, &vi) in col[k..].iter_mut().zip(&v) {
                    *ci = *ci - s * vi;
                }
            }
            reflectors.push((v, tau));
        }

        let diag: Vec<T> = (0..reflectors.len()).map(|k| cols[k][k].abs()).collect();
        let tol = T::epsilon() * T::lit(n.max(p) as f64) * diag.first().copied().unwrap_or(T::zero());
        let rank = diag.iter().take_while(|&&d| d > tol && d > T::zero()).count();

        Ok(Self {
            n,
            p,
            r: cols,
            reflectors,
            perm,
            rank,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Column permutation: pivoted position `k` holds original column `perm[k]`.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    fn r_at(&self, i: usize, j: usize) -> T {
        self.r[j][i]
    }

    /// Ratio of the largest to the smallest retained diagonal of `R`.
    pub fn condition_estimate(&self) -> f64 {
        if self.rank == 0 {
            return f64::INFINITY;
        }
        let first = self.r_at(0, 0).abs();
        let last = self.r_at(self.rank - 1, self.rank - 1).abs();
        (first / last).to_f64_lossy()
    }

    fn apply_qt(&self, y: &mut [T]) {
        for (k, (v, tau)) in self.reflectors.iter().enumerate() {
            let s = *tau * dot(v, &y[k..]);
            for (yi, &vi) in y[k..].iter_mut().zip(v) {
                *yi = *yi - s * vi;
            }
        }
    }

    /// Back substitution with the leading `rank x rank` block of `R`.
    fn solve_r11(&self, rhs: &[T]) -> Vec<T> {
        let r = self.rank;
        let mut z = rhs[..r].to_vec();
        for i in (0..r).rev() {
            let mut s = z[i];
            for j in i + 1..r {
                s = s - self.r_at(i, j) * z[j];
            }
            z[i] = s / self.r_at(i, i);
        }
        z
    }

    /// Minimal-norm least-squares solution of `X b = y`.
    pub fn solve(&self, y: &[T]) -> Result<Vec<T>, SolveError> {
        if y.len() != self.n {
            return Err(SolveError::DimensionMismatch(format!(
                "response has length {}, design has {} rows",
                y.len(),
                self.n
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite("response"));
        }
        let mut c = y.to_vec();
        self.apply_qt(&mut c);
        let r = self.rank;
        let z = if r == self.p {
            self.solve_r11(&c)
        } else {
            self.min_norm_pivoted(&c[..r])
        };
        let mut beta = vec![T::zero(); self.p];
        for (k, &orig) in self.perm.iter().enumerate() {
            beta[orig] = z[k];
        }
        Ok(beta)
    }

    /// Minimal-norm solution of the underdetermined `[R11 R12] z = c1` via
    /// an unpivoted QR of its transpose.
    fn min_norm_pivoted(&self, c1: &[T]) -> Vec<T> {
        let (r, p) = (self.rank, self.p);
        if r == 0 {
            return vec![T::zero(); p];
        }
        // Mt is p x r with Mt[j][i] = R[i][j]
        let mut mt = Matrix::zeros(p, r);
        for i in 0..r {
            for j in i..p {
                mt[(j, i)] = self.r_at(i, j);
            }
        }
        let inner = PivotlessQr::factor(&mt);
        // R~^T w = c1, forward substitution
        let mut w = vec![T::zero(); r];
        for i in 0..r {
            let mut s = c1[i];
            for (k, wk) in w.iter().enumerate().take(i) {
                s = s - inner.r[(k, i)] * *wk;
            }
            w[i] = s / inner.r[(i, i)];
        }
        let mut z = w;
        z.resize(p, T::zero());
        inner.apply_q(&mut z);
        z
    }

    /// Diagonal of `(X^T X)^{-1}` in original column order; `None` when rank deficient.
    pub fn unscaled_covariance_diagonal(&self) -> Option<Vec<T>> {
        if self.rank < self.p {
            return None;
        }
        let p = self.p;
        // columns of R^{-1}: solve R u = e_j
        let mut rinv = Matrix::zeros(p, p);
        for j in 0..p {
            let mut e = vec![T::zero(); p];
            e[j] = T::one();
            let u = self.solve_r11(&e);
            for i in 0..p {
                rinv[(i, j)] = u[i];
            }
        }
        let mut diag = vec![T::zero(); p];
        for k in 0..p {
            let s = rinv.row(k).iter().fold(T::zero(), |a, &v| a + v * v);
            diag[self.perm[k]] = s;
        }
        Some(diag)
    }

    /// Groups of original column indices that are linearly dependent; one
    /// group per column dropped by the rank decision.
    pub fn aliased_groups(&self) -> Vec<Vec<usize>> {
        let r = self.rank;
        let thresh = T::epsilon().sqrt();
        (r..self.p)
            .map(|k| {
                let rhs: Vec<T> = (0..r).map(|i| self.r_at(i, k)).collect();
                let t = if r == 0 { Vec::new() } else { self.solve_r11(&rhs) };
                let mut group: Vec<usize> = t
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| v.abs() > thresh)
                    .map(|(i, _)| self.perm[i])
                    .collect();
                group.push(self.perm[k]);
                group.sort_unstable();
                group
            })
            .collect()
    }
}

/// Plain Householder QR for full-column-rank tall matrices.
struct PivotlessQr<T> {
    r: Matrix<T>,
    reflectors: Vec<(Vec<T>, T)>,
}

impl<T: Scalar> PivotlessQr<T> {
    fn factor(a: &Matrix<T>) -> Self {
        let (n, p) = (a.rows(), a.cols());
        let mut r = a.clone();
        let mut reflectors = Vec::with_capacity(p);
        for k in 0..p.min(n) {
            let x: Vec<T> = (k..n).map(|i| r[(i, k)]).collect();
            let norm = dot(&x, &x).sqrt();
            let alpha = if x[0] >= T::zero() { -norm } else { norm };
            let mut v = x;
            v[0] = v[0] - alpha;
            let vv = dot(&v, &v);
            let tau = if vv == T::zero() { T::zero() } else { T::lit(2.0) / vv };
            for j in k..p {
                let s = tau * (k..n).zip(&v).fold(T::zero(), |acc, (i, &vi)| acc + vi * r[(i, j)]);
                for (i, &vi) in (k..n).zip(&v) {
                    r[(i, j)] = r[(i, j)] - s * vi;
                }
            }
            reflectors.push((v, tau));
        }
        Self { r, reflectors }
    }

    /// Applies `Q = H_0 H_1 ... H_{p-1}` to `z` in place.
    fn apply_q(&self, z: &mut [T]) {
        for (k, (v, tau)) in self.reflectors.iter().enumerate().rev() {
            let s = *tau * dot(v, &z[k..]);
            for (zi, &vi) in z[k..].iter_mut().zip(v) {
                *zi = *zi - s * vi;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresFit<T> {
    pub coefficients: Vec<T>,
    /// Residual sum of squares over `n - rank`; zero when no degrees of freedom remain.
    pub residual_variance: T,
    pub residual_sum_squares: T,
    pub diagnostics: SolveDiagnostics,
}

/// Minimises `||y - X b||_2`; rank-deficient designs get the minimal-norm solution.
pub fn solve_least_squares<T: Scalar>(x: &Matrix<T>, y: &[T]) -> Result<LeastSquaresFit<T>, SolveError> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(SolveError::DimensionMismatch(format!(
            "design is {}x{}; need at least one row and column",
            x.rows(),
            x.cols()
        )));
    }
    if y.len() != x.rows() {
        return Err(SolveError::DimensionMismatch(format!(
            "response has length {}, design has {} rows",
            y.len(),
            x.rows()
        )));
    }
    let qr = PivotedQr::factor(x)?;
    let coefficients = qr.solve(y)?;
    let fitted = x.matvec(&coefficients);
    let rss = y
        .iter()
        .zip(&fitted)
        .fold(T::zero(), |acc, (&yi, &fi)| acc + (yi - fi) * (yi - fi));
    let df = x.rows().saturating_sub(qr.rank());
    let residual_variance = if df > 0 { rss / T::lit(df as f64) } else { T::zero() };
    Ok(LeastSquaresFit {
        coefficients,
        residual_variance,
        residual_sum_squares: rss,
        diagnostics: SolveDiagnostics::direct(qr.rank(), x.cols(), qr.condition_estimate()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn constant_fit() {
        let fit = solve_least_squares(&m(&[&[1.0], &[1.0]]), &[2.0, 2.0]).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-14);
        assert!(fit.residual_variance.abs() < 1e-28);
    }

    #[test]
    fn hand_solved_normal_equations() {
        // X^T X = [[3,3],[3,5]], X^T y = [7,10] -> b = [5/6, 3/2]
        let x = m(&[&[1.0, 0.0], &[1.0, 1.0], &[1.0, 2.0]]);
        let fit = solve_least_squares(&x, &[1.0, 2.0, 4.0]).unwrap();
        assert!((fit.coefficients[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 1.5).abs() < 1e-12);
        assert_eq!(fit.diagnostics.rank, 2);
        assert!(!fit.diagnostics.rank_deficient);
    }

    #[test]
    fn zero_response() {
        let x = m(&[&[1.0, 3.0], &[1.0, -1.0], &[2.0, 0.5]]);
        let fit = solve_least_squares(&x, &[0.0; 3]).unwrap();
        assert!(fit.coefficients.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn duplicated_column_gives_minimal_norm() {
        // columns identical: any b1 + b2 = 2 fits; minimal norm is (1, 1)
        let x = m(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let fit = solve_least_squares(&x, &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(fit.diagnostics.rank, 1);
        assert!(fit.diagnostics.rank_deficient);
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn minimal_norm_matches_pseudoinverse_oracle() {
        // x3 = x1 + x2; pseudo-inverse solution computed from the
        // orthogonal complement of the null vector (1, 1, -1).
        let x = m(&[
            &[1.0, 0.0, 1.0],
            &[0.0, 1.0, 1.0],
            &[1.0, 1.0, 2.0],
            &[2.0, -1.0, 1.0],
        ]);
        let y = [1.0, 2.0, 0.5, -1.0];
        let fit = solve_least_squares(&x, &y).unwrap();
        assert_eq!(fit.diagnostics.rank, 2);
        let b = &fit.coefficients;
        // orthogonal to the null space
        assert!((b[0] + b[1] - b[2]).abs() < 1e-12);
        // satisfies the normal equations X^T (y - X b) = 0
        let r: Vec<f64> = y.iter().zip(x.matvec(b)).map(|(a, f)| a - f).collect();
        let g = x.transpose().matvec(&r);
        assert!(g.iter().all(|v| v.abs() < 1e-12), "{g:?}");
    }

    #[test]
    fn aliased_groups_report_dependency() {
        let x = m(&[&[1.0, 2.0, 0.0], &[1.0, 2.0, 1.0], &[1.0, 2.0, 3.0]]);
        let qr = PivotedQr::factor(&x).unwrap();
        assert_eq!(qr.rank(), 2);
        assert_eq!(qr.aliased_groups(), vec![vec![0, 1]]);
    }

    #[test]
    fn rejects_mismatch_and_nan() {
        let x = m(&[&[1.0], &[1.0]]);
        assert!(matches!(
            solve_least_squares(&x, &[1.0]),
            Err(SolveError::DimensionMismatch(_))
        ));
        assert!(matches!(
            solve_least_squares(&x, &[1.0, f64::NAN]),
            Err(SolveError::NonFinite(_))
        ));
    }

    #[test]
    fn works_in_single_precision() {
        let x = Matrix::<f32>::from_rows(&[&[1.0f32, 0.0], &[1.0, 1.0], &[1.0, 2.0]]).unwrap();
        let fit = solve_least_squares(&x, &[1.0f32, 2.0, 4.0]).unwrap();
        assert!((fit.coefficients[0] - 5.0 / 6.0).abs() < 1e-5);
        assert!((fit.coefficients[1] - 1.5).abs() < 1e-5);
    }
}
