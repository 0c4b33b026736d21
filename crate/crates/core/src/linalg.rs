//! Dense linear algebra helpers shared by the estimability checks and the solver.

use nalgebra::{DMatrix, DVector};

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = s * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Column vector of ones.
pub fn ones(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, 1, 1.0)
}

/// Numerical rank by Householder QR with column pivoting.
///
/// A pivot is counted when its remaining column norm exceeds
/// `rel_tol * max_j ||a_j||`, which makes the test invariant to a global
/// rescaling of the matrix.
pub fn numerical_rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return 0;
    }
    let mut r = a.clone();
    let max_norm = (0..n).map(|j| r.column(j).norm()).fold(0.0, f64::max);
    if max_norm == 0.0 {
        return 0;
    }
    let tol = rel_tol * max_norm;
    let steps = m.min(n);
    let mut rank = 0;
    for k in 0..steps {
        // pivot: largest trailing column norm
        let mut best = k;
        let mut best_norm = -1.0;
        for j in k..n {
            let norm = r.view((k, j), (m - k, 1)).norm();
            if norm > best_norm {
                best_norm = norm;
                best = j;
            }
        }
        if best_norm <= tol {
            break;
        }
        r.swap_columns(k, best);

        let mut v: DVector<f64> = r.view((k, k), (m - k, 1)).column(0).into_owned();
        let alpha = -v[0].signum() * best_norm;
        let alpha = if alpha == 0.0 { -best_norm } else { alpha };
        v[0] -= alpha;
        let vnorm2 = v.norm_squared();
        if vnorm2 > 0.0 {
            for j in k..n {
                let mut col = r.view_mut((k, j), (m - k, 1));
                let dot = v.dot(&col.column(0));
                let scale = 2.0 * dot / vnorm2;
                for (ci, vi) in col.iter_mut().zip(v.iter()) {
                    *ci -= scale * vi;
                }
            }
        }
        rank += 1;
    }
    rank
}

/// Norm of the least-squares residual of `b` regressed on the columns of `a`.
pub fn lstsq_residual_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let eps = 1e-12 * max_sv.max(f64::MIN_POSITIVE);
    match svd.solve(b, eps) {
        Ok(x) => (b - a * x).norm(),
        Err(_) => b.norm(),
    }
}

/// Cholesky solve of a symmetric positive definite system, rejecting
/// numerically singular matrices.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = checked_cholesky(a)?;
    Some(chol.solve(b))
}

/// Inverse of a symmetric positive definite matrix.
pub fn inverse_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = checked_cholesky(a)?;
    Some(symmetrize(&chol.inverse()))
}

fn checked_cholesky(a: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let chol = a.clone().cholesky()?;
    let diag = chol.l_dirty().diagonal();
    let max = diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if !(max > 0.0) || !min.is_finite() || (min / max).powi(2) < 1e-15 {
        return None;
    }
    Some(chol)
}

/// `(a + aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetrize(a)
        .symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v))
}

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::default();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn svd_rank(a: &DMatrix<f64>) -> usize {
        let sv = a.clone().svd(false, false).singular_values;
        let max = sv.max();
        sv.iter().filter(|&&s| s > 1e-9 * max).count()
    }

    #[test]
    fn kron_shapes_and_entries() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let k = kron(&a, &b);
        assert_eq!(k.shape(), (2, 4));
        assert_eq!(k.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 3.0, 0.0, 4.0]);
    }

    #[test]
    fn pivoted_rank_matches_svd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let m = 5 + trial % 7;
            let n = 2 + trial % 5;
            let r = 1 + trial % n;
            let u = DMatrix::from_fn(m, r, |_, _| rng.random_range(-1.0..1.0));
            let v = DMatrix::from_fn(r, n, |_, _| rng.random_range(-1.0..1.0));
            let a = &u * &v;
            assert_eq!(numerical_rank(&a, 1e-9), svd_rank(&a), "trial {trial}");
        }
    }

    #[test]
    fn rank_is_scale_invariant() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert_eq!(numerical_rank(&a, 1e-9), 1);
        assert_eq!(numerical_rank(&(a * 1e-12), 1e-9), 1);
    }

    #[test]
    fn singular_spd_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(solve_spd(&a, &DVector::from_vec(vec![1.0, 1.0])).is_none());
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let s: CompensatedSum = [1e16, 1.0, -1e16].into_iter().collect();
        assert_eq!(s.value(), 1.0);
    }
}
