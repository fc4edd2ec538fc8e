//! Small dense helpers shared by the solver modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::{Array1, Array2, ArrayView1};

/// Cholesky factor of a symmetric positive definite block system.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    /// Factors `a`; returns `None` when `a` is not numerically positive definite.
    pub fn new(a: &Array2<f64>) -> Option<Self> {
        let (rows, cols) = a.dim();
        debug_assert_eq!(rows, cols);
        let m = DMatrix::from_fn(rows, cols, |i, j| a[[i, j]]);
        let chol = Cholesky::new(m)?;
        // nalgebra accepts tiny positive pivots; reject factors that are
        // numerically singular relative to the matrix scale.
        let l = chol.l_dirty();
        let max_diag = (0..rows).map(|i| a[[i, i]].abs()).fold(0.0, f64::max);
        let min_pivot = (0..rows).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if rows > 0 && !(min_pivot > max_diag * 1e-15) {
            return None;
        }
        Some(Self { chol })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve(&self, rhs: ArrayView1<f64>) -> Array1<f64> {
        let b = DVector::from_iterator(rhs.len(), rhs.iter().copied());
        let x = self.chol.solve(&b);
        Array1::from_iter(x.iter().copied())
    }
}

/// Empirical quantile with linear interpolation between order statistics
/// (`h = (n - 1) p`). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub(crate) fn sorted_copy(values: ArrayView1<f64>) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// `xᵀ A x` for a dense symmetric `a`.
pub fn quad_form(a: &Array2<f64>, x: ArrayView1<f64>) -> f64 {
    x.dot(&a.dot(&x))
}

/// Geometric sequence from `start` down (or up) to `end`, inclusive.
pub fn log_space(start: f64, end: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => {
            let (a, b) = (start.ln(), end.ln());
            (0..count)
                .map(|i| {
                    if i == 0 {
                        start
                    } else if i == count - 1 {
                        end
                    } else {
                        (a + (b - a) * i as f64 / (count - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

/// Largest absolute entrywise difference between two equally shaped arrays.
pub fn max_abs_diff<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let f = SpdFactor::new(&a).unwrap();
        let x = f.solve(array![1.0, 2.0].view());
        let back = a.dot(&x);
        assert!((back[0] - 1.0).abs() < 1e-14 && (back[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(SpdFactor::new(&a).is_none());
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert!((quantile_sorted(&v, 0.2) - 1.8).abs() < 1e-15);
        assert_eq!(quantile_sorted(&v, 1.0), 5.0);
    }

    #[test]
    fn log_space_hits_endpoints() {
        let g = log_space(1.0, 1e-4, 3);
        assert_eq!(g[0], 1.0);
        assert!((g[1] - 1e-2).abs() < 1e-16);
        assert_eq!(g[2], 1e-4);
    }
}
