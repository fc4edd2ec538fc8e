//! B-spline bases, difference penalties and tensor-product interaction bases.
//!
//! Knot vectors are clamped: both boundary knots are repeated `degree + 1`
//! times, so a basis built from `m` interior knots has `m + degree + 1`
//! functions that sum to one everywhere on the knot range.

use ndarray::{linalg::kron, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{quantile_sorted, sorted_copy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KnotPlacement {
    UniformOnRange,
    #[default]
    Quantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplineConfig {
    pub degree: usize,
    pub n_knots_main: usize,
    pub n_knots_interaction_per_axis: usize,
    pub knot_placement: KnotPlacement,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            n_knots_main: 10,
            n_knots_interaction_per_axis: 5,
            knot_placement: KnotPlacement::Quantile,
        }
    }
}

impl SplineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_knots_main < self.degree + 1 {
            return Err(Error::InvalidArgument(format!(
                "n_knots_main = {} must be at least degree + 1 = {}",
                self.n_knots_main,
                self.degree + 1
            )));
        }
        if self.n_knots_interaction_per_axis < self.degree + 1 {
            return Err(Error::InvalidArgument(format!(
                "n_knots_interaction_per_axis = {} must be at least degree + 1 = {}",
                self.n_knots_interaction_per_axis,
                self.degree + 1
            )));
        }
        Ok(())
    }

    /// Number of basis functions of a main-effect block.
    pub fn main_dim(&self) -> usize {
        self.n_knots_main + self.degree + 1
    }

    /// Number of basis functions along one axis of an interaction block.
    pub fn interaction_axis_dim(&self) -> usize {
        self.n_knots_interaction_per_axis + self.degree + 1
    }
}

fn degenerate(reason: impl Into<String>) -> Error {
    Error::DegenerateCovariate {
        name: String::new(),
        reason: reason.into(),
    }
}

/// Builds a clamped knot vector with `n_interior` interior knots.
///
/// Quantile placement puts knots at the `i / (n_interior + 1)` empirical
/// quantiles. When ties make those collide, the quantiles of the distinct
/// values are used instead so that the interior knots stay strictly increasing.
pub fn make_knots(
    values: ArrayView1<f64>,
    n_interior: usize,
    degree: usize,
    placement: KnotPlacement,
) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(degenerate("no observations"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(degenerate("non-finite value"));
    }
    let sorted = sorted_copy(values);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < n_interior + 2 {
        return Err(degenerate(format!(
            "{} distinct values, {} knots required",
            distinct.len(),
            n_interior + 2
        )));
    }
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let probs = (1..=n_interior).map(|i| i as f64 / (n_interior + 1) as f64);
    let mut interior: Vec<f64> = match placement {
        KnotPlacement::UniformOnRange => probs.clone().map(|p| lo + p * (hi - lo)).collect(),
        KnotPlacement::Quantile => probs.clone().map(|p| quantile_sorted(&sorted, p)).collect(),
    };
    let strictly_inside = |k: &[f64]| {
        k.windows(2).all(|w| w[0] < w[1]) && k.first().is_none_or(|&a| a > lo) && k.last().is_none_or(|&b| b < hi)
    };
    if !strictly_inside(&interior) {
        interior = probs.map(|p| quantile_sorted(&distinct, p)).collect();
        if !strictly_inside(&interior) {
            return Err(degenerate("cannot place distinct interior knots"));
        }
    }
    let mut knots = Vec::with_capacity(n_interior + 2 * (degree + 1));
    knots.extend(std::iter::repeat_n(lo, degree + 1));
    knots.extend(interior);
    knots.extend(std::iter::repeat_n(hi, degree + 1));
    Ok(knots)
}

/// Number of basis functions for a clamped knot vector.
pub fn basis_dim(knots: &[f64], degree: usize) -> usize {
    knots.len() - degree - 1
}

/// Evaluates the `degree + 1` nonzero B-splines at `x` (clamped to the knot
/// range) into `out`, returning the index of the first nonzero function.
pub fn eval_nonzero(x: f64, knots: &[f64], degree: usize, out: &mut [f64]) -> usize {
    debug_assert_eq!(out.len(), degree + 1);
    let k = basis_dim(knots, degree);
    let x = x.clamp(knots[degree], knots[k]);
    // span s with knots[s] <= x < knots[s + 1], restricted to [degree, k - 1]
    let span = if x >= knots[k] {
        k - 1
    } else {
        let upper = knots[degree + 1..=k].partition_point(|&t| t <= x);
        degree + upper
    };

    let mut left = [0.0f64; 32];
    let mut right = [0.0f64; 32];
    assert!(degree < 32, "spline degree too large");
    out[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = out[r] / (right[r + 1] + left[j - r]);
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
    span - degree
}

/// Row-compressed B-spline evaluations: each row stores its first nonzero
/// column and the `degree + 1` consecutive nonzero values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBasis {
    n_cols: usize,
    width: usize,
    start: Vec<u32>,
    values: Vec<f64>,
}

impl SparseBasis {
    pub fn evaluate(values: ArrayView1<f64>, knots: &[f64], degree: usize) -> Self {
        let width = degree + 1;
        let mut start = Vec::with_capacity(values.len());
        let mut vals = vec![0.0; values.len() * width];
        for (i, &x) in values.iter().enumerate() {
            let s = eval_nonzero(x, knots, degree, &mut vals[i * width..(i + 1) * width]);
            start.push(s as u32);
        }
        Self {
            n_cols: basis_dim(knots, degree),
            width,
            start,
            values: vals,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.start.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn row(&self, i: usize) -> (usize, &[f64]) {
        (
            self.start[i] as usize,
            &self.values[i * self.width..(i + 1) * self.width],
        )
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows(), self.n_cols));
        for i in 0..self.n_rows() {
            let (s, v) = self.row(i);
            for (c, &val) in v.iter().enumerate() {
                out[[i, s + c]] = val;
            }
        }
        out
    }
}

/// Dense `n × K` matrix of B-spline values; inputs outside the knot range are
/// clamped to the nearest boundary.
pub fn bspline_basis(values: ArrayView1<f64>, knots: &[f64], degree: usize) -> Array2<f64> {
    SparseBasis::evaluate(values, knots, degree).to_dense()
}

/// Banded finite-difference matrix of the given order, `(k - order) × k`.
pub fn difference_penalty(k: usize, order: usize) -> Result<Array2<f64>> {
    if order == 0 || k <= order {
        return Err(Error::InvalidArgument(format!(
            "difference penalty needs k > order >= 1 (k = {k}, order = {order})"
        )));
    }
    // row stencil: (-1)^i * C(order, i)
    let mut stencil = vec![1.0f64];
    for _ in 0..order {
        let mut next = vec![0.0; stencil.len() + 1];
        for (i, &c) in stencil.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c;
        }
        stencil = next;
    }
    let rows = k - order;
    let mut d = Array2::zeros((rows, k));
    for l in 0..rows {
        for (i, &c) in stencil.iter().enumerate() {
            d[[l, l + i]] = c;
        }
    }
    Ok(d)
}

/// Row-wise Kronecker product: row `i` is `kron(bj[i, ..], bk[i, ..])`, so
/// column `a * L + b` holds `bj[i, a] * bk[i, b]`.
pub fn tensor_basis(bj: ArrayView2<f64>, bk: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (n, k) = bj.dim();
    let (n2, l) = bk.dim();
    if n != n2 {
        return Err(Error::Shape(format!(
            "tensor basis row counts differ: {n} vs {n2}"
        )));
    }
    let mut out = Array2::zeros((n, k * l));
    for i in 0..n {
        for a in 0..k {
            let x = bj[[i, a]];
            if x == 0.0 {
                continue;
            }
            for b in 0..l {
                out[[i, a * l + b]] = x * bk[[i, b]];
            }
        }
    }
    Ok(out)
}

/// `(DjᵀDj) ⊗ I_L + I_K ⊗ (DkᵀDk)`.
pub fn interaction_penalty(dj: ArrayView2<f64>, dk: ArrayView2<f64>) -> Array2<f64> {
    let sj = dj.t().dot(&dj);
    let sk = dk.t().dot(&dk);
    let (k, l) = (sj.nrows(), sk.nrows());
    kron(&sj, &Array2::eye(l)) + kron(&Array2::eye(k), &sk)
}

/// Second-order smoothness penalty `DᵀD` for a block of `k` functions.
pub fn main_penalty(k: usize) -> Result<Array2<f64>> {
    let d = difference_penalty(k, 2)?;
    Ok(d.t().dot(&d))
}

/// Dense main-effect basis together with its difference penalty.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    pub basis_matrix: Array2<f64>,
    pub knots: Vec<f64>,
    pub degree: usize,
    pub diff_matrix: Array2<f64>,
    pub penalty_matrix: Array2<f64>,
}

impl SplineBasis {
    pub fn new(values: ArrayView1<f64>, knots: Vec<f64>, degree: usize) -> Result<Self> {
        let basis_matrix = bspline_basis(values, &knots, degree);
        let diff_matrix = difference_penalty(basis_matrix.ncols(), 2)?;
        let penalty_matrix = diff_matrix.t().dot(&diff_matrix);
        Ok(Self {
            basis_matrix,
            knots,
            degree,
            diff_matrix,
            penalty_matrix,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis_matrix.ncols()
    }
}

/// Dense tensor-product basis of a covariate pair with its Kronecker-sum penalty.
#[derive(Debug, Clone)]
pub struct InteractionBasis {
    pub basis_matrix: Array2<f64>,
    pub penalty_matrix: Array2<f64>,
    pub axis_dims: (usize, usize),
}

impl InteractionBasis {
    pub fn new(left: &SplineBasis, right: &SplineBasis) -> Result<Self> {
        Ok(Self {
            basis_matrix: tensor_basis(left.basis_matrix.view(), right.basis_matrix.view())?,
            penalty_matrix: interaction_penalty(left.diff_matrix.view(), right.diff_matrix.view()),
            axis_dims: (left.dim(), right.dim()),
        })
    }
}

/// Column means of a dense matrix.
pub fn column_means(m: ArrayView2<f64>) -> Array1<f64> {
    m.mean_axis(ndarray::Axis(0))
        .unwrap_or_else(|| Array1::zeros(m.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Cox–de Boor recursion straight from the definition.
    fn cox_de_boor(i: usize, p: usize, t: &[f64], x: f64) -> f64 {
        if p == 0 {
            let last = t[t.len() - 1];
            let inside = t[i] <= x && x < t[i + 1];
            // closed right end on the last non-empty interval
            let at_end = x == last && t[i] < t[i + 1] && t[i + 1] == last;
            return if inside || at_end { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = t[i + p] - t[i];
        if d1 > 0.0 {
            v += (x - t[i]) / d1 * cox_de_boor(i, p - 1, t, x);
        }
        let d2 = t[i + p + 1] - t[i + 1];
        if d2 > 0.0 {
            v += (t[i + p + 1] - x) / d2 * cox_de_boor(i + 1, p - 1, t, x);
        }
        v
    }

    #[test]
    fn uniform_knots_on_unit_interval() {
        let values = Array1::linspace(0.0, 1.0, 101);
        let knots = make_knots(values.view(), 3, 3, KnotPlacement::UniformOnRange).unwrap();
        assert_eq!(&knots[..4], &[0.0; 4]);
        assert_eq!(&knots[4..7], &[0.25, 0.5, 0.75]);
        assert_eq!(&knots[7..], &[1.0; 4]);
    }

    #[test]
    fn constant_covariate_is_degenerate() {
        let values = Array1::from_elem(20, 3.0);
        let err = make_knots(values.view(), 3, 3, KnotPlacement::Quantile).unwrap_err();
        assert!(err.to_string().contains("degenerate covariate"));
    }

    #[test]
    fn quantile_knots_match_percentiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Array1<f64> = (0..1000).map(|_| rng.random::<f64>().powi(2)).collect();
        let knots = make_knots(values.view(), 4, 3, KnotPlacement::Quantile).unwrap();
        // oracle: sort, then interpolate at h = (n - 1) p
        let mut s = values.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (i, p) in [0.2, 0.4, 0.6, 0.8].iter().enumerate() {
            let h = 999.0 * p;
            let lo = h as usize;
            let expect = s[lo] + (h - lo as f64) * (s[lo + 1] - s[lo]);
            assert_abs_diff_eq!(knots[4 + i], expect, epsilon = 1e-15);
        }
    }

    #[test]
    fn tied_quantiles_fall_back_to_distinct_values() {
        let mut v = vec![0.0; 80];
        v.extend((1..=20).map(|i| i as f64));
        let knots = make_knots(Array1::from(v).view(), 4, 3, KnotPlacement::Quantile).unwrap();
        assert!(knots[3..9].windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn degree_zero_is_one_hot() {
        let knots = vec![0.0, 1.0, 2.0, 3.0];
        let b = bspline_basis(array![0.5, 1.5, 2.5, 3.0].view(), &knots, 0);
        assert_eq!(
            b,
            array![
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
                [0.0, 0.0, 1.0]
            ]
        );
    }

    #[test]
    fn cubic_matches_cox_de_boor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Array1<f64> = (0..300).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let knots = make_knots(values.view(), 6, 3, KnotPlacement::Quantile).unwrap();
        let b = bspline_basis(values.view(), &knots, 3);
        for (i, &x) in values.iter().enumerate() {
            for l in 0..b.ncols() {
                assert_abs_diff_eq!(b[[i, l]], cox_de_boor(l, 3, &knots, x), epsilon = 1e-12);
            }
            assert_abs_diff_eq!(b.row(i).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn out_of_range_values_are_clamped() {
        let knots = vec![0.0, 0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 1.0];
        let b = bspline_basis(array![-3.0, 0.0, 7.0, 1.0].view(), &knots, 3);
        assert_eq!(b.row(0), b.row(1));
        assert_eq!(b.row(2), b.row(3));
        assert_eq!(b[[3, 4]], 1.0);
    }

    #[test]
    fn difference_matrices() {
        assert_eq!(
            difference_penalty(4, 2).unwrap(),
            array![[1.0, -2.0, 1.0, 0.0], [0.0, 1.0, -2.0, 1.0]]
        );
        assert_eq!(difference_penalty(3, 2).unwrap(), array![[1.0, -2.0, 1.0]]);
        assert_eq!(
            difference_penalty(3, 1).unwrap(),
            array![[1.0, -1.0, 0.0], [0.0, 1.0, -1.0]]
        );
        assert!(difference_penalty(2, 2).is_err());
    }

    #[test]
    fn tensor_rows_are_kronecker_products() {
        let t = tensor_basis(array![[1.0, 0.0]].view(), array![[0.0, 1.0]].view()).unwrap();
        assert_eq!(t, array![[0.0, 1.0, 0.0, 0.0]]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_shape_fn((2, 2), |_| rng.random::<f64>());
        let b = Array2::from_shape_fn((2, 3), |_| rng.random::<f64>());
        let t = tensor_basis(a.view(), b.view()).unwrap();
        for i in 0..2 {
            let mut col = 0;
            for x in 0..2 {
                for y in 0..3 {
                    assert_eq!(t[[i, col]], a[[i, x]] * b[[i, y]]);
                    col += 1;
                }
            }
        }
        assert!(tensor_basis(a.view(), b.slice(ndarray::s![..1, ..]).view()).is_err());
    }

    #[test]
    fn interaction_penalty_small_case() {
        let d = array![[1.0, -2.0, 1.0]];
        let s = interaction_penalty(d.view(), d.view());
        assert_eq!(s.dim(), (9, 9));
        // dense Kronecker oracle: (DᵀD)[0,0] * I[0,0] + I[0,0] * (DᵀD)[0,0]
        assert_eq!(s[[0, 0]], 2.0);
        let dtd = d.t().dot(&d);
        for r in 0..9 {
            for c in 0..9 {
                let (a, b, x, y) = (r / 3, r % 3, c / 3, c % 3);
                let expect = dtd[[a, x]] * f64::from(u8::from(b == y))
                    + f64::from(u8::from(a == x)) * dtd[[b, y]];
                assert_eq!(s[[r, c]], expect);
            }
        }
    }

    #[test]
    fn zero_left_difference_gives_right_kronecker_term() {
        let dj = Array2::<f64>::zeros((2, 4));
        let dk = difference_penalty(3, 2).unwrap();
        let s = interaction_penalty(dj.view(), dk.view());
        let expect = kron(&Array2::<f64>::eye(4), &dk.t().dot(&dk));
        assert_eq!(s, expect);
    }

    #[test]
    fn bilinear_surface_is_unpenalized() {
        let (k, l) = (5, 4);
        let dj = difference_penalty(k, 2).unwrap();
        let dk = difference_penalty(l, 2).unwrap();
        let s = interaction_penalty(dj.view(), dk.view());
        let gamma = Array1::from_shape_fn(k * l, |idx| {
            let (a, b) = ((idx / l) as f64, (idx % l) as f64);
            0.3 + 1.7 * a - 0.4 * b + 0.9 * a * b
        });
        assert_abs_diff_eq!(gamma.dot(&s.dot(&gamma)), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn sparse_basis_round_trips_to_dense() {
        let values = Array1::linspace(-1.0, 1.0, 17);
        let knots = make_knots(values.view(), 4, 2, KnotPlacement::UniformOnRange).unwrap();
        let sb = SparseBasis::evaluate(values.view(), &knots, 2);
        assert_eq!(sb.n_cols(), 7);
        assert_eq!(sb.to_dense(), bspline_basis(values.view(), &knots, 2));
    }
}
