//! Error metrics, quintile agreement, sparsity patterns and component exports.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, ArrayView1};

use crate::design::BlockIndex;
use crate::error::{Error, Result};
use crate::linalg::{quantile_sorted, sorted_copy};
use crate::model::AdditiveModel;

fn check_lengths(y: ArrayView1<f64>, yhat: ArrayView1<f64>) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::Shape(format!("{} targets vs {} predictions", y.len(), yhat.len())));
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("metrics need at least one observation".into()));
    }
    Ok(())
}

pub fn rmse(y: ArrayView1<f64>, yhat: ArrayView1<f64>) -> Result<f64> {
    check_lengths(y, yhat)?;
    let sse: f64 = y.iter().zip(yhat.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

pub fn mae(y: ArrayView1<f64>, yhat: ArrayView1<f64>) -> Result<f64> {
    check_lengths(y, yhat)?;
    let sae: f64 = y.iter().zip(yhat.iter()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sae / y.len() as f64)
}

/// Joint membership of actual and predicted values in their own quintiles.
#[derive(Debug, Clone, PartialEq)]
pub struct QuintileMatrix {
    /// `counts[[a, b]]`: actual in quintile `a`, predicted in quintile `b`.
    pub counts: Array2<usize>,
    pub row_fractions: Array2<f64>,
}

/// Quintile index of each value; a value equal to a boundary falls in the
/// lower quintile.
pub fn quintile_labels(v: ArrayView1<f64>) -> Vec<usize> {
    let sorted = sorted_copy(v);
    let bounds: Vec<f64> = [0.2, 0.4, 0.6, 0.8]
        .iter()
        .map(|&p| quantile_sorted(&sorted, p))
        .collect();
    v.iter()
        .map(|&x| bounds.iter().filter(|&&b| x > b).count())
        .collect()
}

pub fn quintile_confusion(actual: ArrayView1<f64>, predicted: ArrayView1<f64>) -> Result<QuintileMatrix> {
    check_lengths(actual, predicted)?;
    let qa = quintile_labels(actual);
    let qp = quintile_labels(predicted);
    let mut counts = Array2::zeros((5, 5));
    for (&a, &b) in qa.iter().zip(qp.iter()) {
        counts[[a, b]] += 1;
    }
    let mut row_fractions = Array2::zeros((5, 5));
    for a in 0..5 {
        let total: usize = counts.row(a).sum();
        if total > 0 {
            for b in 0..5 {
                row_fractions[[a, b]] = counts[[a, b]] as f64 / total as f64;
            }
        }
    }
    Ok(QuintileMatrix {
        counts,
        row_fractions,
    })
}

/// Symmetric `p × p` indicator: `(j, j)` for mains, `(j, k)` and `(k, j)` for
/// interactions.
pub fn sparsity_pattern<'a>(support: impl IntoIterator<Item = &'a BlockIndex>, p: usize) -> Array2<u8> {
    let mut m = Array2::zeros((p, p));
    for idx in support {
        match *idx {
            BlockIndex::Main(j) => m[[j, j]] = 1,
            BlockIndex::Interaction(j, k) => {
                m[[j, k]] = 1;
                m[[k, j]] = 1;
            }
        }
    }
    m
}

/// Number of distinct covariates used by any selected block.
pub fn effective_covariates<'a>(support: impl IntoIterator<Item = &'a BlockIndex>) -> usize {
    support
        .into_iter()
        .flat_map(|b| b.covariates())
        .collect::<BTreeSet<_>>()
        .len()
}

/// Component function values on a grid, in original covariate units.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialDependence {
    pub block: BlockIndex,
    /// Grid along the first covariate.
    pub x: Vec<f64>,
    /// Grid along the second covariate (interactions only).
    pub x2: Vec<f64>,
    /// `values[i]` for mains; `values[i * x2.len() + l]` for interactions.
    pub values: Vec<f64>,
}

fn grid(lo: f64, hi: f64, size: usize) -> Array1<f64> {
    if size == 1 {
        return Array1::from_elem(1, 0.5 * (lo + hi));
    }
    Array1::from_shape_fn(size, |i| {
        if i == size - 1 {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (size - 1) as f64
        }
    })
}

/// Evaluates the centered component of `block` on `grid_size` points (per
/// axis) spanning the training range.
pub fn partial_dependence(model: &AdditiveModel, block: BlockIndex, grid_size: usize) -> Result<PartialDependence> {
    if !model.coefficients.contains_key(&block) {
        return Err(Error::NotInSupport { block });
    }
    if grid_size == 0 {
        return Err(Error::InvalidArgument("grid_size must be >= 1".into()));
    }
    let axis = |j: usize| {
        let (lo, hi) = model.spline.range(j);
        grid(lo, hi, grid_size)
    };
    let to_original = |j: usize, z: &Array1<f64>| -> Vec<f64> {
        let (m, s) = (model.standardizer.means[j], model.standardizer.stdevs[j]);
        z.iter().map(|v| v * s + m).collect()
    };
    match block {
        BlockIndex::Main(j) => {
            let z = axis(j);
            let values = model.component(block, z.view(), z.view())?.to_vec();
            Ok(PartialDependence {
                block,
                x: to_original(j, &z),
                x2: Vec::new(),
                values,
            })
        }
        BlockIndex::Interaction(j, k) => {
            let (zj, zk) = (axis(j), axis(k));
            let g = grid_size;
            let a = Array1::from_shape_fn(g * g, |i| zj[i / g]);
            let b = Array1::from_shape_fn(g * g, |i| zk[i % g]);
            let values = model.component(block, a.view(), b.view())?.to_vec();
            Ok(PartialDependence {
                block,
                x: to_original(j, &zj),
                x2: to_original(k, &zk),
                values,
            })
        }
    }
}

/// Mains ordered by the first position along a decreasing-λ2 sequence of
/// supports at which they enter; ties by covariate index.
pub fn support_ordering<'a, I, S>(supports: I) -> Vec<usize>
where
    I: IntoIterator<Item = S>,
    S: IntoIterator<Item = &'a BlockIndex>,
{
    let mut first: BTreeMap<usize, usize> = BTreeMap::new();
    for (pos, support) in supports.into_iter().enumerate() {
        for idx in support {
            if let BlockIndex::Main(j) = *idx {
                first.entry(j).or_insert(pos);
            }
        }
    }
    let mut order: Vec<(usize, usize)> = first.into_iter().map(|(j, pos)| (pos, j)).collect();
    order.sort_unstable();
    order.into_iter().map(|(_, j)| j).collect()
}

/// True iff every interaction in the support has both parent mains.
pub fn check_strong_hierarchy<'a>(support: impl IntoIterator<Item = &'a BlockIndex>) -> bool {
    let support: Vec<&BlockIndex> = support.into_iter().collect();
    let mains: BTreeSet<usize> = support
        .iter()
        .filter_map(|b| match **b {
            BlockIndex::Main(j) => Some(j),
            _ => None,
        })
        .collect();
    support.iter().all(|b| match **b {
        BlockIndex::Interaction(j, k) => mains.contains(&j) && mains.contains(&k),
        _ => true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_predictions_have_zero_error() {
        let y = array![1.0, 2.0, 3.0];
        assert_eq!(rmse(y.view(), y.view()).unwrap(), 0.0);
        assert_eq!(mae(y.view(), y.view()).unwrap(), 0.0);
    }

    #[test]
    fn constant_error() {
        let y = array![1.0, 2.0, 3.0];
        let yhat = &y - 2.5;
        assert!((rmse(y.view(), yhat.view()).unwrap() - 2.5).abs() < 1e-15);
        assert!((mae(y.view(), yhat.view()).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_metrics() {
        let y = array![0.0, 0.0];
        let yhat = array![3.0, 4.0];
        assert_eq!(rmse(y.view(), yhat.view()).unwrap(), 12.5f64.sqrt());
        assert_eq!(mae(y.view(), yhat.view()).unwrap(), 3.5);
    }

    #[test]
    fn metric_length_mismatch() {
        assert!(rmse(array![1.0].view(), array![1.0, 2.0].view()).is_err());
        assert!(mae(array![1.0].view(), array![1.0, 2.0].view()).is_err());
    }

    #[test]
    fn identical_vectors_give_diagonal() {
        let v = Array1::from_shape_fn(23, |i| ((i * 7) % 23) as f64);
        let q = quintile_confusion(v.view(), v.view()).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                if a != b {
                    assert_eq!(q.counts[[a, b]], 0);
                }
            }
            assert_eq!(q.row_fractions[[a, a]], 1.0);
        }
        assert_eq!(q.counts.sum(), 23);
    }

    #[test]
    fn negated_vector_gives_anti_diagonal() {
        let v = Array1::from_shape_fn(10, |i| i as f64 * 1.3 + 0.1);
        let neg = v.mapv(|x| -x);
        let q = quintile_confusion(v.view(), neg.view()).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                if a + b != 4 {
                    assert_eq!(q.counts[[a, b]], 0);
                }
            }
        }
    }

    #[test]
    fn hand_tabulated_quintiles() {
        // actual 1..10: boundaries 2.8, 4.6, 6.4, 8.2 -> labels 0,0,1,1,2,2,3,3,4,4
        let actual = array![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        // predicted: shift the first two quintile pairs
        let predicted = array![3.0, 1.0, 2.0, 4.0, 5.0, 6.0, 7.0, 8.0, 10.0, 9.0];
        assert_eq!(quintile_labels(actual.view()), vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
        assert_eq!(quintile_labels(predicted.view()), vec![1, 0, 0, 1, 2, 2, 3, 3, 4, 4]);
        let q = quintile_confusion(actual.view(), predicted.view()).unwrap();
        let expected = array![
            [1, 1, 0, 0, 0],
            [1, 1, 0, 0, 0],
            [0, 0, 2, 0, 0],
            [0, 0, 0, 2, 0],
            [0, 0, 0, 0, 2]
        ];
        assert_eq!(q.counts, expected);
        assert_eq!(q.row_fractions[[0, 0]], 0.5);
    }

    #[test]
    fn ties_go_to_lower_quintile() {
        let v = array![1.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(quintile_labels(v.view()), vec![0; 5]);
        let q = quintile_confusion(v.view(), v.view()).unwrap();
        assert_eq!(q.row_fractions.row(1).sum(), 0.0);
    }

    #[test]
    fn sparsity_patterns() {
        assert_eq!(sparsity_pattern(&[], 3), Array2::<u8>::zeros((3, 3)));
        let s = [BlockIndex::Main(1), BlockIndex::Interaction(1, 2)];
        let m = sparsity_pattern(&s, 3);
        let expected = array![[0, 0, 0], [0, 1, 1], [0, 1, 0]];
        assert_eq!(m, expected);
        assert_eq!(m, m.t());
    }

    #[test]
    fn effective_covariate_counts() {
        assert_eq!(effective_covariates(&[BlockIndex::Main(1), BlockIndex::Interaction(2, 3)]), 3);
        assert_eq!(effective_covariates(&[]), 0);
    }

    #[test]
    fn ordering_by_entry_position() {
        let path = [
            vec![],
            vec![BlockIndex::Main(2)],
            vec![BlockIndex::Main(2), BlockIndex::Main(1), BlockIndex::Interaction(0, 1)],
            vec![BlockIndex::Main(0), BlockIndex::Main(1), BlockIndex::Main(2)],
        ];
        assert_eq!(support_ordering(path.iter()), vec![2, 1, 0]);
        assert!(support_ordering(Vec::<Vec<BlockIndex>>::new().iter()).is_empty());
        let single = [vec![BlockIndex::Main(3), BlockIndex::Main(0)]];
        assert_eq!(support_ordering(single.iter()), vec![0, 3]);
    }

    #[test]
    fn strong_hierarchy_check() {
        assert!(!check_strong_hierarchy(&[BlockIndex::Main(1), BlockIndex::Interaction(1, 2)]));
        assert!(check_strong_hierarchy(&[
            BlockIndex::Main(1),
            BlockIndex::Main(2),
            BlockIndex::Interaction(1, 2)
        ]));
        assert!(check_strong_hierarchy(&[BlockIndex::Main(0)]));
    }
}
