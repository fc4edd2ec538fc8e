//! Warm-started fits over a `(λ1, λ2)` grid and validation-based selection.

use std::collections::BTreeMap;
use std::sync::Mutex;

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block_cd::{compute_lambda2_max, fit, residual, BlockFit, FactorCache, FitOptions, PenaltyParams};
use crate::design::{BlockIndex, BlockSource};
use crate::error::{Error, Result};
use crate::linalg::log_space;

/// Sizing of the tuning grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Number of λ1 values.
    pub n_lambda1: usize,
    /// Number of λ2 values; derived from `budget / n_lambda1` when absent.
    pub n_lambda2: Option<usize>,
    pub lambda1_range: (f64, f64),
    /// Smallest λ2 as a fraction of λ2_max.
    pub lambda2_ratio: f64,
    /// Upper bound on the number of grid nodes.
    pub budget: usize,
    pub alpha: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n_lambda1: 20,
            n_lambda2: None,
            lambda1_range: (1e-4, 10.0),
            lambda2_ratio: 1e-4,
            budget: 1000,
            alpha: 1.0,
        }
    }
}

impl GridSpec {
    pub fn n_lambda2(&self) -> usize {
        self.n_lambda2
            .unwrap_or(self.budget / self.n_lambda1.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_lambda2();
        if self.n_lambda1 == 0 || m == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least one value per axis, got {} x {m}",
                self.n_lambda1
            )));
        }
        if self.n_lambda1 * m > self.budget {
            return Err(Error::InvalidArgument(format!(
                "grid {} x {m} exceeds the budget of {} nodes",
                self.n_lambda1, self.budget
            )));
        }
        let (lo, hi) = self.lambda1_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad lambda1 range ({lo}, {hi})")));
        }
        if !(self.lambda2_ratio > 0.0 && self.lambda2_ratio < 1.0) {
            return Err(Error::InvalidArgument("lambda2_ratio must lie in (0, 1)".into()));
        }
        PenaltyParams::new(0.0, 0.0, self.alpha).map(|_| ())
    }
}

/// Validation and training metrics of one fitted node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub n_main: usize,
    pub n_interaction: usize,
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub val_mae: f64,
}

impl NodeMetrics {
    pub fn support_size(&self) -> usize {
        self.n_main + self.n_interaction
    }
}

#[derive(Debug, Clone)]
pub enum NodeOutcome {
    Fitted { fit: BlockFit, metrics: NodeMetrics },
    Failed(String),
}

impl NodeOutcome {
    pub fn fit(&self) -> Option<&BlockFit> {
        match self {
            NodeOutcome::Fitted { fit, .. } => Some(fit),
            NodeOutcome::Failed(_) => None,
        }
    }

    pub fn metrics(&self) -> Option<&NodeMetrics> {
        match self {
            NodeOutcome::Fitted { metrics, .. } => Some(metrics),
            NodeOutcome::Failed(_) => None,
        }
    }
}

/// Tuning grid; `nodes[(l, m)]` holds the fit at `(λ1[l], λ2[m])`.
#[derive(Debug, Clone)]
pub struct PathGrid {
    pub lambda1_values: Vec<f64>,
    pub lambda2_values: Vec<f64>,
    pub lambda2_max: f64,
    pub alpha: f64,
    pub nodes: BTreeMap<(usize, usize), NodeOutcome>,
}

impl PathGrid {
    pub fn params(&self, l: usize, m: usize) -> PenaltyParams {
        PenaltyParams {
            lambda1: self.lambda1_values[l],
            lambda2: self.lambda2_values[m],
            alpha: self.alpha,
        }
    }

    pub fn fitted(&self) -> impl Iterator<Item = ((usize, usize), &BlockFit, &NodeMetrics)> {
        self.nodes.iter().filter_map(|(&k, o)| match o {
            NodeOutcome::Fitted { fit, metrics } => Some((k, fit, metrics)),
            NodeOutcome::Failed(_) => None,
        })
    }

    pub fn n_failed(&self) -> usize {
        self.nodes
            .values()
            .filter(|o| matches!(o, NodeOutcome::Failed(_)))
            .count()
    }

    /// Supports along λ1 row `l`, in decreasing λ2 order.
    pub fn row_supports(&self, l: usize) -> Vec<Vec<BlockIndex>> {
        (0..self.lambda2_values.len())
            .filter_map(|m| self.nodes.get(&(l, m)).and_then(NodeOutcome::fit))
            .map(|f| f.coefficients.keys().copied().collect())
            .collect()
    }
}

/// Log-spaced skeleton: λ1 decreasing over `spec.lambda1_range`, λ2
/// decreasing from λ2_max (computed at the largest λ1) down to
/// `λ2_max · lambda2_ratio`.
pub fn build_grid(
    source: &dyn BlockSource,
    y_centered: ArrayView1<f64>,
    spec: &GridSpec,
    options: &FitOptions,
    cache: &FactorCache,
) -> Result<PathGrid> {
    spec.validate()?;
    let (lo, hi) = spec.lambda1_range;
    let lambda1_values = log_space(hi, lo, spec.n_lambda1);
    let lambda2_max = compute_lambda2_max(source, y_centered, lambda1_values[0], spec.alpha, options, cache)?;
    if !(lambda2_max > 0.0) {
        return Err(Error::Data(
            "response has no component explained by any block (lambda2_max = 0)".into(),
        ));
    }
    let m = spec.n_lambda2();
    let lambda2_values = log_space(lambda2_max, lambda2_max * spec.lambda2_ratio, m);
    Ok(PathGrid {
        lambda1_values,
        lambda2_values,
        lambda2_max,
        alpha: spec.alpha,
        nodes: BTreeMap::new(),
    })
}

/// Scores a fitted node on held-out data, returning `(rmse, mae)`.
pub type Scorer<'a> = dyn Fn(&BlockFit) -> Result<(f64, f64)> + Sync + 'a;

fn fit_node(
    source: &dyn BlockSource,
    y_centered: ArrayView1<f64>,
    params: &PenaltyParams,
    options: &FitOptions,
    warm: Option<&BlockFit>,
    cache: &FactorCache,
    scorer: &Scorer<'_>,
) -> NodeOutcome {
    let run = || -> Result<NodeOutcome> {
        let f = fit(source, y_centered, params, options, warm, cache)?;
        let r = residual(source, y_centered, &f.coefficients)?;
        let train_rmse = (r.dot(&r) / r.len() as f64).sqrt();
        let (val_rmse, val_mae) = scorer(&f)?;
        let metrics = NodeMetrics {
            n_main: f.n_main(),
            n_interaction: f.n_interaction(),
            train_rmse,
            val_rmse,
            val_mae,
        };
        Ok(NodeOutcome::Fitted { fit: f, metrics })
    };
    run().unwrap_or_else(|e| NodeOutcome::Failed(e.to_string()))
}

/// Fills every node. Column `λ1[0]` is traced sequentially down λ2, each
/// node warm-started from its predecessor; then each later λ1 row is
/// filled with node `(l, m)` warm-started from `(l − 1, m)`, the nodes of a
/// row running in parallel. Failures are recorded and the path continues.
pub fn fit_path(
    grid: &mut PathGrid,
    source: &dyn BlockSource,
    y_centered: ArrayView1<f64>,
    options: &FitOptions,
    cache: &FactorCache,
    scorer: &Scorer<'_>,
) -> Result<()> {
    options.validate()?;
    grid.nodes.clear();
    let m_count = grid.lambda2_values.len();
    cache.retain_lambda1(grid.lambda1_values[0]);
    let mut prev: Option<BlockFit> = None;
    for m in 0..m_count {
        let outcome = fit_node(source, y_centered, &grid.params(0, m), options, prev.as_ref(), cache, scorer);
        if let Some(f) = outcome.fit() {
            prev = Some(f.clone());
        }
        grid.nodes.insert((0, m), outcome);
    }
    for l in 1..grid.lambda1_values.len() {
        cache.retain_lambda1(grid.lambda1_values[l]);
        let filled = Mutex::new(BTreeMap::new());
        let grid_ref = &*grid;
        (0..m_count).into_par_iter().for_each(|m| {
            let warm = grid_ref.nodes.get(&(l - 1, m)).and_then(NodeOutcome::fit);
            let outcome = fit_node(source, y_centered, &grid_ref.params(l, m), options, warm, cache, scorer);
            filled.lock().unwrap_or_else(|e| e.into_inner()).insert((l, m), outcome);
        });
        grid.nodes.extend(filled.into_inner().unwrap_or_else(|e| e.into_inner()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    #[default]
    Rmse,
    Mae,
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rmse" => Ok(Criterion::Rmse),
            "mae" => Ok(Criterion::Mae),
            other => Err(Error::InvalidArgument(format!("unknown criterion `{other}`"))),
        }
    }
}

impl Criterion {
    pub fn value(&self, m: &NodeMetrics) -> f64 {
        match self {
            Criterion::Rmse => m.val_rmse,
            Criterion::Mae => m.val_mae,
        }
    }
}

fn nearly_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// Node with the best validation criterion among nodes with support at most
/// `max_support`; ties go to the smaller support, then the larger λ2.
pub fn select_model(grid: &PathGrid, criterion: Criterion, max_support: Option<usize>) -> Result<(usize, usize)> {
    let mut best: Option<((usize, usize), f64, usize)> = None;
    for ((l, m), _, metrics) in grid.fitted() {
        let size = metrics.support_size();
        if max_support.is_some_and(|cap| size > cap) {
            continue;
        }
        let score = criterion.value(metrics);
        if !score.is_finite() {
            continue;
        }
        let better = match best {
            None => true,
            Some(((_, bm), bs, bsize)) => {
                if nearly_equal(score, bs) {
                    size < bsize || (size == bsize && m < bm)
                } else {
                    score < bs
                }
            }
        };
        if better {
            best = Some(((l, m), score, size));
        }
    }
    best.map(|(node, _, _)| node).ok_or(Error::EmptyGrid)
}
