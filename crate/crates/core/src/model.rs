//! Fitted additive model in original covariate units.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::block_cd::{BlockFit, PenaltyParams};
use crate::design::{BlockIndex, BlockSet, BlockSource, Standardizer};
use crate::error::{Error, Result};
use crate::splines::{eval_nonzero, SplineConfig};

/// Knot vectors needed to evaluate every block of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineMeta {
    pub config: SplineConfig,
    pub main_knots: Vec<Vec<f64>>,
    pub interaction_knots: Vec<Option<Vec<f64>>>,
}

impl SplineMeta {
    pub fn from_blocks(blocks: &BlockSet) -> Self {
        Self {
            config: *blocks.config(),
            main_knots: (0..blocks.p()).map(|j| blocks.main_knots(j).to_vec()).collect(),
            interaction_knots: (0..blocks.p())
                .map(|j| blocks.interaction_knots(j).map(<[f64]>::to_vec))
                .collect(),
        }
    }

    /// Standardized-unit range spanned by the main-effect knots of `j`.
    pub fn range(&self, j: usize) -> (f64, f64) {
        let k = &self.main_knots[j];
        (k[0], k[k.len() - 1])
    }
}

/// One coefficient block as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredBlock {
    block: BlockIndex,
    coef: Array1<f64>,
    offset: f64,
}

/// `intercept + Σ_b B_b(x) coef_b` with `x` standardized by the training
/// parameters and clamped to the training knot ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct AdditiveModel {
    pub intercept: f64,
    /// Nonzero blocks only.
    pub coefficients: BTreeMap<BlockIndex, Array1<f64>>,
    /// Training mean of each block's raw contribution; subtracting it gives
    /// the centered component function.
    pub offsets: BTreeMap<BlockIndex, f64>,
    pub params: PenaltyParams,
    pub standardizer: Standardizer,
    pub spline: SplineMeta,
    pub feature_names: Vec<String>,
    pub converged: bool,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    intercept: f64,
    blocks: Vec<StoredBlock>,
    params: PenaltyParams,
    standardizer: Standardizer,
    spline: SplineMeta,
    feature_names: Vec<String>,
    converged: bool,
}

impl From<AdditiveModel> for ModelRepr {
    fn from(m: AdditiveModel) -> Self {
        let blocks = m
            .coefficients
            .into_iter()
            .map(|(block, coef)| StoredBlock {
                offset: m.offsets.get(&block).copied().unwrap_or(0.0),
                block,
                coef,
            })
            .collect();
        Self {
            intercept: m.intercept,
            blocks,
            params: m.params,
            standardizer: m.standardizer,
            spline: m.spline,
            feature_names: m.feature_names,
            converged: m.converged,
        }
    }
}

impl TryFrom<ModelRepr> for AdditiveModel {
    type Error = Error;

    fn try_from(r: ModelRepr) -> Result<Self> {
        let mut coefficients = BTreeMap::new();
        let mut offsets = BTreeMap::new();
        for b in r.blocks {
            offsets.insert(b.block, b.offset);
            coefficients.insert(b.block, b.coef);
        }
        let model = AdditiveModel {
            intercept: r.intercept,
            coefficients,
            offsets,
            params: r.params,
            standardizer: r.standardizer,
            spline: r.spline,
            feature_names: r.feature_names,
            converged: r.converged,
        };
        model.validate()?;
        Ok(model)
    }
}

impl AdditiveModel {
    /// Converts a solver result; `y_mean` is the training response mean that
    /// was subtracted before fitting.
    pub fn from_fit(
        fit: &BlockFit,
        blocks: &BlockSet,
        standardizer: &Standardizer,
        y_mean: f64,
    ) -> Result<Self> {
        let mut offsets = BTreeMap::new();
        let mut coefficients = BTreeMap::new();
        for (&idx, coef) in &fit.coefficients {
            if coef.iter().all(|&v| v == 0.0) {
                continue;
            }
            let design = blocks.design(idx)?;
            offsets.insert(idx, design.col_means().dot(coef));
            coefficients.insert(idx, coef.clone());
        }
        let intercept = y_mean - offsets.values().sum::<f64>();
        let model = Self {
            intercept,
            coefficients,
            offsets,
            params: fit.params,
            standardizer: standardizer.clone(),
            spline: SplineMeta::from_blocks(blocks),
            feature_names: blocks.feature_names().to_vec(),
            converged: fit.converged,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn p(&self) -> usize {
        self.feature_names.len()
    }

    pub fn support(&self) -> BTreeSet<BlockIndex> {
        self.coefficients.keys().copied().collect()
    }

    pub fn n_main(&self) -> usize {
        self.coefficients.keys().filter(|b| !b.is_interaction()).count()
    }

    pub fn n_interaction(&self) -> usize {
        self.coefficients.keys().filter(|b| b.is_interaction()).count()
    }

    fn validate(&self) -> Result<()> {
        let p = self.p();
        if self.standardizer.p() != p || self.spline.main_knots.len() != p || self.spline.interaction_knots.len() != p {
            return Err(Error::Archive(format!("model metadata is inconsistent with {p} covariates")));
        }
        let degree = self.spline.config.degree;
        for (idx, coef) in &self.coefficients {
            let dim = match *idx {
                BlockIndex::Main(j) if j < p => self.spline.main_knots[j].len() - degree - 1,
                BlockIndex::Interaction(j, k) if j < k && k < p => {
                    let axis = |c: usize| {
                        self.spline.interaction_knots[c]
                            .as_ref()
                            .map(|kn| kn.len() - degree - 1)
                    };
                    match (axis(j), axis(k)) {
                        (Some(a), Some(b)) => a * b,
                        _ => return Err(Error::Archive(format!("missing knots for {idx}"))),
                    }
                }
                _ => return Err(Error::Archive(format!("block {idx} out of range"))),
            };
            if coef.len() != dim {
                return Err(Error::Archive(format!(
                    "{idx} stores {} coefficients, basis has {dim}",
                    coef.len()
                )));
            }
        }
        Ok(())
    }

    /// Raw (uncentered) contribution of one block at standardized inputs.
    fn block_value(&self, idx: BlockIndex, coef: &Array1<f64>, zj: f64, zk: f64, buf: &mut [f64], buf2: &mut [f64]) -> f64 {
        let degree = self.spline.config.degree;
        let raw = match idx {
            BlockIndex::Main(j) => {
                let s = eval_nonzero(zj, &self.spline.main_knots[j], degree, buf);
                buf.iter().enumerate().map(|(c, v)| v * coef[s + c]).sum::<f64>()
            }
            BlockIndex::Interaction(j, k) => {
                let kj = self.spline.interaction_knots[j].as_deref().expect("validated");
                let kk = self.spline.interaction_knots[k].as_deref().expect("validated");
                let l = kk.len() - degree - 1;
                let sa = eval_nonzero(zj, kj, degree, buf);
                let sb = eval_nonzero(zk, kk, degree, buf2);
                let mut acc = 0.0;
                for (a, va) in buf.iter().enumerate() {
                    for (b, vb) in buf2.iter().enumerate() {
                        acc += va * vb * coef[(sa + a) * l + sb + b];
                    }
                }
                acc
            }
        };
        raw
    }

    /// Predictions for covariates already standardized with the model's
    /// standardizer.
    pub fn predict_standardized(&self, z: ArrayView2<f64>) -> Result<Array1<f64>> {
        if z.ncols() != self.p() {
            return Err(Error::Shape(format!(
                "model expects {} covariates, got {}",
                self.p(),
                z.ncols()
            )));
        }
        let width = self.spline.config.degree + 1;
        let (mut buf, mut buf2) = (vec![0.0; width], vec![0.0; width]);
        let mut out = Array1::from_elem(z.nrows(), self.intercept);
        for (&idx, coef) in &self.coefficients {
            let (j, k) = match idx {
                BlockIndex::Main(j) => (j, j),
                BlockIndex::Interaction(j, k) => (j, k),
            };
            for (i, o) in out.iter_mut().enumerate() {
                *o += self.block_value(idx, coef, z[[i, j]], z[[i, k]], &mut buf, &mut buf2);
            }
        }
        Ok(out)
    }

    /// Predictions for raw covariates in the training column order.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let z = self.standardizer.transform(x)?;
        self.predict_standardized(z.view())
    }

    /// Centered component `f_b` at standardized inputs (`zk` ignored for mains).
    pub fn component(&self, idx: BlockIndex, zj: ArrayView1<f64>, zk: ArrayView1<f64>) -> Result<Array1<f64>> {
        let coef = self
            .coefficients
            .get(&idx)
            .ok_or(Error::NotInSupport { block: idx })?;
        let offset = self.offsets.get(&idx).copied().unwrap_or(0.0);
        let width = self.spline.config.degree + 1;
        let (mut buf, mut buf2) = (vec![0.0; width], vec![0.0; width]);
        Ok(Array1::from_shape_fn(zj.len(), |i| {
            let kv = if idx.is_interaction() { zk[i] } else { 0.0 };
            self.block_value(idx, coef, zj[i], kv, &mut buf, &mut buf2) - offset
        }))
    }
}
