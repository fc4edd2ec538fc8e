//! Strong-hierarchy variant: relax the indicator program on the union of
//! path supports, round at a threshold τ and polish on the rounded support.
//!
//! With the indicators eliminated, the relaxation reads
//!
//! ```text
//! min g(x) + (λ2/M) [ Σ_j max(‖β_j‖, max_k ‖θ_jk‖) + α Σ ‖θ_jk‖ ]   s.t. ‖x_b‖ ≤ M
//! ```
//!
//! where `g` is the smooth objective and the inner max runs over the
//! interactions containing `j`. It is solved by accelerated proximal
//! gradient; the proximal step reduces to a problem in the block norms that
//! is solved through its dual over a product of simplices.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::block_cd::{joint_ridge, BlockFit, FactorCache, PenaltyParams};
use crate::design::{BlockDesign, BlockIndex, BlockSource};
use crate::error::{Error, Result};
pub use crate::evaluation::check_strong_hierarchy;
use crate::evaluation::effective_covariates;
use crate::linalg::quad_form;
use crate::path::{Criterion, PathGrid, Scorer};

/// Restricted problem on a hierarchy-closed set of mains and pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedProblem {
    pub mains: BTreeSet<usize>,
    pub pairs: BTreeSet<(usize, usize)>,
    pub big_m: f64,
    pub params: PenaltyParams,
}

impl RestrictedProblem {
    pub fn new(
        mains: BTreeSet<usize>,
        pairs: BTreeSet<(usize, usize)>,
        big_m: f64,
        params: PenaltyParams,
    ) -> Result<Self> {
        params.validate()?;
        if !(big_m > 0.0 && big_m.is_finite()) {
            return Err(Error::InvalidArgument(format!("bigM = {big_m} must be positive")));
        }
        if let Some(&(j, k)) = pairs
            .iter()
            .find(|(j, k)| !mains.contains(j) || !mains.contains(k) || j >= k)
        {
            return Err(Error::InvalidArgument(format!(
                "pair ({j}, {k}) lacks a parent main effect"
            )));
        }
        Ok(Self {
            mains,
            pairs,
            big_m,
            params,
        })
    }

    /// Mains then pairs, in canonical order.
    pub fn blocks(&self) -> Vec<BlockIndex> {
        self.mains
            .iter()
            .map(|&j| BlockIndex::Main(j))
            .chain(self.pairs.iter().map(|&(j, k)| BlockIndex::Interaction(j, k)))
            .collect()
    }
}

/// Adds the parents of every pair to the main set.
pub fn close_under_hierarchy(
    mut mains: BTreeSet<usize>,
    pairs: BTreeSet<(usize, usize)>,
) -> (BTreeSet<usize>, BTreeSet<(usize, usize)>) {
    for &(j, k) in &pairs {
        mains.insert(j);
        mains.insert(k);
    }
    (mains, pairs)
}

/// Union of the supports of `fits`, closed under hierarchy.
pub fn collect_support_union<'a>(
    fits: impl IntoIterator<Item = &'a BlockFit>,
) -> (BTreeSet<usize>, BTreeSet<(usize, usize)>) {
    let mut mains = BTreeSet::new();
    let mut pairs = BTreeSet::new();
    for f in fits {
        for idx in f.coefficients.keys() {
            match *idx {
                BlockIndex::Main(j) => {
                    mains.insert(j);
                }
                BlockIndex::Interaction(j, k) => {
                    pairs.insert((j, k));
                }
            }
        }
    }
    close_under_hierarchy(mains, pairs)
}

/// Twice the largest block norm of a reference fit, or 1 when it is zero.
pub fn choose_big_m(reference: &BTreeMap<BlockIndex, Array1<f64>>) -> f64 {
    let max = reference
        .values()
        .map(|c| c.dot(c).sqrt())
        .fold(0.0, f64::max);
    if max > 0.0 {
        2.0 * max
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxationSolution {
    pub z_main: BTreeMap<usize, f64>,
    pub z_int: BTreeMap<(usize, usize), f64>,
    /// Every block of the restricted problem, zero blocks included.
    pub coefficients: BTreeMap<BlockIndex, Array1<f64>>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelaxationOptions {
    /// Relative objective change that counts as stationary.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RelaxationOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 20_000,
        }
    }
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &mut [f64]) {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// Prox of the hierarchical norm penalty in the space of block norms:
/// `min_s ½‖s − a‖² + c (Σ_g max_{i∈g} s_i + Σ_i lin_i s_i)`, `0 ≤ s ≤ M`.
struct NormProx {
    groups: Vec<Vec<usize>>,
    lin: Vec<f64>,
    dual: Vec<Vec<f64>>,
}

impl NormProx {
    fn new(groups: Vec<Vec<usize>>, lin: Vec<f64>) -> Self {
        let dual = groups
            .iter()
            .map(|g| vec![1.0 / g.len() as f64; g.len()])
            .collect();
        Self { groups, lin, dual }
    }

    fn primal_from(&self, w: &[Vec<f64>], a: &[f64], c: f64, big_m: f64) -> Vec<f64> {
        let mut u = self.lin.clone();
        for (g, wg) in self.groups.iter().zip(w) {
            for (&i, &wi) in g.iter().zip(wg) {
                u[i] += wi;
            }
        }
        a.iter()
            .zip(&u)
            .map(|(&ai, &ui)| (ai - c * ui).clamp(0.0, big_m))
            .collect()
    }

    /// `Σ_g max_{i∈g} s_i + Σ_i lin_i s_i`.
    fn penalty(&self, s: &[f64]) -> f64 {
        let lin: f64 = s.iter().zip(&self.lin).map(|(x, l)| x * l).sum();
        let maxes: f64 = self
            .groups
            .iter()
            .map(|g| g.iter().map(|&i| s[i]).fold(0.0, f64::max))
            .sum();
        lin + maxes
    }

    fn primal_value(&self, s: &[f64], a: &[f64], c: f64) -> f64 {
        let fit: f64 = s.iter().zip(a).map(|(x, y)| 0.5 * (x - y).powi(2)).sum();
        fit + c * self.penalty(s)
    }

    fn dual_value(&self, w: &[Vec<f64>], s: &[f64], a: &[f64], c: f64) -> f64 {
        let fit: f64 = s.iter().zip(a).map(|(x, y)| 0.5 * (x - y).powi(2)).sum();
        let lin: f64 = s.iter().zip(&self.lin).map(|(x, l)| x * l).sum();
        let inner: f64 = self
            .groups
            .iter()
            .zip(w)
            .map(|(g, wg)| g.iter().zip(wg).map(|(&i, &wi)| wi * s[i]).sum::<f64>())
            .sum();
        fit + c * (lin + inner)
    }

    fn solve(&mut self, a: &[f64], c: f64, big_m: f64) -> Vec<f64> {
        if c == 0.0 || self.groups.is_empty() {
            return a
                .iter()
                .zip(&self.lin)
                .map(|(&ai, &l)| (ai - c * l).clamp(0.0, big_m))
                .collect();
        }
        let scale = 1.0 + a.iter().map(|v| v * v).sum::<f64>();
        // gradient of the dual is c·s(w); s is c·‖A‖-Lipschitz with ‖A‖² ≤ 2
        let step_over_c = 1.0 / (2.0 * c);
        let mut w = self.dual.clone();
        let mut v = w.clone();
        let mut theta = 1.0f64;
        let mut best = self.primal_from(&w, a, c, big_m);
        let mut best_val = self.primal_value(&best, a, c);
        for it in 0..20_000 {
            let s = self.primal_from(&v, a, c, big_m);
            let mut w_new = v.clone();
            for (g, wg) in self.groups.iter().zip(w_new.iter_mut()) {
                for (&i, wi) in g.iter().zip(wg.iter_mut()) {
                    *wi += step_over_c * s[i];
                }
                project_simplex(wg);
            }
            let theta_new = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            let beta = (theta - 1.0) / theta_new;
            for ((vg, wn), wo) in v.iter_mut().zip(&w_new).zip(&w) {
                for ((vi, &n), &o) in vg.iter_mut().zip(wn).zip(wo) {
                    *vi = n + beta * (n - o);
                }
            }
            w = w_new;
            theta = theta_new;
            if it % 5 == 4 {
                let s_w = self.primal_from(&w, a, c, big_m);
                let p = self.primal_value(&s_w, a, c);
                if p < best_val {
                    best_val = p;
                    best = s_w.clone();
                }
                let d = self.dual_value(&w, &s_w, a, c);
                if best_val - d <= 1e-15 * scale {
                    break;
                }
            }
        }
        self.dual = w;
        best
    }
}

struct Relaxer<'a> {
    designs: Vec<Arc<dyn BlockDesign>>,
    blocks: Vec<BlockIndex>,
    y: ArrayView1<'a, f64>,
    n: f64,
    lambda1: f64,
    prox: NormProx,
}

impl Relaxer<'_> {
    fn residual(&self, x: &[Array1<f64>]) -> Array1<f64> {
        let mut r = self.y.to_owned();
        for (d, xb) in self.designs.iter().zip(x) {
            d.mul_add(xb.view(), -1.0, &mut r);
        }
        r
    }

    fn smooth(&self, x: &[Array1<f64>], r: &Array1<f64>) -> f64 {
        r.dot(r) / self.n
            + self.lambda1
                * self
                    .designs
                    .iter()
                    .zip(x)
                    .map(|(d, xb)| quad_form(d.penalty(), xb.view()))
                    .sum::<f64>()
    }

    fn gradient(&self, x: &[Array1<f64>], r: &Array1<f64>) -> Vec<Array1<f64>> {
        self.designs
            .iter()
            .zip(x)
            .map(|(d, xb)| {
                let mut g = d.transpose_mul(r.view()) * (-2.0 / self.n);
                if self.lambda1 > 0.0 {
                    g.scaled_add(2.0 * self.lambda1, &d.penalty().dot(xb));
                }
                g
            })
            .collect()
    }

    /// Largest eigenvalue of the Hessian of `g`, by power iteration.
    fn lipschitz(&self) -> f64 {
        let mut v: Vec<Array1<f64>> = self
            .designs
            .iter()
            .enumerate()
            .map(|(b, d)| Array1::from_shape_fn(d.dim(), |i| 1.0 + ((i * 7 + b * 3) % 5) as f64))
            .collect();
        let mut est = 0.0;
        for _ in 0..40 {
            let norm = v.iter().map(|a| a.dot(a)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            for a in v.iter_mut() {
                *a /= norm;
            }
            let mut bv = Array1::zeros(self.n as usize);
            for (d, a) in self.designs.iter().zip(&v) {
                d.mul_add(a.view(), 1.0, &mut bv);
            }
            let hv: Vec<Array1<f64>> = self
                .designs
                .iter()
                .zip(&v)
                .map(|(d, a)| {
                    let mut h = d.transpose_mul(bv.view()) * (2.0 / self.n);
                    h.scaled_add(2.0 * self.lambda1, &d.penalty().dot(a));
                    h
                })
                .collect();
            est = hv.iter().zip(&v).map(|(h, a)| h.dot(a)).sum::<f64>();
            v = hv;
        }
        est
    }
}

fn norms(x: &[Array1<f64>]) -> Vec<f64> {
    x.iter().map(|a| a.dot(a).sqrt()).collect()
}

/// Approximately solves the relaxation by accelerated proximal gradient with
/// backtracking and function-value restarts.
pub fn solve_relaxation(
    problem: &RestrictedProblem,
    source: &dyn BlockSource,
    y_centered: ArrayView1<f64>,
    options: &RelaxationOptions,
    warm_start: Option<&RelaxationSolution>,
) -> Result<RelaxationSolution> {
    let blocks = problem.blocks();
    let designs: Vec<Arc<dyn BlockDesign>> = blocks
        .iter()
        .map(|&b| source.design(b))
        .collect::<Result<_>>()?;
    let pos: HashMap<BlockIndex, usize> = blocks.iter().enumerate().map(|(i, &b)| (b, i)).collect();
    let groups: Vec<Vec<usize>> = problem
        .mains
        .iter()
        .map(|&j| {
            std::iter::once(pos[&BlockIndex::Main(j)])
                .chain(
                    problem
                        .pairs
                        .iter()
                        .filter(|&&(a, b)| a == j || b == j)
                        .map(|&(a, b)| pos[&BlockIndex::Interaction(a, b)]),
                )
                .collect()
        })
        .collect();
    let lin: Vec<f64> = blocks
        .iter()
        .map(|b| if b.is_interaction() { problem.params.alpha } else { 0.0 })
        .collect();
    let big_m = problem.big_m;
    let weight = problem.params.lambda2 / big_m;
    let mut rx = Relaxer {
        designs,
        blocks,
        y: y_centered,
        n: y_centered.len() as f64,
        lambda1: problem.params.lambda1,
        prox: NormProx::new(groups, lin),
    };

    let mut x: Vec<Array1<f64>> = rx
        .designs
        .iter()
        .zip(&rx.blocks)
        .map(|(d, b)| {
            let mut c = warm_start
                .and_then(|w| w.coefficients.get(b).cloned())
                .filter(|c| c.len() == d.dim())
                .unwrap_or_else(|| Array1::zeros(d.dim()));
            let norm = c.dot(&c).sqrt();
            if norm > big_m {
                c *= big_m / norm;
            }
            c
        })
        .collect();
    let mut r_x = rx.residual(&x);
    let mut f_x = rx.smooth(&x, &r_x) + weight * rx.prox.penalty(&norms(&x));
    let lip = rx.lipschitz();
    let mut step = if lip > 0.0 { 1.0 / (1.05 * lip) } else { 1.0 };

    let mut y = x.clone();
    let mut r_y = r_x.clone();
    let mut theta = 1.0f64;
    let mut calm = 0;
    let mut converged = rx.blocks.is_empty();
    let mut iterations = 0;
    while !converged && iterations < options.max_iter {
        iterations += 1;
        let g_y = rx.smooth(&y, &r_y);
        let grad = rx.gradient(&y, &r_y);
        let (x_new, r_new, g_new) = loop {
            let v: Vec<Array1<f64>> = y
                .iter()
                .zip(&grad)
                .map(|(yb, gb)| yb - &(gb * step))
                .collect();
            let a = norms(&v);
            let s = rx.prox.solve(&a, step * weight, big_m);
            let x_new: Vec<Array1<f64>> = v
                .iter()
                .zip(a.iter().zip(&s))
                .map(|(vb, (&ab, &sb))| if ab > 0.0 { vb * (sb / ab) } else { vb * 0.0 })
                .collect();
            let r_new = rx.residual(&x_new);
            let g_new = rx.smooth(&x_new, &r_new);
            let mut lin = 0.0;
            let mut dist = 0.0;
            for ((xn, yb), gb) in x_new.iter().zip(&y).zip(&grad) {
                let d = xn - yb;
                lin += gb.dot(&d);
                dist += d.dot(&d);
            }
            if g_new <= g_y + lin + dist / (2.0 * step) + 1e-12 * g_y.abs() || step < 1e-300 {
                break (x_new, r_new, g_new);
            }
            step *= 0.5;
        };
        let f_new = g_new + weight * rx.prox.penalty(&norms(&x_new));
        if f_new > f_x {
            if theta == 1.0 {
                // a plain proximal step from x no longer descends
                converged = true;
                break;
            }
            // restart momentum from the last accepted point
            y = x.clone();
            r_y = r_x.clone();
            theta = 1.0;
            calm = 0;
            continue;
        }
        let rel = (f_x - f_new) / f_new.abs().max(f64::MIN_POSITIVE);
        let theta_new = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let beta = (theta - 1.0) / theta_new;
        y = x_new
            .iter()
            .zip(&x)
            .map(|(n, o)| n + &((n - o) * beta))
            .collect();
        r_y = &r_new + &((&r_new - &r_x) * beta);
        theta = theta_new;
        x = x_new;
        r_x = r_new;
        f_x = f_new;
        calm = if rel < options.tol { calm + 1 } else { 0 };
        if calm >= 5 {
            converged = true;
        }
    }

    let nx = norms(&x);
    let mut z_int = BTreeMap::new();
    for (b, &nb) in rx.blocks.iter().zip(&nx) {
        if let BlockIndex::Interaction(j, k) = *b {
            z_int.insert((j, k), (nb / big_m).min(1.0));
        }
    }
    let mut z_main = BTreeMap::new();
    for (b, &nb) in rx.blocks.iter().zip(&nx) {
        if let BlockIndex::Main(j) = *b {
            let child = z_int
                .iter()
                .filter(|(&(a, c), _)| a == j || c == j)
                .map(|(_, &z)| z)
                .fold(0.0, f64::max);
            z_main.insert(j, (nb / big_m).min(1.0).max(child));
        }
    }
    let coefficients = rx.blocks.iter().copied().zip(x).collect();
    Ok(RelaxationSolution {
        z_main,
        z_int,
        coefficients,
        objective: f_x,
        converged,
        iterations,
    })
}

/// Support of the blocks whose indicator exceeds `tau`.
pub fn round_solution(relaxed: &RelaxationSolution, tau: f64) -> BTreeSet<BlockIndex> {
    relaxed
        .z_main
        .iter()
        .filter(|(_, &z)| z > tau)
        .map(|(&j, _)| BlockIndex::Main(j))
        .chain(
            relaxed
                .z_int
                .iter()
                .filter(|(_, &z)| z > tau)
                .map(|(&(j, k), _)| BlockIndex::Interaction(j, k)),
        )
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolishOptions {
    /// Residual norm of the normal equations relative to their right-hand
    /// side at which the solve stops.
    pub tol: f64,
    pub max_iter: usize,
    pub ridge_jitter: f64,
}

impl Default for PolishOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
            ridge_jitter: 1e-8,
        }
    }
}

/// Outcome of a polishing run.
#[derive(Debug, Clone, PartialEq)]
pub struct Polished {
    pub fit: BlockFit,
    /// Blocks kept in the support whose polished norm is below 1e-10.
    pub negligible: Vec<BlockIndex>,
}

/// Minimizes the smooth objective jointly over the blocks of `support`,
/// starting from `warm` where given.
///
/// The normal equations are solved jointly by preconditioned conjugate
/// gradients rather than by cyclic block updates, which crawl along the
/// directions that main effects share with their interactions.
pub fn polish(
    support: &BTreeSet<BlockIndex>,
    source: &dyn BlockSource,
    y_centered: ArrayView1<f64>,
    lambda1: f64,
    warm: Option<&BTreeMap<BlockIndex, Array1<f64>>>,
    options: &PolishOptions,
    cache: &FactorCache,
) -> Result<Polished> {
    let params = PenaltyParams::new(lambda1, 0.0, 1.0)?;
    let n = y_centered.len() as f64;
    let designs: Vec<(BlockIndex, Arc<dyn BlockDesign>)> = support
        .iter()
        .map(|&b| Ok((b, source.design(b)?)))
        .collect::<Result<_>>()?;
    let start: Vec<Array1<f64>> = designs
        .iter()
        .map(|(b, d)| {
            warm.and_then(|w| w.get(b).cloned())
                .filter(|c| c.len() == d.dim())
                .unwrap_or_else(|| Array1::zeros(d.dim()))
        })
        .collect();
    let smooth = |v: &[Array1<f64>]| {
        let mut r = y_centered.to_owned();
        for ((_, d), vb) in designs.iter().zip(v) {
            d.mul_add(vb.view(), -1.0, &mut r);
        }
        r.dot(&r) / n
            + lambda1
                * designs
                    .iter()
                    .zip(v)
                    .map(|((_, d), vb)| quad_form(d.penalty(), vb.view()))
                    .sum::<f64>()
    };
    let mut trace = vec![smooth(&start)];
    let solved = joint_ridge(
        &designs,
        y_centered,
        start,
        lambda1,
        options.ridge_jitter,
        options.tol,
        options.max_iter,
        cache,
    )?;
    let (x, converged, cycles) = (solved.coefs, solved.converged, solved.iterations);
    let objective = smooth(&x);
    trace.push(objective);

    let mut negligible = Vec::new();
    let mut coefficients = BTreeMap::new();
    for ((b, _), c) in designs.iter().zip(x) {
        if c.dot(&c).sqrt() < 1e-10 {
            negligible.push(*b);
        }
        if c.iter().any(|&v| v != 0.0) {
            coefficients.insert(*b, c);
        }
    }
    Ok(Polished {
        fit: BlockFit {
            active_set: support.clone(),
            coefficients,
            params,
            objective,
            objective_trace: trace,
            converged,
            cycles,
        },
        negligible,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyOptions {
    pub tau_values: Vec<f64>,
    /// At most this many λ2 values from the path grid are relaxed.
    pub max_lambda2_values: usize,
    pub relaxation: RelaxationOptions,
    pub polish: PolishOptions,
}

impl Default for HierarchyOptions {
    fn default() -> Self {
        Self {
            tau_values: (1..=9).map(|i| i as f64 / 10.0).collect(),
            max_lambda2_values: 10,
            relaxation: RelaxationOptions::default(),
            polish: PolishOptions::default(),
        }
    }
}

impl HierarchyOptions {
    pub fn validate(&self) -> Result<()> {
        if self.tau_values.is_empty() || self.tau_values.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::InvalidArgument("tau values must lie in (0, 1]".into()));
        }
        if self.max_lambda2_values == 0 {
            return Err(Error::InvalidArgument("max_lambda2_values must be >= 1".into()));
        }
        Ok(())
    }
}

/// Best polished model for one τ.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyRow {
    pub tau: f64,
    pub lambda2: f64,
    pub n_main: usize,
    pub n_interaction: usize,
    pub n_effective_covariates: usize,
    pub val_rmse: f64,
    pub val_mae: f64,
    pub fit: BlockFit,
}

#[derive(Debug, Clone)]
pub struct HierarchyPath {
    pub lambda1: f64,
    pub big_m: f64,
    pub mains: BTreeSet<usize>,
    pub pairs: BTreeSet<(usize, usize)>,
    pub lambda2_values: Vec<f64>,
    pub rows: Vec<HierarchyRow>,
    /// Index into `rows` of the validation-selected model.
    pub best: usize,
}

impl HierarchyPath {
    pub fn best_row(&self) -> &HierarchyRow {
        &self.rows[self.best]
    }
}

/// Evenly thinned subsequence keeping the first and last entries.
fn thin(values: &[f64], count: usize) -> Vec<f64> {
    if values.len() <= count {
        return values.to_vec();
    }
    if count == 1 {
        return vec![values[0]];
    }
    (0..count)
        .map(|i| values[(i * (values.len() - 1) + (count - 1) / 2) / (count - 1)])
        .collect()
}

fn better(a: (f64, usize, f64), b: (f64, usize, f64)) -> bool {
    // (score, support size, tie value where larger wins)
    let eq = (a.0 - b.0).abs() <= 1e-12 * a.0.abs().max(b.0.abs());
    if eq {
        a.1 < b.1 || (a.1 == b.1 && a.2 > b.2)
    } else {
        a.0 < b.0
    }
}

/// Relax-round-polish at the λ1 of row `l`: the relaxation is solved on
/// the hierarchy-closed union of all path supports for a thinned set of
/// the grid's λ2 values (warm-started down the sequence); each τ keeps the
/// λ2 whose polished model scores best on validation.
#[allow(clippy::too_many_arguments)]
pub fn fit_hierarchy_path(
    grid: &PathGrid,
    l: usize,
    source: &dyn BlockSource,
    y_centered: ArrayView1<f64>,
    options: &HierarchyOptions,
    criterion: Criterion,
    scorer: &Scorer<'_>,
    cache: &FactorCache,
) -> Result<HierarchyPath> {
    options.validate()?;
    let lambda1 = *grid
        .lambda1_values
        .get(l)
        .ok_or_else(|| Error::InvalidArgument(format!("row {l} outside the grid")))?;
    let (mains, pairs) = collect_support_union(grid.fitted().map(|(_, f, _)| f));
    let all: BTreeSet<BlockIndex> = mains
        .iter()
        .map(|&j| BlockIndex::Main(j))
        .chain(pairs.iter().map(|&(j, k)| BlockIndex::Interaction(j, k)))
        .collect();
    let reference = polish(&all, source, y_centered, lambda1, None, &options.polish, cache)?;
    let big_m = choose_big_m(&reference.fit.coefficients);
    let lambda2_values = thin(&grid.lambda2_values, options.max_lambda2_values);

    let mut memo: HashMap<Vec<BlockIndex>, (BlockFit, f64, f64)> = HashMap::new();
    let mut best_per_tau: Vec<Option<HierarchyRow>> = vec![None; options.tau_values.len()];
    let mut warm: Option<RelaxationSolution> = None;
    for &lambda2 in &lambda2_values {
        let params = PenaltyParams::new(lambda1, lambda2, grid.alpha)?;
        let problem = RestrictedProblem::new(mains.clone(), pairs.clone(), big_m, params)?;
        let relaxed = solve_relaxation(&problem, source, y_centered, &options.relaxation, warm.as_ref())?;
        for (t, &tau) in options.tau_values.iter().enumerate() {
            let support = round_solution(&relaxed, tau);
            let key: Vec<BlockIndex> = support.iter().copied().collect();
            if !memo.contains_key(&key) {
                let scored = polish(&support, source, y_centered, lambda1, Some(&relaxed.coefficients), &options.polish, cache)
                    .and_then(|p| scorer(&p.fit).map(|(rmse, mae)| (p.fit, rmse, mae)));
                match scored {
                    Ok(v) => {
                        memo.insert(key.clone(), v);
                    }
                    Err(e) => {
                        log::warn!("polish failed at tau {tau}, lambda2 {lambda2}: {e}");
                        continue;
                    }
                }
            }
            let (fit, rmse, mae) = &memo[&key];
            let mut fit = fit.clone();
            fit.params = params;
            let row = HierarchyRow {
                tau,
                lambda2,
                n_main: support.iter().filter(|b| !b.is_interaction()).count(),
                n_interaction: support.iter().filter(|b| b.is_interaction()).count(),
                n_effective_covariates: effective_covariates(&support),
                val_rmse: *rmse,
                val_mae: *mae,
                fit,
            };
            let score = |r: &HierarchyRow| {
                let v = match criterion {
                    Criterion::Rmse => r.val_rmse,
                    Criterion::Mae => r.val_mae,
                };
                (v, r.n_main + r.n_interaction, r.lambda2)
            };
            let replace = match &best_per_tau[t] {
                None => true,
                Some(cur) => better(score(&row), score(cur)),
            };
            if replace {
                best_per_tau[t] = Some(row);
            }
        }
        warm = Some(relaxed);
    }
    let rows: Vec<HierarchyRow> = best_per_tau.into_iter().flatten().collect();
    let mut best = 0;
    for i in 1..rows.len() {
        let key = |r: &HierarchyRow| {
            let v = match criterion {
                Criterion::Rmse => r.val_rmse,
                Criterion::Mae => r.val_mae,
            };
            (v, r.n_main + r.n_interaction, r.tau)
        };
        if better(key(&rows[i]), key(&rows[best])) {
            best = i;
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyGrid);
    }
    Ok(HierarchyPath {
        lambda1,
        big_m,
        mains,
        pairs,
        lambda2_values,
        rows,
        best,
    })
}
