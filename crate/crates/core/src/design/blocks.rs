use std::fmt;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use lru::LruCache;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splines::{interaction_penalty, difference_penalty, make_knots, SparseBasis, SplineConfig};

/// A main effect `Main(j)` or an interaction `Interaction(j, k)` with `j < k`.
///
/// The derived ordering is the canonical one: all mains by covariate, then
/// all pairs lexicographically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockIndex {
    Main(usize),
    Interaction(usize, usize),
}

impl BlockIndex {
    /// Interaction of two distinct covariates in either order.
    pub fn pair(a: usize, b: usize) -> Result<Self> {
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Ok(BlockIndex::Interaction(a, b)),
            std::cmp::Ordering::Greater => Ok(BlockIndex::Interaction(b, a)),
            std::cmp::Ordering::Equal => Err(Error::InvalidArgument(format!(
                "interaction needs two distinct covariates, got ({a}, {b})"
            ))),
        }
    }

    pub fn is_interaction(&self) -> bool {
        matches!(self, BlockIndex::Interaction(..))
    }

    pub fn covariates(&self) -> Vec<usize> {
        match *self {
            BlockIndex::Main(j) => vec![j],
            BlockIndex::Interaction(j, k) => vec![j, k],
        }
    }

    /// Position in the canonical ordering of all `p + p(p-1)/2` blocks.
    pub fn id(&self, p: usize) -> usize {
        match *self {
            BlockIndex::Main(j) => j,
            BlockIndex::Interaction(j, k) => p + j * (2 * p - j - 1) / 2 + (k - j - 1),
        }
    }

    pub fn from_id(id: usize, p: usize) -> Option<Self> {
        if id < p {
            return Some(BlockIndex::Main(id));
        }
        let mut rest = id - p;
        for j in 0..p.saturating_sub(1) {
            let row = p - j - 1;
            if rest < row {
                return Some(BlockIndex::Interaction(j, j + 1 + rest));
            }
            rest -= row;
        }
        None
    }
}

impl fmt::Display for BlockIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockIndex::Main(j) => write!(f, "main({j})"),
            BlockIndex::Interaction(j, k) => write!(f, "interaction({j},{k})"),
        }
    }
}

/// Column-centered design of one block as seen by the solver.
///
/// All products act on the centered matrix `B - 1 μᵀ` where `μ` holds the
/// training column means of the raw basis.
pub trait BlockDesign: Send + Sync {
    fn n_rows(&self) -> usize;
    fn dim(&self) -> usize;
    /// Centered Gram matrix `(B - 1μᵀ)ᵀ(B - 1μᵀ)`.
    fn gram(&self) -> &Array2<f64>;
    /// Smoothness penalty `S`.
    fn penalty(&self) -> &Array2<f64>;
    fn col_means(&self) -> ArrayView1<'_, f64>;
    /// `(B - 1μᵀ)ᵀ r`.
    fn transpose_mul(&self, r: ArrayView1<f64>) -> Array1<f64>;
    /// `out += scale · (B - 1μᵀ) coef`.
    fn mul_add(&self, coef: ArrayView1<f64>, scale: f64, out: &mut Array1<f64>);
    /// True when the constant vector spans a null direction of both the
    /// centered design and the penalty.
    fn constant_null(&self) -> bool {
        false
    }
    /// Dense centered design, for small problems and checks.
    fn to_dense(&self) -> Array2<f64>;
}

/// Source of block designs for the solver.
pub trait BlockSource: Send + Sync {
    fn n_obs(&self) -> usize;
    /// Every available block in canonical order.
    fn indices(&self) -> &[BlockIndex];
    fn design(&self, idx: BlockIndex) -> Result<Arc<dyn BlockDesign>>;
}

/// Explicit dense block; used as given, without centering.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    matrix: Array2<f64>,
    penalty: Array2<f64>,
    gram: Array2<f64>,
    means: Array1<f64>,
}

impl DenseBlock {
    pub fn new(matrix: Array2<f64>, penalty: Array2<f64>) -> Result<Self> {
        let k = matrix.ncols();
        if penalty.dim() != (k, k) {
            return Err(Error::Shape(format!(
                "penalty is {:?}, block has {k} columns",
                penalty.dim()
            )));
        }
        let gram = matrix.t().dot(&matrix);
        Ok(Self {
            matrix,
            penalty,
            gram,
            means: Array1::zeros(k),
        })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }
}

impl BlockDesign for DenseBlock {
    fn n_rows(&self) -> usize {
        self.matrix.nrows()
    }
    fn dim(&self) -> usize {
        self.matrix.ncols()
    }
    fn gram(&self) -> &Array2<f64> {
        &self.gram
    }
    fn penalty(&self) -> &Array2<f64> {
        &self.penalty
    }
    fn col_means(&self) -> ArrayView1<'_, f64> {
        self.means.view()
    }
    fn transpose_mul(&self, r: ArrayView1<f64>) -> Array1<f64> {
        self.matrix.t().dot(&r)
    }
    fn mul_add(&self, coef: ArrayView1<f64>, scale: f64, out: &mut Array1<f64>) {
        out.scaled_add(scale, &self.matrix.dot(&coef));
    }
    fn to_dense(&self) -> Array2<f64> {
        self.matrix.clone()
    }
}

/// A fixed collection of dense blocks.
#[derive(Debug, Clone)]
pub struct DenseBlockSet {
    n: usize,
    indices: Vec<BlockIndex>,
    blocks: Vec<Arc<DenseBlock>>,
}

impl DenseBlockSet {
    pub fn new(blocks: Vec<(BlockIndex, DenseBlock)>) -> Result<Self> {
        let mut blocks = blocks;
        blocks.sort_by_key(|(idx, _)| *idx);
        if blocks.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidArgument("duplicate block index".into()));
        }
        let n = blocks.first().map_or(0, |(_, b)| b.n_rows());
        if blocks.iter().any(|(_, b)| b.n_rows() != n) {
            return Err(Error::Shape("blocks have different row counts".into()));
        }
        Ok(Self {
            n,
            indices: blocks.iter().map(|(i, _)| *i).collect(),
            blocks: blocks.into_iter().map(|(_, b)| Arc::new(b)).collect(),
        })
    }
}

impl BlockSource for DenseBlockSet {
    fn n_obs(&self) -> usize {
        self.n
    }
    fn indices(&self) -> &[BlockIndex] {
        &self.indices
    }
    fn design(&self, idx: BlockIndex) -> Result<Arc<dyn BlockDesign>> {
        let pos = self
            .indices
            .binary_search(&idx)
            .map_err(|_| Error::NotInSupport { block: idx })?;
        Ok(self.blocks[pos].clone())
    }
}

fn sparse_gram(n_cols: usize, n_rows: usize, mut row: impl FnMut(usize, &mut Vec<(usize, f64)>)) -> (Array1<f64>, Array2<f64>) {
    let mut sums = vec![0.0; n_cols];
    let mut g = vec![0.0; n_cols * n_cols];
    let mut entries = Vec::new();
    for i in 0..n_rows {
        entries.clear();
        row(i, &mut entries);
        for &(a, va) in &entries {
            sums[a] += va;
            let base = a * n_cols;
            for &(b, vb) in &entries {
                g[base + b] += va * vb;
            }
        }
    }
    let n = n_rows as f64;
    let means = Array1::from_iter(sums.iter().map(|s| s / n));
    let mut gram = Array2::from_shape_vec((n_cols, n_cols), g).expect("square");
    for a in 0..n_cols {
        for b in 0..n_cols {
            gram[[a, b]] -= n * means[a] * means[b];
        }
    }
    // symmetrize away rounding asymmetry
    let gt = gram.t().to_owned();
    gram = (&gram + &gt) * 0.5;
    (means, gram)
}

/// Main-effect block backed by a row-compressed basis.
#[derive(Debug)]
pub struct MainBlock {
    basis: Arc<SparseBasis>,
    means: Array1<f64>,
    gram: Array2<f64>,
    penalty: Arc<Array2<f64>>,
}

impl MainBlock {
    fn new(basis: Arc<SparseBasis>, penalty: Arc<Array2<f64>>) -> Self {
        let (means, gram) = sparse_gram(basis.n_cols(), basis.n_rows(), |i, out| {
            let (s, v) = basis.row(i);
            out.extend(v.iter().enumerate().map(|(c, &x)| (s + c, x)));
        });
        Self {
            basis,
            means,
            gram,
            penalty,
        }
    }
}

impl BlockDesign for MainBlock {
    fn n_rows(&self) -> usize {
        self.basis.n_rows()
    }
    fn dim(&self) -> usize {
        self.basis.n_cols()
    }
    fn gram(&self) -> &Array2<f64> {
        &self.gram
    }
    fn penalty(&self) -> &Array2<f64> {
        &self.penalty
    }
    fn col_means(&self) -> ArrayView1<'_, f64> {
        self.means.view()
    }
    fn transpose_mul(&self, r: ArrayView1<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.dim());
        let mut total = 0.0;
        for (i, &ri) in r.iter().enumerate() {
            let (s, v) = self.basis.row(i);
            for (c, &x) in v.iter().enumerate() {
                out[s + c] += x * ri;
            }
            total += ri;
        }
        out.scaled_add(-total, &self.means);
        out
    }
    fn mul_add(&self, coef: ArrayView1<f64>, scale: f64, out: &mut Array1<f64>) {
        let shift = self.means.dot(&coef);
        for (i, o) in out.iter_mut().enumerate() {
            let (s, v) = self.basis.row(i);
            let mut acc = -shift;
            for (c, &x) in v.iter().enumerate() {
                acc += x * coef[s + c];
            }
            *o += scale * acc;
        }
    }
    fn constant_null(&self) -> bool {
        true
    }
    fn to_dense(&self) -> Array2<f64> {
        let mut d = self.basis.to_dense();
        d -= &self.means.view().insert_axis(ndarray::Axis(0));
        d
    }
}

/// Column means and centered Gram matrix of one tensor-product block.
#[derive(Debug)]
pub struct PreparedInteraction {
    means: Array1<f64>,
    gram: Array2<f64>,
}

impl PreparedInteraction {
    fn bytes(dim: usize) -> usize {
        (dim * dim + dim) * std::mem::size_of::<f64>()
    }
}

/// Tensor-product block whose rows are formed on the fly from the two
/// marginal bases; column `a·L + b` is `B_a(x_j)·C_b(x_k)`.
#[derive(Debug)]
pub struct InteractionBlock {
    left: Arc<SparseBasis>,
    right: Arc<SparseBasis>,
    prepared: Arc<PreparedInteraction>,
    penalty: Arc<Array2<f64>>,
}

#[inline]
fn tensor_row(left: &SparseBasis, right: &SparseBasis, i: usize, mut f: impl FnMut(usize, f64)) {
    let l = right.n_cols();
    let (sa, va) = left.row(i);
    let (sb, vb) = right.row(i);
    for (a, &xa) in va.iter().enumerate() {
        let base = (sa + a) * l + sb;
        for (b, &xb) in vb.iter().enumerate() {
            f(base + b, xa * xb);
        }
    }
}

fn prepare_interaction(left: &SparseBasis, right: &SparseBasis) -> PreparedInteraction {
    let (means, gram) = sparse_gram(left.n_cols() * right.n_cols(), left.n_rows(), |i, out| {
        tensor_row(left, right, i, |c, v| out.push((c, v)));
    });
    PreparedInteraction { means, gram }
}

impl BlockDesign for InteractionBlock {
    fn n_rows(&self) -> usize {
        self.left.n_rows()
    }
    fn dim(&self) -> usize {
        self.left.n_cols() * self.right.n_cols()
    }
    fn gram(&self) -> &Array2<f64> {
        &self.prepared.gram
    }
    fn penalty(&self) -> &Array2<f64> {
        &self.penalty
    }
    fn col_means(&self) -> ArrayView1<'_, f64> {
        self.prepared.means.view()
    }
    fn transpose_mul(&self, r: ArrayView1<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.dim());
        let mut total = 0.0;
        for (i, &ri) in r.iter().enumerate() {
            tensor_row(&self.left, &self.right, i, |c, v| out[c] += v * ri);
            total += ri;
        }
        out.scaled_add(-total, &self.prepared.means);
        out
    }
    fn mul_add(&self, coef: ArrayView1<f64>, scale: f64, out: &mut Array1<f64>) {
        let shift = self.prepared.means.dot(&coef);
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = -shift;
            tensor_row(&self.left, &self.right, i, |c, v| acc += v * coef[c]);
            *o += scale * acc;
        }
    }
    fn constant_null(&self) -> bool {
        true
    }
    fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.n_rows(), self.dim()));
        for i in 0..self.n_rows() {
            tensor_row(&self.left, &self.right, i, |c, v| d[[i, c]] = v);
        }
        d -= &self.prepared.means.view().insert_axis(ndarray::Axis(0));
        d
    }
}

type CacheSlot = Arc<OnceLock<Arc<PreparedInteraction>>>;

/// LRU cache of prepared interaction blocks. Readers share entries; the
/// first reader of a missing entry builds it while later readers wait.
struct InteractionCache {
    slots: Mutex<LruCache<(usize, usize), CacheSlot>>,
    builds: AtomicUsize,
}

impl InteractionCache {
    fn new(capacity: usize) -> Self {
        Self {
            slots: Mutex::new(LruCache::new(NonZeroUsize::new(capacity.max(1)).unwrap())),
            builds: AtomicUsize::new(0),
        }
    }

    fn get_or_build(
        &self,
        key: (usize, usize),
        build: impl FnOnce() -> PreparedInteraction,
    ) -> Arc<PreparedInteraction> {
        let slot = {
            let mut slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
            match slots.get(&key) {
                Some(slot) => slot.clone(),
                None => {
                    let slot: CacheSlot = Arc::new(OnceLock::new());
                    slots.put(key, slot.clone());
                    slot
                }
            }
        };
        slot.get_or_init(|| {
            self.builds.fetch_add(1, Ordering::Relaxed);
            Arc::new(build())
        })
        .clone()
    }

    fn len(&self) -> usize {
        self.slots.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    fn capacity(&self) -> usize {
        self.slots.lock().unwrap_or_else(|e| e.into_inner()).cap().get()
    }
}

/// Default memory budget for cached interaction Gram matrices.
pub const DEFAULT_CACHE_BUDGET_BYTES: usize = 1 << 30;

/// All candidate blocks built from standardized training covariates.
pub struct BlockSet {
    n: usize,
    p: usize,
    config: SplineConfig,
    feature_names: Vec<String>,
    main_knots: Vec<Vec<f64>>,
    interaction_knots: Vec<Option<Vec<f64>>>,
    mains: Vec<Arc<MainBlock>>,
    marginals: Vec<Option<Arc<SparseBasis>>>,
    pairs: Vec<(usize, usize)>,
    indices: Vec<BlockIndex>,
    interaction_penalty: Arc<Array2<f64>>,
    cache: InteractionCache,
}

impl fmt::Debug for BlockSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlockSet")
            .field("n", &self.n)
            .field("p", &self.p)
            .field("mains", &self.mains.len())
            .field("interactions", &self.pairs.len())
            .finish()
    }
}

fn named(err: Error, name: &str, block: BlockIndex) -> Error {
    match err {
        Error::DegenerateCovariate { reason, .. } => Error::DegenerateCovariate {
            name: name.to_string(),
            reason: format!("{reason} (while building {block})"),
        },
        other => other,
    }
}

/// Builds every main block and registers the requested interaction pairs
/// (all `j < k` when `pairs` is `None`). Interaction Grams are computed on
/// first access and kept in an LRU cache bounded by `cache_budget_bytes`.
pub fn build_blocks(
    x: ArrayView2<f64>,
    feature_names: &[String],
    config: &SplineConfig,
    pairs: Option<&[(usize, usize)]>,
    cache_budget_bytes: usize,
) -> Result<BlockSet> {
    config.validate()?;
    let (n, p) = x.dim();
    if feature_names.len() != p {
        return Err(Error::Shape(format!(
            "{} feature names for {p} columns",
            feature_names.len()
        )));
    }
    let mut pairs: Vec<(usize, usize)> = match pairs {
        Some(list) => list
            .iter()
            .map(|&(a, b)| match BlockIndex::pair(a, b)? {
                BlockIndex::Interaction(j, k) if k < p => Ok((j, k)),
                _ => Err(Error::InvalidArgument(format!(
                    "pair ({a}, {b}) out of range for {p} covariates"
                ))),
            })
            .collect::<Result<_>>()?,
        None => (0..p)
            .flat_map(|j| (j + 1..p).map(move |k| (j, k)))
            .collect(),
    };
    pairs.sort_unstable();
    pairs.dedup();

    let main_penalty = {
        let d = difference_penalty(config.main_dim(), 2)?;
        Arc::new(d.t().dot(&d))
    };
    let axis = difference_penalty(config.interaction_axis_dim(), 2)?;
    let interaction_penalty = Arc::new(interaction_penalty(axis.view(), axis.view()));

    let mut main_knots = Vec::with_capacity(p);
    let mut mains = Vec::with_capacity(p);
    for j in 0..p {
        let col = x.column(j);
        let knots = make_knots(col, config.n_knots_main, config.degree, config.knot_placement)
            .map_err(|e| named(e, &feature_names[j], BlockIndex::Main(j)))?;
        let basis = Arc::new(SparseBasis::evaluate(col, &knots, config.degree));
        mains.push(Arc::new(MainBlock::new(basis, main_penalty.clone())));
        main_knots.push(knots);
    }

    let mut in_pair = vec![false; p];
    for &(j, k) in &pairs {
        in_pair[j] = true;
        in_pair[k] = true;
    }
    let mut interaction_knots = vec![None; p];
    let mut marginals = vec![None; p];
    for j in (0..p).filter(|&j| in_pair[j]) {
        let col = x.column(j);
        let partner = pairs
            .iter()
            .find(|&&(a, b)| a == j || b == j)
            .map(|&(a, b)| BlockIndex::Interaction(a, b))
            .unwrap_or(BlockIndex::Main(j));
        let knots = make_knots(
            col,
            config.n_knots_interaction_per_axis,
            config.degree,
            config.knot_placement,
        )
        .map_err(|e| named(e, &feature_names[j], partner))?;
        marginals[j] = Some(Arc::new(SparseBasis::evaluate(col, &knots, config.degree)));
        interaction_knots[j] = Some(knots);
    }

    let entry = PreparedInteraction::bytes(config.interaction_axis_dim().pow(2));
    let indices = (0..p)
        .map(BlockIndex::Main)
        .chain(pairs.iter().map(|&(j, k)| BlockIndex::Interaction(j, k)))
        .collect();
    Ok(BlockSet {
        n,
        p,
        config: *config,
        feature_names: feature_names.to_vec(),
        main_knots,
        interaction_knots,
        mains,
        marginals,
        pairs,
        indices,
        interaction_penalty,
        cache: InteractionCache::new(cache_budget_bytes / entry),
    })
}

impl BlockSet {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn config(&self) -> &SplineConfig {
        &self.config
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_interactions(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn main_knots(&self, j: usize) -> &[f64] {
        &self.main_knots[j]
    }

    pub fn interaction_knots(&self, j: usize) -> Option<&[f64]> {
        self.interaction_knots[j].as_deref()
    }

    pub fn contains(&self, idx: BlockIndex) -> bool {
        match idx {
            BlockIndex::Main(j) => j < self.p,
            BlockIndex::Interaction(j, k) => self.pairs.binary_search(&(j, k)).is_ok(),
        }
    }

    /// Number of interaction blocks whose Gram matrix has been computed so far
    /// (including recomputation after eviction).
    pub fn interaction_builds(&self) -> usize {
        self.cache.builds.load(Ordering::Relaxed)
    }

    pub fn cached_interactions(&self) -> usize {
        self.cache.len()
    }

    pub fn cache_capacity(&self) -> usize {
        self.cache.capacity()
    }
}

impl BlockSource for BlockSet {
    fn n_obs(&self) -> usize {
        self.n
    }

    fn indices(&self) -> &[BlockIndex] {
        &self.indices
    }

    fn design(&self, idx: BlockIndex) -> Result<Arc<dyn BlockDesign>> {
        if !self.contains(idx) {
            return Err(Error::NotInSupport { block: idx });
        }
        match idx {
            BlockIndex::Main(j) => Ok(self.mains[j].clone()),
            BlockIndex::Interaction(j, k) => {
                let left = self.marginals[j].clone().expect("marginal for paired covariate");
                let right = self.marginals[k].clone().expect("marginal for paired covariate");
                let prepared = self
                    .cache
                    .get_or_build((j, k), || prepare_interaction(&left, &right));
                Ok(Arc::new(InteractionBlock {
                    left,
                    right,
                    prepared,
                    penalty: self.interaction_penalty.clone(),
                }))
            }
        }
    }
}
