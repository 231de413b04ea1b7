//! Entropic and exact optimal transport between weighted point clouds.
//!
//! Ground cost is always the L1 distance between latent vectors. The
//! Sinkhorn solver returns the *sharp* cost `<C, P*>` of the entropic plan,
//! and [`debiased_distance`] removes the entropic self-bias with the two
//! self-transport terms.

mod exact;
mod sinkhorn;

pub use exact::{exact_ot_oracle, EXACT_ORACLE_MAX_CELLS};
pub use sinkhorn::{sinkhorn, sinkhorn_cost, SinkhornConfig, SinkhornSolution};

use std::cmp::Ordering;

use ndarray::ArrayView2;
use thiserror::Error;

/// Tolerance on the total mass of a cloud's weights.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid sinkhorn configuration: {0}")]
    InvalidConfig(String),

    #[error("sinkhorn did not converge after {iterations} iterations (marginal residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("kernel underflow at epsilon {0}; use log-domain updates")]
    KernelUnderflow(f64),

    #[error("exact oracle limited to {max} cells, instance has {cells}")]
    InstanceTooLarge { cells: usize, max: usize },
}

pub type Result<T> = std::result::Result<T, TransportError>;

/// Weighted empirical distribution over `d`-dimensional latent vectors.
///
/// Points are stored row-major in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl PointCloud {
    /// Uniform weights `1/n` over the given row-major points.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(TransportError::InvalidCloud("dimension must be at least 1".into()));
        }
        if points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(TransportError::InvalidCloud(format!(
                "{} coordinates do not form a nonempty set of {dim}-dimensional points",
                points.len()
            )));
        }
        let n = points.len() / dim;
        Self::weighted(dim, points, vec![1.0 / n as f64; n])
    }

    pub fn weighted(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(TransportError::InvalidCloud("dimension must be at least 1".into()));
        }
        if weights.is_empty() || points.len() != weights.len() * dim {
            return Err(TransportError::InvalidCloud(format!(
                "{} coordinates and {} weights are inconsistent with dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(TransportError::NonFinite("point coordinates"));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(TransportError::NonFinite("weights"));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(TransportError::InvalidCloud("negative weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(TransportError::InvalidCloud(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { dim, points, weights })
    }

    /// Builds a cloud from a slice of rows, all of the same length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| TransportError::InvalidCloud("no points".into()))?;
        let dim = first.as_ref().len();
        let mut points = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(TransportError::DimensionMismatch(dim, row.len()));
            }
            points.extend_from_slice(row);
        }
        Self::uniform(dim, points)
    }

    /// Uniform cloud over the given rows of a latent matrix.
    ///
    /// Indices are sorted first: an empirical measure is a multiset, and a
    /// canonical point order makes equal measures produce bit-identical
    /// transport results.
    pub fn from_rows_of(latents: ArrayView2<'_, f64>, indices: &[usize]) -> Result<Self> {
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        let dim = latents.ncols();
        let mut points = Vec::with_capacity(sorted.len() * dim);
        for &i in &sorted {
            if i >= latents.nrows() {
                return Err(TransportError::InvalidCloud(format!(
                    "row index {i} out of range for {} rows",
                    latents.nrows()
                )));
            }
            points.extend(latents.row(i).iter().copied());
        }
        Self::uniform(dim, points)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Multiplies every coordinate by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { dim: self.dim, points: self.points.iter().map(|x| x * factor).collect(), weights: self.weights.clone() }
    }

    /// Total order on clouds by size, then coordinate and weight bits.
    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.len().cmp(&other.len()).then(self.dim.cmp(&other.dim)).then_with(|| {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            bits(&self.points).cmp(&bits(&other.points)).then_with(|| bits(&self.weights).cmp(&bits(&other.weights)))
        })
    }
}

/// Dense `rows x cols` matrix of pairwise L1 distances.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().copied().fold(0.0, f64::max)
    }

    pub fn transposed(&self) -> CostMatrix {
        let mut entries = vec![0.0; self.entries.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                entries[j * self.rows + i] = self.entries[i * self.cols + j];
            }
        }
        CostMatrix { rows: self.cols, cols: self.rows, entries }
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }
}

pub fn cost_matrix(a: &PointCloud, b: &PointCloud) -> Result<CostMatrix> {
    if a.dim != b.dim {
        return Err(TransportError::DimensionMismatch(a.dim, b.dim));
    }
    let (rows, cols) = (a.len(), b.len());
    let mut entries = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let p = a.point(i);
        for j in 0..cols {
            let q = b.point(j);
            entries.push(p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum());
        }
    }
    Ok(CostMatrix { rows, cols, entries })
}

/// Entropic transport plan together with the regularization that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    matrix: Vec<f64>,
    regularization: f64,
}

impl TransportPlan {
    pub(crate) fn new(rows: usize, cols: usize, matrix: Vec<f64>, regularization: f64) -> Self {
        debug_assert_eq!(matrix.len(), rows * cols);
        Self { rows, cols, matrix, regularization }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.cols + j]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.matrix.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.matrix.chunks(self.cols) {
            for (s, p) in sums.iter_mut().zip(row) {
                *s += p;
            }
        }
        sums
    }

    /// L-infinity violation of the row and column marginals.
    pub fn marginal_violation(&self, a: &PointCloud, b: &PointCloud) -> f64 {
        let rows = self.row_sums().iter().zip(a.weights()).map(|(s, w)| (s - w).abs()).fold(0.0, f64::max);
        let cols = self.col_sums().iter().zip(b.weights()).map(|(s, w)| (s - w).abs()).fold(0.0, f64::max);
        rows.max(cols)
    }

    /// `<C, P>` for a cost matrix of matching shape.
    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        self.matrix.iter().zip(cost.entries()).map(|(p, c)| p * c).sum()
    }
}

/// Sharp entropic cost with the argument pair put in canonical order, so that
/// `W(a, b)` and `W(b, a)` run the identical computation.
fn symmetric_cost(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig) -> Result<f64> {
    match a.canonical_cmp(b) {
        Ordering::Greater => sinkhorn_cost(b, a, cfg),
        _ => sinkhorn_cost(a, b, cfg),
    }
}

/// `2 W(a, b) - W(a, a) - W(b, b)`, all three solved with `cfg`.
pub fn debiased_distance(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig) -> Result<f64> {
    let self_b = sinkhorn_cost(b, b, cfg)?;
    debiased_distance_with_reference(a, b, self_b, cfg)
}

/// Debiased distance when `W(b, b)` has already been computed.
///
/// Scoring runs compare many subsets against one global cloud, so the global
/// self-transport term is solved once and reused.
pub fn debiased_distance_with_reference(
    a: &PointCloud,
    b: &PointCloud,
    self_b: f64,
    cfg: &SinkhornConfig,
) -> Result<f64> {
    if a.dim != b.dim {
        return Err(TransportError::DimensionMismatch(a.dim, b.dim));
    }
    if a == b {
        return Ok(0.0);
    }
    let cross = symmetric_cost(a, b, cfg)?;
    let self_a = sinkhorn_cost(a, a, cfg)?;
    let value = 2.0 * cross - (self_a + self_b);
    if value < -1e-6 {
        log::warn!("debiased distance is negative: {value:e}");
    }
    Ok(value)
}
