//! Per-split standardization and PCA reduction of feature matrices.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{Result, ShellError};
use crate::harness::data::{column_stats, standardize_with};

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSplit {
    pub train: Array2<f64>,
    pub other: Array2<f64>,
    /// Columns with zero variance in at least one split (set to zero there).
    pub constant_columns: Vec<usize>,
}

/// Z-scores each split with its own column statistics.
pub fn normalize_split(train: ArrayView2<'_, f64>, other: ArrayView2<'_, f64>) -> Result<NormalizedSplit> {
    if train.nrows() == 0 || other.nrows() == 0 {
        return Err(ShellError::InvalidInput("cannot normalize an empty split".into()));
    }
    if train.ncols() != other.ncols() {
        return Err(ShellError::InvalidInput(format!("splits have {} and {} columns", train.ncols(), other.ncols())));
    }
    let (train_stats, other_stats) = (column_stats(train), column_stats(other));
    let constant_columns: Vec<usize> =
        (0..train.ncols()).filter(|&j| train_stats[j].1 == 0.0 || other_stats[j].1 == 0.0).collect();
    for &j in &constant_columns {
        log::warn!("column {j} has zero variance in a split; mapped to zero");
    }
    let mut train = train.to_owned();
    let mut other = other.to_owned();
    standardize_with(&mut train, &train_stats);
    standardize_with(&mut other, &other_stats);
    Ok(NormalizedSplit { train, other, constant_columns })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReductionKind {
    Pca,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionModel {
    pub kind: ReductionKind,
    pub components: usize,
    pub means: Vec<f64>,
    /// `d x components`, orthonormal columns in decreasing-variance order.
    pub basis: Array2<f64>,
    /// Variance along each retained component.
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
}

impl ReductionModel {
    pub fn identity(d: usize) -> Self {
        Self {
            kind: ReductionKind::Identity,
            components: d,
            means: vec![0.0; d],
            basis: Array2::eye(d),
            explained_variance: Vec::new(),
            total_variance: 0.0,
        }
    }

    pub fn explained_ratio(&self) -> f64 {
        if self.total_variance > 0.0 {
            self.explained_variance.iter().sum::<f64>() / self.total_variance
        } else {
            1.0
        }
    }

    /// Maps reduced coordinates back to the input space.
    pub fn reconstruct(&self, z: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut x = z.dot(&self.basis.t());
        x += &Array1::from(self.means.clone());
        x
    }
}

/// PCA from the eigen-decomposition of the sample covariance of `train`.
/// Each basis vector is signed so its largest-magnitude entry is positive.
pub fn fit_reduction(train: ArrayView2<'_, f64>, components: usize) -> Result<ReductionModel> {
    let (n, d) = train.dim();
    if components == 0 || components > n.min(d) {
        return Err(ShellError::InvalidInput(format!("cannot keep {components} components of a {n} x {d} matrix")));
    }
    if n < 2 {
        return Err(ShellError::InvalidInput("PCA needs at least two rows".into()));
    }
    let means = train.mean_axis(Axis(0)).expect("nonempty").to_vec();
    let centered = &train - &Array1::from(means.clone());
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let eigen = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = Array2::zeros((d, components));
    for (c, &k) in order.iter().take(components).enumerate() {
        let v = eigen.eigenvectors.column(k);
        let pivot = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).expect("d > 0");
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            basis[[i, c]] = sign * v[i];
        }
    }
    Ok(ReductionModel {
        kind: ReductionKind::Pca,
        components,
        means,
        basis,
        explained_variance: order.iter().take(components).map(|&k| eigen.eigenvalues[k].max(0.0)).collect(),
        total_variance: (0..d).map(|i| cov[[i, i]]).sum(),
    })
}

pub fn apply_reduction(model: &ReductionModel, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.ncols() != model.means.len() {
        return Err(ShellError::InvalidInput(format!(
            "reduction fitted on {} columns, got {}",
            model.means.len(),
            x.ncols()
        )));
    }
    if model.kind == ReductionKind::Identity {
        return Ok(x.to_owned());
    }
    Ok((&x - &Array1::from(model.means.clone())).dot(&model.basis))
}
