//! Synthetic regression data with a calibrated label-space shift.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{HarnessError, Result};
use crate::rng::{domain, stream};

/// Largest OOD mean offset along the label direction, in feature units.
const MAX_MEAN_SHIFT: f64 = 0.5;
/// Feature scale of the OOD population at full shift.
const MIN_SPREAD: f64 = 0.1;
const CALIBRATION_STEPS: usize = 60;
/// Accepted relative miss of the calibrated label W1.
pub const CALIBRATION_TOLERANCE: f64 = 0.1;
/// Label W1 treated as "no shift".
pub const ID_W1_LIMIT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub x: Array2<f64>,
    pub y: Vec<f64>,
}

impl LabeledData {
    pub fn new(x: Array2<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(HarnessError::InvalidInput(format!("{} feature rows but {} labels", x.nrows(), y.len())));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> LabeledData {
        LabeledData { x: self.x.select(Axis(0), rows), y: rows.iter().map(|&i| self.y[i]).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_ood: usize,
    pub d: usize,
    /// Target W1 between standardized train and OOD labels.
    pub label_shift: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n_train: 2000, n_val: 200, n_ood: 1000, d: 8, label_shift: 0.77, noise_sd: 0.1, seed: 0 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 2 || self.n_val == 0 || self.n_ood < 2 || self.d == 0 {
            return Err(HarnessError::InvalidInput(format!("degenerate split sizes or dimension in {self:?}")));
        }
        if self.n_val >= self.n_train {
            return Err(HarnessError::InvalidInput("validation split must be smaller than the training split".into()));
        }
        if !(self.label_shift >= 0.0 && self.label_shift.is_finite()) || !(self.noise_sd >= 0.0) {
            return Err(HarnessError::InvalidInput("label_shift and noise_sd must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: LabeledData,
    pub val: LabeledData,
    pub ood: LabeledData,
    pub weights: Vec<f64>,
    /// Calibrated shift strength in `[0, 1]`.
    pub shift: f64,
    pub id_w1: f64,
    pub ood_w1: f64,
}

/// Exact 1-D Wasserstein-1 distance between two empirical distributions.
pub fn w1_labels(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(HarnessError::InvalidInput("W1 needs two nonempty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    // Integrate |F_a^{-1}(u) - F_b^{-1}(u)| over the merged quantile breakpoints.
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        let next_a = (i + 1) as f64 / na as f64;
        let next_b = (j + 1) as f64 / nb as f64;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(total)
}

fn standard_normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Population mean and standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Column z-scores using the given per-column statistics; zero-variance
/// columns become zero.
pub fn standardize_with(x: &mut Array2<f64>, stats: &[(f64, f64)]) {
    for (mut col, &(mean, sd)) in x.axis_iter_mut(Axis(1)).zip(stats) {
        col.mapv_inplace(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 });
    }
}

pub fn column_stats(x: ArrayView2<'_, f64>) -> Vec<(f64, f64)> {
    x.axis_iter(Axis(1)).map(|col| mean_sd(&col.to_vec())).collect()
}

/// Picks `k` rows with label quantiles spread evenly over the pool: one row
/// drawn from each of `k` consecutive label strata.
fn stratified_rows(labels: &[f64], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| labels[i].total_cmp(&labels[j]).then(i.cmp(&j)));
    (0..k)
        .map(|s| {
            let lo = s * n / k;
            let hi = ((s + 1) * n / k).max(lo + 1);
            order[rng.random_range(lo..hi)]
        })
        .collect()
}

/// Replaces the component of each row along the unit vector `direction`
/// with stratified standard-normal quantiles, one per stratum, in random row
/// order. The other components keep their i.i.d. draws.
fn stratified_along(mut z: Array2<f64>, direction: &[f64], rng: &mut impl Rng) -> Array2<f64> {
    let n = z.nrows();
    let normal = Normal::standard();
    let mut strata: Vec<usize> = (0..n).collect();
    strata.shuffle(rng);
    for (mut row, &s) in z.axis_iter_mut(Axis(0)).zip(&strata) {
        let along: f64 = row.iter().zip(direction).map(|(a, w)| a * w).sum();
        let u = (s as f64 + rng.random::<f64>()) / n as f64;
        let q = normal.inverse_cdf(u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON));
        row.iter_mut().zip(direction).for_each(|(a, w)| *a += (q - along) * w);
    }
    z
}

struct OodDraw {
    z: Array2<f64>,
    noise: Vec<f64>,
}

impl OodDraw {
    fn features(&self, weights: &[f64], shift: f64) -> Array2<f64> {
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        let spread = 1.0 - shift * (1.0 - MIN_SPREAD);
        let mut x = self.z.mapv(|v| v * spread);
        for mut row in x.axis_iter_mut(Axis(0)) {
            for (v, w) in row.iter_mut().zip(weights) {
                *v += shift * MAX_MEAN_SHIFT * w / norm;
            }
        }
        x
    }
}

fn labels(x: ArrayView2<'_, f64>, weights: &[f64], noise: &[f64], noise_sd: f64) -> Vec<f64> {
    x.axis_iter(Axis(0))
        .zip(noise)
        .map(|(row, e)| row.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>() + noise_sd * e)
        .collect()
}

/// Train, validation and OOD splits for `y = w.x + noise`.
///
/// OOD rows are drawn with stratified label-direction quantiles, then moved
/// along `w` and compressed; the strength is found by
/// bisection so that the standardized label W1 between train and OOD hits
/// `label_shift`. Labels are standardized with the training statistics;
/// train and OOD features are standardized separately, validation features
/// with the training statistics. Validation rows are drawn by label strata
/// so their label distribution tracks the training one.
pub fn make_synthetic_shifted_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let (n_pool, d) = (spec.n_train + spec.n_val, spec.d);

    let mut rng = stream(spec.seed, &[domain::DATASET, 0]);
    let mut weights: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    weights.iter_mut().for_each(|w| *w /= norm);

    let mut rng = stream(spec.seed, &[domain::DATASET, 1]);
    let pool_x = standard_normal_matrix(&mut rng, n_pool, d);
    let pool_noise: Vec<f64> = (0..n_pool).map(|_| rng.sample(StandardNormal)).collect();
    let pool_y = labels(pool_x.view(), &weights, &pool_noise, spec.noise_sd);

    let mut rng = stream(spec.seed, &[domain::DATASET, 2]);
    let mut val_rows = stratified_rows(&pool_y, spec.n_val, &mut rng);
    val_rows.sort_unstable();
    let mut is_val = vec![false; n_pool];
    val_rows.iter().for_each(|&i| is_val[i] = true);
    let mut train_rows: Vec<usize> = (0..n_pool).filter(|&i| !is_val[i]).collect();
    // Keep training row order independent of which rows the strata picked.
    train_rows.shuffle(&mut rng);

    let mut rng = stream(spec.seed, &[domain::DATASET, 3]);
    let ood = OodDraw {
        z: stratified_along(standard_normal_matrix(&mut rng, spec.n_ood, d), &weights, &mut rng),
        noise: (0..spec.n_ood).map(|_| rng.sample(StandardNormal)).collect(),
    };

    let train_y: Vec<f64> = train_rows.iter().map(|&i| pool_y[i]).collect();
    let (y_mean, y_sd) = mean_sd(&train_y);
    let standardize = |y: &[f64]| y.iter().map(|v| (v - y_mean) / y_sd).collect::<Vec<f64>>();
    let train_y = standardize(&train_y);
    let val_y = standardize(&val_rows.iter().map(|&i| pool_y[i]).collect::<Vec<_>>());
    let ood_y_at = |shift: f64| {
        let x = ood.features(&weights, shift);
        let y = standardize(&labels(x.view(), &weights, &ood.noise, spec.noise_sd));
        (x, y)
    };
    let w1_at = |shift: f64| w1_labels(&train_y, &ood_y_at(shift).1);

    let target = spec.label_shift;
    let floor = w1_at(0.0)?;
    let shift = if target <= floor {
        0.0
    } else {
        let ceiling = w1_at(1.0)?;
        if target > ceiling * (1.0 + CALIBRATION_TOLERANCE) {
            return Err(HarnessError::Calibration(format!(
                "label shift {target} exceeds the largest reachable W1 {ceiling:.4}"
            )));
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..CALIBRATION_STEPS {
            let mid = 0.5 * (lo + hi);
            if w1_at(mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let (ood_x, ood_y) = ood_y_at(shift);
    let ood_w1 = w1_labels(&train_y, &ood_y)?;
    let tolerance = (CALIBRATION_TOLERANCE * target).max(if target < ID_W1_LIMIT { ID_W1_LIMIT } else { 0.0 });
    if (ood_w1 - target).abs() > tolerance {
        return Err(HarnessError::Calibration(format!(
            "calibrated label W1 {ood_w1:.4} misses the target {target} by more than {tolerance:.4}"
        )));
    }
    let id_w1 = w1_labels(&train_y, &val_y)?;

    let mut train_x = pool_x.select(Axis(0), &train_rows);
    let mut val_x = pool_x.select(Axis(0), &val_rows);
    let mut ood_x = ood_x;
    let train_stats = column_stats(train_x.view());
    standardize_with(&mut train_x, &train_stats);
    standardize_with(&mut val_x, &train_stats);
    let ood_stats = column_stats(ood_x.view());
    standardize_with(&mut ood_x, &ood_stats);

    Ok(SyntheticDataset {
        train: LabeledData::new(train_x, train_y)?,
        val: LabeledData::new(val_x, val_y)?,
        ood: LabeledData::new(ood_x, ood_y)?,
        weights,
        shift,
        id_w1,
        ood_w1,
    })
}
