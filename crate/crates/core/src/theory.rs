//! Mean-shift bias model: half-normal bias `b ~ |N(0, k^2)|`, ID error
//! component `T = b^2`, OOD component `U = (b - delta)^2`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{domain, stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("correlation undefined: denominator argument {0} is not positive")]
    Domain(f64),

    #[error("estimation failed: {0}")]
    Estimation(String),
}

pub type Result<T> = std::result::Result<T, TheoryError>;

/// `sqrt(2 / pi)`, the mean of a unit half-normal.
pub const ALPHA: f64 = 0.797_884_560_802_865_4;

/// Smallest sample size accepted by the Monte Carlo estimators.
pub const MC_MIN_SAMPLES: usize = 10_000;

/// Limit of `rho_tu` as `k / delta -> 0`: `-alpha / sqrt(2 - 4/pi)`.
pub fn rho_lower_limit() -> f64 {
    -ALPHA / (2.0 - 4.0 / std::f64::consts::PI).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanShiftModel {
    pub mu_train: f64,
    pub mu_test: f64,
    pub sigma_train: f64,
    pub sigma_test: f64,
    pub delta: f64,
    pub k: f64,
}

impl MeanShiftModel {
    pub fn new(mu_train: f64, mu_test: f64, sigma_train: f64, sigma_test: f64, k: f64) -> Result<Self> {
        if !(k > 0.0) || !k.is_finite() {
            return Err(TheoryError::InvalidInput(format!("k must be positive, got {k}")));
        }
        if !(sigma_train >= 0.0 && sigma_test >= 0.0) {
            return Err(TheoryError::InvalidInput("noise scales must be non-negative".into()));
        }
        if !(mu_train.is_finite() && mu_test.is_finite()) {
            return Err(TheoryError::InvalidInput("means must be finite".into()));
        }
        Ok(Self { mu_train, mu_test, sigma_train, sigma_test, delta: mu_test - mu_train, k })
    }

    pub fn components(&self, b: f64) -> ErrorComponents {
        ErrorComponents::at(b, self.delta)
    }

    pub fn cov_tu(&self) -> f64 {
        cov_tu(self.k, self.delta)
    }

    pub fn rho_tu(&self) -> Result<f64> {
        rho_tu(self.k, self.delta)
    }

    pub fn negative_regime(&self) -> bool {
        negative_regime(self.k, self.delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorComponents {
    pub t_val: f64,
    pub u_val: f64,
}

impl ErrorComponents {
    pub fn at(b: f64, delta: f64) -> Self {
        Self { t_val: b * b, u_val: (b - delta) * (b - delta) }
    }
}

fn check_k(k: f64) -> Result<()> {
    if k > 0.0 && k.is_finite() {
        Ok(())
    } else {
        Err(TheoryError::InvalidInput(format!("k must be positive and finite, got {k}")))
    }
}

pub fn half_normal_sample(k: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    check_k(k)?;
    if n == 0 {
        return Err(TheoryError::InvalidInput("sample size must be at least 1".into()));
    }
    let mut rng = stream(seed, &[domain::HALF_NORMAL]);
    Ok((0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z.abs() * k
        })
        .collect())
}

/// `E[b^n]` for `n` in 1..=4.
pub fn raw_moment(n: u32, k: f64) -> Result<f64> {
    check_k(k)?;
    match n {
        1 => Ok(ALPHA * k),
        2 => Ok(k * k),
        3 => Ok(2.0 * ALPHA * k.powi(3)),
        4 => Ok(3.0 * k.powi(4)),
        _ => Err(TheoryError::InvalidInput(format!("raw moment order must be 1..=4, got {n}"))),
    }
}

pub fn cov_tu(k: f64, delta: f64) -> f64 {
    2.0 * k.powi(3) * (k - ALPHA * delta)
}

fn rho_denominator_arg(k: f64, delta: f64) -> f64 {
    k * k - 2.0 * ALPHA * delta * k + (2.0 - 4.0 / std::f64::consts::PI) * delta * delta
}

pub fn rho_tu(k: f64, delta: f64) -> Result<f64> {
    check_k(k)?;
    let arg = rho_denominator_arg(k, delta);
    if !(arg > 0.0) {
        return Err(TheoryError::Domain(arg));
    }
    Ok((k - ALPHA * delta) / arg.sqrt())
}

pub fn negative_regime(k: f64, delta: f64) -> bool {
    k < ALPHA * delta
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    /// Whether `target` lies within `z` standard errors.
    pub fn covers(&self, target: f64, z: f64) -> bool {
        (self.value - target).abs() <= z * self.std_error
    }
}

fn mean_estimate(values: impl Iterator<Item = f64> + Clone) -> Estimate {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Estimate { value: mean, std_error: (var / n).sqrt() }
}

fn check_mc_size(n: usize) -> Result<()> {
    if n < MC_MIN_SAMPLES {
        return Err(TheoryError::InvalidInput(format!("Monte Carlo needs at least {MC_MIN_SAMPLES} samples, got {n}")));
    }
    Ok(())
}

/// Monte Carlo estimate of `E[b^order]`.
pub fn mc_moment(order: u32, k: f64, n: usize, seed: u64) -> Result<Estimate> {
    check_mc_size(n)?;
    let draws = half_normal_sample(k, n, seed)?;
    Ok(mean_estimate(draws.iter().map(|b| b.powi(order as i32))))
}

/// Monte Carlo estimate of `Cov(T, U)`; the standard error comes from the
/// centred products.
pub fn mc_cov_tu(k: f64, delta: f64, n: usize, seed: u64) -> Result<Estimate> {
    check_mc_size(n)?;
    let draws = half_normal_sample(k, n, seed)?;
    let comps: Vec<ErrorComponents> = draws.iter().map(|&b| ErrorComponents::at(b, delta)).collect();
    let mean_t = comps.iter().map(|c| c.t_val).sum::<f64>() / n as f64;
    let mean_u = comps.iter().map(|c| c.u_val).sum::<f64>() / n as f64;
    let est = mean_estimate(comps.iter().map(|c| (c.t_val - mean_t) * (c.u_val - mean_u)));
    let nf = n as f64;
    Ok(Estimate { value: est.value * nf / (nf - 1.0), std_error: est.std_error })
}

pub fn mc_rho(k: f64, delta: f64, n: usize, seed: u64) -> Result<f64> {
    check_mc_size(n)?;
    let draws = half_normal_sample(k, n, seed)?;
    let t: Vec<f64> = draws.iter().map(|b| b * b).collect();
    let u: Vec<f64> = draws.iter().map(|b| (b - delta) * (b - delta)).collect();
    pearson(&t, &u).ok_or_else(|| TheoryError::Estimation("degenerate variance in Monte Carlo sample".into()))
}

/// Sample Pearson correlation; `None` if either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: f64,
    pub delta: f64,
    pub rho: f64,
    pub negative_regime: bool,
}

/// Closed-form correlation over a `(k, delta)` grid. Grid points outside the
/// domain are skipped.
pub fn sweep(ks: &[f64], deltas: &[f64]) -> Vec<SweepRow> {
    let mut rows = Vec::with_capacity(ks.len() * deltas.len());
    for &delta in deltas {
        for &k in ks {
            if let Ok(rho) = rho_tu(k, delta) {
                rows.push(SweepRow { k, delta, rho, negative_regime: negative_regime(k, delta) });
            }
        }
    }
    rows
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,delta,rho,negative_regime\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.k, r.delta, r.rho, r.negative_regime));
    }
    out
}

pub fn linspace(start: f64, end: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..count).map(|i| start + (end - start) * i as f64 / (count - 1) as f64).collect(),
    }
}
