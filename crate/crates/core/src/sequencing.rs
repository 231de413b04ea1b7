//! Training-order permutations and their deviation trajectories.
//!
//! A permutation of the `N` training rows is cut into `T = ceil(N / B)`
//! batches. At every step the cumulative prefix (or the current batch alone)
//! is compared with the global training cloud by debiased Sinkhorn distance.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::{self, domain};
use crate::transport::{debiased_distance_with_reference, sinkhorn_cost, PointCloud, SinkhornConfig, TransportError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SequencingError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("transport failed for permutation {permutation} at step {step}: {source}")]
    Transport {
        permutation: usize,
        /// 1-based step index, 0 for the global reference solve.
        step: usize,
        source: TransportError,
    },

    #[error("{} of the permutations failed; first: {}", .0.len(), .0[0])]
    Failed(Vec<SequencingError>),
}

pub type Result<T> = std::result::Result<T, SequencingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    Cumulative,
    Batchwise,
}

impl fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoringMode::Cumulative => "cumulative",
            ScoringMode::Batchwise => "batchwise",
        })
    }
}

impl FromStr for ScoringMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cumulative" => Ok(ScoringMode::Cumulative),
            "batchwise" => Ok(ScoringMode::Batchwise),
            other => Err(format!("unknown mode '{other}' (expected cumulative or batchwise)")),
        }
    }
}

/// A training order: a bijection on `0..N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    pub id: usize,
    order: Vec<usize>,
}

impl Permutation {
    pub fn new(id: usize, order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || std::mem::replace(&mut seen[i], true) {
                return Err(SequencingError::InvalidInput(format!(
                    "order of length {} is not a permutation (index {i})",
                    order.len()
                )));
            }
        }
        Ok(Self { id, order })
    }

    pub fn identity(id: usize, n: usize) -> Self {
        Self { id, order: (0..n).collect() }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Batching of `len` items into consecutive blocks of `batch_size`; the last
/// block may be short.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSchedule {
    batch_size: usize,
    len: usize,
}

impl BatchSchedule {
    pub fn new(len: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(SequencingError::InvalidInput("batch size must be positive".into()));
        }
        if len == 0 {
            return Err(SequencingError::InvalidInput("cannot batch an empty set".into()));
        }
        Ok(Self { batch_size, len })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn step_count(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    /// Positions of batch `t` (1-based) within the permutation.
    pub fn batch(&self, t: usize) -> std::ops::Range<usize> {
        let start = (t - 1) * self.batch_size;
        start..(t * self.batch_size).min(self.len)
    }

    /// Positions seen up to and including batch `t` (1-based).
    pub fn prefix(&self, t: usize) -> std::ops::Range<usize> {
        0..(t * self.batch_size).min(self.len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationTrajectory {
    pub permutation_id: usize,
    pub mode: ScoringMode,
    /// `values[t - 1]` is the deviation at step `t`.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringRun {
    pub seed: u64,
    pub mode: ScoringMode,
    pub batch_size: usize,
    pub trajectories: Vec<DeviationTrajectory>,
    pub global_digest: String,
}

impl ScoringRun {
    pub fn permutation_count(&self) -> usize {
        self.trajectories.len()
    }

    pub fn step_count(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.values.len())
    }

    /// Checks that every trajectory has the run's mode and a common length.
    pub fn validate(&self) -> Result<()> {
        let steps = self.step_count();
        for t in &self.trajectories {
            if t.mode != self.mode || t.values.len() != steps {
                return Err(SequencingError::InvalidInput(format!(
                    "trajectory {} is inconsistent with the run ({} mode, {} steps)",
                    t.permutation_id, self.mode, steps
                )));
            }
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(SequencingError::InvalidInput(format!(
                    "trajectory {} has non-finite values",
                    t.permutation_id
                )));
            }
        }
        Ok(())
    }
}

/// Permutation `id` of `0..n` under `seed`; depends on nothing else.
pub fn generate_permutation(n: usize, seed: u64, id: usize) -> Permutation {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[domain::PERMUTATION, id as u64]));
    Permutation { id, order }
}

pub fn generate_permutations(n: usize, m: usize, seed: u64) -> Result<Vec<Permutation>> {
    if n == 0 || m == 0 {
        return Err(SequencingError::InvalidInput(format!(
            "need at least one item and one permutation (N={n}, M={m})"
        )));
    }
    Ok((0..m).map(|id| generate_permutation(n, seed, id)).collect())
}

/// SHA-256 over the shape and little-endian bytes of the latent matrix.
pub fn latent_digest(latents: ArrayView2<'_, f64>) -> String {
    let mut hasher = Sha256::new();
    hasher.update((latents.nrows() as u64).to_le_bytes());
    hasher.update((latents.ncols() as u64).to_le_bytes());
    for x in latents.iter() {
        hasher.update(x.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Deterministic bottom-k subsampling: every row gets a seeded random
/// priority, and a subset larger than the cap keeps its `cap` rows of
/// smallest priority. Subsamples are therefore nested and the subsample of
/// the full set is the subsampled global cloud.
#[derive(Debug, Clone)]
struct Subsampler {
    cap: usize,
    priority: Vec<u64>,
}

impl Subsampler {
    fn new(n: usize, cap: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[domain::SUBSAMPLE]);
        Self { cap, priority: (0..n).map(|_| rng.random()).collect() }
    }

    fn apply(&self, indices: &[usize]) -> Vec<usize> {
        if indices.len() <= self.cap {
            return indices.to_vec();
        }
        let mut keyed = indices.to_vec();
        keyed.sort_unstable_by_key(|&i| (self.priority[i], i));
        keyed.truncate(self.cap);
        keyed
    }
}

/// Global cloud and its self-transport cost, shared by every step.
struct Reference<'a> {
    latents: ArrayView2<'a, f64>,
    cloud: PointCloud,
    self_cost: f64,
    subsampler: Option<Subsampler>,
    cfg: SinkhornConfig,
}

impl<'a> Reference<'a> {
    fn new(latents: ArrayView2<'a, f64>, cfg: &SinkhornConfig, subsampler: Option<Subsampler>) -> Result<Self> {
        let all: Vec<usize> = (0..latents.nrows()).collect();
        let global = subsampler.as_ref().map_or_else(|| all.clone(), |s| s.apply(&all));
        let wrap = |source| SequencingError::Transport { permutation: 0, step: 0, source };
        let cloud = PointCloud::from_rows_of(latents, &global).map_err(wrap)?;
        let self_cost = sinkhorn_cost(&cloud, &cloud, cfg).map_err(wrap)?;
        Ok(Self { latents, cloud, self_cost, subsampler, cfg: *cfg })
    }

    fn deviation(&self, rows: &[usize], permutation: usize, step: usize) -> Result<f64> {
        let rows = match &self.subsampler {
            Some(s) => s.apply(rows),
            None => rows.to_vec(),
        };
        let wrap = |source| SequencingError::Transport { permutation, step, source };
        let subset = PointCloud::from_rows_of(self.latents, &rows).map_err(wrap)?;
        debiased_distance_with_reference(&subset, &self.cloud, self.self_cost, &self.cfg).map_err(wrap)
    }

    fn trajectory(&self, perm: &Permutation, batch_size: usize, mode: ScoringMode) -> Result<DeviationTrajectory> {
        if perm.len() != self.latents.nrows() {
            return Err(SequencingError::InvalidInput(format!(
                "permutation {} has length {} but there are {} latent rows",
                perm.id,
                perm.len(),
                self.latents.nrows()
            )));
        }
        let schedule = BatchSchedule::new(perm.len(), batch_size)?;
        let values = (1..=schedule.step_count())
            .map(|t| {
                let positions = match mode {
                    ScoringMode::Cumulative => schedule.prefix(t),
                    ScoringMode::Batchwise => schedule.batch(t),
                };
                self.deviation(&perm.order[positions], perm.id, t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DeviationTrajectory { permutation_id: perm.id, mode, values })
    }
}

fn check_latents(latents: ArrayView2<'_, f64>) -> Result<()> {
    if latents.nrows() == 0 || latents.ncols() == 0 {
        return Err(SequencingError::InvalidInput("latent matrix is empty".into()));
    }
    if latents.iter().any(|x| !x.is_finite()) {
        return Err(SequencingError::InvalidInput("latent matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Deviation of every cumulative prefix from the global cloud.
pub fn cumulative_trajectory(
    perm: &Permutation,
    latents: ArrayView2<'_, f64>,
    batch_size: usize,
    cfg: &SinkhornConfig,
) -> Result<DeviationTrajectory> {
    check_latents(latents)?;
    Reference::new(latents, cfg, None)?.trajectory(perm, batch_size, ScoringMode::Cumulative)
}

/// Deviation of every individual batch from the global cloud.
pub fn batchwise_trajectory(
    perm: &Permutation,
    latents: ArrayView2<'_, f64>,
    batch_size: usize,
    cfg: &SinkhornConfig,
) -> Result<DeviationTrajectory> {
    check_latents(latents)?;
    Reference::new(latents, cfg, None)?.trajectory(perm, batch_size, ScoringMode::Batchwise)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringOptions {
    pub batch_size: usize,
    pub permutations: usize,
    pub seed: u64,
    pub mode: ScoringMode,
    pub sinkhorn: SinkhornConfig,
    /// Largest cloud handed to the solver; `None` scores against all rows.
    pub subsample_cap: Option<usize>,
}

/// Scores `permutations` seeded permutations of the latent rows.
///
/// Permutations are processed in parallel on the current rayon pool and
/// gathered in id order, so the result does not depend on the worker count.
pub fn score_all(latents: ArrayView2<'_, f64>, opts: &ScoringOptions) -> Result<ScoringRun> {
    check_latents(latents)?;
    let n = latents.nrows();
    if opts.permutations == 0 {
        return Err(SequencingError::InvalidInput("need at least one permutation".into()));
    }
    BatchSchedule::new(n, opts.batch_size)?;
    if let Some(cap) = opts.subsample_cap {
        if cap < opts.batch_size {
            return Err(SequencingError::InvalidInput(format!(
                "subsample cap {cap} is smaller than the batch size {}",
                opts.batch_size
            )));
        }
    }
    opts.sinkhorn.validate().map_err(|source| SequencingError::Transport { permutation: 0, step: 0, source })?;

    let subsampler = opts.subsample_cap.map(|cap| Subsampler::new(n, cap, opts.seed));
    let reference = Reference::new(latents, &opts.sinkhorn, subsampler)?;
    let results: Vec<Result<DeviationTrajectory>> = (0..opts.permutations)
        .into_par_iter()
        .map(|id| {
            let perm = generate_permutation(n, opts.seed, id);
            reference.trajectory(&perm, opts.batch_size, opts.mode)
        })
        .collect();

    let mut trajectories = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for result in results {
        match result {
            Ok(t) => trajectories.push(t),
            Err(e) => failures.push(e),
        }
    }
    if !failures.is_empty() {
        return Err(SequencingError::Failed(failures));
    }
    Ok(ScoringRun {
        seed: opts.seed,
        mode: opts.mode,
        batch_size: opts.batch_size,
        trajectories,
        global_digest: latent_digest(latents),
    })
}
