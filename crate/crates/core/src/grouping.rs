//! Outlier counting against per-step population bands and quantile-based
//! Low/Medium/High classification of permutations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sequencing::ScoringRun;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroupingError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, GroupingError>;

/// Band half-width in standard deviations.
pub const BAND_WIDTH: f64 = 2.0;

pub const DEFAULT_Q_LOW: f64 = 0.35;
pub const DEFAULT_Q_HIGH: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub means: Vec<f64>,
    /// Population standard deviations (divisor `M`).
    pub stds: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlierProfile {
    pub permutation_id: usize,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_low: usize,
    pub tau_high: usize,
    pub q_low: f64,
    pub q_high: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DeviationGroup {
    Low,
    Medium,
    High,
}

impl DeviationGroup {
    pub const ALL: [DeviationGroup; 3] = [DeviationGroup::Low, DeviationGroup::Medium, DeviationGroup::High];

    pub fn as_str(&self) -> &'static str {
        match self {
            DeviationGroup::Low => "Low",
            DeviationGroup::Medium => "Medium",
            DeviationGroup::High => "High",
        }
    }
}

impl fmt::Display for DeviationGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeviationGroup {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "Low" | "low" => Ok(DeviationGroup::Low),
            "Medium" | "medium" => Ok(DeviationGroup::Medium),
            "High" | "high" => Ok(DeviationGroup::High),
            other => Err(format!("unknown deviation group '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub permutation_id: usize,
    pub group: DeviationGroup,
}

/// Fractions of permutations per group, plus the empirical CDF of the outlier
/// counts at each threshold. Published group probabilities can be read
/// either way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMasses {
    pub low: f64,
    pub medium: f64,
    pub high: f64,
    pub cdf_at_tau_low: f64,
    pub cdf_at_tau_high: f64,
}

pub fn step_stats(run: &ScoringRun) -> Result<StepStats> {
    let m = run.permutation_count();
    if m < 2 {
        return Err(GroupingError::InvalidInput(format!("need at least 2 trajectories, got {m}")));
    }
    let steps = run.step_count();
    if run.trajectories.iter().any(|t| t.values.len() != steps) {
        return Err(GroupingError::ShapeMismatch("trajectories differ in length".into()));
    }
    let mut means = Vec::with_capacity(steps);
    let mut stds = Vec::with_capacity(steps);
    for t in 0..steps {
        let column = run.trajectories.iter().map(|tr| tr.values[t]);
        let first = run.trajectories[0].values[t];
        if column.clone().all(|v| v == first) {
            means.push(first);
            stds.push(0.0);
            continue;
        }
        let mean = column.clone().sum::<f64>() / m as f64;
        let var = column.map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        means.push(mean);
        stds.push(var.sqrt());
    }
    Ok(StepStats { means, stds })
}

/// Steps at which each trajectory leaves the closed band `mean +- 2 sd`.
pub fn outlier_counts(run: &ScoringRun, stats: &StepStats) -> Result<Vec<OutlierProfile>> {
    let steps = stats.means.len();
    if stats.stds.len() != steps {
        return Err(GroupingError::ShapeMismatch("means and stds differ in length".into()));
    }
    run.trajectories
        .iter()
        .map(|tr| {
            if tr.values.len() != steps {
                return Err(GroupingError::ShapeMismatch(format!(
                    "trajectory {} has {} steps, stats have {steps}",
                    tr.permutation_id,
                    tr.values.len()
                )));
            }
            let count = tr
                .values
                .iter()
                .zip(stats.means.iter().zip(&stats.stds))
                .filter(|(&d, (&mean, &sd))| d < mean - BAND_WIDTH * sd || d > mean + BAND_WIDTH * sd)
                .count();
            Ok(OutlierProfile { permutation_id: tr.permutation_id, count })
        })
        .collect()
}

fn empirical_cdf(sorted: &[usize], c: usize) -> f64 {
    sorted.partition_point(|&x| x <= c) as f64 / sorted.len() as f64
}

/// Smallest count whose empirical CDF reaches each quantile level.
pub fn thresholds_from_quantiles(counts: &[OutlierProfile], q_low: f64, q_high: f64) -> Result<Thresholds> {
    if !(0.0 < q_low && q_low < q_high && q_high < 1.0) {
        return Err(GroupingError::InvalidInput(format!(
            "quantile levels must satisfy 0 < q_low < q_high < 1, got {q_low}, {q_high}"
        )));
    }
    if counts.is_empty() {
        return Err(GroupingError::InvalidInput("no outlier counts".into()));
    }
    let mut sorted: Vec<usize> = counts.iter().map(|c| c.count).collect();
    sorted.sort_unstable();
    let quantile = |q: f64| {
        *sorted.iter().find(|&&c| empirical_cdf(&sorted, c) >= q).expect("the CDF reaches 1 at the largest count")
    };
    Ok(Thresholds { tau_low: quantile(q_low), tau_high: quantile(q_high), q_low, q_high })
}

pub fn group_of(count: usize, th: &Thresholds) -> DeviationGroup {
    if count <= th.tau_low {
        DeviationGroup::Low
    } else if count <= th.tau_high {
        DeviationGroup::Medium
    } else {
        DeviationGroup::High
    }
}

pub fn classify(counts: &[OutlierProfile], th: &Thresholds) -> Vec<GroupAssignment> {
    counts.iter().map(|c| GroupAssignment { permutation_id: c.permutation_id, group: group_of(c.count, th) }).collect()
}

pub fn group_masses(counts: &[OutlierProfile], th: &Thresholds) -> GroupMasses {
    let total = counts.len().max(1) as f64;
    let share = |g| counts.iter().filter(|c| group_of(c.count, th) == g).count() as f64 / total;
    let mut sorted: Vec<usize> = counts.iter().map(|c| c.count).collect();
    sorted.sort_unstable();
    let cdf = |c| {
        if sorted.is_empty() {
            0.0
        } else {
            empirical_cdf(&sorted, c)
        }
    };
    GroupMasses {
        low: share(DeviationGroup::Low),
        medium: share(DeviationGroup::Medium),
        high: share(DeviationGroup::High),
        cdf_at_tau_low: cdf(th.tau_low),
        cdf_at_tau_high: cdf(th.tau_high),
    }
}

/// Everything the classification step produces for one scoring run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grouping {
    pub stats: StepStats,
    pub counts: Vec<OutlierProfile>,
    pub thresholds: Thresholds,
    pub assignments: Vec<GroupAssignment>,
    pub masses: GroupMasses,
}

impl Grouping {
    pub fn members(&self, group: DeviationGroup) -> Vec<usize> {
        self.assignments.iter().filter(|a| a.group == group).map(|a| a.permutation_id).collect()
    }
}

pub fn group_run(run: &ScoringRun, q_low: f64, q_high: f64) -> Result<Grouping> {
    let stats = step_stats(run)?;
    let counts = outlier_counts(run, &stats)?;
    let thresholds = thresholds_from_quantiles(&counts, q_low, q_high)?;
    let assignments = classify(&counts, &thresholds);
    let masses = group_masses(&counts, &thresholds);
    Ok(Grouping { stats, counts, thresholds, assignments, masses })
}
