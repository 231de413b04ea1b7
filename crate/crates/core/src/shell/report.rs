//! JSON and CSV artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, ShellError};
use crate::grouping::{DeviationGroup, Grouping};
use crate::harness::ModelRecord;
use crate::sequencing::{DeviationTrajectory, ScoringMode, ScoringRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoriesFile {
    pub seed: u64,
    pub mode: ScoringMode,
    #[serde(rename = "B")]
    pub batch_size: usize,
    #[serde(rename = "M")]
    pub permutations: usize,
    /// `values[m][t]`: deviation of permutation `m` at step `t + 1`.
    pub values: Vec<Vec<f64>>,
    pub global_digest: String,
}

impl From<&ScoringRun> for TrajectoriesFile {
    fn from(run: &ScoringRun) -> Self {
        Self {
            seed: run.seed,
            mode: run.mode,
            batch_size: run.batch_size,
            permutations: run.permutation_count(),
            values: run.trajectories.iter().map(|t| t.values.clone()).collect(),
            global_digest: run.global_digest.clone(),
        }
    }
}

impl TrajectoriesFile {
    pub fn to_run(&self) -> Result<ScoringRun> {
        if self.values.len() != self.permutations {
            return Err(ShellError::InvalidInput(format!(
                "M = {} but {} trajectories present",
                self.permutations,
                self.values.len()
            )));
        }
        let run = ScoringRun {
            seed: self.seed,
            mode: self.mode,
            batch_size: self.batch_size,
            trajectories: self
                .values
                .iter()
                .enumerate()
                .map(|(id, v)| DeviationTrajectory { permutation_id: id, mode: self.mode, values: v.clone() })
                .collect(),
            global_digest: self.global_digest.clone(),
        };
        run.validate().map_err(|e| ShellError::InvalidInput(e.to_string()))?;
        Ok(run)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdsJson {
    pub tau_low: usize,
    pub tau_high: usize,
    pub q_low: f64,
    pub q_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupsFile {
    pub thresholds: ThresholdsJson,
    pub counts: Vec<usize>,
    pub labels: Vec<DeviationGroup>,
}

impl From<&Grouping> for GroupsFile {
    fn from(g: &Grouping) -> Self {
        let t = g.thresholds;
        Self {
            thresholds: ThresholdsJson { tau_low: t.tau_low, tau_high: t.tau_high, q_low: t.q_low, q_high: t.q_high },
            counts: g.counts.iter().map(|c| c.count).collect(),
            labels: g.assignments.iter().map(|a| a.group).collect(),
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ShellError::InvalidInput(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?).map_err(|e| ShellError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| ShellError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| ShellError::Parse { line: e.line(), message: format!("{}: {e}", path.display()) })
}

pub const MODELS_CSV_HEADER: &str = "id,group,id_mae,id_rmse,ood_mae,ood_rmse";
pub const SCATTER_CSV_HEADER: &str = "id_mae,ood_mae,group";

pub fn models_csv(models: &[ModelRecord]) -> String {
    let mut out = format!("{MODELS_CSV_HEADER}\n");
    for m in models {
        let s = &m.metrics;
        writeln!(out, "{},{},{},{},{},{}", m.model_id, m.group, s.id_mae, s.id_rmse, s.ood_mae, s.ood_rmse)
            .expect("writing to a string");
    }
    out
}

/// One row per model: ID MAE, OOD MAE, group.
pub fn scatter_csv(models: &[ModelRecord]) -> String {
    let mut out = format!("{SCATTER_CSV_HEADER}\n");
    for m in models {
        writeln!(out, "{},{},{}", m.metrics.id_mae, m.metrics.ood_mae, m.group).expect("writing to a string");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRow {
    pub id: usize,
    pub group: DeviationGroup,
    pub metrics: [f64; 4],
}

pub fn parse_models_csv(text: &str) -> Result<Vec<ModelRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MODELS_CSV_HEADER => {}
        _ => return Err(ShellError::Parse { line: 1, message: "unexpected models CSV header".into() }),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let bad = |m: &str| ShellError::Parse { line: i + 1, message: m.into() };
            let cells: Vec<&str> = l.split(',').collect();
            if cells.len() != 6 {
                return Err(bad("expected 6 cells"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("non-numeric metric"));
            Ok(ModelRow {
                id: cells[0].parse().map_err(|_| bad("bad id"))?,
                group: cells[1].parse().map_err(|e: String| bad(&e))?,
                metrics: [num(cells[2])?, num(cells[3])?, num(cells[4])?, num(cells[5])?],
            })
        })
        .collect()
}

/// Step-major CSV: one row per step, one column per permutation.
pub fn trajectories_csv(file: &TrajectoriesFile) -> String {
    let mut out = String::from("step");
    for m in 0..file.values.len() {
        write!(out, ",perm_{m}").expect("writing to a string");
    }
    out.push('\n');
    let steps = file.values.first().map_or(0, Vec::len);
    for t in 0..steps {
        write!(out, "{}", t + 1).expect("writing to a string");
        for v in &file.values {
            write!(out, ",{}", v[t]).expect("writing to a string");
        }
        out.push('\n');
    }
    out
}
