//! End-to-end runs: score permutations, group them, train models per group,
//! compare the ADB pick against a cross-validation baseline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{make_synthetic_shifted_dataset, LabeledData, SyntheticDataset, SyntheticSpec, ID_W1_LIMIT};
use super::eval::{
    adb_select, correlation_report, improvement_pct, kfold_indices, paired_ttest, percentile_rank, sign_test_p,
    AdbSelection, CorrelationReport, MetricSet, MetricSpread, Metrics, ModelRecord, TTest,
};
use super::model::{train_with_schedule, ModelSpec, TrainConfig};
use super::{HarnessError, Result};
use crate::grouping::{group_run, DeviationGroup, Grouping, Thresholds, DEFAULT_Q_HIGH, DEFAULT_Q_LOW};
use crate::rng::{derive_seed, domain, stream};
use crate::sequencing::{generate_permutation, score_all, Permutation, ScoringMode, ScoringOptions};
use crate::transport::SinkhornConfig;

/// Smallest OOD label W1 an experiment accepts.
pub const OOD_W1_GATE: f64 = 0.6;

/// Offset separating fold-model seeds from permutation-model seeds.
const FOLD_SEED_OFFSET: u64 = 1 << 32;

/// How a model's per-epoch permutations are drawn from its group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleDraw {
    /// Without replacement when the group has at least one member per
    /// epoch, with replacement otherwise.
    #[default]
    Auto,
    With,
    Without,
}

impl std::fmt::Display for ScheduleDraw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleDraw::Auto => "auto",
            ScheduleDraw::With => "with",
            ScheduleDraw::Without => "without",
        })
    }
}

impl std::str::FromStr for ScheduleDraw {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ScheduleDraw::Auto),
            "with" => Ok(ScheduleDraw::With),
            "without" => Ok(ScheduleDraw::Without),
            other => Err(HarnessError::InvalidInput(format!("unknown schedule draw '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticSpec,
    pub model: ModelSpec,
    /// `train.batch_size` is also the scoring batch size.
    pub train: TrainConfig,
    pub mode: ScoringMode,
    pub permutations: usize,
    pub epsilon: f64,
    pub subsample_cap: Option<usize>,
    pub q_low: f64,
    pub q_high: f64,
    pub models_per_group: usize,
    pub folds: usize,
    pub adb_sample_size: usize,
    pub schedule_draw: ScheduleDraw,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            model: ModelSpec::linear(),
            train: TrainConfig::default(),
            mode: ScoringMode::Batchwise,
            permutations: 40,
            epsilon: 0.05,
            subsample_cap: Some(200),
            q_low: DEFAULT_Q_LOW,
            q_high: DEFAULT_Q_HIGH,
            models_per_group: 10,
            folds: 10,
            adb_sample_size: 10,
            schedule_draw: ScheduleDraw::Auto,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.permutations < 2 || self.models_per_group == 0 || self.adb_sample_size == 0 {
            return Err(HarnessError::InvalidInput(
                "need at least 2 permutations, 1 model per group and a positive ADB sample".into(),
            ));
        }
        Ok(())
    }

    /// The same configuration with data and experiment seeds set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.synthetic.seed = seed;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: DeviationGroup,
    pub permutations: usize,
    pub models: usize,
    pub spread: Option<MetricSpread>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    /// Error on the held-out fold.
    pub held_out: Metrics,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    /// Fold with the smallest held-out MAE.
    pub selected: usize,
    pub selected_metrics: MetricSet,
    pub across_folds: MetricSpread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub shift: f64,
    pub id_w1: f64,
    pub ood_w1: f64,
    pub thresholds: Thresholds,
    pub groups: Vec<GroupSummary>,
    pub models: Vec<ModelRecord>,
    pub cv: CvReport,
    pub adb: AdbSelection,
    pub adb_metrics: MetricSet,
    /// `100 (CV - ADB) / CV` per metric, against the selected CV model.
    pub improvement_pct: MetricSet,
    pub percentile_rank: f64,
    pub correlations: CorrelationReport,
}

impl EvalReport {
    /// MAE <= RMSE everywhere, PR within [0, 100], groups cover every model.
    pub fn is_sane(&self) -> bool {
        let metrics = self
            .models
            .iter()
            .map(|m| &m.metrics)
            .chain(self.cv.folds.iter().map(|f| &f.metrics))
            .chain([&self.adb_metrics, &self.cv.selected_metrics]);
        metrics.into_iter().all(MetricSet::is_consistent)
            && (0.0..=100.0).contains(&self.percentile_rank)
            && self.groups.iter().map(|g| g.models).sum::<usize>() == self.models.len()
    }
}

fn evaluate(network: &super::model::Network, data: &SyntheticDataset) -> MetricSet {
    MetricSet::new(
        Metrics::of(&network.predict(&data.val), &data.val.y),
        Metrics::of(&network.predict(&data.ood), &data.ood.y),
    )
}

struct ModelTask {
    model_id: usize,
    group: DeviationGroup,
    init_seed: u64,
    schedule: Vec<usize>,
}

fn model_tasks(cfg: &ExperimentConfig, grouping: &Grouping) -> Result<Vec<ModelTask>> {
    use rand::seq::{IndexedRandom, SliceRandom};
    let epochs = cfg.train.epochs;
    let mut tasks = Vec::new();
    for group in DeviationGroup::ALL {
        let members = grouping.members(group);
        if members.is_empty() {
            continue;
        }
        let without = match cfg.schedule_draw {
            ScheduleDraw::Auto => members.len() >= epochs,
            ScheduleDraw::With => false,
            ScheduleDraw::Without if members.len() >= epochs => true,
            ScheduleDraw::Without => {
                return Err(HarnessError::InvalidInput(format!(
                    "{group} group has {} permutations, fewer than the {epochs} epochs drawn without replacement",
                    members.len()
                )))
            }
        };
        for _ in 0..cfg.models_per_group {
            let model_id = tasks.len();
            let mut rng = stream(cfg.seed, &[domain::SCHEDULE, model_id as u64]);
            let schedule = if without {
                let mut pool = members.clone();
                pool.partial_shuffle(&mut rng, epochs).0.to_vec()
            } else {
                (0..epochs).map(|_| *members.choose(&mut rng).expect("nonempty")).collect()
            };
            let init_seed = derive_seed(cfg.seed, &[domain::MODEL_INIT, model_id as u64]);
            tasks.push(ModelTask { model_id, group, init_seed, schedule });
        }
    }
    Ok(tasks)
}

fn train_group_models(
    cfg: &ExperimentConfig,
    data: &SyntheticDataset,
    grouping: &Grouping,
) -> Result<Vec<ModelRecord>> {
    let n = data.train.len();
    model_tasks(cfg, grouping)?
        .into_par_iter()
        .map(|task| {
            let schedule: Vec<Permutation> =
                task.schedule.iter().map(|&id| generate_permutation(n, cfg.seed, id)).collect();
            let trained = train_with_schedule(&cfg.model, &data.train, &cfg.train, &schedule, task.init_seed)?;
            Ok(ModelRecord {
                model_id: task.model_id,
                group: task.group,
                init_seed: task.init_seed,
                schedule: task.schedule,
                metrics: evaluate(&trained.network, data),
            })
        })
        .collect()
}

/// k-fold baseline over the training and validation rows together: one model
/// per fold on the complement with fresh random shuffles every epoch. A
/// fold's ID error is its held-out error; the fold with the lowest held-out
/// MAE is selected.
pub fn kfold_cv_baseline(cfg: &ExperimentConfig, data: &SyntheticDataset) -> Result<CvReport> {
    let pool = LabeledData::new(
        ndarray::concatenate(ndarray::Axis(0), &[data.train.x.view(), data.val.x.view()])
            .expect("splits share the feature dimension"),
        data.train.y.iter().chain(&data.val.y).copied().collect(),
    )?;
    let folds = kfold_indices(pool.len(), cfg.folds, cfg.seed)?;
    let results: Vec<FoldResult> = folds
        .par_iter()
        .enumerate()
        .map(|(f, held)| {
            let mut is_held = vec![false; pool.len()];
            held.iter().for_each(|&i| is_held[i] = true);
            let rest: Vec<usize> = (0..pool.len()).filter(|&i| !is_held[i]).collect();
            let train = pool.select(&rest);
            let held_data = pool.select(held);
            let fold_seed = derive_seed(cfg.seed, &[domain::FOLDS, f as u64]);
            let schedule: Vec<Permutation> =
                (0..cfg.train.epochs).map(|e| generate_permutation(train.len(), fold_seed, e)).collect();
            let init_seed = derive_seed(cfg.seed, &[domain::MODEL_INIT, FOLD_SEED_OFFSET + f as u64]);
            let trained = train_with_schedule(&cfg.model, &train, &cfg.train, &schedule, init_seed)?;
            let held_out = Metrics::of(&trained.network.predict(&held_data), &held_data.y);
            let ood = Metrics::of(&trained.network.predict(&data.ood), &data.ood.y);
            Ok(FoldResult { fold: f, held_out, metrics: MetricSet::new(held_out, ood) })
        })
        .collect::<Result<_>>()?;
    let best = results
        .iter()
        .min_by(|a, b| a.held_out.mae.total_cmp(&b.held_out.mae).then(a.fold.cmp(&b.fold)))
        .expect("at least two folds");
    let sets: Vec<MetricSet> = results.iter().map(|r| r.metrics).collect();
    Ok(CvReport {
        selected: best.fold,
        selected_metrics: best.metrics,
        across_folds: MetricSpread::of(&sets).expect("nonempty"),
        folds: results,
    })
}

/// Runs the whole pipeline for one seed configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let data = make_synthetic_shifted_dataset(&cfg.synthetic)?;
    if data.ood_w1 < OOD_W1_GATE || data.id_w1 > ID_W1_LIMIT {
        return Err(HarnessError::ShiftGate { ood_w1: data.ood_w1, id_w1: data.id_w1 });
    }

    let opts = ScoringOptions {
        batch_size: cfg.train.batch_size,
        permutations: cfg.permutations,
        seed: cfg.seed,
        mode: cfg.mode,
        sinkhorn: SinkhornConfig::with_epsilon(cfg.epsilon),
        subsample_cap: cfg.subsample_cap,
    };
    let run = score_all(data.train.x.view(), &opts)?;
    let grouping = group_run(&run, cfg.q_low, cfg.q_high)?;

    let models = train_group_models(cfg, &data, &grouping)?;
    let cv = kfold_cv_baseline(cfg, &data)?;
    let adb = adb_select(&models, cfg.adb_sample_size, cfg.seed)?;
    let adb_metrics = models[adb.selected].metrics;
    let pool: Vec<f64> = models.iter().map(|m| m.metrics.ood_mae).collect();
    let percentile_rank = percentile_rank(adb_metrics.ood_mae, &pool)?;

    let groups = DeviationGroup::ALL
        .iter()
        .map(|&g| {
            let sets: Vec<MetricSet> = models.iter().filter(|m| m.group == g).map(|m| m.metrics).collect();
            GroupSummary {
                group: g,
                permutations: grouping.members(g).len(),
                models: sets.len(),
                spread: MetricSpread::of(&sets),
            }
        })
        .collect();

    Ok(EvalReport {
        seed: cfg.seed,
        shift: data.shift,
        id_w1: data.id_w1,
        ood_w1: data.ood_w1,
        thresholds: grouping.thresholds,
        groups,
        improvement_pct: cv.selected_metrics.map2(&adb_metrics, improvement_pct),
        correlations: correlation_report(&models),
        models,
        cv,
        adb,
        adb_metrics,
        percentile_rank,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTests {
    pub id_mae: Option<TTest>,
    pub id_rmse: Option<TTest>,
    pub ood_mae: Option<TTest>,
    pub ood_rmse: Option<TTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<EvalReport>,
    /// Runs whose Medium+High ID/OOD MAE correlation is negative.
    pub negative_correlations: usize,
    /// Runs where that correlation is defined.
    pub correlated_runs: usize,
    /// One-sided sign test against "negative half the time".
    pub sign_test_p: f64,
    pub adb: MetricSpread,
    pub cv: MetricSpread,
    /// ADB versus the selected CV model, paired by seed.
    pub ttests: PairedTests,
    pub mean_percentile_rank: f64,
}

/// Runs the experiment once per seed (sequentially; each run parallelizes
/// internally) and aggregates.
pub fn run_replicated(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<ReplicationReport> {
    if seeds.len() < 2 {
        return Err(HarnessError::InvalidInput("replication needs at least two seeds".into()));
    }
    let runs: Vec<EvalReport> = seeds.iter().map(|&s| run_experiment(&cfg.with_seed(s))).collect::<Result<_>>()?;
    let correlations: Vec<f64> = runs.iter().filter_map(|r| r.correlations.medium_high.pearson).collect();
    let negative = correlations.iter().filter(|&&c| c < 0.0).count();
    let adb: Vec<MetricSet> = runs.iter().map(|r| r.adb_metrics).collect();
    let cv: Vec<MetricSet> = runs.iter().map(|r| r.cv.selected_metrics).collect();
    let test = |f: fn(&MetricSet) -> f64| {
        let a: Vec<f64> = adb.iter().map(f).collect();
        let b: Vec<f64> = cv.iter().map(f).collect();
        paired_ttest(&a, &b).ok()
    };
    Ok(ReplicationReport {
        seeds: seeds.to_vec(),
        negative_correlations: negative,
        correlated_runs: correlations.len(),
        sign_test_p: sign_test_p(negative, correlations.len()),
        adb: MetricSpread::of(&adb).expect("nonempty"),
        cv: MetricSpread::of(&cv).expect("nonempty"),
        ttests: PairedTests {
            id_mae: test(|m| m.id_mae),
            id_rmse: test(|m| m.id_rmse),
            ood_mae: test(|m| m.ood_mae),
            ood_rmse: test(|m| m.ood_rmse),
        },
        mean_percentile_rank: runs.iter().map(|r| r.percentile_rank).sum::<f64>() / runs.len() as f64,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            synthetic: SyntheticSpec { n_train: 400, n_val: 100, n_ood: 200, ..Default::default() },
            train: TrainConfig { epochs: 3, batch_size: 50, ..Default::default() },
            permutations: 16,
            subsample_cap: Some(100),
            models_per_group: 3,
            folds: 3,
            adb_sample_size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn small_run_is_sane_and_deterministic() {
        let cfg = small();
        let a = run_experiment(&cfg).unwrap();
        assert!(a.is_sane());
        assert_eq!(a.cv.folds.len(), 3);
        let selected = &a.models[a.adb.selected];
        assert_ne!(selected.group, DeviationGroup::Low);
        assert!(a.adb.sampled.contains(&a.adb.selected));
        let drawn_max = a.adb.sampled.iter().map(|&i| a.models[i].metrics.id_mae).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(selected.metrics.id_mae, drawn_max);
        assert!(a.models.iter().all(|m| m.schedule.len() == cfg.train.epochs));
        assert_eq!(a, run_experiment(&cfg).unwrap());
    }

    fn grouping_of(permutations: usize) -> Grouping {
        let latents = ndarray::Array2::from_shape_fn((60, 2), |(i, j)| ((i * 7 + j * 13) % 17) as f64);
        let opts = ScoringOptions {
            batch_size: 10,
            permutations,
            seed: 5,
            mode: ScoringMode::Batchwise,
            sinkhorn: SinkhornConfig::default(),
            subsample_cap: None,
        };
        group_run(&score_all(latents.view(), &opts).unwrap(), DEFAULT_Q_LOW, DEFAULT_Q_HIGH).unwrap()
    }

    #[test]
    fn schedules_follow_the_draw_policy() {
        let grouping = grouping_of(24);
        let sizes: Vec<usize> = DeviationGroup::ALL.iter().map(|&g| grouping.members(g).len()).collect();
        let smallest = *sizes.iter().filter(|&&s| s > 0).min().unwrap();
        let largest = *sizes.iter().max().unwrap();
        assert!(smallest < largest, "need groups of different sizes: {sizes:?}");

        let mut cfg = small();
        cfg.train.epochs = smallest + 1;
        for draw in [ScheduleDraw::Auto, ScheduleDraw::With] {
            cfg.schedule_draw = draw;
            let tasks = model_tasks(&cfg, &grouping).unwrap();
            for t in &tasks {
                let members = grouping.members(t.group);
                assert_eq!(t.schedule.len(), cfg.train.epochs);
                assert!(t.schedule.iter().all(|id| members.contains(id)));
                if draw == ScheduleDraw::Auto && members.len() >= cfg.train.epochs {
                    let mut unique = t.schedule.clone();
                    unique.sort_unstable();
                    unique.dedup();
                    assert_eq!(unique.len(), t.schedule.len());
                }
            }
        }
        cfg.schedule_draw = ScheduleDraw::Without;
        assert!(matches!(model_tasks(&cfg, &grouping), Err(HarnessError::InvalidInput(_))));
        cfg.train.epochs = smallest;
        assert!(model_tasks(&cfg, &grouping).is_ok());
    }

    #[test]
    fn schedule_draw_parses() {
        for d in [ScheduleDraw::Auto, ScheduleDraw::With, ScheduleDraw::Without] {
            assert_eq!(d.to_string().parse::<ScheduleDraw>().unwrap(), d);
        }
        assert!("sometimes".parse::<ScheduleDraw>().is_err());
    }

    #[test]
    fn cv_selects_lowest_held_out_error() {
        let cfg = small();
        let data = make_synthetic_shifted_dataset(&cfg.synthetic).unwrap();
        let cv = kfold_cv_baseline(&cfg, &data).unwrap();
        let min = cv.folds.iter().map(|f| f.held_out.mae).fold(f64::INFINITY, f64::min);
        assert_eq!(cv.folds[cv.selected].held_out.mae, min);
        assert_eq!(cv.selected_metrics, cv.folds[cv.selected].metrics);
    }

    #[test]
    fn shift_gate_rejects_small_shift() {
        let mut cfg = small();
        cfg.synthetic.label_shift = 0.3;
        assert!(matches!(run_experiment(&cfg), Err(HarnessError::ShiftGate { .. })));
    }

    #[test]
    fn replication_aggregates() {
        let report = run_replicated(&small(), &[1, 2]).unwrap();
        assert_eq!(report.runs.len(), 2);
        assert_eq!(report.runs[1].seed, 2);
        assert!(report.negative_correlations <= report.correlated_runs);
        assert!((0.0..=1.0).contains(&report.sign_test_p));
    }
}
