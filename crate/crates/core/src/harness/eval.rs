//! Error metrics, selection rules and significance tests.

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{HarnessError, Result};
use crate::grouping::DeviationGroup;
use crate::rng::{domain, stream};
use crate::theory::pearson;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
}

impl Metrics {
    pub fn of(predictions: &[f64], targets: &[f64]) -> Metrics {
        let n = targets.len() as f64;
        let (abs, sq) = predictions
            .iter()
            .zip(targets)
            .fold((0.0, 0.0), |(a, s), (p, y)| (a + (p - y).abs(), s + (p - y) * (p - y)));
        Metrics { mae: abs / n, rmse: (sq / n).sqrt() }
    }
}

/// Metric quadruple used for comparisons: ID (validation) and OOD error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub id_mae: f64,
    pub id_rmse: f64,
    pub ood_mae: f64,
    pub ood_rmse: f64,
}

impl MetricSet {
    pub fn new(id: Metrics, ood: Metrics) -> Self {
        Self { id_mae: id.mae, id_rmse: id.rmse, ood_mae: ood.mae, ood_rmse: ood.rmse }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.id_mae, self.id_rmse, self.ood_mae, self.ood_rmse]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self { id_mae: v[0], id_rmse: v[1], ood_mae: v[2], ood_rmse: v[3] }
    }

    pub fn map2(&self, other: &MetricSet, f: impl Fn(f64, f64) -> f64) -> MetricSet {
        let (a, b) = (self.as_array(), other.as_array());
        MetricSet::from_array([f(a[0], b[0]), f(a[1], b[1]), f(a[2], b[2]), f(a[3], b[3])])
    }

    /// MAE never exceeds RMSE (up to rounding).
    pub fn is_consistent(&self) -> bool {
        let ok = |mae: f64, rmse: f64| mae.is_finite() && rmse.is_finite() && mae <= rmse * (1.0 + 1e-12);
        ok(self.id_mae, self.id_rmse) && ok(self.ood_mae, self.ood_rmse)
    }
}

/// Mean and sample standard deviation of each metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSpread {
    pub mean: MetricSet,
    pub sd: MetricSet,
}

impl MetricSpread {
    pub fn of(sets: &[MetricSet]) -> Option<MetricSpread> {
        if sets.is_empty() {
            return None;
        }
        let n = sets.len() as f64;
        let mut mean = [0.0; 4];
        for s in sets {
            mean.iter_mut().zip(s.as_array()).for_each(|(m, v)| *m += v / n);
        }
        let mut sd = [0.0; 4];
        if sets.len() > 1 {
            for s in sets {
                sd.iter_mut().zip(s.as_array()).zip(mean).for_each(|((d, v), m)| *d += (v - m).powi(2));
            }
            sd.iter_mut().for_each(|d| *d = (*d / (n - 1.0)).sqrt());
        }
        Some(MetricSpread { mean: MetricSet::from_array(mean), sd: MetricSet::from_array(sd) })
    }
}

/// One trained model of the permutation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: usize,
    pub group: DeviationGroup,
    pub init_seed: u64,
    /// Scored permutations used as epoch orders, in epoch order.
    pub schedule: Vec<usize>,
    pub metrics: MetricSet,
}

/// Shuffled near-equal folds: the first `n % folds` folds get one extra row.
pub fn kfold_indices(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(HarnessError::InvalidInput(format!("need at least 2 folds, got {folds}")));
    }
    if n / folds < 1 {
        return Err(HarnessError::InvalidInput(format!("{n} rows cannot fill {folds} folds")));
    }
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut stream(seed, &[domain::FOLDS]));
    let (base, extra) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        let mut fold = rows[start..start + size].to_vec();
        fold.sort_unstable();
        out.push(fold);
        start += size;
    }
    Ok(out)
}

/// Splits `total` over groups proportionally to `sizes` by largest
/// remainder; equal remainders favour the earlier group. Never allocates
/// more than a group holds.
pub fn proportional_allocation(sizes: &[usize], total: usize) -> Vec<usize> {
    let pool: usize = sizes.iter().sum();
    if pool == 0 {
        return vec![0; sizes.len()];
    }
    let total = total.min(pool);
    let quotas: Vec<f64> = sizes.iter().map(|&s| total as f64 * s as f64 / pool as f64).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total - alloc.iter().sum::<usize>();
    for &g in order.iter().cycle().take(sizes.len() * 2) {
        if left == 0 {
            break;
        }
        if alloc[g] < sizes[g] {
            alloc[g] += 1;
            left -= 1;
        }
    }
    alloc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdbSelection {
    pub selected: usize,
    pub sampled: Vec<usize>,
    pub medium_drawn: usize,
    pub high_drawn: usize,
}

/// Draws `sample_size` Medium/High models in proportion to the group sizes
/// and returns the drawn model with the largest ID MAE (lowest id on ties).
pub fn adb_select(models: &[ModelRecord], sample_size: usize, seed: u64) -> Result<AdbSelection> {
    let members = |g: DeviationGroup| models.iter().filter(|m| m.group == g).collect::<Vec<_>>();
    let (mut medium, mut high) = (members(DeviationGroup::Medium), members(DeviationGroup::High));
    if medium.is_empty() && high.is_empty() {
        return Err(HarnessError::Selection("no Medium or High models to select from".into()));
    }
    if sample_size == 0 {
        return Err(HarnessError::Selection("sample size must be positive".into()));
    }
    medium.sort_by_key(|m| m.model_id);
    high.sort_by_key(|m| m.model_id);
    let alloc = proportional_allocation(&[medium.len(), high.len()], sample_size);
    let mut rng = stream(seed, &[domain::SELECTION]);
    let mut sampled: Vec<&ModelRecord> = Vec::with_capacity(sample_size);
    for (group, take) in [(&medium, alloc[0]), (&high, alloc[1])] {
        sampled.extend(group.choose_multiple(&mut rng, take).copied());
    }
    let best = sampled
        .iter()
        .max_by(|a, b| a.metrics.id_mae.total_cmp(&b.metrics.id_mae).then(b.model_id.cmp(&a.model_id)))
        .expect("at least one model drawn");
    let mut ids: Vec<usize> = sampled.iter().map(|m| m.model_id).collect();
    ids.sort_unstable();
    Ok(AdbSelection { selected: best.model_id, sampled: ids, medium_drawn: alloc[0], high_drawn: alloc[1] })
}

/// Share (in percent) of the pool whose OOD error is strictly worse.
pub fn percentile_rank(selected: f64, pool: &[f64]) -> Result<f64> {
    if pool.is_empty() {
        return Err(HarnessError::InvalidInput("percentile rank needs a nonempty pool".into()));
    }
    Ok(100.0 * pool.iter().filter(|&&e| e > selected).count() as f64 / pool.len() as f64)
}

pub fn improvement_pct(baseline: f64, candidate: f64) -> f64 {
    100.0 * (baseline - candidate) / baseline
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(HarnessError::InvalidInput(format!(
            "paired t-test needs two equal samples of size >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let df = diffs.len() - 1;
    if diffs.iter().all(|&d| d == 0.0) {
        return Ok(TTest { t: 0.0, p: 1.0, df });
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= f64::EPSILON * mean * mean {
        return Err(HarnessError::DegenerateVariance);
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| HarnessError::InvalidInput(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { t, p, df })
}

/// One-sided binomial test: probability of at least `successes` out of
/// `trials` under a fair coin.
pub fn sign_test_p(successes: usize, trials: usize) -> f64 {
    use statrs::distribution::{Binomial, DiscreteCDF};
    if successes == 0 {
        return 1.0;
    }
    let dist = Binomial::new(0.5, trials as u64).expect("valid binomial");
    dist.sf(successes as u64 - 1)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        order[i..=j].iter().for_each(|&k| ranks[k] = rank);
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

pub const MIN_CORRELATION_MODELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCorrelation {
    pub group: String,
    pub models: usize,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    /// Why no value was produced, if none was.
    pub flag: Option<String>,
}

fn correlate(name: &str, rows: &[&ModelRecord]) -> GroupCorrelation {
    let id: Vec<f64> = rows.iter().map(|m| m.metrics.id_mae).collect();
    let ood: Vec<f64> = rows.iter().map(|m| m.metrics.ood_mae).collect();
    let mut out =
        GroupCorrelation { group: name.into(), models: rows.len(), pearson: None, spearman: None, flag: None };
    if rows.len() < MIN_CORRELATION_MODELS {
        out.flag = Some(format!("fewer than {MIN_CORRELATION_MODELS} models"));
    } else {
        out.pearson = pearson(&id, &ood);
        out.spearman = spearman(&id, &ood);
        if out.pearson.is_none() {
            out.flag = Some("degenerate variance".into());
        }
    }
    out
}

/// ID-vs-OOD MAE correlations per group, over Medium+High, and over all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub groups: Vec<GroupCorrelation>,
    pub medium_high: GroupCorrelation,
    pub all: GroupCorrelation,
}

pub fn correlation_report(models: &[ModelRecord]) -> CorrelationReport {
    let groups = DeviationGroup::ALL
        .iter()
        .map(|&g| correlate(g.as_str(), &models.iter().filter(|m| m.group == g).collect::<Vec<_>>()))
        .collect();
    let medium_high: Vec<&ModelRecord> = models.iter().filter(|m| m.group != DeviationGroup::Low).collect();
    CorrelationReport {
        groups,
        medium_high: correlate("Medium+High", &medium_high),
        all: correlate("All", &models.iter().collect::<Vec<_>>()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn record(id: usize, group: DeviationGroup, id_mae: f64, ood_mae: f64) -> ModelRecord {
        ModelRecord {
            model_id: id,
            group,
            init_seed: 0,
            schedule: vec![],
            metrics: MetricSet { id_mae, id_rmse: id_mae, ood_mae, ood_rmse: ood_mae },
        }
    }

    #[test]
    fn metrics_basic() {
        let m = Metrics::of(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]);
        assert_relative_eq!(m.mae, 1.0);
        assert_relative_eq!(m.rmse, (5.0f64 / 3.0).sqrt());
    }

    #[test]
    fn folds_partition_rows() {
        let folds = kfold_indices(4, 2, 0).unwrap();
        assert_eq!(folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2]);
        let folds = kfold_indices(103, 10, 7).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 10 || f.len() == 11));
        assert!(kfold_indices(5, 10, 0).is_err());
        assert!(kfold_indices(5, 1, 0).is_err());
    }

    #[test]
    fn largest_remainder() {
        assert_eq!(proportional_allocation(&[30, 10], 10), vec![8, 2]);
        assert_eq!(proportional_allocation(&[1, 0], 10), vec![1, 0]);
        assert_eq!(proportional_allocation(&[3, 3, 3], 10), vec![3, 3, 3]);
        assert_eq!(proportional_allocation(&[5, 5, 5], 10), vec![4, 3, 3]);
        assert_eq!(proportional_allocation(&[0, 0], 3), vec![0, 0]);
    }

    #[test]
    fn adb_argmax_and_validity() {
        use DeviationGroup::*;
        let models = vec![
            record(0, Low, 9.0, 1.0),
            record(1, Medium, 0.3, 1.0),
            record(2, Medium, 0.5, 1.0),
            record(3, High, 0.41, 1.0),
        ];
        let sel = adb_select(&models, 10, 1).unwrap();
        assert_eq!(sel.selected, 2);
        assert_eq!(sel.sampled, vec![1, 2, 3]);

        let single = vec![record(4, High, 0.1, 0.1)];
        assert_eq!(adb_select(&single, 10, 0).unwrap().selected, 4);
        assert!(adb_select(&[record(0, Low, 1.0, 1.0)], 10, 0).is_err());

        let tied = vec![record(7, Medium, 0.5, 1.0), record(5, High, 0.5, 1.0)];
        assert_eq!(adb_select(&tied, 2, 0).unwrap().selected, 5);
    }

    #[test]
    fn adb_draws_proportionally() {
        let mut models: Vec<ModelRecord> = (0..30).map(|i| record(i, DeviationGroup::Medium, i as f64, 0.0)).collect();
        models.extend((30..40).map(|i| record(i, DeviationGroup::High, i as f64, 0.0)));
        let sel = adb_select(&models, 10, 3).unwrap();
        assert_eq!((sel.medium_drawn, sel.high_drawn), (8, 2));
        assert_eq!(sel.sampled.iter().filter(|&&i| i < 30).count(), 8);
        assert!(sel.selected >= 30);
    }

    #[test]
    fn percentile_rank_cases() {
        assert_eq!(percentile_rank(2.0, &[1.0, 2.0, 3.0, 4.0]).unwrap(), 50.0);
        assert_eq!(percentile_rank(1.0, &[1.0, 2.0, 3.0, 4.0]).unwrap(), 75.0);
        assert_eq!(percentile_rank(4.0, &[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.0);
        assert!(percentile_rank(1.0, &[]).is_err());
    }

    /// Regularized incomplete beta by Lentz's continued fraction.
    fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        if x > (a + 1.0) / (a + b + 2.0) {
            return 1.0 - incomplete_beta(b, a, 1.0 - x);
        }
        let ln_beta = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
        let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta).exp() / a;
        let tiny = 1e-300;
        let (mut c, mut d) = (1.0, 1.0 - (a + b) * x / (a + 1.0));
        if d.abs() < tiny {
            d = tiny;
        }
        d = 1.0 / d;
        let mut f = d;
        for m in 1..500 {
            let m = m as f64;
            for numerator in [
                m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m)),
                -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0)),
            ] {
                d = 1.0 + numerator * d;
                if d.abs() < tiny {
                    d = tiny;
                }
                c = 1.0 + numerator / c;
                if c.abs() < tiny {
                    c = tiny;
                }
                d = 1.0 / d;
                f *= c * d;
            }
            if (c * d - 1.0).abs() < 1e-16 {
                break;
            }
        }
        front * f
    }

    /// Lanczos approximation (g = 7, n = 9).
    fn ln_gamma(x: f64) -> f64 {
        const C: [f64; 9] = [
            0.999_999_999_999_809_9,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        let x = x - 1.0;
        let t = x + 7.5;
        let series = C[0] + (1..9).map(|i| C[i] / (x + i as f64)).sum::<f64>();
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + series.ln()
    }

    fn two_sided_t_p(t: f64, df: f64) -> f64 {
        incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
    }

    #[test]
    fn ttest_matches_incomplete_beta_oracle() {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = stream(21, &[1]);
        let b: Vec<f64> = (0..10).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let a: Vec<f64> = b.iter().map(|v| v + 0.5 + rng.sample::<f64, _>(StandardNormal)).collect();
        let test = paired_ttest(&a, &b).unwrap();
        assert_eq!(test.df, 9);
        assert!((test.p - two_sided_t_p(test.t, 9.0)).abs() < 1e-6, "{} vs {}", test.p, two_sided_t_p(test.t, 9.0));
        // Known quantile: t = 2.262 is the 97.5% point at 9 df.
        assert!((two_sided_t_p(2.262_157, 9.0) - 0.05).abs() < 1e-6);
    }

    #[test]
    fn ttest_edge_cases() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(paired_ttest(&a, &a).unwrap(), TTest { t: 0.0, p: 1.0, df: 2 });
        let b: Vec<f64> = a.iter().map(|v| v - 1.0).collect();
        let a5 = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b5: Vec<f64> = a5.iter().map(|v| v - 1.0).collect();
        assert_eq!(paired_ttest(&a5, &b5).unwrap_err(), HarnessError::DegenerateVariance);
        assert_eq!(paired_ttest(&a, &b).unwrap_err(), HarnessError::DegenerateVariance);
        assert!(paired_ttest(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn sign_test_values() {
        assert_relative_eq!(sign_test_p(20, 20), 0.5f64.powi(20), max_relative = 1e-9);
        assert!(sign_test_p(15, 20) < 0.05);
        assert!(sign_test_p(14, 20) > 0.05);
        assert_eq!(sign_test_p(0, 20), 1.0);
    }

    #[test]
    fn ranks_and_spearman() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 8.0, 27.0]).unwrap(), 1.0);
    }

    #[test]
    fn correlation_flags_and_sign() {
        use DeviationGroup::*;
        let models: Vec<ModelRecord> =
            (0..5).map(|i| record(i, if i < 3 { Medium } else { High }, i as f64, 10.0 - 2.0 * i as f64)).collect();
        let report = correlation_report(&models);
        assert_relative_eq!(report.medium_high.pearson.unwrap(), -1.0);
        assert_relative_eq!(report.medium_high.spearman.unwrap(), -1.0);
        assert!(report.groups[0].flag.is_some() && report.groups[0].models == 0);
        let high = &report.groups[2];
        assert_eq!(high.models, 2);
        assert!(high.pearson.is_none() && high.flag.is_some());
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_rmse(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..50)) {
            let (p, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = Metrics::of(&p, &y);
            prop_assert!(m.mae <= m.rmse * (1.0 + 1e-12));
        }

        #[test]
        fn allocation_sums(sizes in prop::collection::vec(0usize..40, 1..5), total in 0usize..60) {
            let alloc = proportional_allocation(&sizes, total);
            let pool: usize = sizes.iter().sum();
            prop_assert_eq!(alloc.iter().sum::<usize>(), total.min(pool));
            prop_assert!(alloc.iter().zip(&sizes).all(|(a, s)| a <= s));
        }

        #[test]
        fn percentile_rank_in_range(pool in prop::collection::vec(0f64..10.0, 1..40), pick in 0usize..40) {
            let selected = pool[pick % pool.len()];
            let pr = percentile_rank(selected, &pool).unwrap();
            prop_assert!((0.0..=100.0).contains(&pr));
        }
    }
}
