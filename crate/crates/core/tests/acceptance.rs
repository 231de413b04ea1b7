//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use adb::grouping::group_run;
use adb::harness::{run_replicated, ExperimentConfig, ReplicationReport};
use adb::sequencing::{score_all, ScoringMode, ScoringOptions};
use adb::theory::{self, ALPHA};
use adb::transport::{debiased_distance, exact_ot_oracle, PointCloud, SinkhornConfig, SinkhornSolution};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> PointCloud {
    PointCloud::uniform(d, (0..n * d).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn reversed(c: &PointCloud) -> PointCloud {
    let rows: Vec<Vec<f64>> = (0..c.len()).rev().map(|i| c.point(i).to_vec()).collect();
    PointCloud::from_rows(&rows).unwrap()
}

fn gaussian_latents(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng))
}

/// Largest marginal violation over every plan solved by criteria 1 and 2.
#[derive(Default)]
struct PlanLog {
    plans: usize,
    worst: f64,
}

impl PlanLog {
    fn record(&mut self, a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig) {
        let s = SinkhornSolution::solve(a, b, cfg).expect("sinkhorn");
        self.plans += 1;
        self.worst = self.worst.max(s.marginal_violation);
    }
}

fn oracle_equivalence(plans: &mut PlanLog) -> Outcome {
    let start = Instant::now();
    let cfg = SinkhornConfig { epsilon: 0.005, log_domain: true, ..SinkhornConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_rel: f64 = 0.0;
    let mut failures = 0;
    for k in 0..200 {
        let d = [1, 2, 4][k % 3];
        let (n, m) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let a = random_cloud(&mut rng, n, d);
        let b = random_cloud(&mut rng, m, d);
        let half = debiased_distance(&a, &b, &cfg).unwrap() / 2.0;
        let exact = exact_ot_oracle(&a, &b).unwrap();
        let err = (half - exact).abs();
        worst_rel = worst_rel.max(err / exact);
        if err > (0.05 * exact).max(1e-6) {
            failures += 1;
        }
        plans.record(&a, &b, &cfg);
        plans.record(&a, &a, &cfg);
        plans.record(&b, &b, &cfg);
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && elapsed <= Duration::from_secs(60),
        format!("200 instances, {failures} outside tolerance, worst relative error {worst_rel:.2e}, {elapsed:.1?}"),
    )
}

fn debias_identities(plans: &mut PlanLog) -> Outcome {
    let cfg = SinkhornConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_self, mut worst_sym): (f64, f64) = (0.0, 0.0);
    for k in 0..100 {
        let d = [1, 2, 4, 8][k % 4];
        let (n, m) = (rng.random_range(2..=30), rng.random_range(2..=30));
        let a = random_cloud(&mut rng, n, d);
        let b = random_cloud(&mut rng, m, d);
        worst_self = worst_self.max(debiased_distance(&a, &a, &cfg).unwrap().abs());
        // Same measure, different storage order: exercises the solver path.
        worst_self = worst_self.max(debiased_distance(&a, &reversed(&a), &cfg).unwrap().abs());
        let ab = debiased_distance(&a, &b, &cfg).unwrap();
        let ba = debiased_distance(&b, &a, &cfg).unwrap();
        worst_sym = worst_sym.max((ab - ba).abs());
        plans.record(&a, &b, &cfg);
        plans.record(&b, &a, &cfg);
        plans.record(&a, &reversed(&a), &cfg);
    }
    outcome(
        worst_self <= 1e-8 && worst_sym <= 1e-10,
        format!("max |D(mu,mu)| {worst_self:.2e}, max asymmetry {worst_sym:.2e}"),
    )
}

fn marginal_feasibility(plans: &PlanLog) -> Outcome {
    outcome(plans.worst <= 1e-6, format!("{} plans, worst L-inf marginal violation {:.2e}", plans.plans, plans.worst))
}

fn closed_form_correlation() -> Outcome {
    let start = Instant::now();
    let mut worst_mc: f64 = 0.0;
    let mut sign_failures = 0;
    for (i, k) in [0.25, 0.5, 0.8, 1.0, 2.0].into_iter().enumerate() {
        for (j, delta) in [0.5, 1.0, 2.0].into_iter().enumerate() {
            let rho = theory::rho_tu(k, delta).unwrap();
            let mc = theory::mc_rho(k, delta, 1_000_000, 100 + (3 * i + j) as u64).unwrap();
            worst_mc = worst_mc.max((mc - rho).abs());
            let gap = k - ALPHA * delta;
            if gap.abs() > 0.05 && rho.signum() != gap.signum() {
                sign_failures += 1;
            }
        }
    }
    let limit = theory::rho_tu(1e-6, 1.0).unwrap();
    let elapsed = start.elapsed();
    outcome(
        worst_mc <= 0.02 && sign_failures == 0 && (limit + 0.936).abs() <= 0.001 && elapsed <= Duration::from_secs(120),
        format!(
            "max |mc - closed form| {worst_mc:.4}, sign mismatches {sign_failures}, rho(1e-6, 1) = {limit:.5}, {elapsed:.1?}"
        ),
    )
}

fn moments_and_covariance() -> Outcome {
    let n = 1_000_000;
    let mut misses = Vec::new();
    let mut worst_z: f64 = 0.0;
    for (idx, (k, delta)) in [(1.0, 1.0), (0.5, 1.0), (2.0, 0.5)].into_iter().enumerate() {
        let seed = 200 + idx as u64;
        for order in 1..=4 {
            let est = theory::mc_moment(order, k, n, seed).unwrap();
            let target = theory::raw_moment(order, k).unwrap();
            worst_z = worst_z.max((est.value - target).abs() / est.std_error);
            if !est.covers(target, 3.0) {
                misses.push(format!("E[T^{order}] at k={k}"));
            }
        }
        let est = theory::mc_cov_tu(k, delta, n, seed).unwrap();
        let target = theory::cov_tu(k, delta);
        worst_z = worst_z.max((est.value - target).abs() / est.std_error);
        if !est.covers(target, 3.0) {
            misses.push(format!("Cov at ({k}, {delta})"));
        }
    }
    outcome(misses.is_empty(), format!("15 estimates, worst |z| {worst_z:.2}, misses {misses:?}"))
}

fn significant_digits(x: f64, digits: i32) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let scale = 10f64.powi(digits - 1 - x.abs().log10().floor() as i32);
    (x * scale).round() / scale
}

fn monotonicity() -> Outcome {
    let values: Vec<f64> = (1..=500).map(|i| theory::rho_tu(i as f64 / 100.0, 1.0).unwrap()).collect();
    let raw = values.windows(2).filter(|w| w[1] <= w[0]).count();
    let rounded = values.windows(2).filter(|w| significant_digits(w[1], 5) <= significant_digits(w[0], 5)).count();
    outcome(
        raw == 0 && rounded == 0,
        format!("500 grid points, {raw} non-increasing steps, {rounded} at 5 significant digits"),
    )
}

fn terminal_anchor() -> Outcome {
    let mut worst: f64 = 0.0;
    for (n, seed) in [(100, 7), (400, 8)] {
        let latents = gaussian_latents(n, 8, seed);
        let opts = ScoringOptions {
            batch_size: n / 10,
            permutations: 10,
            seed,
            mode: ScoringMode::Cumulative,
            sinkhorn: SinkhornConfig::default(),
            subsample_cap: None,
        };
        let run = score_all(latents.view(), &opts).unwrap();
        for t in &run.trajectories {
            worst = worst.max(t.values.last().unwrap().abs());
        }
    }
    outcome(worst <= 1e-6, format!("max |D_T| {worst:.2e} over N in {{100, 400}}"))
}

fn pipeline_determinism() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_adb");
    let smoke = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/smoke.csv");
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        for run in 0..3 {
            let traj = dir.path().join(format!("t_{threads}_{run}.json"));
            let groups = dir.path().join(format!("g_{threads}_{run}.json"));
            let ok = Command::new(exe)
                .env("ADB_THREADS", threads)
                .args(["score", "--data", smoke.to_str().unwrap(), "--label-column", "y"])
                .args(["--mode", "batchwise", "--batch-size", "24", "--perms", "20", "--seed", "7"])
                .args(["--out", traj.to_str().unwrap()])
                .status()
                .unwrap()
                .success()
                && Command::new(exe)
                    .env("ADB_THREADS", threads)
                    .args(["classify", "--trajectories", traj.to_str().unwrap(), "--out", groups.to_str().unwrap()])
                    .status()
                    .unwrap()
                    .success();
            if !ok {
                return outcome(false, format!("CLI failed with ADB_THREADS={threads}"));
            }
            outputs.push((std::fs::read(&traj).unwrap(), std::fs::read(&groups).unwrap()));
        }
    }
    let identical = outputs.iter().all(|o| *o == outputs[0]);
    outcome(identical, format!("6 runs (3 each at 1 and 4 workers), byte-identical: {identical}"))
}

fn complexity_direction(partitions: &mut Vec<String>) -> Outcome {
    let latents = gaussian_latents(5000, 8, 9);
    let mut time = |mode| {
        let opts = ScoringOptions {
            batch_size: 50,
            permutations: 20,
            seed: 9,
            mode,
            sinkhorn: SinkhornConfig::default(),
            subsample_cap: Some(200),
        };
        let start = Instant::now();
        let run = score_all(latents.view(), &opts).unwrap();
        let elapsed = start.elapsed();
        let grouping = group_run(&run, 0.35, 0.85).unwrap();
        if grouping.assignments.len() != 20 {
            partitions.push(format!("{mode} scoring grouped {} of 20", grouping.assignments.len()));
        }
        elapsed
    };
    let batchwise = time(ScoringMode::Batchwise);
    let cumulative = time(ScoringMode::Cumulative);
    let ratio = batchwise.as_secs_f64() / cumulative.as_secs_f64();
    outcome(
        ratio <= 0.8,
        format!("batchwise {batchwise:.1?}, cumulative {cumulative:.1?}, ratio {ratio:.3} (subsample cap 200)"),
    )
}

fn shift_experiment() -> (Outcome, Option<ReplicationReport>) {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..20).collect();
    let report = match run_replicated(&ExperimentConfig::default(), &seeds) {
        Ok(r) => r,
        Err(e) => return (outcome(false, format!("experiment failed: {e}")), None),
    };
    let elapsed = start.elapsed();
    let gates = report.runs.iter().all(|r| (0.6..=0.9).contains(&r.ood_w1) && r.id_w1 <= 0.05);
    let (lo, hi) =
        report.runs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.ood_w1), hi.max(r.ood_w1)));
    let majority = 2 * report.negative_correlations > report.correlated_runs && report.sign_test_p < 0.05;
    let better = report.adb.mean.ood_mae <= report.cv.mean.ood_mae;
    let p = report.ttests.ood_mae.map_or("n/a".to_string(), |t| format!("{:.4}", t.p));
    let pass = gates && majority && better && elapsed <= Duration::from_secs(30 * 60);
    let detail = format!(
        "20 seeds, OOD W1 in [{lo:.3}, {hi:.3}], max ID W1 {:.4}; (a) negative correlation {}/{} (sign test p = {:.2e}); \
         (b) mean OOD MAE ADB {:.4} vs CV {:.4} (paired t-test p = {p}); {elapsed:.1?}",
        report.runs.iter().map(|r| r.id_w1).fold(0.0, f64::max),
        report.negative_correlations,
        report.correlated_runs,
        report.sign_test_p,
        report.adb.mean.ood_mae,
        report.cv.mean.ood_mae,
    );
    (outcome(pass, detail), Some(report))
}

fn report_sanity(report: Option<&ReplicationReport>, partitions: &[String]) -> Outcome {
    let Some(report) = report else {
        return outcome(false, "no reports to check".into());
    };
    let m = ExperimentConfig::default().permutations;
    let insane = report.runs.iter().filter(|r| !r.is_sane()).count();
    let unpartitioned =
        report.runs.iter().filter(|r| r.groups.iter().map(|g| g.permutations).sum::<usize>() != m).count();
    outcome(
        insane == 0 && unpartitioned == 0 && partitions.is_empty(),
        format!(
            "{} reports, {insane} violate MAE <= RMSE or PR in [0, 100], {unpartitioned} groupings miss permutations {partitions:?}",
            report.runs.len()
        ),
    )
}

fn main() {
    let mut out = std::io::stdout().lock();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut log = |results: &mut Vec<(usize, &str, Outcome)>, id: usize, name: &'static str, o: Outcome| {
        let _ = writeln!(out, "criterion {id:>2} {:<4} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        let _ = out.flush();
        results.push((id, name, o));
    };

    let mut plans = PlanLog::default();
    log(&mut results, 1, "transport oracle equivalence", oracle_equivalence(&mut plans));
    log(&mut results, 2, "debias identities", debias_identities(&mut plans));
    log(&mut results, 3, "marginal feasibility", marginal_feasibility(&plans));
    log(&mut results, 4, "closed-form correlation", closed_form_correlation());
    log(&mut results, 5, "moments and covariance", moments_and_covariance());
    log(&mut results, 6, "monotonicity in k", monotonicity());
    log(&mut results, 7, "cumulative terminal anchor", terminal_anchor());
    log(&mut results, 8, "pipeline determinism", pipeline_determinism());
    let mut partitions = Vec::new();
    log(&mut results, 9, "complexity direction", complexity_direction(&mut partitions));
    let (o, report) = shift_experiment();
    log(&mut results, 10, "end-to-end shift experiment", o);
    log(&mut results, 11, "report sanity", report_sanity(report.as_ref(), &partitions));

    let failed: Vec<usize> = results.iter().filter(|(_, _, o)| !o.pass).map(|(id, _, _)| *id).collect();
    if failed.is_empty() {
        let _ = writeln!(out, "acceptance: all {} criteria passed", results.len());
    } else {
        let _ = writeln!(out, "acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
