use super::{cost_matrix, CostMatrix, PointCloud, Result, TransportError, TransportPlan};

/// Terms of a log-sum-exp lying this far below the running maximum are
/// dropped; `exp(-50)` is below half an ulp of the leading term.
const LSE_CUTOFF: f64 = 50.0;

/// Geometric decay of the regularization during warm-start annealing.
const ANNEAL_FACTOR: f64 = 0.5;

/// Iteration cap for each intermediate annealing stage.
const STAGE_ITERATIONS: usize = 10;

/// Plain iterations at the target regularization before switching to Newton.
const SINKHORN_FINAL_ITERATIONS: usize = 25;

/// Residual at which an intermediate annealing stage is considered settled.
const STAGE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iterations: usize,
    pub feasibility_tolerance: f64,
    pub log_domain: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, max_iterations: 1000, feasibility_tolerance: 1e-6, log_domain: true }
    }
}

impl SinkhornConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(TransportError::InvalidConfig(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if self.max_iterations == 0 {
            return Err(TransportError::InvalidConfig("max_iterations must be positive".into()));
        }
        if !(self.feasibility_tolerance.is_finite() && self.feasibility_tolerance > 0.0) {
            return Err(TransportError::InvalidConfig(format!(
                "feasibility_tolerance must be positive and finite, got {}",
                self.feasibility_tolerance
            )));
        }
        Ok(())
    }
}

/// Full solver output: plan, sharp cost and convergence diagnostics.
#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub plan: TransportPlan,
    pub cost: f64,
    pub iterations: usize,
    pub marginal_violation: f64,
}

/// Entropic plan between `a` and `b` and its sharp cost `<C, P*>`.
pub fn sinkhorn(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig) -> Result<(TransportPlan, f64)> {
    let solution = SinkhornSolution::solve(a, b, cfg)?;
    Ok((solution.plan, solution.cost))
}

/// Sharp cost only; never materializes the plan.
pub fn sinkhorn_cost(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig) -> Result<f64> {
    cfg.validate()?;
    let cost = cost_matrix(a, b)?;
    if a.len() == 1 || b.len() == 1 {
        return Ok(dirac_plan(a, b, cfg.epsilon).cost(&cost));
    }
    let potentials = Potentials::solve(a, b, &cost, cfg)?;
    let mut total = 0.0;
    potentials.for_each_entry(&cost, |_, _, p, c| total += p * c);
    finite_cost(total)
}

impl SinkhornSolution {
    pub fn solve(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig) -> Result<Self> {
        cfg.validate()?;
        let cost = cost_matrix(a, b)?;
        let (plan, iterations) = if a.len() == 1 || b.len() == 1 {
            (dirac_plan(a, b, cfg.epsilon), 0)
        } else {
            let potentials = Potentials::solve(a, b, &cost, cfg)?;
            let mut matrix = Vec::with_capacity(a.len() * b.len());
            potentials.for_each_entry(&cost, |_, _, p, _| matrix.push(p));
            (TransportPlan::new(a.len(), b.len(), matrix, cfg.epsilon), potentials.iterations)
        };
        let marginal_violation = plan.marginal_violation(a, b);
        let cost = finite_cost(plan.cost(&cost))?;
        Ok(Self { plan, cost, iterations, marginal_violation })
    }
}

fn finite_cost(cost: f64) -> Result<f64> {
    if cost.is_finite() {
        Ok(cost)
    } else {
        Err(TransportError::NonFinite("transport cost"))
    }
}

/// When either side is a single atom the coupling is forced.
fn dirac_plan(a: &PointCloud, b: &PointCloud, epsilon: f64) -> TransportPlan {
    let mut matrix = Vec::with_capacity(a.len() * b.len());
    for &wa in a.weights() {
        for &wb in b.weights() {
            matrix.push(if a.len() == 1 {
                wb
            } else if b.len() == 1 {
                wa
            } else {
                wa * wb
            });
        }
    }
    TransportPlan::new(a.len(), b.len(), matrix, epsilon)
}

/// Dual potentials `(f, g)` with `P_ij = a_i b_j exp((f_i + g_j - C_ij) / eps)`.
struct Potentials {
    f: Vec<f64>,
    g: Vec<f64>,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    epsilon: f64,
    iterations: usize,
}

impl Potentials {
    fn solve(a: &PointCloud, b: &PointCloud, cost: &CostMatrix, cfg: &SinkhornConfig) -> Result<Self> {
        let log_a: Vec<f64> = a.weights().iter().map(|w| w.ln()).collect();
        let log_b: Vec<f64> = b.weights().iter().map(|w| w.ln()).collect();
        let (f, g, iterations) = if cfg.log_domain {
            solve_log_domain(a.weights(), &log_a, &log_b, cost, cfg)?
        } else {
            solve_kernel(a.weights(), b.weights(), cost, cfg)?
        };
        Ok(Self { f, g, log_a, log_b, epsilon: cfg.epsilon, iterations })
    }

    fn for_each_entry(&self, cost: &CostMatrix, mut visit: impl FnMut(usize, usize, f64, f64)) {
        let inv_eps = 1.0 / self.epsilon;
        for i in 0..cost.rows() {
            let row_term = self.log_a[i] + self.f[i] * inv_eps;
            for (j, &c) in cost.row(i).iter().enumerate() {
                let p = (row_term + self.log_b[j] + (self.g[j] - c) * inv_eps).exp();
                visit(i, j, p, c);
            }
        }
    }
}

/// `-eps * log sum_j exp(h_j - C_ij / eps)` for every row `i`.
fn soft_min_rows(cost: &CostMatrix, h: &[f64], inv_eps: f64, out: &mut [f64]) {
    for (i, out) in out.iter_mut().enumerate() {
        let row = cost.row(i);
        let mut max = f64::NEG_INFINITY;
        for (c, hj) in row.iter().zip(h) {
            let x = hj - c * inv_eps;
            if x > max {
                max = x;
            }
        }
        let floor = max - LSE_CUTOFF;
        let mut sum = 0.0;
        for (c, hj) in row.iter().zip(h) {
            let x = hj - c * inv_eps;
            if x > floor {
                sum += (x - max).exp();
            }
        }
        *out = -(max + sum.ln()) / inv_eps;
    }
}

fn solve_log_domain(
    a: &[f64],
    log_a: &[f64],
    log_b: &[f64],
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let cost_t = cost.transposed();
    let (n, m) = (cost.rows(), cost.cols());
    let mut f = vec![0.0; n];
    let mut f_next = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut h_rows = vec![0.0; m];
    let mut h_cols = vec![0.0; n];

    let target = cfg.epsilon;
    let mut eps = cost.max().max(target);
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    loop {
        let last_stage = eps <= target;
        let inv_eps = 1.0 / eps;
        let stage_cap = if last_stage { SINKHORN_FINAL_ITERATIONS } else { STAGE_ITERATIONS };
        for _ in 0..stage_cap {
            if iterations >= cfg.max_iterations {
                return Err(TransportError::NotConverged { iterations, residual });
            }
            for (h, (la, fi)) in h_cols.iter_mut().zip(log_a.iter().zip(&f)) {
                *h = la + fi * inv_eps;
            }
            soft_min_rows(&cost_t, &h_cols, inv_eps, &mut g);
            for (h, (lb, gj)) in h_rows.iter_mut().zip(log_b.iter().zip(&g)) {
                *h = lb + gj * inv_eps;
            }
            soft_min_rows(cost, &h_rows, inv_eps, &mut f_next);
            iterations += 1;

            // Columns are exact after the g-update; row i of the plan (f, g)
            // sums to a_i * exp((f_i - f_next_i) / eps).
            residual = a
                .iter()
                .zip(f.iter().zip(&f_next))
                .filter(|(&w, _)| w > 0.0)
                .map(|(w, (fi, fn_))| w * (((fi - fn_) * inv_eps).exp() - 1.0).abs())
                .fold(0.0, f64::max);
            if residual.is_nan() {
                return Err(TransportError::NotConverged { iterations, residual });
            }
            if last_stage && residual <= cfg.feasibility_tolerance {
                return Ok((f, g, iterations));
            }
            std::mem::swap(&mut f, &mut f_next);
            if !last_stage && residual <= STAGE_TOLERANCE {
                break;
            }
        }
        if last_stage {
            break;
        }
        eps = (eps * ANNEAL_FACTOR).max(target);
    }

    let mut newton = SemiDual { a, log_a, log_b, cost, cost_t: &cost_t, epsilon: target };
    let g = newton.solve(&mut f, cfg, &mut iterations)?;
    Ok((f, g, iterations))
}

/// Newton ascent on the semi-dual `F(f) = <a, f> + <b, g(f)>`, where `g(f)`
/// is the exact column soft-min. The gradient `a - P 1` is the row-marginal
/// violation of the plan with exact columns, and the negated Hessian is
/// `(diag(P 1) - P diag(1/b) P^T) / eps`. Newton directions come from
/// Jacobi-preconditioned conjugate gradients on Hessian-vector products.
struct SemiDual<'a> {
    a: &'a [f64],
    log_a: &'a [f64],
    log_b: &'a [f64],
    cost: &'a CostMatrix,
    cost_t: &'a CostMatrix,
    epsilon: f64,
}

struct SemiDualPoint {
    g: Vec<f64>,
    value: f64,
    plan: Vec<f64>,
    row_sums: Vec<f64>,
    gradient: Vec<f64>,
    residual: f64,
}

impl SemiDual<'_> {
    fn evaluate(&self, f: &[f64]) -> SemiDualPoint {
        let (n, m) = (self.cost.rows(), self.cost.cols());
        let inv_eps = 1.0 / self.epsilon;
        let h: Vec<f64> = self.log_a.iter().zip(f).map(|(la, fi)| la + fi * inv_eps).collect();
        let mut g = vec![0.0; m];
        soft_min_rows(self.cost_t, &h, inv_eps, &mut g);
        let b: Vec<f64> = self.log_b.iter().map(|lb| lb.exp()).collect();
        let value =
            self.a.iter().zip(f).map(|(w, x)| w * x).sum::<f64>() + b.iter().zip(&g).map(|(w, x)| w * x).sum::<f64>();
        let mut plan = vec![0.0; n * m];
        let mut row_sums = vec![0.0; n];
        for i in 0..n {
            let row_term = h[i];
            let mut sum = 0.0;
            for (j, (&c, p)) in self.cost.row(i).iter().zip(&mut plan[i * m..(i + 1) * m]).enumerate() {
                *p = (row_term + self.log_b[j] + (g[j] - c) * inv_eps).exp();
                sum += *p;
            }
            row_sums[i] = sum;
        }
        let gradient: Vec<f64> = self.a.iter().zip(&row_sums).map(|(w, r)| w - r).collect();
        let residual =
            gradient.iter().fold(0.0_f64, |acc, x| if x.is_finite() { acc.max(x.abs()) } else { f64::INFINITY });
        if !(value.is_finite() && residual.is_finite() && g.iter().all(|x| x.is_finite())) {
            // Overflowed potentials: never accepted by the line search.
            return SemiDualPoint { g, value: f64::NEG_INFINITY, plan, row_sums, gradient, residual: f64::INFINITY };
        }
        SemiDualPoint { g, value, plan, row_sums, gradient, residual }
    }

    fn solve(&mut self, f: &mut Vec<f64>, cfg: &SinkhornConfig, iterations: &mut usize) -> Result<Vec<f64>> {
        let mut point = self.evaluate(f);
        let mut damping = MIN_DAMPING;
        loop {
            if !point.residual.is_finite() {
                return Err(TransportError::NotConverged { iterations: *iterations, residual: point.residual });
            }
            if point.residual <= cfg.feasibility_tolerance {
                return Ok(point.g);
            }
            if *iterations >= cfg.max_iterations {
                return Err(TransportError::NotConverged { iterations: *iterations, residual: point.residual });
            }
            *iterations += 1;

            let direction = self.newton_direction(&point, damping);
            let slope: f64 = point.gradient.iter().zip(&direction).map(|(x, d)| x * d).sum();
            let grad_norm = norm(&point.gradient);
            let mut step = 1.0;
            let mut accepted = None;
            while step >= MIN_STEP {
                let candidate: Vec<f64> = f.iter().zip(&direction).map(|(x, d)| x + step * d).collect();
                let next = self.evaluate(&candidate);
                let gain = next.value - point.value;
                let flat = gain.abs() <= 1e-13 * (1.0 + point.value.abs());
                if gain >= ARMIJO * step * slope || (flat && norm(&next.gradient) < grad_norm) {
                    accepted = Some((candidate, next));
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some((candidate, next)) => {
                    *f = candidate;
                    point = next;
                    // Nearly decoupled rows make the Hessian close to
                    // singular; damping follows how far the model was trusted.
                    if step == 1.0 {
                        damping = (damping * 0.1).max(MIN_DAMPING);
                    } else if step < 0.25 {
                        damping = (damping * 10.0).min(MAX_DAMPING);
                    }
                }
                None if damping < MAX_DAMPING => damping = (damping * 100.0).min(MAX_DAMPING),
                None => {
                    // Newton stalled; block-coordinate Sinkhorn sweeps always
                    // ascend the dual and move back into Newton's basin.
                    let inv_eps = 1.0 / self.epsilon;
                    let mut g = point.g;
                    for _ in 0..FALLBACK_SWEEPS {
                        let h: Vec<f64> = self.log_b.iter().zip(&g).map(|(lb, gj)| lb + gj * inv_eps).collect();
                        soft_min_rows(self.cost, &h, inv_eps, f);
                        let h: Vec<f64> = self.log_a.iter().zip(f.iter()).map(|(la, fi)| la + fi * inv_eps).collect();
                        soft_min_rows(self.cost_t, &h, inv_eps, &mut g);
                    }
                    *iterations += FALLBACK_SWEEPS;
                    point = self.evaluate(f);
                    damping = MIN_DAMPING;
                }
            }
        }
    }

    /// Damped Newton direction: solves `(H + damping * diag(P 1)) d = grad`.
    fn newton_direction(&self, point: &SemiDualPoint, damping: f64) -> Vec<f64> {
        let (n, m) = (self.cost.rows(), self.cost.cols());
        let b: Vec<f64> = self.log_b.iter().map(|lb| lb.exp()).collect();
        let plan = &point.plan;
        let apply = |v: &[f64], out: &mut [f64]| {
            let mut pt_v = vec![0.0; m];
            for i in 0..n {
                let vi = v[i];
                for (acc, p) in pt_v.iter_mut().zip(&plan[i * m..(i + 1) * m]) {
                    *acc += p * vi;
                }
            }
            for (x, bj) in pt_v.iter_mut().zip(&b) {
                *x /= bj;
            }
            for i in 0..n {
                let coupled: f64 = plan[i * m..(i + 1) * m].iter().zip(&pt_v).map(|(p, x)| p * x).sum();
                out[i] = (1.0 + damping) * point.row_sums[i] * v[i] - coupled;
            }
        };
        let diagonal: Vec<f64> = (0..n)
            .map(|i| {
                let d =
                    point.row_sums[i] - plan[i * m..(i + 1) * m].iter().zip(&b).map(|(p, bj)| p * p / bj).sum::<f64>();
                (d + damping * point.row_sums[i]).max(1e-12 * point.row_sums[i]).max(f64::MIN_POSITIVE)
            })
            .collect();
        let rhs: Vec<f64> = point.gradient.iter().map(|x| x * self.epsilon).collect();
        conjugate_gradient(apply, &diagonal, &rhs)
    }
}

const ARMIJO: f64 = 1e-4;
const MIN_DAMPING: f64 = 1e-8;
const MAX_DAMPING: f64 = 1e4;
const FALLBACK_SWEEPS: usize = 10;
const MIN_STEP: f64 = 1e-10;
const CG_MAX_ITERATIONS: usize = 500;
const CG_RELATIVE_TOLERANCE: f64 = 1e-6;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn conjugate_gradient(apply: impl Fn(&[f64], &mut [f64]), diagonal: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.iter().zip(diagonal).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let stop = CG_RELATIVE_TOLERANCE * norm(rhs);
    for _ in 0..CG_MAX_ITERATIONS.min(4 * n) {
        apply(&p, &mut ap);
        let curvature: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(curvature > 0.0) {
            break;
        }
        let alpha = rz / curvature;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm(&r) <= stop {
            break;
        }
        for i in 0..n {
            z[i] = r[i] / diagonal[i];
        }
        let rz_next: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if x.iter().all(|v| *v == 0.0) {
        // No usable curvature: fall back to the preconditioned gradient.
        return rhs.iter().zip(diagonal).map(|(r, d)| r / d).collect();
    }
    x
}

/// Classic scaling iterations on `K = exp(-C / eps)`; potentials are
/// recovered as `eps * log(u)` and `eps * log(v)`.
fn solve_kernel(a: &[f64], b: &[f64], cost: &CostMatrix, cfg: &SinkhornConfig) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let (n, m) = (cost.rows(), cost.cols());
    let kernel: Vec<f64> = cost.entries().iter().map(|c| (-c / cfg.epsilon).exp()).collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv = vec![0.0; n];
    let mut residual = f64::INFINITY;

    for iteration in 1..=cfg.max_iterations {
        let mut ktu = vec![0.0; m];
        for i in 0..n {
            let scale = a[i] * u[i];
            for (acc, k) in ktu.iter_mut().zip(&kernel[i * m..(i + 1) * m]) {
                *acc += k * scale;
            }
        }
        for j in 0..m {
            if !(ktu[j] > 0.0 && ktu[j].is_finite()) {
                return Err(TransportError::KernelUnderflow(cfg.epsilon));
            }
            v[j] = 1.0 / ktu[j];
        }
        for i in 0..n {
            kv[i] = kernel[i * m..(i + 1) * m].iter().zip(b.iter().zip(&v)).map(|(k, (bj, vj))| k * bj * vj).sum();
            if !(kv[i] > 0.0 && kv[i].is_finite()) {
                return Err(TransportError::KernelUnderflow(cfg.epsilon));
            }
        }
        residual = (0..n).map(|i| (a[i] * u[i] * kv[i] - a[i]).abs()).fold(0.0, f64::max);
        if residual <= cfg.feasibility_tolerance {
            let f = u.iter().map(|x| cfg.epsilon * x.ln()).collect();
            let g = v.iter().map(|x| cfg.epsilon * x.ln()).collect();
            return Ok((f, g, iteration));
        }
        for i in 0..n {
            u[i] = 1.0 / kv[i];
        }
    }
    Err(TransportError::NotConverged { iterations: cfg.max_iterations, residual })
}
