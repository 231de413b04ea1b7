//! Fully connected regressors trained with Adam on permutation schedules.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::data::LabeledData;
use super::{HarnessError, Result};
use crate::rng::{domain, stream};
use crate::sequencing::{BatchSchedule, Permutation};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Mlp,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Linear => "linear",
            ModelKind::Mlp => "mlp",
        })
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(format!("unknown model kind '{other}' (expected linear or mlp)")),
        }
    }
}

/// Architecture; hidden layers use ReLU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hidden_widths: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { kind: ModelKind::Mlp, hidden_widths: vec![32, 16] }
    }
}

impl ModelSpec {
    pub fn linear() -> Self {
        Self { kind: ModelKind::Linear, hidden_widths: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ModelKind::Mlp if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) => {
                Err(HarnessError::InvalidInput("an mlp needs nonempty, positive hidden widths".into()))
            }
            _ => Ok(()),
        }
    }

    fn layer_sizes(&self, inputs: usize) -> Vec<usize> {
        let mut sizes = vec![inputs];
        if self.kind == ModelKind::Mlp {
            sizes.extend(&self.hidden_widths);
        }
        sizes.push(1);
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.001, epochs: 20, batch_size: 50, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.epochs == 0 || self.batch_size == 0 {
            return Err(HarnessError::InvalidInput(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

/// Dense feed-forward network with all parameters in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

impl Network {
    /// He-normal weights for ReLU layers, Glorot-normal for the output layer,
    /// zero biases.
    pub fn init(spec: &ModelSpec, inputs: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if inputs == 0 {
            return Err(HarnessError::InvalidInput("network needs at least one input".into()));
        }
        let sizes = spec.layer_sizes(inputs);
        let mut rng = stream(seed, &[domain::MODEL_INIT]);
        let mut params = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let last = l + 2 == sizes.len();
            let scale = if last { 0.0 } else { (2.0 / fan_in as f64).sqrt() };
            params.extend((0..fan_in * fan_out).map(|_| scale * rng.sample::<f64, _>(StandardNormal)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { sizes, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        // (offset, fan_in, fan_out); weights are fan_out x fan_in, biases follow.
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let start = offset;
            offset += w[0] * w[1] + w[1];
            (start, w[0], w[1])
        })
    }

    /// Activations of every layer for one input, input first.
    fn forward_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let depth = self.sizes.len() - 1;
        let mut acts = vec![x.to_vec()];
        for (l, (offset, fan_in, fan_out)) in self.layers().enumerate() {
            let input = &acts[l];
            let bias = offset + fan_in * fan_out;
            let out: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &self.params[offset + o * fan_in..offset + (o + 1) * fan_in];
                    let z = row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>() + self.params[bias + o];
                    if l + 1 < depth {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    pub fn predict_one(&self, x: &[f64]) -> f64 {
        self.forward_all(x).last().expect("output layer")[0]
    }

    pub fn predict(&self, data: &LabeledData) -> Vec<f64> {
        data.x.rows().into_iter().map(|row| self.predict_one(&row.to_vec())).collect()
    }

    /// Adds the gradient of `scale * (prediction - y)^2 / 2` to `grad` and
    /// returns the prediction.
    fn accumulate_gradient(&self, x: &[f64], y: f64, scale: f64, grad: &mut [f64]) -> f64 {
        let acts = self.forward_all(x);
        let prediction = acts.last().expect("output layer")[0];
        let layers: Vec<_> = self.layers().collect();
        let mut delta = vec![scale * (prediction - y)];
        for (l, &(offset, fan_in, fan_out)) in layers.iter().enumerate().rev() {
            let input = &acts[l];
            let bias = offset + fan_in * fan_out;
            for o in 0..fan_out {
                let row = &mut grad[offset + o * fan_in..offset + (o + 1) * fan_in];
                row.iter_mut().zip(input).for_each(|(g, a)| *g += delta[o] * a);
                grad[bias + o] += delta[o];
            }
            if l > 0 {
                delta = (0..fan_in)
                    .map(|i| {
                        if input[i] <= 0.0 {
                            return 0.0;
                        }
                        (0..fan_out).map(|o| self.params[offset + o * fan_in + i] * delta[o]).sum()
                    })
                    .collect();
            }
        }
        prediction
    }
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(lr: f64, n: usize) -> Self {
        Self { lr, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub network: Network,
    /// Mean squared error of every minibatch, in training order.
    pub batch_losses: Vec<f64>,
}

/// Trains on `data`, visiting the rows of epoch `e` in the order of
/// `schedule[e]`, split into consecutive batches of `cfg.batch_size`.
/// Weights are initialized from `init_seed`.
pub fn train_with_schedule(
    spec: &ModelSpec,
    data: &LabeledData,
    cfg: &TrainConfig,
    schedule: &[Permutation],
    init_seed: u64,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if schedule.len() < cfg.epochs {
        return Err(HarnessError::InvalidInput(format!(
            "schedule has {} permutations for {} epochs",
            schedule.len(),
            cfg.epochs
        )));
    }
    if data.is_empty() {
        return Err(HarnessError::InvalidInput("empty training data".into()));
    }
    let mut network = Network::init(spec, data.dim(), init_seed)?;
    let mut adam = Adam::new(cfg.learning_rate, network.param_count());
    let batches =
        BatchSchedule::new(data.len(), cfg.batch_size).map_err(|e| HarnessError::InvalidInput(e.to_string()))?;
    let rows: Vec<Vec<f64>> = data.x.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut grad = vec![0.0; network.param_count()];
    let mut batch_losses = Vec::with_capacity(cfg.epochs * batches.step_count());
    for (epoch, perm) in schedule.iter().take(cfg.epochs).enumerate() {
        if perm.len() != data.len() {
            return Err(HarnessError::InvalidInput(format!(
                "permutation {} covers {} rows, data has {}",
                perm.id,
                perm.len(),
                data.len()
            )));
        }
        for step in 1..=batches.step_count() {
            let batch = &perm.order()[batches.batch(step)];
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 2.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &i in batch {
                let prediction = network.accumulate_gradient(&rows[i], data.y[i], scale, &mut grad);
                loss += (prediction - data.y[i]).powi(2);
            }
            loss /= batch.len() as f64;
            if !loss.is_finite() {
                return Err(HarnessError::Divergence { epoch, step });
            }
            batch_losses.push(loss);
            adam.update(&mut network.params, &grad);
        }
    }
    Ok(TrainedModel { network, batch_losses })
}

/// Closed-form least squares with intercept, via the normal equations.
pub fn least_squares(data: &LabeledData) -> Option<Vec<f64>> {
    let (n, d) = (data.len(), data.dim());
    let design = nalgebra::DMatrix::from_fn(n, d + 1, |i, j| if j < d { data.x[[i, j]] } else { 1.0 });
    let y = nalgebra::DVector::from_column_slice(&data.y);
    let gram = design.transpose() * &design;
    let rhs = design.transpose() * y;
    gram.cholesky().map(|c| c.solve(&rhs).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequencing::generate_permutations;
    use ndarray::Array2;

    fn linear_data(n: usize, noise: f64) -> LabeledData {
        let mut rng = stream(3, &[99]);
        let x = Array2::from_shape_simple_fn((n, 3), || rng.sample::<f64, _>(StandardNormal));
        let y = x
            .rows()
            .into_iter()
            .map(|r| 0.5 * r[0] - 0.3 * r[1] + 0.2 * r[2] + 0.1 + noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        LabeledData::new(x, y).unwrap()
    }

    fn mean_abs_error(net: &Network, data: &LabeledData) -> f64 {
        net.predict(data).iter().zip(&data.y).map(|(p, y)| (p - y).abs()).sum::<f64>() / data.len() as f64
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = ModelSpec { kind: ModelKind::Mlp, hidden_widths: vec![4, 3] };
        let mut net = Network::init(&spec, 3, 1).unwrap();
        // Nonzero biases so every unit is exercised.
        net.params.iter_mut().enumerate().for_each(|(i, p)| *p += 0.01 * (i % 5) as f64);
        let x = [0.3, -1.2, 0.8];
        let y = 0.4;
        let mut grad = vec![0.0; net.param_count()];
        net.accumulate_gradient(&x, y, 1.0, &mut grad);
        let loss = |n: &Network| 0.5 * (n.predict_one(&x) - y).powi(2);
        for k in 0..net.param_count() {
            let h = 1e-6;
            let mut plus = net.clone();
            plus.params[k] += h;
            let mut minus = net.clone();
            minus.params[k] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((numeric - grad[k]).abs() < 1e-6, "param {k}: {numeric} vs {}", grad[k]);
        }
    }

    #[test]
    fn linear_model_recovers_noiseless_fit() {
        let data = linear_data(400, 0.0);
        let exact = least_squares(&data).unwrap();
        assert!((exact[0] - 0.5).abs() < 1e-10 && (exact[3] - 0.1).abs() < 1e-10);
        let cfg = TrainConfig { learning_rate: 0.01, epochs: 60, batch_size: 20, seed: 0 };
        let schedule = generate_permutations(400, 60, 4).unwrap();
        let trained = train_with_schedule(&ModelSpec::linear(), &data, &cfg, &schedule, 0).unwrap();
        assert!(mean_abs_error(&trained.network, &data) <= 0.05);
        for (p, e) in trained.network.params().iter().zip(&exact) {
            assert!((p - e).abs() < 0.05);
        }
    }

    #[test]
    fn deterministic_and_order_sensitive() {
        let data = linear_data(200, 0.1);
        let cfg = TrainConfig { epochs: 3, batch_size: 25, ..Default::default() };
        let schedule = generate_permutations(200, 3, 8).unwrap();
        let a = train_with_schedule(&ModelSpec::default(), &data, &cfg, &schedule, 5).unwrap();
        let b = train_with_schedule(&ModelSpec::default(), &data, &cfg, &schedule, 5).unwrap();
        assert_eq!(a, b);
        let reversed: Vec<Permutation> = schedule
            .iter()
            .map(|p| Permutation::new(p.id, p.order().iter().rev().copied().collect()).unwrap())
            .collect();
        let c = train_with_schedule(&ModelSpec::default(), &data, &cfg, &reversed, 5).unwrap();
        assert_ne!(a.batch_losses, c.batch_losses);
        assert!(c.batch_losses.iter().all(|l| l.is_finite()));
        assert!(mean_abs_error(&c.network, &data).is_finite());
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = linear_data(10, 0.0);
        let cfg = TrainConfig { epochs: 2, batch_size: 5, ..Default::default() };
        let short = generate_permutations(10, 1, 0).unwrap();
        assert!(train_with_schedule(&ModelSpec::linear(), &data, &cfg, &short, 0).is_err());
        let wrong = generate_permutations(9, 2, 0).unwrap();
        assert!(train_with_schedule(&ModelSpec::linear(), &data, &cfg, &wrong, 0).is_err());
        let bad = ModelSpec { kind: ModelKind::Mlp, hidden_widths: vec![] };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut data = linear_data(10, 0.0);
        data.y[3] = f64::NAN;
        let cfg = TrainConfig { epochs: 1, batch_size: 5, ..Default::default() };
        let schedule = vec![Permutation::identity(0, 10)];
        let err = train_with_schedule(&ModelSpec::linear(), &data, &cfg, &schedule, 0).unwrap_err();
        assert_eq!(err, HarnessError::Divergence { epoch: 0, step: 1 });
    }
}
