//! Run configuration: `key = value` lines, `#` comments, and an optional
//! `[experiment]` section.

use std::path::PathBuf;

use crate::grouping::{DEFAULT_Q_HIGH, DEFAULT_Q_LOW};
use crate::harness::{ExperimentConfig, ModelKind};
use crate::sequencing::ScoringMode;

use super::{Result, ShellError};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: ScoringMode,
    pub batch_size: usize,
    pub permutations: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub q_low: f64,
    pub q_high: f64,
    pub subsample_cap: Option<usize>,
    /// PCA components applied before scoring; `None` scores raw rows.
    pub reduce: Option<usize>,
    pub output_dir: PathBuf,
    pub experiment: ExperimentConfig,
    pub replications: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let experiment = ExperimentConfig::default();
        Self {
            mode: experiment.mode,
            batch_size: experiment.train.batch_size,
            permutations: experiment.permutations,
            seed: 0,
            epsilon: experiment.epsilon,
            q_low: DEFAULT_Q_LOW,
            q_high: DEFAULT_Q_HIGH,
            subsample_cap: None,
            reduce: None,
            output_dir: PathBuf::from("adb-output"),
            experiment,
            replications: 1,
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| ShellError::Config { line, message: format!("invalid value '{value}' for '{key}'") })
}

fn parse_optional(line: usize, key: &str, value: &str) -> Result<Option<usize>> {
    if value == "none" {
        Ok(None)
    } else {
        parse_value(line, key, value).map(Some)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = "";
        let mut seen: Vec<(String, String)> = Vec::new();
        for (index, raw) in text.lines().enumerate() {
            let line = index + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if content.starts_with('[') {
                section = match content {
                    "[experiment]" => "experiment",
                    other => {
                        return Err(ShellError::Config { line, message: format!("unknown section {other}") });
                    }
                };
                continue;
            }
            let (key, value) = content.split_once('=').map(|(k, v)| (k.trim(), v.trim())).ok_or_else(|| {
                ShellError::Config { line, message: format!("expected 'key = value', got '{content}'") }
            })?;
            if seen.iter().any(|(s, k)| s == section && k == key) {
                return Err(ShellError::Config { line, message: format!("duplicate key '{key}'") });
            }
            seen.push((section.to_string(), key.to_string()));
            if section.is_empty() {
                cfg.set_top(line, key, value)?;
            } else {
                cfg.set_experiment(line, key, value)?;
            }
        }
        cfg.sync_experiment();
        cfg.validate()?;
        Ok(cfg)
    }

    fn set_top(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = parse_value(line, key, value)?,
            "batch_size" => self.batch_size = parse_value(line, key, value)?,
            "permutations" => self.permutations = parse_value(line, key, value)?,
            "seed" => self.seed = parse_value(line, key, value)?,
            "epsilon" => self.epsilon = parse_value(line, key, value)?,
            "q_low" => self.q_low = parse_value(line, key, value)?,
            "q_high" => self.q_high = parse_value(line, key, value)?,
            "subsample_cap" => self.subsample_cap = parse_optional(line, key, value)?,
            "reduce" => self.reduce = parse_optional(line, key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(ShellError::Config { line, message: format!("unknown key '{key}'") }),
        }
        Ok(())
    }

    fn set_experiment(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        let e = &mut self.experiment;
        match key {
            "n_train" => e.synthetic.n_train = parse_value(line, key, value)?,
            "n_val" => e.synthetic.n_val = parse_value(line, key, value)?,
            "n_ood" => e.synthetic.n_ood = parse_value(line, key, value)?,
            "d" => e.synthetic.d = parse_value(line, key, value)?,
            "label_shift" => e.synthetic.label_shift = parse_value(line, key, value)?,
            "noise_sd" => e.synthetic.noise_sd = parse_value(line, key, value)?,
            "model" => e.model.kind = parse_value::<ModelKind>(line, key, value)?,
            "hidden_widths" => {
                e.model.hidden_widths = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|w| parse_value(line, key, w.trim())).collect::<Result<_>>()?
                }
            }
            "learning_rate" => e.train.learning_rate = parse_value(line, key, value)?,
            "epochs" => e.train.epochs = parse_value(line, key, value)?,
            "models_per_group" => e.models_per_group = parse_value(line, key, value)?,
            "folds" => e.folds = parse_value(line, key, value)?,
            "adb_sample_size" => e.adb_sample_size = parse_value(line, key, value)?,
            "schedule_draw" => e.schedule_draw = parse_value(line, key, value)?,
            "subsample_cap" => e.subsample_cap = parse_optional(line, key, value)?,
            "replications" => self.replications = parse_value(line, key, value)?,
            _ => return Err(ShellError::Config { line, message: format!("unknown key '[experiment] {key}'") }),
        }
        Ok(())
    }

    /// Copies the shared scoring settings into the experiment block.
    pub fn sync_experiment(&mut self) {
        let e = &mut self.experiment;
        e.mode = self.mode;
        e.train.batch_size = self.batch_size;
        e.permutations = self.permutations;
        e.seed = self.seed;
        e.synthetic.seed = self.seed;
        e.epsilon = self.epsilon;
        e.q_low = self.q_low;
        e.q_high = self.q_high;
        match e.model.kind {
            ModelKind::Linear => e.model.hidden_widths.clear(),
            ModelKind::Mlp if e.model.hidden_widths.is_empty() => {
                e.model.hidden_widths = crate::harness::ModelSpec::default().hidden_widths
            }
            ModelKind::Mlp => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(ShellError::Config { line: 0, message: m });
        if self.batch_size == 0 {
            return invalid("batch_size must be positive".into());
        }
        if self.permutations < 2 {
            return invalid(format!("grouping needs at least 2 permutations, got {}", self.permutations));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return invalid(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(0.0 < self.q_low && self.q_low < self.q_high && self.q_high < 1.0) {
            return invalid(format!("need 0 < q_low < q_high < 1, got {} and {}", self.q_low, self.q_high));
        }
        if self.subsample_cap.is_some_and(|c| c < self.batch_size) {
            return invalid("subsample_cap must be at least batch_size".into());
        }
        if self.replications == 0 {
            return invalid("replications must be positive".into());
        }
        self.experiment.validate().map_err(|e| ShellError::Config { line: 0, message: e.to_string() })
    }

    /// Config text that parses back to this value.
    pub fn render(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |c| c.to_string());
        let e = &self.experiment;
        let widths: Vec<String> = e.model.hidden_widths.iter().map(|w| w.to_string()).collect();
        format!(
            "mode = {}\nbatch_size = {}\npermutations = {}\nseed = {}\nepsilon = {}\nq_low = {}\nq_high = {}\n\
             subsample_cap = {}\nreduce = {}\noutput_dir = {}\n\n[experiment]\nn_train = {}\nn_val = {}\n\
             n_ood = {}\nd = {}\nlabel_shift = {}\nnoise_sd = {}\nmodel = {}\nhidden_widths = {}\n\
             learning_rate = {}\nepochs = {}\nmodels_per_group = {}\nfolds = {}\nadb_sample_size = {}\n\
             schedule_draw = {}\nsubsample_cap = {}\nreplications = {}\n",
            self.mode,
            self.batch_size,
            self.permutations,
            self.seed,
            self.epsilon,
            self.q_low,
            self.q_high,
            opt(self.subsample_cap),
            opt(self.reduce),
            self.output_dir.display(),
            e.synthetic.n_train,
            e.synthetic.n_val,
            e.synthetic.n_ood,
            e.synthetic.d,
            e.synthetic.label_shift,
            e.synthetic.noise_sd,
            e.model.kind,
            widths.join(","),
            e.train.learning_rate,
            e.train.epochs,
            e.models_per_group,
            e.folds,
            e.adb_sample_size,
            e.schedule_draw,
            opt(e.subsample_cap),
            self.replications,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(RunConfig::parse("# nothing here\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn parses_both_sections() {
        let cfg = RunConfig::parse(
            "mode = cumulative  # trailing comment\nbatch_size = 25\nseed = 9\nsubsample_cap = 300\n\
             [experiment]\nmodel = mlp\nhidden_widths = 8, 4\nepochs = 5\nreplications = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.mode, ScoringMode::Cumulative);
        assert_eq!(cfg.subsample_cap, Some(300));
        assert_eq!(cfg.experiment.train.batch_size, 25);
        assert_eq!(cfg.experiment.seed, 9);
        assert_eq!(cfg.experiment.model.hidden_widths, vec![8, 4]);
        assert_eq!(cfg.experiment.train.epochs, 5);
        assert_eq!(cfg.replications, 3);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        for text in [
            "bogus = 1\n",
            "[experiment]\nmode = batchwise\n",
            "[other]\n",
            "batch_size 3\n",
            "batch_size = x\n",
            "seed = 1\nseed = 2\n",
            "q_low = 0.9\n",
            "mode = sideways\n",
        ] {
            assert!(RunConfig::parse(text).is_err(), "accepted {text:?}");
        }
        match RunConfig::parse("seed = 1\nbogus = 1\n").unwrap_err() {
            ShellError::Config { line, .. } => assert_eq!(line, 2),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn render_round_trips() {
        let mut cfg =
            RunConfig::parse("mode = cumulative\nreduce = 4\n[experiment]\nmodel = mlp\nhidden_widths = 16\n").unwrap();
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
        cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }
}
