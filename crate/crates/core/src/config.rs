//! Experiment configuration: flat `key = value` text with section prefixes
//! (`experiment.`, `dataset.`, `model.`, `train.`, `eval.`, `search.`).
//! Unknown and duplicate keys are hard errors. [`ExperimentConfig::emit`]
//! writes a canonical form that re-parses to an identical value.

use crate::error::{Error, Result};
use crate::eval::{AlgorithmChoice, SelectionStrategy};
use crate::search::HyperRange;
use crate::trainer::W2DConfig;
use crate::worstcase::ImportanceTarget;
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetConfig {
    Cmnist {
        n_source: usize,
        label_noise: f64,
        /// `(environment name, color flip probability)`, in order; the last
        /// environment defaults to the test role.
        envs: Vec<(String, f64)>,
    },
    TwoShift {
        diversity: f64,
        correlation: f64,
        n_per_env: usize,
    },
    /// Load a bundle saved by `generate-data` from this directory.
    Load { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: String,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub strategy: SelectionStrategy,
    /// Defaults to the bundle's test-role environment when absent.
    pub test_env: Option<String>,
    pub holdout_env: Option<String>,
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub enabled: bool,
    pub n_trials: usize,
    pub n_series: usize,
    pub space: Vec<HyperRange>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub algorithm: AlgorithmChoice,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    /// Training hyperparameters. The embedded seed is ignored; all run seeds
    /// derive from `seed` above.
    pub train: W2DConfig,
    pub eval: EvalConfig,
    pub search: SearchConfig,
}

fn fmt_envs(envs: &[(String, f64)]) -> String {
    envs.iter()
        .map(|(n, p)| format!("{n}:{p}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_space(space: &[HyperRange]) -> String {
    space
        .iter()
        .map(|r| {
            let mut s = format!("{}:{}:{}", r.name, r.low, r.high);
            if r.log_scale {
                s.push_str(":log");
            }
            if r.integer {
                s.push_str(":int");
            }
            s
        })
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Canonical text form.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("experiment.name", self.name.clone());
        kv("experiment.seed", self.seed.to_string());
        kv("experiment.algorithm", self.algorithm.name().to_string());
        kv("experiment.output_dir", self.output_dir.display().to_string());
        match &self.dataset {
            DatasetConfig::Cmnist { n_source, label_noise, envs } => {
                kv("dataset.kind", "cmnist".into());
                kv("dataset.n_source", n_source.to_string());
                kv("dataset.label_noise", label_noise.to_string());
                kv("dataset.envs", fmt_envs(envs));
            }
            DatasetConfig::TwoShift { diversity, correlation, n_per_env } => {
                kv("dataset.kind", "two_shift".into());
                kv("dataset.diversity", diversity.to_string());
                kv("dataset.correlation", correlation.to_string());
                kv("dataset.n_per_env", n_per_env.to_string());
            }
            DatasetConfig::Load { path } => {
                kv("dataset.kind", "load".into());
                kv("dataset.path", path.display().to_string());
            }
        }
        kv("model.arch", self.model.arch.clone());
        if !self.model.hidden.is_empty() {
            kv(
                "model.hidden",
                self.model
                    .hidden
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        kv("train.phi", self.train.phi.to_string());
        kv("train.beta", self.train.beta.to_string());
        kv("train.rho", self.train.rho.to_string());
        kv("train.kappa", self.train.kappa.to_string());
        kv("train.eta", self.train.eta.to_string());
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.learning_rate", self.train.learning_rate.to_string());
        kv("train.swa_enabled", self.train.swa_enabled.to_string());
        kv(
            "train.swa_start_fraction",
            self.train.swa_start_fraction.to_string(),
        );
        kv(
            "train.w2dstar_bias_epochs",
            self.train.w2dstar_bias_epochs.to_string(),
        );
        kv(
            "train.importance_target",
            match self.train.importance_target {
                ImportanceTarget::TrueClass => "true_class".into(),
                ImportanceTarget::PredictedClass => "predicted_class".into(),
            },
        );
        kv(
            "eval.strategy",
            match self.eval.strategy {
                SelectionStrategy::TrainDomain => "train_domain".into(),
                SelectionStrategy::TestDomain => "test_domain".into(),
                SelectionStrategy::LeaveOneOut => "leave_one_out".into(),
            },
        );
        if let Some(t) = &self.eval.test_env {
            kv("eval.test_env", t.clone());
        }
        if let Some(h) = &self.eval.holdout_env {
            kv("eval.holdout_env", h.clone());
        }
        kv(
            "eval.validation_fraction",
            self.eval.validation_fraction.to_string(),
        );
        kv("search.enabled", self.search.enabled.to_string());
        kv("search.n_trials", self.search.n_trials.to_string());
        kv("search.n_series", self.search.n_series.to_string());
        if !self.search.space.is_empty() {
            kv("search.space", fmt_space(&self.search.space));
        }
        out
    }

    /// Parses the `key = value` form. Unknown keys, duplicate keys, and
    /// malformed or out-of-range values are errors naming the field.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value: {line}", lineno + 1))
            })?;
            let key = k.trim().to_string();
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key {key}")));
            }
        }
        Self::from_map(map)
    }

    fn from_map(mut map: BTreeMap<String, String>) -> Result<ExperimentConfig> {
        fn take(map: &mut BTreeMap<String, String>, key: &str) -> Option<String> {
            map.remove(key)
        }
        fn parse_as<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse::<T>()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn req(map: &mut BTreeMap<String, String>, key: &str) -> Result<String> {
            take(map, key).ok_or_else(|| Error::Config(format!("missing key {key}")))
        }
        fn unit(key: &str, v: f64) -> Result<f64> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{key} = {v} outside [0, 1]")));
            }
            Ok(v)
        }

        let name = take(&mut map, "experiment.name").unwrap_or_else(|| "experiment".into());
        let seed: u64 = parse_as("experiment.seed", &req(&mut map, "experiment.seed")?)?;
        let algorithm = AlgorithmChoice::parse(&req(&mut map, "experiment.algorithm")?)?;
        let output_dir =
            PathBuf::from(take(&mut map, "experiment.output_dir").unwrap_or_else(|| "out".into()));

        let kind = req(&mut map, "dataset.kind")?;
        let dataset = match kind.as_str() {
            "cmnist" => {
                let n_source: usize = take(&mut map, "dataset.n_source")
                    .map(|v| parse_as("dataset.n_source", &v))
                    .transpose()?
                    .unwrap_or(12000);
                let label_noise = unit(
                    "dataset.label_noise",
                    take(&mut map, "dataset.label_noise")
                        .map(|v| parse_as("dataset.label_noise", &v))
                        .transpose()?
                        .unwrap_or(0.25),
                )?;
                let envs = match take(&mut map, "dataset.envs") {
                    None => crate::datasets::default_cmnist_envs(),
                    Some(v) => {
                        let mut envs = Vec::new();
                        for part in v.split(',') {
                            let (n, p) = part.split_once(':').ok_or_else(|| {
                                Error::Config(format!("dataset.envs: bad entry {part}"))
                            })?;
                            envs.push((
                                n.trim().to_string(),
                                unit("dataset.envs", parse_as("dataset.envs", p.trim())?)?,
                            ));
                        }
                        envs
                    }
                };
                DatasetConfig::Cmnist { n_source, label_noise, envs }
            }
            "two_shift" => DatasetConfig::TwoShift {
                diversity: unit(
                    "dataset.diversity",
                    parse_as("dataset.diversity", &req(&mut map, "dataset.diversity")?)?,
                )?,
                correlation: unit(
                    "dataset.correlation",
                    parse_as("dataset.correlation", &req(&mut map, "dataset.correlation")?)?,
                )?,
                n_per_env: parse_as("dataset.n_per_env", &req(&mut map, "dataset.n_per_env")?)?,
            },
            "load" => DatasetConfig::Load {
                path: PathBuf::from(req(&mut map, "dataset.path")?),
            },
            other => return Err(Error::Config(format!("dataset.kind: unknown kind {other}"))),
        };

        let arch = take(&mut map, "model.arch").unwrap_or_else(|| "mlp".into());
        let hidden = match take(&mut map, "model.hidden") {
            None => vec![128],
            Some(v) => v
                .split(',')
                .map(|s| parse_as::<usize>("model.hidden", s.trim()))
                .collect::<Result<_>>()?,
        };

        let mut train = W2DConfig { seed, ..W2DConfig::default() };
        if let Some(v) = take(&mut map, "train.phi") {
            train.phi = unit("train.phi", parse_as("train.phi", &v)?)?;
        }
        if let Some(v) = take(&mut map, "train.beta") {
            train.beta = unit("train.beta", parse_as("train.beta", &v)?)?;
        }
        if let Some(v) = take(&mut map, "train.rho") {
            train.rho = unit("train.rho", parse_as("train.rho", &v)?)?;
        }
        if let Some(v) = take(&mut map, "train.kappa") {
            train.kappa = unit("train.kappa", parse_as("train.kappa", &v)?)?;
        }
        if let Some(v) = take(&mut map, "train.eta") {
            train.eta = parse_as("train.eta", &v)?;
        }
        if let Some(v) = take(&mut map, "train.epochs") {
            train.epochs = parse_as("train.epochs", &v)?;
        }
        if let Some(v) = take(&mut map, "train.learning_rate") {
            train.learning_rate = parse_as("train.learning_rate", &v)?;
        }
        if let Some(v) = take(&mut map, "train.swa_enabled") {
            train.swa_enabled = parse_as("train.swa_enabled", &v)?;
        }
        if let Some(v) = take(&mut map, "train.swa_start_fraction") {
            train.swa_start_fraction =
                unit("train.swa_start_fraction", parse_as("train.swa_start_fraction", &v)?)?;
        }
        if let Some(v) = take(&mut map, "train.w2dstar_bias_epochs") {
            train.w2dstar_bias_epochs = parse_as("train.w2dstar_bias_epochs", &v)?;
        }
        if let Some(v) = take(&mut map, "train.importance_target") {
            train.importance_target = match v.as_str() {
                "true_class" => ImportanceTarget::TrueClass,
                "predicted_class" => ImportanceTarget::PredictedClass,
                other => {
                    return Err(Error::Config(format!(
                        "train.importance_target: unknown value {other}"
                    )))
                }
            };
        }

        let strategy = match take(&mut map, "eval.strategy").as_deref() {
            None | Some("train_domain") => SelectionStrategy::TrainDomain,
            Some("test_domain") => SelectionStrategy::TestDomain,
            Some("leave_one_out") => SelectionStrategy::LeaveOneOut,
            Some(other) => {
                return Err(Error::Config(format!("eval.strategy: unknown value {other}")))
            }
        };
        let eval = EvalConfig {
            strategy,
            test_env: take(&mut map, "eval.test_env"),
            holdout_env: take(&mut map, "eval.holdout_env"),
            validation_fraction: {
                let v = take(&mut map, "eval.validation_fraction")
                    .map(|v| parse_as("eval.validation_fraction", &v))
                    .transpose()?
                    .unwrap_or(0.2);
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::Config(format!(
                        "eval.validation_fraction = {v} outside (0, 1)"
                    )));
                }
                v
            },
        };

        let search = SearchConfig {
            enabled: take(&mut map, "search.enabled")
                .map(|v| parse_as("search.enabled", &v))
                .transpose()?
                .unwrap_or(false),
            n_trials: take(&mut map, "search.n_trials")
                .map(|v| parse_as("search.n_trials", &v))
                .transpose()?
                .unwrap_or(20),
            n_series: take(&mut map, "search.n_series")
                .map(|v| parse_as("search.n_series", &v))
                .transpose()?
                .unwrap_or(3),
            space: match take(&mut map, "search.space") {
                None => crate::search::default_w2d_space(),
                Some(v) => {
                    let mut space = Vec::new();
                    for part in v.split(',') {
                        let fields: Vec<&str> = part.split(':').collect();
                        if fields.len() < 3 {
                            return Err(Error::Config(format!(
                                "search.space: want name:low:high, got {part}"
                            )));
                        }
                        let mut range = HyperRange::linear(
                            fields[0].trim(),
                            parse_as("search.space", fields[1].trim())?,
                            parse_as("search.space", fields[2].trim())?,
                        );
                        for flag in &fields[3..] {
                            match flag.trim() {
                                "log" => range.log_scale = true,
                                "int" => range.integer = true,
                                other => {
                                    return Err(Error::Config(format!(
                                        "search.space: unknown flag {other}"
                                    )))
                                }
                            }
                        }
                        space.push(range);
                    }
                    space
                }
            },
        };

        if let Some((key, _)) = map.into_iter().next() {
            return Err(Error::Config(format!("unknown key {key}")));
        }

        let config = ExperimentConfig {
            name,
            seed,
            algorithm,
            output_dir,
            dataset,
            model: ModelConfig { arch, hidden },
            train,
            eval,
            search,
        };
        config.validate()?;
        Ok(config)
    }

    /// Field-level validation beyond parsing.
    pub fn validate(&self) -> Result<()> {
        if self.train.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if self.train.eta == 0 {
            return Err(Error::Config("train.eta must be positive".into()));
        }
        if !(self.train.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        match &self.dataset {
            DatasetConfig::Cmnist { n_source, envs, .. } => {
                if envs.is_empty() {
                    return Err(Error::Config("dataset.envs must not be empty".into()));
                }
                if *n_source < envs.len() {
                    return Err(Error::Config("dataset.n_source too small".into()));
                }
            }
            DatasetConfig::TwoShift { n_per_env, .. } => {
                if *n_per_env == 0 {
                    return Err(Error::Config("dataset.n_per_env must be positive".into()));
                }
            }
            DatasetConfig::Load { .. } => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExperimentConfig {
        ExperimentConfig {
            name: "demo".into(),
            seed: 42,
            algorithm: AlgorithmChoice::W2d,
            output_dir: PathBuf::from("out/demo"),
            dataset: DatasetConfig::Cmnist {
                n_source: 600,
                label_noise: 0.25,
                envs: crate::datasets::default_cmnist_envs(),
            },
            model: ModelConfig { arch: "mlp".into(), hidden: vec![64, 32] },
            train: W2DConfig { seed: 42, ..W2DConfig::default() },
            eval: EvalConfig {
                strategy: SelectionStrategy::TestDomain,
                test_env: Some("-90".into()),
                holdout_env: None,
                validation_fraction: 0.2,
            },
            search: SearchConfig {
                enabled: false,
                n_trials: 20,
                n_series: 3,
                space: crate::search::default_w2d_space(),
            },
        }
    }

    #[test]
    fn emit_parse_round_trip() {
        let config = sample();
        let text = config.emit();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(config, back);
        // a second emit is byte-identical
        assert_eq!(text, back.emit());
    }

    #[test]
    fn unknown_and_duplicate_keys_are_errors() {
        let mut text = sample().emit();
        text.push_str("train.warmup = 3\n");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("train.warmup"));

        let dup = "experiment.seed = 1\nexperiment.seed = 2\nexperiment.algorithm = erm\ndataset.kind = two_shift\ndataset.diversity = 0\ndataset.correlation = 0\ndataset.n_per_env = 10\n";
        assert!(ExperimentConfig::parse(dup).is_err());
    }

    #[test]
    fn out_of_range_value_names_the_field() {
        let mut text = sample().emit();
        text = text.replace("train.kappa = 0.3", "train.kappa = 1.5");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("train.kappa"), "got: {err}");
    }

    #[test]
    fn defaults_fill_in() {
        let minimal = "experiment.seed = 7\nexperiment.algorithm = erm\ndataset.kind = two_shift\ndataset.diversity = 0.1\ndataset.correlation = 0.9\ndataset.n_per_env = 100\n";
        let config = ExperimentConfig::parse(minimal).unwrap();
        assert_eq!(config.train.eta, 128);
        assert_eq!(config.search.n_trials, 20);
        assert_eq!(config.search.n_series, 3);
        assert_eq!(config.model.arch, "mlp");
        assert_eq!(config.eval.validation_fraction, 0.2);
        assert_eq!(config.train.seed, 7);
    }
}
