//! End-to-end experiment execution: generate or load the dataset, run the
//! training or search pipeline, select, evaluate, and persist results.

use crate::bundleio::{load_bundle, save_bundle};
use crate::checkpoint::save_model;
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::datasets::{generate_cmnist, generate_two_shift, synth_digits, DatasetBundle, Role};
use crate::error::{Error, Result};
use crate::eval::{run_protocol, ProtocolOptions, SelectionStrategy};
use crate::model::ModelSpec;
use crate::prng::derive_seed;
use crate::ranking::AccuracyCell;
use crate::search::{random_search, TrialOutcome, TrialPoint, TrialRecord};
use crate::trainer::{save_history, W2DConfig};
use indexmap::IndexMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Environment variable overriding the directory that `dataset.kind = load`
/// paths resolve against, and that `generate-data` writes into.
pub const DATA_DIR_ENV: &str = "W2D_DATA_DIR";

/// Resolves a dataset path against the data-directory override.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => PathBuf::from(dir).join(path),
        None => path.to_path_buf(),
    }
}

/// Materializes the configured dataset.
pub fn build_dataset(config: &ExperimentConfig) -> Result<DatasetBundle> {
    let seed = derive_seed(config.seed, "dataset", 0);
    match &config.dataset {
        DatasetConfig::Cmnist { n_source, label_noise, envs } => {
            let source = synth_digits(*n_source, derive_seed(config.seed, "digits", 0))?;
            generate_cmnist(&source, seed, *label_noise, envs)
        }
        DatasetConfig::TwoShift { diversity, correlation, n_per_env } => {
            generate_two_shift(seed, *diversity, *correlation, *n_per_env)
        }
        DatasetConfig::Load { path } => load_bundle(&resolve_data_path(path)),
    }
}

/// Generates the configured dataset and saves it under `dir`.
pub fn generate_data(config: &ExperimentConfig, dir: &Path) -> Result<DatasetBundle> {
    if matches!(config.dataset, DatasetConfig::Load { .. }) {
        return Err(Error::Config(
            "dataset.kind = load does not generate anything".into(),
        ));
    }
    let bundle = build_dataset(config)?;
    save_bundle(&bundle, &resolve_data_path(dir))?;
    Ok(bundle)
}

fn model_spec_for(config: &ExperimentConfig, bundle: &DatasetBundle) -> Result<ModelSpec> {
    let env = bundle
        .environments
        .first()
        .ok_or_else(|| Error::Empty("bundle has no environments".into()))?;
    let input_shape = env.inputs.shape()[1..].to_vec();
    let classes = env.labels.iter().copied().max().unwrap_or(0) + 1;
    ModelSpec::by_name(&config.model.arch, input_shape, classes.max(2), &config.model.hidden)
}

fn protocol_options(config: &ExperimentConfig, bundle: &DatasetBundle) -> Result<ProtocolOptions> {
    let test_env = match &config.eval.test_env {
        Some(t) => t.clone(),
        None => bundle
            .environments
            .iter()
            .find(|e| bundle.role(&e.name) == Some(Role::Test))
            .map(|e| e.name.clone())
            .ok_or_else(|| Error::Config("bundle has no test environment".into()))?,
    };
    Ok(ProtocolOptions {
        split: crate::datasets::SplitSpec {
            validation_fraction: config.eval.validation_fraction,
            seed: derive_seed(config.seed, "split", 0),
        },
        strategy: config.eval.strategy,
        test_env,
        holdout_env: config.eval.holdout_env.clone(),
    })
}

/// The persisted outcome of [`run_experiment`].
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub cell: AccuracyCell,
    pub records: Vec<TrialRecord>,
    pub results_path: PathBuf,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_results(
    path: &Path,
    config: &ExperimentConfig,
    records: &[TrialRecord],
    summary: Option<&AccuracyCell>,
    failure: Option<&str>,
) -> Result<()> {
    let mut out = String::new();
    out.push_str("# w2d results 1\n");
    out.push_str(&format!("# timestamp = {}\n", now_unix()));
    out.push_str(&format!("# version = {}\n", env!("CARGO_PKG_VERSION")));
    out.push_str("[config]\n");
    out.push_str(&config.emit());
    out.push_str("[trials]\n");
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?);
        out.push('\n');
    }
    match (summary, failure) {
        (Some(cell), None) => {
            out.push_str("[summary]\n");
            out.push_str(&format!("mean = {}\n", cell.mean));
            out.push_str(&format!("stderr = {}\n", cell.stderr));
        }
        (_, Some(msg)) => {
            out.push_str("[failure]\n");
            out.push_str(msg);
            out.push('\n');
        }
        (None, None) => {}
    }
    fs::write(path, out)?;
    Ok(())
}

/// A parsed results file.
#[derive(Debug)]
pub struct ResultsFile {
    pub config: ExperimentConfig,
    pub records: Vec<TrialRecord>,
    pub summary: Option<AccuracyCell>,
    pub failure: Option<String>,
}

pub fn read_results(path: &Path) -> Result<ResultsFile> {
    let text = fs::read_to_string(path)?;
    let mut config_text = String::new();
    let mut records = Vec::new();
    let mut summary_mean = None;
    let mut summary_stderr = None;
    let mut failure: Option<String> = None;
    #[derive(PartialEq)]
    enum Section {
        Head,
        Config,
        Trials,
        Summary,
        Failure,
    }
    let mut section = Section::Head;
    for line in text.lines() {
        match line.trim() {
            "[config]" => {
                section = Section::Config;
                continue;
            }
            "[trials]" => {
                section = Section::Trials;
                continue;
            }
            "[summary]" => {
                section = Section::Summary;
                continue;
            }
            "[failure]" => {
                section = Section::Failure;
                failure = Some(String::new());
                continue;
            }
            _ => {}
        }
        match section {
            Section::Head => {}
            Section::Config => {
                config_text.push_str(line);
                config_text.push('\n');
            }
            Section::Trials => {
                if !line.trim().is_empty() {
                    records.push(
                        serde_json::from_str(line).map_err(|e| Error::Parse(e.to_string()))?,
                    );
                }
            }
            Section::Summary => {
                if let Some((k, v)) = line.split_once('=') {
                    match k.trim() {
                        "mean" => summary_mean = Some(v.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad mean {v}")))?),
                        "stderr" => summary_stderr = Some(v.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad stderr {v}")))?),
                        _ => {}
                    }
                }
            }
            Section::Failure => {
                let f = failure.as_mut().expect("set on section entry");
                f.push_str(line);
                f.push('\n');
            }
        }
    }
    let config = ExperimentConfig::parse(&config_text)?;
    let summary = match (summary_mean, summary_stderr) {
        (Some(m), Some(s)) => Some(AccuracyCell::new(m, s)?),
        _ => None,
    };
    Ok(ResultsFile { config, records, summary, failure })
}

fn apply_point(base: &W2DConfig, point: &TrialPoint) -> Result<W2DConfig> {
    let mut cfg = base.clone();
    cfg.seed = point.seed;
    for (name, value) in &point.values {
        match name.as_str() {
            "phi" => cfg.phi = *value,
            "beta" => cfg.beta = *value,
            "rho" => cfg.rho = *value,
            "kappa" => cfg.kappa = *value,
            "learning_rate" => cfg.learning_rate = *value,
            "epochs" => cfg.epochs = *value as usize,
            "eta" => cfg.eta = *value as usize,
            other => {
                return Err(Error::Config(format!(
                    "search.space: {other} is not a tunable hyperparameter"
                )))
            }
        }
    }
    Ok(cfg)
}

/// Extra per-invocation behavior that is not part of the configuration.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Export the k most frequently selected training samples (single runs).
    pub export_worst: Option<usize>,
}

/// Runs the configured experiment and writes `results.txt` (plus, for single
/// runs, `history.jsonl` and `model.ckpt`) under the output directory. On a
/// runtime failure the partial results are preserved with a failure marker.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment_with(config, &RunOptions::default())
}

pub fn run_experiment_with(
    config: &ExperimentConfig,
    options: &RunOptions,
) -> Result<ExperimentOutcome> {
    fs::create_dir_all(&config.output_dir)?;
    let results_path = config.output_dir.join("results.txt");
    match run_inner(config, options) {
        Ok((cell, records)) => {
            write_results(&results_path, config, &records, Some(&cell), None)?;
            Ok(ExperimentOutcome { cell, records, results_path })
        }
        Err(e) => {
            let _ = write_results(&results_path, config, &[], None, Some(&e.to_string()));
            Err(e)
        }
    }
}

fn run_inner(
    config: &ExperimentConfig,
    options: &RunOptions,
) -> Result<(AccuracyCell, Vec<TrialRecord>)> {
    let bundle = build_dataset(config)?;
    let spec = model_spec_for(config, &bundle)?;
    let opts = protocol_options(config, &bundle)?;
    let dataset_id = match &config.dataset {
        DatasetConfig::Cmnist { .. } => "cmnist".to_string(),
        DatasetConfig::TwoShift { .. } => "two_shift".to_string(),
        DatasetConfig::Load { path } => path.display().to_string(),
    };

    if config.search.enabled {
        let result = random_search(
            &config.search.space,
            config.search.n_trials,
            config.search.n_series,
            config.seed,
            config.algorithm.name(),
            &dataset_id,
            |point| {
                let cfg = apply_point(&config.train, point)?;
                let outcome = run_protocol(&spec, &bundle, config.algorithm, &cfg, &opts)?;
                Ok(trial_outcome_of(&outcome, opts.strategy))
            },
        )?;
        return Ok((result.cell, result.records));
    }

    let mut cfg = config.train.clone();
    cfg.seed = derive_seed(config.seed, "run", 0);
    let outcome = run_protocol(&spec, &bundle, config.algorithm, &cfg, &opts)?;
    save_history(&outcome.history, &config.output_dir.join("history.jsonl"))?;
    save_model(&outcome.model, &config.output_dir.join("model.ckpt"))?;
    if let Some(k) = options.export_worst {
        crate::export::export_worst_samples(
            &outcome.history,
            &outcome.train_set,
            k,
            &config.output_dir.join("worst"),
        )?;
    }
    let to = trial_outcome_of(&outcome, opts.strategy);
    let record = TrialRecord {
        algorithm: config.algorithm.name().to_string(),
        dataset: dataset_id,
        series: 0,
        trial: 0,
        seed: cfg.seed,
        hyperparameters: IndexMap::from([
            ("phi".to_string(), cfg.phi),
            ("beta".to_string(), cfg.beta),
            ("rho".to_string(), cfg.rho),
            ("kappa".to_string(), cfg.kappa),
            ("learning_rate".to_string(), cfg.learning_rate),
            ("epochs".to_string(), cfg.epochs as f64),
            ("eta".to_string(), cfg.eta as f64),
        ]),
        train_val_accuracy: to.train_val_accuracy,
        test_val_accuracy: to.test_val_accuracy,
        leave_one_out_accuracy: to.leave_one_out_accuracy,
        test_accuracy: Some(to.accuracy),
        selection_score: Some(to.selection_score),
        error: None,
    };
    Ok((AccuracyCell::new(to.accuracy, 0.0)?, vec![record]))
}

fn trial_outcome_of(
    outcome: &crate::eval::RunOutcome,
    _strategy: SelectionStrategy,
) -> TrialOutcome {
    let chosen = outcome
        .traces
        .iter()
        .find(|t| t.id == outcome.chosen_epoch)
        .expect("chosen epoch in traces");
    TrialOutcome {
        selection_score: outcome.selection_score,
        accuracy: outcome.test_accuracy,
        train_val_accuracy: chosen.train_val,
        test_val_accuracy: chosen.test_val,
        leave_one_out_accuracy: chosen.leave_one_out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EvalConfig, ModelConfig, SearchConfig};
    use crate::eval::AlgorithmChoice;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            name: "smoke".into(),
            seed: 3,
            algorithm: AlgorithmChoice::Erm,
            output_dir: dir.to_path_buf(),
            dataset: DatasetConfig::TwoShift { diversity: 0.0, correlation: 0.5, n_per_env: 120 },
            model: ModelConfig { arch: "mlp".into(), hidden: vec![8] },
            train: W2DConfig { eta: 16, epochs: 2, learning_rate: 0.05, seed: 3, ..W2DConfig::default() },
            eval: EvalConfig {
                strategy: SelectionStrategy::TestDomain,
                test_env: None,
                holdout_env: None,
                validation_fraction: 0.25,
            },
            search: SearchConfig {
                enabled: false,
                n_trials: 2,
                n_series: 1,
                space: crate::search::default_w2d_space(),
            },
        }
    }

    #[test]
    fn smoke_run_writes_results_history_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        let out = run_experiment(&config).unwrap();
        assert_eq!(out.records.len(), 1);
        assert!(out.results_path.exists());
        assert!(dir.path().join("history.jsonl").exists());
        assert!(dir.path().join("model.ckpt").exists());
        let parsed = read_results(&out.results_path).unwrap();
        assert_eq!(parsed.config, config); // header round-trips
        assert_eq!(parsed.records.len(), 1);
        assert!(parsed.summary.is_some());
        assert!(parsed.failure.is_none());
    }

    #[test]
    fn identical_runs_produce_identical_trial_streams() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut ca = tiny_config(dir_a.path());
        let mut cb = tiny_config(dir_b.path());
        ca.output_dir = dir_a.path().to_path_buf();
        cb.output_dir = dir_b.path().to_path_buf();
        run_experiment(&ca).unwrap();
        run_experiment(&cb).unwrap();
        let lines = |p: &Path| -> Vec<String> {
            fs::read_to_string(p.join("results.txt"))
                .unwrap()
                .lines()
                .filter(|l| !l.starts_with("# timestamp"))
                .filter(|l| !l.contains("output_dir")) // differs by tempdir
                .map(str::to_string)
                .collect()
        };
        assert_eq!(lines(dir_a.path()), lines(dir_b.path()));
    }

    #[test]
    fn search_mode_counts_trials() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path());
        config.search.enabled = true;
        config.search.n_trials = 2;
        config.search.n_series = 2;
        config.dataset = DatasetConfig::TwoShift { diversity: 0.0, correlation: 0.5, n_per_env: 80 };
        config.train.eta = 16;
        config.train.epochs = 1;
        let out = run_experiment(&config).unwrap();
        assert_eq!(out.records.len(), 4);
        assert!(out.records.iter().all(|r| r.error.is_none()));
    }

    #[test]
    fn failure_preserves_partial_results_with_marker() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path());
        // eta larger than the training split: trainer rejects it at runtime
        config.train.eta = 100_000;
        let err = run_experiment(&config);
        assert!(err.is_err());
        let parsed = read_results(&dir.path().join("results.txt")).unwrap();
        assert!(parsed.failure.is_some());
        assert!(parsed.summary.is_none());
    }
}
