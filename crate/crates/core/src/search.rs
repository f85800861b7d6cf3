//! Random hyperparameter search.
//!
//! Per series, `n_trials` configurations are sampled uniformly from the
//! search space and run; the trial with the best selection score wins the
//! series and contributes its test accuracy. The reported cell is the mean
//! and standard error of the series-best accuracies.

use crate::error::{Error, Result};
use crate::prng::derive_seed;
use crate::ranking::AccuracyCell;
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One searchable hyperparameter range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperRange {
    pub name: String,
    pub low: f64,
    pub high: f64,
    /// Sample on a log scale (both bounds must be positive).
    pub log_scale: bool,
    /// Round the sampled value to the nearest integer.
    pub integer: bool,
}

impl HyperRange {
    pub fn linear(name: &str, low: f64, high: f64) -> HyperRange {
        HyperRange { name: name.into(), low, high, log_scale: false, integer: false }
    }

    pub fn log(name: &str, low: f64, high: f64) -> HyperRange {
        HyperRange { name: name.into(), low, high, log_scale: true, integer: false }
    }

    fn validate(&self) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite() && self.low <= self.high) {
            return Err(Error::Config(format!(
                "range {}: [{}, {}] invalid",
                self.name, self.low, self.high
            )));
        }
        if self.log_scale && self.low <= 0.0 {
            return Err(Error::Config(format!(
                "range {}: log scale needs positive bounds",
                self.name
            )));
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let v = if self.low == self.high {
            self.low
        } else if self.log_scale {
            (rng.gen_range(self.low.ln()..self.high.ln())).exp()
        } else {
            rng.gen_range(self.low..self.high)
        };
        if self.integer {
            v.round()
        } else {
            v
        }
    }
}

/// The default search space over the four method hyperparameters.
pub fn default_w2d_space() -> Vec<HyperRange> {
    vec![
        HyperRange::linear("phi", 0.1, 0.4),
        HyperRange::linear("beta", 0.1, 0.3),
        HyperRange::linear("rho", 0.1, 0.5),
        HyperRange::linear("kappa", 0.2, 0.4),
    ]
}

/// One sampled configuration handed to the runner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialPoint {
    pub series: usize,
    pub trial: usize,
    /// Seed the runner should derive all run randomness from.
    pub seed: u64,
    pub values: IndexMap<String, f64>,
}

/// What a runner reports back for one trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialOutcome {
    /// Criterion value of the active model-selection strategy.
    pub selection_score: f64,
    /// Final test accuracy, percent.
    pub accuracy: f64,
    pub train_val_accuracy: Option<f64>,
    pub test_val_accuracy: Option<f64>,
    pub leave_one_out_accuracy: Option<f64>,
}

/// Persisted record of one trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub algorithm: String,
    pub dataset: String,
    pub series: usize,
    pub trial: usize,
    pub seed: u64,
    pub hyperparameters: IndexMap<String, f64>,
    pub train_val_accuracy: Option<f64>,
    pub test_val_accuracy: Option<f64>,
    pub leave_one_out_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub selection_score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub cell: AccuracyCell,
    pub records: Vec<TrialRecord>,
    /// Winning (trial index, accuracy) per series.
    pub best_per_series: Vec<(usize, f64)>,
}

/// Runs `n_series` series of `n_trials` uniformly sampled configurations.
/// Failed trials are recorded and skipped; a series with no surviving trial
/// aborts the search. The returned cell is the mean and standard error of
/// the per-series best accuracies (population standard deviation over
/// `sqrt(n_series)`).
pub fn random_search<F>(
    space: &[HyperRange],
    n_trials: usize,
    n_series: usize,
    master_seed: u64,
    algorithm: &str,
    dataset: &str,
    mut runner: F,
) -> Result<SearchResult>
where
    F: FnMut(&TrialPoint) -> Result<TrialOutcome>,
{
    if n_trials == 0 || n_series == 0 {
        return Err(Error::Config("n_trials and n_series must be positive".into()));
    }
    if space.is_empty() {
        return Err(Error::Config("empty search space".into()));
    }
    for r in space {
        r.validate()?;
    }
    let mut records = Vec::with_capacity(n_trials * n_series);
    let mut best_per_series = Vec::with_capacity(n_series);
    for series in 0..n_series {
        let mut best: Option<(usize, f64, f64)> = None; // (trial, score, accuracy)
        for trial in 0..n_trials {
            let pair = ((series as u64) << 32) | trial as u64;
            let mut rng = crate::prng::rng_from(master_seed, "search-sample", pair);
            let mut values = IndexMap::new();
            for range in space {
                values.insert(range.name.clone(), range.sample(&mut rng));
            }
            let point = TrialPoint {
                series,
                trial,
                seed: derive_seed(master_seed, "search-run", pair),
                values: values.clone(),
            };
            let mut record = TrialRecord {
                algorithm: algorithm.to_string(),
                dataset: dataset.to_string(),
                series,
                trial,
                seed: point.seed,
                hyperparameters: values,
                train_val_accuracy: None,
                test_val_accuracy: None,
                leave_one_out_accuracy: None,
                test_accuracy: None,
                selection_score: None,
                error: None,
            };
            match runner(&point) {
                Ok(outcome) => {
                    record.train_val_accuracy = outcome.train_val_accuracy;
                    record.test_val_accuracy = outcome.test_val_accuracy;
                    record.leave_one_out_accuracy = outcome.leave_one_out_accuracy;
                    record.test_accuracy = Some(outcome.accuracy);
                    record.selection_score = Some(outcome.selection_score);
                    let better = match best {
                        Some((_, score, _)) => outcome.selection_score > score,
                        None => true,
                    };
                    if better {
                        best = Some((trial, outcome.selection_score, outcome.accuracy));
                    }
                }
                Err(e) => record.error = Some(e.to_string()),
            }
            records.push(record);
        }
        let (trial, _, accuracy) = best.ok_or_else(|| {
            Error::Invalid(format!("series {series}: every trial failed"))
        })?;
        best_per_series.push((trial, accuracy));
    }
    let accs: Vec<f64> = best_per_series.iter().map(|(_, a)| *a).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64;
    let stderr = (var / accs.len() as f64).sqrt();
    Ok(SearchResult { cell: AccuracyCell::new(mean, stderr)?, records, best_per_series })
}
