//! Accuracy evaluation, model-selection strategies, and the end-to-end run
//! protocol that ties datasets, training, selection, and the final test
//! number together.

use crate::datasets::{split_environment, DatasetBundle, Role, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{Batch, Model, ModelSpec};
use crate::tensor::Tensor;
use crate::trainer::{
    train, train_w2d_star, Algorithm, EvalSet, TrainHistory, W2DConfig,
};
use serde::{Deserialize, Serialize};

/// Argmax-accuracy of the model on a labeled set, in percent. Ties between
/// logits resolve to the lowest class index.
pub fn evaluate_accuracy(model: &Model, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let classes = model.spec.classes;
    let mut correct = 0usize;
    let chunk = 256usize;
    let n = batch.len();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let part = batch.gather(&rows)?;
        let out = model.forward(&part.inputs, None)?;
        for (i, &label) in part.labels.iter().enumerate() {
            let row = &out.logits.data()[i * classes..(i + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (j, &v)| {
                    if v > bv { (j, v) } else { (bi, bv) }
                })
                .0;
            if pred == label {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64 * 100.0)
}

/// The three model-selection strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Maximize accuracy on the union of the training-environment
    /// validation splits.
    TrainDomain,
    /// Maximize accuracy on a validation set drawn from the test
    /// distribution.
    TestDomain,
    /// Maximize accuracy on a held-out training environment.
    LeaveOneOut,
}

/// One checkpoint's accuracies under the selection criteria.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub id: usize,
    pub train_val: Option<f64>,
    pub test_val: Option<f64>,
    pub leave_one_out: Option<f64>,
}

/// Argmax over checkpoints of the strategy's criterion; ties go to the
/// earliest checkpoint. Returns the checkpoint id.
pub fn select_model(traces: &[CheckpointEval], strategy: SelectionStrategy) -> Result<usize> {
    if traces.is_empty() {
        return Err(Error::Empty("no checkpoints to select from".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for t in traces {
        let v = match strategy {
            SelectionStrategy::TrainDomain => t.train_val,
            SelectionStrategy::TestDomain => t.test_val,
            SelectionStrategy::LeaveOneOut => t.leave_one_out,
        }
        .ok_or_else(|| {
            Error::Invalid(format!(
                "checkpoint {} lacks the accuracy field for {strategy:?}",
                t.id
            ))
        })?;
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((t.id, v)),
        }
    }
    Ok(best.expect("nonempty traces").0)
}

/// How a full run turns a dataset bundle into one reported number.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolOptions {
    pub split: SplitSpec,
    pub strategy: SelectionStrategy,
    /// Name of the environment playing the test distribution.
    pub test_env: String,
    /// Training environment held out of training for leave-one-out
    /// validation. With two training environments this is single-holdout.
    pub holdout_env: Option<String>,
}

/// Which training procedure a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmChoice {
    Erm,
    FeatureOnly,
    SampleOnly,
    W2d,
    W2dStar,
}

impl AlgorithmChoice {
    pub fn parse(s: &str) -> Result<AlgorithmChoice> {
        match s {
            "erm" => Ok(AlgorithmChoice::Erm),
            "feature_only" => Ok(AlgorithmChoice::FeatureOnly),
            "sample_only" => Ok(AlgorithmChoice::SampleOnly),
            "w2d" => Ok(AlgorithmChoice::W2d),
            "w2d_star" => Ok(AlgorithmChoice::W2dStar),
            other => Err(Error::Config(format!("unknown algorithm {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmChoice::Erm => "erm",
            AlgorithmChoice::FeatureOnly => "feature_only",
            AlgorithmChoice::SampleOnly => "sample_only",
            AlgorithmChoice::W2d => "w2d",
            AlgorithmChoice::W2dStar => "w2d_star",
        }
    }
}

/// Outcome of one protocol run.
#[derive(Debug)]
pub struct RunOutcome {
    pub model: Model,
    pub history: TrainHistory,
    pub traces: Vec<CheckpointEval>,
    pub chosen_epoch: usize,
    /// Criterion value at the chosen epoch.
    pub selection_score: f64,
    /// Accuracy on the held-back part of the test environment at the chosen
    /// epoch, in percent.
    pub test_accuracy: f64,
    /// The training set the run used (for sample export).
    pub train_set: Batch,
}

fn concat_batches(parts: &[Batch]) -> Result<Batch> {
    if parts.is_empty() {
        return Err(Error::Empty("no batches to concatenate".into()));
    }
    let tail = &parts[0].inputs.shape()[1..];
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        if &p.inputs.shape()[1..] != tail {
            return Err(Error::Shape("environment shapes differ".into()));
        }
        data.extend_from_slice(p.inputs.data());
        labels.extend_from_slice(&p.labels);
    }
    let mut shape = vec![labels.len()];
    shape.extend_from_slice(tail);
    Batch::new(Tensor::new(shape, data)?, labels)
}

const TRAIN_VAL: &str = "train_val";
const TEST_VAL: &str = "test_val";
const HOLDOUT: &str = "holdout";
const TEST: &str = "test";

/// Runs the full protocol: split each training environment into train and
/// validation parts, split the test environment into a validation part and a
/// held-back test part, train with per-epoch accuracy traces, pick the epoch
/// by the selection strategy, and report that epoch's test accuracy.
pub fn run_protocol(
    spec: &ModelSpec,
    bundle: &DatasetBundle,
    algorithm: AlgorithmChoice,
    config: &W2DConfig,
    opts: &ProtocolOptions,
) -> Result<RunOutcome> {
    let test_env = bundle
        .environment(&opts.test_env)
        .ok_or_else(|| Error::Config(format!("test environment {} not found", opts.test_env)))?;
    let mut train_parts = Vec::new();
    let mut val_parts = Vec::new();
    let mut holdout_part: Option<Batch> = None;
    for env in &bundle.environments {
        if env.name == opts.test_env {
            continue;
        }
        if bundle.role(&env.name) != Some(Role::Train) {
            continue;
        }
        if Some(&env.name) == opts.holdout_env.as_ref() {
            holdout_part = Some(env.as_batch()?);
            continue;
        }
        let (tr, val) = split_environment(env, &opts.split)?;
        train_parts.push(tr.as_batch()?);
        val_parts.push(val.as_batch()?);
    }
    if train_parts.is_empty() {
        return Err(Error::Config("no training environments left".into()));
    }
    if opts.holdout_env.is_some() && holdout_part.is_none() {
        return Err(Error::Config(format!(
            "holdout environment {:?} not found among training environments",
            opts.holdout_env
        )));
    }
    let (test_hold, test_val) = split_environment(test_env, &opts.split)?;
    let train_set = concat_batches(&train_parts)?;

    let mut evals = vec![
        EvalSet { name: TRAIN_VAL.into(), batch: concat_batches(&val_parts)? },
        EvalSet { name: TEST_VAL.into(), batch: test_val.as_batch()? },
        EvalSet { name: TEST.into(), batch: test_hold.as_batch()? },
    ];
    if let Some(h) = holdout_part {
        evals.push(EvalSet { name: HOLDOUT.into(), batch: h });
    }

    let (model, history) = match algorithm {
        AlgorithmChoice::W2dStar => {
            let out = train_w2d_star(spec, &train_set, &evals, config)?;
            (out.model, out.history)
        }
        other => {
            let algo = match other {
                AlgorithmChoice::Erm => Algorithm::Erm,
                AlgorithmChoice::FeatureOnly => Algorithm::FeatureOnly,
                AlgorithmChoice::SampleOnly => Algorithm::SampleOnly,
                AlgorithmChoice::W2d => Algorithm::W2d,
                AlgorithmChoice::W2dStar => unreachable!(),
            };
            let out = train(algo, spec, &train_set, &evals, config)?;
            (out.model, out.history)
        }
    };

    let traces: Vec<CheckpointEval> = history
        .epochs
        .iter()
        .map(|e| {
            let find = |name: &str| e.evals.iter().find(|(n, _)| n == name).map(|(_, v)| *v);
            CheckpointEval {
                id: e.epoch,
                train_val: find(TRAIN_VAL),
                test_val: find(TEST_VAL),
                leave_one_out: find(HOLDOUT),
            }
        })
        .collect();
    let chosen_epoch = select_model(&traces, opts.strategy)?;
    let chosen = traces
        .iter()
        .find(|t| t.id == chosen_epoch)
        .expect("chosen id comes from traces");
    let selection_score = match opts.strategy {
        SelectionStrategy::TrainDomain => chosen.train_val,
        SelectionStrategy::TestDomain => chosen.test_val,
        SelectionStrategy::LeaveOneOut => chosen.leave_one_out,
    }
    .expect("select_model verified the field");
    let test_accuracy = history
        .epochs
        .iter()
        .find(|e| e.epoch == chosen_epoch)
        .and_then(|e| e.evals.iter().find(|(n, _)| n == TEST).map(|(_, v)| *v))
        .ok_or_else(|| Error::Invalid("test trace missing".into()))?;

    Ok(RunOutcome {
        model,
        history,
        traces,
        chosen_epoch,
        selection_score,
        test_accuracy,
        train_set,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn oracle_and_constant_predictors() {
        // hand-build a linear model that classifies x[0] > 0 perfectly
        let spec = ModelSpec::linear(vec![1], 2);
        let mut m = build_model(&spec, 0).unwrap();
        m.params.get_mut("dec.0.w").unwrap().value =
            Tensor::new(vec![1, 2], vec![-1.0, 1.0]).unwrap();
        m.params.get_mut("dec.0.b").unwrap().value = Tensor::zeros(vec![2]);
        let batch = Batch::new(
            Tensor::new(vec![4, 1], vec![-2.0, -1.0, 1.0, 2.0]).unwrap(),
            vec![0, 0, 1, 1],
        )
        .unwrap();
        assert_eq!(evaluate_accuracy(&m, &batch).unwrap(), 100.0);

        // constant predictor on a balanced set scores 50
        m.params.get_mut("dec.0.w").unwrap().value = Tensor::zeros(vec![1, 2]);
        assert_eq!(evaluate_accuracy(&m, &batch).unwrap(), 50.0);

        let empty = Batch { inputs: Tensor::zeros(vec![1, 1]), labels: vec![] };
        assert!(evaluate_accuracy(&m, &empty).is_err());
    }

    #[test]
    fn selection_strategies_argmax_with_tie_rule() {
        let traces = vec![
            CheckpointEval { id: 0, train_val: Some(60.0), test_val: Some(50.0), leave_one_out: None },
            CheckpointEval { id: 1, train_val: Some(70.0), test_val: Some(55.0), leave_one_out: None },
            CheckpointEval { id: 2, train_val: Some(65.0), test_val: Some(80.0), leave_one_out: None },
        ];
        assert_eq!(select_model(&traces, SelectionStrategy::TrainDomain).unwrap(), 1);
        assert_eq!(select_model(&traces, SelectionStrategy::TestDomain).unwrap(), 2);
        assert!(select_model(&traces, SelectionStrategy::LeaveOneOut).is_err());

        let flat = vec![
            CheckpointEval { id: 0, train_val: Some(50.0), test_val: None, leave_one_out: None },
            CheckpointEval { id: 1, train_val: Some(50.0), test_val: None, leave_one_out: None },
        ];
        assert_eq!(select_model(&flat, SelectionStrategy::TrainDomain).unwrap(), 0);
    }

    #[test]
    fn constant_shift_does_not_change_selection() {
        let base = vec![
            CheckpointEval { id: 0, train_val: Some(10.0), test_val: None, leave_one_out: None },
            CheckpointEval { id: 1, train_val: Some(30.0), test_val: None, leave_one_out: None },
            CheckpointEval { id: 2, train_val: Some(20.0), test_val: None, leave_one_out: None },
        ];
        let shifted: Vec<CheckpointEval> = base
            .iter()
            .map(|t| CheckpointEval {
                id: t.id,
                train_val: t.train_val.map(|v| v + 17.5),
                test_val: None,
                leave_one_out: None,
            })
            .collect();
        assert_eq!(
            select_model(&base, SelectionStrategy::TrainDomain).unwrap(),
            select_model(&shifted, SelectionStrategy::TrainDomain).unwrap()
        );
    }
}
