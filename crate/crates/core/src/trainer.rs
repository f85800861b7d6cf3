//! The integrated worst-case training loop and its reductions.
//!
//! One step does: a single taped forward over the batch; top-loss selection
//! of `ceil(eta * rho)` samples; per-sample feature masks (dropping the
//! `ceil(phi * d)` highest-gradient features) for a seeded `beta` fraction of
//! the selection; one SGD update from the mean loss over the selected,
//! possibly masked, samples. During the final `kappa` fraction of epochs the
//! selection widens to the whole batch while the masking treatment stays.
//!
//! ERM, feature-only, and sample-only training are exact parameter forcings
//! of the same code path (`rho = 1`, `beta = 0`, or both), which is what
//! makes the bitwise reduction guarantees hold.

use crate::error::{Error, Result};
use crate::eval::evaluate_accuracy;
use crate::model::{build_model, Batch, Model, ModelSpec};
use crate::prng::rng_from;
use crate::tape::{backward_into, Tape};
use crate::tensor::{ParamSet, Tensor};
use crate::worstcase::{
    build_feature_mask, draw_masking_subset, feature_importance_with, floor_frac,
    select_worst_samples, ImportanceTarget,
};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W2DConfig {
    /// Feature drop fraction: each mask zeroes `ceil(phi * feature_dim)` units.
    pub phi: f64,
    /// Fraction of the selected samples that receive feature masking.
    pub beta: f64,
    /// Worst-case sample fraction: `ceil(eta * rho)` samples train per batch.
    pub rho: f64,
    /// Fraction of epochs at the end trained on the whole batch.
    pub kappa: f64,
    /// Batch size.
    pub eta: usize,
    /// Number of epochs.
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub swa_enabled: bool,
    /// SWA absorbs one snapshot per epoch over this trailing fraction of training.
    pub swa_start_fraction: f64,
    /// Epochs of plain training for the frozen bias ranker of the two-stage variant.
    pub w2dstar_bias_epochs: usize,
    pub importance_target: ImportanceTarget,
}

impl Default for W2DConfig {
    fn default() -> Self {
        W2DConfig {
            phi: 0.33,
            beta: 0.33,
            rho: 0.33,
            kappa: 0.3,
            eta: 128,
            epochs: 10,
            learning_rate: 0.1,
            seed: 0,
            swa_enabled: false,
            swa_start_fraction: 0.25,
            w2dstar_bias_epochs: 2,
            importance_target: ImportanceTarget::TrueClass,
        }
    }
}

impl W2DConfig {
    pub fn validate(&self, dataset_size: usize) -> Result<()> {
        let unit = |v: f64, name: &str| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
            Ok(())
        };
        unit(self.phi, "phi")?;
        unit(self.beta, "beta")?;
        unit(self.rho, "rho")?;
        unit(self.kappa, "kappa")?;
        unit(self.swa_start_fraction, "swa_start_fraction")?;
        if self.rho <= 0.0 {
            return Err(Error::Config("rho must be positive".into()));
        }
        if self.eta == 0 || self.eta > dataset_size {
            return Err(Error::Config(format!(
                "eta = {} must be in 1..={dataset_size}",
                self.eta
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate = {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// The four single-model training objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Erm,
    FeatureOnly,
    SampleOnly,
    W2d,
}

impl Algorithm {
    /// ERM forces `rho = 1, beta = 0`; feature-only forces `rho = 1`;
    /// sample-only forces `beta = 0`.
    fn force(self, cfg: &W2DConfig) -> (f64, f64) {
        match self {
            Algorithm::Erm => (1.0, 0.0),
            Algorithm::FeatureOnly => (1.0, cfg.beta),
            Algorithm::SampleOnly => (cfg.rho, 0.0),
            Algorithm::W2d => (cfg.rho, cfg.beta),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    WorstCase,
    WholeBatch,
}

/// Number of leading worst-case epochs: `floor((1 - kappa) * T)`.
pub fn worst_case_epochs(total_epochs: usize, kappa: f64) -> usize {
    floor_frac(total_epochs, 1.0 - kappa)
}

/// Phase of 1-based epoch `t` out of `total_epochs`.
pub fn phase_of_epoch(t: usize, total_epochs: usize, kappa: f64) -> Result<Phase> {
    if t == 0 || t > total_epochs {
        return Err(Error::Invalid(format!(
            "epoch {t} outside 1..={total_epochs}"
        )));
    }
    if t <= worst_case_epochs(total_epochs, kappa) {
        Ok(Phase::WorstCase)
    } else {
        Ok(Phase::WholeBatch)
    }
}

/// One training iteration. Slot fields index into the batch; `batch_indices`
/// maps slots back to dataset rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub iter: usize,
    pub phase: Phase,
    /// Dataset row held by each batch slot.
    pub batch_indices: Vec<usize>,
    /// Per-slot losses that drove the selection (the frozen ranker's losses
    /// in the two-stage variant, the model's own otherwise).
    pub losses: Vec<f64>,
    /// Selected slots, sorted ascending.
    pub selected_slots: Vec<usize>,
    /// Slots that received feature masking, sorted ascending.
    pub masked_slots: Vec<usize>,
    /// Value of the training objective for this step.
    pub mean_selected_loss: f64,
}

impl StepRecord {
    /// Dataset rows of the selected samples.
    pub fn selected_dataset_rows(&self) -> Vec<usize> {
        self.selected_slots
            .iter()
            .map(|&s| self.batch_indices[s])
            .collect()
    }
}

/// Per-epoch snapshot of evaluation accuracies (percent), in eval-set order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub evals: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Accuracy trace of one named eval set across epochs.
    pub fn eval_trace(&self, name: &str) -> Vec<f64> {
        self.epochs
            .iter()
            .filter_map(|e| {
                e.evals
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, v)| *v)
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum HistoryLine {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Writes a history as line-delimited JSON, one object per iteration or epoch.
pub fn save_history(history: &TrainHistory, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let mut epochs = history.epochs.iter().peekable();
    for step in &history.steps {
        while let Some(e) = epochs.peek() {
            if e.epoch < step.epoch {
                let line = serde_json::to_string(&HistoryLine::Epoch((*e).clone()))
                    .map_err(|e| Error::Parse(e.to_string()))?;
                writeln!(w, "{line}")?;
                epochs.next();
            } else {
                break;
            }
        }
        let line = serde_json::to_string(&HistoryLine::Step(step.clone()))
            .map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    for e in epochs {
        let line = serde_json::to_string(&HistoryLine::Epoch(e.clone()))
            .map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn load_history(path: &Path) -> Result<TrainHistory> {
    let file = fs::File::open(path)?;
    let mut history = TrainHistory::default();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(|e| Error::Parse(e.to_string()))? {
            HistoryLine::Step(s) => history.steps.push(s),
            HistoryLine::Epoch(e) => history.epochs.push(e),
        }
    }
    Ok(history)
}

/// Equal average of parameter snapshots, maintained as a running mean.
#[derive(Debug, Clone)]
pub struct SWAState {
    average: ParamSet,
    count: usize,
}

impl SWAState {
    pub fn new() -> Self {
        SWAState { average: ParamSet::new(), count: 0 }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn average(&self) -> &ParamSet {
        &self.average
    }

    /// A copy of the source model carrying the averaged parameters.
    pub fn averaged_model(&self, template: &Model) -> Result<Model> {
        let mut model = template.clone();
        for (name, p) in self.average.iter() {
            let dst = model
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Invalid(format!("parameter {name} not in model")))?;
            if dst.value.shape() != p.value.shape() {
                return Err(Error::Shape(format!("snapshot shape mismatch for {name}")));
            }
            dst.value = p.value.clone();
        }
        Ok(model)
    }
}

impl Default for SWAState {
    fn default() -> Self {
        Self::new()
    }
}

/// Absorbs one snapshot: `avg <- avg + (snapshot - avg) / (count + 1)`.
pub fn swa_update(state: &mut SWAState, snapshot: &ParamSet) -> Result<()> {
    if state.count == 0 {
        state.average = snapshot.clone();
        for (_, p) in snapshot.iter() {
            // shape sanity only; values copied above
            let _ = p;
        }
        state.count = 1;
        return Ok(());
    }
    if state.average.len() != snapshot.len() {
        return Err(Error::Shape(format!(
            "snapshot has {} parameters, average has {}",
            snapshot.len(),
            state.average.len()
        )));
    }
    let inv = 1.0 / (state.count + 1) as f64;
    let names: Vec<String> = state.average.names().map(str::to_string).collect();
    for name in names {
        let snap = snapshot
            .get(&name)
            .ok_or_else(|| Error::Shape(format!("snapshot missing parameter {name}")))?
            .value
            .clone();
        let avg = state.average.get_mut(&name).unwrap();
        if avg.value.shape() != snap.shape() {
            return Err(Error::Shape(format!("snapshot shape mismatch for {name}")));
        }
        for (a, s) in avg.value.data_mut().iter_mut().zip(snap.data()) {
            *a += (s - *a) * inv;
        }
    }
    state.count += 1;
    Ok(())
}

/// A named evaluation set whose accuracy is recorded once per epoch.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub name: String,
    pub batch: Batch,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub history: TrainHistory,
    pub swa: Option<SWAState>,
}

#[derive(Debug)]
pub struct W2dStarOutput {
    pub model: Model,
    pub bias_model: Option<Model>,
    pub history: TrainHistory,
}

struct Eff {
    rho: f64,
    beta: f64,
    phi: f64,
    learning_rate: f64,
    importance_target: ImportanceTarget,
}

/// One update on one batch. Exposed for single-step reasoning and tests; the
/// epoch loop in [`train`] calls the same code.
pub fn w2d_step(
    model: &mut Model,
    batch: &Batch,
    config: &W2DConfig,
    phase: Phase,
    rng_mask: &mut ChaCha8Rng,
) -> Result<StepRecord> {
    let rows: Vec<usize> = (0..batch.len()).collect();
    let eff = Eff {
        rho: config.rho,
        beta: config.beta,
        phi: config.phi,
        learning_rate: config.learning_rate,
        importance_target: config.importance_target,
    };
    step_impl(model, batch, &rows, phase, &eff, None, rng_mask, 1, 0)
}

#[allow(clippy::too_many_arguments)]
fn step_impl(
    model: &mut Model,
    batch: &Batch,
    batch_rows: &[usize],
    phase: Phase,
    eff: &Eff,
    selection_model: Option<&Model>,
    rng_mask: &mut ChaCha8Rng,
    epoch: usize,
    iter_k: usize,
) -> Result<StepRecord> {
    let eta = batch.len();
    if eta == 0 {
        return Err(Error::Empty("empty batch".into()));
    }
    let mut tape = Tape::new();
    let x = tape.input(batch.inputs.clone());
    let (features, logits) = model.forward_on_tape(&mut tape, x, None)?;
    let own_losses_id = tape.softmax_xent(logits, batch.labels.clone())?;
    let selection_losses: Vec<f64> = match selection_model {
        None => tape.value(own_losses_id).data().to_vec(),
        Some(ranker) => ranker.per_sample_losses(batch)?,
    };

    let selected_slots: Vec<usize> = match phase {
        Phase::WorstCase => select_worst_samples(&selection_losses, eff.rho)?.indices,
        Phase::WholeBatch => (0..eta).collect(),
    };
    let masked_slots = draw_masking_subset(&selected_slots, eff.beta, rng_mask)?;

    let final_losses_id = if masked_slots.is_empty() {
        own_losses_id
    } else {
        let feats = tape.value(features).clone();
        let sub_feats = feats.gather_rows(&masked_slots)?;
        let sub_labels: Vec<usize> = masked_slots.iter().map(|&s| batch.labels[s]).collect();
        let scores =
            feature_importance_with(model, &sub_feats, &sub_labels, eff.importance_target)?;
        let d = model.feature_dim;
        let mut mask_matrix = vec![1.0; eta * d];
        for (row, &slot) in masked_slots.iter().enumerate() {
            let mask = build_feature_mask(&scores.data()[row * d..(row + 1) * d], eff.phi)?;
            for (j, &bit) in mask.bits().iter().enumerate() {
                mask_matrix[slot * d + j] = f64::from(bit);
            }
        }
        let m = tape.input(Tensor::new(vec![eta, d], mask_matrix)?);
        let masked_features = tape.mul(features, m)?;
        let masked_logits = model.decoder_on_tape(&mut tape, masked_features)?;
        let masked_losses = tape.softmax_xent(masked_logits, batch.labels.clone())?;
        let mut take_masked = vec![false; eta];
        for &s in &masked_slots {
            take_masked[s] = true;
        }
        tape.row_select(masked_losses, own_losses_id, take_masked)?
    };

    let loss_id = tape.mean_subset(final_losses_id, selected_slots.clone())?;
    let mean_selected_loss = tape.value(loss_id).item()?;
    model.params.zero_grads();
    backward_into(tape, loss_id, &mut model.params).map_err(|e| match e {
        Error::NonFinite(msg) => Error::NonFinite(format!(
            "epoch {epoch}, iteration {iter_k}: {msg} (run aborted)"
        )),
        other => other,
    })?;
    model.params.sgd_step(eff.learning_rate);

    Ok(StepRecord {
        epoch,
        iter: iter_k,
        phase,
        batch_indices: batch_rows.to_vec(),
        losses: selection_losses,
        selected_slots,
        masked_slots,
        mean_selected_loss,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    mut model: Model,
    data: &Batch,
    evals: &[EvalSet],
    config: &W2DConfig,
    rho: f64,
    beta: f64,
    selection_model: Option<&Model>,
    rng_domain: &str,
) -> Result<TrainOutput> {
    config.validate(data.len())?;
    let n = data.len();
    let total = config.epochs;
    // whole-batch patching is disabled when SWA runs
    let kappa = if config.swa_enabled { 0.0 } else { config.kappa };
    // snapshots start after (1 - swa_start_fraction) * T epochs
    let swa_from = floor_frac(total, 1.0 - config.swa_start_fraction);
    let iterations = n / config.eta;
    if iterations == 0 {
        return Err(Error::Config(format!(
            "batch size {} exceeds dataset size {n}",
            config.eta
        )));
    }
    let eff = Eff {
        rho,
        beta,
        phi: config.phi,
        learning_rate: config.learning_rate,
        importance_target: config.importance_target,
    };
    let mut rng_shuffle = rng_from(config.seed, &format!("{rng_domain}-shuffle"), 0);
    let mut rng_mask = rng_from(config.seed, &format!("{rng_domain}-mask"), 0);
    let mut history = TrainHistory::default();
    let mut swa = config.swa_enabled.then(SWAState::new);
    let mut order: Vec<usize> = (0..n).collect();
    for t in 1..=total {
        let phase = phase_of_epoch(t, total, kappa)?;
        order.shuffle(&mut rng_shuffle);
        for k in 0..iterations {
            let rows = &order[k * config.eta..(k + 1) * config.eta];
            let batch = data.gather(rows)?;
            let record = step_impl(
                &mut model,
                &batch,
                rows,
                phase,
                &eff,
                selection_model,
                &mut rng_mask,
                t,
                k,
            )?;
            history.steps.push(record);
        }
        let mut eval_accs = Vec::with_capacity(evals.len());
        for set in evals {
            eval_accs.push((set.name.clone(), evaluate_accuracy(&model, &set.batch)?));
        }
        history.epochs.push(EpochRecord { epoch: t, phase, evals: eval_accs });
        if let Some(state) = swa.as_mut() {
            if t > swa_from {
                swa_update(state, &model.params)?;
            }
        }
    }
    Ok(TrainOutput { model, history, swa })
}

/// Trains a fresh model on `data` for `config.epochs` epochs with per-epoch
/// shuffling. Trailing partial batches (`n mod eta`) are dropped. The
/// accuracies of `evals` are recorded once per epoch.
pub fn train(
    algorithm: Algorithm,
    spec: &ModelSpec,
    data: &Batch,
    evals: &[EvalSet],
    config: &W2DConfig,
) -> Result<TrainOutput> {
    if data.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let (rho, beta) = algorithm.force(config);
    let model = build_model(spec, crate::prng::derive_seed(config.seed, "model", 0))?;
    run_training(model, data, evals, config, rho, beta, None, "train")
}

/// Two-stage variant: a bias model trained plainly for a few epochs is frozen
/// and ranks per-sample losses for selection, while a fresh model receives
/// the updates (with masking driven by its own gradients). With
/// `w2dstar_bias_epochs = 0` selection falls back to the live model and the
/// run is identical to [`train`] with [`Algorithm::W2d`].
pub fn train_w2d_star(
    spec: &ModelSpec,
    data: &Batch,
    evals: &[EvalSet],
    config: &W2DConfig,
) -> Result<W2dStarOutput> {
    if data.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    if config.w2dstar_bias_epochs == 0 {
        let out = train(Algorithm::W2d, spec, data, evals, config)?;
        return Ok(W2dStarOutput { model: out.model, bias_model: None, history: out.history });
    }
    let mut bias_config = config.clone();
    bias_config.epochs = config.w2dstar_bias_epochs;
    bias_config.swa_enabled = false;
    bias_config.kappa = 0.0;
    let bias_init = build_model(spec, crate::prng::derive_seed(config.seed, "bias-model", 0))?;
    let bias = run_training(bias_init, data, &[], &bias_config, 1.0, 0.0, None, "bias")?.model;

    let model = build_model(spec, crate::prng::derive_seed(config.seed, "model", 0))?;
    let out = run_training(
        model,
        data,
        evals,
        config,
        config.rho,
        config.beta,
        Some(&bias),
        "train",
    )?;
    Ok(W2dStarOutput { model: out.model, bias_model: Some(bias), history: out.history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::prng::rng_from;

    fn toy_batch(n: usize, d: usize, seed: u64) -> Batch {
        use rand::Rng;
        let mut rng = rng_from(seed, "toy", 0);
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        Batch::new(Tensor::new(vec![n, d], data).unwrap(), labels).unwrap()
    }

    #[test]
    fn phase_examples() {
        assert_eq!(phase_of_epoch(80, 100, 0.2).unwrap(), Phase::WorstCase);
        assert_eq!(phase_of_epoch(81, 100, 0.2).unwrap(), Phase::WholeBatch);
        for t in 1..=50 {
            assert_eq!(phase_of_epoch(t, 50, 0.0).unwrap(), Phase::WorstCase);
            assert_eq!(phase_of_epoch(t, 50, 1.0).unwrap(), Phase::WholeBatch);
        }
        assert!(phase_of_epoch(0, 10, 0.5).is_err());
        assert!(phase_of_epoch(11, 10, 0.5).is_err());
    }

    #[test]
    fn phase_boundary_counts_are_exact() {
        for total in 1..=200 {
            for &kappa in &[0.0, 0.05, 0.1, 0.2, 0.4, 1.0] {
                let worst = (1..=total)
                    .filter(|&t| phase_of_epoch(t, total, kappa).unwrap() == Phase::WorstCase)
                    .count();
                // rational oracle: floor((1 - kappa) * total) computed in integers
                let (num, den) = match kappa {
                    k if k == 0.0 => (0usize, 1usize),
                    k if k == 0.05 => (1, 20),
                    k if k == 0.1 => (1, 10),
                    k if k == 0.2 => (1, 5),
                    k if k == 0.4 => (2, 5),
                    _ => (1, 1),
                };
                let expect = (den - num) * total / den;
                assert_eq!(worst, expect, "T={total} kappa={kappa}");
            }
        }
    }

    #[test]
    fn erm_step_equals_plain_sgd() {
        // rho = 1, beta = 0 must reproduce a plain SGD step on the full batch
        let spec = ModelSpec::mlp(vec![4], &[5], 2);
        let batch = toy_batch(6, 4, 3);
        let config = W2DConfig {
            rho: 1.0,
            beta: 0.0,
            learning_rate: 0.2,
            ..W2DConfig::default()
        };
        let mut stepped = build_model(&spec, 42).unwrap();
        let mut rng = rng_from(0, "m", 0);
        w2d_step(&mut stepped, &batch, &config, Phase::WorstCase, &mut rng).unwrap();

        let mut plain = build_model(&spec, 42).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(batch.inputs.clone());
        let (_, logits) = plain.forward_on_tape(&mut tape, x, None).unwrap();
        let losses = tape.softmax_xent(logits, batch.labels.clone()).unwrap();
        let loss = tape.mean_subset(losses, (0..batch.len()).collect()).unwrap();
        plain.params.zero_grads();
        backward_into(tape, loss, &mut plain.params).unwrap();
        plain.params.sgd_step(0.2);

        assert!(stepped.params.bitwise_eq(&plain.params));
    }

    #[test]
    fn half_batch_step_trains_on_the_high_loss_sample() {
        // two samples, rho = 0.5: the update must equal a hand-computed SGD
        // step on whichever sample has the higher loss
        let spec = ModelSpec::linear(vec![2], 2);
        let mut model = build_model(&spec, 8).unwrap();
        let batch = Batch::new(
            Tensor::new(vec![2, 2], vec![2.0, -1.0, 0.3, 0.4]).unwrap(),
            vec![0, 1],
        )
        .unwrap();
        let losses = model.per_sample_losses(&batch).unwrap();
        let hard = if losses[0] >= losses[1] { 0 } else { 1 };

        // hand-computed softmax-xent gradient for the hard sample alone:
        // dW = x^T (p - onehot), db = p - onehot
        let fwd = model.forward(&batch.inputs, None).unwrap();
        let z = &fwd.logits.data()[hard * 2..hard * 2 + 2];
        let m = z[0].max(z[1]);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / sum).collect();
        let delta = [
            p[0] - if batch.labels[hard] == 0 { 1.0 } else { 0.0 },
            p[1] - if batch.labels[hard] == 1 { 1.0 } else { 0.0 },
        ];
        let x = &batch.inputs.data()[hard * 2..hard * 2 + 2];
        let lr = 0.5;
        let mut expect_w = model.params.get("dec.0.w").unwrap().value.data().to_vec();
        let mut expect_b = model.params.get("dec.0.b").unwrap().value.data().to_vec();
        for i in 0..2 {
            for j in 0..2 {
                expect_w[i * 2 + j] -= lr * x[i] * delta[j];
            }
            expect_b[i] -= lr * delta[i];
        }

        let config = W2DConfig {
            rho: 0.5,
            beta: 0.0,
            learning_rate: lr,
            ..W2DConfig::default()
        };
        let mut rng = rng_from(0, "m", 0);
        let rec = w2d_step(&mut model, &batch, &config, Phase::WorstCase, &mut rng).unwrap();
        assert_eq!(rec.selected_slots, vec![hard]);
        let got_w = model.params.get("dec.0.w").unwrap().value.data();
        let got_b = model.params.get("dec.0.b").unwrap().value.data();
        for (g, e) in got_w.iter().zip(&expect_w) {
            assert!((g - e).abs() < 1e-12);
        }
        for (g, e) in got_b.iter().zip(&expect_b) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_feature_column_gets_no_gradient() {
        // linear model: make feature 1 dominate the importance ranking, mask
        // with beta = 1 and phi small enough to zero exactly that feature,
        // then check row 1 of the decoder weight gradient stayed zero
        let spec = ModelSpec::linear(vec![3], 2);
        let mut model = build_model(&spec, 4).unwrap();
        model.params.get_mut("dec.0.w").unwrap().value = Tensor::new(
            vec![3, 2],
            vec![0.1, -0.1, 5.0, -5.0, 0.2, -0.2],
        )
        .unwrap();
        let batch = toy_batch(4, 3, 9);
        let config = W2DConfig {
            rho: 1.0,
            beta: 1.0,
            phi: 0.34, // ceil(0.34 * 3) = 2? no: 1.02 -> 2... use 0.3 for 1 zero
            ..W2DConfig::default()
        };
        let mut config = config;
        config.phi = 0.3; // ceil(0.9) = 1 zero per mask
        config.learning_rate = 0.1;
        let mut rng = rng_from(0, "m", 0);

        // capture the gradient right after the step by replaying: step zeroes
        // grads, backprops, then applies SGD, so grads remain inspectable
        let before = model.params.get("dec.0.w").unwrap().value.clone();
        let rec = w2d_step(&mut model, &batch, &config, Phase::WorstCase, &mut rng).unwrap();
        assert_eq!(rec.masked_slots.len(), 4);
        let grad = model.params.get("dec.0.w").unwrap().grad.clone();
        // feature 1 has far the largest |weight| for every class, so every
        // per-sample mask zeroes feature 1; its weight row gets zero gradient
        assert_eq!(grad.data()[2], 0.0);
        assert_eq!(grad.data()[3], 0.0);
        let after = model.params.get("dec.0.w").unwrap().value.clone();
        assert_eq!(before.data()[2], after.data()[2]);
        assert_eq!(before.data()[3], after.data()[3]);
        // other rows did move
        assert!(grad.data()[0] != 0.0 || grad.data()[4] != 0.0);
    }

    #[test]
    fn non_finite_forward_aborts_with_diagnostic() {
        let spec = ModelSpec::linear(vec![2], 2);
        let mut model = build_model(&spec, 0).unwrap();
        model.params.get_mut("dec.0.w").unwrap().value =
            Tensor::new(vec![2, 2], vec![1e308, 1e308, 1e308, 1e308]).unwrap();
        let batch = Batch::new(
            Tensor::new(vec![2, 2], vec![1e3, 1e3, -1e3, 1e3]).unwrap(),
            vec![0, 1],
        )
        .unwrap();
        let config = W2DConfig { rho: 1.0, beta: 0.0, ..W2DConfig::default() };
        let mut rng = rng_from(0, "m", 0);
        let err = w2d_step(&mut model, &batch, &config, Phase::WorstCase, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "got {err}");
    }

    #[test]
    fn training_is_deterministic() {
        let spec = ModelSpec::mlp(vec![4], &[6], 2);
        let data = toy_batch(40, 4, 5);
        let config = W2DConfig {
            eta: 8,
            epochs: 3,
            ..W2DConfig::default()
        };
        let a = train(Algorithm::W2d, &spec, &data, &[], &config).unwrap();
        let b = train(Algorithm::W2d, &spec, &data, &[], &config).unwrap();
        assert!(a.model.params.bitwise_eq(&b.model.params));
        assert_eq!(a.history.steps.len(), b.history.steps.len());
        for (x, y) in a.history.steps.iter().zip(&b.history.steps) {
            assert_eq!(x.batch_indices, y.batch_indices);
            assert_eq!(x.selected_slots, y.selected_slots);
            assert_eq!(x.masked_slots, y.masked_slots);
            assert!(x
                .losses
                .iter()
                .zip(&y.losses)
                .all(|(u, v)| u.to_bits() == v.to_bits()));
            assert_eq!(
                x.mean_selected_loss.to_bits(),
                y.mean_selected_loss.to_bits()
            );
        }
    }

    #[test]
    fn reductions_are_bitwise() {
        let spec = ModelSpec::mlp(vec![4], &[6], 2);
        let data = toy_batch(48, 4, 6);
        let config = W2DConfig {
            eta: 8,
            epochs: 3,
            rho: 1.0,
            beta: 0.0,
            kappa: 0.25,
            ..W2DConfig::default()
        };
        let erm = train(Algorithm::Erm, &spec, &data, &[], &config).unwrap();
        let w2d = train(Algorithm::W2d, &spec, &data, &[], &config).unwrap();
        assert!(erm.model.params.bitwise_eq(&w2d.model.params));

        // beta = 0 makes W2D and sample-only identical
        let config2 = W2DConfig { rho: 0.4, beta: 0.0, eta: 8, epochs: 3, ..W2DConfig::default() };
        let so = train(Algorithm::SampleOnly, &spec, &data, &[], &config2).unwrap();
        let w2 = train(Algorithm::W2d, &spec, &data, &[], &config2).unwrap();
        assert!(so.model.params.bitwise_eq(&w2.model.params));

        // rho = 1 makes W2D and feature-only identical
        let config3 = W2DConfig { rho: 1.0, beta: 0.5, eta: 8, epochs: 3, ..W2DConfig::default() };
        let fo = train(Algorithm::FeatureOnly, &spec, &data, &[], &config3).unwrap();
        let w3 = train(Algorithm::W2d, &spec, &data, &[], &config3).unwrap();
        assert!(fo.model.params.bitwise_eq(&w3.model.params));
    }

    #[test]
    fn kappa_one_runs_whole_batch_only() {
        let spec = ModelSpec::mlp(vec![4], &[5], 2);
        let data = toy_batch(24, 4, 7);
        let config = W2DConfig { eta: 8, epochs: 2, kappa: 1.0, ..W2DConfig::default() };
        let out = train(Algorithm::W2d, &spec, &data, &[], &config).unwrap();
        assert!(out.history.steps.iter().all(|s| s.phase == Phase::WholeBatch));
        assert!(out
            .history
            .steps
            .iter()
            .all(|s| s.selected_slots.len() == 8));
    }

    #[test]
    fn selection_law_holds_in_recorded_steps() {
        let spec = ModelSpec::mlp(vec![4], &[5], 2);
        let data = toy_batch(32, 4, 8);
        let config = W2DConfig { eta: 8, epochs: 2, rho: 0.25, kappa: 0.0, ..W2DConfig::default() };
        let out = train(Algorithm::W2d, &spec, &data, &[], &config).unwrap();
        for s in &out.history.steps {
            assert_eq!(s.selected_slots.len(), crate::worstcase::ceil_frac(8, 0.25));
            let min_sel = s
                .selected_slots
                .iter()
                .map(|&i| s.losses[i])
                .fold(f64::INFINITY, f64::min);
            let max_unsel = (0..8)
                .filter(|i| !s.selected_slots.contains(i))
                .map(|i| s.losses[i])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(min_sel >= max_unsel);
        }
    }

    #[test]
    fn swa_average_matches_direct_mean() {
        use rand::Rng;
        let spec = ModelSpec::mlp(vec![3], &[4], 2);
        let mut rng = rng_from(11, "snap", 0);
        let mut snapshots = Vec::new();
        for s in 0..5 {
            let mut m = build_model(&spec, s).unwrap();
            for name in m.params.names().map(str::to_string).collect::<Vec<_>>() {
                for v in m.params.get_mut(&name).unwrap().value.data_mut() {
                    *v = rng.gen_range(-2.0..2.0);
                }
            }
            snapshots.push(m.params);
        }
        let mut state = SWAState::new();
        for s in &snapshots {
            swa_update(&mut state, s).unwrap();
        }
        assert_eq!(state.count(), 5);
        for (name, p) in state.average().iter() {
            for (i, avg) in p.value.data().iter().enumerate() {
                let direct: f64 = snapshots
                    .iter()
                    .map(|s| s.get(name).unwrap().value.data()[i])
                    .sum::<f64>()
                    / 5.0;
                assert!(
                    (avg - direct).abs() <= 1e-12 * direct.abs().max(1.0),
                    "{name}[{i}]: running {avg} direct {direct}"
                );
            }
        }
    }

    #[test]
    fn swa_simple_examples() {
        let mut ps1 = ParamSet::new();
        ps1.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let mut ps3 = ParamSet::new();
        ps3.insert("w", Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
        let mut state = SWAState::new();
        swa_update(&mut state, &ps1).unwrap();
        assert_eq!(state.average().get("w").unwrap().value.data(), &[1.0]);
        swa_update(&mut state, &ps3).unwrap();
        assert_eq!(state.average().get("w").unwrap().value.data(), &[2.0]);

        let mut bad = ParamSet::new();
        bad.insert("w", Tensor::zeros(vec![2])).unwrap();
        assert!(swa_update(&mut state, &bad).is_err());
    }

    #[test]
    fn swa_run_snapshots_last_quarter() {
        let spec = ModelSpec::mlp(vec![4], &[5], 2);
        let data = toy_batch(32, 4, 12);
        let config = W2DConfig {
            eta: 8,
            epochs: 8,
            swa_enabled: true,
            swa_start_fraction: 0.25,
            kappa: 0.5, // must be ignored while SWA is on
            ..W2DConfig::default()
        };
        let out = train(Algorithm::W2d, &spec, &data, &[], &config).unwrap();
        let swa = out.swa.unwrap();
        assert_eq!(swa.count(), 2); // epochs 7 and 8
        assert!(out.history.steps.iter().all(|s| s.phase == Phase::WorstCase));
    }

    #[test]
    fn w2d_star_zero_bias_epochs_reduces_to_w2d() {
        let spec = ModelSpec::mlp(vec![4], &[5], 2);
        let data = toy_batch(32, 4, 13);
        let config = W2DConfig {
            eta: 8,
            epochs: 3,
            w2dstar_bias_epochs: 0,
            ..W2DConfig::default()
        };
        let star = train_w2d_star(&spec, &data, &[], &config).unwrap();
        let plain = train(Algorithm::W2d, &spec, &data, &[], &config).unwrap();
        assert!(star.bias_model.is_none());
        assert!(star.model.params.bitwise_eq(&plain.model.params));
    }

    #[test]
    fn w2d_star_selection_follows_frozen_ranker() {
        let spec = ModelSpec::mlp(vec![4], &[5], 2);
        let data = toy_batch(32, 4, 14);
        let config = W2DConfig {
            eta: 8,
            epochs: 2,
            rho: 0.25,
            kappa: 0.0,
            w2dstar_bias_epochs: 1,
            ..W2DConfig::default()
        };
        let star = train_w2d_star(&spec, &data, &[], &config).unwrap();
        let bias = star.bias_model.unwrap();
        // recorded losses must be the frozen ranker's, and the selection law
        // must hold against them
        for s in &star.history.steps {
            let batch = data.gather(&s.batch_indices).unwrap();
            let bias_losses = bias.per_sample_losses(&batch).unwrap();
            for (a, b) in s.losses.iter().zip(&bias_losses) {
                assert!((a - b).abs() < 1e-12);
            }
            let min_sel = s
                .selected_slots
                .iter()
                .map(|&i| s.losses[i])
                .fold(f64::INFINITY, f64::min);
            let max_unsel = (0..8)
                .filter(|i| !s.selected_slots.contains(i))
                .map(|i| s.losses[i])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(min_sel >= max_unsel);
        }
    }

    #[test]
    fn history_round_trips_through_jsonl() {
        let spec = ModelSpec::mlp(vec![4], &[5], 2);
        let data = toy_batch(16, 4, 15);
        let evals = vec![EvalSet { name: "train".into(), batch: toy_batch(8, 4, 16) }];
        let config = W2DConfig { eta: 8, epochs: 2, ..W2DConfig::default() };
        let out = train(Algorithm::W2d, &spec, &data, &evals, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        save_history(&out.history, &path).unwrap();
        let back = load_history(&path).unwrap();
        assert_eq!(back.steps.len(), out.history.steps.len());
        assert_eq!(back.epochs.len(), out.history.epochs.len());
        assert_eq!(back.steps[0].batch_indices, out.history.steps[0].batch_indices);
        assert_eq!(back.eval_trace("train"), out.history.eval_trace("train"));
    }

    #[test]
    fn partial_trailing_batch_is_dropped() {
        let spec = ModelSpec::mlp(vec![4], &[5], 2);
        let data = toy_batch(21, 4, 17);
        let config = W2DConfig { eta: 8, epochs: 1, ..W2DConfig::default() };
        let out = train(Algorithm::Erm, &spec, &data, &[], &config).unwrap();
        assert_eq!(out.history.steps.len(), 2); // floor(21 / 8)
    }
}
