//! The two worst-case training primitives: gradient-ranked feature masks and
//! top-loss sample selection.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which logit's gradient ranks feature importance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImportanceTarget {
    /// Gradient of the logit of the true class (the default).
    TrueClass,
    /// Gradient of the logit of the currently predicted class.
    PredictedClass,
}

/// Binary feature mask: exactly `ceil(phi * d)` zeros at the top-scored
/// positions, ones elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMask {
    bits: Vec<u8>,
    phi: f64,
}

impl FeatureMask {
    pub fn ones(d: usize) -> FeatureMask {
        FeatureMask { bits: vec![1; d], phi: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn zero_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(b)).collect()
    }
}

/// The realized worst-case sample weights: a uniform top-k indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSelection {
    /// Selected positions, sorted ascending.
    pub indices: Vec<usize>,
    /// The per-sample losses the selection was made from.
    pub losses: Vec<f64>,
    pub rho: f64,
}

/// `ceil(f * n)` with protection against representation noise in the product
/// (e.g. 0.1 * 10 evaluating to just above 1.0). Products within a relative
/// 1e-9 of an integer snap to that integer before the ceiling.
pub fn ceil_frac(n: usize, f: f64) -> usize {
    let x = f * n as f64;
    let r = x.round();
    let snapped = if (x - r).abs() <= 1e-9 * r.abs().max(1.0) { r } else { x.ceil() };
    (snapped.max(0.0) as usize).min(n)
}

/// `floor(f * n)` with the same integer snapping as [`ceil_frac`].
pub fn floor_frac(n: usize, f: f64) -> usize {
    let x = f * n as f64;
    let r = x.round();
    let snapped = if (x - r).abs() <= 1e-9 * r.abs().max(1.0) { r } else { x.floor() };
    (snapped.max(0.0) as usize).min(n)
}

/// Signed gradient of the target-class logit with respect to each feature
/// unit, per sample. The decoder alone is differentiated; encoder parameters
/// do not participate.
pub fn feature_logit_gradient(
    model: &Model,
    features: &Tensor,
    labels: &[usize],
    target: ImportanceTarget,
) -> Result<Tensor> {
    let fs = features.shape();
    if fs.len() != 2 || fs[1] != model.feature_dim {
        return Err(Error::Shape(format!(
            "features {fs:?} vs feature_dim {}",
            model.feature_dim
        )));
    }
    if fs[0] != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows vs {} labels",
            fs[0],
            labels.len()
        )));
    }
    let mut tape = Tape::new();
    let f = tape.input(features.clone());
    let logits = model.decoder_on_tape(&mut tape, f)?;
    let targets: Vec<usize> = match target {
        ImportanceTarget::TrueClass => labels.to_vec(),
        ImportanceTarget::PredictedClass => {
            let ld = tape.value(logits);
            let k = ld.shape()[1];
            (0..fs[0])
                .map(|i| {
                    let row = &ld.data()[i * k..(i + 1) * k];
                    row.iter()
                        .enumerate()
                        .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (j, &v)| {
                            if v > bv { (j, v) } else { (bi, bv) }
                        })
                        .0
                })
                .collect()
        }
    };
    if let Some(&bad) = targets.iter().find(|&&y| y >= model.spec.classes) {
        return Err(Error::Invalid(format!(
            "label {bad} out of range for {} classes",
            model.spec.classes
        )));
    }
    let picked = tape.gather_class(logits, targets)?;
    let scalar = tape.sum(picked)?;
    let grads = tape.backward(scalar)?;
    Ok(grads
        .adjoint(f)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(fs.to_vec())))
}

/// Per-sample importance scores: the absolute value of the true-class logit
/// gradient with respect to each feature unit.
pub fn feature_importance(model: &Model, features: &Tensor, labels: &[usize]) -> Result<Tensor> {
    feature_importance_with(model, features, labels, ImportanceTarget::TrueClass)
}

/// [`feature_importance`] with a selectable target logit.
pub fn feature_importance_with(
    model: &Model,
    features: &Tensor,
    labels: &[usize],
    target: ImportanceTarget,
) -> Result<Tensor> {
    let g = feature_logit_gradient(model, features, labels, target)?;
    let abs: Vec<f64> = g.data().iter().map(|v| v.abs()).collect();
    Tensor::new(g.shape().to_vec(), abs)
}

/// Mask with zeros at the `ceil(phi * d)` largest scores, ties broken toward
/// the lowest index.
pub fn build_feature_mask(scores: &[f64], phi: f64) -> Result<FeatureMask> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::Invalid(format!("phi {phi} outside [0, 1]")));
    }
    if scores.is_empty() {
        return Err(Error::Empty("no feature scores".into()));
    }
    if let Some(&bad) = scores.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Invalid(format!("score {bad} not finite and non-negative")));
    }
    let d = scores.len();
    let zeros = ceil_frac(d, phi);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores checked finite")
            .then(a.cmp(&b))
    });
    let mut bits = vec![1u8; d];
    for &i in order.iter().take(zeros) {
        bits[i] = 0;
    }
    Ok(FeatureMask { bits, phi })
}

/// Exactly `ceil(len * rho)` indices of highest loss, ties broken toward the
/// lowest index; returned sorted ascending.
pub fn select_worst_samples(losses: &[f64], rho: f64) -> Result<SampleSelection> {
    if losses.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Invalid(format!("rho {rho} outside (0, 1]")));
    }
    if let Some(&bad) = losses.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss {bad}")));
    }
    let n = losses.len();
    let k = ceil_frac(n, rho).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        losses[b]
            .partial_cmp(&losses[a])
            .expect("losses checked finite")
            .then(a.cmp(&b))
    });
    let mut indices: Vec<usize> = order[..k].to_vec();
    indices.sort_unstable();
    Ok(SampleSelection { indices, losses: losses.to_vec(), rho })
}

/// Draws the `ceil(beta * |selected|)` samples (without replacement) that
/// will receive feature masking, returned sorted ascending. The subset is
/// uniform over the already loss-selected samples. `beta = 0` draws nothing
/// and consumes no randomness.
pub fn draw_masking_subset<R: Rng>(
    selected: &[usize],
    beta: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Invalid(format!("beta {beta} outside [0, 1]")));
    }
    let k = ceil_frac(selected.len(), beta);
    let mut pool: Vec<usize> = selected.to_vec();
    // partial Fisher-Yates: the first k slots become the draw
    for i in 0..k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut subset = pool[..k].to_vec();
    subset.sort_unstable();
    Ok(subset)
}
