//! Class activation maps for convolutional models with a global-average-pool
//! feature boundary and a linear head.

use crate::error::{Error, Result};
use crate::model::{LayerKind, Model};
use crate::tensor::Tensor;

fn head_weights(model: &Model) -> Result<&Tensor> {
    match model.spec.decoder.as_slice() {
        [LayerKind::Dense { .. }] => Ok(&model.params.get("dec.0.w").expect("built model").value),
        _ => Err(Error::Invalid(
            "class activation maps need a single linear head".into(),
        )),
    }
}

/// Weighted sum over channels of the pre-pool feature maps, unnormalized:
/// `cam[h,w] = sum_c W[c, class] * maps[c,h,w]`.
pub fn class_activation_map_raw(model: &Model, x: &Tensor, class_id: usize) -> Result<Tensor> {
    if x.shape() != model.spec.input_shape {
        return Err(Error::Shape(format!(
            "input {:?} vs model input {:?}",
            x.shape(),
            model.spec.input_shape
        )));
    }
    if class_id >= model.spec.classes {
        return Err(Error::Invalid(format!(
            "class {class_id} out of range for {} classes",
            model.spec.classes
        )));
    }
    let w = head_weights(model)?.clone(); // [C, classes]
    let mut batch_shape = vec![1usize];
    batch_shape.extend_from_slice(x.shape());
    let maps = model.forward_spatial(&x.reshaped(batch_shape)?)?; // [1, C, h, w]
    let (c, h, wd) = (maps.shape()[1], maps.shape()[2], maps.shape()[3]);
    if w.shape()[0] != c {
        return Err(Error::Shape(format!(
            "head expects {} channels, encoder produced {c}",
            w.shape()[0]
        )));
    }
    let classes = w.shape()[1];
    let md = maps.data();
    let mut out = vec![0.0; h * wd];
    for ch in 0..c {
        let weight = w.data()[ch * classes + class_id];
        let plane = &md[ch * h * wd..(ch + 1) * h * wd];
        for (o, &v) in out.iter_mut().zip(plane) {
            *o += weight * v;
        }
    }
    Tensor::new(vec![h, wd], out)
}

/// [`class_activation_map_raw`] min-max normalized to [0, 1]. An all-equal
/// map normalizes to all zeros.
pub fn class_activation_map(model: &Model, x: &Tensor, class_id: usize) -> Result<Tensor> {
    let raw = class_activation_map_raw(model, x, class_id)?;
    let lo = raw.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let out: Vec<f64> = if span <= 0.0 {
        vec![0.0; raw.numel()]
    } else {
        raw.data().iter().map(|v| (v - lo) / span).collect()
    };
    Tensor::new(raw.shape().to_vec(), out)
}
