//! Encoder/decoder models over the fixed layer set.
//!
//! A model is an encoder followed by a decoder; the boundary between them is
//! where feature masks apply. For MLPs the boundary is the flattened
//! penultimate feature vector, for the convolutional net it is the pooled
//! feature map, and for the linear model it is the (flattened) input itself.

use crate::error::{Error, Result};
use crate::prng::rng_from;
use crate::tape::{BufId, Tape};
use crate::tensor::{ParamSet, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A batch of inputs with integer class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs vs {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(&self, rows: &[usize]) -> Result<Batch> {
        let inputs = self.inputs.gather_rows(rows)?;
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Ok(Batch { inputs, labels })
    }
}

/// One layer of the fixed set. `GlobalAvgPool` lowers to a full-window
/// average pool plus flatten when the model is built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense { units: usize },
    Conv2d { channels: usize, kernel: usize, stride: usize, pad: usize },
    Relu,
    MaxPool2d { size: usize, stride: usize },
    AvgPool2d { size: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
}

/// Architecture description: input shape, class count, and the encoder and
/// decoder layer lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub encoder: Vec<LayerKind>,
    pub decoder: Vec<LayerKind>,
}

/// Shape bookkeeping while walking a layer list.
#[derive(Debug, Clone, PartialEq)]
enum Feat {
    Spatial { c: usize, h: usize, w: usize },
    Flat { d: usize },
}

impl Feat {
    fn from_input(shape: &[usize]) -> Result<Feat> {
        match shape {
            [d] => Ok(Feat::Flat { d: *d }),
            [c, h, w] => Ok(Feat::Spatial { c: *c, h: *h, w: *w }),
            other => Err(Error::Shape(format!(
                "input shape must be [D] or [C,H,W], got {other:?}"
            ))),
        }
    }

    fn flat_dim(&self) -> usize {
        match self {
            Feat::Flat { d } => *d,
            Feat::Spatial { c, h, w } => c * h * w,
        }
    }
}

fn walk_layer(feat: &Feat, layer: &LayerKind) -> Result<Feat> {
    match layer {
        LayerKind::Dense { units } => {
            if *units == 0 {
                return Err(Error::Invalid("dense units must be positive".into()));
            }
            match feat {
                Feat::Flat { .. } => Ok(Feat::Flat { d: *units }),
                Feat::Spatial { .. } => Err(Error::Shape(
                    "dense layer on spatial features; add flatten first".into(),
                )),
            }
        }
        LayerKind::Conv2d { channels, kernel, stride, pad } => match feat {
            Feat::Spatial { h, w, .. } => {
                if *channels == 0 || *kernel == 0 || *stride == 0 {
                    return Err(Error::Invalid("conv2d dims must be positive".into()));
                }
                if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                    return Err(Error::Shape(format!(
                        "conv kernel {kernel} too large for {h}x{w} input with pad {pad}"
                    )));
                }
                Ok(Feat::Spatial {
                    c: *channels,
                    h: (h + 2 * pad - kernel) / stride + 1,
                    w: (w + 2 * pad - kernel) / stride + 1,
                })
            }
            Feat::Flat { .. } => Err(Error::Shape("conv2d on flat features".into())),
        },
        LayerKind::Relu => Ok(feat.clone()),
        LayerKind::MaxPool2d { size, stride } | LayerKind::AvgPool2d { size, stride } => {
            match feat {
                Feat::Spatial { c, h, w } => {
                    if *size == 0 || *stride == 0 || h < size || w < size {
                        return Err(Error::Shape(format!(
                            "pool window {size} invalid for {h}x{w} input"
                        )));
                    }
                    Ok(Feat::Spatial {
                        c: *c,
                        h: (h - size) / stride + 1,
                        w: (w - size) / stride + 1,
                    })
                }
                Feat::Flat { .. } => Err(Error::Shape("pooling on flat features".into())),
            }
        }
        LayerKind::GlobalAvgPool => match feat {
            Feat::Spatial { c, .. } => Ok(Feat::Flat { d: *c }),
            Feat::Flat { .. } => Err(Error::Shape("global pool on flat features".into())),
        },
        LayerKind::Flatten => Ok(Feat::Flat { d: feat.flat_dim() }),
    }
}

impl ModelSpec {
    /// Single affine map; the encoder is just a flatten, so the feature
    /// dimension equals the input dimension.
    pub fn linear(input_shape: Vec<usize>, classes: usize) -> ModelSpec {
        ModelSpec {
            name: "linear".into(),
            input_shape,
            classes,
            encoder: vec![LayerKind::Flatten],
            decoder: vec![LayerKind::Dense { units: classes }],
        }
    }

    /// Fully connected net: flatten, then `hidden` dense+relu blocks; the
    /// decoder is the final classification head.
    pub fn mlp(input_shape: Vec<usize>, hidden: &[usize], classes: usize) -> ModelSpec {
        let mut encoder = vec![LayerKind::Flatten];
        for &h in hidden {
            encoder.push(LayerKind::Dense { units: h });
            encoder.push(LayerKind::Relu);
        }
        ModelSpec {
            name: "mlp".into(),
            input_shape,
            classes,
            encoder,
            decoder: vec![LayerKind::Dense { units: classes }],
        }
    }

    /// Four convolution blocks then a global average pool; the decoder is a
    /// linear head over the 128 pooled channels.
    pub fn mnist_cnn(in_channels: usize, image: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            name: "mnist-cnn".into(),
            input_shape: vec![in_channels, image, image],
            classes,
            encoder: vec![
                LayerKind::Conv2d { channels: 64, kernel: 3, stride: 1, pad: 1 },
                LayerKind::Relu,
                LayerKind::Conv2d { channels: 128, kernel: 3, stride: 2, pad: 1 },
                LayerKind::Relu,
                LayerKind::Conv2d { channels: 128, kernel: 3, stride: 1, pad: 1 },
                LayerKind::Relu,
                LayerKind::Conv2d { channels: 128, kernel: 3, stride: 1, pad: 1 },
                LayerKind::Relu,
                LayerKind::GlobalAvgPool,
            ],
            decoder: vec![LayerKind::Dense { units: classes }],
        }
    }

    /// Looks up a registered architecture by name.
    pub fn by_name(
        arch: &str,
        input_shape: Vec<usize>,
        classes: usize,
        hidden: &[usize],
    ) -> Result<ModelSpec> {
        match arch {
            "linear" => Ok(ModelSpec::linear(input_shape, classes)),
            "mlp" => {
                let hidden = if hidden.is_empty() { &[128][..] } else { hidden };
                Ok(ModelSpec::mlp(input_shape, hidden, classes))
            }
            "mnist-cnn" => match input_shape.as_slice() {
                [c, h, w] if h == w => Ok(ModelSpec::mnist_cnn(*c, *h, classes)),
                other => Err(Error::Shape(format!(
                    "mnist-cnn wants square [C,H,W] input, got {other:?}"
                ))),
            },
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }

    /// Feature dimension at the encoder/decoder boundary.
    pub fn feature_dim(&self) -> Result<usize> {
        let mut feat = Feat::from_input(&self.input_shape)?;
        for l in &self.encoder {
            feat = walk_layer(&feat, l)?;
        }
        Ok(feat.flat_dim())
    }

    /// Total parameter count, a pure function of the spec.
    pub fn param_count(&self) -> Result<usize> {
        let mut feat = Feat::from_input(&self.input_shape)?;
        let mut count = 0usize;
        for l in self.encoder.iter().chain(&self.decoder) {
            match (l, &feat) {
                (LayerKind::Dense { units }, f) => {
                    count += f.flat_dim() * units + units;
                }
                (LayerKind::Conv2d { channels, kernel, .. }, Feat::Spatial { c, .. }) => {
                    count += channels * c * kernel * kernel + channels;
                }
                _ => {}
            }
            feat = walk_layer(&feat, l)?;
        }
        Ok(count)
    }

    /// Plain-text form: one `key value...` line per item.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("name {}\n", self.name));
        out.push_str(&format!(
            "input {}\n",
            self.input_shape
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("x")
        ));
        out.push_str(&format!("classes {}\n", self.classes));
        for (section, layers) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for l in layers {
                let desc = match l {
                    LayerKind::Dense { units } => format!("dense {units}"),
                    LayerKind::Conv2d { channels, kernel, stride, pad } => {
                        format!("conv {channels} {kernel} {stride} {pad}")
                    }
                    LayerKind::Relu => "relu".into(),
                    LayerKind::MaxPool2d { size, stride } => format!("maxpool {size} {stride}"),
                    LayerKind::AvgPool2d { size, stride } => format!("avgpool {size} {stride}"),
                    LayerKind::GlobalAvgPool => "gap".into(),
                    LayerKind::Flatten => "flatten".into(),
                };
                out.push_str(&format!("{section} {desc}\n"));
            }
        }
        out
    }

    /// Parses the plain-text form produced by [`ModelSpec::emit`].
    pub fn parse(text: &str) -> Result<ModelSpec> {
        let mut name = None;
        let mut input_shape = None;
        let mut classes = None;
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            let bad = |msg: &str| Error::Parse(format!("line {}: {msg}: {line}", lineno + 1));
            let int = |s: &str, msg: &str| -> Result<usize> {
                s.parse::<usize>().map_err(|_| bad(msg))
            };
            match key {
                "name" => name = Some(rest.join(" ")),
                "input" => {
                    let dims: Result<Vec<usize>> = rest
                        .join("")
                        .split('x')
                        .map(|s| int(s, "bad input dim"))
                        .collect();
                    input_shape = Some(dims?);
                }
                "classes" => classes = Some(int(rest.first().ok_or_else(|| bad("missing value"))?, "bad classes")?),
                "encoder" | "decoder" => {
                    let kind = *rest.first().ok_or_else(|| bad("missing layer kind"))?;
                    let args = &rest[1..];
                    let layer = match kind {
                        "dense" => LayerKind::Dense {
                            units: int(args.first().ok_or_else(|| bad("dense wants units"))?, "bad units")?,
                        },
                        "conv" => {
                            if args.len() != 4 {
                                return Err(bad("conv wants: channels kernel stride pad"));
                            }
                            LayerKind::Conv2d {
                                channels: int(args[0], "bad channels")?,
                                kernel: int(args[1], "bad kernel")?,
                                stride: int(args[2], "bad stride")?,
                                pad: int(args[3], "bad pad")?,
                            }
                        }
                        "relu" => LayerKind::Relu,
                        "maxpool" => {
                            if args.len() != 2 {
                                return Err(bad("maxpool wants: size stride"));
                            }
                            LayerKind::MaxPool2d { size: int(args[0], "bad size")?, stride: int(args[1], "bad stride")? }
                        }
                        "avgpool" => {
                            if args.len() != 2 {
                                return Err(bad("avgpool wants: size stride"));
                            }
                            LayerKind::AvgPool2d { size: int(args[0], "bad size")?, stride: int(args[1], "bad stride")? }
                        }
                        "gap" => LayerKind::GlobalAvgPool,
                        "flatten" => LayerKind::Flatten,
                        other => return Err(bad(&format!("unknown layer kind {other}"))),
                    };
                    if key == "encoder" {
                        encoder.push(layer);
                    } else {
                        decoder.push(layer);
                    }
                }
                other => return Err(bad(&format!("unknown key {other}"))),
            }
        }
        let spec = ModelSpec {
            name: name.ok_or_else(|| Error::Parse("missing name line".into()))?,
            input_shape: input_shape.ok_or_else(|| Error::Parse("missing input line".into()))?,
            classes: classes.ok_or_else(|| Error::Parse("missing classes line".into()))?,
            encoder,
            decoder,
        };
        spec.feature_dim()?; // validates composition
        Ok(spec)
    }
}

/// A built model: spec plus initialized parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub feature_dim: usize,
}

/// Result of an untaped forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub features: Tensor,
    pub logits: Tensor,
}

/// Deterministically initializes a model from a spec: weights are uniform
/// with fan-in scaling (U(-1/sqrt(fan_in), 1/sqrt(fan_in))), biases zero,
/// drawn in layer order from the seeded generator.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    if spec.classes == 0 {
        return Err(Error::Invalid("model needs at least one class".into()));
    }
    let feature_dim = spec.feature_dim()?;
    let mut feat = Feat::from_input(&spec.input_shape)?;
    let mut params = ParamSet::new();
    let mut rng = rng_from(seed, "init", 0);
    let mut init = |params: &mut ParamSet, name: &str, shape: Vec<usize>, fan_in: usize| -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        params.insert(name, Tensor::new(shape, data)?)
    };
    for (section, layers) in [("enc", &spec.encoder), ("dec", &spec.decoder)] {
        for (i, l) in layers.iter().enumerate() {
            match (l, &feat) {
                (LayerKind::Dense { units }, f) => {
                    let d = f.flat_dim();
                    init(&mut params, &format!("{section}.{i}.w"), vec![d, *units], d)?;
                    params.insert(&format!("{section}.{i}.b"), Tensor::zeros(vec![*units]))?;
                }
                (LayerKind::Conv2d { channels, kernel, .. }, Feat::Spatial { c, .. }) => {
                    let fan_in = c * kernel * kernel;
                    init(
                        &mut params,
                        &format!("{section}.{i}.w"),
                        vec![*channels, *c, *kernel, *kernel],
                        fan_in,
                    )?;
                    params.insert(&format!("{section}.{i}.b"), Tensor::zeros(vec![*channels]))?;
                }
                _ => {}
            }
            feat = walk_layer(&feat, l)?;
        }
    }
    match &feat {
        Feat::Flat { d } if *d == spec.classes => {}
        other => {
            return Err(Error::Shape(format!(
                "decoder output {other:?} does not match {} classes",
                spec.classes
            )))
        }
    }
    Ok(Model { spec: spec.clone(), params, feature_dim })
}

impl Model {
    fn batch_input_shape(&self, x: &Tensor) -> Result<usize> {
        let want = &self.spec.input_shape;
        let got = x.shape();
        if got.len() != want.len() + 1 || &got[1..] != want.as_slice() {
            return Err(Error::Shape(format!(
                "batch shape {got:?} does not match input shape {want:?}"
            )));
        }
        Ok(got[0])
    }

    fn run_layers(
        &self,
        tape: &mut Tape,
        section: &str,
        layers: &[LayerKind],
        mut id: BufId,
    ) -> Result<BufId> {
        for (i, l) in layers.iter().enumerate() {
            id = match l {
                LayerKind::Dense { .. } => {
                    let w = tape.param(&self.params, &format!("{section}.{i}.w"))?;
                    let b = tape.param(&self.params, &format!("{section}.{i}.b"))?;
                    tape.dense(id, w, b)?
                }
                LayerKind::Conv2d { stride, pad, .. } => {
                    let w = tape.param(&self.params, &format!("{section}.{i}.w"))?;
                    let b = tape.param(&self.params, &format!("{section}.{i}.b"))?;
                    tape.conv2d(id, w, b, (*stride, *stride), (*pad, *pad))?
                }
                LayerKind::Relu => tape.relu(id)?,
                LayerKind::MaxPool2d { size, stride } => {
                    tape.max_pool2d(id, (*size, *size), (*stride, *stride))?
                }
                LayerKind::AvgPool2d { size, stride } => {
                    tape.avg_pool2d(id, (*size, *size), (*stride, *stride))?
                }
                LayerKind::GlobalAvgPool => {
                    let s = tape.value(id).shape();
                    let (h, w) = (s[2], s[3]);
                    let pooled = tape.avg_pool2d(id, (h, w), (1, 1))?;
                    tape.flatten(pooled)?
                }
                LayerKind::Flatten => tape.flatten(id)?,
            };
        }
        Ok(id)
    }

    /// Taped split forward: features = encoder(x), logits = decoder(mask ⊙
    /// features). `mask` is a `[B, feature_dim]` tensor already on the tape;
    /// absent mask means no multiply is recorded at all.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: BufId,
        mask: Option<BufId>,
    ) -> Result<(BufId, BufId)> {
        self.batch_input_shape(tape.value(x))?;
        let features = self.run_layers(tape, "enc", &self.spec.encoder, x)?;
        let fs = tape.value(features).shape();
        if fs.len() != 2 || fs[1] != self.feature_dim {
            return Err(Error::Shape(format!(
                "encoder output {fs:?} does not match feature_dim {}",
                self.feature_dim
            )));
        }
        let boundary = match mask {
            Some(m) => {
                let ms = tape.value(m).shape();
                if ms != tape.value(features).shape() {
                    return Err(Error::Shape(format!(
                        "mask shape {ms:?} vs features {:?}",
                        tape.value(features).shape()
                    )));
                }
                tape.mul(features, m)?
            }
            None => features,
        };
        let logits = self.run_layers(tape, "dec", &self.spec.decoder, boundary)?;
        Ok((features, logits))
    }

    /// Decoder alone on an existing feature buffer.
    pub fn decoder_on_tape(&self, tape: &mut Tape, features: BufId) -> Result<BufId> {
        self.run_layers(tape, "dec", &self.spec.decoder, features)
    }

    /// Untaped convenience forward. A `[feature_dim]` mask is broadcast over
    /// the batch.
    pub fn forward(&self, x: &Tensor, mask: Option<&[f64]>) -> Result<ForwardPass> {
        let n = self.batch_input_shape(x)?;
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let mask_id = match mask {
            Some(bits) => {
                if bits.len() != self.feature_dim {
                    return Err(Error::Shape(format!(
                        "mask length {} vs feature_dim {}",
                        bits.len(),
                        self.feature_dim
                    )));
                }
                let mut data = Vec::with_capacity(n * bits.len());
                for _ in 0..n {
                    data.extend_from_slice(bits);
                }
                Some(tape.input(Tensor::new(vec![n, bits.len()], data)?))
            }
            None => None,
        };
        let (f, l) = self.forward_on_tape(&mut tape, xi, mask_id)?;
        Ok(ForwardPass {
            features: tape.value(f).clone(),
            logits: tape.value(l).clone(),
        })
    }

    /// Runs encoder and decoder as one unsplit layer list, with no boundary
    /// staging. Used to check the composition identity.
    pub fn forward_unsplit(&self, x: &Tensor) -> Result<Tensor> {
        self.batch_input_shape(x)?;
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let f = self.run_layers(&mut tape, "enc", &self.spec.encoder, xi)?;
        let l = self.run_layers(&mut tape, "dec", &self.spec.decoder, f)?;
        Ok(tape.value(l).clone())
    }

    /// Per-sample softmax cross-entropy losses, untaped.
    pub fn per_sample_losses(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xi = tape.input(batch.inputs.clone());
        let (_, logits) = self.forward_on_tape(&mut tape, xi, None)?;
        let losses = tape.softmax_xent(logits, batch.labels.clone())?;
        Ok(tape.value(losses).data().to_vec())
    }

    /// Encoder output right before the global average pool: the spatial
    /// feature maps `[B, C, h, w]`. Errors when the encoder has no such
    /// stage (e.g. MLPs).
    pub fn forward_spatial(&self, x: &Tensor) -> Result<Tensor> {
        self.batch_input_shape(x)?;
        let gap_at = self
            .spec
            .encoder
            .iter()
            .position(|l| matches!(l, LayerKind::GlobalAvgPool))
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "architecture {} has no spatial feature maps before a global pool",
                    self.spec.name
                ))
            })?;
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let maps = self.run_layers(&mut tape, "enc", &self.spec.encoder[..gap_at], xi)?;
        if tape.value(maps).shape().len() != 4 {
            return Err(Error::Shape("expected spatial maps before global pool".into()));
        }
        Ok(tape.value(maps).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_param_count() {
        // input 4, classes 2 -> 4*2 + 2 = 10
        let spec = ModelSpec::linear(vec![4], 2);
        assert_eq!(spec.param_count().unwrap(), 10);
        let m = build_model(&spec, 0).unwrap();
        assert_eq!(m.params.param_count(), 10);
        assert_eq!(m.feature_dim, 4);
    }

    #[test]
    fn mnist_cnn_param_count_matches_hand_count() {
        // conv1 64*2*9+64, conv2 128*64*9+128, conv3/conv4 128*128*9+128, head 128*2+2
        let spec = ModelSpec::mnist_cnn(2, 28, 2);
        let hand = (64 * 2 * 9 + 64)
            + (128 * 64 * 9 + 128)
            + (128 * 128 * 9 + 128)
            + (128 * 128 * 9 + 128)
            + (128 * 2 + 2);
        assert_eq!(spec.param_count().unwrap(), hand);
        assert_eq!(spec.feature_dim().unwrap(), 128);
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ModelSpec::mlp(vec![6], &[5], 3);
        let a = build_model(&spec, 99).unwrap();
        let b = build_model(&spec, 99).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
        let c = build_model(&spec, 100).unwrap();
        assert!(!a.params.bitwise_eq(&c.params));
    }

    #[test]
    fn unknown_architecture_is_an_error() {
        assert!(matches!(
            ModelSpec::by_name("resnet18", vec![3, 8, 8], 2, &[]),
            Err(Error::UnknownArch(_))
        ));
    }

    #[test]
    fn incomposable_shapes_rejected() {
        let spec = ModelSpec {
            name: "bad".into(),
            input_shape: vec![4],
            classes: 2,
            encoder: vec![LayerKind::Conv2d { channels: 3, kernel: 3, stride: 1, pad: 0 }],
            decoder: vec![LayerKind::Dense { units: 2 }],
        };
        assert!(build_model(&spec, 0).is_err());
    }

    #[test]
    fn all_ones_mask_matches_maskless_and_unsplit_bitwise() {
        let spec = ModelSpec::mlp(vec![5], &[4], 3);
        let m = build_model(&spec, 7).unwrap();
        let x = Tensor::new(vec![2, 5], (0..10).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let plain = m.forward(&x, None).unwrap();
        let ones = vec![1.0; m.feature_dim];
        let masked = m.forward(&x, Some(&ones)).unwrap();
        let unsplit = m.forward_unsplit(&x).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&plain.logits), bits(&masked.logits));
        assert_eq!(bits(&plain.logits), bits(&unsplit));
    }

    #[test]
    fn zero_mask_on_linear_decoder_yields_bias() {
        let spec = ModelSpec::mlp(vec![3], &[4], 2);
        let mut m = build_model(&spec, 1).unwrap();
        // give the decoder a recognizable bias
        let bias = Tensor::new(vec![2], vec![0.25, -0.75]).unwrap();
        m.params.get_mut("dec.0.b").unwrap().value = bias;
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let out = m.forward(&x, Some(&vec![0.0; m.feature_dim])).unwrap();
        for row in 0..2 {
            assert_eq!(&out.logits.data()[row * 2..row * 2 + 2], &[0.25, -0.75]);
        }
    }

    #[test]
    fn masked_feature_removes_exactly_its_weight_contribution() {
        // linear model: masking feature j zeroes column j's contribution, so
        // masked logits equal maskless logits minus x_j * W[j, :]
        let spec = ModelSpec::linear(vec![3], 2);
        let m = build_model(&spec, 6).unwrap();
        let w = m.params.get("dec.0.w").unwrap().value.clone();
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.5, 2.0, 1.0, 0.25, -0.75]).unwrap();
        let plain = m.forward(&x, None).unwrap();
        let mask = vec![1.0, 0.0, 1.0]; // mute feature 1
        let masked = m.forward(&x, Some(&mask)).unwrap();
        for row in 0..2 {
            for class in 0..2 {
                let contribution = x.data()[row * 3 + 1] * w.data()[2 + class];
                let want = plain.logits.data()[row * 2 + class] - contribution;
                let got = masked.logits.data()[row * 2 + class];
                assert!((want - got).abs() < 1e-12, "row {row} class {class}");
            }
        }
    }

    #[test]
    fn masking_is_idempotent() {
        let spec = ModelSpec::mlp(vec![4], &[6], 2);
        let m = build_model(&spec, 3).unwrap();
        let x = Tensor::new(vec![1, 4], vec![0.2, -0.4, 0.6, 1.0]).unwrap();
        let mask: Vec<f64> = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let once = m.forward(&x, Some(&mask)).unwrap();
        // applying the same mask to already-masked features changes nothing
        let masked_feats: Vec<f64> = once
            .features
            .data()
            .iter()
            .zip(mask.iter().cycle())
            .map(|(f, m)| f * m)
            .collect();
        let twice: Vec<f64> = masked_feats
            .iter()
            .zip(mask.iter().cycle())
            .map(|(f, m)| f * m)
            .collect();
        assert_eq!(masked_feats, twice);
    }

    #[test]
    fn batch_forward_equals_stacked_single_forwards() {
        let spec = ModelSpec::mlp(vec![4], &[5], 3);
        let m = build_model(&spec, 11).unwrap();
        let rows = [
            vec![0.1, -0.2, 0.3, 0.4],
            vec![1.0, 0.0, -1.0, 0.5],
            vec![-0.7, 0.7, 0.2, -0.1],
        ];
        let mut flat = Vec::new();
        for r in &rows {
            flat.extend_from_slice(r);
        }
        let batch = m
            .forward(&Tensor::new(vec![3, 4], flat).unwrap(), None)
            .unwrap();
        for (i, r) in rows.iter().enumerate() {
            let single = m
                .forward(&Tensor::new(vec![1, 4], r.clone()).unwrap(), None)
                .unwrap();
            for j in 0..3 {
                let a = batch.logits.data()[i * 3 + j];
                let b = single.logits.data()[j];
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn shipped_arch_files_parse_and_count() {
        let cnn = ModelSpec::parse(include_str!("../assets/arch/mnist_cnn.txt")).unwrap();
        assert_eq!(cnn, ModelSpec::mnist_cnn(2, 28, 2));
        assert_eq!(cnn.param_count().unwrap(), 370_498); // hand count in the file
        let mlp = ModelSpec::parse(include_str!("../assets/arch/mlp.txt")).unwrap();
        assert_eq!(mlp, ModelSpec::mlp(vec![2, 28, 28], &[128], 2));
        let linear = ModelSpec::parse(include_str!("../assets/arch/linear.txt")).unwrap();
        assert_eq!(linear, ModelSpec::linear(vec![2, 28, 28], 2));
    }

    #[test]
    fn spec_text_round_trips() {
        let spec = ModelSpec::mnist_cnn(2, 28, 2);
        let text = spec.emit();
        let back = ModelSpec::parse(&text).unwrap();
        assert_eq!(spec, back);
        assert!(ModelSpec::parse("name x\ninput 4\nclasses 2\nencoder wat 3\n").is_err());
    }
}
