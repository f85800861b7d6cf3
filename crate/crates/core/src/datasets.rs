//! Deterministic dataset generation: colored-digit environments and a
//! synthetic two-shift benchmark, plus environment splitting.
//!
//! Generators are pure functions of their seed and parameters. All pixel
//! values are quantized to the f32 grid at generation time so that bundles
//! round-trip bit-exactly through the 32-bit on-disk format.

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::prng::rng_from;
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Role of an environment within a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Test,
}

/// A named distribution environment: inputs `[n, C, H, W]`, labels, and the
/// generating parameters recorded as metadata.
#[derive(Debug, Clone)]
pub struct Environment {
    pub name: String,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub metadata: IndexMap<String, String>,
}

impl Environment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.labels.clone())
    }

    /// Index of the channel with the largest mass for sample `i`. For
    /// two-channel colored digits this recovers the color bit.
    pub fn dominant_channel(&self, i: usize) -> usize {
        let shape = self.inputs.shape();
        let (c, rest): (usize, usize) = (shape[1], shape[2..].iter().product());
        let base = i * c * rest;
        let data = self.inputs.data();
        (0..c)
            .map(|ch| data[base + ch * rest..base + (ch + 1) * rest].iter().sum::<f64>())
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (j, v)| {
                if v > bv { (j, v) } else { (bi, bv) }
            })
            .0
    }
}

/// Labeled environments plus their train/test roles.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub environments: Vec<Environment>,
    pub roles: IndexMap<String, Role>,
}

impl DatasetBundle {
    pub fn new(environments: Vec<Environment>, roles: IndexMap<String, Role>) -> Result<Self> {
        let bundle = DatasetBundle { environments, roles };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        for name in self.roles.keys() {
            if self.environment(name).is_none() {
                return Err(Error::Config(format!("role for unknown environment {name}")));
            }
        }
        let mut train = 0;
        let mut test = 0;
        for env in &self.environments {
            match self.roles.get(&env.name) {
                Some(Role::Train) => train += 1,
                Some(Role::Test) => test += 1,
                None => {
                    return Err(Error::Config(format!("environment {} has no role", env.name)))
                }
            }
        }
        if train == 0 || test == 0 {
            return Err(Error::Config(
                "bundle needs at least one train and one test environment".into(),
            ));
        }
        Ok(())
    }

    pub fn environment(&self, name: &str) -> Option<&Environment> {
        self.environments.iter().find(|e| e.name == name)
    }

    pub fn role(&self, name: &str) -> Option<Role> {
        self.roles.get(name).copied()
    }

    pub fn set_role(&mut self, name: &str, role: Role) -> Result<()> {
        if self.environment(name).is_none() {
            return Err(Error::Config(format!("unknown environment {name}")));
        }
        self.roles.insert(name.to_string(), role);
        Ok(())
    }

    pub fn train_names(&self) -> Vec<String> {
        self.environments
            .iter()
            .filter(|e| self.role(&e.name) == Some(Role::Train))
            .map(|e| e.name.clone())
            .collect()
    }

    /// Collapses the channels of every environment by summation, removing
    /// any color information while keeping the digit shapes.
    pub fn to_grayscale(&self) -> Result<DatasetBundle> {
        let mut envs = Vec::with_capacity(self.environments.len());
        for env in &self.environments {
            let shape = env.inputs.shape();
            let (n, c) = (shape[0], shape[1]);
            let hw: usize = shape[2..].iter().product();
            let src = env.inputs.data();
            let mut data = vec![0.0; n * hw];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    for p in 0..hw {
                        data[i * hw + p] += src[base + p];
                    }
                }
            }
            let mut new_shape = vec![n, 1];
            new_shape.extend_from_slice(&shape[2..]);
            let mut metadata = env.metadata.clone();
            metadata.insert("grayscale".into(), "1".into());
            envs.push(Environment {
                name: env.name.clone(),
                inputs: Tensor::new(new_shape, data)?,
                labels: env.labels.clone(),
                metadata,
            });
        }
        Ok(DatasetBundle { environments: envs, roles: self.roles.clone() })
    }
}

/// Seeded train/validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub validation_fraction: f64,
    pub seed: u64,
}

/// Splits an environment into `(train part, val part)` of sizes
/// `(n - round(n * fraction), round(n * fraction))` via a seeded uniform
/// permutation. Rows within each part keep ascending original order.
pub fn split_environment(env: &Environment, spec: &SplitSpec) -> Result<(Environment, Environment)> {
    if env.is_empty() {
        return Err(Error::Empty(format!("environment {} is empty", env.name)));
    }
    if !(spec.validation_fraction > 0.0 && spec.validation_fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "validation fraction {} outside (0, 1)",
            spec.validation_fraction
        )));
    }
    let n = env.len();
    let n_val = (n as f64 * spec.validation_fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Invalid(format!(
            "fraction {} yields an empty part for n = {n}",
            spec.validation_fraction
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    perm.shuffle(&mut rng_from(spec.seed, &format!("split-{}", env.name), 0));
    let mut val_rows: Vec<usize> = perm[..n_val].to_vec();
    let mut train_rows: Vec<usize> = perm[n_val..].to_vec();
    val_rows.sort_unstable();
    train_rows.sort_unstable();
    let part = |rows: &[usize], tag: &str| -> Result<Environment> {
        let mut metadata = env.metadata.clone();
        metadata.insert("split".into(), tag.into());
        Ok(Environment {
            name: env.name.clone(),
            inputs: env.inputs.gather_rows(rows)?,
            labels: rows.iter().map(|&r| env.labels[r]).collect(),
            metadata,
        })
    };
    Ok((part(&train_rows, "train")?, part(&val_rows, "val")?))
}

// ---------------------------------------------------------------------------
// digit source
// ---------------------------------------------------------------------------

/// Grayscale digit images with ground-truth digit labels, the raw material
/// for the colored environments.
#[derive(Debug, Clone)]
pub struct DigitSource {
    /// `[n, side, side]` values in [0, 1], already on the f32 grid.
    pub pixels: Vec<f64>,
    pub labels: Vec<u8>,
    pub side: usize,
}

impl DigitSource {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

const GLYPHS: [[&str; 7]; 10] = [
    [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    [".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    [".###.", "#....", "####.", "#...#", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", "..#..", "..#..", "..#.."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."],
];

const DIGIT_SIDE: usize = 28;

fn f32_grid(v: f64) -> f64 {
    (v as f32) as f64
}

/// Renders a deterministic corpus of 28x28 digit images. Each image is a 5x7
/// glyph under a random scale and offset, with ink jitter, pixel dropout,
/// and background speckle, all drawn from a per-sample seeded stream. Digits
/// cycle 0..9 so every contiguous slice is class-balanced.
pub fn synth_digits(n: usize, seed: u64) -> Result<DigitSource> {
    if n == 0 {
        return Err(Error::Empty("digit corpus of size zero".into()));
    }
    let side = DIGIT_SIDE;
    let mut pixels = vec![0.0f64; n * side * side];
    let mut labels = vec![0u8; n];
    for i in 0..n {
        let digit = (i % 10) as u8;
        labels[i] = digit;
        let glyph = &GLYPHS[digit as usize];
        let mut rng = rng_from(seed, "digit", i as u64);
        let sx: f64 = rng.gen_range(3.4..4.2);
        let sy: f64 = rng.gen_range(3.2..4.0);
        let ox: f64 = rng.gen_range(0.0..(side as f64 - 5.0 * sx));
        let oy: f64 = rng.gen_range(0.0..(side as f64 - 7.0 * sy));
        let ink: f64 = rng.gen_range(0.85..1.0);
        let img = &mut pixels[i * side * side..(i + 1) * side * side];
        for y in 0..side {
            for x in 0..side {
                // fixed two draws per pixel keeps the stream layout stable
                let speckle: f64 = rng.gen_range(0.0..0.06);
                let drop: f64 = rng.gen();
                let gx = ((x as f64 - ox) / sx).floor();
                let gy = ((y as f64 - oy) / sy).floor();
                let mut v = speckle;
                if (0.0..5.0).contains(&gx) && (0.0..7.0).contains(&gy) {
                    let on = glyph[gy as usize].as_bytes()[gx as usize] == b'#';
                    if on && drop > 0.03 {
                        v = (ink - speckle).max(0.0);
                    }
                }
                img[y * side + x] = f32_grid(v);
            }
        }
    }
    Ok(DigitSource { pixels, labels, side })
}

// ---------------------------------------------------------------------------
// colored digits
// ---------------------------------------------------------------------------

/// Builds the colored-digit environments: the binary label is (digit < 5)
/// flipped with `label_noise`; each environment paints the digit into one of
/// two channels, agreeing with the (noisy) label with probability
/// `1 - color_flip_prob`. The source is divided evenly across environments
/// in order, so environments are disjoint.
pub fn generate_cmnist(
    source: &DigitSource,
    seed: u64,
    label_noise: f64,
    env_params: &[(String, f64)],
) -> Result<DatasetBundle> {
    if source.is_empty() {
        return Err(Error::Empty("digit source is empty".into()));
    }
    if env_params.is_empty() {
        return Err(Error::Empty("no environments requested".into()));
    }
    if !(0.0..=1.0).contains(&label_noise) {
        return Err(Error::Invalid(format!("label_noise {label_noise} outside [0, 1]")));
    }
    for (name, p) in env_params {
        if !(0.0..=1.0).contains(p) {
            return Err(Error::Invalid(format!(
                "color_flip_prob {p} for environment {name} outside [0, 1]"
            )));
        }
    }
    let per_env = source.len() / env_params.len();
    if per_env == 0 {
        return Err(Error::Invalid(format!(
            "{} source digits cannot fill {} environments",
            source.len(),
            env_params.len()
        )));
    }
    let side = source.side;
    let hw = side * side;
    let mut environments = Vec::with_capacity(env_params.len());
    let mut roles = IndexMap::new();
    for (env_idx, (name, flip_prob)) in env_params.iter().enumerate() {
        let mut rng = rng_from(seed, &format!("cmnist-{name}"), env_idx as u64);
        let mut inputs = vec![0.0f64; per_env * 2 * hw];
        let mut labels = vec![0usize; per_env];
        for i in 0..per_env {
            let src = env_idx * per_env + i;
            let digit = source.labels[src];
            let mut y = usize::from(digit < 5);
            if rng.gen::<f64>() < label_noise {
                y = 1 - y;
            }
            let mut color = y;
            if rng.gen::<f64>() < *flip_prob {
                color = 1 - color;
            }
            labels[i] = y;
            let img = &source.pixels[src * hw..(src + 1) * hw];
            let dst = &mut inputs[(i * 2 + color) * hw..(i * 2 + color + 1) * hw];
            dst.copy_from_slice(img);
        }
        let mut metadata = IndexMap::new();
        metadata.insert("color_flip_prob".into(), format!("{flip_prob}"));
        metadata.insert("label_noise".into(), format!("{label_noise}"));
        metadata.insert("seed".into(), format!("{seed}"));
        environments.push(Environment {
            name: name.clone(),
            inputs: Tensor::new(vec![per_env, 2, side, side], inputs)?,
            labels,
            metadata,
        });
        // default roles: last listed environment is the test distribution
        let role = if env_idx + 1 == env_params.len() { Role::Test } else { Role::Train };
        roles.insert(name.clone(), role);
    }
    DatasetBundle::new(environments, roles)
}

/// The conventional three colored-digit environments.
pub fn default_cmnist_envs() -> Vec<(String, f64)> {
    vec![
        ("+90".to_string(), 0.1),
        ("+80".to_string(), 0.2),
        ("-90".to_string(), 0.9),
    ]
}

// ---------------------------------------------------------------------------
// two-shift synthetic benchmark
// ---------------------------------------------------------------------------

const SHIFT_SIDE: usize = 12;

/// Generates a train and a test environment of small two-channel images.
/// Channel 0 carries the class as a noisy bar (horizontal = class 0,
/// vertical = class 1). Channel 1 is a spurious fill level whose agreement
/// with the label is `(1 + correlation_strength) / 2` in train and
/// `(1 - correlation_strength) / 2` in test. `diversity_strength`
/// interpolates a style transform (contrast inversion plus a checker
/// texture) onto the test environment's shape channel. Both strengths at
/// zero make the two environments identically distributed.
pub fn generate_two_shift(
    seed: u64,
    diversity_strength: f64,
    correlation_strength: f64,
    n_per_env: usize,
) -> Result<DatasetBundle> {
    for (v, name) in [(diversity_strength, "diversity_strength"), (correlation_strength, "correlation_strength")] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Invalid(format!("{name} {v} outside [0, 1]")));
        }
    }
    if n_per_env == 0 {
        return Err(Error::Empty("two-shift environments of size zero".into()));
    }
    let side = SHIFT_SIDE;
    let hw = side * side;
    let mut environments = Vec::with_capacity(2);
    let mut roles = IndexMap::new();
    for (env_idx, env_name) in ["train", "test"].iter().enumerate() {
        let is_test = env_idx == 1;
        let agree_prob = if is_test {
            (1.0 - correlation_strength) / 2.0
        } else {
            (1.0 + correlation_strength) / 2.0
        };
        let style = if is_test { diversity_strength } else { 0.0 };
        let mut rng = rng_from(seed, &format!("two-shift-{env_name}"), env_idx as u64);
        let mut inputs = vec![0.0f64; n_per_env * 2 * hw];
        let mut labels = vec![0usize; n_per_env];
        for i in 0..n_per_env {
            let y = usize::from(rng.gen::<f64>() < 0.5);
            labels[i] = y;
            let pos = rng.gen_range(1..side - 2);
            let ink: f64 = rng.gen_range(0.55..0.95);
            let spurious_agrees = rng.gen::<f64>() < agree_prob;
            let s_bit = if spurious_agrees { y } else { 1 - y };
            let fill: f64 = if s_bit == 1 { rng.gen_range(0.7..0.9) } else { rng.gen_range(0.1..0.3) };
            let shape_ch = &mut inputs[i * 2 * hw..i * 2 * hw + hw];
            for py in 0..side {
                for px in 0..side {
                    let speckle: f64 = rng.gen_range(0.0..0.15);
                    let drop: f64 = rng.gen();
                    let on_bar = if y == 0 {
                        py == pos || py == pos + 1
                    } else {
                        px == pos || px == pos + 1
                    };
                    let mut v = speckle;
                    if on_bar && drop > 0.10 {
                        v = (ink - speckle * 0.5).max(0.0);
                    }
                    // style transform: contrast inversion plus checker texture
                    if style > 0.0 {
                        v = (1.0 - style) * v + style * (1.0 - v);
                        let checker = if (px + py) % 2 == 0 { 0.12 } else { -0.12 };
                        v = (v + style * checker).clamp(0.0, 1.0);
                    }
                    shape_ch[py * side + px] = f32_grid(v);
                }
            }
            let spur_ch = &mut inputs[i * 2 * hw + hw..(i + 1) * 2 * hw];
            for p in spur_ch.iter_mut() {
                let jitter: f64 = rng.gen_range(-0.05..0.05);
                *p = f32_grid((fill + jitter).clamp(0.0, 1.0));
            }
        }
        let mut metadata = IndexMap::new();
        metadata.insert("diversity_strength".into(), format!("{diversity_strength}"));
        metadata.insert("correlation_strength".into(), format!("{correlation_strength}"));
        metadata.insert("spurious_agree_prob".into(), format!("{agree_prob}"));
        metadata.insert("seed".into(), format!("{seed}"));
        environments.push(Environment {
            name: (*env_name).to_string(),
            inputs: Tensor::new(vec![n_per_env, 2, side, side], inputs)?,
            labels,
            metadata,
        });
        roles.insert(
            (*env_name).to_string(),
            if is_test { Role::Test } else { Role::Train },
        );
    }
    DatasetBundle::new(environments, roles)
}

/// Fraction of samples whose spurious fill level sits in the high band and
/// matches the label (or low band and matches label 0). Used by tests to
/// verify generated agreement rates by counting.
pub fn spurious_agreement(env: &Environment) -> f64 {
    let shape = env.inputs.shape();
    let hw: usize = shape[2..].iter().product();
    let data = env.inputs.data();
    let mut agree = 0usize;
    for i in 0..env.len() {
        let spur = &data[i * 2 * hw + hw..(i + 1) * 2 * hw];
        let mean: f64 = spur.iter().sum::<f64>() / hw as f64;
        let s_bit = usize::from(mean > 0.5);
        if s_bit == env.labels[i] {
            agree += 1;
        }
    }
    agree as f64 / env.len() as f64
}

/// Fraction of samples whose color channel matches the label, by counting.
pub fn color_agreement(env: &Environment) -> f64 {
    let mut agree = 0usize;
    for i in 0..env.len() {
        if env.dominant_channel(i) == env.labels[i] {
            agree += 1;
        }
    }
    agree as f64 / env.len() as f64
}
