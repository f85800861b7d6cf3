//! Model checkpoints: a flat binary of named 32-bit float arrays plus a text
//! manifest carrying the architecture and per-tensor (name, shape, offset).
//!
//! `<path>` holds the little-endian f32 data; `<path>.manifest` is the text
//! side. Values are narrowed to f32 on write and widened on read.

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelSpec};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest");
    os.into()
}

/// Writes `model` to `path` (binary) and `path.manifest` (text).
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let mut lines = String::new();
    lines.push_str("w2d-checkpoint 1\n");
    lines.push_str("[arch]\n");
    lines.push_str(&model.spec.emit());
    lines.push_str("[tensors]\n");
    for (name, p) in model.params.iter() {
        let offset = blob.len();
        for v in p.value.data() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let dims = p
            .value
            .shape()
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        lines.push_str(&format!("{name} {dims} {offset} {}\n", blob.len() - offset));
    }
    fs::write(path, &blob)?;
    fs::write(manifest_path(path), lines)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<Model> {
    let blob = fs::read(path)?;
    let text = fs::read_to_string(manifest_path(path))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("w2d-checkpoint 1") => {}
        other => return Err(Error::Parse(format!("bad checkpoint header: {other:?}"))),
    }
    if lines.next() != Some("[arch]") {
        return Err(Error::Parse("missing [arch] section".into()));
    }
    let mut arch_text = String::new();
    let mut tensor_lines = Vec::new();
    let mut in_tensors = false;
    for line in lines {
        if line == "[tensors]" {
            in_tensors = true;
            continue;
        }
        if in_tensors {
            tensor_lines.push(line);
        } else {
            arch_text.push_str(line);
            arch_text.push('\n');
        }
    }
    let spec = ModelSpec::parse(&arch_text)?;
    let mut model = build_model(&spec, 0)?;
    for line in tensor_lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Parse(format!("bad tensor line: {line}")));
        }
        let name = parts[0];
        let dims: Vec<usize> = parts[1]
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad dims: {line}"))))
            .collect::<Result<_>>()?;
        let offset: usize = parts[2]
            .parse()
            .map_err(|_| Error::Parse(format!("bad offset: {line}")))?;
        let nbytes: usize = parts[3]
            .parse()
            .map_err(|_| Error::Parse(format!("bad length: {line}")))?;
        if offset + nbytes > blob.len() || nbytes % 4 != 0 {
            return Err(Error::Parse(format!("tensor {name} outside blob")));
        }
        let vals: Vec<f64> = blob[offset..offset + nbytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(dims, vals)?;
        let p = model
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Parse(format!("tensor {name} not in architecture")))?;
        if p.value.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "checkpoint shape {:?} vs model shape {:?} for {name}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    Ok(model)
}
