//! Dataset bundle persistence: a text manifest plus one flat binary file per
//! environment (little-endian f32 inputs followed by u32 labels).

use crate::datasets::{DatasetBundle, Environment, Role};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use std::fs;
use std::path::Path;

/// Writes `manifest.txt` and `env_XXX.bin` files under `dir`.
pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("w2d-dataset 1\n");
    for (i, env) in bundle.environments.iter().enumerate() {
        let file = format!("env_{i:03}.bin");
        let mut blob: Vec<u8> =
            Vec::with_capacity(env.inputs.numel() * 4 + env.labels.len() * 4);
        for v in env.inputs.data() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for &l in &env.labels {
            blob.extend_from_slice(&(l as u32).to_le_bytes());
        }
        fs::write(dir.join(&file), blob)?;
        let role = match bundle.role(&env.name).expect("validated") {
            Role::Train => "train",
            Role::Test => "test",
        };
        let shape = env
            .inputs
            .shape()
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let mut line = format!("env {} role={role} shape={shape} file={file}", env.name);
        for (k, v) in &env.metadata {
            line.push_str(&format!(" meta:{k}={v}"));
        }
        manifest.push_str(&line);
        manifest.push('\n');
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Reads a bundle written by [`save_bundle`].
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("w2d-dataset 1") => {}
        other => return Err(Error::Parse(format!("bad dataset header: {other:?}"))),
    }
    let mut environments = Vec::new();
    let mut roles = IndexMap::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("env") {
            return Err(Error::Parse(format!("bad manifest line: {line}")));
        }
        let name = parts
            .next()
            .ok_or_else(|| Error::Parse(format!("missing name: {line}")))?
            .to_string();
        let mut role = None;
        let mut shape: Option<Vec<usize>> = None;
        let mut file = None;
        let mut metadata = IndexMap::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad field {p}: {line}")))?;
            match k {
                "role" => {
                    role = Some(match v {
                        "train" => Role::Train,
                        "test" => Role::Test,
                        other => return Err(Error::Parse(format!("bad role {other}"))),
                    })
                }
                "shape" => {
                    shape = Some(
                        v.split(',')
                            .map(|s| {
                                s.parse::<usize>()
                                    .map_err(|_| Error::Parse(format!("bad shape: {line}")))
                            })
                            .collect::<Result<_>>()?,
                    )
                }
                "file" => file = Some(v.to_string()),
                other => {
                    if let Some(meta_key) = other.strip_prefix("meta:") {
                        metadata.insert(meta_key.to_string(), v.to_string());
                    } else {
                        return Err(Error::Parse(format!("unknown field {other}: {line}")));
                    }
                }
            }
        }
        let shape = shape.ok_or_else(|| Error::Parse(format!("missing shape: {line}")))?;
        let file = file.ok_or_else(|| Error::Parse(format!("missing file: {line}")))?;
        let role = role.ok_or_else(|| Error::Parse(format!("missing role: {line}")))?;
        let blob = fs::read(dir.join(&file))?;
        let n_inputs: usize = shape.iter().product();
        let n = shape[0];
        if blob.len() != n_inputs * 4 + n * 4 {
            return Err(Error::Parse(format!(
                "environment {name}: file {file} has {} bytes, expected {}",
                blob.len(),
                n_inputs * 4 + n * 4
            )));
        }
        let inputs: Vec<f64> = blob[..n_inputs * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let labels: Vec<usize> = blob[n_inputs * 4..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        roles.insert(name.clone(), role);
        environments.push(Environment {
            name,
            inputs: Tensor::new(shape, inputs)?,
            labels,
            metadata,
        });
    }
    DatasetBundle::new(environments, roles)
}
