//! Checkpoints: every parameter as a named f64 tensor, plus the full run
//! config and progress counters in the safetensors metadata.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use monoformer_core::model::MonoFormer;
use monoformer_core::Tensor;
use safetensors::SafeTensors;

use crate::config::RunConfig;
use crate::error::{AppError, Result};
use crate::io;

pub const FORMAT_VERSION: &str = "1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    pub epoch: usize,
    pub step: usize,
}

pub fn save(path: &Path, model: &MonoFormer, config: &RunConfig, progress: Progress) -> Result<()> {
    let tensors: Vec<(String, Vec<usize>, &[f64])> = model
        .params
        .iter()
        .map(|(id, e)| (e.name.clone(), model.params.get(id).shape().to_vec(), model.params.get(id).data()))
        .collect();
    let meta = HashMap::from([
        ("format_version".to_string(), FORMAT_VERSION.to_string()),
        ("config".to_string(), config.to_toml_string()),
        ("epoch".to_string(), progress.epoch.to_string()),
        ("step".to_string(), progress.step.to_string()),
    ]);
    io::write_f64_tensors(path, &tensors, meta)
}

/// A loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: MonoFormer,
    pub config: RunConfig,
    pub progress: Progress,
}

fn read_parts(path: &Path) -> Result<(RunConfig, Progress, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| AppError::format(path, e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    match meta.get("format_version").map(String::as_str) {
        Some(FORMAT_VERSION) => {}
        other => return Err(AppError::format(path, format!("unsupported checkpoint format {other:?}"))),
    }
    let config_text = meta.get("config").ok_or_else(|| AppError::format(path, "checkpoint has no config"))?;
    let config = RunConfig::from_toml_str(config_text)?;
    let num = |k: &str| -> Result<usize> {
        meta.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| AppError::format(path, format!("bad `{k}` metadata")))
    };
    let progress = Progress {
        epoch: num("epoch")?,
        step: num("step")?,
    };
    let st = SafeTensors::deserialize(&bytes).map_err(|e| AppError::format(path, e.to_string()))?;
    let mut named = Vec::new();
    for (name, view) in st.tensors() {
        let values = io::tensor_values(path, &view)?;
        named.push((name, Tensor::new(view.shape(), values)?));
    }
    Ok((config, progress, named))
}

/// Rebuilds the model from the config stored in the file.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let (config, progress, named) = read_parts(path)?;
    let model = MonoFormer::from_named(&config.to_model(), named)?;
    Ok(Checkpoint { model, config, progress })
}

/// Loads the weights into the architecture of `config` instead of the
/// stored one; a shape mismatch names the first offending parameter.
pub fn load_with_config(path: &Path, config: &RunConfig) -> Result<Checkpoint> {
    let (_, progress, named) = read_parts(path)?;
    let model = MonoFormer::from_named(&config.to_model(), named)?;
    Ok(Checkpoint {
        model,
        config: config.clone(),
        progress,
    })
}
