//! Run configuration: one TOML file, `section.key=value` overrides, and
//! conversion into the core model/loss/optimizer configs.

use std::path::{Path, PathBuf};

use monoformer_core::acm_ffd::DecoderConfig;
use monoformer_core::losses::{LossConfig, LossWeights};
use monoformer_core::metrics::EvalOptions;
use monoformer_core::model::ModelConfig;
use monoformer_core::networks::EncoderConfig;
use monoformer_core::optim::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub stem_channels: Vec<usize>,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub mlp_ratio: usize,
    pub decoder_channels: Vec<usize>,
    pub num_scales: usize,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::from_model(&ModelConfig::default())
    }
}

impl ModelSection {
    pub fn from_model(m: &ModelConfig) -> Self {
        let e = &m.encoder;
        Self {
            num_layers: e.num_layers,
            num_heads: e.num_heads,
            head_dim: e.head_dim,
            embed_dim: e.embed_dim,
            patch_size: e.patch_size,
            stem_channels: e.stem_channels.clone(),
            image_size: [e.image_size.0, e.image_size.1],
            mlp_ratio: e.mlp_ratio,
            decoder_channels: m.decoder.channels.clone(),
            num_scales: m.decoder.num_scales,
            min_depth: m.min_depth,
            max_depth: m.max_depth,
        }
    }

    pub fn to_model(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                num_layers: self.num_layers,
                num_heads: self.num_heads,
                head_dim: self.head_dim,
                embed_dim: self.embed_dim,
                patch_size: self.patch_size,
                stem_channels: self.stem_channels.clone(),
                image_size: (self.image_size[0], self.image_size[1]),
                mlp_ratio: self.mlp_ratio,
            },
            decoder: DecoderConfig {
                channels: self.decoder_channels.clone(),
                num_scales: self.num_scales,
            },
            min_depth: self.min_depth,
            max_depth: self.max_depth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub ssim: f64,
    pub l1: f64,
    pub smoothness: f64,
    pub min_reprojection: bool,
    pub auto_mask: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let c = LossConfig::default();
        Self {
            ssim: c.weights.ssim,
            l1: c.weights.l1,
            smoothness: c.weights.smoothness,
            min_reprojection: c.min_reprojection,
            auto_mask: c.auto_mask,
        }
    }
}

impl LossSection {
    pub fn to_loss(&self) -> LossConfig {
        LossConfig {
            weights: LossWeights {
                ssim: self.ssim,
                l1: self.l1,
                smoothness: self.smoothness,
            },
            min_reprojection: self.min_reprojection,
            auto_mask: self.auto_mask,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr_depth: f64,
    pub lr_pose: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr_depth: a.lr_depth,
            lr_pose: a.lr_pose,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl OptimizerSection {
    pub fn to_adam(&self) -> AdamConfig {
        AdamConfig {
            lr_depth: self.lr_depth,
            lr_pose: self.lr_pose,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps (a checkpoint is still written).
    pub max_steps: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_root: Option<PathBuf>,
    /// Split file of the training set; every frame when absent.
    pub train_split: Option<PathBuf>,
    /// Frames with ground-truth depth for per-epoch validation.
    pub val_root: Option<PathBuf>,
    pub val_split: Option<PathBuf>,
    /// Source frames are `i - stride` and `i + stride`.
    pub frame_stride: Option<usize>,
}

impl DataSection {
    pub fn stride(&self) -> usize {
        self.frame_stride.unwrap_or(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub min_depth: f64,
    pub max_depth: f64,
    pub median_scaling: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let o = EvalOptions::default();
        Self {
            min_depth: o.min_depth,
            max_depth: o.max_depth,
            median_scaling: o.median_scaling,
        }
    }
}

impl EvalSection {
    pub fn to_options(&self) -> EvalOptions {
        EvalOptions {
            min_depth: self.min_depth,
            max_depth: self.max_depth,
            median_scaling: self.median_scaling,
            crop: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub loss: LossSection,
    pub optimizer: OptimizerSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: ModelSection::default(),
            loss: LossSection::default(),
            optimizer: OptimizerSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| AppError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| AppError::io(path, e))
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML
    /// (`3`, `2e-5`, `true`, `[16, 32]`) and fall back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = toml::Value::try_from(self).map_err(|e| AppError::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| AppError::Config(format!("override `{o}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut tree, key.trim(), value)?;
        }
        let cfg: Self = tree.try_into().map_err(|e: toml::de::Error| AppError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.to_model().validate()?;
        self.loss.to_loss().weights.validate()?;
        self.optimizer.to_adam().validate()?;
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(AppError::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.data.stride() == 0 {
            return Err(AppError::Config("frame_stride must be at least 1".into()));
        }
        let e = &self.eval;
        if !(e.min_depth > 0.0 && e.max_depth > e.min_depth) {
            return Err(AppError::Config(format!("eval depth caps ({}, {}) invalid", e.min_depth, e.max_depth)));
        }
        Ok(())
    }

    pub fn to_model(&self) -> ModelConfig {
        self.model.to_model()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.model.image_size[0], self.model.image_size[1])
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(tree: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| AppError::Config(format!("`{key}`: `{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(AppError::Config(format!("empty override key `{key}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!((c.train.epochs, c.train.batch_size), (50, 8));
        assert_eq!((c.optimizer.lr_depth, c.optimizer.lr_pose), (2e-5, 5e-4));
        assert_eq!((c.optimizer.beta1, c.optimizer.beta2), (0.9, 0.999));
        assert_eq!(c.image_size(), (96, 128));
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml_str("seed = 3\n[train]\nepochs = 2\n").unwrap();
        assert_eq!((c.seed, c.train.epochs, c.train.batch_size), (3, 2, 8));
        assert!(RunConfig::from_toml_str("[train]\nepoch = 2\n").is_err());
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(&["train.epochs=3", "model.stem_channels=[8, 16]", "output_dir=out/x", "data.train_root=d"])
            .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model.stem_channels, vec![8, 16]);
        assert_eq!(c.output_dir, PathBuf::from("out/x"));
        assert_eq!(c.data.train_root, Some(PathBuf::from("d")));
        assert!(RunConfig::default().with_overrides(&["optimizer.lr_pose=0"]).is_err());
        assert!(RunConfig::default().with_overrides(&["train.nope=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["epochs"]).is_err());
    }
}
