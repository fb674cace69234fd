//! Training loop with per-step JSONL logging and per-epoch checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use monoformer_core::metrics::{aggregate, evaluate_depth, Weighting};
use monoformer_core::model::MonoFormer;
use monoformer_core::optim::Adam;
use monoformer_core::sample::SequenceSample;
use monoformer_core::train::train_step;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Progress};
use crate::config::RunConfig;
use crate::dataset::{load_frames, load_sequence_dataset, LoadedFrame, Split};
use crate::error::{AppError, Result};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LAST_CHECKPOINT: &str = "last.safetensors";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogLine {
    Step {
        step: usize,
        epoch: usize,
        loss: f64,
        photometric: f64,
        smoothness: f64,
        grad_norm: f64,
    },
    Epoch {
        epoch: usize,
        step: usize,
        checkpoint: String,
        /// Validation metrics in the standard column order.
        val_metrics: Option<[f64; 7]>,
    },
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: MonoFormer,
    optimizer: Adam,
    samples: Vec<SequenceSample>,
    val: Vec<LoadedFrame>,
    step: usize,
    epoch: usize,
    log: BufWriter<File>,
    log_lines: Vec<LogLine>,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    /// Fresh model from `config.seed`; writes the resolved config and starts
    /// a new log under `config.output_dir`.
    pub fn new(config: RunConfig, samples: Vec<SequenceSample>, val: Vec<LoadedFrame>) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(AppError::Dataset("no training samples".into()));
        }
        let model = MonoFormer::new(&config.to_model(), config.seed)?;
        let optimizer = Adam::new(config.optimizer.to_adam(), &model.params)?;
        let out = &config.output_dir;
        fs::create_dir_all(out.join(CHECKPOINT_DIR)).map_err(|e| AppError::io(out, e))?;
        config.save(&out.join(CONFIG_FILE))?;
        let log_path = out.join(LOG_FILE);
        let log = BufWriter::new(File::create(&log_path).map_err(|e| AppError::io(&log_path, e))?);
        for (group, lr) in optimizer.group_lrs(&model.params) {
            log::info!("optimizer group {group:?}: lr {lr}");
        }
        Ok(Self {
            config,
            model,
            optimizer,
            samples,
            val,
            step: 0,
            epoch: 0,
            log,
            log_lines: Vec::new(),
            last_checkpoint: None,
        })
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn log_lines(&self) -> &[LogLine] {
        &self.log_lines
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    /// Mutable access to the in-memory samples (used to inject faults).
    pub fn samples_mut(&mut self) -> &mut Vec<SequenceSample> {
        &mut self.samples
    }

    fn append(&mut self, line: LogLine) -> Result<()> {
        let path = self.config.output_dir.join(LOG_FILE);
        let text = serde_json::to_string(&line).expect("log line serializes");
        writeln!(self.log, "{text}").and_then(|_| self.log.flush()).map_err(|e| AppError::io(&path, e))?;
        self.log_lines.push(line);
        Ok(())
    }

    fn done(&self) -> bool {
        self.epoch >= self.config.train.epochs || self.config.train.max_steps.is_some_and(|m| self.step >= m)
    }

    /// One pass over the shuffled samples (or up to `max_steps`), then a
    /// checkpoint. Returns whether training is finished.
    pub fn train_epoch(&mut self) -> Result<bool> {
        if self.done() {
            return Ok(true);
        }
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let loss_cfg = self.config.loss.to_loss();
        for chunk in order.chunks(self.config.train.batch_size) {
            if self.config.train.max_steps.is_some_and(|m| self.step >= m) {
                break;
            }
            let batch: Vec<SequenceSample> = chunk.iter().map(|&i| self.samples[i].clone()).collect();
            let stats = match train_step(&mut self.model, &mut self.optimizer, &batch, &loss_cfg) {
                Ok(s) => s,
                Err(e @ monoformer_core::Error::NonFinite(_)) => {
                    log::error!("step {}: {e}; aborting", self.step + 1);
                    return Err(AppError::Diverged {
                        step: self.step + 1,
                        reason: e.to_string(),
                        last_checkpoint: self.last_checkpoint.clone(),
                    });
                }
                Err(e) => return Err(e.into()),
            };
            self.step += 1;
            log::debug!("step {} loss {:.6}", self.step, stats.loss);
            self.append(LogLine::Step {
                step: self.step,
                epoch,
                loss: stats.loss,
                photometric: stats.photometric,
                smoothness: stats.smoothness,
                grad_norm: stats.grad_norm,
            })?;
        }
        self.epoch = epoch;
        let name = format!("epoch_{epoch:03}.safetensors");
        let path = self.config.output_dir.join(CHECKPOINT_DIR).join(&name);
        let progress = Progress { epoch, step: self.step };
        checkpoint::save(&path, &self.model, &self.config, progress)?;
        let last = self.config.output_dir.join(CHECKPOINT_DIR).join(LAST_CHECKPOINT);
        fs::copy(&path, &last).map_err(|e| AppError::io(&last, e))?;
        self.last_checkpoint = Some(path.clone());
        let val_metrics = self.validate()?;
        if let Some(m) = val_metrics {
            log::info!("epoch {epoch}: step {} val abs_rel {:.4}", self.step, m[0]);
        }
        self.append(LogLine::Epoch {
            epoch,
            step: self.step,
            checkpoint: path.display().to_string(),
            val_metrics,
        })?;
        Ok(self.done())
    }

    fn validate(&self) -> Result<Option<[f64; 7]>> {
        let opts = self.config.eval.to_options();
        let records = self
            .val
            .iter()
            .filter_map(|f| f.gt_depth.as_ref().map(|gt| (f, gt)))
            .map(|(f, gt)| Ok(evaluate_depth(&self.model.predict_depth(&f.image)?, gt, &opts)?))
            .collect::<Result<Vec<_>>>()?;
        if records.is_empty() {
            return Ok(None);
        }
        Ok(Some(aggregate(&records, Weighting::PerImage)?.values()))
    }

    /// Trains until the epoch or step budget is spent.
    pub fn run(&mut self) -> Result<()> {
        while !self.train_epoch()? {}
        Ok(())
    }
}

/// Loads the configured dataset and runs a full training job.
pub fn train(config: &RunConfig) -> Result<Trainer> {
    let root = config
        .data
        .train_root
        .as_deref()
        .ok_or_else(|| AppError::Config("data.train_root is not set".into()))?;
    let split = Split::from_option(config.data.train_split.as_deref());
    let size = Some(config.image_size());
    let samples: Vec<SequenceSample> = load_sequence_dataset(root, &split, config.data.stride(), size)?
        .load_all()?
        .into_iter()
        .map(|s| s.sample)
        .collect();
    log::info!("{} training samples from {}", samples.len(), root.display());
    let val = match &config.data.val_root {
        Some(v) => load_frames(v, &Split::from_option(config.data.val_split.as_deref()), size)?,
        None => Vec::new(),
    };
    let mut trainer = Trainer::new(config.clone(), samples, val)?;
    trainer.run()?;
    Ok(trainer)
}

/// Reads a training log back.
pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| AppError::format(path, e.to_string())))
        .collect()
}
