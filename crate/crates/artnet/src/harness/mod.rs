//! Run configuration, the training/evaluation drivers, the scarcity sweep
//! and the files a run leaves behind.
//!
//! A run directory is the unit of reproducibility: it holds the resolved
//! config, the newest checkpoint, a metrics CSV (one row per optimizer
//! step, then one per evaluated split) and retrieval diagnostics. Every
//! number in the CSV is recomputable from the archived config and seed.
//! The directory is only created once the config and dataset have fully
//! validated, so a failed launch leaves nothing behind.

mod eval;
mod gradcheck;
mod train;

pub use eval::{
    affordance_accuracy, evaluate, evaluate_run, score_episode, write_eval_report, EpisodeScore,
    EvalOutcome, RetrievalRecord,
};
pub use gradcheck::{gradcheck, negative_control, GradCheckReport};
pub use train::{sweep, train, train_and_eval, MetricsReport, TrainOutcome};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amm::{AmmConfig, AmmError};
use crate::arn::ArnConfig;
use crate::backbone::{BackboneError, EncoderConfig};
use crate::model::{ModelConfig, ModelError, PairSource, Variant};
use crate::objectives::{LossConfig, OptimError, OptimizerConfig};
use crate::params::ParamError;
use crate::tensor::TensorError;
use crate::world::{DataError, SplitTag};

/// Exact metrics CSV header, in column order.
pub const METRICS_HEADER: &str = "run_id,seed,variant,split,fraction,top1,top5,affordance,epoch,loss";

/// Fractions the scarcity sweep runs by default.
pub const SWEEP_FRACTIONS: [f64; 5] = [1.0, 0.8, 0.6, 0.4, 0.2];

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Invalid configuration; callers treat this as a usage error.
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Retrieval(#[from] AmmError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("non-finite loss at epoch {epoch}, step {step}; last-good checkpoint kept")]
    NonFiniteLoss { epoch: usize, step: usize },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Encoder shape knobs; vocabulary size and region width come from the
/// dataset header, never from the config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub max_positions: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::desk(1, 1);
        EncoderSection {
            layers: d.layers,
            hidden: d.hidden,
            heads: d.heads,
            ff_mult: d.ff_mult,
            max_positions: d.max_positions,
        }
    }
}

/// Reasoning-stack knobs; pair and context widths follow the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasoningSection {
    pub scorer_hidden: usize,
    pub nac_depth: usize,
    pub dropout: f64,
}

impl Default for ReasoningSection {
    fn default() -> Self {
        let d = ArnConfig::desk(1);
        ReasoningSection {
            scorer_hidden: d.scorer_hidden,
            nac_depth: d.nac_depth,
            dropout: d.dropout,
        }
    }
}

/// Optimizer knobs with desk-scale training defaults; the conservative
/// fine-tuning values in [`OptimizerConfig::default`] stall at this model
/// size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimizerSection {
    pub fn config(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One run, fully described. Serialized as TOML; every key has a default
/// except `data`, and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Episode file the run trains and evaluates on.
    pub data: PathBuf,
    /// Parent directory for run directories.
    pub out_dir: PathBuf,
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of training episodes kept (composition split fixed).
    pub fraction: f64,
    pub tie_embeddings: bool,
    pub pair_source: PairSource,
    pub encoder: EncoderSection,
    pub retrieval: AmmConfig,
    pub reasoning: ReasoningSection,
    pub loss: LossConfig,
    pub optimizer: OptimizerSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: PathBuf::new(),
            out_dir: PathBuf::from("runs"),
            variant: Variant::Artnet,
            seed: 0,
            epochs: 30,
            batch_size: 32,
            fraction: 1.0,
            tie_embeddings: false,
            pair_source: PairSource::Initial,
            encoder: EncoderSection::default(),
            retrieval: AmmConfig::default(),
            reasoning: ReasoningSection::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(s: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let raw = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&raw)
    }

    /// Serializes the fully resolved config (all defaults expanded).
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.data.as_os_str().is_empty() {
            return bad("data: episode file path is required".into());
        }
        if self.epochs == 0 {
            return bad("epochs: must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size: must be at least 1".into());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad(format!("fraction: {} outside (0, 1]", self.fraction));
        }
        let e = &self.encoder;
        if e.layers == 0 || e.hidden == 0 || e.heads == 0 || e.ff_mult == 0 {
            return bad("encoder: layers, hidden, heads and ff_mult must be positive".into());
        }
        if e.hidden % e.heads != 0 {
            return bad(format!(
                "encoder: hidden {} not divisible by heads {}",
                e.hidden, e.heads
            ));
        }
        if e.max_positions == 0 {
            return bad("encoder: max_positions must be positive".into());
        }
        let r = &self.retrieval;
        if r.pool_size == 0 || r.k == 0 {
            return bad("retrieval: pool_size and k must be positive".into());
        }
        if r.k > r.pool_size {
            return bad(format!(
                "retrieval: k {} exceeds pool_size {}",
                r.k, r.pool_size
            ));
        }
        let a = &self.reasoning;
        if a.scorer_hidden == 0 || a.nac_depth == 0 {
            return bad("reasoning: scorer_hidden and nac_depth must be positive".into());
        }
        if !(0.0..1.0).contains(&a.dropout) {
            return bad(format!("reasoning: dropout {} outside [0, 1)", a.dropout));
        }
        let l = &self.loss;
        if l.lambda < 0.0 || l.margin < 0.0 {
            return bad("loss: lambda and margin must be non-negative".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("optimizer: lr {} must be positive", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer: betas must lie in [0, 1)".into());
        }
        if o.eps <= 0.0 || o.weight_decay < 0.0 {
            return bad("optimizer: eps must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }

    /// Stable identifier used in metrics rows: `{variant}-s{seed}`.
    pub fn run_id(&self) -> String {
        format!("{}-s{}", self.variant.as_str(), self.seed)
    }

    /// Run directory name; the zero-padded fraction suffix keeps sweep runs
    /// apart and listing order aligned with fraction order.
    pub fn run_dir_name(&self) -> String {
        format!("{}-f{:03}", self.run_id(), (self.fraction * 100.0).round() as u32)
    }

    /// Full model configuration once the dataset has fixed the vocabulary
    /// size and region width.
    pub fn model_config(&self, vocab_size: usize, d_vis: usize) -> ModelConfig {
        let encoder = EncoderConfig {
            layers: self.encoder.layers,
            hidden: self.encoder.hidden,
            heads: self.encoder.heads,
            ff_mult: self.encoder.ff_mult,
            vocab_size,
            max_positions: self.encoder.max_positions,
            d_vis,
        };
        let arn = ArnConfig {
            hidden: encoder.hidden,
            query_dim: encoder.hidden,
            scorer_hidden: self.reasoning.scorer_hidden,
            nac_depth: self.reasoning.nac_depth,
            dropout: self.reasoning.dropout,
        };
        ModelConfig {
            variant: self.variant,
            encoder,
            arn,
            loss: self.loss,
            tie_embeddings: self.tie_embeddings,
            pair_source: self.pair_source,
        }
    }
}

/// Creates the run directory and archives the resolved config inside it.
/// Call only after everything that can fail has been validated.
pub fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf, HarnessError> {
    let dir = cfg.out_dir.join(cfg.run_dir_name());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml_string()).map_err(io_err(&path))?;
    Ok(dir)
}

/// Appends rows to `metrics.csv`. Numbers print in shortest round-trip
/// form, so identical values give identical bytes.
pub struct MetricsWriter {
    w: BufWriter<fs::File>,
    path: PathBuf,
    prefix: String,
    fraction: f64,
}

impl MetricsWriter {
    /// Creates (truncating) the CSV and writes the header.
    pub fn create(dir: &Path, cfg: &RunConfig) -> Result<Self, HarnessError> {
        let path = dir.join("metrics.csv");
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{METRICS_HEADER}").map_err(io_err(&path))?;
        Ok(MetricsWriter {
            w,
            prefix: format!("{},{},{}", cfg.run_id(), cfg.seed, cfg.variant.as_str()),
            fraction: cfg.fraction,
            path,
        })
    }

    /// One optimizer step: split and accuracy cells stay empty.
    pub fn train_row(&mut self, epoch: usize, loss: f64) -> Result<(), HarnessError> {
        let prefix = &self.prefix;
        let fraction = self.fraction;
        writeln!(self.w, "{prefix},,{fraction},,,,{epoch},{loss}").map_err(io_err(&self.path))
    }

    /// One evaluated split: the loss cell stays empty.
    pub fn eval_row(
        &mut self,
        split: SplitTag,
        epoch: usize,
        top1: f64,
        top5: f64,
        affordance: f64,
    ) -> Result<(), HarnessError> {
        let prefix = &self.prefix;
        let fraction = self.fraction;
        let split = split.as_str();
        writeln!(
            self.w,
            "{prefix},{split},{fraction},{top1},{top5},{affordance},{epoch},"
        )
        .map_err(io_err(&self.path))
    }

    /// Flushes and returns the file path.
    pub fn finish(mut self) -> Result<PathBuf, HarnessError> {
        self.w.flush().map_err(io_err(&self.path))?;
        Ok(self.path)
    }
}

/// Saves a checkpoint through a temp file so an interrupted write can
/// never clobber the last good one.
pub fn save_checkpoint(
    store: &crate::params::ParamStore,
    dir: &Path,
) -> Result<PathBuf, HarnessError> {
    let tmp = dir.join("checkpoint.json.tmp");
    let path = dir.join("checkpoint.json");
    store.save(&tmp)?;
    fs::rename(&tmp, &path).map_err(io_err(&path))?;
    Ok(path)
}
