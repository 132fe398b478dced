//! Run configuration. Every field has a default, so `{}` is a valid config
//! file; named presets override the learning rates and test weights.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptConfig;
use crate::error::{Error, Result};
use crate::ingest::{PadSide, SynthConfig, TsvSchema};
use crate::losses::LossWeights;
use crate::model::{ExtensionHistory, ModelDims, ModelOptions};
use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synth {
        #[serde(default)]
        config: SynthConfig,
        #[serde(default)]
        seed: u64,
    },
    Tsv {
        path: PathBuf,
        #[serde(default)]
        schema: TsvSchema,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synth {
            config: SynthConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    pub min_interactions: usize,
    pub max_len: usize,
    pub pad_side: PadSide,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::default(),
            min_interactions: 10,
            max_len: 50,
            pad_side: PadSide::Left,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub d_state: usize,
    pub conv_width: usize,
    /// `None` means `4·d`.
    pub d_ff: Option<usize>,
    pub blocks: usize,
    pub dropout: f64,
    pub detach_extension: bool,
    pub extension_history: ExtensionHistory,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_state: 32,
            conv_width: 4,
            d_ff: None,
            blocks: 1,
            dropout: 0.2,
            detach_extension: true,
            extension_history: ExtensionHistory::Trailing,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            d: self.d,
            d_state: self.d_state,
            conv_width: self.conv_width,
            d_ff: self.d_ff.unwrap_or(4 * self.d),
            blocks: self.blocks,
        }
    }

    pub fn options(&self) -> ModelOptions {
        ModelOptions {
            dropout: self.dropout,
            detach_extension: self.detach_extension,
            extension_history: self.extension_history,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub patience: usize,
    /// Cutoff of the NDCG used for early stopping.
    pub k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            epochs: 200,
            batch_size: 4096,
            eval_every: 10,
            patience: 3,
            k: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    pub segments: usize,
    /// Rows per batch for frozen scoring and throughput runs.
    pub batch_size: usize,
    pub throughput_warmup: usize,
    pub throughput_reps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            segments: 4,
            batch_size: 256,
            throughput_warmup: 1,
            throughput_reps: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Learning rates and test weights of the main experiments.
    Main,
    /// The alternative values of the reproducibility table.
    Appendix,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub precision: Precision,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::from_json(&text)
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        let (train_lr, test_lr, mu1, mu2) = match preset {
            Preset::Main => (1e-3, 0.005, 1e-2, 1e-1),
            Preset::Appendix => (1e-2, 0.05, 1e-3, 1e-2),
        };
        self.train.optimizer.lr = train_lr;
        self.adapt.lr = test_lr;
        self.loss.mu1_test = mu1;
        self.loss.mu2_test = mu2;
    }

    /// Checks every precondition and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let m = &self.model;
        for (name, v) in [
            ("model.d", m.d),
            ("model.d_state", m.d_state),
            ("model.conv_width", m.conv_width),
            ("model.blocks", m.blocks),
            ("data.max_len", self.data.max_len),
            ("train.batch_size", self.train.batch_size),
            ("train.eval_every", self.train.eval_every),
            ("train.k", self.train.k),
            ("eval.k", self.eval.k),
            ("eval.batch_size", self.eval.batch_size),
            ("eval.throughput_reps", self.eval.throughput_reps),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if m.d_ff == Some(0) {
            errs.push("model.d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&m.dropout) {
            errs.push("model.dropout must lie in [0, 1)".into());
        }
        if self.data.min_interactions < 3 {
            errs.push("data.min_interactions must be at least 3".into());
        }
        if self.eval.segments < 2 {
            errs.push("eval.segments must be at least 2".into());
        }
        let o = &self.train.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            errs.push("train.optimizer.lr must be a finite non-negative number".into());
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            errs.push("adam betas must lie in [0, 1)".into());
        }
        if !(o.eps > 0.0) {
            errs.push("train.optimizer.eps must be positive".into());
        }
        errs.extend(self.loss.validate().into_iter().map(|e| format!("loss.{e}")));
        errs.extend(self.adapt.validate());
        if self.precision == Precision::F32 {
            errs.push("precision f32 is not supported; use f64".into());
        }
        if let DataSource::Synth { config, .. } = &self.data.source {
            match config.validate() {
                Ok(()) => {}
                Err(Error::Config(e)) => errs.extend(e.into_iter().map(|e| format!("data.source.config: {e}"))),
                Err(e) => errs.push(format!("data.source.config: {e}")),
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}
