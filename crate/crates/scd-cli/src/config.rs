//! Run configuration: JSON file, overridden field by field from the command
//! line, resolved once before a subcommand executes. The resolved view is
//! persisted next to the outputs so any run can be reproduced.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use scd::baselines::DEFAULT_NGRAM_CAP;
use scd::corpus::DEFAULT_VOCAB_CAP;
use scd::model::Variant;
use scd::synthgen::SynthSpec;
use scd::training::TrainConfig;

/// Every trainable kind: the five RNN variants plus the feature baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Rnn(Variant),
    LogReg,
    Dnn,
    Cnn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rnn(v) => v.name(),
            ModelKind::LogReg => "logreg",
            ModelKind::Dnn => "dnn",
            ModelKind::Cnn => "cnn",
        }
    }

    /// Sentences per side when extracting decision examples.
    pub fn window(self, context_size: usize) -> usize {
        match self {
            ModelKind::Rnn(_) => context_size + 1,
            _ => 1,
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(variant) = s.parse::<Variant>() {
            return Ok(ModelKind::Rnn(variant));
        }
        match s {
            "logreg" => Ok(ModelKind::LogReg),
            "dnn" => Ok(ModelKind::Dnn),
            "cnn" => Ok(ModelKind::Cnn),
            _ => Err(format!(
                "unknown model {s:?}; expected one of {}, logreg, dnn, cnn",
                Variant::ALL.map(|v| v.name()).join(", ")
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: String,
    pub dim: usize,
    pub attn_dim: usize,
    pub context_size: usize,
    pub dropout: f64,
    pub vocab_cap: usize,
    pub ngram_cap: usize,
    pub dnn_hidden: usize,
    /// Search the learning-rate/dropout grid instead of a single run.
    pub grid: bool,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "hierarchical_static_attn".into(),
            dim: 200,
            attn_dim: 200,
            context_size: 2,
            dropout: 0.1,
            vocab_cap: DEFAULT_VOCAB_CAP,
            ngram_cap: DEFAULT_NGRAM_CAP,
            dnn_hidden: 200,
            grid: false,
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            data: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("malformed config {}: {e}", path.display()))?;
        Ok(config)
    }

    pub fn kind(&self) -> anyhow::Result<ModelKind> {
        self.model.parse::<ModelKind>().map_err(|e| anyhow::anyhow!(e))
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }
}

/// Shared model/training flags; `None` keeps the config-file value.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Model kind: a variant name or logreg, dnn, cnn.
    #[arg(long, visible_alias = "variant")]
    pub model: Option<String>,
    /// Hidden size of every LSTM and embedding.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Attention perceptron width.
    #[arg(long)]
    pub attn_dim: Option<usize>,
    /// Extra sentences per side beyond the critical one.
    #[arg(long)]
    pub context_size: Option<usize>,
    /// Dropout rate on embeddings and the classifier input.
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Vocabulary cap, most frequent train tokens kept.
    #[arg(long)]
    pub vocab_cap: Option<usize>,
    /// N-gram feature-space cap for the logreg and dnn baselines.
    #[arg(long)]
    pub ngram_cap: Option<usize>,
    /// Hidden width of the dnn baseline.
    #[arg(long)]
    pub dnn_hidden: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Seed for splits, initialization, batching, and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(v) = &self.model {
            config.model = v.clone();
        }
        if let Some(v) = self.dim {
            config.dim = v;
        }
        if let Some(v) = self.attn_dim {
            config.attn_dim = v;
        }
        if let Some(v) = self.context_size {
            config.context_size = v;
        }
        if let Some(v) = self.dropout {
            config.dropout = v;
        }
        if let Some(v) = self.vocab_cap {
            config.vocab_cap = v;
        }
        if let Some(v) = self.ngram_cap {
            config.ngram_cap = v;
        }
        if let Some(v) = self.dnn_hidden {
            config.dnn_hidden = v;
        }
        if let Some(v) = self.batch_size {
            config.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            config.train.lr = v;
        }
        if let Some(v) = self.max_epochs {
            config.train.max_epochs = v;
        }
        if let Some(v) = self.patience {
            config.train.patience = v;
        }
        if let Some(v) = self.seed {
            config.train.seed = v;
        }
    }
}

/// Resolves flag > config file > default.
pub fn resolve(config_path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<RunConfig> {
    let mut config = match config_path {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut config);
    Ok(config)
}
