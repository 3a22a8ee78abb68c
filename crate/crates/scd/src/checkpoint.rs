//! Binary checkpoints carrying the trained tensors plus everything `predict`
//! needs to rebuild the pipeline: architecture, vocabulary, and for the
//! n-gram models their feature space.
//!
//! Layout: magic `SCD1`, format version u32 LE, metadata as u32-length-
//! prefixed JSON, tensor count u32, then per tensor the name (u16 length +
//! UTF-8), rank u8, dims u32 LE, and the values as LE 4-byte floats.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{CnnModel, DnnModel, LogRegModel, NgramKey, NgramSpace};
use crate::corpus::{CorpusError, DecisionExample, Vocabulary};
use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::numcore::{NumError, ParamSet, Tensor};
use crate::rngs;
use crate::training::Classifier;

pub const MAGIC: [u8; 4] = *b"SCD1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("tensor name is not UTF-8")]
    BadName,
    #[error("unknown tensor name {0:?}")]
    UnknownTensor(String),
    #[error("tensor {0:?} appears twice")]
    DuplicateTensor(String),
    #[error("model wants {want} tensors, file has {found}")]
    TensorCount { want: usize, found: usize },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Architecture description, enough to rebuild a model whose tensors the
/// checkpoint then fills in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Rnn { config: ModelConfig },
    LogReg { ngrams: Vec<NgramKey> },
    Dnn { ngrams: Vec<NgramKey>, hidden: usize, dropout: f64 },
    Cnn { vocab_size: usize, dim: usize, dropout: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    /// Id-ordered token list; index equals token id.
    pub vocab: Vec<String>,
}

/// Uniform handle over every trainable classifier in the toolkit.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Rnn(ModelParams<f32>),
    LogReg(LogRegModel<f32>),
    Dnn(DnnModel<f32>),
    Cnn(CnnModel<f32>),
}

impl AnyModel {
    pub fn build(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<AnyModel, ModelError> {
        Ok(match spec {
            ModelSpec::Rnn { config } => AnyModel::Rnn(ModelParams::init(config.clone(), rng)?),
            ModelSpec::LogReg { ngrams } => {
                AnyModel::LogReg(LogRegModel::init(NgramSpace::from_keys(ngrams.clone()))?)
            }
            ModelSpec::Dnn { ngrams, hidden, dropout } => AnyModel::Dnn(DnnModel::init(
                NgramSpace::from_keys(ngrams.clone()),
                *hidden,
                *dropout,
                rng,
            )?),
            ModelSpec::Cnn { vocab_size, dim, dropout } => {
                AnyModel::Cnn(CnnModel::init(*vocab_size, *dim, *dropout, rng)?)
            }
        })
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            AnyModel::Rnn(m) => ModelSpec::Rnn { config: m.config.clone() },
            AnyModel::LogReg(m) => ModelSpec::LogReg { ngrams: m.space.keys().to_vec() },
            AnyModel::Dnn(m) => ModelSpec::Dnn {
                ngrams: m.space.keys().to_vec(),
                hidden: m.hidden,
                dropout: m.dropout,
            },
            AnyModel::Cnn(m) => ModelSpec::Cnn {
                vocab_size: m.vocab_size,
                dim: m.dim,
                dropout: m.dropout,
            },
        }
    }

    /// Sentences required on each side of a decision point.
    pub fn window(&self) -> usize {
        match self {
            AnyModel::Rnn(m) => m.config.window(),
            _ => 1,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            AnyModel::Rnn(m) => m.config.variant.name(),
            AnyModel::LogReg(_) => "logreg",
            AnyModel::Dnn(_) => "dnn",
            AnyModel::Cnn(_) => "cnn",
        }
    }
}

impl Classifier for AnyModel {
    fn loss_step(
        &mut self,
        batch: &[DecisionExample],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<f64, ModelError> {
        match self {
            AnyModel::Rnn(m) => Classifier::loss_step(m, batch, dropout),
            AnyModel::LogReg(m) => LogRegModel::loss_step(m, batch),
            AnyModel::Dnn(m) => DnnModel::loss_step(m, batch, dropout),
            AnyModel::Cnn(m) => CnnModel::loss_step(m, batch, dropout),
        }
    }

    fn predict_probs(&self, examples: &[DecisionExample]) -> Result<Vec<f64>, ModelError> {
        match self {
            AnyModel::Rnn(m) => Classifier::predict_probs(m, examples),
            AnyModel::LogReg(m) => LogRegModel::predict_probs(m, examples),
            AnyModel::Dnn(m) => DnnModel::predict_probs(m, examples),
            AnyModel::Cnn(m) => CnnModel::predict_probs(m, examples),
        }
    }

    fn params(&self) -> &ParamSet<f32> {
        match self {
            AnyModel::Rnn(m) => &m.set,
            AnyModel::LogReg(m) => &m.set,
            AnyModel::Dnn(m) => &m.set,
            AnyModel::Cnn(m) => &m.set,
        }
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        match self {
            AnyModel::Rnn(m) => &mut m.set,
            AnyModel::LogReg(m) => &mut m.set,
            AnyModel::Dnn(m) => &mut m.set,
            AnyModel::Cnn(m) => &mut m.set,
        }
    }
}

pub fn save(
    path: impl AsRef<Path>,
    model: &AnyModel,
    vocab: &Vocabulary,
) -> Result<(), CheckpointError> {
    let meta = CheckpointMeta { model: model.spec(), vocab: vocab.tokens().to_vec() };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(&meta)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let set = model.params();
    w.write_all(&(set.len() as u32).to_le_bytes())?;
    for param in set.iter() {
        let name = param.name().as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        let value = param.value();
        w.write_all(&[value.rank() as u8])?;
        for &dim in value.shape() {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &x in value.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(AnyModel, Vocabulary), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic bytes")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r, "format version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let json_len = read_u32(&mut r, "metadata length")? as usize;
    let mut json = vec![0u8; json_len];
    read_exact(&mut r, &mut json, "metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(&json)?;
    let vocab = Vocabulary::from_tokens(meta.vocab)?;
    // Fresh init gives the right architecture; every tensor is overwritten.
    let mut model = AnyModel::build(&meta.model, &mut rngs::stream_rng(0, rngs::INIT))?;
    let count = read_u32(&mut r, "tensor count")? as usize;
    let set = model.params_mut();
    if count != set.len() {
        return Err(CheckpointError::TensorCount { want: set.len(), found: count });
    }
    let mut seen = vec![false; set.len()];
    for _ in 0..count {
        let name_len = read_u16(&mut r, "tensor name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::BadName)?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, "tensor rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r, "tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        read_exact(&mut r, &mut bytes, "tensor data")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let slot = set
            .slot_of(&name)
            .map_err(|_| CheckpointError::UnknownTensor(name.clone()))?;
        if seen[slot] {
            return Err(CheckpointError::DuplicateTensor(name));
        }
        seen[slot] = true;
        set.set_value(slot, Tensor::from_vec(shape, data)?)?;
    }
    Ok((model, vocab))
}

fn read_exact(
    r: &mut impl Read,
    buf: &mut [u8],
    what: &'static str,
) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated(what)
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read, what: &'static str) -> Result<u16, CheckpointError> {
    let mut buf = [0u8; 2];
    read_exact(r, &mut buf, what)?;
    Ok(u16::from_le_bytes(buf))
}
