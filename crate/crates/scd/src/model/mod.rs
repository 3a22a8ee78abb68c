//! Speaker-change models.
//!
//! All variants share the same skeleton: token embeddings feed a word-level
//! LSTM whose final state embeds each sentence; a sentence-level LSTM runs
//! over each side of the decision point from the farthest sentence toward
//! the boundary; the two sides' representations are concatenated and scored
//! by an affine layer with a 2-way softmax. Variants differ in how much of
//! that skeleton they use and whether attention summarizes the context.

mod batch;
mod single;

pub use batch::{batch_logits, batch_loss, predict_probs};
pub use single::{
    classify_decision, dynamic_attention, encode_context, encode_sentence, lstm_step,
    static_attention, LstmStateVars,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{NumError, ParamSet, Scalar, Tape, Tensor, Var};

/// Index of the `change` class in logits and softmax outputs.
pub const CHANGE_CLASS: usize = 1;

const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("example has {got} sentences per side, model expects {want}")]
    WindowMismatch { want: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Only the two critical sentences, no context.
    NoContext,
    /// One word-level LSTM per side over the concatenated token stream.
    NonHierarchical,
    /// Word-level then sentence-level LSTM per side.
    Hierarchical,
    /// Hierarchical plus static attention from each critical sentence over
    /// the opposite side's states.
    HierarchicalStaticAttn,
    /// Hierarchical plus per-position attention folded recurrently.
    HierarchicalDynamicAttn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::NoContext,
        Variant::NonHierarchical,
        Variant::Hierarchical,
        Variant::HierarchicalStaticAttn,
        Variant::HierarchicalDynamicAttn,
    ];

    pub fn uses_sentence_lstm(self) -> bool {
        matches!(
            self,
            Variant::Hierarchical
                | Variant::HierarchicalStaticAttn
                | Variant::HierarchicalDynamicAttn
        )
    }

    pub fn uses_attention(self) -> bool {
        matches!(
            self,
            Variant::HierarchicalStaticAttn | Variant::HierarchicalDynamicAttn
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoContext => "no_context",
            Variant::NonHierarchical => "non_hierarchical",
            Variant::Hierarchical => "hierarchical",
            Variant::HierarchicalStaticAttn => "hierarchical_static_attn",
            Variant::HierarchicalDynamicAttn => "hierarchical_dynamic_attn",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown variant: {s}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Hidden size d of every layer, including embeddings.
    pub dim: usize,
    /// Attention perceptron width d_a.
    pub attn_dim: usize,
    /// Sentences of additional context per side; the window is one larger.
    pub context_size: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::HierarchicalStaticAttn,
            dim: 200,
            attn_dim: 200,
            context_size: 2,
            vocab_size: crate::corpus::DEFAULT_VOCAB_CAP,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// Sentences per side: context plus the critical sentence.
    pub fn window(&self) -> usize {
        self.context_size + 1
    }

    /// Width of the classifier input: two side representations, plus two
    /// attention vectors for the attention variants.
    pub fn classifier_input_dim(&self) -> usize {
        if self.variant.uses_attention() {
            4 * self.dim
        } else {
            2 * self.dim
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 {
            return Err(ModelError::Config("dim must be positive".into()));
        }
        if self.variant.uses_attention() && self.attn_dim == 0 {
            return Err(ModelError::Config("attn_dim must be positive".into()));
        }
        if self.vocab_size < 2 {
            return Err(ModelError::Config(format!(
                "vocab_size {} cannot hold PAD and UNK",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Slots of one LSTM cell in a [`ParamSet`]. The three sigmoid gates are
/// stacked: rows `0..d` gate input, `d..2d` forget, `2d..3d` output.
#[derive(Clone, Copy, Debug)]
pub struct LstmCellSlots {
    pub w: usize,
    pub u: usize,
    pub b: usize,
    pub w_g: usize,
    pub u_g: usize,
    pub b_g: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionSlots {
    pub w_a: usize,
    pub u_a: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FoldSlots {
    pub w: usize,
    pub b: usize,
}

/// A model: config plus named parameters. Generic over precision so the
/// same code trains in `f32` and gradient-checks in `f64`.
#[derive(Clone, Debug)]
pub struct ModelParams<F: Scalar> {
    pub config: ModelConfig,
    pub set: ParamSet<F>,
    pub embedding: usize,
    pub word: LstmCellSlots,
    pub sentence: Option<LstmCellSlots>,
    pub attention: Option<AttentionSlots>,
    pub fold: Option<FoldSlots>,
    pub classifier_w: usize,
    pub classifier_b: usize,
}

fn add_cell<F: Scalar>(
    set: &mut ParamSet<F>,
    prefix: &str,
    d_in: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LstmCellSlots, NumError> {
    let u = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
        Tensor::uniform(shape, -INIT_SCALE, INIT_SCALE, rng)
    };
    Ok(LstmCellSlots {
        w: set.add(format!("{prefix}.w"), u(vec![3 * d, d_in], rng))?,
        u: set.add(format!("{prefix}.u"), u(vec![3 * d, d], rng))?,
        b: set.add(format!("{prefix}.b"), Tensor::zeros(vec![3 * d]))?,
        w_g: set.add(format!("{prefix}.w_g"), u(vec![d, d_in], rng))?,
        u_g: set.add(format!("{prefix}.u_g"), u(vec![d, d], rng))?,
        b_g: set.add(format!("{prefix}.b_g"), Tensor::zeros(vec![d]))?,
    })
}

impl<F: Scalar> ModelParams<F> {
    /// Initializes weights uniformly in ±0.08 and biases to zero. The
    /// classifier layer starts all-zero, so an untrained model emits
    /// p_change = 0.5 for every input.
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.dim;
        let mut set = ParamSet::new();
        let embedding = set.add(
            "embedding",
            Tensor::uniform(vec![config.vocab_size, d], -INIT_SCALE, INIT_SCALE, rng),
        )?;
        let word = add_cell(&mut set, "word", d, d, rng)?;
        let sentence = if config.variant.uses_sentence_lstm() {
            Some(add_cell(&mut set, "sentence", d, d, rng)?)
        } else {
            None
        };
        let attention = if config.variant.uses_attention() {
            Some(AttentionSlots {
                w_a: set.add(
                    "attention.w_a",
                    Tensor::uniform(vec![config.attn_dim, 2 * d], -INIT_SCALE, INIT_SCALE, rng),
                )?,
                u_a: set.add(
                    "attention.u_a",
                    Tensor::uniform(vec![config.attn_dim], -INIT_SCALE, INIT_SCALE, rng),
                )?,
            })
        } else {
            None
        };
        let fold = if config.variant == Variant::HierarchicalDynamicAttn {
            Some(FoldSlots {
                w: set.add(
                    "fold.w",
                    Tensor::uniform(vec![d, 2 * d], -INIT_SCALE, INIT_SCALE, rng),
                )?,
                b: set.add("fold.b", Tensor::zeros(vec![d]))?,
            })
        } else {
            None
        };
        let k = config.classifier_input_dim();
        let classifier_w = set.add("classifier.w", Tensor::zeros(vec![2, k]))?;
        let classifier_b = set.add("classifier.b", Tensor::zeros(vec![2]))?;
        Ok(ModelParams {
            config,
            set,
            embedding,
            word,
            sentence,
            attention,
            fold,
            classifier_w,
            classifier_b,
        })
    }

    /// Registers every parameter on a fresh tape.
    pub fn bind(&self, tape: &mut Tape<F>) -> BoundModel {
        let cell = |tape: &mut Tape<F>, slots: &LstmCellSlots| BoundCell {
            w: tape.param(&self.set, slots.w),
            u: tape.param(&self.set, slots.u),
            b: tape.param(&self.set, slots.b),
            w_g: tape.param(&self.set, slots.w_g),
            u_g: tape.param(&self.set, slots.u_g),
            b_g: tape.param(&self.set, slots.b_g),
        };
        BoundModel {
            embedding: tape.param(&self.set, self.embedding),
            word: cell(tape, &self.word),
            sentence: self.sentence.as_ref().map(|s| cell(tape, s)),
            attention: self.attention.as_ref().map(|a| BoundAttention {
                w_a: tape.param(&self.set, a.w_a),
                u_a: tape.param(&self.set, a.u_a),
            }),
            fold: self.fold.as_ref().map(|f| BoundFold {
                w: tape.param(&self.set, f.w),
                b: tape.param(&self.set, f.b),
            }),
            classifier_w: tape.param(&self.set, self.classifier_w),
            classifier_b: tape.param(&self.set, self.classifier_b),
        }
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            set: self.set.cast(),
            embedding: self.embedding,
            word: self.word,
            sentence: self.sentence,
            attention: self.attention,
            fold: self.fold,
            classifier_w: self.classifier_w,
            classifier_b: self.classifier_b,
        }
    }
}

/// Scalar entries a model with this config must hold; pairs with
/// `ParamSet::total_len` as a load-time integrity check.
pub fn expected_param_count(config: &ModelConfig) -> usize {
    let d = config.dim;
    let cell = 4 * d * d + 4 * d * d + 4 * d; // W/W_g by d_in=d, U/U_g, biases
    let mut total = config.vocab_size * d + cell;
    if config.variant.uses_sentence_lstm() {
        total += cell;
    }
    if config.variant.uses_attention() {
        total += config.attn_dim * 2 * d + config.attn_dim;
    }
    if config.variant == Variant::HierarchicalDynamicAttn {
        total += d * 2 * d + d;
    }
    total + 2 * config.classifier_input_dim() + 2
}

/// Tape bindings of one LSTM cell.
#[derive(Clone, Copy, Debug)]
pub struct BoundCell {
    pub w: Var,
    pub u: Var,
    pub b: Var,
    pub w_g: Var,
    pub u_g: Var,
    pub b_g: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub w_a: Var,
    pub u_a: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundFold {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub embedding: Var,
    pub word: BoundCell,
    pub sentence: Option<BoundCell>,
    pub attention: Option<BoundAttention>,
    pub fold: Option<BoundFold>,
    pub classifier_w: Var,
    pub classifier_b: Var,
}
