//! Comparison models: random guess, n-gram features with logistic regression
//! or a small DNN, and a CNN sentence encoder.
//!
//! All of them score the two critical sentences only, emit 2-way logits, and
//! train with the same loss and optimizer as the recurrent models.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DecisionExample, PAD_ID};
use crate::model::{ModelError, CHANGE_CLASS};
use crate::numcore::{NumError, ParamSet, Scalar, Tape, Tensor, Var};

/// Cap on the enumerated (uni+bi)-gram space, by train-split frequency.
pub const DEFAULT_NGRAM_CAP: usize = 100_000;

const INIT_SCALE: f64 = 0.08;
const PREDICT_CHUNK: usize = 256;

/// One n-gram over token ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NgramKey {
    Uni(u32),
    Bi(u32, u32),
}

fn ngrams_of(tokens: &[u32]) -> impl Iterator<Item = NgramKey> + '_ {
    let unis = tokens.iter().map(|&t| NgramKey::Uni(t));
    let bis = tokens.windows(2).map(|w| NgramKey::Bi(w[0], w[1]));
    unis.chain(bis)
}

fn critical<'a>(side: &'a [Vec<u32>]) -> Result<&'a [u32], ModelError> {
    side.last()
        .map(|s| s.as_slice())
        .ok_or(ModelError::WindowMismatch { want: 1, got: 0 })
}

/// Enumerated (uni+bi)-gram feature space. Built from the critical sentences
/// of the train split only; unseen n-grams are dropped at featurize time.
#[derive(Clone, Debug, PartialEq)]
pub struct NgramSpace {
    index: HashMap<NgramKey, u32>,
    keys: Vec<NgramKey>,
}

impl NgramSpace {
    /// Enumerates the `cap` most frequent n-grams; ties break on the key so
    /// the space is independent of map iteration order.
    pub fn build(train: &[DecisionExample], cap: usize) -> Result<Self, ModelError> {
        if cap == 0 {
            return Err(ModelError::Config("n-gram cap must be positive".into()));
        }
        let mut counts: HashMap<NgramKey, u64> = HashMap::new();
        for ex in train {
            for side in [&ex.prev_sentences, &ex.next_sentences] {
                for key in ngrams_of(critical(side)?) {
                    *counts.entry(key).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(NgramKey, u64)> = counts.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(cap);
        let keys: Vec<NgramKey> = ranked.into_iter().map(|(k, _)| k).collect();
        Ok(Self::from_keys(keys))
    }

    /// Rebuilds a space from its enumerated keys, e.g. out of a checkpoint.
    pub fn from_keys(keys: Vec<NgramKey>) -> Self {
        let index = keys
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, i as u32))
            .collect();
        NgramSpace { index, keys }
    }

    pub fn keys(&self) -> &[NgramKey] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Width of the concatenated feature vector: one block per side.
    pub fn feature_width(&self) -> usize {
        2 * self.len()
    }

    /// Sparse counts over [prev block | next block], indices ascending.
    pub fn featurize<F: Scalar>(&self, prev: &[u32], next: &[u32]) -> Vec<(u32, F)> {
        let offset = self.len() as u32;
        let mut counts: HashMap<u32, u32> = HashMap::new();
        for (base, tokens) in [(0, prev), (offset, next)] {
            for key in ngrams_of(tokens) {
                if let Some(&i) = self.index.get(&key) {
                    *counts.entry(base + i).or_insert(0) += 1;
                }
            }
        }
        let mut row: Vec<(u32, F)> = counts
            .into_iter()
            .map(|(i, c)| (i, F::from_f64(c as f64)))
            .collect();
        // Ascending indices keep the dot-product accumulation order fixed.
        row.sort_unstable_by_key(|&(i, _)| i);
        row
    }
}

fn feature_rows<F: Scalar>(
    space: &NgramSpace,
    examples: &[DecisionExample],
) -> Result<Vec<Vec<(u32, F)>>, ModelError> {
    examples
        .iter()
        .map(|e| {
            Ok(space.featurize(critical(&e.prev_sentences)?, critical(&e.next_sentences)?))
        })
        .collect()
}

fn targets(examples: &[DecisionExample]) -> Vec<usize> {
    examples.iter().map(|e| e.label as usize).collect()
}

fn loss_and_backward<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Var,
    examples: &[DecisionExample],
    set: &mut ParamSet<F>,
) -> Result<f64, ModelError> {
    let loss = tape.cross_entropy(logits, targets(examples))?;
    let value = tape.value(loss).item()?.as_f64();
    tape.backward(loss, set)?;
    Ok(value)
}

fn predict_chunked<F, L>(examples: &[DecisionExample], mut logits_on: L) -> Result<Vec<f64>, ModelError>
where
    F: Scalar,
    L: FnMut(&mut Tape<F>, &[DecisionExample]) -> Result<Var, ModelError>,
{
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(PREDICT_CHUNK) {
        let mut tape = Tape::new();
        let logits = logits_on(&mut tape, chunk)?;
        let probs = tape.softmax_rows(logits)?;
        let pv = tape.value(probs);
        for b in 0..chunk.len() {
            out.push(pv.at2(b, CHANGE_CLASS).as_f64());
        }
    }
    Ok(out)
}

fn dropout_mask<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var, NumError> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let Some(r) = rng.as_deref_mut() else {
        return Ok(x);
    };
    let keep = F::from_f64(1.0 / (1.0 - rate));
    let shape = tape.value(x).shape().to_vec();
    let data: Vec<F> = (0..tape.value(x).numel())
        .map(|_| if r.gen::<f64>() < rate { F::zero() } else { keep })
        .collect();
    let mask = tape.constant(Tensor::from_vec(shape, data).expect("mask sized like x"));
    tape.mul(x, mask)
}

/// Logistic regression over the concatenated n-gram blocks. Weights start at
/// zero, so the untrained model answers 0.5.
#[derive(Clone, Debug)]
pub struct LogRegModel<F: Scalar> {
    pub space: NgramSpace,
    pub set: ParamSet<F>,
    pub w: usize,
    pub b: usize,
}

impl<F: Scalar> LogRegModel<F> {
    pub fn init(space: NgramSpace) -> Result<Self, ModelError> {
        if space.is_empty() {
            return Err(ModelError::Config("empty n-gram space".into()));
        }
        let mut set = ParamSet::new();
        let w = set.add("logreg.w", Tensor::zeros(vec![2, space.feature_width()]))?;
        let b = set.add("logreg.b", Tensor::zeros(vec![2]))?;
        Ok(LogRegModel { space, set, w, b })
    }

    pub fn batch_logits(
        &self,
        tape: &mut Tape<F>,
        examples: &[DecisionExample],
    ) -> Result<Var, ModelError> {
        if examples.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let w = tape.param(&self.set, self.w);
        let z = tape.sparse_linear(w, feature_rows(&self.space, examples)?)?;
        let b = tape.param(&self.set, self.b);
        Ok(tape.add_bias(z, b)?)
    }

    pub fn loss_step(&mut self, examples: &[DecisionExample]) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let logits = self.batch_logits(&mut tape, examples)?;
        loss_and_backward(&mut tape, logits, examples, &mut self.set)
    }

    pub fn predict_probs(&self, examples: &[DecisionExample]) -> Result<Vec<f64>, ModelError> {
        predict_chunked(examples, |tape, chunk| self.batch_logits(tape, chunk))
    }
}

/// N-gram features into two tanh hidden layers, then a 2-way softmax. The
/// final layer starts at zero, so the untrained model answers 0.5.
#[derive(Clone, Debug)]
pub struct DnnModel<F: Scalar> {
    pub space: NgramSpace,
    pub hidden: usize,
    pub dropout: f64,
    pub set: ParamSet<F>,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub w3: usize,
    pub b3: usize,
}

impl<F: Scalar> DnnModel<F> {
    pub fn init(
        space: NgramSpace,
        hidden: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        if space.is_empty() {
            return Err(ModelError::Config("empty n-gram space".into()));
        }
        if hidden == 0 {
            return Err(ModelError::Config("hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(ModelError::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        let n = space.feature_width();
        let mut set = ParamSet::new();
        let u = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            Tensor::uniform(shape, -INIT_SCALE, INIT_SCALE, rng)
        };
        let w1 = set.add("dnn.w1", u(vec![hidden, n], rng))?;
        let b1 = set.add("dnn.b1", Tensor::zeros(vec![hidden]))?;
        let w2 = set.add("dnn.w2", u(vec![hidden, hidden], rng))?;
        let b2 = set.add("dnn.b2", Tensor::zeros(vec![hidden]))?;
        let w3 = set.add("dnn.w3", Tensor::zeros(vec![2, hidden]))?;
        let b3 = set.add("dnn.b3", Tensor::zeros(vec![2]))?;
        Ok(DnnModel { space, hidden, dropout, set, w1, b1, w2, b2, w3, b3 })
    }

    pub fn batch_logits(
        &self,
        tape: &mut Tape<F>,
        examples: &[DecisionExample],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        if examples.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let w1 = tape.param(&self.set, self.w1);
        let b1 = tape.param(&self.set, self.b1);
        let w2 = tape.param(&self.set, self.w2);
        let b2 = tape.param(&self.set, self.b2);
        let w3 = tape.param(&self.set, self.w3);
        let b3 = tape.param(&self.set, self.b3);
        let z1 = tape.sparse_linear(w1, feature_rows(&self.space, examples)?)?;
        let z1 = tape.add_bias(z1, b1)?;
        let h1 = tape.tanh(z1);
        let h1 = dropout_mask(tape, h1, self.dropout, &mut dropout)?;
        let z2 = tape.matmul_tb(h1, w2)?;
        let z2 = tape.add_bias(z2, b2)?;
        let h2 = tape.tanh(z2);
        let h2 = dropout_mask(tape, h2, self.dropout, &mut dropout)?;
        let z3 = tape.matmul_tb(h2, w3)?;
        Ok(tape.add_bias(z3, b3)?)
    }

    pub fn loss_step(
        &mut self,
        examples: &[DecisionExample],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let logits = self.batch_logits(&mut tape, examples, dropout)?;
        loss_and_backward(&mut tape, logits, examples, &mut self.set)
    }

    pub fn predict_probs(&self, examples: &[DecisionExample]) -> Result<Vec<f64>, ModelError> {
        predict_chunked(examples, |tape, chunk| self.batch_logits(tape, chunk, None))
    }
}

/// Window-3 convolution with tanh over the token embeddings of each critical
/// sentence, max-pooled over positions, then the shared affine classifier.
#[derive(Clone, Debug)]
pub struct CnnModel<F: Scalar> {
    pub vocab_size: usize,
    pub dim: usize,
    pub dropout: f64,
    pub set: ParamSet<F>,
    pub embedding: usize,
    pub conv_w: usize,
    pub conv_b: usize,
    pub cls_w: usize,
    pub cls_b: usize,
}

impl<F: Scalar> CnnModel<F> {
    pub fn init(
        vocab_size: usize,
        dim: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        if vocab_size < 2 {
            return Err(ModelError::Config(format!(
                "vocab_size {vocab_size} cannot hold PAD and UNK"
            )));
        }
        if dim == 0 {
            return Err(ModelError::Config("dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(ModelError::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        let mut set = ParamSet::new();
        let u = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            Tensor::uniform(shape, -INIT_SCALE, INIT_SCALE, rng)
        };
        let embedding = set.add("cnn.embedding", u(vec![vocab_size, dim], rng))?;
        let conv_w = set.add("cnn.conv_w", u(vec![dim, 3 * dim], rng))?;
        let conv_b = set.add("cnn.conv_b", Tensor::zeros(vec![dim]))?;
        let cls_w = set.add("cnn.cls_w", Tensor::zeros(vec![2, 2 * dim]))?;
        let cls_b = set.add("cnn.cls_b", Tensor::zeros(vec![2]))?;
        Ok(CnnModel { vocab_size, dim, dropout, set, embedding, conv_w, conv_b, cls_w, cls_b })
    }

    /// Sentence vectors for one sentence per row: every window of three
    /// consecutive tokens (sentences shorter than three are padded) passes
    /// through the convolution, and positions max-pool per row.
    fn encode_batch(
        &self,
        tape: &mut Tape<F>,
        table: Var,
        conv_w: Var,
        conv_b: Var,
        sentences: &[&[u32]],
    ) -> Result<Var, NumError> {
        let mut ids = [Vec::new(), Vec::new(), Vec::new()];
        let mut ranges = Vec::with_capacity(sentences.len());
        for s in sentences {
            let mut padded = s.to_vec();
            while padded.len() < 3 {
                padded.push(PAD_ID);
            }
            let start = ids[0].len();
            for p in 0..padded.len() - 2 {
                for (k, bucket) in ids.iter_mut().enumerate() {
                    bucket.push(padded[p + k]);
                }
            }
            ranges.push((start, ids[0].len()));
        }
        let e1 = tape.embed_rows(table, &ids[0])?;
        let e2 = tape.embed_rows(table, &ids[1])?;
        let e3 = tape.embed_rows(table, &ids[2])?;
        let windows = tape.concat(&[e1, e2, e3], 1)?;
        let pre = tape.matmul_tb(windows, conv_w)?;
        let pre = tape.add_bias(pre, conv_b)?;
        let act = tape.tanh(pre);
        tape.max_pool_rows(act, ranges)
    }

    pub fn batch_logits(
        &self,
        tape: &mut Tape<F>,
        examples: &[DecisionExample],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        if examples.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let table = tape.param(&self.set, self.embedding);
        let conv_w = tape.param(&self.set, self.conv_w);
        let conv_b = tape.param(&self.set, self.conv_b);
        let cls_w = tape.param(&self.set, self.cls_w);
        let cls_b = tape.param(&self.set, self.cls_b);
        let prev: Vec<&[u32]> = examples
            .iter()
            .map(|e| critical(&e.prev_sentences))
            .collect::<Result<_, _>>()?;
        let next: Vec<&[u32]> = examples
            .iter()
            .map(|e| critical(&e.next_sentences))
            .collect::<Result<_, _>>()?;
        let enc_p = self.encode_batch(tape, table, conv_w, conv_b, &prev)?;
        let enc_f = self.encode_batch(tape, table, conv_w, conv_b, &next)?;
        let feats = tape.concat(&[enc_p, enc_f], 1)?;
        let feats = dropout_mask(tape, feats, self.dropout, &mut dropout)?;
        let z = tape.matmul_tb(feats, cls_w)?;
        Ok(tape.add_bias(z, cls_b)?)
    }

    pub fn loss_step(
        &mut self,
        examples: &[DecisionExample],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let logits = self.batch_logits(&mut tape, examples, dropout)?;
        loss_and_backward(&mut tape, logits, examples, &mut self.set)
    }

    pub fn predict_probs(&self, examples: &[DecisionExample]) -> Result<Vec<f64>, ModelError> {
        predict_chunked(examples, |tape, chunk| self.batch_logits(tape, chunk, None))
    }
}

/// Bernoulli `change` prediction with the given rate.
pub fn random_guess(rate: f64, rng: &mut ChaCha8Rng) -> Result<bool, ModelError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(ModelError::Config(format!("guess rate {rate} outside [0, 1]")));
    }
    Ok(rng.gen::<f64>() < rate)
}

/// Hard 0/1 probabilities from repeated guessing; feeds the shared metrics.
pub fn random_guess_probs(
    rate: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, ModelError> {
    (0..n)
        .map(|_| random_guess(rate, rng).map(|b| if b { 1.0 } else { 0.0 }))
        .collect()
}
