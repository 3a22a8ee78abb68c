//! Single-example forward passes.
//!
//! The reference path: one fresh tape per call, rank-1 tensors throughout.
//! The batched path in `batch` must reproduce these logits exactly, which is
//! what its parity tests check.

use super::{
    BoundAttention, BoundCell, BoundFold, BoundModel, ModelConfig, ModelError, ModelParams,
    Variant, CHANGE_CLASS,
};
use crate::corpus::DecisionExample;
use crate::numcore::{invalid, NumError, Scalar, Tape, Tensor, Var};

/// Hidden and cell state of one LSTM position.
#[derive(Clone, Copy, Debug)]
pub struct LstmStateVars {
    pub h: Var,
    pub c: Var,
}

fn zero_state<F: Scalar>(tape: &mut Tape<F>, d: usize) -> LstmStateVars {
    LstmStateVars {
        h: tape.constant(Tensor::zeros(vec![d])),
        c: tape.constant(Tensor::zeros(vec![d])),
    }
}

/// One LSTM step over a rank-1 input. The sigmoid gates are stacked in one
/// matrix: rows `0..d` gate input, `d..2d` forget, `2d..3d` output.
pub fn lstm_step<F: Scalar>(
    tape: &mut Tape<F>,
    cell: &BoundCell,
    x: Var,
    state: &LstmStateVars,
) -> Result<LstmStateVars, NumError> {
    let d = tape.value(state.h).numel();
    let wx = tape.matvec(cell.w, x)?;
    let uh = tape.matvec(cell.u, state.h)?;
    let pre = tape.add(wx, uh)?;
    let pre = tape.add(pre, cell.b)?;
    let gates = tape.sigmoid(pre);
    let i = tape.slice_last(gates, 0, d)?;
    let f = tape.slice_last(gates, d, d)?;
    let o = tape.slice_last(gates, 2 * d, d)?;
    let gx = tape.matvec(cell.w_g, x)?;
    let gu = tape.matvec(cell.u_g, state.h)?;
    let gpre = tape.add(gx, gu)?;
    let gpre = tape.add(gpre, cell.b_g)?;
    let g = tape.tanh(gpre);
    let ig = tape.mul(i, g)?;
    let cf = tape.mul(state.c, f)?;
    let c = tape.add(ig, cf)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(LstmStateVars { h, c })
}

/// Sentence embedding: final hidden state of the word LSTM over the tokens,
/// starting from a zero state.
pub fn encode_sentence<F: Scalar>(
    tape: &mut Tape<F>,
    embedding: Var,
    cell: &BoundCell,
    dim: usize,
    tokens: &[u32],
) -> Result<Var, NumError> {
    if tokens.is_empty() {
        return Err(invalid("encode_sentence", "no tokens"));
    }
    let mut state = zero_state(tape, dim);
    for &id in tokens {
        let x = tape.embed_row(embedding, id)?;
        state = lstm_step(tape, cell, x, &state)?;
    }
    Ok(state.h)
}

/// Sentence-level encoder over one side's sentence embeddings, ordered from
/// the farthest sentence toward the decision boundary. Returns the state at
/// every position; the last one embeds the critical sentence in context.
pub fn encode_context<F: Scalar>(
    tape: &mut Tape<F>,
    cell: &BoundCell,
    dim: usize,
    sentences: &[Var],
) -> Result<Vec<Var>, NumError> {
    if sentences.is_empty() {
        return Err(invalid("encode_context", "no sentences"));
    }
    let mut state = zero_state(tape, dim);
    let mut states = Vec::with_capacity(sentences.len());
    for &s in sentences {
        state = lstm_step(tape, cell, s, &state)?;
        states.push(state.h);
    }
    Ok(states)
}

/// Attention of one query over a list of keys. Each score comes from a
/// one-layer perceptron on [query; key]; the summary is the softmax-weighted
/// sum of the keys. Returns the summary and the weights.
pub fn static_attention<F: Scalar>(
    tape: &mut Tape<F>,
    attn: &BoundAttention,
    query: Var,
    keys: &[Var],
) -> Result<(Var, Var), NumError> {
    if keys.is_empty() {
        return Err(invalid("static_attention", "no keys"));
    }
    let mut scores = Vec::with_capacity(keys.len());
    for &key in keys {
        let cat = tape.concat(&[query, key], 0)?;
        let pre = tape.matvec(attn.w_a, cat)?;
        let th = tape.tanh(pre);
        scores.push(tape.dot(attn.u_a, th)?);
    }
    let score_vec = tape.concat(&scores, 0)?;
    let alphas = tape.softmax_vec(score_vec)?;
    let mut m: Option<Var> = None;
    for (i, &key) in keys.iter().enumerate() {
        let a_i = tape.slice_last(alphas, i, 1)?;
        let term = tape.mul_scalar(key, a_i)?;
        m = Some(match m {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok((m.expect("keys checked non-empty"), alphas))
}

/// Attention run from every query position, folded recurrently: the first
/// summary seeds the fold, each later one passes through tanh(W[r; a] + b).
/// With a single query this reduces exactly to static attention.
pub fn dynamic_attention<F: Scalar>(
    tape: &mut Tape<F>,
    attn: &BoundAttention,
    fold: &BoundFold,
    queries: &[Var],
    keys: &[Var],
) -> Result<Var, NumError> {
    if queries.is_empty() {
        return Err(invalid("dynamic_attention", "no queries"));
    }
    let mut r: Option<Var> = None;
    for &q in queries {
        let (a, _) = static_attention(tape, attn, q, keys)?;
        r = Some(match r {
            None => a,
            Some(prev) => {
                let cat = tape.concat(&[prev, a], 0)?;
                let pre = tape.matvec(fold.w, cat)?;
                let pre = tape.add(pre, fold.b)?;
                tape.tanh(pre)
            }
        });
    }
    Ok(r.expect("queries checked non-empty"))
}

fn side_window<'a>(
    config: &ModelConfig,
    sentences: &'a [Vec<u32>],
) -> Result<&'a [Vec<u32>], ModelError> {
    let want = config.window();
    if sentences.len() != want {
        return Err(ModelError::WindowMismatch { want, got: sentences.len() });
    }
    Ok(sentences)
}

/// Classifier input for one example: the two side representations, plus the
/// two attention summaries for the attention variants. The prev-side blocks
/// come first, and each attention summary aggregates the opposite side.
pub(crate) fn features_single<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundModel,
    config: &ModelConfig,
    example: &DecisionExample,
) -> Result<Var, ModelError> {
    let d = config.dim;
    let prev = side_window(config, &example.prev_sentences)?;
    let next = side_window(config, &example.next_sentences)?;
    match config.variant {
        Variant::NoContext => {
            let crit_p = prev.last().expect("window is positive");
            let crit_f = next.last().expect("window is positive");
            let sp = encode_sentence(tape, bound.embedding, &bound.word, d, crit_p)?;
            let sf = encode_sentence(tape, bound.embedding, &bound.word, d, crit_f)?;
            Ok(tape.concat(&[sp, sf], 0)?)
        }
        Variant::NonHierarchical => {
            let sp = encode_sentence(tape, bound.embedding, &bound.word, d, &prev.concat())?;
            let sf = encode_sentence(tape, bound.embedding, &bound.word, d, &next.concat())?;
            Ok(tape.concat(&[sp, sf], 0)?)
        }
        _ => {
            let cell = bound.sentence.as_ref().expect("hierarchical variants have one");
            let embed_side = |tape: &mut Tape<F>, side: &[Vec<u32>]| -> Result<Vec<Var>, NumError> {
                side.iter()
                    .map(|s| encode_sentence(tape, bound.embedding, &bound.word, d, s))
                    .collect()
            };
            let embs_p = embed_side(tape, prev)?;
            let embs_f = embed_side(tape, next)?;
            let states_p = encode_context(tape, cell, d, &embs_p)?;
            let states_f = encode_context(tape, cell, d, &embs_f)?;
            let sp = *states_p.last().expect("window is positive");
            let sf = *states_f.last().expect("window is positive");
            match config.variant {
                Variant::Hierarchical => Ok(tape.concat(&[sp, sf], 0)?),
                Variant::HierarchicalStaticAttn => {
                    let attn = bound.attention.as_ref().expect("attention variant");
                    let (mp, _) = static_attention(tape, attn, sp, &states_f)?;
                    let (mf, _) = static_attention(tape, attn, sf, &states_p)?;
                    Ok(tape.concat(&[sp, sf, mp, mf], 0)?)
                }
                Variant::HierarchicalDynamicAttn => {
                    let attn = bound.attention.as_ref().expect("attention variant");
                    let fold = bound.fold.as_ref().expect("dynamic variant");
                    let mp = dynamic_attention(tape, attn, fold, &states_p, &states_f)?;
                    let mf = dynamic_attention(tape, attn, fold, &states_f, &states_p)?;
                    Ok(tape.concat(&[sp, sf, mp, mf], 0)?)
                }
                _ => unreachable!("non-hierarchical variants handled above"),
            }
        }
    }
}

pub(crate) fn logits_single<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundModel,
    config: &ModelConfig,
    example: &DecisionExample,
) -> Result<Var, ModelError> {
    let feats = features_single(tape, bound, config, example)?;
    let wz = tape.matvec(bound.classifier_w, feats)?;
    Ok(tape.add(wz, bound.classifier_b)?)
}

/// Scores one decision on a fresh tape, without dropout. Returns the change
/// probability and the raw logits `[same, change]`.
pub fn classify_decision<F: Scalar>(
    params: &ModelParams<F>,
    example: &DecisionExample,
) -> Result<(f64, [F; 2]), ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let logits = logits_single(&mut tape, &bound, &params.config, example)?;
    let probs = tape.softmax_vec(logits)?;
    let lv = tape.value(logits).data();
    let pair = [lv[0], lv[1]];
    Ok((tape.value(probs).data()[CHANGE_CLASS].as_f64(), pair))
}
