//! Batched forward passes and the training-step loss.
//!
//! With dropout off, every batched kernel reproduces the single-example path
//! exactly: `matmul_tb` row b equals `matvec` on row b, variable-length
//! sentences capture each row's state at its true final token through a
//! one-hot mask, and additions happen in the same order as in `single`.
//! The parity tests below compare logits element for element.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BoundAttention, BoundCell, BoundFold, BoundModel, ModelConfig, ModelError,
    ModelParams, Variant, CHANGE_CLASS};
use crate::corpus::{DecisionExample, PAD_ID};
use crate::numcore::{invalid, NumError, Scalar, Tape, Tensor, Var};

/// Examples scored per tape during prediction; bounds arena memory without
/// affecting the numbers.
const PREDICT_CHUNK: usize = 256;

struct BatchState {
    h: Var,
    c: Var,
}

fn zero_batch_state<F: Scalar>(tape: &mut Tape<F>, b: usize, d: usize) -> BatchState {
    BatchState {
        h: tape.constant(Tensor::zeros(vec![b, d])),
        c: tape.constant(Tensor::zeros(vec![b, d])),
    }
}

fn lstm_step_batch<F: Scalar>(
    tape: &mut Tape<F>,
    cell: &BoundCell,
    x: Var,
    state: &BatchState,
    d: usize,
) -> Result<BatchState, NumError> {
    let wx = tape.matmul_tb(x, cell.w)?;
    let uh = tape.matmul_tb(state.h, cell.u)?;
    let pre = tape.add(wx, uh)?;
    let pre = tape.add_bias(pre, cell.b)?;
    let gates = tape.sigmoid(pre);
    let i = tape.slice_last(gates, 0, d)?;
    let f = tape.slice_last(gates, d, d)?;
    let o = tape.slice_last(gates, 2 * d, d)?;
    let gx = tape.matmul_tb(x, cell.w_g)?;
    let gu = tape.matmul_tb(state.h, cell.u_g)?;
    let gpre = tape.add(gx, gu)?;
    let gpre = tape.add_bias(gpre, cell.b_g)?;
    let g = tape.tanh(gpre);
    let ig = tape.mul(i, g)?;
    let cf = tape.mul(state.c, f)?;
    let c = tape.add(ig, cf)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(BatchState { h, c })
}

/// Word LSTM over one sentence per row. Rows run padded to the longest
/// sentence; each row's embedding is its state at its own final token,
/// collected through one-hot row masks, so padding never leaks into the
/// result or the gradients.
fn encode_sentences_batch<F: Scalar>(
    tape: &mut Tape<F>,
    embedding: Var,
    cell: &BoundCell,
    d: usize,
    sentences: &[&[u32]],
) -> Result<Var, NumError> {
    if sentences.is_empty() {
        return Err(invalid("encode_sentences_batch", "no sentences"));
    }
    if sentences.iter().any(|s| s.is_empty()) {
        return Err(invalid("encode_sentences_batch", "empty sentence"));
    }
    let t_max = sentences.iter().map(|s| s.len()).max().expect("non-empty batch");
    let mut state = zero_batch_state(tape, sentences.len(), d);
    let mut acc: Option<Var> = None;
    for t in 0..t_max {
        let ids: Vec<u32> = sentences
            .iter()
            .map(|s| s.get(t).copied().unwrap_or(PAD_ID))
            .collect();
        let x = tape.embed_rows(embedding, &ids)?;
        state = lstm_step_batch(tape, cell, x, &state, d)?;
        let mask: Vec<F> = sentences
            .iter()
            .map(|s| if s.len() == t + 1 { F::one() } else { F::zero() })
            .collect();
        if mask.iter().any(|m| *m == F::one()) {
            let mv = tape.constant(Tensor::vector(mask));
            let captured = tape.row_mul(state.h, mv)?;
            acc = Some(match acc {
                None => captured,
                Some(prev) => tape.add(prev, captured)?,
            });
        }
    }
    Ok(acc.expect("every sentence finishes by t_max"))
}

fn encode_contexts_batch<F: Scalar>(
    tape: &mut Tape<F>,
    cell: &BoundCell,
    d: usize,
    positions: &[Var],
) -> Result<Vec<Var>, NumError> {
    if positions.is_empty() {
        return Err(invalid("encode_contexts_batch", "no positions"));
    }
    let b = tape.value(positions[0]).shape()[0];
    let mut state = zero_batch_state(tape, b, d);
    let mut states = Vec::with_capacity(positions.len());
    for &p in positions {
        state = lstm_step_batch(tape, cell, p, &state, d)?;
        states.push(state.h);
    }
    Ok(states)
}

fn static_attention_batch<F: Scalar>(
    tape: &mut Tape<F>,
    attn: &BoundAttention,
    query: Var,
    keys: &[Var],
) -> Result<(Var, Var), NumError> {
    if keys.is_empty() {
        return Err(invalid("static_attention_batch", "no keys"));
    }
    let mut scores = Vec::with_capacity(keys.len());
    for &key in keys {
        let cat = tape.concat(&[query, key], 1)?;
        let pre = tape.matmul_tb(cat, attn.w_a)?;
        let th = tape.tanh(pre);
        scores.push(tape.matvec(th, attn.u_a)?);
    }
    let score_mat = tape.stack_cols(&scores)?;
    let alphas = tape.softmax_rows(score_mat)?;
    let mut m: Option<Var> = None;
    for (i, &key) in keys.iter().enumerate() {
        let a_i = tape.slice_col(alphas, i)?;
        let term = tape.row_mul(key, a_i)?;
        m = Some(match m {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok((m.expect("keys checked non-empty"), alphas))
}

fn dynamic_attention_batch<F: Scalar>(
    tape: &mut Tape<F>,
    attn: &BoundAttention,
    fold: &BoundFold,
    queries: &[Var],
    keys: &[Var],
) -> Result<Var, NumError> {
    if queries.is_empty() {
        return Err(invalid("dynamic_attention_batch", "no queries"));
    }
    let mut r: Option<Var> = None;
    for &q in queries {
        let (a, _) = static_attention_batch(tape, attn, q, keys)?;
        r = Some(match r {
            None => a,
            Some(prev) => {
                let cat = tape.concat(&[prev, a], 1)?;
                let pre = tape.matmul_tb(cat, fold.w)?;
                let pre = tape.add_bias(pre, fold.b)?;
                tape.tanh(pre)
            }
        });
    }
    Ok(r.expect("queries checked non-empty"))
}

/// Inverted dropout: entries drop with probability `rate`, survivors scale
/// by 1/(1-rate). Identity when no rng is supplied or the rate is zero.
fn apply_dropout<F: Scalar>(
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
    let n = tape.value(x).numel();
    let data: Vec<F> = (0..n)
        .map(|_| if r.gen::<f64>() < rate { F::zero() } else { keep })
        .collect();
    let mask = tape.constant(Tensor::from_vec(shape, data).expect("mask sized like x"));
    tape.mul(x, mask)
}

fn check_windows(config: &ModelConfig, examples: &[DecisionExample]) -> Result<(), ModelError> {
    let want = config.window();
    for ex in examples {
        for got in [ex.prev_sentences.len(), ex.next_sentences.len()] {
            if got != want {
                return Err(ModelError::WindowMismatch { want, got });
            }
        }
    }
    Ok(())
}

fn features_batch<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundModel,
    config: &ModelConfig,
    examples: &[DecisionExample],
    dropout: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var, ModelError> {
    if examples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    check_windows(config, examples)?;
    let d = config.dim;
    let w = config.window();
    match config.variant {
        Variant::NoContext => {
            let prev: Vec<&[u32]> = examples
                .iter()
                .map(|e| e.prev_sentences.last().expect("window checked").as_slice())
                .collect();
            let next: Vec<&[u32]> = examples
                .iter()
                .map(|e| e.next_sentences.last().expect("window checked").as_slice())
                .collect();
            let sp = encode_sentences_batch(tape, bound.embedding, &bound.word, d, &prev)?;
            let sf = encode_sentences_batch(tape, bound.embedding, &bound.word, d, &next)?;
            Ok(tape.concat(&[sp, sf], 1)?)
        }
        Variant::NonHierarchical => {
            let prev: Vec<Vec<u32>> = examples.iter().map(|e| e.prev_sentences.concat()).collect();
            let next: Vec<Vec<u32>> = examples.iter().map(|e| e.next_sentences.concat()).collect();
            let prev_refs: Vec<&[u32]> = prev.iter().map(|v| v.as_slice()).collect();
            let next_refs: Vec<&[u32]> = next.iter().map(|v| v.as_slice()).collect();
            let sp = encode_sentences_batch(tape, bound.embedding, &bound.word, d, &prev_refs)?;
            let sf = encode_sentences_batch(tape, bound.embedding, &bound.word, d, &next_refs)?;
            Ok(tape.concat(&[sp, sf], 1)?)
        }
        _ => {
            let cell = bound.sentence.as_ref().expect("hierarchical variants have one");
            let mut sides: Vec<Vec<Var>> = Vec::with_capacity(2);
            for prev_side in [true, false] {
                let mut positions = Vec::with_capacity(w);
                for j in 0..w {
                    let sents: Vec<&[u32]> = examples
                        .iter()
                        .map(|e| {
                            let side = if prev_side { &e.prev_sentences } else { &e.next_sentences };
                            side[j].as_slice()
                        })
                        .collect();
                    let emb =
                        encode_sentences_batch(tape, bound.embedding, &bound.word, d, &sents)?;
                    positions.push(apply_dropout(tape, emb, config.dropout, dropout)?);
                }
                sides.push(encode_contexts_batch(tape, cell, d, &positions)?);
            }
            let states_f = sides.pop().expect("two sides");
            let states_p = sides.pop().expect("two sides");
            let sp = *states_p.last().expect("window is positive");
            let sf = *states_f.last().expect("window is positive");
            match config.variant {
                Variant::Hierarchical => Ok(tape.concat(&[sp, sf], 1)?),
                Variant::HierarchicalStaticAttn => {
                    let attn = bound.attention.as_ref().expect("attention variant");
                    let (mp, _) = static_attention_batch(tape, attn, sp, &states_f)?;
                    let (mf, _) = static_attention_batch(tape, attn, sf, &states_p)?;
                    Ok(tape.concat(&[sp, sf, mp, mf], 1)?)
                }
                Variant::HierarchicalDynamicAttn => {
                    let attn = bound.attention.as_ref().expect("attention variant");
                    let fold = bound.fold.as_ref().expect("dynamic variant");
                    let mp = dynamic_attention_batch(tape, attn, fold, &states_p, &states_f)?;
                    let mf = dynamic_attention_batch(tape, attn, fold, &states_f, &states_p)?;
                    Ok(tape.concat(&[sp, sf, mp, mf], 1)?)
                }
                _ => unreachable!("non-hierarchical variants handled above"),
            }
        }
    }
}

/// Logits `[batch, 2]` for a slice of examples on an existing tape. Dropout
/// masks are drawn from `dropout` when supplied; pass `None` for inference.
pub fn batch_logits<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundModel,
    config: &ModelConfig,
    examples: &[DecisionExample],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var, ModelError> {
    let feats = features_batch(tape, bound, config, examples, &mut dropout)?;
    let feats = apply_dropout(tape, feats, config.dropout, &mut dropout)?;
    let wz = tape.matmul_tb(feats, bound.classifier_w)?;
    Ok(tape.add_bias(wz, bound.classifier_b)?)
}

/// One training step's forward and backward: mean cross-entropy over the
/// batch, gradients accumulated (`+=`) into `params.set`. The caller zeroes
/// gradients between steps. Returns the loss.
pub fn batch_loss<F: Scalar>(
    params: &mut ModelParams<F>,
    examples: &[DecisionExample],
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let logits = batch_logits(&mut tape, &bound, &params.config, examples, dropout)?;
    let targets: Vec<usize> = examples.iter().map(|e| e.label as usize).collect();
    let loss = tape.cross_entropy(logits, targets)?;
    let value = tape.value(loss).item()?.as_f64();
    tape.backward(loss, &mut params.set)?;
    Ok(value)
}

/// Change probabilities for a slice of examples, inference mode. Scoring is
/// chunked to bound tape memory; chunking does not change the numbers.
pub fn predict_probs<F: Scalar>(
    params: &ModelParams<F>,
    examples: &[DecisionExample],
) -> Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(PREDICT_CHUNK) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let logits = batch_logits(&mut tape, &bound, &params.config, chunk, None)?;
        let probs = tape.softmax_rows(logits)?;
        let pv = tape.value(probs);
        for b in 0..chunk.len() {
            out.push(pv.at2(b, CHANGE_CLASS).as_f64());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{classify_decision, ModelParams};
    use super::*;
    use crate::rngs;
    use rand::Rng;

    fn test_rng(seed: u64) -> ChaCha8Rng {
        rngs::stream_rng(seed, rngs::INIT)
    }

    fn config(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            dim: 5,
            attn_dim: 4,
            context_size: 2,
            vocab_size: 17,
            dropout: 0.0,
        }
    }

    /// Random params with a non-zero classifier so logits are informative.
    fn random_params(config: &ModelConfig, seed: u64) -> ModelParams<f32> {
        let mut rng = test_rng(seed);
        let mut params = ModelParams::<f32>::init(config.clone(), &mut rng).unwrap();
        let k = config.classifier_input_dim();
        params
            .set
            .set_value(
                params.classifier_w,
                Tensor::uniform(vec![2, k], -0.3, 0.3, &mut rng),
            )
            .unwrap();
        params
            .set
            .set_value(
                params.classifier_b,
                Tensor::uniform(vec![2], -0.1, 0.1, &mut rng),
            )
            .unwrap();
        params
    }

    fn random_examples(config: &ModelConfig, n: usize, seed: u64) -> Vec<DecisionExample> {
        let mut rng = test_rng(seed);
        let w = config.window();
        (0..n)
            .map(|i| {
                let sent = |rng: &mut ChaCha8Rng| -> Vec<u32> {
                    let len = rng.gen_range(1..6usize);
                    (0..len)
                        .map(|_| rng.gen_range(0..config.vocab_size as u32))
                        .collect()
                };
                DecisionExample {
                    episode_id: format!("e{i}"),
                    position: i,
                    prev_sentences: (0..w).map(|_| sent(&mut rng)).collect(),
                    next_sentences: (0..w).map(|_| sent(&mut rng)).collect(),
                    label: rng.gen_bool(0.5),
                }
            })
            .collect()
    }

    #[test]
    fn batched_logits_equal_single_logits_for_every_variant() {
        for variant in Variant::ALL {
            let config = config(variant);
            let params = random_params(&config, 101);
            let examples = random_examples(&config, 7, 102);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let logits = batch_logits(&mut tape, &bound, &config, &examples, None).unwrap();
            for (b, ex) in examples.iter().enumerate() {
                let (_, single) = classify_decision(&params, ex).unwrap();
                // Exact: same kernels, same accumulation order per row.
                assert_eq!(tape.value(logits).at2(b, 0), single[0], "{variant} row {b}");
                assert_eq!(tape.value(logits).at2(b, 1), single[1], "{variant} row {b}");
            }
        }
    }

    #[test]
    fn prediction_chunking_matches_per_example_scores() {
        let config = config(Variant::Hierarchical);
        let params = random_params(&config, 111);
        // More examples than one chunk, so a boundary is crossed.
        let examples = random_examples(&config, PREDICT_CHUNK + 19, 112);
        let probs = predict_probs(&params, &examples).unwrap();
        assert_eq!(probs.len(), examples.len());
        for (p, ex) in probs.iter().zip(&examples) {
            let (single_p, _) = classify_decision(&params, ex).unwrap();
            assert_eq!(*p, single_p);
        }
    }

    #[test]
    fn untrained_loss_is_ln_two() {
        let config = config(Variant::NoContext);
        let mut params =
            ModelParams::<f32>::init(config.clone(), &mut test_rng(121)).unwrap();
        let examples = random_examples(&config, 9, 122);
        let loss = batch_loss(&mut params, &examples, None).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn zero_dropout_rate_ignores_the_rng() {
        let config = config(Variant::HierarchicalStaticAttn);
        let params = random_params(&config, 131);
        let examples = random_examples(&config, 4, 132);
        let mut tape_a = Tape::new();
        let bound_a = params.bind(&mut tape_a);
        let a = batch_logits(&mut tape_a, &bound_a, &config, &examples, None).unwrap();
        let mut rng = test_rng(133);
        let mut tape_b = Tape::new();
        let bound_b = params.bind(&mut tape_b);
        let b = batch_logits(&mut tape_b, &bound_b, &config, &examples, Some(&mut rng)).unwrap();
        assert_eq!(tape_a.value(a).data(), tape_b.value(b).data());
    }

    #[test]
    fn dropout_is_seed_deterministic_and_changes_the_forward() {
        let mut config = config(Variant::HierarchicalStaticAttn);
        config.dropout = 0.5;
        let params = random_params(&config, 141);
        let examples = random_examples(&config, 6, 142);
        let run = |seed: u64| -> Vec<f32> {
            let mut rng = test_rng(seed);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let logits =
                batch_logits(&mut tape, &bound, &config, &examples, Some(&mut rng)).unwrap();
            tape.value(logits).data().to_vec()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let clean = batch_logits(&mut tape, &bound, &config, &examples, None).unwrap();
        assert_ne!(run(7), tape.value(clean).data());
    }

    #[test]
    fn gradients_flow_to_every_bound_block() {
        let config = config(Variant::HierarchicalDynamicAttn);
        let mut params = random_params(&config, 151);
        let examples = random_examples(&config, 5, 152);
        params.set.zero_grads();
        let loss = batch_loss(&mut params, &examples, None).unwrap();
        assert!(loss.is_finite());
        for name in [
            "embedding",
            "word.w",
            "sentence.w",
            "attention.w_a",
            "attention.u_a",
            "fold.w",
            "classifier.w",
            "classifier.b",
        ] {
            let slot = params.set.slot_of(name).unwrap();
            let grad = params.set.get(slot).grad();
            assert!(
                grad.data().iter().any(|v| v.abs() > 0.0),
                "no gradient reached {name}"
            );
        }
    }

    #[test]
    fn batch_errors_are_reported() {
        let config = config(Variant::Hierarchical);
        let mut params = random_params(&config, 161);
        let err = batch_loss(&mut params, &[], None).unwrap_err();
        assert!(matches!(err, ModelError::EmptyBatch));
        let mut bad = random_examples(&config, 1, 162);
        bad[0].next_sentences.push(vec![1, 2]);
        let err = batch_loss(&mut params, &bad, None).unwrap_err();
        assert!(matches!(err, ModelError::WindowMismatch { want: 3, got: 4 }));
    }
}
