//! Whole-toolkit acceptance checks: exact numeric oracles, behavioral
//! properties, and desk-scale training experiments on generated corpora.
//! Every test prints one PASS/FAIL line with its measurements, so a run
//! under `--nocapture` reads as a checklist.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use scd::baselines::{self, CnnModel, DnnModel, LogRegModel, NgramSpace, DEFAULT_NGRAM_CAP};
use scd::checkpoint::{self, AnyModel};
use scd::corpus::{self, DecisionExample, Episode, Vocabulary, DEFAULT_VOCAB_CAP};
use scd::gradcheck;
use scd::metrics::{self, Prediction, DECISION_THRESHOLD};
use scd::model::{
    lstm_step, static_attention, BoundAttention, BoundCell, LstmCellSlots, LstmStateVars,
    ModelConfig, ModelParams, Variant,
};
use scd::numcore::{ParamSet, Tape, Tensor};
use scd::rngs;
use scd::synthgen::{self, SynthSpec};
use scd::training::{self, AdamState, Classifier, TrainConfig};

fn check(name: &str, pass: bool, detail: &str) {
    println!("{name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

// ---------------------------------------------------------------------------
// Shared corpus plumbing. Mirrors the CLI pipeline: episode split, vocabulary
// from the training split only, then window extraction per model.

struct Splits {
    train: Vec<Episode>,
    val: Vec<Episode>,
    test: Vec<Episode>,
    vocab: Vocabulary,
}

fn prepare(spec: &SynthSpec, seed: u64) -> Splits {
    let episodes = synthgen::generate(spec).unwrap();
    let manifest = corpus::split_by_episode(&episodes, seed).unwrap();
    let mut train = corpus::select_episodes(&episodes, &manifest.train).unwrap();
    let mut val = corpus::select_episodes(&episodes, &manifest.val).unwrap();
    let mut test = corpus::select_episodes(&episodes, &manifest.test).unwrap();
    let vocab = Vocabulary::build(&train, DEFAULT_VOCAB_CAP).unwrap();
    corpus::numericalize(&mut train, &vocab);
    corpus::numericalize(&mut val, &vocab);
    corpus::numericalize(&mut test, &vocab);
    Splits { train, val, test, vocab }
}

fn examples(episodes: &[Episode], window: usize) -> Vec<DecisionExample> {
    episodes
        .iter()
        .flat_map(|e| corpus::extract_examples(e, window).unwrap())
        .collect()
}

fn experiment_spec(seed: u64, overlap: f64, context_signal: bool) -> SynthSpec {
    SynthSpec {
        n_episodes: 200,
        utterances_min: 10,
        utterances_max: 20,
        n_speakers: 4,
        persona_vocab: 40,
        overlap,
        context_signal,
        change_prob: 0.25,
        seed,
    }
}

fn experiment_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        lr: 3e-3,
        max_epochs: 40,
        patience: 8,
        seed,
        ..TrainConfig::default()
    }
}

/// Trains one RNN variant on prepared splits and returns its test F1.
fn rnn_test_f1(splits: &Splits, variant: Variant, context_size: usize, seed: u64) -> f64 {
    let window = context_size + 1;
    let train_ex = examples(&splits.train, window);
    let val_ex = examples(&splits.val, window);
    let test_ex = examples(&splits.test, window);
    let config = ModelConfig {
        variant,
        dim: 32,
        attn_dim: 32,
        context_size,
        vocab_size: splits.vocab.len(),
        dropout: 0.1,
    };
    let mut model =
        ModelParams::<f32>::init(config, &mut rngs::stream_rng(seed, rngs::INIT)).unwrap();
    training::train(&mut model, &train_ex, &val_ex, &experiment_train_config(seed)).unwrap();
    training::evaluate_model(&model, &test_ex).unwrap().f1
}

// ---------------------------------------------------------------------------
// The marked-corpus experiment: five training runs per seed, shared between
// the architecture-ladder test and the context-width test.

struct LadderRun {
    static_attn: f64,
    hierarchical: f64,
    non_hierarchical: f64,
    no_context: f64,
    static_attn_ctx0: f64,
}

struct Ladder {
    runs: Vec<LadderRun>,
    elapsed: Duration,
}

impl Ladder {
    fn mean(&self, field: impl Fn(&LadderRun) -> f64) -> f64 {
        self.runs.iter().map(&field).sum::<f64>() / self.runs.len() as f64
    }
}

const LADDER_SEEDS: [u64; 3] = [1, 2, 3];

fn ladder() -> &'static Ladder {
    static LADDER: OnceLock<Ladder> = OnceLock::new();
    LADDER.get_or_init(|| {
        let start = Instant::now();
        let runs = LADDER_SEEDS
            .iter()
            .map(|&seed| {
                let splits = prepare(&experiment_spec(seed, 0.3, true), seed);
                LadderRun {
                    static_attn: rnn_test_f1(&splits, Variant::HierarchicalStaticAttn, 2, seed),
                    hierarchical: rnn_test_f1(&splits, Variant::Hierarchical, 2, seed),
                    non_hierarchical: rnn_test_f1(&splits, Variant::NonHierarchical, 2, seed),
                    no_context: rnn_test_f1(&splits, Variant::NoContext, 2, seed),
                    static_attn_ctx0: rnn_test_f1(&splits, Variant::HierarchicalStaticAttn, 0, seed),
                }
            })
            .collect();
        Ladder { runs, elapsed: start.elapsed() }
    })
}

#[test]
fn architectures_separate_on_a_context_marked_corpus() {
    let ladder = ladder();
    let static_attn = ladder.mean(|r| r.static_attn);
    let hierarchical = ladder.mean(|r| r.hierarchical);
    let non_hierarchical = ladder.mean(|r| r.non_hierarchical);
    let no_context = ladder.mean(|r| r.no_context);
    let ordered = static_attn >= hierarchical
        && hierarchical >= non_hierarchical
        && non_hierarchical >= no_context;
    let detail = format!(
        "mean test F1 over {} seeds: static_attn {static_attn:.4} >= hierarchical \
         {hierarchical:.4} >= non_hierarchical {non_hierarchical:.4} >= no_context \
         {no_context:.4}; floor 0.85, margin over no_context {:.4}; {:.1}s",
        LADDER_SEEDS.len(),
        static_attn - no_context,
        ladder.elapsed.as_secs_f64(),
    );
    check(
        "architecture ladder",
        ordered
            && static_attn >= 0.85
            && static_attn - no_context >= 0.05
            && ladder.elapsed < Duration::from_secs(15 * 60),
        &detail,
    );
}

#[test]
fn context_width_lifts_f1_on_a_context_marked_corpus() {
    let ladder = ladder();
    let wide = ladder.mean(|r| r.static_attn);
    let narrow = ladder.mean(|r| r.static_attn_ctx0);
    let detail =
        format!("mean test F1: context 2 {wide:.4} vs context 0 {narrow:.4}, lift {:.4}", wide - narrow);
    check("context width", wide - narrow >= 0.03, &detail);
}

// ---------------------------------------------------------------------------
// Signal-free corpus: identical personas and no marker carry no information
// about the speakers, so no trained model should beat random guessing.

#[test]
fn no_model_beats_chance_on_a_signal_free_corpus() {
    const FAMILIES: [&str; 7] = [
        "hierarchical_static_attn",
        "hierarchical",
        "non_hierarchical",
        "no_context",
        "logreg",
        "dnn",
        "cnn",
    ];
    let mut totals = [0.0f64; FAMILIES.len()];
    let mut chance_total = 0.0f64;
    for &seed in &LADDER_SEEDS {
        let splits = prepare(&experiment_spec(seed, 1.0, false), seed);
        let train_cfg = experiment_train_config(seed);

        let rate = corpus::corpus_stats(&splits.train).change_rate;
        let test_w1 = examples(&splits.test, 1);
        let probs = baselines::random_guess_probs(
            rate,
            test_w1.len(),
            &mut rngs::stream_rng(seed, rngs::GUESS),
        )
        .unwrap();
        let preds: Vec<Prediction> = probs
            .into_iter()
            .zip(&test_w1)
            .map(|(p_change, ex)| Prediction { p_change, gold: ex.label })
            .collect();
        chance_total += metrics::evaluate(&preds).unwrap().f1;

        for (i, variant) in [
            Variant::HierarchicalStaticAttn,
            Variant::Hierarchical,
            Variant::NonHierarchical,
            Variant::NoContext,
        ]
        .into_iter()
        .enumerate()
        {
            totals[i] += rnn_test_f1(&splits, variant, 2, seed);
        }

        let train_w1 = examples(&splits.train, 1);
        let val_w1 = examples(&splits.val, 1);
        let space = NgramSpace::build(&train_w1, DEFAULT_NGRAM_CAP).unwrap();
        {
            let mut model = LogRegModel::<f32>::init(space.clone()).unwrap();
            training::train(&mut model, &train_w1, &val_w1, &train_cfg).unwrap();
            totals[4] += training::evaluate_model(&model, &test_w1).unwrap().f1;
        }
        {
            let mut rng = rngs::stream_rng(seed, rngs::INIT);
            let mut model = DnnModel::<f32>::init(space, 32, 0.1, &mut rng).unwrap();
            training::train(&mut model, &train_w1, &val_w1, &train_cfg).unwrap();
            totals[5] += training::evaluate_model(&model, &test_w1).unwrap().f1;
        }
        {
            let mut rng = rngs::stream_rng(seed, rngs::INIT);
            let mut model = CnnModel::<f32>::init(splits.vocab.len(), 32, 0.1, &mut rng).unwrap();
            training::train(&mut model, &train_w1, &val_w1, &train_cfg).unwrap();
            totals[6] += training::evaluate_model(&model, &test_w1).unwrap().f1;
        }
    }
    let n = LADDER_SEEDS.len() as f64;
    let chance = chance_total / n;
    let means: Vec<f64> = totals.iter().map(|t| t / n).collect();

    // A model trained on noise calibrates to the base rate and stops
    // predicting changes, so its F1 legitimately falls to zero while the
    // guesser keeps a positive one. The hallucination bound is one-sided:
    // nothing may sit meaningfully above chance.
    let (worst_ix, worst) = means
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let listing: Vec<String> = FAMILIES
        .iter()
        .zip(&means)
        .map(|(name, f1)| format!("{name} {f1:.4}"))
        .collect();
    let detail = format!(
        "mean over {} seeds: random guess F1 {chance:.4}; trained: {}; highest {} at {worst:.4}",
        LADDER_SEEDS.len(),
        listing.join(", "),
        FAMILIES[worst_ix],
    );
    check(
        "signal-free corpus",
        means.iter().all(|f1| *f1 <= chance + 0.05),
        &detail,
    );
}

// ---------------------------------------------------------------------------
// Exact numeric oracles.

#[test]
fn gradients_match_finite_differences_on_the_attention_model() {
    let config = ModelConfig {
        variant: Variant::HierarchicalStaticAttn,
        dim: 8,
        attn_dim: 8,
        context_size: 1,
        vocab_size: 20,
        dropout: 0.0,
    };
    let examples = gradcheck::sample_examples(&config, 4, 13);
    let start = Instant::now();
    let report = gradcheck::grad_check_model(&config, &examples, 1e-5, 0, 13).unwrap();
    let elapsed = start.elapsed();
    let detail = format!(
        "max relative error {:.3e} at {}[{}] over {} entries in {:.1}s",
        report.worst_rel,
        report.worst_param,
        report.worst_index,
        report.entries_checked,
        elapsed.as_secs_f64()
    );
    check(
        "gradient check",
        report.worst_rel < 1e-3 && elapsed < Duration::from_secs(30),
        &detail,
    );
}

/// Independent scalar-loop recomputation of one LSTM step: three stacked
/// sigmoid gates, a tanh candidate, elementwise cell update.
fn scalar_lstm_oracle(
    set: &ParamSet<f64>,
    slots: &LstmCellSlots,
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d = h.len();
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let row = |m: &[f64], r: usize, v: &[f64]| -> f64 {
        v.iter().enumerate().map(|(k, vk)| m[r * v.len() + k] * vk).sum()
    };
    let (w, u, b) = (set.value(slots.w).data(), set.value(slots.u).data(), set.value(slots.b).data());
    let (wg, ug, bg) =
        (set.value(slots.w_g).data(), set.value(slots.u_g).data(), set.value(slots.b_g).data());
    let mut h_new = vec![0.0; d];
    let mut c_new = vec![0.0; d];
    for j in 0..d {
        let i_gate = sig(row(w, j, x) + row(u, j, h) + b[j]);
        let f_gate = sig(row(w, d + j, x) + row(u, d + j, h) + b[d + j]);
        let o_gate = sig(row(w, 2 * d + j, x) + row(u, 2 * d + j, h) + b[2 * d + j]);
        let g = (row(wg, j, x) + row(ug, j, h) + bg[j]).tanh();
        c_new[j] = i_gate * g + f_gate * c[j];
        h_new[j] = o_gate * c_new[j].tanh();
    }
    (h_new, c_new)
}

fn random_cell(d: usize, rng: &mut ChaCha8Rng) -> (ParamSet<f64>, LstmCellSlots) {
    let mut set = ParamSet::new();
    let slots = LstmCellSlots {
        w: set.add("w", Tensor::uniform(vec![3 * d, d], -0.8, 0.8, rng)).unwrap(),
        u: set.add("u", Tensor::uniform(vec![3 * d, d], -0.8, 0.8, rng)).unwrap(),
        b: set.add("b", Tensor::uniform(vec![3 * d], -0.5, 0.5, rng)).unwrap(),
        w_g: set.add("w_g", Tensor::uniform(vec![d, d], -0.8, 0.8, rng)).unwrap(),
        u_g: set.add("u_g", Tensor::uniform(vec![d, d], -0.8, 0.8, rng)).unwrap(),
        b_g: set.add("b_g", Tensor::uniform(vec![d], -0.5, 0.5, rng)).unwrap(),
    };
    (set, slots)
}

#[test]
fn lstm_step_matches_an_independent_scalar_loop() {
    let mut rng = rngs::stream_rng(2024, rngs::CHECK);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for case in 0..100 {
        let d = [2, 3, 5, 8][case % 4];
        let (set, slots) = random_cell(d, &mut rng);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let h: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let c: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let mut tape = Tape::new();
        let cell = BoundCell {
            w: tape.param(&set, slots.w),
            u: tape.param(&set, slots.u),
            b: tape.param(&set, slots.b),
            w_g: tape.param(&set, slots.w_g),
            u_g: tape.param(&set, slots.u_g),
            b_g: tape.param(&set, slots.b_g),
        };
        let state = LstmStateVars {
            h: tape.constant(Tensor::vector(h.clone())),
            c: tape.constant(Tensor::vector(c.clone())),
        };
        let xv = tape.constant(Tensor::vector(x.clone()));
        let next = lstm_step(&mut tape, &cell, xv, &state).unwrap();
        let (h_ref, c_ref) = scalar_lstm_oracle(&set, &slots, &x, &h, &c);
        for j in 0..d {
            worst = worst
                .max((tape.value(next.h).data()[j] - h_ref[j]).abs())
                .max((tape.value(next.c).data()[j] - c_ref[j]).abs());
        }
    }
    let elapsed = start.elapsed();
    let detail =
        format!("worst deviation {worst:.3e} over 100 cases in {:.2}s", elapsed.as_secs_f64());
    check("lstm exactness", worst < 1e-6 && elapsed < Duration::from_secs(5), &detail);
}

#[test]
fn attention_weights_are_a_shift_invariant_distribution() {
    let mut rng = rngs::stream_rng(2025, rngs::CHECK);
    let mut worst_sum = 0.0f64;
    for case in 0..1000 {
        let d = [2, 3, 4, 6][case % 4];
        let mut set = ParamSet::<f64>::new();
        let w_a = set
            .add("w_a", Tensor::uniform(vec![d, 2 * d], -0.8, 0.8, &mut rng))
            .unwrap();
        let u_a = set.add("u_a", Tensor::uniform(vec![d], -0.8, 0.8, &mut rng)).unwrap();
        let mut tape = Tape::new();
        let attn = BoundAttention {
            w_a: tape.param(&set, w_a),
            u_a: tape.param(&set, u_a),
        };
        let vector = |tape: &mut Tape<f64>, rng: &mut ChaCha8Rng| {
            let t = Tensor::uniform(vec![d], -3.0, 3.0, rng);
            tape.constant(t)
        };
        let q = vector(&mut tape, &mut rng);
        let n_keys = rng.gen_range(1..=6);
        let keys: Vec<_> = (0..n_keys).map(|_| vector(&mut tape, &mut rng)).collect();
        let (m, alphas) = static_attention(&mut tape, &attn, q, &keys).unwrap();
        let a = tape.value(alphas).data();
        worst_sum = worst_sum.max((a.iter().sum::<f64>() - 1.0).abs());
        if n_keys == 1 {
            // A single key takes all the weight and the summary is the key.
            assert_eq!(a, &[1.0]);
            assert_eq!(tape.value(m).data(), tape.value(keys[0]).data());
        }
    }

    // Softmax itself must ignore a constant offset of the scores.
    let mut worst_shift = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=8);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let offset = rng.gen_range(-5.0..5.0);
        let mut tape = Tape::<f64>::new();
        let base = tape.constant(Tensor::vector(scores.clone()));
        let shifted =
            tape.constant(Tensor::vector(scores.iter().map(|s| s + offset).collect()));
        let a = tape.softmax_vec(base).unwrap();
        let b = tape.softmax_vec(shifted).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            worst_shift = worst_shift.max((x - y).abs());
        }
    }
    let detail = format!(
        "worst |sum(alpha) - 1| {worst_sum:.3e} over 1000 inputs; worst shift drift {worst_shift:.3e}"
    );
    check("attention properties", worst_sum < 1e-6 && worst_shift < 1e-6, &detail);
}

#[test]
fn evaluation_matches_a_naive_recount_and_the_f1_identity() {
    let mut rng = rngs::stream_rng(2026, rngs::CHECK);
    let mut sets = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=200);
        let preds: Vec<Prediction> = (0..n)
            .map(|_| Prediction { p_change: rng.gen_range(0.0..=1.0), gold: rng.gen_bool(0.35) })
            .collect();
        let report = metrics::evaluate(&preds).unwrap();
        let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for p in &preds {
            match (p.p_change >= DECISION_THRESHOLD, p.gold) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        assert_eq!((report.tp, report.fp, report.tn, report.fn_), (tp, fp, tn, fn_));
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        assert_eq!(report.accuracy, (tp + tn) as f64 / n as f64);
        assert_eq!(report.precision, precision);
        assert_eq!(report.recall, recall);
        assert_eq!(report.f1, f1);
        sets += 1;
    }

    // Counts chosen so precision and recall come out exactly 0.815 and 0.756.
    let mut preds = Vec::new();
    let push = |preds: &mut Vec<Prediction>, n: usize, p_change: f64, gold: bool| {
        preds.extend(std::iter::repeat_with(|| Prediction { p_change, gold }).take(n));
    };
    push(&mut preds, 30_807, 1.0, true);
    push(&mut preds, 6_993, 1.0, false);
    push(&mut preds, 9_943, 0.0, true);
    push(&mut preds, 100, 0.0, false);
    let report = metrics::evaluate(&preds).unwrap();
    let identity = (report.precision - 0.815).abs() < 1e-12
        && (report.recall - 0.756).abs() < 1e-12
        && (report.f1 - 0.784).abs() <= 0.0005;
    let detail = format!(
        "{sets} recounts exact; F1(P=0.815, R=0.756) = {:.5} within 0.784 +/- 0.0005",
        report.f1
    );
    check("metric oracle", sets == 1000 && identity, &detail);
}

#[test]
fn random_guessing_matches_its_expected_accuracy() {
    let n = 100_000;
    let q = 0.25;
    let mut label_rng = rngs::stream_rng(2027, rngs::CHECK);
    let labels: Vec<bool> = (0..n).map(|_| label_rng.gen::<f64>() < q).collect();
    let probs =
        baselines::random_guess_probs(q, n, &mut rngs::stream_rng(2027, rngs::GUESS)).unwrap();
    let hits = probs
        .iter()
        .zip(&labels)
        .filter(|(p, &gold)| (**p >= DECISION_THRESHOLD) == gold)
        .count();
    let accuracy = hits as f64 / n as f64;
    // Matching guess and base rates: agreement with probability q^2 + (1-q)^2.
    let expected = q * q + (1.0 - q) * (1.0 - q);
    let detail = format!("accuracy {accuracy:.4} vs expected {expected:.4} over {n} draws");
    check(
        "random guess expectation",
        (accuracy - expected).abs() <= 0.01 * expected,
        &detail,
    );
}

// ---------------------------------------------------------------------------
// Capacity: a handful of examples must be memorized almost immediately.

#[test]
fn a_tiny_training_set_is_memorized_quickly() {
    let spec = SynthSpec { n_episodes: 6, ..experiment_spec(7, 0.3, true) };
    let mut episodes = synthgen::generate(&spec).unwrap();
    let vocab = Vocabulary::build(&episodes, DEFAULT_VOCAB_CAP).unwrap();
    corpus::numericalize(&mut episodes, &vocab);
    let batch: Vec<DecisionExample> = examples(&episodes, 2).into_iter().take(32).collect();
    assert_eq!(batch.len(), 32);
    assert!(batch.iter().any(|e| e.label) && batch.iter().any(|e| !e.label));

    let config = ModelConfig {
        variant: Variant::HierarchicalStaticAttn,
        dim: 32,
        attn_dim: 32,
        context_size: 1,
        vocab_size: vocab.len(),
        dropout: 0.0,
    };
    let mut model =
        ModelParams::<f32>::init(config, &mut rngs::stream_rng(7, rngs::INIT)).unwrap();
    let train_cfg = TrainConfig { lr: 3e-3, ..TrainConfig::default() };
    let mut adam = AdamState::new(model.params());
    let start = Instant::now();
    let mut reached = None;
    for epoch in 1..=500 {
        model.loss_step(&batch, None).unwrap();
        adam.step(model.params_mut(), &train_cfg);
        let probs = model.predict_probs(&batch).unwrap();
        let hits = probs
            .iter()
            .zip(&batch)
            .filter(|(p, ex)| (**p >= DECISION_THRESHOLD) == ex.label)
            .count();
        if hits as f64 / batch.len() as f64 >= 0.99 {
            reached = Some(epoch);
            break;
        }
    }
    let elapsed = start.elapsed();
    let detail = match reached {
        Some(epoch) => format!(
            "99% train accuracy after {epoch} epochs in {:.1}s",
            elapsed.as_secs_f64()
        ),
        None => "never reached 99% train accuracy within 500 epochs".into(),
    };
    check(
        "overfit capacity",
        reached.is_some() && elapsed < Duration::from_secs(120),
        &detail,
    );
}

// ---------------------------------------------------------------------------
// Determinism and persistence.

#[test]
fn training_checkpoints_and_predictions_are_deterministic() {
    let spec = SynthSpec { n_episodes: 20, ..experiment_spec(5, 0.3, true) };
    let splits = prepare(&spec, 5);
    let train_ex = examples(&splits.train, 2);
    let val_ex = examples(&splits.val, 2);
    let test_ex = examples(&splits.test, 2);
    let config = ModelConfig {
        variant: Variant::HierarchicalStaticAttn,
        dim: 8,
        attn_dim: 8,
        context_size: 1,
        vocab_size: splits.vocab.len(),
        dropout: 0.1,
    };
    let train_cfg = TrainConfig {
        batch_size: 32,
        lr: 3e-3,
        max_epochs: 3,
        patience: 3,
        seed: 5,
        ..TrainConfig::default()
    };

    let mut first =
        ModelParams::<f32>::init(config.clone(), &mut rngs::stream_rng(5, rngs::INIT)).unwrap();
    let outcome_a = training::train(&mut first, &train_ex, &val_ex, &train_cfg).unwrap();
    let mut second =
        ModelParams::<f32>::init(config, &mut rngs::stream_rng(5, rngs::INIT)).unwrap();
    let outcome_b = training::train(&mut second, &train_ex, &val_ex, &train_cfg).unwrap();
    let replay = outcome_a == outcome_b;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let saved = AnyModel::Rnn(first.clone());
    checkpoint::save(&path, &saved, &splits.vocab).unwrap();
    let (loaded, vocab_back) = checkpoint::load(&path).unwrap();
    let weights_back = match &loaded {
        AnyModel::Rnn(m) => (0..first.set.len()).all(|slot| {
            let a = first.set.value(slot).data();
            let b = m.set.value(slot).data();
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }),
        _ => false,
    };
    let round_trip = weights_back && vocab_back.tokens() == splits.vocab.tokens();
    let probs_before = first.predict_probs(&test_ex).unwrap();
    let probs_after = loaded.predict_probs(&test_ex).unwrap();
    let probs_back = probs_before
        .iter()
        .zip(&probs_after)
        .all(|(a, b)| a.to_bits() == b.to_bits());

    // Speaker ids decide the labels during training, never the predictions:
    // the same transcript with the ids stripped must score identically.
    let mut buf = Vec::new();
    for e in &splits.test {
        let mut value = serde_json::to_value(e).unwrap();
        for u in value["utterances"].as_array_mut().unwrap() {
            u.as_object_mut().unwrap().remove("speaker");
        }
        serde_json::to_writer(&mut buf, &value).unwrap();
        buf.push(b'\n');
    }
    let mut anonymous = corpus::from_jsonl(&buf[..]).unwrap();
    corpus::numericalize(&mut anonymous, &splits.vocab);
    let anon_ex = examples(&anonymous, 2);
    let probs_anon = first.predict_probs(&anon_ex).unwrap();
    let speaker_blind = probs_before
        .iter()
        .zip(&probs_anon)
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let detail = format!(
        "loss histories identical: {replay}; checkpoint round trip bit-exact: {}; \
         predictions unchanged without speaker ids: {speaker_blind}",
        round_trip && probs_back
    );
    check(
        "determinism and persistence",
        replay && round_trip && probs_back && speaker_blind,
        &detail,
    );
}
