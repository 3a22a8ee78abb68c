//! End-to-end gradient verification of whole models.
//!
//! Runs the training loss in f64, then compares every accumulated parameter
//! gradient against a central finite difference of the same loss. This is
//! the deepest correctness check in the crate: one pass exercises the
//! embeddings, both LSTMs, attention, the fold, the classifier, and the
//! loss together.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::DecisionExample;
use crate::model::{batch_logits, batch_loss, ModelConfig, ModelError, ModelParams};
use crate::numcore::{Tape, Tensor};
use crate::rngs;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub worst_rel: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
    /// Worst relative error per parameter, in slot order.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.worst_rel < tolerance
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        for (name, rel) in &self.per_param {
            out.push_str(&format!("{name:<16} {rel:.3e}\n"));
        }
        out.push_str(&format!(
            "worst: {:.3e} at {}[{}] over {} entries\n",
            self.worst_rel, self.worst_param, self.worst_index, self.entries_checked
        ));
        out
    }
}

fn loss_only(params: &ModelParams<f64>, examples: &[DecisionExample]) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let logits = batch_logits(&mut tape, &bound, &params.config, examples, None)?;
    let targets: Vec<usize> = examples.iter().map(|e| e.label as usize).collect();
    let loss = tape.cross_entropy(logits, targets)?;
    Ok(tape.value(loss).item()?)
}

/// Random examples sized to `config`, for exercising a model end to end.
pub fn sample_examples(config: &ModelConfig, n: usize, seed: u64) -> Vec<DecisionExample> {
    let mut rng = rngs::stream_rng(seed, rngs::CHECK);
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
                episode_id: format!("check-{i}"),
                position: i,
                prev_sentences: (0..w).map(|_| sent(&mut rng)).collect(),
                next_sentences: (0..w).map(|_| sent(&mut rng)).collect(),
                label: i % 2 == 0,
            }
        })
        .collect()
}

/// Checks analytic gradients of the batch loss against central differences.
///
/// `entries_per_param` limits how many entries of each tensor are probed
/// (0 checks all of them); probes are spread evenly through the tensor.
/// The classifier initializes to zero, which would block gradient flow into
/// everything upstream, so it is nudged to random values first.
pub fn grad_check_model(
    config: &ModelConfig,
    examples: &[DecisionExample],
    step: f64,
    entries_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let mut rng = rngs::stream_rng(seed, rngs::INIT);
    let mut params = ModelParams::<f64>::init(config.clone(), &mut rng)?;
    let k = config.classifier_input_dim();
    params.set.set_value(
        params.classifier_w,
        Tensor::uniform(vec![2, k], -0.08, 0.08, &mut rng),
    )?;
    params.set.set_value(
        params.classifier_b,
        Tensor::uniform(vec![2], -0.08, 0.08, &mut rng),
    )?;

    params.set.zero_grads();
    batch_loss(&mut params, examples, None)?;

    let mut report = GradCheckReport {
        worst_rel: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
        per_param: Vec::new(),
    };
    for slot in 0..params.set.len() {
        let name = params.set.get(slot).name().to_string();
        let numel = params.set.value(slot).numel();
        let indices: Vec<usize> = if entries_per_param == 0 || entries_per_param >= numel {
            (0..numel).collect()
        } else {
            (0..entries_per_param)
                .map(|i| i * numel / entries_per_param)
                .collect()
        };
        let mut param_worst = 0.0f64;
        for &i in &indices {
            let orig = params.set.value(slot).data()[i];
            params.set.value_mut(slot).data_mut()[i] = orig + step;
            let up = loss_only(&params, examples)?;
            params.set.value_mut(slot).data_mut()[i] = orig - step;
            let down = loss_only(&params, examples)?;
            params.set.value_mut(slot).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * step);
            let analytic = params.set.get(slot).grad().data()[i];
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-4);
            report.entries_checked += 1;
            param_worst = param_worst.max(rel);
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
        report.per_param.push((name, param_worst));
    }
    Ok(report)
}
