//! Evaluation with `change` as the positive class.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Episode;

/// Probabilities at or above this predict `change`.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no predictions to evaluate")]
    Empty,
    #[error("{utterances} utterances need {} boundary predictions, got {predictions}", utterances - 1)]
    LengthMismatch { utterances: usize, predictions: usize },
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub p_change: f64,
    pub gold: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Counts at the fixed threshold. Precision and recall are defined as 0 when
/// their denominators are empty (e.g. a model that never predicts `change`).
pub fn evaluate(predictions: &[Prediction]) -> Result<MetricsReport, MetricsError> {
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for p in predictions {
        if !(0.0..=1.0).contains(&p.p_change) {
            return Err(MetricsError::BadProbability(p.p_change));
        }
        let predicted = p.p_change >= DECISION_THRESHOLD;
        match (predicted, p.gold) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let total = (tp + fp + tn + fn_) as f64;
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    Ok(MetricsReport {
        accuracy: (tp + tn) as f64 / total,
        precision,
        recall,
        f1: f1_score(precision, recall),
        tp,
        fp,
        tn,
        fn_,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Small aligned table for terminal output.
    pub fn table(&self) -> String {
        format!(
            "accuracy   {:.4}\nprecision  {:.4}\nrecall     {:.4}\nf1         {:.4}\ncounts     tp={} fp={} tn={} fn={}\n",
            self.accuracy, self.precision, self.recall, self.f1, self.tp, self.fp, self.tn, self.fn_
        )
    }
}

/// Renders an episode with gold and predicted change columns, one row per
/// utterance. `predicted[i]` refers to the boundary before utterance `i+1`.
/// Rows where the prediction misses are marked with `*`.
pub fn render_case_study(episode: &Episode, predicted: &[bool]) -> Result<String, MetricsError> {
    let n = episode.utterances.len();
    if n == 0 || predicted.len() != n - 1 {
        return Err(MetricsError::LengthMismatch {
            utterances: n,
            predictions: predicted.len(),
        });
    }
    let speaker_width = episode
        .utterances
        .iter()
        .map(|u| u.speaker_id.chars().count())
        .max()
        .unwrap_or(0)
        .max("speaker".len());
    let mut out = String::new();
    out.push_str(&format!(
        "{:<w$}  {:<9}  {:<9}  text\n",
        "speaker",
        "gold",
        "predicted",
        w = speaker_width
    ));
    for (i, utt) in episode.utterances.iter().enumerate() {
        let (gold, pred, mark) = if i == 0 {
            ("-".to_string(), "-".to_string(), ' ')
        } else {
            let gold = utt.speaker_id != episode.utterances[i - 1].speaker_id;
            let pred = predicted[i - 1];
            (
                yes_no(gold).to_string(),
                yes_no(pred).to_string(),
                if gold != pred { '*' } else { ' ' },
            )
        };
        out.push_str(&format!(
            "{:<w$}  {:<9}  {:<9}  {}{}\n",
            utt.speaker_id,
            gold,
            pred,
            utt.text,
            if mark == '*' { "  *" } else { "" },
            w = speaker_width
        ));
    }
    Ok(out)
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "change"
    } else {
        "same"
    }
}
