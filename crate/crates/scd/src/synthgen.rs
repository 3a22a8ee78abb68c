//! Synthetic transcript generator.
//!
//! Produces dialogs whose speaker-change structure is recoverable from the
//! text alone: each speaker persona draws words from its own vocabulary
//! slice, with a configurable lexical overlap between personas. An optional
//! discourse marker planted a fixed distance before each change gives
//! context-aware models an edge that context-free models cannot copy.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Episode, Utterance};
use crate::rngs;

/// Marker token planted when `context_signal` is on. Distinct from persona
/// vocabularies by construction.
pub const MARKER_TOKEN: &str = "anyway";
/// The marker lands this many utterances before the post-change utterance,
/// so it is invisible unless the window carries at least MARKER_DISTANCE - 1
/// sentences of context, and it sits at the far edge of such a window.
pub const MARKER_DISTANCE: usize = 3;

const SENTENCE_LEN_MIN: usize = 2;
const SENTENCE_LEN_MAX: usize = 5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Invalid(String),
}

/// Personas are global: speaker `k` draws from the same vocabulary slice in
/// every episode, so train and test splits share the lexicon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_episodes: usize,
    pub utterances_min: usize,
    pub utterances_max: usize,
    /// Speakers per episode; also the number of personas.
    pub n_speakers: usize,
    /// Tokens per persona vocabulary.
    pub persona_vocab: usize,
    /// Fraction of each persona vocabulary shared across all personas.
    /// 0 gives disjoint vocabularies, 1 identical ones.
    pub overlap: f64,
    /// Plant [`MARKER_TOKEN`] at distance [`MARKER_DISTANCE`] before changes.
    pub context_signal: bool,
    /// Probability that the speaker switches at each step.
    pub change_prob: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_episodes: 200,
            utterances_min: 8,
            utterances_max: 16,
            n_speakers: 4,
            persona_vocab: 40,
            overlap: 0.3,
            context_signal: false,
            change_prob: 0.25,
            seed: 13,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |msg: String| Err(SynthError::Invalid(msg));
        if self.n_episodes == 0 {
            return fail("n_episodes must be positive".into());
        }
        if self.utterances_min < 2 || self.utterances_min > self.utterances_max {
            return fail(format!(
                "utterance range {}..={} must start at 2 or more",
                self.utterances_min, self.utterances_max
            ));
        }
        if self.n_speakers < 2 {
            return fail("need at least 2 speakers for changes to exist".into());
        }
        if self.persona_vocab == 0 {
            return fail("persona_vocab must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return fail(format!("overlap {} outside [0, 1]", self.overlap));
        }
        if !(self.change_prob > 0.0 && self.change_prob < 1.0) {
            return fail(format!("change_prob {} outside (0, 1)", self.change_prob));
        }
        Ok(())
    }
}

/// Generates the corpus. Each episode consumes its own RNG stream derived
/// from the spec seed, so output is byte-stable and order-independent.
pub fn generate(spec: &SynthSpec) -> Result<Vec<Episode>, SynthError> {
    spec.validate()?;
    let shared = (spec.overlap * spec.persona_vocab as f64).round() as usize;
    let shared = shared.min(spec.persona_vocab);

    let mut episodes = Vec::with_capacity(spec.n_episodes);
    for ep in 0..spec.n_episodes {
        let mut rng = rngs::stream_rng(spec.seed, rngs::SYNTH_BASE + ep as u64);
        let n_utts = rng.gen_range(spec.utterances_min..=spec.utterances_max);

        let mut speakers = Vec::with_capacity(n_utts);
        let mut current = rng.gen_range(0..spec.n_speakers);
        speakers.push(current);
        for _ in 1..n_utts {
            if rng.gen_bool(spec.change_prob) {
                // Uniform over the other speakers.
                let mut next = rng.gen_range(0..spec.n_speakers - 1);
                if next >= current {
                    next += 1;
                }
                current = next;
            }
            speakers.push(current);
        }

        let mut sentences: Vec<Vec<String>> = speakers
            .iter()
            .map(|&p| {
                let len = rng.gen_range(SENTENCE_LEN_MIN..=SENTENCE_LEN_MAX);
                (0..len)
                    .map(|_| {
                        let roll = rng.gen_range(0..spec.persona_vocab);
                        if roll < shared {
                            format!("c{roll}")
                        } else {
                            format!("s{p}w{}", roll - shared)
                        }
                    })
                    .collect()
            })
            .collect();

        if spec.context_signal {
            // A change at boundary b (utterance b vs b+1) plants the marker
            // at the end of utterance b+1-MARKER_DISTANCE. The earliest
            // boundaries have no room for it.
            for b in MARKER_DISTANCE - 1..n_utts - 1 {
                if speakers[b + 1] != speakers[b] {
                    sentences[b + 1 - MARKER_DISTANCE].push(MARKER_TOKEN.to_string());
                }
            }
        }

        episodes.push(Episode {
            episode_id: format!("synth-{ep:05}"),
            utterances: speakers
                .iter()
                .zip(&sentences)
                .map(|(&p, words)| Utterance {
                    speaker_id: format!("spk{p}"),
                    text: words.join(" "),
                    tokens: Vec::new(),
                })
                .collect(),
        });
    }
    Ok(episodes)
}
