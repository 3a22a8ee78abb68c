//! Transcript corpus handling.
//!
//! Transcripts arrive as JSON-lines, one episode per line. Processing order:
//! parse, split by episode, build the vocabulary from the train split only,
//! numericalize, then extract one decision example per consecutive utterance
//! pair.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rngs;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Default vocabulary cap, including the two reserved entries.
pub const DEFAULT_VOCAB_CAP: usize = 50_000;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("duplicate episode id: {0}")]
    DuplicateEpisode(String),
    #[error("episode id not present in corpus: {0}")]
    UnknownEpisode(String),
    #[error("need at least 3 episodes to split, found {0}")]
    TooFewEpisodes(usize),
    #[error("context window needs at least 1 sentence per side")]
    EmptyWindow,
    #[error("vocabulary cap {0} cannot hold the reserved PAD and UNK entries")]
    VocabCapTooSmall(usize),
    #[error("vocabulary must reserve {PAD_TOKEN} at id 0 and {UNK_TOKEN} at id 1")]
    BadReservedTokens,
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    /// Verbatim speaker label. May be empty, e.g. for prediction inputs with
    /// speakers stripped; labels then degenerate to `no_change`.
    #[serde(rename = "speaker", default)]
    pub speaker_id: String,
    pub text: String,
    /// Filled by [`numericalize`]; not part of the file format.
    #[serde(skip)]
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub utterances: Vec<Utterance>,
}

/// Parses JSON-lines transcripts. Episodes with fewer than two utterances
/// hold no decision point and are dropped with a warning.
pub fn parse_transcripts(path: impl AsRef<Path>) -> Result<Vec<Episode>, CorpusError> {
    let file = File::open(path)?;
    from_jsonl(BufReader::new(file))
}

pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Vec<Episode>, CorpusError> {
    let mut episodes = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut dropped = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let episode: Episode = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if !seen.insert(episode.episode_id.clone()) {
            return Err(CorpusError::DuplicateEpisode(episode.episode_id));
        }
        if episode.utterances.len() < 2 {
            log::warn!(
                "episode {} has {} utterance(s), no decision point; dropped",
                episode.episode_id,
                episode.utterances.len()
            );
            dropped += 1;
            continue;
        }
        episodes.push(episode);
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} episode(s) without decision points");
    }
    Ok(episodes)
}

pub fn write_transcripts(path: impl AsRef<Path>, episodes: &[Episode]) -> Result<(), CorpusError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for episode in episodes {
        serde_json::to_writer(&mut w, episode)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Lowercases and splits on whitespace; `, . ? ! "` become standalone tokens.
/// An apostrophe starts a new token and stays attached to what follows, so
/// clitics survive: "it's" becomes `[it, 's]`.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, tokens: &mut Vec<String>| {
        if !current.is_empty() {
            tokens.push(std::mem::take(current));
        }
    };
    for ch in lower.chars() {
        if ch.is_whitespace() {
            flush(&mut current, &mut tokens);
        } else if matches!(ch, ',' | '.' | '?' | '!' | '"') {
            flush(&mut current, &mut tokens);
            tokens.push(ch.to_string());
        } else if ch == '\'' {
            flush(&mut current, &mut tokens);
            current.push(ch);
        } else {
            current.push(ch);
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keeps the `max_size - 2` most frequent train-split tokens; frequency
    /// ties break lexicographically. Ids 0 and 1 are PAD and UNK.
    pub fn build(episodes: &[Episode], max_size: usize) -> Result<Self, CorpusError> {
        if max_size < 2 {
            return Err(CorpusError::VocabCapTooSmall(max_size));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for episode in episodes {
            for utt in &episode.utterances {
                for token in tokenize(&utt.text) {
                    *counts.entry(token).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - 2);

        let mut id_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        id_to_token.extend(ranked.into_iter().map(|(t, _)| t));
        Self::from_tokens(id_to_token)
    }

    /// Restores a vocabulary from its id-ordered token list, e.g. out of a
    /// checkpoint. The reserved entries must be in place.
    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Self, CorpusError> {
        if id_to_token.len() < 2
            || id_to_token[0] != PAD_TOKEN
            || id_to_token[1] != UNK_TOKEN
        {
            return Err(CorpusError::BadReservedTokens);
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary { id_to_token, token_to_id })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Tokenizes and looks up ids. Empty text maps to a single UNK so every
    /// utterance has at least one token.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let ids: Vec<u32> = tokenize(text).iter().map(|t| self.id(t)).collect();
        if ids.is_empty() {
            vec![UNK_ID]
        } else {
            ids
        }
    }
}

pub fn numericalize(episodes: &mut [Episode], vocab: &Vocabulary) {
    for episode in episodes {
        for utt in &mut episode.utterances {
            utt.tokens = vocab.encode(&utt.text);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let file = File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let file = File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Shuffles episode ids under the seed and slices 8:1:1. With small corpora
/// the boundaries are clamped so every part keeps at least one episode.
pub fn split_by_episode(episodes: &[Episode], seed: u64) -> Result<SplitManifest, CorpusError> {
    let n = episodes.len();
    if n < 3 {
        return Err(CorpusError::TooFewEpisodes(n));
    }
    let mut ids: Vec<String> = episodes.iter().map(|e| e.episode_id.clone()).collect();
    let mut rng = rngs::stream_rng(seed, rngs::SPLIT);
    ids.shuffle(&mut rng);
    let train_end = (n * 8 / 10).clamp(1, n - 2);
    let val_end = (n * 9 / 10).clamp(train_end + 1, n - 1);
    Ok(SplitManifest {
        seed,
        train: ids[..train_end].to_vec(),
        val: ids[train_end..val_end].to_vec(),
        test: ids[val_end..].to_vec(),
    })
}

/// Clones the named episodes in manifest order.
pub fn select_episodes(episodes: &[Episode], ids: &[String]) -> Result<Vec<Episode>, CorpusError> {
    let by_id: HashMap<&str, &Episode> =
        episodes.iter().map(|e| (e.episode_id.as_str(), e)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|&e| e.clone())
                .ok_or_else(|| CorpusError::UnknownEpisode(id.clone()))
        })
        .collect()
}

/// One classification instance: does the speaker change between utterance
/// `position` and `position + 1`?
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionExample {
    pub episode_id: String,
    pub position: usize,
    /// `t` sentences ending at the decision point, ordered oldest first.
    pub prev_sentences: Vec<Vec<u32>>,
    /// `t` sentences after the decision point, ordered farthest-future first.
    pub next_sentences: Vec<Vec<u32>>,
    /// True iff the speaker changes at this boundary.
    pub label: bool,
}

/// Extracts the `n - 1` decision examples of an episode with `t` sentences
/// per side. Windows reaching past the episode are filled with PAD sentences
/// (a single PAD token).
pub fn extract_examples(episode: &Episode, t: usize) -> Result<Vec<DecisionExample>, CorpusError> {
    if t == 0 {
        return Err(CorpusError::EmptyWindow);
    }
    let utts = &episode.utterances;
    let n = utts.len();
    let pad = vec![PAD_ID];
    let mut out = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n.saturating_sub(1) {
        let prev_sentences = (0..t)
            .map(|j| {
                let idx = i as i64 - (t as i64 - 1) + j as i64;
                if idx < 0 {
                    pad.clone()
                } else {
                    utts[idx as usize].tokens.clone()
                }
            })
            .collect();
        let next_sentences = (0..t)
            .map(|j| {
                let idx = i + t - j;
                if idx < n {
                    utts[idx].tokens.clone()
                } else {
                    pad.clone()
                }
            })
            .collect();
        out.push(DecisionExample {
            episode_id: episode.episode_id.clone(),
            position: i,
            prev_sentences,
            next_sentences,
            label: utts[i].speaker_id != utts[i + 1].speaker_id,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct CorpusStats {
    pub episodes: usize,
    pub utterances: usize,
    pub decision_points: usize,
    pub changes: usize,
    pub change_rate: f64,
}

pub fn corpus_stats(episodes: &[Episode]) -> CorpusStats {
    let mut stats = CorpusStats { episodes: episodes.len(), ..Default::default() };
    for episode in episodes {
        let utts = &episode.utterances;
        stats.utterances += utts.len();
        for pair in utts.windows(2) {
            stats.decision_points += 1;
            if pair[0].speaker_id != pair[1].speaker_id {
                stats.changes += 1;
            }
        }
    }
    if stats.decision_points > 0 {
        stats.change_rate = stats.changes as f64 / stats.decision_points as f64;
    }
    stats
}
