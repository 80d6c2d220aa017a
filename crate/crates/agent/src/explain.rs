//! Post-hoc skill-code explanation: counts which instruction words co-occur
//! with each voted code across a dataset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use voxbc_tensor::Tape;

use crate::data::{Dataset, Episode, DEFAULT_V_EPS};
use crate::error::{AgentError, Result};
use crate::lang::tokenize;
use crate::model::Bundle;
use crate::skill::{majority_vote, nearest_code, CODEBOOK_PARAM};

/// Function words excluded from the counts. Sorted, so membership is a binary
/// search.
pub const STOP_WORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "been", "by", "for", "from", "in", "is",
    "it", "its", "of", "on", "or", "please", "so", "that", "the", "then", "these",
    "this", "those", "to", "was", "were", "with",
];

pub fn is_stop_word(word: &str) -> bool {
    STOP_WORDS.binary_search(&word).is_ok()
}

/// Word counts keyed by skill-code index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordStats {
    pub counts: BTreeMap<usize, BTreeMap<String, u64>>,
}

#[derive(Serialize, Deserialize)]
struct CodeEntry {
    code: usize,
    words: Vec<(String, u64)>,
}

#[derive(Serialize, Deserialize)]
struct WordStatsFile {
    codes: Vec<CodeEntry>,
}

impl WordStats {
    /// Adds every non-stop token of `instruction` under `code`.
    pub fn record(&mut self, code: usize, instruction: &str) {
        let entry = self.counts.entry(code).or_default();
        for token in tokenize(instruction) {
            if !is_stop_word(&token) {
                *entry.entry(token).or_insert(0) += 1;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().flat_map(|words| words.values()).sum()
    }

    /// Words for one code, highest count first, ties alphabetical.
    pub fn ranked(&self, code: usize) -> Vec<(&str, u64)> {
        let mut words: Vec<(&str, u64)> = self
            .counts
            .get(&code)
            .map(|w| w.iter().map(|(s, &n)| (s.as_str(), n)).collect())
            .unwrap_or_default();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        words
    }

    pub fn to_json(&self) -> Result<String> {
        let file = WordStatsFile {
            codes: self
                .counts
                .keys()
                .map(|&code| CodeEntry {
                    code,
                    words: self
                        .ranked(code)
                        .into_iter()
                        .map(|(w, n)| (w.to_string(), n))
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file)
            .map_err(|e| AgentError::Format(format!("word stats encoding failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<WordStats> {
        let file: WordStatsFile = serde_json::from_str(text)
            .map_err(|e| AgentError::Format(format!("word stats decoding failed: {e}")))?;
        let mut stats = WordStats::default();
        for entry in file.codes {
            let words = stats.counts.entry(entry.code).or_default();
            for (word, n) in entry.words {
                *words.entry(word).or_insert(0) += n;
            }
        }
        Ok(stats)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| AgentError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<WordStats> {
        let text = fs::read_to_string(path).map_err(|e| AgentError::io(path, e))?;
        WordStats::from_json(&text)
    }

    pub fn text_table(&self) -> String {
        let mut out = String::new();
        for &code in self.counts.keys() {
            let _ = write!(out, "code {code}:");
            for (word, n) in self.ranked(code) {
                let _ = write!(out, " {word} {n}");
            }
            out.push('\n');
        }
        out
    }
}

/// The episode's majority-vote skill code over observations at the start and
/// every keyframe.
pub fn episode_code(bundle: &Bundle, episode: &Episode) -> Result<usize> {
    let mut timesteps = vec![0];
    timesteps.extend(episode.keyframes(DEFAULT_V_EPS)?);
    let skill = &bundle.skill;
    let store = &bundle.store;
    let mut tape: Tape<f32> = Tape::new();
    let (_pre, post) = skill.embed_language(&mut tape, store, &bundle.vocab, &episode.instruction)?;
    let pooled = skill.pooled_language(&mut tape, store, post)?;
    let mut embs = Vec::with_capacity(timesteps.len());
    for &t in &timesteps {
        embs.push(skill.encode_observation(&mut tape, store, &episode.steps[t].images)?);
    }
    let c_hat = skill.skill_forward(&mut tape, store, &embs, &timesteps, pooled)?;
    let dim = skill.cfg.code_dim;
    let codebook = store.get(CODEBOOK_PARAM)?;
    let rows = tape.data(c_hat);
    let indices: Vec<usize> = (0..timesteps.len())
        .map(|i| nearest_code(&rows[i * dim..(i + 1) * dim], codebook))
        .collect::<Result<_>>()?;
    majority_vote(&indices)
}

/// Counts instruction words under each episode's voted code.
pub fn skill_word_stats(bundle: &Bundle, ds: &Dataset) -> Result<WordStats> {
    if ds.episodes.is_empty() {
        return Err(AgentError::Data("no episodes to explain".into()));
    }
    let mut stats = WordStats::default();
    for episode in &ds.episodes {
        let code = episode_code(bundle, episode)?;
        stats.record(code, &episode.instruction);
    }
    Ok(stats)
}
