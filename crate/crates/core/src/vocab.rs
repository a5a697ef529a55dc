//! Token/id vocabulary with reserved special ids and a stopword id set.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::is_punctuation;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SN: usize = 3;
pub const SEG: usize = 4;
pub const SEP: usize = 5;
pub const MASK: usize = 6;
pub const UNK: usize = 7;
pub const NUM_SPECIALS: usize = 8;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = [
    "<pad>", "<bos>", "<eos>", "<sn>", "<seg>", "<sep>", "<mask>", "<unk>",
];

/// Built-in English stopword list shipped with the crate.
pub fn builtin_stopwords() -> Vec<String> {
    include_str!("../data/stopwords.txt")
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, usize>,
    stopword_ids: Vec<usize>,
    #[serde(skip)]
    stopword_set: HashSet<usize>,
}

impl Vocabulary {
    /// Build from token counts. Tokens below `min_freq` fall back to UNK.
    /// Ordering is (count desc, token asc) after the reserved specials, so a
    /// given corpus always yields the same id assignment.
    pub fn build(
        counts: &HashMap<String, u64>,
        min_freq: u64,
        stopwords: &[String],
    ) -> Vocabulary {
        let mut items: Vec<(&String, u64)> = counts
            .iter()
            .filter(|(_, &c)| c >= min_freq)
            .map(|(t, &c)| (t, c))
            .collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(items.into_iter().map(|(t, _)| t.clone()));
        Self::from_tokens(tokens, stopwords)
    }

    fn from_tokens(tokens: Vec<String>, stopwords: &[String]) -> Vocabulary {
        let ids: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let stop: HashSet<&str> = stopwords.iter().map(|s| s.as_str()).collect();
        let mut stopword_ids: Vec<usize> = tokens
            .iter()
            .enumerate()
            .skip(NUM_SPECIALS)
            .filter(|(_, t)| stop.contains(t.as_str()))
            .map(|(i, _)| i)
            .collect();
        stopword_ids.sort_unstable();
        let stopword_set = stopword_ids.iter().copied().collect();
        Vocabulary {
            tokens,
            ids,
            stopword_ids,
            stopword_set,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id for a token; unknown tokens map to UNK.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    /// Id only if the token is actually in the vocabulary.
    pub fn id_exact(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < NUM_SPECIALS
    }

    pub fn is_stopword_id(&self, id: usize) -> bool {
        self.stopword_set.contains(&id)
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        self.id_exact(token)
            .map_or(false, |id| self.stopword_set.contains(&id))
    }

    /// Content word: in-vocabulary, not special, not a stopword, not punctuation.
    pub fn is_content_id(&self, id: usize) -> bool {
        id >= NUM_SPECIALS && !self.stopword_set.contains(&id) && !is_punctuation(&self.tokens[id])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let r = BufReader::new(File::open(path)?);
        let raw: Vocabulary = serde_json::from_reader(r)?;
        if raw.tokens.len() < NUM_SPECIALS {
            return Err(Error::Data("vocabulary missing reserved specials".into()));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if raw.tokens[i] != *s {
                return Err(Error::Data(format!(
                    "vocabulary slot {} is `{}`, expected `{}`",
                    i, raw.tokens[i], s
                )));
            }
        }
        // rebuild the skipped lookup structures
        let ids = raw
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let stopword_set = raw.stopword_ids.iter().copied().collect();
        Ok(Vocabulary {
            tokens: raw.tokens,
            ids,
            stopword_ids: raw.stopword_ids,
            stopword_set,
        })
    }
}
