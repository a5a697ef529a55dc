//! Deterministic synthetic corpus generator.
//!
//! Each topic owns pools of pseudo-word nouns, modifiers and fillers.
//! An example picks a topic, draws keyphrases as modifier+noun pairs, and
//! realizes them across sentences in a canonical per-topic order, with a
//! positional ordinal marker opening every sentence. Sentence order is
//! therefore learnable and shuffles are detectably incoherent, while filler
//! slots keep the language model from saturating in one epoch.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Example};
use crate::error::{Error, Result};
use crate::rng::SeedRng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    /// Approximate target for the number of distinct tokens in the corpus.
    pub vocab_size: usize,
    pub num_topics: usize,
    pub num_examples: usize,
    /// Inclusive range for sentences per target.
    pub sentences_range: (usize, usize),
    /// Inclusive range for keyphrases per example.
    pub keyphrases_range: (usize, usize),
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            vocab_size: 2000,
            num_topics: 20,
            num_examples: 2000,
            sentences_range: (2, 5),
            keyphrases_range: (3, 8),
        }
    }
}

const MARKERS: [&str; 8] = [
    "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "finally",
];

const CONSONANTS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

struct TopicPools {
    nouns: Vec<String>,
    mods: Vec<String>,
    fillers: Vec<String>,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let (slo, shi) = self.sentences_range;
        let (klo, khi) = self.keyphrases_range;
        if self.num_topics == 0 || self.num_examples == 0 {
            return Err(Error::Config("generator: zero topics or examples".into()));
        }
        if slo == 0 || slo > shi || shi > MARKERS.len() {
            return Err(Error::Config(format!(
                "generator: sentences_range ({}, {}) must satisfy 1 <= lo <= hi <= {}",
                slo,
                shi,
                MARKERS.len()
            )));
        }
        if klo > khi {
            return Err(Error::Config("generator: keyphrases_range inverted".into()));
        }
        if self.vocab_size < self.num_topics * 12 + 64 {
            return Err(Error::Config(format!(
                "generator: vocab_size {} too small for {} topics",
                self.vocab_size, self.num_topics
            )));
        }
        Ok(())
    }
}

/// Deterministic pseudo-word: 2-3 consonant+vowel syllables.
fn make_word(rng: &mut SeedRng) -> String {
    let syllables = 2 + rng.below(2);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(CONSONANTS[rng.below(CONSONANTS.len())]);
        w.push_str(VOWELS[rng.below(VOWELS.len())]);
    }
    w
}

fn make_unique_words(n: usize, used: &mut std::collections::HashSet<String>, rng: &mut SeedRng) -> Vec<String> {
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let w = make_word(rng);
        if used.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

fn build_topic_pools(config: &GenConfig, rng: &mut SeedRng) -> Vec<TopicPools> {
    // Budget after fixed template words; split 45/25/30 per topic.
    let reserved = 64usize;
    let per_topic = (config.vocab_size.saturating_sub(reserved)) / config.num_topics;
    let n_nouns = (per_topic * 45 / 100).max(8);
    let n_mods = (per_topic * 25 / 100).max(4);
    let n_fillers = (per_topic * 30 / 100).max(4);
    let mut used = std::collections::HashSet::new();
    for m in MARKERS {
        used.insert(m.to_string());
    }
    (0..config.num_topics)
        .map(|_| TopicPools {
            nouns: make_unique_words(n_nouns, &mut used, rng),
            mods: make_unique_words(n_mods, &mut used, rng),
            fillers: make_unique_words(n_fillers, &mut used, rng),
        })
        .collect()
}

fn s(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

fn statement_tokens(pools: &TopicPools, rng: &mut SeedRng) -> Vec<String> {
    let a = pools.nouns[rng.below(pools.nouns.len())].clone();
    let b = pools.nouns[rng.below(pools.nouns.len())].clone();
    match rng.below(3) {
        0 => {
            let mut t = s(&["people", "argue", "about", "the"]);
            t.push(a);
            t.extend(s(&["and", "the"]));
            t.push(b);
            t.push(".".into());
            t
        }
        1 => {
            let mut t = s(&["the", "debate", "over", "the"]);
            t.push(a);
            t.extend(s(&["returns", "to", "the"]));
            t.push(b);
            t.push(".".into());
            t
        }
        _ => {
            let mut t = s(&["is", "the"]);
            t.push(a);
            t.extend(s(&["worth", "the"]));
            t.push(b);
            t.push("?".into());
            t
        }
    }
}

/// One sentence realizing `phrases` (already in canonical order) at position
/// `j` of the target. Every phrase appears contiguously.
fn sentence_tokens(
    j: usize,
    phrases: &[&(String, String)],
    pools: &TopicPools,
    rng: &mut SeedRng,
) -> Vec<String> {
    let filler = |rng: &mut SeedRng| pools.fillers[rng.below(pools.fillers.len())].clone();
    let mut toks: Vec<String> = vec![MARKERS[j].to_string(), ",".to_string()];
    let push_kp = |toks: &mut Vec<String>, kp: &(String, String)| {
        toks.push(kp.0.clone());
        toks.push(kp.1.clone());
    };
    match phrases.len() {
        0 => match rng.below(2) {
            0 => {
                toks.push("the".into());
                toks.push(filler(rng));
                toks.extend(s(&["view", "holds"]));
            }
            _ => {
                toks.push("this".into());
                toks.push(filler(rng));
                toks.extend(s(&["point", "stands"]));
            }
        },
        1 => match rng.below(3) {
            0 => {
                toks.push("the".into());
                push_kp(&mut toks, phrases[0]);
                toks.extend(s(&["shapes", "the"]));
                toks.push(filler(rng));
                toks.push("debate".into());
            }
            1 => {
                toks.push("the".into());
                push_kp(&mut toks, phrases[0]);
                toks.extend(s(&["matters", "in", "the"]));
                toks.push(filler(rng));
                toks.push("case".into());
            }
            _ => {
                toks.extend(s(&["people", "weigh", "the"]));
                push_kp(&mut toks, phrases[0]);
                toks.push("against".into());
                toks.push(filler(rng));
            }
        },
        2 => match rng.below(3) {
            0 => {
                toks.push("the".into());
                push_kp(&mut toks, phrases[0]);
                toks.extend(s(&["depends", "on", "the"]));
                push_kp(&mut toks, phrases[1]);
            }
            1 => {
                toks.push("the".into());
                push_kp(&mut toks, phrases[0]);
                toks.extend(s(&["and", "the"]));
                push_kp(&mut toks, phrases[1]);
                toks.push("share".into());
                toks.push(filler(rng));
                toks.push("ground".into());
            }
            _ => {
                toks.extend(s(&["without", "the"]));
                push_kp(&mut toks, phrases[0]);
                toks.push("the".into());
                push_kp(&mut toks, phrases[1]);
                toks.push("fails".into());
            }
        },
        3 => {
            toks.push("the".into());
            push_kp(&mut toks, phrases[0]);
            toks.extend(s(&["links", "the"]));
            push_kp(&mut toks, phrases[1]);
            toks.extend(s(&["to", "the"]));
            push_kp(&mut toks, phrases[2]);
        }
        _ => {
            toks.push("the".into());
            for (i, kp) in phrases.iter().enumerate() {
                if i > 0 {
                    toks.extend(s(&["and", "the"]));
                }
                push_kp(&mut toks, kp);
            }
            toks.push("interact".into());
        }
    }
    toks.push(".".into());
    toks
}

/// Balanced partition of `k` items over `j` slots (earlier slots larger).
fn partition_sizes(k: usize, j: usize) -> Vec<usize> {
    let base = k / j;
    let rem = k % j;
    (0..j).map(|i| base + usize::from(i < rem)).collect()
}

/// Generate a corpus. Identical (config, seed) pairs produce byte-identical
/// corpora.
pub fn generate_synthetic_corpus(config: &GenConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut rng = SeedRng::new(seed).derive("synth", 0);
    let pools = build_topic_pools(config, &mut rng);
    let (slo, shi) = config.sentences_range;
    let (klo, khi) = config.keyphrases_range;

    let mut examples = Vec::with_capacity(config.num_examples);
    for _ in 0..config.num_examples {
        let topic = rng.below(config.num_topics);
        let p = &pools[topic];
        let j = slo + rng.below(shi - slo + 1);
        let k = klo + rng.below(khi - klo + 1);

        // distinct (mod, noun) pairs for this example
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(k);
        while pairs.len() < k {
            let cand = (rng.below(p.mods.len()), rng.below(p.nouns.len()));
            if !pairs.contains(&cand) {
                pairs.push(cand);
            }
        }
        // canonical realization order for the topic: by noun then modifier
        let mut canonical = pairs.clone();
        canonical.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let phrases: Vec<(String, String)> = canonical
            .iter()
            .map(|&(m, n)| (p.mods[m].clone(), p.nouns[n].clone()))
            .collect();

        let sizes = partition_sizes(k, j);
        let mut cursor = 0usize;
        let mut target_sentences = Vec::with_capacity(j);
        for (sj, &size) in sizes.iter().enumerate() {
            let group: Vec<&(String, String)> = phrases[cursor..cursor + size].iter().collect();
            cursor += size;
            target_sentences.push(sentence_tokens(sj, &group, p, &mut rng));
        }

        // input keyphrases are an unordered set: shuffle the canonical order
        let mut keyphrases: Vec<Vec<String>> = phrases
            .iter()
            .map(|(m, n)| vec![m.clone(), n.clone()])
            .collect();
        rng.shuffle(&mut keyphrases);

        examples.push(Example {
            statement: statement_tokens(p, &mut rng),
            keyphrases,
            target_sentences,
        });
    }
    Ok(Corpus { examples })
}

/// Deterministic train/val/test split by shuffled index.
pub fn split_corpus(
    corpus: &Corpus,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus)> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios ({}, {}, {}) must be nonnegative and sum to 1",
            a, b, c
        )));
    }
    let n = corpus.len();
    let mut idx: Vec<usize> = (0..n).collect();
    SeedRng::new(seed).derive("split", 0).shuffle(&mut idx);
    let n_train = ((n as f64) * a).round() as usize;
    let n_val = ((n as f64) * b).round() as usize;
    let take = |range: &[usize]| Corpus {
        examples: range.iter().map(|&i| corpus.examples[i].clone()).collect(),
    };
    let n_val_end = (n_train + n_val).min(n);
    Ok((
        take(&idx[..n_train.min(n)]),
        take(&idx[n_train.min(n)..n_val_end]),
        take(&idx[n_val_end..]),
    ))
}
