//! Source/target assembly and bag-of-words label construction.
//!
//! Source layout:  statement ++ (SEG ++ keyphrase) per keyphrase.
//! Target layout:  BOS ++ (SN ++ sentence) per sentence ++ EOS.
//! Both sides are truncated to [`MAX_SEQ`] ids, preferring keyphrase/sentence
//! boundaries; truncation is recorded, never silent.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Example};
use crate::error::{Error, Result};
use crate::tokenize::{detokenize, is_punctuation, tokenize};
use crate::vocab::{Vocabulary, BOS, EOS, SEG, SN};

/// Maximum source/target length in ids after special-token insertion.
pub const MAX_SEQ: usize = 256;

/// Model-ready view of one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedExample {
    pub source_ids: Vec<usize>,
    /// Indices of surviving SEG tokens in `source_ids`, one per keyphrase.
    pub segment_positions: Vec<usize>,
    pub target_ids: Vec<usize>,
    /// Sentence index s(t) per target position (BOS belongs to sentence 0,
    /// EOS to the last sentence).
    pub sentence_index: Vec<usize>,
    /// Per surviving sentence, the set of salient content word ids.
    pub bow_labels: Vec<BTreeSet<usize>>,
    /// Per target position, whether the token appears in any keyphrase.
    pub keyphrase_flags: Vec<bool>,
    pub truncated_source: bool,
    pub truncated_target: bool,
}

impl ProcessedExample {
    /// Number of sentences surviving in the target (= number of SN tokens).
    pub fn num_sentences(&self) -> usize {
        self.bow_labels.len()
    }

    /// Positions of SN tokens in `target_ids`.
    pub fn sn_positions(&self) -> Vec<usize> {
        self.target_ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == SN)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Assemble source ids and the SEG positions forming the keyphrase bank.
/// Keyphrases whose SEG block does not fit under [`MAX_SEQ`] are dropped
/// whole; a statement longer than the limit is cut (reported in the flag).
pub fn build_source(
    statement: &[String],
    keyphrases: &[Vec<String>],
    vocab: &Vocabulary,
) -> (Vec<usize>, Vec<usize>, bool) {
    let mut ids = vocab.encode(statement);
    let mut truncated = false;
    if ids.len() > MAX_SEQ {
        ids.truncate(MAX_SEQ);
        truncated = true;
    }
    let mut positions = Vec::new();
    for kp in keyphrases {
        let block = vocab.encode(kp);
        if ids.len() + 1 + block.len() > MAX_SEQ {
            truncated = true;
            break;
        }
        positions.push(ids.len());
        ids.push(SEG);
        ids.extend(block);
    }
    (ids, positions, truncated)
}

/// Assemble the SN-interleaved target and the sentence index map. Sentences
/// that do not fit whole are dropped; if even the first sentence overflows it
/// is cut so the target still ends in EOS. Errors on an empty sentence list.
pub fn build_target(
    sentences: &[Vec<String>],
    vocab: &Vocabulary,
) -> Result<(Vec<usize>, Vec<usize>, bool)> {
    if sentences.is_empty() {
        return Err(Error::Data("build_target: no sentences".into()));
    }
    let mut ids = vec![BOS];
    let mut sent_idx = vec![0usize];
    let mut truncated = false;
    let mut pushed = 0usize;
    for (j, sent) in sentences.iter().enumerate() {
        if sent.is_empty() {
            return Err(Error::Data(format!("build_target: sentence {} empty", j)));
        }
        let block = vocab.encode(sent);
        if ids.len() + 1 + block.len() + 1 <= MAX_SEQ {
            ids.push(SN);
            sent_idx.push(j);
            for id in block {
                ids.push(id);
                sent_idx.push(j);
            }
            pushed += 1;
        } else if j == 0 {
            // first sentence alone overflows: keep a hard-cut prefix
            let room = MAX_SEQ - ids.len() - 2; // SN and EOS
            ids.push(SN);
            sent_idx.push(0);
            for id in block.into_iter().take(room) {
                ids.push(id);
                sent_idx.push(0);
            }
            pushed = 1;
            truncated = true;
            break;
        } else {
            truncated = true;
            break;
        }
    }
    ids.push(EOS);
    sent_idx.push(pushed.saturating_sub(1));
    Ok((ids, sent_idx, truncated))
}

/// Salient content words of each sentence: non-stopword, non-punctuation
/// vocabulary ids, deduplicated. Empty sets are allowed.
pub fn build_bow_labels(sentences: &[Vec<String>], vocab: &Vocabulary) -> Vec<BTreeSet<usize>> {
    sentences
        .iter()
        .map(|sent| {
            sent.iter()
                .filter_map(|tok| vocab.id_exact(tok))
                .filter(|&id| vocab.is_content_id(id))
                .collect()
        })
        .collect()
}

/// Full processing pipeline for one example. Pure and deterministic.
pub fn process(example: &Example, vocab: &Vocabulary) -> Result<ProcessedExample> {
    example.validate()?;
    let (source_ids, segment_positions, truncated_source) =
        build_source(&example.statement, &example.keyphrases, vocab);
    let (target_ids, sentence_index, truncated_target) =
        build_target(&example.target_sentences, vocab)?;
    let surviving = target_ids.iter().filter(|&&id| id == SN).count();
    let bow_labels = build_bow_labels(&example.target_sentences[..surviving], vocab);

    let kp_tokens = example.keyphrase_token_set();
    let keyphrase_flags = target_ids
        .iter()
        .map(|&id| !vocab.is_special(id) && kp_tokens.contains(vocab.token(id)))
        .collect();

    Ok(ProcessedExample {
        source_ids,
        segment_positions,
        target_ids,
        sentence_index,
        bow_labels,
        keyphrase_flags,
        truncated_source,
        truncated_target,
    })
}

/// Example plus its processed form; the unit stored in processed-corpus files
/// (negative construction needs the raw sentences, the model the ids).
#[derive(Debug, Clone)]
pub struct ProcessedRecord {
    pub example: Example,
    pub processed: ProcessedExample,
}

#[derive(Serialize, Deserialize)]
struct RawProcessedRecord {
    statement: String,
    keyphrases: Vec<String>,
    target_sentences: Vec<String>,
    #[serde(flatten)]
    processed: ProcessedExample,
}

#[derive(Debug, Clone, Default)]
pub struct TruncationStats {
    pub examples: usize,
    pub truncated_sources: usize,
    pub truncated_targets: usize,
}

/// Process every example of a corpus against a vocabulary.
pub fn process_corpus(
    corpus: &Corpus,
    vocab: &Vocabulary,
) -> Result<(Vec<ProcessedRecord>, TruncationStats)> {
    let mut records = Vec::with_capacity(corpus.len());
    let mut stats = TruncationStats::default();
    for ex in &corpus.examples {
        let processed = process(ex, vocab)?;
        stats.examples += 1;
        stats.truncated_sources += processed.truncated_source as usize;
        stats.truncated_targets += processed.truncated_target as usize;
        records.push(ProcessedRecord {
            example: ex.clone(),
            processed,
        });
    }
    Ok((records, stats))
}

/// Token counts over statements, keyphrases and targets of a corpus.
pub fn count_tokens(corpus: &Corpus) -> std::collections::HashMap<String, u64> {
    let mut counts = std::collections::HashMap::new();
    let mut bump = |tok: &String| *counts.entry(tok.clone()).or_insert(0u64) += 1;
    for ex in &corpus.examples {
        ex.statement.iter().for_each(&mut bump);
        ex.keyphrases.iter().flatten().for_each(&mut bump);
        ex.target_sentences.iter().flatten().for_each(&mut bump);
    }
    counts
}

pub fn records_to_jsonl(records: &[ProcessedRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let raw = RawProcessedRecord {
            statement: detokenize(&r.example.statement),
            keyphrases: r.example.keyphrases.iter().map(|k| detokenize(k)).collect(),
            target_sentences: r
                .example
                .target_sentences
                .iter()
                .map(|s| detokenize(s))
                .collect(),
            processed: r.processed.clone(),
        };
        out.push_str(&serde_json::to_string(&raw)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<ProcessedRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let raw: RawProcessedRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("processed line {}: {}", lineno + 1, e)))?;
        records.push(ProcessedRecord {
            example: Example {
                statement: tokenize(&raw.statement),
                keyphrases: raw.keyphrases.iter().map(|k| tokenize(k)).collect(),
                target_sentences: raw.target_sentences.iter().map(|s| tokenize(s)).collect(),
            },
            processed: raw.processed,
        });
    }
    Ok(records)
}

pub fn save_records(records: &[ProcessedRecord], path: &std::path::Path) -> Result<()> {
    std::fs::write(path, records_to_jsonl(records)?)?;
    Ok(())
}

pub fn load_records(path: &std::path::Path) -> Result<Vec<ProcessedRecord>> {
    records_from_jsonl(&std::fs::read_to_string(path)?)
}

/// True when the token participates in BOW labels (content word semantics
/// shared by negative masking).
pub fn is_content_token(token: &str, vocab: &Vocabulary) -> bool {
    !is_punctuation(token) && !vocab.is_stopword(token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn vocab_from(words: &[&str], stopwords: &[&str]) -> Vocabulary {
        let counts: HashMap<String, u64> =
            words.iter().map(|w| (w.to_string(), 2)).collect();
        let stops: Vec<String> = stopwords.iter().map(|s| s.to_string()).collect();
        Vocabulary::build(&counts, 1, &stops)
    }

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn source_layout_no_keyphrases() {
        let v = vocab_from(&["a"], &[]);
        let (ids, pos, trunc) = build_source(&toks("a"), &[], &v);
        assert_eq!(ids, vec![v.id("a")]);
        assert!(pos.is_empty());
        assert!(!trunc);
    }

    #[test]
    fn source_layout_with_keyphrases() {
        let v = vocab_from(&["a", "b", "c", "d"], &[]);
        let (ids, pos, _) = build_source(&toks("a"), &[toks("b"), toks("c d")], &v);
        assert_eq!(
            ids,
            vec![v.id("a"), SEG, v.id("b"), SEG, v.id("c"), v.id("d")]
        );
        assert_eq!(pos, vec![1, 3]);
    }

    #[test]
    fn source_truncation_drops_whole_blocks() {
        let v = vocab_from(&["w", "k"], &[]);
        let statement: Vec<String> = vec!["w".to_string(); 250];
        let long_kp: Vec<String> = vec!["k".to_string(); 10];
        let short_kp: Vec<String> = vec!["k".to_string(); 3];
        let (ids, pos, trunc) = build_source(&statement, &[long_kp, short_kp], &v);
        // first keyphrase block (11 ids) does not fit in the 6 remaining slots
        assert!(trunc);
        assert_eq!(pos.len(), 0);
        assert_eq!(ids.len(), 250);
    }

    #[test]
    fn target_layout_single_sentence() {
        let v = vocab_from(&["a"], &[]);
        let (ids, s, _) = build_target(&[toks("a")], &v).unwrap();
        assert_eq!(ids, vec![BOS, SN, v.id("a"), EOS]);
        assert_eq!(s, vec![0, 0, 0, 0]);
    }

    #[test]
    fn target_two_sentences_two_sn() {
        let v = vocab_from(&["a", "b"], &[]);
        let (ids, s, _) = build_target(&[toks("a"), toks("b")], &v).unwrap();
        assert_eq!(ids.iter().filter(|&&i| i == SN).count(), 2);
        assert_eq!(s, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(*ids.last().unwrap(), EOS);
    }

    #[test]
    fn target_empty_list_errors() {
        let v = vocab_from(&["a"], &[]);
        assert!(build_target(&[], &v).is_err());
    }

    #[test]
    fn target_truncates_at_sentence_boundary() {
        let v = vocab_from(&["w"], &[]);
        let s1: Vec<String> = vec!["w".to_string(); 200];
        let s2: Vec<String> = vec!["w".to_string(); 100];
        let (ids, sidx, trunc) = build_target(&[s1, s2], &v).unwrap();
        assert!(trunc);
        assert_eq!(ids.iter().filter(|&&i| i == SN).count(), 1);
        assert!(ids.len() <= MAX_SEQ);
        assert_eq!(*sidx.iter().max().unwrap(), 0);
    }

    #[test]
    fn bow_labels_filter_and_dedup() {
        let v = vocab_from(&["the", "dog", "runs", "."], &["the"]);
        let labels = build_bow_labels(&[toks("the dog runs .")], &v);
        let expect: BTreeSet<usize> = [v.id("dog"), v.id("runs")].into_iter().collect();
        assert_eq!(labels[0], expect);

        let labels = build_bow_labels(&[toks("the the .")], &v);
        assert!(labels[0].is_empty());

        let labels = build_bow_labels(&[toks("dog dog")], &v);
        assert_eq!(labels[0].len(), 1);
    }

    #[test]
    fn process_invariants() {
        let v = vocab_from(&["a", "b", "c", "pub", "fund"], &[]);
        let ex = Example {
            statement: toks("a b"),
            keyphrases: vec![toks("pub fund")],
            target_sentences: vec![toks("pub a"), toks("fund c")],
        };
        let p = process(&ex, &v).unwrap();
        let j = p.target_ids.iter().filter(|&&i| i == SN).count();
        assert_eq!(j, 2);
        assert_eq!(p.bow_labels.len(), j);
        assert_eq!(p.sentence_index.iter().max().unwrap() + 1, j);
        assert_eq!(p.sn_positions().len(), j);
        // nondecreasing sentence index
        assert!(p.sentence_index.windows(2).all(|w| w[0] <= w[1]));
        // keyphrase flags track token membership
        for (t, &id) in p.target_ids.iter().enumerate() {
            let expect = !v.is_special(id) && ["pub", "fund"].contains(&v.token(id));
            assert_eq!(p.keyphrase_flags[t], expect, "pos {}", t);
        }
        // processing is idempotent/deterministic
        assert_eq!(process(&ex, &v).unwrap(), p);
    }

    #[test]
    fn processed_records_roundtrip() {
        let v = vocab_from(&["a", "b"], &[]);
        let ex = Example {
            statement: toks("a"),
            keyphrases: vec![toks("b")],
            target_sentences: vec![toks("b a")],
        };
        let rec = ProcessedRecord {
            processed: process(&ex, &v).unwrap(),
            example: ex,
        };
        let text = records_to_jsonl(&[rec.clone()]).unwrap();
        let back = records_from_jsonl(&text).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].processed, rec.processed);
        assert_eq!(back[0].example, rec.example);
    }
}
