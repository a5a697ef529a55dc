//! Construction of the four incoherent-target variants used by the
//! coherence-contrastive objective: SHUFFLE (reorder sentences), REPLACE
//! (swap half the sentences for corpus draws), DIFFERENT (another example's
//! whole target) and MASK (corrupt keyphrase-related content words and refill
//! from the corpus unigram distribution). Every variant is guaranteed to
//! differ from the positive target, and construction is a pure function of
//! (example, corpus, seed).

use std::collections::HashSet;

use crate::data::{build_bow_labels, build_target, is_content_token, ProcessedRecord};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::vocab::Vocabulary;

type Sentence = Vec<String>;

const MASK_FRACTION: f64 = 0.2;
const REJECTION_ATTEMPTS: usize = 200;

/// Target-side inputs the model needs to decode a variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedTarget {
    pub target_ids: Vec<usize>,
    pub sentence_index: Vec<usize>,
    pub bow_labels: Vec<std::collections::BTreeSet<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeKind {
    Shuffle,
    Replace,
    Different,
    Mask,
}

impl NegativeKind {
    pub fn name(self) -> &'static str {
        match self {
            NegativeKind::Shuffle => "shuffle",
            NegativeKind::Replace => "replace",
            NegativeKind::Different => "different",
            NegativeKind::Mask => "mask",
        }
    }

    pub const ALL: [NegativeKind; 4] = [
        NegativeKind::Shuffle,
        NegativeKind::Replace,
        NegativeKind::Different,
        NegativeKind::Mask,
    ];
}

#[derive(Debug, Clone)]
pub struct NegativeVariant {
    pub kind: NegativeKind,
    pub sentences: Vec<Sentence>,
    /// Human-readable construction note (which slots/tokens were altered).
    pub note: String,
    pub processed: ProcessedTarget,
}

#[derive(Debug, Clone)]
pub struct NegativeSet {
    pub shuffle: NegativeVariant,
    pub replace: NegativeVariant,
    pub different: NegativeVariant,
    pub mask: NegativeVariant,
    pub seed: u64,
}

impl NegativeSet {
    pub fn variants(&self) -> [&NegativeVariant; 4] {
        [&self.shuffle, &self.replace, &self.different, &self.mask]
    }
}

/// Corpus-level pools shared by all negative constructions: the cross-example
/// sentence pool, and the content-word unigram distribution for MASK fills.
#[derive(Debug, Clone)]
pub struct NegativePools {
    /// (owning example index, sentence)
    sentences: Vec<(usize, Sentence)>,
    unigram_tokens: Vec<String>,
    unigram_cum: Vec<u64>,
    unigram_total: u64,
}

impl NegativePools {
    pub fn build(records: &[ProcessedRecord], vocab: &Vocabulary) -> NegativePools {
        let mut sentences = Vec::new();
        let mut counts: std::collections::BTreeMap<String, u64> = std::collections::BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            for sent in &r.example.target_sentences {
                sentences.push((i, sent.clone()));
                for tok in sent {
                    if is_content_token(tok, vocab) && vocab.id_exact(tok).is_some() {
                        *counts.entry(tok.clone()).or_insert(0) += 1;
                    }
                }
            }
        }
        let mut unigram_tokens = Vec::with_capacity(counts.len());
        let mut unigram_cum = Vec::with_capacity(counts.len());
        let mut total = 0u64;
        for (tok, c) in counts {
            total += c;
            unigram_tokens.push(tok);
            unigram_cum.push(total);
        }
        NegativePools {
            sentences,
            unigram_tokens,
            unigram_cum,
            unigram_total: total,
        }
    }

    fn draw_unigram(&self, rng: &mut SeedRng) -> Option<&str> {
        if self.unigram_total == 0 {
            return None;
        }
        let x = rng.next_u64() % self.unigram_total;
        let idx = self.unigram_cum.partition_point(|&c| c <= x);
        Some(&self.unigram_tokens[idx])
    }
}

/// Random non-identity permutation of the sentences. Single-sentence targets
/// (and degenerate all-equal targets) fall back to a DIFFERENT-style draw of
/// another example's target.
pub fn make_shuffle(
    sentences: &[Sentence],
    example_index: usize,
    records: &[ProcessedRecord],
    rng: &mut SeedRng,
) -> Result<(Vec<Sentence>, String)> {
    let j = sentences.len();
    if j == 0 {
        return Err(Error::Data("shuffle: empty target".into()));
    }
    if j >= 2 {
        for _ in 0..REJECTION_ATTEMPTS {
            let mut perm: Vec<usize> = (0..j).collect();
            rng.shuffle(&mut perm);
            let shuffled: Vec<Sentence> = perm.iter().map(|&i| sentences[i].clone()).collect();
            if shuffled != sentences {
                return Ok((shuffled, format!("permutation {:?}", perm)));
            }
        }
        // all sentences equal in value; a permutation cannot differ
    }
    let (src, sents) = draw_other_target(example_index, records, rng)?;
    Ok((sents, format!("single-sentence fallback: target of example {}", src)))
}

/// Replace ceil(J/2) uniformly chosen slots with corpus sentences from other
/// examples; untouched slots stay byte-identical.
pub fn make_replace(
    sentences: &[Sentence],
    example_index: usize,
    pools: &NegativePools,
    rng: &mut SeedRng,
) -> Result<(Vec<Sentence>, String)> {
    let j = sentences.len();
    if j == 0 {
        return Err(Error::Data("replace: empty target".into()));
    }
    let eligible: Vec<&(usize, Sentence)> = pools
        .sentences
        .iter()
        .filter(|(owner, _)| *owner != example_index)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Data("replace: sentence pool is empty".into()));
    }
    let k = j.div_ceil(2);
    let slots = rng.sample_indices(j, k);
    let mut out = sentences.to_vec();
    for &slot in &slots {
        let mut replaced = false;
        for _ in 0..REJECTION_ATTEMPTS {
            let cand = &eligible[rng.below(eligible.len())].1;
            if cand != &sentences[slot] {
                out[slot] = cand.clone();
                replaced = true;
                break;
            }
        }
        if !replaced {
            return Err(Error::Data(
                "replace: pool has no sentence differing from the original".into(),
            ));
        }
    }
    Ok((out, format!("replaced slots {:?}", slots)))
}

fn draw_other_target(
    example_index: usize,
    records: &[ProcessedRecord],
    rng: &mut SeedRng,
) -> Result<(usize, Vec<Sentence>)> {
    if records.len() < 2 {
        return Err(Error::Data("different: corpus has a single example".into()));
    }
    let mut idx = rng.below(records.len() - 1);
    if idx >= example_index {
        idx += 1;
    }
    Ok((idx, records[idx].example.target_sentences.clone()))
}

/// The full target of a uniformly drawn different example.
pub fn make_different(
    example_index: usize,
    records: &[ProcessedRecord],
    rng: &mut SeedRng,
) -> Result<(Vec<Sentence>, String)> {
    let (idx, sents) = draw_other_target(example_index, records, rng)?;
    Ok((sents, format!("target of example {}", idx)))
}

/// Mask ceil(0.2 * |E|) of the eligible positions E (keyphrase-related,
/// non-stopword tokens; all non-stopword tokens when E is empty) and refill
/// each from the corpus content-word unigram distribution, rejecting the
/// original token.
pub fn make_mask(
    sentences: &[Sentence],
    keyphrase_tokens: &HashSet<&str>,
    vocab: &Vocabulary,
    pools: &NegativePools,
    rng: &mut SeedRng,
) -> Result<(Vec<Sentence>, String)> {
    let mut eligible: Vec<(usize, usize)> = Vec::new();
    for (si, sent) in sentences.iter().enumerate() {
        for (ti, tok) in sent.iter().enumerate() {
            if keyphrase_tokens.contains(tok.as_str()) && is_content_token(tok, vocab) {
                eligible.push((si, ti));
            }
        }
    }
    if eligible.is_empty() {
        for (si, sent) in sentences.iter().enumerate() {
            for (ti, tok) in sent.iter().enumerate() {
                if is_content_token(tok, vocab) {
                    eligible.push((si, ti));
                }
            }
        }
    }
    if eligible.is_empty() {
        return Err(Error::Data("mask: no maskable positions".into()));
    }
    let k = ((MASK_FRACTION * eligible.len() as f64).ceil() as usize).max(1);
    let chosen = rng.sample_indices(eligible.len(), k);
    let mut out = sentences.to_vec();
    let mut altered = Vec::with_capacity(k);
    for &c in &chosen {
        let (si, ti) = eligible[c];
        let original = &sentences[si][ti];
        let mut filled = false;
        for _ in 0..REJECTION_ATTEMPTS {
            match pools.draw_unigram(rng) {
                None => break,
                Some(tok) if tok != original => {
                    out[si][ti] = tok.to_string();
                    filled = true;
                    break;
                }
                Some(_) => {}
            }
        }
        if !filled {
            return Err(Error::Data("mask: no fillable vocabulary".into()));
        }
        altered.push((si, ti));
    }
    Ok((
        out,
        format!("masked {}/{} eligible positions {:?}", k, eligible.len(), altered),
    ))
}

fn process_variant(sentences: &[Sentence], vocab: &Vocabulary) -> Result<ProcessedTarget> {
    let (target_ids, sentence_index, _) = build_target(sentences, vocab)?;
    let surviving = target_ids.iter().filter(|&&id| id == crate::vocab::SN).count();
    let bow_labels = build_bow_labels(&sentences[..surviving], vocab);
    Ok(ProcessedTarget {
        target_ids,
        sentence_index,
        bow_labels,
    })
}

/// Build all four variants for one example. Deterministic in
/// (records, example_index, seed).
pub fn make_negative_set(
    records: &[ProcessedRecord],
    pools: &NegativePools,
    example_index: usize,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<NegativeSet> {
    let record = records
        .get(example_index)
        .ok_or_else(|| Error::Index(format!("example {} of {}", example_index, records.len())))?;
    let sentences = &record.example.target_sentences;
    let kp_tokens = record.example.keyphrase_token_set();
    let root = SeedRng::new(seed);

    let mut rng = root.derive("shuffle", example_index as u64);
    let (shuffle_s, shuffle_note) = make_shuffle(sentences, example_index, records, &mut rng)?;
    let mut rng = root.derive("replace", example_index as u64);
    let (replace_s, replace_note) = make_replace(sentences, example_index, pools, &mut rng)?;
    let mut rng = root.derive("different", example_index as u64);
    let (different_s, different_note) = make_different(example_index, records, &mut rng)?;
    let mut rng = root.derive("mask", example_index as u64);
    let (mask_s, mask_note) = make_mask(sentences, &kp_tokens, vocab, pools, &mut rng)?;

    let build = |kind, sents: Vec<Sentence>, note: String| -> Result<NegativeVariant> {
        if sents == *sentences {
            return Err(Error::Data(format!(
                "{} variant equals the positive target",
                NegativeKind::name(kind)
            )));
        }
        Ok(NegativeVariant {
            kind,
            processed: process_variant(&sents, vocab)?,
            sentences: sents,
            note,
        })
    };

    Ok(NegativeSet {
        shuffle: build(NegativeKind::Shuffle, shuffle_s, shuffle_note)?,
        replace: build(NegativeKind::Replace, replace_s, replace_note)?,
        different: build(NegativeKind::Different, different_s, different_note)?,
        mask: build(NegativeKind::Mask, mask_s, mask_note)?,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, Example};
    use crate::data::process_corpus;
    use crate::tokenize::tokenize;
    use crate::vocab::Vocabulary;

    fn fixture() -> (Vec<ProcessedRecord>, Vocabulary, NegativePools) {
        let corpus = Corpus {
            examples: vec![
                Example {
                    statement: tokenize("people argue about parks"),
                    keyphrases: vec![tokenize("green parks"), tokenize("city funds")],
                    target_sentences: vec![
                        tokenize("first , green parks need city funds ."),
                        tokenize("second , the city funds grow ."),
                        tokenize("third , parks stay green ."),
                    ],
                },
                Example {
                    statement: tokenize("people argue about roads"),
                    keyphrases: vec![tokenize("wide roads")],
                    target_sentences: vec![
                        tokenize("first , wide roads cost money ."),
                        tokenize("second , money runs out ."),
                    ],
                },
                Example {
                    statement: tokenize("people argue about schools"),
                    keyphrases: vec![tokenize("open schools")],
                    target_sentences: vec![
                        tokenize("first , open schools teach children ."),
                        tokenize("second , children learn fast ."),
                    ],
                },
            ],
        };
        let counts = crate::data::count_tokens(&corpus);
        let vocab = Vocabulary::build(&counts, 1, &crate::vocab::builtin_stopwords());
        let (records, _) = process_corpus(&corpus, &vocab).unwrap();
        let pools = NegativePools::build(&records, &vocab);
        (records, vocab, pools)
    }

    #[test]
    fn shuffle_preserves_multiset_and_differs() {
        let (records, _, _) = fixture();
        let sents = &records[0].example.target_sentences;
        for seed in 0..20 {
            let mut rng = SeedRng::new(seed);
            let (shuffled, _) = make_shuffle(sents, 0, &records, &mut rng).unwrap();
            assert_ne!(&shuffled, sents);
            let mut a = shuffled.clone();
            let mut b = sents.clone();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shuffle_two_sentences_is_forced_swap() {
        let (records, _, _) = fixture();
        let sents = &records[1].example.target_sentences;
        let mut rng = SeedRng::new(3);
        let (shuffled, _) = make_shuffle(sents, 1, &records, &mut rng).unwrap();
        assert_eq!(shuffled[0], sents[1]);
        assert_eq!(shuffled[1], sents[0]);
    }

    #[test]
    fn shuffle_single_sentence_falls_back_to_other_target() {
        let (records, _, _) = fixture();
        let single = vec![tokenize("first , lone sentence .")];
        let mut rng = SeedRng::new(5);
        let (out, note) = make_shuffle(&single, 0, &records, &mut rng).unwrap();
        assert_ne!(out, single);
        assert!(note.contains("fallback"));
        // sourced from another corpus target verbatim
        assert!(records.iter().any(|r| r.example.target_sentences == out));
    }

    #[test]
    fn replace_alters_exactly_ceil_half() {
        let (records, _, pools) = fixture();
        for (idx, j_expect) in [(0usize, 2usize), (1, 1)] {
            let sents = &records[idx].example.target_sentences;
            let mut rng = SeedRng::new(11);
            let (out, _) = make_replace(sents, idx, &pools, &mut rng).unwrap();
            let altered = out.iter().zip(sents).filter(|(a, b)| a != b).count();
            assert_eq!(altered, j_expect, "example {}", idx);
        }
    }

    #[test]
    fn replace_untouched_slots_byte_equal() {
        let (records, _, pools) = fixture();
        let sents = &records[0].example.target_sentences;
        let mut rng = SeedRng::new(13);
        let (out, note) = make_replace(sents, 0, &pools, &mut rng).unwrap();
        let altered: Vec<usize> = (0..3).filter(|&i| out[i] != sents[i]).collect();
        for i in 0..3 {
            if !altered.contains(&i) {
                assert_eq!(out[i], sents[i]);
            }
        }
        assert!(note.starts_with("replaced slots"));
    }

    #[test]
    fn replace_pool_excludes_own_sentences() {
        let (records, _, pools) = fixture();
        let sents = &records[0].example.target_sentences;
        for seed in 0..50 {
            let mut rng = SeedRng::new(seed);
            let (out, _) = make_replace(sents, 0, &pools, &mut rng).unwrap();
            for (i, s) in out.iter().enumerate() {
                if s != &sents[i] {
                    assert!(
                        !records[0].example.target_sentences.contains(s),
                        "own sentence drawn"
                    );
                }
            }
        }
    }

    #[test]
    fn different_never_draws_self_and_is_verbatim() {
        let (records, _, _) = fixture();
        for seed in 0..100 {
            let mut rng = SeedRng::new(seed);
            let (out, _) = make_different(1, &records, &mut rng).unwrap();
            assert_ne!(out, records[1].example.target_sentences);
            assert!(records
                .iter()
                .enumerate()
                .any(|(i, r)| i != 1 && r.example.target_sentences == out));
        }
    }

    #[test]
    fn different_is_roughly_uniform() {
        // 3-example corpus: each other target should come up about half the time
        let (records, _, _) = fixture();
        let trials = 10_000;
        let mut hits = [0usize; 3];
        for seed in 0..trials {
            let mut rng = SeedRng::new(seed as u64);
            let (out, _) = make_different(0, &records, &mut rng).unwrap();
            for (i, r) in records.iter().enumerate() {
                if r.example.target_sentences == out {
                    hits[i] += 1;
                }
            }
        }
        assert_eq!(hits[0], 0);
        let p1 = hits[1] as f64 / trials as f64;
        let p2 = hits[2] as f64 / trials as f64;
        assert!((p1 - 0.5).abs() < 0.02, "p1 = {}", p1);
        assert!((p2 - 0.5).abs() < 0.02, "p2 = {}", p2);
    }

    #[test]
    fn different_singleton_corpus_errors() {
        let (records, _, _) = fixture();
        let one = vec![records[0].clone()];
        let mut rng = SeedRng::new(1);
        assert!(make_different(0, &one, &mut rng).is_err());
    }

    #[test]
    fn mask_count_and_fill_rules() {
        let (records, vocab, pools) = fixture();
        let ex = &records[0].example;
        let kp = ex.keyphrase_token_set();
        // eligible: green, parks, city, funds occurrences that are content words
        let mut expected_eligible = 0;
        for sent in &ex.target_sentences {
            for tok in sent {
                if kp.contains(tok.as_str()) && is_content_token(tok, &vocab) {
                    expected_eligible += 1;
                }
            }
        }
        let expect_masked = (0.2f64 * expected_eligible as f64).ceil() as usize;
        let mut rng = SeedRng::new(7);
        let (out, note) = make_mask(&ex.target_sentences, &kp, &vocab, &pools, &mut rng).unwrap();
        let mut altered = 0;
        for (si, sent) in out.iter().enumerate() {
            for (ti, tok) in sent.iter().enumerate() {
                if tok != &ex.target_sentences[si][ti] {
                    altered += 1;
                    // every filled token differs from the one it replaced
                    assert_ne!(tok, &ex.target_sentences[si][ti]);
                    // eligible position
                    assert!(kp.contains(ex.target_sentences[si][ti].as_str()));
                }
            }
        }
        assert_eq!(altered, expect_masked, "note: {}", note);
    }

    #[test]
    fn mask_fallback_when_no_keyphrase_tokens() {
        let (_, vocab, pools) = fixture();
        let sents = vec![tokenize("first , children learn fast .")];
        let kp: HashSet<&str> = HashSet::new();
        let mut rng = SeedRng::new(9);
        let (out, _) = make_mask(&sents, &kp, &vocab, &pools, &mut rng).unwrap();
        assert_ne!(out, sents);
    }

    #[test]
    fn negative_set_is_deterministic_and_distinct() {
        let (records, vocab, pools) = fixture();
        let a = make_negative_set(&records, &pools, 0, &vocab, 42).unwrap();
        let b = make_negative_set(&records, &pools, 0, &vocab, 42).unwrap();
        for (va, vb) in a.variants().iter().zip(b.variants().iter()) {
            assert_eq!(va.sentences, vb.sentences);
            assert_eq!(va.processed, vb.processed);
        }
        for v in a.variants() {
            assert_ne!(v.sentences, records[0].example.target_sentences);
            // processed form is well-formed
            let j = v
                .processed
                .target_ids
                .iter()
                .filter(|&&id| id == crate::vocab::SN)
                .count();
            assert_eq!(j, v.processed.bow_labels.len());
        }
        let c = make_negative_set(&records, &pools, 0, &vocab, 43).unwrap();
        assert!(a
            .variants()
            .iter()
            .zip(c.variants().iter())
            .any(|(x, y)| x.sentences != y.sentences));
    }
}
