//! Topic-signature words via the binomial log-likelihood-ratio statistic, and
//! parser-free keyphrase candidate extraction on top of them.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::tokenize::is_punctuation;

/// Default -2 log lambda acceptance threshold (chi-square(1), p ~ 0.0016).
pub const DEFAULT_SIGNATURE_THRESHOLD: f64 = 10.0;

/// k log p + (n-k) log(1-p) with the 0 * log 0 := 0 convention.
fn binom_ll(k: f64, n: f64, p: f64) -> f64 {
    let mut ll = 0.0;
    if k > 0.0 {
        ll += k * p.ln();
    }
    if n - k > 0.0 {
        ll += (n - k) * (1.0 - p).ln();
    }
    ll
}

/// -2 log lambda comparing a word's rate in the topic corpus against the
/// background corpus. Larger means the rates differ more than chance.
pub fn llr_score(k_topic: u64, n_topic: u64, k_back: u64, n_back: u64) -> f64 {
    let (k1, n1) = (k_topic as f64, n_topic as f64);
    let (k2, n2) = (k_back as f64, n_back as f64);
    let p1 = k1 / n1;
    let p2 = if n2 > 0.0 { k2 / n2 } else { 0.0 };
    let p = (k1 + k2) / (n1 + n2);
    2.0 * (binom_ll(k1, n1, p1) + binom_ll(k2, n2, p2)
        - binom_ll(k1, n1, p)
        - binom_ll(k2, n2, p))
}

/// Per-word LLR scores from topic and background token counts. Both corpora
/// must be nonempty. A word is scored even if absent from the background.
pub fn topic_signature_scores(
    topic_counts: &HashMap<String, u64>,
    background_counts: &HashMap<String, u64>,
) -> Result<HashMap<String, f64>> {
    let n_topic: u64 = topic_counts.values().sum();
    let n_back: u64 = background_counts.values().sum();
    if n_topic == 0 || n_back == 0 {
        return Err(Error::Data(
            "topic_signature_scores: empty topic or background corpus".into(),
        ));
    }
    let mut scores = HashMap::with_capacity(topic_counts.len());
    for (word, &k_topic) in topic_counts {
        let k_back = background_counts.get(word).copied().unwrap_or(0);
        scores.insert(word.clone(), llr_score(k_topic, n_topic, k_back, n_back));
    }
    Ok(scores)
}

/// Signature words: score above threshold and topic rate above background
/// rate. Ordered by corpus frequency (desc) then lexicographic.
pub fn signature_set(
    topic_counts: &HashMap<String, u64>,
    background_counts: &HashMap<String, u64>,
    threshold: f64,
) -> Result<Vec<String>> {
    let scores = topic_signature_scores(topic_counts, background_counts)?;
    let n_topic: u64 = topic_counts.values().sum();
    let n_back: u64 = background_counts.values().sum();
    let mut sigs: Vec<&String> = scores
        .iter()
        .filter(|(word, &score)| {
            let k1 = topic_counts[*word];
            let k2 = background_counts.get(*word).copied().unwrap_or(0);
            let topic_rate = k1 as f64 / n_topic as f64;
            let back_rate = k2 as f64 / n_back as f64;
            score > threshold && topic_rate > back_rate
        })
        .map(|(word, _)| word)
        .collect();
    sigs.sort_by(|a, b| {
        topic_counts[*b]
            .cmp(&topic_counts[*a])
            .then_with(|| a.cmp(b))
    });
    Ok(sigs.into_iter().cloned().collect())
}

/// Keyphrase candidates: maximal runs of non-stopword, non-punctuation
/// tokens, chopped into consecutive n-grams of at most `max_len`, kept iff
/// they contain at least one signature token. Deduplicated in first-occurrence
/// order.
pub fn extract_keyphrases(
    tokens: &[String],
    signatures: &HashSet<String>,
    stopwords: &HashSet<String>,
    max_len: usize,
) -> Vec<Vec<String>> {
    let mut phrases: Vec<Vec<String>> = Vec::new();
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut run: Vec<String> = Vec::new();
    let flush = |run: &mut Vec<String>, phrases: &mut Vec<Vec<String>>, seen: &mut HashSet<Vec<String>>| {
        for chunk in run.chunks(max_len.max(1)) {
            if chunk.iter().any(|t| signatures.contains(t)) {
                let phrase = chunk.to_vec();
                if seen.insert(phrase.clone()) {
                    phrases.push(phrase);
                }
            }
        }
        run.clear();
    };
    for tok in tokens {
        if is_punctuation(tok) || stopwords.contains(tok) {
            flush(&mut run, &mut phrases, &mut seen);
        } else {
            run.push(tok.clone());
        }
    }
    flush(&mut run, &mut phrases, &mut seen);
    phrases
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::tokenize;

    fn counts(pairs: &[(&str, u64)]) -> HashMap<String, u64> {
        pairs.iter().map(|(t, c)| (t.to_string(), *c)).collect()
    }

    #[test]
    fn identical_rates_score_near_zero() {
        // same rate 1/10 in both corpora
        let topic = counts(&[("w", 1), ("x", 9)]);
        let back = counts(&[("w", 10), ("y", 90)]);
        let s = topic_signature_scores(&topic, &back).unwrap();
        assert!(s["w"].abs() < 1e-9, "score {}", s["w"]);
    }

    #[test]
    fn topic_only_word_scores_positive() {
        let topic = counts(&[("rare", 4), ("x", 6)]);
        let back = counts(&[("y", 100)]);
        let s = topic_signature_scores(&topic, &back).unwrap();
        assert!(s["rare"] > 0.0);
    }

    #[test]
    fn empty_corpus_errors() {
        let topic = HashMap::new();
        let back = counts(&[("y", 1)]);
        assert!(topic_signature_scores(&topic, &back).is_err());
    }

    #[test]
    fn signature_filter_requires_higher_topic_rate() {
        // "common" is much MORE frequent in background: high LLR but wrong
        // direction; must not be a signature.
        let topic = counts(&[("common", 1), ("topical", 30), ("x", 30)]);
        let back = counts(&[("common", 500), ("y", 500)]);
        let sigs = signature_set(&topic, &back, 10.0).unwrap();
        assert!(sigs.contains(&"topical".to_string()));
        assert!(!sigs.contains(&"common".to_string()));
    }

    #[test]
    fn keyphrase_extraction_rules() {
        let sigs: HashSet<String> = ["funding".to_string()].into_iter().collect();
        let stops: HashSet<String> = ["the".to_string(), "of".to_string()].into_iter().collect();
        let toks = tokenize("the public funding of schools. public funding again.");
        let phrases = extract_keyphrases(&toks, &sigs, &stops, 4);
        assert!(phrases.contains(&vec!["public".to_string(), "funding".to_string()]));
        // dedup: the repeated phrase appears once
        let n = phrases
            .iter()
            .filter(|p| *p == &vec!["public".to_string(), "funding".to_string()])
            .count();
        assert_eq!(n, 1);

        // no signature tokens -> nothing
        let none = extract_keyphrases(&toks, &HashSet::new(), &stops, 4);
        assert!(none.is_empty());
    }

    #[test]
    fn long_runs_are_chopped() {
        let sigs: HashSet<String> = ["c".to_string(), "f".to_string()].into_iter().collect();
        let toks = tokenize("a b c d e f");
        let phrases = extract_keyphrases(&toks, &sigs, &HashSet::new(), 4);
        assert_eq!(
            phrases,
            vec![
                vec!["a".to_string(), "b".to_string(), "c".to_string(), "d".to_string()],
                vec!["e".to_string(), "f".to_string()],
            ]
        );
    }
}
