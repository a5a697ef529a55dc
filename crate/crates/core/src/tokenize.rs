//! Whitespace tokenizer with punctuation detached as separate tokens.
//! Everything is lowercased; `detokenize . tokenize` is a fixed point under
//! re-tokenization (round trip up to whitespace normalization).

/// Lowercase and split: alphanumeric runs (plus `'`, `_`, `-` inside words)
/// become tokens, every other non-whitespace character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(|c| c.to_lowercase()) {
        if ch.is_alphanumeric() || ch == '\'' || ch == '_' || ch == '-' {
            word.push(ch);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Join tokens with single spaces. Re-tokenizing the result reproduces the
/// token list exactly.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(|t| t.as_ref())
        .collect::<Vec<_>>()
        .join(" ")
}

/// A token counts as punctuation when it has no alphanumeric characters.
pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| !c.is_alphanumeric())
}
