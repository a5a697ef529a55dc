//! Corpus interchange format: UTF-8 JSON Lines, one record per example with
//! fields `statement` (string), `keyphrases` (array of strings) and
//! `target_sentences` (array of strings). Text fields hold space-joined
//! tokens; serialize -> parse -> serialize is byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::{detokenize, tokenize};

/// One training example: statement, unordered guidance keyphrases and the
/// multi-sentence target, all as token lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub statement: Vec<String>,
    pub keyphrases: Vec<Vec<String>>,
    pub target_sentences: Vec<Vec<String>>,
}

impl Example {
    pub fn num_sentences(&self) -> usize {
        self.target_sentences.len()
    }

    /// Lowercased token membership over all keyphrases.
    pub fn keyphrase_token_set(&self) -> std::collections::HashSet<&str> {
        self.keyphrases
            .iter()
            .flat_map(|kp| kp.iter().map(|t| t.as_str()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_sentences.is_empty() {
            return Err(Error::Data("example has no target sentences".into()));
        }
        if self.target_sentences.iter().any(|s| s.is_empty()) {
            return Err(Error::Data("example has an empty target sentence".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawRecord {
    statement: String,
    keyphrases: Vec<String>,
    target_sentences: Vec<String>,
}

impl From<&Example> for RawRecord {
    fn from(ex: &Example) -> Self {
        RawRecord {
            statement: detokenize(&ex.statement),
            keyphrases: ex.keyphrases.iter().map(|k| detokenize(k)).collect(),
            target_sentences: ex.target_sentences.iter().map(|s| detokenize(s)).collect(),
        }
    }
}

impl From<RawRecord> for Example {
    fn from(r: RawRecord) -> Self {
        Example {
            statement: tokenize(&r.statement),
            keyphrases: r.keyphrases.iter().map(|k| tokenize(k)).collect(),
            target_sentences: r.target_sentences.iter().map(|s| tokenize(s)).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for ex in &self.examples {
            let raw: RawRecord = ex.into();
            out.push_str(&serde_json::to_string(&raw)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Corpus> {
        let mut examples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let raw: RawRecord = serde_json::from_str(line).map_err(|e| {
                Error::Data(format!("corpus line {}: {}", lineno + 1, e))
            })?;
            let ex: Example = raw.into();
            ex.validate()
                .map_err(|e| Error::Data(format!("corpus line {}: {}", lineno + 1, e)))?;
            examples.push(ex);
        }
        Ok(Corpus { examples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_jsonl()?.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        let mut text = String::new();
        let mut r = BufReader::new(File::open(path)?);
        std::io::Read::read_to_string(&mut r, &mut text)?;
        Corpus::from_jsonl(&text)
    }
}
