//! Report rendering, vocabulary construction, and rule-based tokenization.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthcohort::{write_file, Biomarker, Diagnosis, SubjectRecord};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS_TEXT: &str = "[CLS_TEXT]";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_TEXT_ID: u32 = 2;

pub const DEFAULT_MAX_TOKENS: usize = 128;

pub const REPORT_LEAD: &str = "The MRI scan reveals the following biomarkers:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub text: String,
    pub source_subject: String,
}

pub fn render_report(record: &SubjectRecord) -> Report {
    let clauses: Vec<String> = Biomarker::ALL
        .iter()
        .map(|&b| format!("{}: {:.2} mm3", b.report_label(), record.biomarkers.get(b)))
        .collect();
    Report {
        text: format!("A photo of {}. {REPORT_LEAD} {}.", record.diagnosis, clauses.join(", ")),
        source_subject: record.subject_id.clone(),
    }
}

pub fn class_prompt(diagnosis: Diagnosis) -> Report {
    Report {
        text: format!("A photo of {diagnosis}."),
        source_subject: String::new(),
    }
}

/// Parse a class name and build its prompt.
pub fn class_prompt_for(name: &str) -> Result<Report> {
    Ok(class_prompt(name.parse()?))
}

fn is_punct(c: char) -> bool {
    matches!(c, '.' | ':' | ',')
}

/// Lowercase, split on whitespace, split `.`, `:`, `,` into their own tokens,
/// and emit numerals digit by digit. A digit that continues a word (`mm3`)
/// stays part of that word.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if is_punct(c) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            } else if c.is_ascii_digit() && word.is_empty() {
                out.push(c.to_string());
            } else {
                word.extend(c.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Dense token→index map with reserved entries at 0, 1, 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.index)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let index: BTreeMap<String, u32> = serde_json::from_str(s)?;
        let mut tokens = vec![String::new(); index.len()];
        for (t, &i) in &index {
            let slot = tokens
                .get_mut(i as usize)
                .ok_or_else(|| Error::invalid(format!("vocab index {i} is not dense")))?;
            if !slot.is_empty() {
                return Err(Error::invalid(format!("vocab index {i} assigned twice")));
            }
            *slot = t.clone();
        }
        for (t, id) in [(PAD, PAD_ID), (UNK, UNK_ID), (CLS_TEXT, CLS_TEXT_ID)] {
            if index.get(t) != Some(&id) {
                return Err(Error::invalid(format!("reserved token {t} missing from vocab")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Reserved tokens first, then every distinct corpus token in lexicographic
/// order.
pub fn build_vocab(corpus: &[Report]) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let distinct: BTreeSet<String> = corpus.iter().flat_map(|r| split_tokens(&r.text)).collect();
    let mut tokens: Vec<String> = [PAD, UNK, CLS_TEXT].iter().map(|s| s.to_string()).collect();
    tokens.extend(
        distinct
            .into_iter()
            .filter(|t| ![PAD, UNK, CLS_TEXT].contains(&t.as_str())),
    );
    Ok(Vocab::from_tokens(tokens))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    /// Always exactly `max_len` long, padded with `PAD_ID`.
    pub indices: Vec<u32>,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.indices.len()
    }

    /// Positions holding real tokens.
    pub fn content_positions(&self) -> Vec<usize> {
        self.indices
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != PAD_ID)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn content_len(&self) -> usize {
        self.indices.iter().filter(|&&t| t != PAD_ID).count()
    }

    pub fn content_tokens<'v>(&self, vocab: &'v Vocab) -> Vec<&'v str> {
        self.indices
            .iter()
            .filter(|&&t| t != PAD_ID)
            .map(|&t| vocab.token(t))
            .collect()
    }

    pub fn unk_count(&self) -> usize {
        self.indices.iter().filter(|&&t| t == UNK_ID).count()
    }
}

pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    let mut indices: Vec<u32> = split_tokens(text)
        .iter()
        .map(|t| vocab.id(t).unwrap_or(UNK_ID))
        .take(max_len)
        .collect();
    indices.resize(max_len, PAD_ID);
    TokenSequence { indices }
}
