//! Uncased WordPiece tokenization into padded id batches.
//!
//! Text is cleaned, lowercased, accent-stripped and split on whitespace and
//! punctuation; each word is then segmented greedily, longest match first,
//! with `##` marking word-internal pieces. A word that cannot be fully
//! segmented becomes a single `[UNK]`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

pub const DEFAULT_MAX_LEN: usize = 128;
const MAX_WORD_CHARS: usize = 100;
const CONTINUATION: &str = "##";

/// Token list with reverse lookup and the ids of the four special tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    pub cls_id: u32,
    pub sep_id: u32,
    pub pad_id: u32,
    pub unk_id: u32,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            // First occurrence wins so that ids stay stable for duplicated lines.
            index.entry(t.clone()).or_insert(i as u32);
        }
        let special = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Vocab(format!("special token {name} is missing")))
        };
        Ok(Self {
            cls_id: special(CLS_TOKEN)?,
            sep_id: special(SEP_TOKEN)?,
            pad_id: special(PAD_TOKEN)?,
            unk_id: special(UNK_TOKEN)?,
            tokens,
            index,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::ArtifactMissing(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(
            text.lines()
                .map(|l| l.trim_end_matches('\r').to_string())
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
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

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Padded id matrix for a batch of sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedBatch {
    /// `[B, n_max]` token ids; PAD under masked-out entries.
    pub ids: Array2<u32>,
    /// `[B, n_max]`, true for real tokens.
    pub pad_mask: Array2<bool>,
    /// Real token count per row, CLS and SEP included.
    pub lengths: Vec<usize>,
}

impl TokenizedBatch {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.ids.ncols()
    }

    /// Real (unpadded) ids of row `b`.
    pub fn row_ids(&self, b: usize) -> Vec<u32> {
        self.ids
            .row(b)
            .iter()
            .take(self.lengths[b])
            .copied()
            .collect()
    }

    /// Build a padded batch from per-sentence id sequences.
    pub fn from_sequences(seqs: &[Vec<u32>], pad_id: u32) -> Self {
        let n_max = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Array2::from_elem((seqs.len(), n_max), pad_id);
        let mut pad_mask = Array2::from_elem((seqs.len(), n_max), false);
        for (b, seq) in seqs.iter().enumerate() {
            for (t, &id) in seq.iter().enumerate() {
                ids[[b, t]] = id;
                pad_mask[[b, t]] = true;
            }
        }
        Self {
            ids,
            pad_mask,
            lengths: seqs.iter().map(Vec::len).collect(),
        }
    }
}

/// Tokenize `texts` into a batch padded to the longest row.
pub fn tokenize<S: AsRef<str>>(
    texts: &[S],
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenizedBatch> {
    if texts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if max_len < 2 {
        return Err(Error::Config(format!(
            "max_len must be at least 2, got {max_len}"
        )));
    }
    let seqs: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| encode_sentence(t.as_ref(), vocab, max_len))
        .collect();
    Ok(TokenizedBatch::from_sequences(&seqs, vocab.pad_id))
}

/// `[CLS] pieces... [SEP]`, truncated so the whole sequence fits in `max_len`.
pub fn encode_sentence(text: &str, vocab: &Vocab, max_len: usize) -> Vec<u32> {
    let mut ids = Vec::with_capacity(16);
    ids.push(vocab.cls_id);
    let budget = max_len.saturating_sub(2);
    let mut pieces = Vec::new();
    'words: for word in pre_tokenize(text) {
        pieces.clear();
        wordpiece(&word, vocab, &mut pieces);
        for &p in &pieces {
            if ids.len() > budget {
                break 'words;
            }
            ids.push(p);
        }
    }
    ids.push(vocab.sep_id);
    ids
}

/// Lowercase, strip accents, drop control characters, split on whitespace and
/// punctuation (each punctuation character is its own word).
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let normalized: String = text
        .to_lowercase()
        .nfd()
        .filter(|&c| !is_combining_mark(c))
        .collect();
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in normalized.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if ch == '\0' || ch == '\u{fffd}' || ch.is_control() {
            continue;
        } else if is_punctuation(ch) {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Greedy longest-match-first segmentation of one word.
fn wordpiece(word: &str, vocab: &Vocab, out: &mut Vec<u32>) {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        out.push(vocab.unk_id);
        return;
    }
    let start_len = out.len();
    let mut start = 0;
    let mut candidate = String::with_capacity(word.len() + CONTINUATION.len());
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION);
            }
            candidate.extend(&chars[start..end]);
            if let Some(id) = vocab.id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => {
                out.push(id);
                start = end;
            }
            None => {
                out.truncate(start_len);
                out.push(vocab.unk_id);
                return;
            }
        }
    }
}

fn is_punctuation(ch: char) -> bool {
    if ch.is_ascii() {
        return ch.is_ascii_punctuation();
    }
    matches!(ch,
        '\u{00a1}'..='\u{00bf}' | '\u{00d7}' | '\u{00f7}'
        | '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205e}'
        | '\u{3001}'..='\u{3003}' | '\u{3008}'..='\u{3011}'
        | '\u{ff01}'..='\u{ff0f}' | '\u{ff1a}'..='\u{ff20}')
}
