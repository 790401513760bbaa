//! Word-level vocabulary and tokenizer.
//!
//! Captions are lower-cased and split into alphanumeric words and single
//! punctuation marks; each distinct token gets an id from the vocabulary
//! built over the training corpus. Ids 0 and 1 are reserved for padding and
//! unknown words, and the separator token closes every sequence.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const SEP_TOKEN: &str = "<sep>";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocab {
    /// Build from a corpus: reserved tokens, then the distinct corpus tokens
    /// in lexicographic order, then the separator on the last line.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = corpus
            .into_iter()
            .flat_map(split_tokens)
            .collect();
        words.sort();
        words.dedup();
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(words);
        tokens.push(SEP_TOKEN.to_string());
        Self::from_tokens(tokens).expect("constructed token list is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3
            || tokens[0] != PAD_TOKEN
            || tokens[1] != UNK_TOKEN
            || tokens.last().map(String::as_str) != Some(SEP_TOKEN)
        {
            return Err(Error::InvalidInput(
                "vocabulary must start with <pad>, <unk> and end with <sep>".into(),
            ));
        }
        let mut lookup = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if lookup.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens, lookup })
    }

    pub fn sep_id(&self) -> u32 {
        (self.tokens.len() - 1) as u32
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.tokens.join("\n") + "\n";
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = body.lines().map(str::to_string).collect();
        Self::from_tokens(tokens)
    }
}

/// Lower-case and split into words and single punctuation marks.
fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token ids for `text`: split words mapped through the vocabulary (unknown
/// words to `UNK`), truncated to leave room for the separator that is always
/// appended. Empty text is just the separator.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Vec<u32> {
    debug_assert!(max_len >= 1);
    let mut ids: Vec<u32> = split_tokens(text)
        .iter()
        .map(|t| vocab.id(t).unwrap_or(UNK_ID))
        .take(max_len - 1)
        .collect();
    ids.push(vocab.sep_id());
    ids
}

/// A batch of tokenized captions padded to a common width.
#[derive(Debug, Clone)]
pub struct TextBatch {
    /// `batch × max_len`, padded with `PAD_ID`.
    pub token_ids: Vec<Vec<u32>>,
    pub lengths: Vec<usize>,
    pub sep_positions: Vec<usize>,
    pub max_len: usize,
}

impl TextBatch {
    pub fn new(texts: &[&str], vocab: &Vocab, max_len: usize) -> Result<Self> {
        if max_len < 1 {
            return Err(Error::InvalidConfig("max text length must be at least 1".into()));
        }
        let mut token_ids = Vec::with_capacity(texts.len());
        let mut lengths = Vec::with_capacity(texts.len());
        let mut sep_positions = Vec::with_capacity(texts.len());
        for t in texts {
            let mut ids = tokenize(t, vocab, max_len);
            lengths.push(ids.len());
            sep_positions.push(ids.len() - 1);
            ids.resize(max_len, PAD_ID);
            token_ids.push(ids);
        }
        Ok(TextBatch { token_ids, lengths, sep_positions, max_len })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// The unpadded id sequence of sample `i`.
    pub fn sample(&self, i: usize) -> &[u32] {
        &self.token_ids[i][..self.lengths[i]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab() -> Vocab {
        Vocab::build(["a photo of a red circle and a blue square."])
    }

    #[test]
    fn caption_round_trip() {
        let v = toy_vocab();
        let ids = tokenize("A photo of a red circle.", &v, 16);
        let toks: Vec<&str> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, ["a", "photo", "of", "a", "red", "circle", ".", "<sep>"]);
    }

    #[test]
    fn empty_text_is_sep_only() {
        let v = toy_vocab();
        assert_eq!(tokenize("", &v, 16), vec![v.sep_id()]);
    }

    #[test]
    fn tokenize_idempotent_on_lowercase() {
        let v = toy_vocab();
        let raw = "a red circle and a blue square";
        assert_eq!(tokenize(raw, &v, 16), tokenize(&raw.to_lowercase(), &v, 16));
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = toy_vocab();
        let ids = tokenize("a zebra.", &v, 16);
        assert!(ids.contains(&UNK_ID));
    }

    #[test]
    fn truncation_preserves_sep_at_end() {
        let v = toy_vocab();
        let ids = tokenize("a photo of a red circle and a blue square.", &v, 4);
        assert_eq!(ids.len(), 4);
        assert_eq!(*ids.last().unwrap(), v.sep_id());
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = toy_vocab();
        let dir = std::env::temp_dir().join(format!("vocab_rt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        v.save(&path).unwrap();
        let v2 = Vocab::load(&path).unwrap();
        assert_eq!(v, v2);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn batch_invariants() {
        let v = toy_vocab();
        let b = TextBatch::new(&["a red circle.", ""], &v, 8).unwrap();
        for i in 0..b.len() {
            assert_eq!(b.token_ids[i][b.sep_positions[i]], v.sep_id());
            assert_eq!(b.sep_positions[i] + 1, b.lengths[i]);
            assert!(b.lengths[i] <= 8);
        }
    }
}
