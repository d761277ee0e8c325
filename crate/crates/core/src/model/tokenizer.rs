//! Closed word-level vocabulary.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];
const DETACHED: [char; 3] = ['?', ',', '.'];

/// Lowercases and splits on whitespace; `?`, `,` and `.` become their own
/// tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let mut rest = word;
        let mut tail = Vec::new();
        while let Some(c) = rest.chars().last().filter(|c| DETACHED.contains(c)) {
            tail.push(c.to_string());
            rest = &rest[..rest.len() - c.len_utf8()];
        }
        if !rest.is_empty() {
            out.push(rest.to_string());
        }
        out.extend(tail.into_iter().rev());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Tokenizer {
    /// Specials first, then the sorted words of `texts`, then `extra`
    /// tokens in the given order.
    pub fn build<S: AsRef<str>>(texts: &[S], extra: &[String]) -> Result<Self> {
        let words: BTreeSet<String> = texts.iter().flat_map(|t| split_words(t.as_ref())).collect();
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .chain(extra.iter().cloned())
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("invalid token {t:?}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Vocab(format!("special token {s} must have id {i}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids.get(token).copied().ok_or_else(|| Error::Vocab(format!("unknown token {token:?}")))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocab(format!("unknown id {id}")))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Joins tokens with spaces, attaching detached punctuation to the
    /// preceding word. Specials are skipped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if id < SPECIALS.len() {
                continue;
            }
            let t = self.token(id)?;
            let punct = t.len() == 1 && t.chars().all(|c| DETACHED.contains(&c));
            if !out.is_empty() && !punct {
                out.push(' ');
            }
            out.push_str(t);
        }
        Ok(out)
    }

    /// One `token\tid` line per entry.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text: String = self.tokens.iter().enumerate().map(|(i, t)| format!("{t}\t{i}\n")).collect();
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Vocab(format!("line {}: expected token<TAB>id", n + 1)))?;
            let id: usize = id.parse().map_err(|_| Error::Vocab(format!("line {}: bad id", n + 1)))?;
            if id != tokens.len() {
                return Err(Error::Vocab(format!("line {}: ids must be consecutive", n + 1)));
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation() {
        assert_eq!(split_words("Does this ECG show AV block?"), ["does", "this", "ecg", "show", "av", "block", "?"]);
        assert_eq!(split_words("drift, or noise?"), ["drift", ",", "or", "noise", "?"]);
        assert_eq!(split_words("question: x answer:"), ["question:", "x", "answer:"]);
    }

    #[test]
    fn round_trip_and_errors() {
        let tok = Tokenizer::build(&["Does this ECG show drift?", "yes no"], &["<c>".to_string()]).unwrap();
        assert_eq!(tok.id("<eos>").unwrap(), EOS);
        let ids = tok.encode("does this ecg show drift?").unwrap();
        assert_eq!(tok.decode(&ids).unwrap(), "does this ecg show drift?");
        assert_eq!(tok.encode(&tok.decode(&ids).unwrap()).unwrap(), ids);
        assert!(tok.encode("maybe").is_err());
        assert!(Tokenizer::build(&["a"], &["a".to_string()]).is_err());
    }
}
