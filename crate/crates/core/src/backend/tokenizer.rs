//! Character-level tokenizer over an explicit alphabet.
//!
//! Token ids `0..alphabet_len` map one-to-one onto alphabet characters and
//! id `alphabet_len` is the end-of-text token, so the base vocabulary size
//! is `alphabet_len + 1`. Characters outside the alphabet are an explicit
//! error, never silently dropped, which keeps `detokenize(tokenize(t)) == t`
//! exact.

use std::collections::HashMap;

use super::{BackendError, TokenId};

/// Printable ASCII plus newline; covers the prompt template and every
/// built-in synthetic task family.
pub const DEFAULT_ALPHABET: &str = concat!(
    "\n !\"#$%&'()*+,-./0123456789:;<=>?",
    "@ABCDEFGHIJKLMNOPQRSTUVWXYZ[\\]^_",
    "`abcdefghijklmnopqrstuvwxyz{|}~"
);

#[derive(Debug, Clone)]
pub struct CharTokenizer {
    alphabet: Vec<char>,
    index: HashMap<char, TokenId>,
}

impl CharTokenizer {
    pub fn new(alphabet: &str) -> Result<Self, BackendError> {
        if alphabet.is_empty() {
            return Err(BackendError::Config("tokenizer alphabet is empty".into()));
        }
        let chars: Vec<char> = alphabet.chars().collect();
        let mut index = HashMap::new();
        for (i, &ch) in chars.iter().enumerate() {
            if index.insert(ch, i as TokenId).is_some() {
                return Err(BackendError::Config(format!(
                    "tokenizer alphabet repeats {ch:?}"
                )));
            }
        }
        Ok(CharTokenizer {
            alphabet: chars,
            index,
        })
    }

    /// Base vocabulary size: alphabet plus the end-of-text token.
    pub fn vocab_size(&self) -> usize {
        self.alphabet.len() + 1
    }

    pub fn eot_id(&self) -> TokenId {
        self.alphabet.len() as TokenId
    }

    pub fn alphabet(&self) -> String {
        self.alphabet.iter().collect()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        text.chars()
            .map(|ch| {
                self.index
                    .get(&ch)
                    .copied()
                    .ok_or(BackendError::UntokenizableChar(ch))
            })
            .collect()
    }

    /// Inverse of [`encode`]: character ids map back to their characters
    /// and the end-of-text token renders as the empty string. Ids at or
    /// beyond the base vocabulary have no text form.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, BackendError> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            if (id as usize) < self.alphabet.len() {
                out.push(self.alphabet[id as usize]);
            } else if id == self.eot_id() {
                // end-of-text renders as nothing
            } else {
                return Err(BackendError::NotText(id));
            }
        }
        Ok(out)
    }
}
