//! Byte-level tokenizer: ids 0..4 are specials, byte `b` maps to `b + 4`.

use serde::{Deserialize, Serialize};

use crate::error::{GagError, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Placeholder marking the single injection slot in an answer template.
pub const ANCHOR: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;
pub const VOCAB_SIZE: usize = 256 + NUM_SPECIALS as usize;

/// Token ids together with helpers for text round trips.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn from_text(text: &str) -> Self {
        Self(tokenize(text))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_text(&self) -> Result<String> {
        detokenize(&self.0)
    }
}

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(|b| b as u32 + NUM_SPECIALS).collect()
}

/// Bytes of the non-special tokens, in order. Specials are dropped.
pub fn detokenize_bytes(ids: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id as usize >= VOCAB_SIZE {
            return Err(GagError::TokenRange { id, vocab: VOCAB_SIZE });
        }
        if id >= NUM_SPECIALS {
            out.push((id - NUM_SPECIALS) as u8);
        }
    }
    Ok(out)
}

/// Text of the non-special tokens; invalid UTF-8 is replaced, never dropped.
pub fn detokenize(ids: &[u32]) -> Result<String> {
    let bytes = detokenize_bytes(ids)?;
    Ok(match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
    })
}

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIALS
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn empty_round_trip() {
        assert!(tokenize("").is_empty());
        assert_eq!(detokenize(&[]).unwrap(), "");
    }

    #[test]
    fn bytes_are_offset_by_specials() {
        assert_eq!(tokenize("ab"), vec![97 + 4, 98 + 4]);
    }

    #[test]
    fn out_of_range_id_is_rejected() {
        assert!(matches!(
            detokenize(&[VOCAB_SIZE as u32]),
            Err(GagError::TokenRange { .. })
        ));
    }

    proptest! {
        #[test]
        fn utf8_round_trips(s in "\\PC*") {
            let ids = tokenize(&s);
            prop_assert!(ids.iter().all(|&i| (i as usize) < VOCAB_SIZE));
            prop_assert_eq!(detokenize(&ids).unwrap(), s.clone());
            prop_assert_eq!(tokenize(&detokenize(&ids).unwrap()), ids);
        }
    }
}
