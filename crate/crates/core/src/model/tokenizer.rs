//! Character-level tokenizer over printable ASCII plus newline and padding.
//!
//! Id layout: 0 = padding (`'\0'`), 1..=95 = `' '..='~'`, 96 = `'\n'`.
//! The map is bijective, so `decode(encode(s)) == s` for any string over
//! the alphabet.

use crate::error::{CoreError, Result};

pub const PAD_CHAR: char = '\0';
const VOCAB_SIZE: usize = 97;
const NEWLINE_ID: u32 = 96;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn new() -> Self {
        Self
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode_char(&self, c: char) -> Result<u32> {
        match c {
            PAD_CHAR => Ok(0),
            ' '..='~' => Ok(c as u32 - 0x20 + 1),
            '\n' => Ok(NEWLINE_ID),
            other => Err(CoreError::UnknownChar(other)),
        }
    }

    pub fn decode_id(&self, id: u32) -> Result<char> {
        match id {
            0 => Ok(PAD_CHAR),
            1..=95 => Ok(char::from_u32(id + 0x20 - 1).expect("printable ascii")),
            NEWLINE_ID => Ok('\n'),
            other => Err(CoreError::UnknownTokenId { id: other, vocab: VOCAB_SIZE }),
        }
    }

    pub fn encode(&self, s: &str) -> Result<Vec<u32>> {
        s.chars().map(|c| self.encode_char(c)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        ids.iter().map(|&id| self.decode_id(id)).collect()
    }
}
