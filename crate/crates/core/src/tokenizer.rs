//! Deterministic character-level tokenizer for the arithmetic corpus.
//!
//! Digits are tokenized one character at a time, so multi-digit arithmetic
//! still requires multi-token reasoning. The four reserved entries come
//! first and are never produced by encoding plain text.

use crate::error::{Error, Result};
use crate::reasoning::SpecialTokens;
use std::collections::HashMap;

pub const BOT: u32 = 0;
pub const LATENT: u32 = 1;
pub const EOT: u32 = 2;
pub const END_OF_ANSWER: u32 = 3;

pub const ANSWER_PROMPT: &str = "The answer is:";

const PUNCT: &str = " .?:*+-=<>";

#[derive(Debug, Clone)]
pub struct Tokenizer {
    chars: Vec<char>,
    ids: HashMap<char, u32>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut chars = Vec::new();
        chars.extend('0'..='9');
        chars.extend('a'..='z');
        chars.extend('A'..='Z');
        chars.extend(PUNCT.chars());
        let ids = chars
            .iter()
            .enumerate()
            .map(|(i, &ch)| (ch, (i + 4) as u32))
            .collect();
        Tokenizer { chars, ids }
    }

    /// Total vocabulary size, special tokens included.
    pub fn vocab_size(&self) -> usize {
        self.chars.len() + 4
    }

    pub fn specials(&self) -> SpecialTokens {
        SpecialTokens { bot: BOT, latent: LATENT, eot: EOT }
    }

    pub fn end_of_answer(&self) -> u32 {
        END_OF_ANSWER
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(text.len());
        for (offset, ch) in text.char_indices() {
            match self.ids.get(&ch) {
                Some(&id) => out.push(id),
                None => return Err(Error::UnknownChar { ch, offset }),
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| self.token_label(id)).collect()
    }

    /// Printable form of one token; used for decoding and for labeling
    /// exported matrices.
    pub fn token_label(&self, id: u32) -> String {
        match id {
            BOT => "<bot>".to_string(),
            LATENT => "<latent>".to_string(),
            EOT => "<eot>".to_string(),
            END_OF_ANSWER => "<eoa>".to_string(),
            other => match self.chars.get(other as usize - 4) {
                Some(&ch) => ch.to_string(),
                None => format!("<unk{other}>"),
            },
        }
    }

    /// The fixed answer prompt; its last id is the distillation anchor.
    pub fn answer_prompt_ids(&self) -> Vec<u32> {
        self.encode(ANSWER_PROMPT).expect("prompt is in-vocabulary")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_on_corpus_text() {
        let tok = Tokenizer::new();
        let text = "a=3. b=4. What is a*b?<<3*4=12>>The answer is:12";
        let ids = tok.encode(text).unwrap();
        assert_eq!(tok.decode(&ids), text);
    }

    #[test]
    fn plain_text_never_encodes_to_special_ids() {
        let tok = Tokenizer::new();
        let ids = tok.encode("abc 0129 <<>>=*+-").unwrap();
        assert!(ids.iter().all(|&id| id >= 4));
    }

    #[test]
    fn unknown_char_reports_offset() {
        let tok = Tokenizer::new();
        let err = tok.encode("ab#c").unwrap_err();
        match err {
            crate::error::Error::UnknownChar { ch, offset } => {
                assert_eq!(ch, '#');
                assert_eq!(offset, 2);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn answer_prompt_is_stable_with_colon_anchor() {
        let tok = Tokenizer::new();
        let ids = tok.answer_prompt_ids();
        assert_eq!(ids.len(), ANSWER_PROMPT.chars().count());
        assert_eq!(tok.token_label(*ids.last().unwrap()), ":");
        // byte-stable across constructions
        assert_eq!(ids, Tokenizer::new().answer_prompt_ids());
    }

    #[test]
    fn special_ids_are_distinct_and_reserved() {
        let tok = Tokenizer::new();
        tok.specials().validate().unwrap();
        assert_eq!(tok.decode(&[BOT, LATENT, EOT, END_OF_ANSWER]), "<bot><latent><eot><eoa>");
    }

    proptest! {
        #[test]
        fn encode_decode_identity(s in "[a-zA-Z0-9 .?:*+=<>-]{0,64}") {
            let tok = Tokenizer::new();
            let ids = tok.encode(&s).unwrap();
            prop_assert_eq!(tok.decode(&ids), s);
        }
    }
}
