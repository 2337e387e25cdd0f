//! Whitespace tokenizer with a fixed special-token registry and a reserved
//! pseudo-visual id range. Vocabulary layout (fixed, documented):
//! specials first, then `visual_vocab` pseudo-visual ids, then corpus words.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("visual token {0} outside reserved range of {1}")]
    VisualOutOfRange(u32, usize),
    #[error("token id {0} outside vocabulary of {1}")]
    IdOutOfRange(u32, usize),
}

pub const UNK: u32 = 0;
pub const IM_START: u32 = 1;
pub const IM_END: u32 = 2;
pub const ROLE_SYSTEM: u32 = 3;
pub const ROLE_USER: u32 = 4;
pub const ROLE_ASSISTANT: u32 = 5;
pub const HISTORY_START: u32 = 6;
pub const HISTORY_END: u32 = 7;
pub const VISION_BOS: u32 = 8;
pub const VISION_EOS: u32 = 9;
pub const QUERY_START: u32 = 10;
pub const QUERY_END: u32 = 11;
pub const FLAG: u32 = 12;
pub const SILENCE: u32 = 13;

pub const NUM_SPECIALS: usize = 14;

pub const SILENCE_TEXT: &str = "...";

const SPECIAL_STRS: [&str; NUM_SPECIALS] = [
    "<|unk|>",
    "<|im_start|>",
    "<|im_end|>",
    "<|system|>",
    "<|user|>",
    "<|assistant|>",
    "<|history_start|>",
    "<|history_end|>",
    "<|vision_bos|>",
    "<|vision_eos|>",
    "<|query_start|>",
    "<|query_end|>",
    "<|FLAG|>",
    SILENCE_TEXT,
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    visual_vocab: usize,
    words: Vec<String>,
    #[serde(skip)]
    word_ids: HashMap<String, u32>,
}

impl Tokenizer {
    /// Build from a corpus word list; duplicates are collapsed, order kept.
    pub fn from_words<I, S>(visual_vocab: usize, corpus_words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words = Vec::new();
        let mut seen = HashMap::new();
        for w in corpus_words {
            let w = w.as_ref();
            if w.is_empty() || SPECIAL_STRS.contains(&w) {
                continue;
            }
            if !seen.contains_key(w) {
                seen.insert(w.to_string(), ());
                words.push(w.to_string());
            }
        }
        let mut t = Self {
            visual_vocab,
            words,
            word_ids: HashMap::new(),
        };
        t.rebuild_index();
        t
    }

    /// Re-derive the word index after deserialization.
    pub fn rebuild_index(&mut self) {
        let base = (NUM_SPECIALS + self.visual_vocab) as u32;
        self.word_ids = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), base + i as u32))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        NUM_SPECIALS + self.visual_vocab + self.words.len()
    }

    pub fn visual_vocab(&self) -> usize {
        self.visual_vocab
    }

    /// Map a raw pseudo-visual index into the reserved id range.
    pub fn visual_id(&self, v: u32) -> Result<u32, TokenizerError> {
        if (v as usize) < self.visual_vocab {
            Ok(NUM_SPECIALS as u32 + v)
        } else {
            Err(TokenizerError::VisualOutOfRange(v, self.visual_vocab))
        }
    }

    pub fn is_visual(&self, id: u32) -> bool {
        (id as usize) >= NUM_SPECIALS && (id as usize) < NUM_SPECIALS + self.visual_vocab
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| {
                if w == SILENCE_TEXT {
                    SILENCE
                } else {
                    self.word_ids.get(w).copied().unwrap_or(UNK)
                }
            })
            .collect()
    }

    pub fn token_str(&self, id: u32) -> Result<&str, TokenizerError> {
        let i = id as usize;
        if i < NUM_SPECIALS {
            return Ok(SPECIAL_STRS[i]);
        }
        if i < NUM_SPECIALS + self.visual_vocab {
            // Pseudo-visual ids have no text form; render a stable marker.
            return Ok("<|vid|>");
        }
        self.words
            .get(i - NUM_SPECIALS - self.visual_vocab)
            .map(|s| s.as_str())
            .ok_or(TokenizerError::IdOutOfRange(id, self.vocab_size()))
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let parts: Result<Vec<&str>, _> = ids.iter().map(|&id| self.token_str(id)).collect();
        Ok(parts?.join(" "))
    }
}
