//! Closed 64-word vocabulary and tokenizer.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::WorldError;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const BOT: u32 = 3;
pub const EOT: u32 = 4;
pub const BOI: u32 = 5;
pub const EOI: u32 = 6;
pub const QRY: u32 = 7;
pub const NUM_SPECIAL: usize = 8;

pub const VOCAB: [&str; 64] = [
    "<pad>", "<bos>", "<eos>", "<bot>", "<eot>", "<boi>", "<eoi>", "<qry>",
    // colors and their synonyms
    "red", "green", "blue", "yellow", "scarlet", "crimson", "emerald", "lime", "azure", "navy",
    "golden", "amber",
    // shapes and their synonyms
    "circle", "square", "triangle", "disc", "ring", "box", "block", "wedge", "pyramid",
    // positions
    "top", "bottom", "left", "right", "center", "upper", "lower", "middle",
    // grammar
    "a", "the", "in", "at", "on", "and", "there", "is", "image", "shows", "holds", "one", "sits",
    "nothing", "empty", "canvas", "picture", "contains",
    // edit verbs
    "recolor", "paint", "move", "shift", "add", "place", "remove", "delete", "to",
];

pub const VOCAB_SIZE: usize = VOCAB.len();

fn index() -> &'static HashMap<&'static str, u32> {
    static IDX: OnceLock<HashMap<&'static str, u32>> = OnceLock::new();
    IDX.get_or_init(|| VOCAB.iter().enumerate().map(|(i, w)| (*w, i as u32)).collect())
}

pub fn word_id(word: &str) -> Result<u32, WorldError> {
    index().get(word).copied().ok_or_else(|| WorldError::UnknownWord(word.to_string()))
}

pub fn id_word(id: u32) -> Result<&'static str, WorldError> {
    VOCAB.get(id as usize).copied().ok_or(WorldError::UnknownId(id))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn from_words(words: &[&str]) -> Result<Self, WorldError> {
        words.iter().map(|w| word_id(w)).collect::<Result<Vec<_>, _>>().map(|ids| TokenSeq { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn words(&self) -> Result<Vec<&'static str>, WorldError> {
        self.ids.iter().map(|&i| id_word(i)).collect()
    }
}

/// Whitespace-separated words to ids; any word outside the vocabulary is an error.
pub fn tokenize(text: &str) -> Result<TokenSeq, WorldError> {
    let ids = text.split_whitespace().map(word_id).collect::<Result<Vec<_>, _>>()?;
    Ok(TokenSeq { ids })
}

pub fn detokenize(seq: &TokenSeq) -> Result<String, WorldError> {
    Ok(seq.words()?.join(" "))
}

/// One token per line, line number = id.
pub fn write_vocab_file(path: &Path) -> std::io::Result<()> {
    let mut s = VOCAB.join("\n");
    s.push('\n');
    std::fs::write(path, s)
}

pub fn read_vocab_file(path: &Path) -> Result<Vec<String>, WorldError> {
    let text = std::fs::read_to_string(path).map_err(|e| WorldError::Io(e.to_string()))?;
    let words: Vec<String> = text.lines().map(str::to_string).collect();
    if words.len() != VOCAB_SIZE || words.iter().zip(VOCAB.iter()).any(|(a, b)| a != b) {
        return Err(WorldError::InvalidArgument(format!(
            "vocabulary file {} does not match the built-in vocabulary",
            path.display()
        )));
    }
    Ok(words)
}
