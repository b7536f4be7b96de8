//! Model inputs: tokenization, vocabulary, the
//! `[CLS] sentence [SEP] aspect [SEP]` layout, and the amplify matrix.

mod data;
mod input;
mod vocab;

pub use data::{load_jsonl, parse_jsonl, synth_dataset, to_jsonl, write_jsonl, Record, SynthLexicon};
pub use input::{build_amplify, cross_segment, decode, encode, EncodedInput};
pub use vocab::{build_vocab, Vocabulary, CLS_ID, PAD_ID, SEP_ID, UNK_ID};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Sentiment class. The discriminant is the class id used everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive = 0,
    Negative = 1,
    Neutral = 2,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];
    pub const COUNT: usize = 3;

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "positive" => Ok(Polarity::Positive),
            "negative" => Ok(Polarity::Negative),
            "neutral" => Ok(Polarity::Neutral),
            other => Err(Error::Data(format!("unknown polarity {other:?}"))),
        }
    }
}

/// Positional region of an encoded sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Segment {
    Cls = 0,
    Sent = 1,
    Sep1 = 2,
    Asp = 3,
    Sep2 = 4,
    Pad = 5,
}

impl Segment {
    pub const COUNT: usize = 6;

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Segment::Cls => "CLS",
            Segment::Sent => "SENT",
            Segment::Sep1 => "SEP1",
            Segment::Asp => "ASP",
            Segment::Sep2 => "SEP2",
            Segment::Pad => "PAD",
        }
    }
}

/// One sentence-aspect pair with its gold polarity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub sentence: Vec<String>,
    pub aspect: Vec<String>,
    pub label: Polarity,
}

impl Example {
    /// Tokenizes raw text; fails when the aspect has no tokens.
    pub fn from_text(text: &str, aspect: &str, label: Polarity) -> Result<Self, Error> {
        let aspect = tokenize(aspect);
        if aspect.is_empty() {
            return Err(Error::Data("aspect has no tokens".into()));
        }
        Ok(Example {
            sentence: tokenize(text),
            aspect,
            label,
        })
    }
}

/// Whitespace split, lowercase, and removal of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}
