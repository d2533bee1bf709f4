//! Fixed-width ternary words for quantized readings.
//!
//! A reading in `[0, 200]` is written as its five-digit base-3 expansion,
//! most-significant digit first, with digits `0, 1, 2` spelled `L, M, H`.
//! A missing reading is the sentinel `OOOOO`. Five ternary digits cover
//! `[0, 242]`; decoded values above 200 are legal words but fall outside the
//! quantization range and are reported as such.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest quantized value.
pub const MAX_LEVEL: u8 = 200;
/// Largest value a five-digit ternary word can carry (3^5 - 1).
pub const MAX_WORD_VALUE: u8 = 242;
pub const WORD_LEN: usize = 5;
pub const MISSING_WORD: &str = "OOOOO";

const DIGITS: [u8; 3] = *b"LMH";

/// One quantized reading, or the absence of one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Reading {
    Missing,
    Value(u8),
}

impl Reading {
    pub fn value(self) -> Option<u8> {
        match self {
            Reading::Value(v) => Some(v),
            Reading::Missing => None,
        }
    }

    /// True for values a quantizer can produce.
    pub fn in_model_range(self) -> bool {
        matches!(self, Reading::Value(v) if v <= MAX_LEVEL)
    }
}

impl From<u8> for Reading {
    fn from(v: u8) -> Self {
        Reading::Value(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("value {0} outside [0, 200]")]
    OutOfRange(u32),
    #[error("word {word:?}{}: expected {expected} characters, found {found}", at(*index))]
    Length {
        word: String,
        index: Option<usize>,
        expected: usize,
        found: usize,
    },
    #[error("word {word:?}{}: invalid character {ch:?} at position {position}", at(*index))]
    Character {
        word: String,
        index: Option<usize>,
        position: usize,
        ch: char,
    },
    #[error("word {word:?}{}: temperature half may not be missing", at(*index))]
    MissingTemperature { word: String, index: Option<usize> },
}

fn at(index: Option<usize>) -> String {
    index.map(|i| format!(" at token {i}")).unwrap_or_default()
}

impl CodecError {
    fn with_index(self, i: usize) -> Self {
        match self {
            CodecError::Length {
                word,
                expected,
                found,
                ..
            } => CodecError::Length {
                word,
                index: Some(i),
                expected,
                found,
            },
            CodecError::Character {
                word, position, ch, ..
            } => CodecError::Character {
                word,
                index: Some(i),
                position,
                ch,
            },
            CodecError::MissingTemperature { word, .. } => CodecError::MissingTemperature {
                word,
                index: Some(i),
            },
            other => other,
        }
    }

    /// Token index within a series, when the error came from one.
    pub fn index(&self) -> Option<usize> {
        match self {
            CodecError::Length { index, .. }
            | CodecError::Character { index, .. }
            | CodecError::MissingTemperature { index, .. } => *index,
            CodecError::OutOfRange(_) => None,
        }
    }
}

/// A validated five-character word over `{L, M, H}`, or the missing sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TernaryWord([u8; WORD_LEN]);

impl TernaryWord {
    pub const MISSING: TernaryWord = TernaryWord(*b"OOOOO");

    pub fn as_str(&self) -> &str {
        // Only ASCII bytes are ever stored.
        std::str::from_utf8(&self.0).expect("ascii word")
    }

    pub fn is_missing(&self) -> bool {
        *self == Self::MISSING
    }
}

impl fmt::Display for TernaryWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TernaryWord {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != WORD_LEN {
            return Err(CodecError::Length {
                word: s.to_string(),
                index: None,
                expected: WORD_LEN,
                found: chars.len(),
            });
        }
        if s == MISSING_WORD {
            return Ok(Self::MISSING);
        }
        let mut bytes = [0u8; WORD_LEN];
        for (position, (&ch, slot)) in chars.iter().zip(bytes.iter_mut()).enumerate() {
            match ch {
                'L' | 'M' | 'H' => *slot = ch as u8,
                _ => {
                    return Err(CodecError::Character {
                        word: s.to_string(),
                        index: None,
                        position,
                        ch,
                    })
                }
            }
        }
        Ok(TernaryWord(bytes))
    }
}

pub fn encode(reading: Reading) -> Result<TernaryWord, CodecError> {
    let mut v = match reading {
        Reading::Missing => return Ok(TernaryWord::MISSING),
        Reading::Value(v) if v > MAX_LEVEL => return Err(CodecError::OutOfRange(v as u32)),
        Reading::Value(v) => v,
    };
    let mut bytes = [DIGITS[0]; WORD_LEN];
    for slot in bytes.iter_mut().rev() {
        *slot = DIGITS[(v % 3) as usize];
        v /= 3;
    }
    Ok(TernaryWord(bytes))
}

/// Decodes a word. Values in `(200, 242]` decode successfully; callers
/// check [`Reading::in_model_range`].
pub fn decode(word: &TernaryWord) -> Reading {
    if word.is_missing() {
        return Reading::Missing;
    }
    let v = word.0.iter().fold(0u8, |acc, &b| {
        let digit = match b {
            b'L' => 0,
            b'M' => 1,
            _ => 2,
        };
        acc * 3 + digit
    });
    Reading::Value(v)
}

pub fn decode_str(word: &str) -> Result<Reading, CodecError> {
    Ok(decode(&word.parse()?))
}

/// Ten-character token: load word followed by temperature word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CombinedWord {
    pub load: TernaryWord,
    pub temperature: TernaryWord,
}

impl fmt::Display for CombinedWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.load, self.temperature)
    }
}

impl FromStr for CombinedWord {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let count = s.chars().count();
        if count != 2 * WORD_LEN || !s.is_ascii() {
            return Err(CodecError::Length {
                word: s.to_string(),
                index: None,
                expected: 2 * WORD_LEN,
                found: count,
            });
        }
        let (l, t) = s.split_at(WORD_LEN);
        let relabel = |e: CodecError, offset: usize| match e {
            CodecError::Character { position, ch, .. } => CodecError::Character {
                word: s.to_string(),
                index: None,
                position: position + offset,
                ch,
            },
            other => other,
        };
        let load: TernaryWord = l.parse().map_err(|e| relabel(e, 0))?;
        let temperature: TernaryWord = t.parse().map_err(|e| relabel(e, WORD_LEN))?;
        if temperature.is_missing() {
            return Err(CodecError::MissingTemperature {
                word: s.to_string(),
                index: None,
            });
        }
        Ok(CombinedWord { load, temperature })
    }
}

pub fn encode_combined(load: Reading, temperature: u8) -> Result<CombinedWord, CodecError> {
    Ok(CombinedWord {
        load: encode(load)?,
        temperature: encode(Reading::Value(temperature))?,
    })
}

pub fn split_combined(word: &str) -> Result<(Reading, Reading), CodecError> {
    let w: CombinedWord = word.parse()?;
    Ok((decode(&w.load), decode(&w.temperature)))
}

/// Space-separated words, one per reading.
pub fn encode_series(values: &[Reading]) -> Result<String, CodecError> {
    let words = values
        .iter()
        .map(|&v| encode(v).map(|w| w.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(words.join(" "))
}

pub fn decode_series(text: &str) -> Result<Vec<Reading>, CodecError> {
    text.split_whitespace()
        .enumerate()
        .map(|(i, tok)| decode_str(tok).map_err(|e| e.with_index(i)))
        .collect()
}

pub fn encode_combined_series(load: &[Reading], temperature: &[u8]) -> Result<String, CodecError> {
    let words = load
        .iter()
        .zip(temperature)
        .map(|(&l, &t)| encode_combined(l, t).map(|w| w.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(words.join(" "))
}

pub fn decode_combined_series(text: &str) -> Result<Vec<(Reading, Reading)>, CodecError> {
    text.split_whitespace()
        .enumerate()
        .map(|(i, tok)| split_combined(tok).map_err(|e| e.with_index(i)))
        .collect()
}
