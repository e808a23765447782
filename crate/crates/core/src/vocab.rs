//! Closed query vocabulary: padding, colors, shapes and relation words.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Cyan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Cyan => "cyan",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [230, 210, 40],
            Color::Purple => [150, 60, 190],
            Color::Cyan => [40, 200, 210],
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fill used for attribute-free prior renderings.
pub const NEUTRAL_RGB: [u8; 3] = [210, 210, 210];
pub const BACKGROUND_RGB: [u8; 3] = [128, 128, 128];

pub const PAD: &str = "<pad>";

/// Words that may appear in relation phrases.
pub const RELATION_WORDS: [&str; 10] = [
    "leftmost",
    "rightmost",
    "top",
    "bottom",
    "middle",
    "second",
    "left",
    "right",
    "front",
    "behind",
];

/// Every token in id order. Id 0 is padding.
pub fn tokens() -> Vec<&'static str> {
    let mut v = vec![PAD];
    v.extend(Color::ALL.iter().map(|c| c.name()));
    v.extend(Shape::ALL.iter().map(|s| s.name()));
    v.extend(RELATION_WORDS);
    v
}

pub fn vocab_size() -> usize {
    1 + Color::ALL.len() + Shape::ALL.len() + RELATION_WORDS.len()
}

pub fn token_id(word: &str) -> Result<usize> {
    tokens()
        .iter()
        .position(|t| *t == word)
        .ok_or_else(|| LabError::UnknownToken(word.to_string()))
}

/// Maps words to ids and right-pads to `max_len` with the padding id.
pub fn encode(words: &[String], max_len: usize) -> Result<Vec<usize>> {
    if words.len() > max_len {
        return Err(LabError::Config(format!(
            "query of {} tokens exceeds max length {max_len}",
            words.len()
        )));
    }
    let mut ids = words
        .iter()
        .map(|w| token_id(w))
        .collect::<Result<Vec<_>>>()?;
    ids.resize(max_len, 0);
    Ok(ids)
}

pub fn is_relation_word(word: &str) -> bool {
    RELATION_WORDS.contains(&word)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_unique() {
        let t = tokens();
        assert_eq!(t.len(), vocab_size());
        for (i, w) in t.iter().enumerate() {
            assert_eq!(token_id(w).unwrap(), i);
        }
    }

    #[test]
    fn encode_pads_and_rejects_unknown() {
        let ids = encode(&["red".into(), "square".into()], 6).unwrap();
        assert_eq!(ids.len(), 6);
        assert_eq!(&ids[2..], &[0, 0, 0, 0]);
        assert!(matches!(
            encode(&["mauve".into()], 6),
            Err(LabError::UnknownToken(w)) if w == "mauve"
        ));
    }
}
