//! Character inventory, text cleaning and integer encoding.

use std::collections::HashMap;
use std::path::Path;

pub const PAD: &str = "<pad>";
pub const UNKNOWN: &str = "<unk>";
const PUNCTUATION: &str = ".,!?'-;:";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TextError {
    #[error("text is empty after normalization")]
    Empty,
    #[error("id {0} outside the {1}-symbol charset")]
    UnknownId(usize, usize),
    #[error("charset file: {0}")]
    Charset(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Charset {
    symbols: Vec<String>,
    index: HashMap<char, usize>,
}

impl Default for Charset {
    fn default() -> Self {
        let mut symbols = vec![PAD.to_string(), UNKNOWN.to_string()];
        symbols.extend(('a'..='z').map(String::from));
        symbols.extend(('0'..='9').map(String::from));
        symbols.push(" ".to_string());
        symbols.extend(PUNCTUATION.chars().map(String::from));
        Self::from_symbols(symbols).expect("builtin charset")
    }
}

impl Charset {
    /// The first two symbols must be the pad and unknown markers; every other
    /// symbol is a single character.
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self, TextError> {
        if symbols.len() < 3 || symbols[0] != PAD || symbols[1] != UNKNOWN {
            return Err(TextError::Charset(format!("must start with {PAD} and {UNKNOWN}")));
        }
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate().skip(2) {
            let mut chars = s.chars();
            let (Some(c), None) = (chars.next(), chars.next()) else {
                return Err(TextError::Charset(format!("symbol {s:?} is not one character")));
            };
            if index.insert(c, i).is_some() {
                return Err(TextError::Charset(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unknown_id(&self) -> usize {
        1
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// One symbol per line. The space symbol is written as-is, so lines are
    /// not trimmed on load.
    pub fn dump(&self) -> String {
        let mut out = self.symbols.join("\n");
        out.push('\n');
        out
    }

    pub fn parse(text: &str) -> Result<Self, TextError> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        Self::from_symbols(body.split('\n').map(String::from).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.dump())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextError> {
        let text = std::fs::read_to_string(path).map_err(|e| TextError::Charset(e.to_string()))?;
        Self::parse(&text)
    }

    /// Lowercase, drop characters outside the charset, collapse whitespace
    /// runs to one space and trim.
    pub fn normalize(&self, s: &str) -> Result<String, TextError> {
        let mut out = String::with_capacity(s.len());
        let mut pending_space = false;
        for c in s.chars().flat_map(char::to_lowercase) {
            if c.is_whitespace() {
                pending_space = !out.is_empty();
                continue;
            }
            if !self.contains(c) {
                continue;
            }
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
        if out.is_empty() {
            Err(TextError::Empty)
        } else {
            Ok(out)
        }
    }

    pub fn encode(&self, s: &str) -> Result<EncodedText, TextError> {
        let ids: Vec<usize> = s.chars().map(|c| self.id(c).unwrap_or(self.unknown_id())).collect();
        if ids.is_empty() {
            return Err(TextError::Empty);
        }
        Ok(EncodedText {
            ids,
            original: s.to_string(),
        })
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String, TextError> {
        ids.iter()
            .map(|&i| match i {
                0 => Ok(""),
                1 => Ok("?"),
                _ => self
                    .symbols
                    .get(i)
                    .map(String::as_str)
                    .ok_or(TextError::UnknownId(i, self.len())),
            })
            .collect()
    }
}

pub fn normalize_text(s: &str) -> Result<String, TextError> {
    Charset::default().normalize(s)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedText {
    pub ids: Vec<usize>,
    pub original: String,
}

impl EncodedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
