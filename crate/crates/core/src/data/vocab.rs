use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CalmError, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const UNK: u32 = 2;
/// Number of reserved ids at the start of every vocabulary.
pub const RESERVED: u32 = 3;

const HEADER: [&str; 3] = ["<pad>", "<mask>", "<unk>"];

/// Character-level symbol table with three reserved ids.
///
/// Ordinary symbols are assigned ids `3..` in ascending code-point order, so
/// the same set of texts always produces the same table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

impl Vocabulary {
    pub fn from_symbols(symbols: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = symbols.into_iter().collect();
        Self { symbols: set.into_iter().collect() }
    }

    /// Vocabulary covering every character of every text.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_symbols(texts.into_iter().flat_map(str::chars))
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.symbols.len() + RESERVED as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, c: char) -> u32 {
        match self.symbols.binary_search(&c) {
            Ok(i) => i as u32 + RESERVED,
            Err(_) => UNK,
        }
    }

    pub fn symbol(&self, id: u32) -> Option<char> {
        id.checked_sub(RESERVED).and_then(|i| self.symbols.get(i as usize).copied())
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.chars().map(|c| self.id_of(c)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| match id {
                PAD => '\u{2400}',
                MASK => '\u{2588}',
                _ => self.symbol(id).unwrap_or('\u{fffd}'),
            })
            .collect()
    }

    /// One symbol per line after the reserved-token header; whitespace and
    /// backslashes are escaped so every line is visible and unambiguous.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for h in HEADER {
            out.push_str(h);
            out.push('\n');
        }
        for &c in &self.symbols {
            match c {
                '\\' => out.push_str("\\\\"),
                '\n' => out.push_str("\\n"),
                '\t' => out.push_str("\\t"),
                '\r' => out.push_str("\\r"),
                ' ' => out.push_str("\\s"),
                c if c.is_control() => {
                    let _ = write!(out, "\\u{:04x}", c as u32);
                }
                c => out.push(c),
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        for expected in HEADER {
            let got = lines.next();
            if got != Some(expected) {
                return Err(CalmError::format("vocabulary", format!("expected header `{expected}`, got {got:?}")));
            }
        }
        let mut symbols = Vec::new();
        for line in lines {
            let c = match line {
                "\\\\" => '\\',
                "\\n" => '\n',
                "\\t" => '\t',
                "\\r" => '\r',
                "\\s" => ' ',
                l if l.starts_with("\\u") => u32::from_str_radix(&l[2..], 16)
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| CalmError::format("vocabulary", format!("bad escape `{l}`")))?,
                l => {
                    let mut chars = l.chars();
                    match (chars.next(), chars.next()) {
                        (Some(c), None) => c,
                        _ => return Err(CalmError::format("vocabulary", format!("line `{l}` is not one symbol"))),
                    }
                }
            };
            symbols.push(c);
        }
        if symbols.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CalmError::format("vocabulary", "symbols must be strictly ascending"));
        }
        Ok(Self { symbols })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| CalmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CalmError::io(path, e))?;
        Self::from_text(&text)
    }
}
