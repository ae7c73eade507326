//! Sub-word vocabulary with greedy longest-match tokenization.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const UNK: usize = 1;

pub const BLANK_PIECE: &str = "<blank>";
pub const UNK_PIECE: &str = "<unk>";

/// Ordered list of pieces; a piece's position is its id. Ids 0 and 1 are
/// reserved for blank and unknown and never match text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
    longest: usize,
}

impl Vocabulary {
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        if pieces.len() < 2 {
            return Err(Error::Config("vocabulary needs the two reserved pieces".into()));
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (id, p) in pieces.iter().enumerate() {
            if p.is_empty() || p.contains('\n') {
                return Err(Error::Config(format!("invalid piece {p:?} at id {id}")));
            }
            if index.insert(p.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate piece {p:?}")));
            }
        }
        let longest = pieces[2..].iter().map(|p| p.chars().count()).max().unwrap_or(1);
        Ok(Vocabulary {
            pieces,
            index,
            longest,
        })
    }

    /// Reserved pieces followed by `pieces`.
    pub fn with_reserved<I, S>(pieces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![BLANK_PIECE.to_string(), UNK_PIECE.to_string()];
        all.extend(pieces.into_iter().map(Into::into));
        Self::from_pieces(all)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    /// Greedy longest match, left to right. Characters no piece starts with
    /// become [`UNK`] one character at a time.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let start = chars[i].0;
            let max_len = self.longest.min(chars.len() - i);
            let hit = (1..=max_len).rev().find_map(|len| {
                let end = chars.get(i + len).map_or(text.len(), |c| c.0);
                match self.index.get(&text[start..end]) {
                    Some(&id) if id > UNK => Some((id, len)),
                    _ => None,
                }
            });
            match hit {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.push(UNK);
                    i += 1;
                }
            }
        }
        out
    }

    /// Concatenates piece strings. Blank contributes nothing.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != BLANK)
            .map(|&id| self.piece(id).unwrap_or(UNK_PIECE))
            .collect()
    }

    /// One piece per line, UTF-8, line index = id.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = self.pieces.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let body = text.strip_suffix('\n').unwrap_or(&text);
        Self::from_pieces(body.split('\n').map(str::to_string).collect())
    }
}
