use std::collections::HashMap;
use std::path::Path;

use crate::{Error, Result};

/// Maps text bytes to token ids.
///
/// `Bytes` is the identity over 256 ids. `Vocab` loads one token per line
/// from a file and encodes by greedy longest match. Lines may use the escapes
/// `\n`, `\t`, `\\` and `\xHH`.
#[derive(Debug, Clone, PartialEq)]
pub enum Tokenizer {
    Bytes,
    Vocab {
        pieces: Vec<Vec<u8>>,
        lookup: HashMap<Vec<u8>, usize>,
        max_len: usize,
    },
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::Bytes
    }
}

impl Tokenizer {
    pub fn from_vocab_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_vocab_lines(text.lines())
    }

    pub fn from_vocab_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut lookup = HashMap::new();
        for (n, line) in lines.into_iter().enumerate() {
            if line.is_empty() {
                continue;
            }
            let piece = unescape(line).map_err(|e| Error::Parse(format!("vocab line {}: {e}", n + 1)))?;
            if lookup.insert(piece.clone(), pieces.len()).is_some() {
                return Err(Error::Parse(format!("vocab line {}: duplicate token {line:?}", n + 1)));
            }
            pieces.push(piece);
        }
        if pieces.is_empty() {
            return Err(Error::Parse("vocab file has no tokens".into()));
        }
        let max_len = pieces.iter().map(Vec::len).max().unwrap_or(1);
        Ok(Tokenizer::Vocab {
            pieces,
            lookup,
            max_len,
        })
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Bytes => 256,
            Tokenizer::Vocab { pieces, .. } => pieces.len(),
        }
    }

    pub fn encode(&self, text: &[u8]) -> Result<Vec<usize>> {
        match self {
            Tokenizer::Bytes => Ok(text.iter().map(|&b| b as usize).collect()),
            Tokenizer::Vocab { lookup, max_len, .. } => {
                let mut out = Vec::new();
                let mut i = 0;
                while i < text.len() {
                    let longest = (1..=(*max_len).min(text.len() - i))
                        .rev()
                        .find_map(|l| lookup.get(&text[i..i + l]).map(|&id| (id, l)));
                    let (id, l) = longest.ok_or_else(|| {
                        Error::Data(format!("byte 0x{:02x} at offset {i} is not covered by the vocab", text[i]))
                    })?;
                    out.push(id);
                    i += l;
                }
                Ok(out)
            }
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let vocab = self.vocab_size();
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            match self {
                Tokenizer::Bytes => out.push(id as u8),
                Tokenizer::Vocab { pieces, .. } => out.extend_from_slice(&pieces[id]),
            }
        }
        Ok(out)
    }
}

fn unescape(line: &str) -> std::result::Result<Vec<u8>, String> {
    let bytes = line.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'\\' {
            out.push(bytes[i]);
            i += 1;
            continue;
        }
        match bytes.get(i + 1) {
            Some(b'n') => out.push(b'\n'),
            Some(b't') => out.push(b'\t'),
            Some(b'\\') => out.push(b'\\'),
            Some(b'x') => {
                let hex = line.get(i + 2..i + 4).ok_or("truncated \\x escape")?;
                out.push(u8::from_str_radix(hex, 16).map_err(|_| format!("bad hex escape \\x{hex}"))?);
                i += 2;
            }
            _ => return Err("dangling backslash".into()),
        }
        i += 2;
    }
    Ok(out)
}
