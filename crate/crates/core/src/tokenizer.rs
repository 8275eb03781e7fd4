//! Word-level tokenizer with a byte fallback.
//!
//! Ids `0..3` are `<pad>`, `<bos>`, `<eos>`; the next 256 ids are byte tokens
//! `<0xNN>`; corpus words follow in first-seen order. Words missing from the
//! vocabulary encode as their UTF-8 bytes.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{bail, Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const BYTE_BASE: usize = 3;
pub const FIRST_WORD: usize = BYTE_BASE + 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

impl Tokenizer {
    fn with_reserved() -> Self {
        let mut tokens: Vec<String> = ["<pad>", "<bos>", "<eos>"].map(String::from).to_vec();
        tokens.extend((0..=255u8).map(byte_token));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Builds the vocabulary from one pass over `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tok = Self::with_reserved();
        for text in texts {
            for word in text.split_whitespace() {
                if !tok.index.contains_key(word) {
                    tok.index.insert(word.to_string(), tok.tokens.len());
                    tok.tokens.push(word.to_string());
                }
            }
        }
        tok
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            match self.index.get(word) {
                Some(&id) if id >= FIRST_WORD => out.push(id),
                _ => out.extend(word.bytes().map(|b| BYTE_BASE + usize::from(b))),
            }
        }
        out
    }

    /// Inverse of [`encode`](Self::encode) on whitespace-normalized text.
    /// Runs of byte tokens are reassembled into one word.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, words: &mut Vec<String>| -> Result<()> {
            if !bytes.is_empty() {
                let w = String::from_utf8(std::mem::take(bytes))
                    .map_err(|e| Error::Format(format!("byte tokens are not utf-8: {e}")))?;
                words.push(w);
            }
            Ok(())
        };
        for &id in ids {
            match id {
                PAD | BOS | EOS => flush(&mut bytes, &mut words)?,
                b if (BYTE_BASE..FIRST_WORD).contains(&b) => bytes.push((b - BYTE_BASE) as u8),
                w => {
                    flush(&mut bytes, &mut words)?;
                    match self.tokens.get(w) {
                        Some(t) => words.push(t.clone()),
                        None => bail!(Index, "token id {w} outside vocabulary"),
                    }
                }
            }
        }
        flush(&mut bytes, &mut words)?;
        Ok(words.join(" "))
    }

    /// Tab-separated `token\tid` lines sorted by id.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    pub fn from_table(table: &str) -> Result<Self> {
        let mut tok = Self::with_reserved();
        for (lineno, line) in table.lines().enumerate() {
            let Some((token, id)) = line.rsplit_once('\t') else {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: "expected token<TAB>id".into(),
                });
            };
            let id: usize = id.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("bad id {id:?}"),
            })?;
            if id != lineno {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("ids must be dense and sorted, found {id}"),
                });
            }
            if id < FIRST_WORD {
                if tok.tokens[id] != token {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        msg: format!("reserved id {id} must be {}", tok.tokens[id]),
                    });
                }
                continue;
            }
            tok.index.insert(token.to_string(), id);
            tok.tokens.push(token.to_string());
        }
        Ok(tok)
    }
}
