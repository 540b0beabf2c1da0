use std::path::Path;

use crate::error::{Error, Result};

pub trait Tokenizer {
    fn vocab_size(&self) -> usize;
    fn eos(&self) -> u32;
    fn encode(&self, doc: &str) -> Vec<u32>;
}

/// Bytes 0..=255 plus an end-of-sequence id 256.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const EOS: u32 = 256;
}

impl Tokenizer for ByteTokenizer {
    fn vocab_size(&self) -> usize {
        257
    }

    fn eos(&self) -> u32 {
        Self::EOS
    }

    fn encode(&self, doc: &str) -> Vec<u32> {
        doc.bytes().map(u32::from).collect()
    }
}

/// Token stream of one source file, cut into fixed-size instances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedFile {
    pub id: usize,
    pub context: usize,
    pub tokens: Vec<u32>,
}

impl TokenizedFile {
    /// Whole instances; the trailing remainder is dropped.
    pub fn num_instances(&self) -> usize {
        self.tokens.len() / self.context
    }

    pub fn instance(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.context..(i + 1) * self.context]
    }
}

/// Concatenate every document followed by EOS.
pub fn tokenize_file<S: AsRef<str>>(id: usize, docs: &[S], tok: &dyn Tokenizer, context: usize) -> Result<TokenizedFile> {
    if context == 0 {
        return Err(Error::Data("context must be positive".into()));
    }
    let mut tokens = Vec::new();
    for d in docs {
        tokens.extend(tok.encode(d.as_ref()));
        tokens.push(tok.eos());
    }
    Ok(TokenizedFile { id, context, tokens })
}

/// Documents of a raw file: the `text` field of each line for `.jsonl`,
/// blank-line separated paragraphs otherwise.
pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        let mut docs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(line)?;
            let t = v
                .get("text")
                .and_then(|t| t.as_str())
                .ok_or_else(|| Error::Data(format!("{}:{}: no text field", path.display(), n + 1)))?;
            docs.push(t.to_string());
        }
        return Ok(docs);
    }
    let mut docs = Vec::new();
    let mut cur = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
        } else {
            if !cur.is_empty() {
                cur.push('\n');
            }
            cur.push_str(line);
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    Ok(docs)
}
