//! Preprocessing (tokenize, shuffle, shard) and the contiguous training
//! loader.

mod shard;
mod tokenize;

use std::path::Path;

pub use shard::{
    build_permutation, shard_instances, EpochIter, Manifest, ShardEntry, ShardRead, ShardSet, DEFAULT_SHARD_SIZE,
    MANIFEST_FILE, SHARD_HEADER_BYTES, SHARD_MAGIC, SHARD_VERSION,
};
pub use tokenize::{read_documents, tokenize_file, ByteTokenizer, TokenizedFile, Tokenizer};

use crate::error::{Error, Result};

/// Tokenize every regular file of `input` (sorted by name), shuffle and
/// shard into `out`.
pub fn preprocess_dir(input: &Path, context: usize, seed: u64, shard_size: usize, out: &Path) -> Result<Manifest> {
    if !input.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", input.display())));
    }
    let mut paths: Vec<_> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let tok = ByteTokenizer;
    let mut files = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        files.push(tokenize_file(i, &read_documents(p)?, &tok, context)?);
    }
    let total = files.iter().map(|f| f.num_instances()).sum();
    let perm = build_permutation(total, seed);
    shard_instances(&files, &perm, shard_size, seed, tok.vocab_size(), out)
}
