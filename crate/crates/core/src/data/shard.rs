use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::tokenize::TokenizedFile;
use crate::error::{Error, Result};

pub const SHARD_MAGIC: &[u8; 4] = b"OPTD";
pub const SHARD_VERSION: u32 = 1;
pub const SHARD_HEADER_BYTES: u64 = 20;
pub const DEFAULT_SHARD_SIZE: usize = 4096;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Seeded Fisher-Yates shuffle of `0..n`.
pub fn build_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub instances: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub context: usize,
    pub vocab_size: usize,
    pub shard_size: usize,
    pub total_instances: u64,
    pub shards: Vec<ShardEntry>,
}

/// Global instance ids number the instances file by file.
fn locate(files: &[TokenizedFile]) -> Vec<(usize, usize)> {
    files
        .iter()
        .enumerate()
        .flat_map(|(f, t)| (0..t.num_instances()).map(move |i| (f, i)))
        .collect()
}

fn shard_name(s: usize) -> String {
    format!("shard-{s:05}.bin")
}

fn write_shard(path: &Path, context: usize, rows: &[&[u32]]) -> Result<u32> {
    let io = |e: std::io::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut h = crc32fast::Hasher::new();
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut put = |b: &[u8], w: &mut BufWriter<File>| -> Result<()> {
        h.update(b);
        w.write_all(b).map_err(io)
    };
    put(SHARD_MAGIC, &mut w)?;
    put(&SHARD_VERSION.to_le_bytes(), &mut w)?;
    put(&(context as u32).to_le_bytes(), &mut w)?;
    put(&(rows.len() as u64).to_le_bytes(), &mut w)?;
    let mut buf = Vec::with_capacity(context * 4);
    for r in rows {
        buf.clear();
        for &t in *r {
            buf.extend_from_slice(&(t as i32).to_le_bytes());
        }
        put(&buf, &mut w)?;
    }
    let crc = h.finalize();
    w.write_all(&crc.to_le_bytes()).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(crc)
}

/// Write the instances of `files` in permutation order as shards of
/// `shard_size` instances plus a manifest.
pub fn shard_instances(
    files: &[TokenizedFile],
    perm: &[usize],
    shard_size: usize,
    seed: u64,
    vocab_size: usize,
    out: &Path,
) -> Result<Manifest> {
    let context = files.first().map_or(0, |f| f.context);
    if files.iter().any(|f| f.context != context) {
        return Err(Error::Data("files tokenized with different contexts".into()));
    }
    if shard_size == 0 {
        return Err(Error::Data("shard size must be positive".into()));
    }
    let loc = locate(files);
    if perm.len() != loc.len() {
        return Err(Error::Data(format!("permutation of {} for {} instances", perm.len(), loc.len())));
    }
    std::fs::create_dir_all(out)?;
    let mut shards = Vec::new();
    for (s, chunk) in perm.chunks(shard_size).enumerate() {
        let rows: Vec<&[u32]> = chunk
            .iter()
            .map(|&g| {
                let (f, i) = loc[g];
                files[f].instance(i)
            })
            .collect();
        let name = shard_name(s);
        let crc = write_shard(&out.join(&name), context, &rows)?;
        shards.push(ShardEntry {
            file: name,
            instances: rows.len() as u64,
            crc32: crc,
        });
    }
    let m = Manifest {
        version: SHARD_VERSION,
        seed,
        context,
        vocab_size,
        shard_size,
        total_instances: loc.len() as u64,
        shards,
    };
    std::fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)?)?;
    Ok(m)
}

/// One contiguous read: `instances` rows starting at row `first` of a shard.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShardRead {
    pub shard: usize,
    pub first: u64,
    pub instances: u64,
}

impl ShardRead {
    pub fn byte_offset(&self, context: usize) -> u64 {
        SHARD_HEADER_BYTES + self.first * context as u64 * 4
    }
}

/// A preprocessed dataset on disk. Shards are opened lazily on each read.
#[derive(Clone, Debug)]
pub struct ShardSet {
    pub dir: PathBuf,
    pub manifest: Manifest,
    starts: Vec<u64>,
}

impl ShardSet {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut starts = vec![0];
        for s in &manifest.shards {
            starts.push(starts.last().unwrap() + s.instances);
        }
        if *starts.last().unwrap() != manifest.total_instances {
            return Err(Error::Data("manifest shard counts do not sum to the total".into()));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            starts,
        })
    }

    pub fn context(&self) -> usize {
        self.manifest.context
    }

    pub fn len(&self) -> u64 {
        self.manifest.total_instances
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Check every shard's header and checksum.
    pub fn verify(&self) -> Result<()> {
        for (s, e) in self.manifest.shards.iter().enumerate() {
            let path = self.dir.join(&e.file);
            let bytes = std::fs::read(&path).map_err(|err| Error::Data(format!("shard {s}: {err}")))?;
            if bytes.len() < SHARD_HEADER_BYTES as usize + 4 || &bytes[..4] != SHARD_MAGIC {
                return Err(Error::Data(format!("shard {s}: bad header")));
            }
            let (body, foot) = bytes.split_at(bytes.len() - 4);
            let crc = crc32fast::hash(body);
            if crc != u32::from_le_bytes(foot.try_into().unwrap()) || crc != e.crc32 {
                return Err(Error::Data(format!("shard {s}: checksum mismatch")));
            }
            let count = u64::from_le_bytes(body[12..20].try_into().unwrap());
            let expect = SHARD_HEADER_BYTES as usize + count as usize * self.context() * 4;
            if count != e.instances || body.len() != expect {
                return Err(Error::Data(format!("shard {s}: size mismatch")));
            }
        }
        Ok(())
    }

    /// Contiguous per-shard reads covering permuted instances
    /// `start..start + count`.
    pub fn plan_reads(&self, start: u64, count: u64) -> Result<Vec<ShardRead>> {
        if start + count > self.len() {
            return Err(Error::Data(format!("instances {start}..{} past {}", start + count, self.len())));
        }
        let mut out = Vec::new();
        let mut at = start;
        let end = start + count;
        while at < end {
            let s = self.starts.partition_point(|&b| b <= at) - 1;
            let stop = end.min(self.starts[s + 1]);
            out.push(ShardRead {
                shard: s,
                first: at - self.starts[s],
                instances: stop - at,
            });
            at = stop;
        }
        Ok(out)
    }

    /// Tokens of permuted instances `start..start + count`, row-major.
    pub fn read(&self, start: u64, count: u64) -> Result<Vec<u32>> {
        let c = self.context();
        let mut tokens = Vec::with_capacity(count as usize * c);
        for r in self.plan_reads(start, count)? {
            let path = self.dir.join(&self.manifest.shards[r.shard].file);
            let io = |e: std::io::Error| Error::Data(format!("shard {}: {e}", r.shard));
            let mut f = File::open(&path).map_err(io)?;
            f.seek(SeekFrom::Start(r.byte_offset(c))).map_err(io)?;
            let mut buf = vec![0u8; r.instances as usize * c * 4];
            f.read_exact(&mut buf).map_err(io)?;
            tokens.extend(buf.chunks_exact(4).map(|b| i32::from_le_bytes(b.try_into().unwrap()) as u32));
        }
        Ok(tokens)
    }

    /// Rank `dp_rank`'s batches for one epoch; a trailing partial global
    /// batch is dropped.
    pub fn iterate_epoch(&self, dp_rank: usize, dp: usize, global_batch: usize) -> Result<EpochIter<'_>> {
        if dp == 0 || global_batch == 0 || !global_batch.is_multiple_of(dp) || dp_rank >= dp {
            return Err(Error::Data(format!(
                "global batch {global_batch} not divisible over {dp} data ranks (rank {dp_rank})"
            )));
        }
        Ok(EpochIter {
            set: self,
            dp_rank,
            dp,
            global_batch,
            step: 0,
            steps: self.len() / global_batch as u64,
        })
    }
}

pub struct EpochIter<'a> {
    set: &'a ShardSet,
    dp_rank: usize,
    dp: usize,
    global_batch: usize,
    step: u64,
    steps: u64,
}

impl EpochIter<'_> {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// First permuted instance and count for step `k`.
    pub fn slice(&self, k: u64) -> (u64, u64) {
        let local = (self.global_batch / self.dp) as u64;
        (k * self.global_batch as u64 + self.dp_rank as u64 * local, local)
    }
}

impl Iterator for EpochIter<'_> {
    type Item = Result<Vec<u32>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.step >= self.steps {
            return None;
        }
        let (start, n) = self.slice(self.step);
        self.step += 1;
        Some(self.set.read(start, n))
    }
}
