use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use half::bf16;
use serde::{Deserialize, Serialize};

use crate::comm::{Axis, Coords, Rank, Topology};
use crate::error::{Error, Result};
use crate::model::LocalModel;
use crate::optim::{OptimizerMode, ShardedOptimizer, SliceState};
use crate::tensor::Tensor;

pub const SLOT_DIRS: [&str; 2] = ["ckpt-1", "ckpt-2"];
pub const PERSISTENT_DIR: &str = "persistent";
pub const VALID_MARKER: &str = "VALID";
pub const CKPT_MANIFEST: &str = "manifest.json";
pub const CKPT_MAGIC: &[u8; 4] = b"OPTD";
pub const CKPT_VERSION: u32 = 1;
const HEADER_BYTES: u64 = 20;
const FOOTER_BYTES: u64 = 4;

/// Bytes per parameter element of each checkpoint kind.
pub const FULL_RECORD_BYTES: u64 = 16;
pub const MODEL_RECORD_BYTES: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// bf16 weights and grads, fp32 master, exp_avg and exp_avg_sq.
    Full,
    /// bf16 weights.
    ModelOnly,
}

impl CheckpointKind {
    fn dtype_tag(self) -> u32 {
        match self {
            Self::Full => 2,
            Self::ModelOnly => 1,
        }
    }

    pub fn record_bytes(self) -> u64 {
        match self {
            Self::Full => FULL_RECORD_BYTES,
            Self::ModelOnly => MODEL_RECORD_BYTES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub id: usize,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub index: usize,
    pub file: String,
    pub tp: usize,
    pub ep: usize,
    pub pp: usize,
    pub writer_dp: usize,
    pub params: Vec<ParamShape>,
    pub elements: u64,
    pub bytes: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: CheckpointKind,
    pub step: u64,
    pub timestamp: u64,
    /// Optimizer updates applied; zero for model-only images.
    pub optimizer_t: u64,
    pub mode: Option<OptimizerMode>,
    pub topology: Topology,
    pub shards: Vec<ShardManifest>,
}

impl CheckpointManifest {
    pub fn shard_bytes(&self) -> u64 {
        self.shards.iter().map(|s| s.bytes).sum()
    }
}

/// Model-parallel shard held by `c`: one per (tp, ep, pp) coordinate.
pub fn model_shard_index(topo: &Topology, c: &Coords) -> usize {
    (c.pp * topo.ep + c.ep) * topo.tp + c.tp
}

pub fn num_model_shards(topo: &Topology) -> usize {
    topo.tp * topo.ep * topo.pp
}

/// Data-parallel index that writes model shard `m`.
pub fn scattered_writer(m: usize, dp: usize) -> usize {
    m % dp
}

/// Shard-to-writer map for `m` shards over `dp` data-parallel ranks.
pub fn scattered_assignment(m: usize, dp: usize) -> Vec<usize> {
    (0..m).map(|s| scattered_writer(s, dp)).collect()
}

fn shard_file(m: usize) -> String {
    format!("shard-{m}.bin")
}

fn shard_coords(topo: &Topology, m: usize) -> (usize, usize, usize) {
    (m % topo.tp, (m / topo.tp) % topo.ep, m / (topo.tp * topo.ep))
}

fn put_bf16(out: &mut Vec<u8>, v: &[f32]) {
    for &x in v {
        out.extend_from_slice(&bf16::from_f32(x).to_bits().to_le_bytes());
    }
}

fn put_f32(out: &mut Vec<u8>, v: &[f32]) {
    for &x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Contents of one model shard.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardImage {
    pub weights: Vec<Vec<f32>>,
    pub grads: Vec<Vec<f32>>,
    pub states: Vec<SliceState>,
}

fn encode(kind: CheckpointKind, img: &ShardImage) -> Vec<u8> {
    let elements: usize = img.weights.iter().map(Vec::len).sum();
    let mut b = Vec::with_capacity(HEADER_BYTES as usize + elements * kind.record_bytes() as usize + 4);
    b.extend_from_slice(CKPT_MAGIC);
    b.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    b.extend_from_slice(&kind.dtype_tag().to_le_bytes());
    b.extend_from_slice(&(elements as u64).to_le_bytes());
    img.weights.iter().for_each(|w| put_bf16(&mut b, w));
    if kind == CheckpointKind::Full {
        img.grads.iter().for_each(|g| put_bf16(&mut b, g));
        img.states.iter().for_each(|s| put_f32(&mut b, &s.master));
        img.states.iter().for_each(|s| put_f32(&mut b, &s.exp_avg));
        img.states.iter().for_each(|s| put_f32(&mut b, &s.exp_avg_sq));
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

fn decode(kind: CheckpointKind, bytes: &[u8], sizes: &[usize]) -> Result<ShardImage> {
    let elements: usize = sizes.iter().sum();
    let expect = HEADER_BYTES as usize + elements * kind.record_bytes() as usize + FOOTER_BYTES as usize;
    if bytes.len() != expect || &bytes[..4] != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!("shard of {} bytes, expected {expect}", bytes.len())));
    }
    let tag = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if tag != kind.dtype_tag() || u64::from_le_bytes(bytes[12..20].try_into().unwrap()) != elements as u64 {
        return Err(Error::Checkpoint("shard header does not match manifest".into()));
    }
    let mut at = HEADER_BYTES as usize;
    let mut bf = |n: usize| -> Vec<f32> {
        let v = bytes[at..at + 2 * n]
            .chunks_exact(2)
            .map(|c| bf16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
            .collect();
        at += 2 * n;
        v
    };
    let weights: Vec<Vec<f32>> = sizes.iter().map(|&n| bf(n)).collect();
    if kind == CheckpointKind::ModelOnly {
        return Ok(ShardImage {
            weights,
            grads: Vec::new(),
            states: Vec::new(),
        });
    }
    let grads: Vec<Vec<f32>> = sizes.iter().map(|&n| bf(n)).collect();
    let mut f = |n: usize| -> Vec<f32> {
        let v = bytes[at..at + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        at += 4 * n;
        v
    };
    let master: Vec<Vec<f32>> = sizes.iter().map(|&n| f(n)).collect();
    let m: Vec<Vec<f32>> = sizes.iter().map(|&n| f(n)).collect();
    let v: Vec<Vec<f32>> = sizes.iter().map(|&n| f(n)).collect();
    let states = master
        .into_iter()
        .zip(m)
        .zip(v)
        .map(|((master, exp_avg), exp_avg_sq)| SliceState {
            master,
            exp_avg,
            exp_avg_sq,
        })
        .collect();
    Ok(ShardImage { weights, grads, states })
}

/// Writes through `path`, stopping after `budget` bytes.
fn write_limited(path: &Path, bytes: &[u8], budget: Option<u64>) -> Result<bool> {
    let n = budget.map_or(bytes.len(), |b| (b as usize).min(bytes.len()));
    let mut f = File::create(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    f.write_all(&bytes[..n])?;
    f.sync_all()?;
    Ok(n == bytes.len())
}

fn sync_dir(dir: &Path) {
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

/// Write `bytes` to `dir/name` via a temporary file and rename.
fn commit_file(dir: &Path, name: &str, bytes: &[u8], budget: Option<u64>) -> Result<bool> {
    let tmp = dir.join(format!("{name}.tmp"));
    if !write_limited(&tmp, bytes, budget)? {
        return Ok(false);
    }
    fs::rename(&tmp, dir.join(name))?;
    sync_dir(dir);
    Ok(true)
}

fn allgather_f64(rank: &mut Rank<'_>, v: Vec<f64>) -> Result<Vec<f64>> {
    let world = rank.group(Axis::World);
    Ok(rank.allgather(&world, &Tensor::from_vec(v))?.into_data())
}

/// What one rank contributes to a checkpoint.
pub struct CheckpointSource<'a> {
    pub model: &'a LocalModel<f32>,
    /// Gradient buffers; `None` writes zeros.
    pub grads: Option<&'a [Tensor<f32>]>,
    pub optimizer: Option<&'a ShardedOptimizer>,
}

/// Write a checkpoint image into `dir`. Collective over the world. Shards
/// are written by data-parallel index `m % DP`; the manifest and marker
/// are committed by rank 0 after every shard is on disk.
///
/// `crash_at` simulates a crash after that many bytes of the image, in
/// the order shards, manifest, marker; every rank then returns
/// [`Error::InjectedCrash`].
pub fn write_image(
    rank: &mut Rank<'_>,
    dir: &Path,
    kind: CheckpointKind,
    step: u64,
    src: &CheckpointSource<'_>,
    crash_at: Option<u64>,
) -> Result<CheckpointManifest> {
    let model = src.model;
    let topo = model.topo;
    let c = rank.coords();
    let m = model_shard_index(&topo, &c);
    let world = rank.group(Axis::World);

    let mut states = Vec::new();
    if kind == CheckpointKind::Full {
        let opt = src
            .optimizer
            .ok_or_else(|| Error::Checkpoint("full checkpoint needs optimizer states".into()))?;
        for i in 0..model.params.len() {
            states.push(opt.gather_state(rank, i)?);
        }
    }
    let writer = c.dp == scattered_writer(m, topo.dp);
    let img = ShardImage {
        weights: model.params.iter().map(|p| p.data().to_vec()).collect(),
        grads: match src.grads {
            Some(g) => g.iter().map(|t| t.data().to_vec()).collect(),
            None => model.params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        },
        states,
    };
    let bytes = if writer { encode(kind, &img) } else { Vec::new() };

    // every rank learns every shard's size and checksum
    let crc = if writer { crc32fast::hash(&bytes[..bytes.len() - 4]) } else { 0 };
    let info = allgather_f64(
        rank,
        vec![
            if writer { 1.0 } else { 0.0 },
            m as f64,
            bytes.len() as f64,
            crc as f64,
            model.params.iter().map(|p| p.numel()).sum::<usize>() as f64,
        ],
    )?;
    let t0 = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let timestamp = rank.allreduce_f64(&world, if rank.rank() == 0 { t0 as f64 } else { 0.0 })? as u64;
    let nshards = num_model_shards(&topo);
    let mut shards: Vec<Option<ShardManifest>> = vec![None; nshards];
    for r in info.chunks(5) {
        if r[0] == 0.0 {
            continue;
        }
        let s = r[1] as usize;
        let (tp, ep, pp) = shard_coords(&topo, s);
        let wc = Coords {
            dp: scattered_writer(s, topo.dp),
            tp,
            ep,
            pp,
        };
        let peer = LocalModel::<f32>::build(&model.cfg, topo, wc, model.virtual_stages, |spec, _| {
            Ok(Tensor::zeros(&spec.local_shape(&topo)))
        })?;
        shards[s] = Some(ShardManifest {
            index: s,
            file: shard_file(s),
            tp,
            ep,
            pp,
            writer_dp: wc.dp,
            params: peer
                .param_ids
                .iter()
                .zip(&peer.params)
                .map(|(&id, p)| ParamShape {
                    id,
                    shape: p.shape().to_vec(),
                })
                .collect(),
            elements: r[4] as u64,
            bytes: r[2] as u64,
            crc32: r[3] as u32,
        });
    }
    let shards: Vec<ShardManifest> = shards
        .into_iter()
        .enumerate()
        .map(|(s, x)| x.ok_or_else(|| Error::Checkpoint(format!("shard {s} has no writer"))))
        .collect::<Result<_>>()?;
    let manifest = CheckpointManifest {
        kind,
        step,
        timestamp,
        optimizer_t: if kind == CheckpointKind::Full {
            src.optimizer.map_or(0, |o| o.t)
        } else {
            0
        },
        mode: src.optimizer.map(|o| o.plan.mode),
        topology: topo,
        shards,
    };
    let manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    let shard_total: u64 = manifest.shard_bytes();
    let image_total = shard_total + manifest_bytes.len() as u64 + VALID_MARKER.len() as u64;
    let crashed = crash_at.filter(|&o| o < image_total);

    if rank.rank() == 0 {
        fs::create_dir_all(dir)?;
        let _ = fs::remove_file(dir.join(VALID_MARKER));
        sync_dir(dir);
    }
    rank.barrier(&world)?;

    if writer {
        let start: u64 = manifest.shards[..m].iter().map(|s| s.bytes).sum();
        match crashed {
            Some(o) if o <= start => {}
            Some(o) => {
                write_limited(&dir.join(shard_file(m)), &bytes, Some(o - start))?;
            }
            None => {
                write_limited(&dir.join(shard_file(m)), &bytes, None)?;
            }
        }
    }
    rank.barrier(&world)?;

    if rank.rank() == 0 {
        let left = crashed.map(|o| o.saturating_sub(shard_total));
        if left != Some(0) && commit_file(dir, CKPT_MANIFEST, &manifest_bytes, left)? {
            let left = left.map(|l| l - manifest_bytes.len() as u64);
            if left != Some(0) {
                commit_file(dir, VALID_MARKER, VALID_MARKER.as_bytes(), left)?;
            }
        }
    }
    rank.barrier(&world)?;
    match crashed {
        Some(offset) => Err(Error::InjectedCrash { offset }),
        None => Ok(manifest),
    }
}

/// Manifest of `dir` if its marker exists and every shard verifies.
pub fn verify_image(dir: &Path) -> Option<CheckpointManifest> {
    if !dir.join(VALID_MARKER).is_file() {
        return None;
    }
    let m: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join(CKPT_MANIFEST)).ok()?).ok()?;
    for s in &m.shards {
        let b = fs::read(dir.join(&s.file)).ok()?;
        if b.len() as u64 != s.bytes || b.len() < (HEADER_BYTES + FOOTER_BYTES) as usize {
            return None;
        }
        let (body, foot) = b.split_at(b.len() - 4);
        let crc = crc32fast::hash(body);
        if crc != s.crc32 || foot != crc.to_le_bytes() {
            return None;
        }
    }
    Some(m)
}

/// Slot the next full checkpoint goes to: an invalid one, else the older.
pub fn choose_slot(root: &Path) -> usize {
    let steps: Vec<Option<u64>> = SLOT_DIRS.iter().map(|d| verify_image(&root.join(d)).map(|m| m.step)).collect();
    match (steps[0], steps[1]) {
        (None, _) => 0,
        (_, None) => 1,
        (Some(a), Some(b)) => usize::from(b < a),
    }
}

/// Write a full checkpoint into the slot chosen by [`choose_slot`]; returns
/// the slot index. Collective over the world.
pub fn write_full_checkpoint(
    rank: &mut Rank<'_>,
    root: &Path,
    step: u64,
    src: &CheckpointSource<'_>,
    crash_at: Option<u64>,
) -> Result<usize> {
    let world = rank.group(Axis::World);
    let local = if rank.rank() == 0 { choose_slot(root) as f64 } else { 0.0 };
    let slot = rank.allreduce_f64(&world, local)? as usize;
    write_image(rank, &root.join(SLOT_DIRS[slot]), CheckpointKind::Full, step, src, crash_at)?;
    Ok(slot)
}

pub fn persistent_dir(root: &Path, step: u64) -> PathBuf {
    root.join(PERSISTENT_DIR).join(format!("step-{step}"))
}

/// Write a bf16 model-only checkpoint under `persistent/step-N`.
pub fn write_model_checkpoint(rank: &mut Rank<'_>, root: &Path, step: u64, model: &LocalModel<f32>) -> Result<PathBuf> {
    let dir = persistent_dir(root, step);
    let src = CheckpointSource {
        model,
        grads: None,
        optimizer: None,
    };
    write_image(rank, &dir, CheckpointKind::ModelOnly, step, &src, None)?;
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Resume {
    Full { dir: PathBuf, slot: usize, step: u64 },
    ModelOnly { dir: PathBuf, step: u64 },
    ColdStart,
}

impl Resume {
    /// Last completed step; training continues at the next one.
    pub fn step(&self) -> u64 {
        match self {
            Self::Full { step, .. } | Self::ModelOnly { step, .. } => *step,
            Self::ColdStart => 0,
        }
    }
}

/// Newest valid full slot, else the newest valid persistent model
/// checkpoint, else a cold start.
pub fn find_resume(root: &Path) -> Resume {
    let best = SLOT_DIRS
        .iter()
        .enumerate()
        .filter_map(|(i, d)| verify_image(&root.join(d)).map(|m| (m.step, i)))
        .max();
    if let Some((step, slot)) = best {
        return Resume::Full {
            dir: root.join(SLOT_DIRS[slot]),
            slot,
            step,
        };
    }
    let mut persistent: Vec<(u64, PathBuf)> = fs::read_dir(root.join(PERSISTENT_DIR))
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| verify_image(&p).map(|m| (m.step, p)))
        .collect();
    persistent.sort();
    match persistent.pop() {
        Some((step, dir)) => Resume::ModelOnly { dir, step },
        None => Resume::ColdStart,
    }
}

fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let b = fs::read(dir.join(CKPT_MANIFEST)).map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    Ok(serde_json::from_slice(&b)?)
}

/// Read this rank's model shard.
pub fn read_shard(dir: &Path, model: &LocalModel<f32>, reads: Option<&AtomicUsize>) -> Result<(CheckpointManifest, ShardImage)> {
    let man = read_manifest(dir)?;
    if man.topology != model.topo {
        return Err(Error::Checkpoint(format!("checkpoint topology {:?} differs from {:?}", man.topology, model.topo)));
    }
    let s = &man.shards[model_shard_index(&model.topo, &model.coords)];
    let ids: Vec<usize> = s.params.iter().map(|p| p.id).collect();
    if ids != model.param_ids {
        return Err(Error::Checkpoint(format!("shard {} holds other parameters", s.index)));
    }
    let bytes = fs::read(dir.join(&s.file)).map_err(|e| Error::Checkpoint(format!("shard {}: {e}", s.index)))?;
    if let Some(r) = reads {
        r.fetch_add(1, Ordering::Relaxed);
    }
    if crc32fast::hash(&bytes[..bytes.len().saturating_sub(4)]) != s.crc32 {
        return Err(Error::Checkpoint(format!("shard {} checksum mismatch", s.index)));
    }
    let sizes: Vec<usize> = model.params.iter().map(|p| p.numel()).collect();
    let img = decode(man.kind, &bytes, &sizes)?;
    Ok((man, img))
}

fn set_weights(model: &mut LocalModel<f32>, w: Vec<Vec<f32>>) {
    for (p, v) in model.params.iter_mut().zip(w) {
        p.data_mut().copy_from_slice(&v);
    }
}

/// Restore weights, grads and optimizer states from a full checkpoint.
/// Returns the grads and the checkpoint step.
pub fn restore_full(dir: &Path, model: &mut LocalModel<f32>, opt: &mut ShardedOptimizer) -> Result<(Vec<Tensor<f32>>, u64)> {
    let (man, img) = read_shard(dir, model, None)?;
    if man.kind != CheckpointKind::Full {
        return Err(Error::Checkpoint("not a full checkpoint".into()));
    }
    opt.load_full_states(&img.states, man.optimizer_t)?;
    let grads = img
        .grads
        .into_iter()
        .zip(&model.params)
        .map(|(g, p)| Tensor::new(p.shape(), g))
        .collect::<Result<Vec<_>>>()?;
    set_weights(model, img.weights);
    Ok((grads, man.step))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadMode {
    /// Data-parallel rank 0 reads and broadcasts.
    Broadcast,
    /// Data-parallel rank 0 reads, the others contribute zeros to an
    /// allreduce.
    AllReduce,
    /// Every rank reads.
    Naive,
}

/// Load model weights from a checkpoint image into `model`. Collective
/// over the data-parallel group unless `mode` is [`LoadMode::Naive`].
/// `reads` counts shard-file reads.
pub fn load_model(rank: &mut Rank<'_>, dir: &Path, model: &mut LocalModel<f32>, mode: LoadMode, reads: &AtomicUsize) -> Result<u64> {
    let c = rank.coords();
    let dp = rank.group(Axis::Dp);
    let source = mode == LoadMode::Naive || c.dp == 0;
    let (step, weights) = if source {
        let (man, img) = read_shard(dir, model, Some(reads))?;
        (man.step, img.weights)
    } else {
        // negative zero is the additive identity for every bf16 value
        (0, model.params.iter().map(|p| vec![-0.0f32; p.numel()]).collect())
    };
    let step = match mode {
        LoadMode::Naive => step,
        _ => rank.allreduce_f64(&dp, step as f64)? as u64,
    };
    let root = rank.world().layout().rank_of(&Coords { dp: 0, ..c });
    let mut out = Vec::with_capacity(weights.len());
    for w in weights {
        let t = Tensor::from_vec(w);
        let t = match mode {
            LoadMode::Naive => t,
            LoadMode::Broadcast => rank.broadcast(&dp, root, &t)?,
            LoadMode::AllReduce => rank.allreduce(&dp, &t)?,
        };
        out.push(t.into_data());
    }
    set_weights(model, out);
    Ok(step)
}

/// Byte offsets of the shard boundaries within an image.
pub fn shard_boundaries(man: &CheckpointManifest) -> Vec<u64> {
    let mut out = vec![0];
    for s in &man.shards {
        out.push(out.last().unwrap() + s.bytes);
    }
    out
}
