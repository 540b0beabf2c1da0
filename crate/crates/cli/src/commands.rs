use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use optimus_desk::comm::{volume_compare_allgather_vs_all2all, Topology, World, WorldConfig};
use optimus_desk::data::{preprocess_dir, ShardSet};
use optimus_desk::model::{build_optimizer, count_params, forward_backward, LocalModel, ModelConfig, StepMetrics};
use optimus_desk::moe::{
    fast_moe_backward, fast_moe_forward, reference_moe_backward, reference_moe_forward, ExpertWeights,
    MoeConfig,
};
use optimus_desk::optim::{memory_report, AdamWConfig, MemoryBreakdown, OptimizerMode, DEFAULT_CAPACITY_BYTES};
use optimus_desk::parallel::{build_schedule, ScheduleKind};
use optimus_desk::reliability::{run_job, FailurePlan, JobReport};
use optimus_desk::{Error, IndexTensor, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;

pub fn preprocess(input: &Path, context: usize, seed: u64, shard_size: usize, out: &Path) -> Result<String> {
    if !input.is_dir() {
        return Err(Error::Config(format!("input {} is not a directory", input.display())));
    }
    let m = preprocess_dir(input, context, seed, shard_size, out)?;
    Ok(json!({
        "instances": m.total_instances,
        "shards": m.shards.len(),
        "context": m.context,
        "seed": m.seed,
        "crc32": m.shards.iter().map(|s| s.crc32).collect::<Vec<_>>(),
    })
    .to_string())
}

pub struct PlanReport {
    pub model: ModelConfig,
    pub total: u64,
    pub active: u64,
    pub expert: u64,
    pub topology: Topology,
    pub rows: Vec<MemoryBreakdown>,
}

pub fn plan(model: ModelConfig, topo: Topology, mode: Option<OptimizerMode>) -> Result<PlanReport> {
    let p = count_params(&model);
    if !model.heads.is_multiple_of(topo.tp) || (model.is_moe() && !model.experts.is_multiple_of(topo.ep)) || (!model.is_moe() && topo.ep > 1) {
        return Err(Error::Config(format!(
            "topology dp={} tp={} ep={} pp={} does not divide {}",
            topo.dp, topo.tp, topo.ep, topo.pp, model.name
        )));
    }
    let modes = match mode {
        Some(m) => vec![m],
        None => vec![OptimizerMode::Ddp, OptimizerMode::So, OptimizerMode::Epso],
    };
    let rows = modes
        .into_iter()
        .map(|m| memory_report(p.total as f64, p.expert as f64, m, &topo, DEFAULT_CAPACITY_BYTES))
        .collect();
    Ok(PlanReport {
        model,
        total: p.total,
        active: p.active,
        expert: p.expert,
        topology: topo,
        rows,
    })
}

impl PlanReport {
    pub fn to_json(&self) -> String {
        json!({
            "model": self.model.name,
            "total_params": self.total,
            "active_params": self.active,
            "expert_params": self.expert,
            "topology": self.topology,
            "memory": self.rows,
        })
        .to_string()
    }

    pub fn to_text(&self) -> String {
        let t = &self.topology;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "model {}: total {:.3e} params ({:.1} B), active {:.3e} ({:.1} B), expert {:.3e}",
            self.model.name,
            self.total as f64,
            self.total as f64 / 1e9,
            self.active as f64,
            self.active as f64 / 1e9,
            self.expert as f64
        );
        let _ = writeln!(s, "topology dp={} tp={} ep={} pp={} ({} ranks)", t.dp, t.tp, t.ep, t.pp, t.world_size());
        let _ = writeln!(s, "{:<6}{:>12}{:>12}{:>12}{:>14}{:>12}  verdict", "mode", "weights_gb", "grads_gb", "master_gb", "optimizer_gb", "total_gb");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<6}{:>12.2}{:>12.2}{:>12.2}{:>14.2}{:>12.2}  {} vs {:.0} GB",
                r.mode.to_string(),
                r.weights / 1e9,
                r.grads / 1e9,
                r.master / 1e9,
                r.optimizer / 1e9,
                r.total_gb,
                if r.feasible { "feasible" } else { "infeasible" },
                r.capacity_gb
            );
        }
        for r in &self.rows {
            let plan = match r.mode {
                OptimizerMode::Ddp => "optimizer states replicated on every data-parallel rank".to_string(),
                OptimizerMode::So => format!("all optimizer states sharded over dp ({} ranks)", t.dp),
                OptimizerMode::Epso => format!(
                    "expert states sharded over dp ({} ranks), non-expert states over dp*ep ({} ranks)",
                    t.dp,
                    t.dp * t.ep
                ),
            };
            let _ = writeln!(s, "shard plan {}: {plan}", r.mode);
        }
        s
    }
}

/// Tokens of data rank `d` of `w` for `step`.
pub trait Batches: Sync {
    fn local(&self, step: u64, d: usize, w: usize) -> Result<Vec<usize>>;
}

/// Sequences following a fixed affine bigram rule from a seeded start.
pub struct Synthetic {
    pub seed: u64,
    pub vocab: usize,
    pub context: usize,
    pub global_batch: usize,
}

impl Batches for Synthetic {
    fn local(&self, step: u64, d: usize, w: usize) -> Result<Vec<usize>> {
        let per = self.global_batch / w;
        let mut out = Vec::with_capacity(per * self.context);
        for j in d * per..(d + 1) * per {
            let g = (step - 1) * self.global_batch as u64 + j as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ g.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut t = rng.gen_range(0..self.vocab);
            for _ in 0..self.context {
                out.push(t);
                t = (t * 5 + 3) % self.vocab;
            }
        }
        Ok(out)
    }
}

/// Instances of a preprocessed shard set, cycling over epochs.
pub struct Sharded {
    pub set: ShardSet,
    pub global_batch: usize,
}

impl Batches for Sharded {
    fn local(&self, step: u64, d: usize, w: usize) -> Result<Vec<usize>> {
        let g = self.global_batch as u64;
        let steps = self.set.len() / g;
        if steps == 0 {
            return Err(Error::Data(format!("{} instances cannot fill a global batch of {g}", self.set.len())));
        }
        let it = self.set.iterate_epoch(d, w, self.global_batch)?;
        let (start, count) = it.slice((step - 1) % steps);
        Ok(self.set.read(start, count)?.into_iter().map(|t| t as usize).collect())
    }
}

pub fn open_batches(cfg: &RunConfig, model: &ModelConfig) -> Result<Box<dyn Batches>> {
    let global_batch = cfg.global_batch();
    match &cfg.data {
        Some(dir) => {
            let set = ShardSet::open(dir)?;
            set.verify()?;
            if set.context() != model.context {
                return Err(Error::Config(format!(
                    "data context {} differs from model context {}",
                    set.context(),
                    model.context
                )));
            }
            if set.manifest.vocab_size > model.vocab_size {
                return Err(Error::Config(format!(
                    "data vocabulary {} exceeds model vocabulary {}",
                    set.manifest.vocab_size, model.vocab_size
                )));
            }
            Ok(Box::new(Sharded { set, global_batch }))
        }
        None => Ok(Box::new(Synthetic {
            seed: cfg.seed,
            vocab: model.vocab_size,
            context: model.context,
            global_batch,
        })),
    }
}

pub fn train(cfg: &RunConfig) -> Result<JobReport> {
    let job = cfg.job()?;
    let batches = open_batches(cfg, &job.model)?;
    let failures = match &cfg.failures {
        Some(p) => FailurePlan::load_failures(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => Vec::new(),
    };
    let mut plan = FailurePlan::new(failures, cfg.buffer_nodes.clone());
    let f = |step: u64, d: usize, w: usize| batches.local(step, d, w);
    run_job(&job, &f, &mut plan)
}

pub fn write_metrics(path: &Path, metrics: &[StepMetrics], csv: bool) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for m in metrics {
        serde_json::to_writer(&mut f, m)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    if csv {
        let mut s = String::from("step,loss,aux_loss,grad_norm,lr\n");
        for m in metrics {
            let _ = writeln!(s, "{},{},{},{},{}", m.step, m.loss, m.aux_loss, m.grad_norm, m.lr);
        }
        std::fs::write(path.with_extension("csv"), s)?;
    }
    Ok(())
}

fn time<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<f64> {
    f()?;
    let t = Instant::now();
    for _ in 0..reps {
        f()?;
    }
    Ok(t.elapsed().as_secs_f64() * 1e3 / reps as f64)
}

fn random_experts(cfg: &MoeConfig, rng: &mut ChaCha8Rng) -> ExpertWeights<f32> {
    let (n, h, i) = (cfg.num_experts, cfg.hidden, cfg.intermediate);
    ExpertWeights {
        gate: Tensor::randn(&[n, h, i], 0.1, rng),
        up: Tensor::randn(&[n, h, i], 0.1, rng),
        down: Tensor::randn(&[n, i, h], 0.1, rng),
        router: Tensor::randn(&[h, n], 0.1, rng),
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct BenchRow {
    pub component: &'static str,
    pub baseline: &'static str,
    pub optimized: &'static str,
    pub baseline_ms: f64,
    pub optimized_ms: f64,
    pub speedup: f64,
}

fn row(component: &'static str, baseline: &'static str, optimized: &'static str, b: f64, o: f64) -> BenchRow {
    BenchRow {
        component,
        baseline,
        optimized,
        baseline_ms: b,
        optimized_ms: o,
        speedup: b / o,
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub so_state_bytes_per_rank: usize,
    pub epso_state_bytes_per_rank: usize,
    pub allgather_bytes: u64,
    pub all2all_bytes: u64,
}

pub const BENCH_CAVEAT: &str =
    "desk-scale CPU timings; ratios are not comparable with accelerator measurements";

pub fn bench(reps: usize, seed: u64) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = ModelConfig::tiny();
    let mcfg = MoeConfig::new(m.experts, m.top_k, m.hidden_size, m.intermediate_size, 1)?;
    let w = random_experts(&mcfg, &mut rng);
    let x: Tensor<f32> = Tensor::randn(&[256, m.hidden_size], 1.0, &mut rng);
    let dy: Tensor<f32> = Tensor::randn(&[256, m.hidden_size], 1.0, &mut rng);

    let serial = World::new(WorldConfig::new(Topology::serial()));
    let fast = serial.run_all(|rank| {
        time(reps, || {
            let (_, saved, _) = fast_moe_forward(rank, &x, &w, &mcfg, false)?;
            fast_moe_backward(rank, &dy, &saved, &w, None)?;
            Ok(())
        })
    })?[0];
    let reference = time(reps, || {
        reference_moe_forward(&x, &w, &mcfg)?;
        reference_moe_backward(&x, &w, &mcfg, &dy)?;
        Ok(())
    })?;

    let topo = Topology::new(2, 1, 2, 1)?;
    let world = World::new(WorldConfig::new(topo));
    let mut opt_ms = Vec::new();
    let mut train_ms = Vec::new();
    let mut state = Vec::new();
    for mode in [OptimizerMode::So, OptimizerMode::Epso] {
        let out = world.run_all(|rank| {
            let mut model = LocalModel::<f32>::init(&m, topo, rank.coords(), 1, seed)?;
            let mut opt = build_optimizer(&mut model, mode, AdamWConfig::default())?;
            let sched = build_schedule(ScheduleKind::OneFOneB, 1, 1, 1)?;
            let toks: Vec<usize> = (0..m.context).map(|i| (i * 7 + rank.rank()) % m.vocab_size).collect();
            let grads = forward_backward(rank, &model, &sched, &toks, false)?.grads;
            let mut step = 0;
            let o = time(reps, || {
                step += 1;
                opt.step(rank, &mut model.params, &grads, step).map(|_| ())
            })?;
            let t = time(reps, || {
                step += 1;
                let g = forward_backward(rank, &model, &sched, &toks, false)?.grads;
                opt.step(rank, &mut model.params, &g, step).map(|_| ())
            })?;
            Ok((o, t, opt.state_bytes()))
        })?;
        opt_ms.push(out[0].0);
        train_ms.push(out[0].1);
        state.push(out.iter().map(|o| o.2).max().unwrap_or(0));
    }

    let (s, ep) = (64, 4);
    let routing = IndexTensor::new(
        &[s * ep, m.top_k],
        (0..s * ep)
            .flat_map(|_| rand::seq::index::sample(&mut rng, m.experts, m.top_k).into_vec())
            .collect(),
    )?;
    let vol = volume_compare_allgather_vs_all2all(s, m.hidden_size, m.experts, ep, &routing, 4)?;

    Ok(BenchReport {
        rows: vec![
            row("F+B", "reference moe", "fast moe", reference, fast),
            row("Optimizer", "so", "epso", opt_ms[0], opt_ms[1]),
            row("Training", "so", "epso", train_ms[0], train_ms[1]),
        ],
        so_state_bytes_per_rank: state[0],
        epso_state_bytes_per_rank: state[1],
        allgather_bytes: vol.allgather_bytes,
        all2all_bytes: vol.all2all_bytes,
    })
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10}{:>16}{:>16}{:>14}{:>14}{:>9}", "component", "baseline", "optimized", "baseline_ms", "optimized_ms", "speedup");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10}{:>16}{:>16}{:>14.3}{:>14.3}{:>8.2}x",
                r.component, r.baseline, r.optimized, r.baseline_ms, r.optimized_ms, r.speedup
            );
        }
        let _ = writeln!(
            s,
            "optimizer state bytes per rank (dp=2 ep=2): so {} epso {}",
            self.so_state_bytes_per_rank, self.epso_state_bytes_per_rank
        );
        let _ = writeln!(
            s,
            "token exchange bytes (ep=4): allgather {} all2all {}",
            self.allgather_bytes, self.all2all_bytes
        );
        let _ = writeln!(s, "note: {BENCH_CAVEAT}");
        s
    }
}
