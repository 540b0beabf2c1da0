use std::path::PathBuf;
use std::sync::atomic::AtomicUsize;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::comm::{root_cause, Topology, World, WorldConfig};
use crate::error::{Error, Result};
use crate::model::{build_optimizer, train_step, LocalModel, ModelConfig, StepMetrics};
use crate::optim::{AdamWConfig, OptimizerMode};
use crate::parallel::{build_schedule, ScheduleKind};
use crate::reliability::checkpoint::{
    find_resume, load_model, restore_full, write_full_checkpoint, write_model_checkpoint, CheckpointSource, LoadMode,
    Resume,
};
use crate::reliability::failure::{FailureKind, FailurePlan, InjectedFailure};

/// Everything needed to run (and rerun) a training job.
#[derive(Clone, Debug)]
pub struct JobConfig {
    pub model: ModelConfig,
    pub topology: Topology,
    pub tiles_per_node: usize,
    pub mode: OptimizerMode,
    pub schedule: ScheduleKind,
    pub microbatches: usize,
    pub virtual_stages: usize,
    pub adam: AdamWConfig,
    pub seed: u64,
    pub steps: u64,
    /// Sequences per step across all data ranks.
    pub global_batch: usize,
    pub fur: bool,
    pub checkpoint_dir: Option<PathBuf>,
    /// Full checkpoint cadence in steps; 0 disables.
    pub checkpoint_every: u64,
    /// Model-only checkpoint cadence in steps; 0 disables.
    pub persistent_every: u64,
    pub load_mode: LoadMode,
    /// Crash the checkpoint write at `(step, byte offset)`, once.
    pub checkpoint_crash: Option<(u64, u64)>,
    /// Replace failed nodes and resume; otherwise the first failure ends
    /// the job.
    pub relaunch: bool,
}

impl JobConfig {
    pub fn new(model: ModelConfig, topology: Topology) -> Self {
        Self {
            model,
            topology,
            tiles_per_node: WorldConfig::DEFAULT_TILES_PER_NODE,
            mode: OptimizerMode::Epso,
            schedule: ScheduleKind::OneFOneB,
            microbatches: 1,
            virtual_stages: 1,
            adam: AdamWConfig::default(),
            seed: 0,
            steps: 1,
            global_batch: topology.dp * topology.ep,
            fur: false,
            checkpoint_dir: None,
            checkpoint_every: 0,
            persistent_every: 0,
            load_mode: LoadMode::Broadcast,
            checkpoint_crash: None,
            relaunch: true,
        }
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig::new(self.topology).with_tiles_per_node(self.tiles_per_node)
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.topology.dp * self.topology.ep;
        if self.global_batch == 0 || !self.global_batch.is_multiple_of(w) {
            return Err(Error::Config(format!("global batch {} not divisible by dp*ep={w}", self.global_batch)));
        }
        let local = self.global_batch / w;
        if self.microbatches == 0 || !local.is_multiple_of(self.microbatches) {
            return Err(Error::Config(format!("{local} local sequences not divisible into {} microbatches", self.microbatches)));
        }
        if (self.checkpoint_every > 0 || self.persistent_every > 0) && self.checkpoint_dir.is_none() {
            return Err(Error::Config("checkpointing needs a checkpoint directory".into()));
        }
        self.model.validate()?;
        self.adam.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cause", rename_all = "snake_case")]
pub enum RelaunchCause {
    Hard { node: usize },
    Soft { node: usize, rank: usize },
    CheckpointCrash { offset: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaunchEvent {
    /// Step at which the failure happened.
    pub step: u64,
    pub cause: RelaunchCause,
    /// Nodes of the relaunched world.
    pub nodes: Vec<usize>,
    /// Step the relaunched run resumed after.
    pub resumed_from: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    /// Every executed step in order, including replays after relaunches.
    pub metrics: Vec<StepMetrics>,
    pub relaunches: Vec<RelaunchEvent>,
    /// (step, slot) of each full checkpoint written.
    pub checkpoints: Vec<(u64, usize)>,
    pub persistent: Vec<u64>,
    /// Shard-file reads made while loading model-only checkpoints.
    pub model_loads: usize,
    pub nodes: Vec<usize>,
}

impl JobReport {
    /// The last execution of each step, in step order.
    pub fn trajectory(&self) -> Vec<StepMetrics> {
        let mut out: Vec<StepMetrics> = Vec::new();
        for m in &self.metrics {
            while out.last().is_some_and(|l| l.step >= m.step) {
                out.pop();
            }
            out.push(m.clone());
        }
        out
    }
}

/// Tokens of data rank `d` of `w` for a step (1-based): that rank's
/// `global_batch / w` sequences of the global batch.
pub type BatchFn<'a> = dyn Fn(u64, usize, usize) -> Result<Vec<usize>> + Sync + 'a;

fn next_failure(plan: &mut FailurePlan, after: u64, until: u64, active: &[usize]) -> Option<InjectedFailure> {
    let i = plan
        .failures
        .iter()
        .enumerate()
        .filter(|(_, f)| f.step > after && f.step <= until && active.contains(&f.node))
        .min_by_key(|(_, f)| f.step)
        .map(|(i, _)| i)?;
    Some(plan.failures.remove(i))
}

struct Shared {
    metrics: Vec<StepMetrics>,
    checkpoints: Vec<(u64, usize)>,
    persistent: Vec<u64>,
}

/// Run the job to completion, relaunching on failures.
pub fn run_job(job: &JobConfig, batches: &BatchFn<'_>, plan: &mut FailurePlan) -> Result<JobReport> {
    job.validate()?;
    let wcfg = job.world_config();
    let mut nodes: Vec<usize> = (0..wcfg.num_nodes()).collect();
    if let Some(b) = plan.buffer_nodes.iter().find(|b| nodes.contains(b)) {
        return Err(Error::Config(format!("buffer node {b} is also active")));
    }
    let mut report = JobReport::default();
    let mut crash = job.checkpoint_crash;
    let reads = AtomicUsize::new(0);
    loop {
        let world = World::with_nodes(wcfg.clone(), nodes.clone())?;
        let resume = job.checkpoint_dir.as_deref().map_or(Resume::ColdStart, find_resume);
        let start = resume.step();
        let pending = next_failure(plan, start, job.steps, &nodes);
        let shared = Mutex::new(Shared {
            metrics: Vec::new(),
            checkpoints: Vec::new(),
            persistent: Vec::new(),
        });
        let attempt_crash = crash;
        let results = world.run(|rank| {
            let topo = job.topology;
            let c = rank.coords();
            let mut model = LocalModel::<f32>::init(&job.model, topo, c, job.virtual_stages, job.seed)?;
            let mut opt = build_optimizer(&mut model, job.mode, job.adam)?;
            match &resume {
                Resume::Full { dir, .. } => {
                    restore_full(dir, &mut model, &mut opt)?;
                }
                Resume::ModelOnly { dir, .. } => {
                    load_model(rank, dir, &mut model, job.load_mode, &reads)?;
                    opt = build_optimizer(&mut model, job.mode, job.adam)?;
                }
                Resume::ColdStart => {}
            }
            let sched = build_schedule(job.schedule, topo.pp, job.microbatches, job.virtual_stages)?;
            let w = topo.dp * topo.ep;
            let d = c.data_rank(&topo);
            for step in start + 1..=job.steps {
                let fails = pending.filter(|f| f.step == step && f.node == rank.node());
                if fails.is_some_and(|f| f.kind == FailureKind::Hard) {
                    return Err(Error::HardFailure { node: rank.node(), step });
                }
                let local = batches(step, d, w)?;
                let poison = fails.is_some_and(|f| f.kind == FailureKind::SoftNaN);
                let m = train_step(rank, &mut model, &mut opt, &sched, &local, step, job.fur, poison)?;
                if rank.rank() == 0 {
                    shared.lock().expect("poisoned").metrics.push(m);
                }
                if let Some(root) = &job.checkpoint_dir {
                    if job.checkpoint_every > 0 && step % job.checkpoint_every == 0 {
                        let src = CheckpointSource {
                            model: &model,
                            grads: None,
                            optimizer: Some(&opt),
                        };
                        let at = attempt_crash.filter(|&(s, _)| s == step).map(|(_, o)| o);
                        let slot = write_full_checkpoint(rank, root, step, &src, at)?;
                        if rank.rank() == 0 {
                            shared.lock().expect("poisoned").checkpoints.push((step, slot));
                        }
                    }
                    if job.persistent_every > 0 && step % job.persistent_every == 0 {
                        write_model_checkpoint(rank, root, step, &model)?;
                        if rank.rank() == 0 {
                            shared.lock().expect("poisoned").persistent.push(step);
                        }
                    }
                }
            }
            Ok(())
        });
        let s = shared.into_inner().expect("poisoned");
        report.metrics.extend(s.metrics);
        report.checkpoints.extend(s.checkpoints);
        report.persistent.extend(s.persistent);
        let (step, cause, failed) = match root_cause(results) {
            Ok(_) => {
                report.nodes = nodes;
                report.model_loads = reads.into_inner();
                return Ok(report);
            }
            Err(Error::HardFailure { node, step }) => (step, RelaunchCause::Hard { node }, Some(node)),
            Err(Error::SoftFailure { rank, node, step }) => (step, RelaunchCause::Soft { node, rank }, Some(node)),
            Err(Error::InjectedCrash { offset }) => {
                let step = crash.map_or(0, |c| c.0);
                crash = None;
                (step, RelaunchCause::CheckpointCrash { offset }, None)
            }
            Err(e) => return Err(e),
        };
        if !job.relaunch {
            return Err(match cause {
                RelaunchCause::Hard { node } => Error::HardFailure { node, step },
                RelaunchCause::Soft { node, rank } => Error::SoftFailure { rank, node, step },
                RelaunchCause::CheckpointCrash { offset } => Error::InjectedCrash { offset },
            });
        }
        if let Some(node) = failed {
            nodes = plan.relaunch(&nodes, node)?;
        }
        let resumed_from = job.checkpoint_dir.as_deref().map_or(Resume::ColdStart, find_resume).step();
        report.relaunches.push(RelaunchEvent {
            step,
            cause,
            nodes: nodes.clone(),
            resumed_from,
        });
    }
}
