use std::path::{Path, PathBuf};
use std::str::FromStr;

use optimus_desk::comm::Topology;
use optimus_desk::model::ModelConfig;
use optimus_desk::optim::{AdamWConfig, OptimizerMode};
use optimus_desk::parallel::{SacPolicy, ScheduleKind};
use optimus_desk::reliability::{JobConfig, LoadMode};
use optimus_desk::{Error, Result};

pub const SEED_ENV: &str = "OPTIMUS_DESK_SEED";

/// A training run, read from flat `key = value` text and overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub layers: Option<usize>,
    pub hidden_size: Option<usize>,
    pub heads: Option<usize>,
    pub head_size: Option<usize>,
    pub intermediate_size: Option<usize>,
    pub experts: Option<usize>,
    pub top_k: Option<usize>,
    pub vocab_size: Option<usize>,
    pub context: Option<usize>,
    pub aux_loss_coeff: Option<f64>,
    pub sac: SacPolicy,
    pub dp: usize,
    pub tp: usize,
    pub ep: usize,
    pub pp: usize,
    pub tiles_per_node: usize,
    pub schedule: ScheduleKind,
    pub microbatches: usize,
    pub virtual_stages: usize,
    pub optim: OptimizerMode,
    pub fur: bool,
    pub seed: u64,
    pub steps: u64,
    pub global_batch: Option<usize>,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f32,
    pub clip_norm: f64,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub persistent_every: u64,
    pub load_mode: LoadMode,
    pub failures: Option<PathBuf>,
    pub buffer_nodes: Vec<usize>,
    pub relaunch: bool,
    pub data: Option<PathBuf>,
    pub metrics: PathBuf,
    pub emit_csv: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "mula-tiny".into(),
            layers: None,
            hidden_size: None,
            heads: None,
            head_size: None,
            intermediate_size: None,
            experts: None,
            top_k: None,
            vocab_size: None,
            context: None,
            aux_loss_coeff: None,
            sac: SacPolicy::none(),
            dp: 1,
            tp: 1,
            ep: 1,
            pp: 1,
            tiles_per_node: 12,
            schedule: ScheduleKind::OneFOneB,
            microbatches: 1,
            virtual_stages: 1,
            optim: OptimizerMode::Epso,
            fur: false,
            seed: 0,
            steps: 20,
            global_batch: None,
            lr: 3e-3,
            min_lr: 3e-4,
            warmup_steps: 5,
            weight_decay: 0.1,
            clip_norm: 1.0,
            checkpoint_dir: None,
            checkpoint_every: 0,
            persistent_every: 0,
            load_mode: LoadMode::Broadcast,
            failures: None,
            buffer_nodes: Vec::new(),
            relaunch: true,
            data: None,
            metrics: PathBuf::from("metrics.jsonl"),
            emit_csv: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::Config(format!("{key}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl RunConfig {
    /// Defaults with the seed taken from the environment when set.
    pub fn from_env() -> Result<Self> {
        let mut c = Self::default();
        if let Ok(s) = std::env::var(SEED_ENV) {
            c.seed = parse(SEED_ENV, s.trim())?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key.trim().replace('-', "_").as_str() {
            "preset" => self.preset = v.to_string(),
            "layers" => self.layers = Some(parse(key, v)?),
            "hidden_size" => self.hidden_size = Some(parse(key, v)?),
            "heads" => self.heads = Some(parse(key, v)?),
            "head_size" => self.head_size = Some(parse(key, v)?),
            "intermediate_size" => self.intermediate_size = Some(parse(key, v)?),
            "experts" => self.experts = Some(parse(key, v)?),
            "top_k" => self.top_k = Some(parse(key, v)?),
            "vocab_size" => self.vocab_size = Some(parse(key, v)?),
            "context" => self.context = Some(parse(key, v)?),
            "aux_loss_coeff" => self.aux_loss_coeff = Some(parse(key, v)?),
            "sac" => self.sac = parse(key, v)?,
            "dp" => self.dp = parse(key, v)?,
            "tp" => self.tp = parse(key, v)?,
            "ep" => self.ep = parse(key, v)?,
            "pp" => self.pp = parse(key, v)?,
            "tiles_per_node" => self.tiles_per_node = parse(key, v)?,
            "schedule" => self.schedule = parse(key, v)?,
            "microbatches" => self.microbatches = parse(key, v)?,
            "virtual_stages" => self.virtual_stages = parse(key, v)?,
            "optim" | "optimizer" => self.optim = parse(key, v)?,
            "fur" => self.fur = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "global_batch" => self.global_batch = Some(parse(key, v)?),
            "lr" => self.lr = parse(key, v)?,
            "min_lr" => self.min_lr = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "checkpoint_dir" => self.checkpoint_dir = Some(PathBuf::from(v)),
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "persistent_every" => self.persistent_every = parse(key, v)?,
            "load_mode" => {
                self.load_mode = match v {
                    "broadcast" => LoadMode::Broadcast,
                    "allreduce" => LoadMode::AllReduce,
                    "naive" => LoadMode::Naive,
                    _ => return Err(Error::Config(format!("load_mode: unknown {v:?}"))),
                }
            }
            "failures" => self.failures = Some(PathBuf::from(v)),
            "buffer_nodes" => {
                self.buffer_nodes = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "relaunch" => self.relaunch = parse_bool(key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "metrics" => self.metrics = PathBuf::from(v),
            "emit_csv" => self.emit_csv = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?}: expected key=value")))?;
        self.set(k, v)
    }

    pub fn topology(&self) -> Result<Topology> {
        Topology::new(self.dp, self.tp, self.ep, self.pp)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::by_name(&self.preset)?;
        macro_rules! over {
            ($($f:ident),*) => {$( if let Some(v) = self.$f { m.$f = v; } )*};
        }
        over!(layers, hidden_size, heads, head_size, intermediate_size, experts, top_k, vocab_size, context, aux_loss_coeff);
        m.sac = self.sac;
        m.validate()?;
        Ok(m)
    }

    pub fn global_batch(&self) -> usize {
        self.global_batch
            .unwrap_or(self.dp * self.ep * self.microbatches.max(1) * 2)
    }

    pub fn job(&self) -> Result<JobConfig> {
        let topo = self.topology()?;
        let mut j = JobConfig::new(self.model()?, topo);
        j.tiles_per_node = self.tiles_per_node;
        j.mode = self.optim;
        j.schedule = self.schedule;
        j.microbatches = self.microbatches;
        j.virtual_stages = self.virtual_stages;
        j.adam = AdamWConfig {
            peak_lr: self.lr,
            min_lr: self.min_lr,
            warmup_steps: self.warmup_steps.min(self.steps),
            total_steps: self.steps.max(1),
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..AdamWConfig::default()
        };
        j.seed = self.seed;
        j.steps = self.steps;
        j.global_batch = self.global_batch();
        j.fur = self.fur;
        j.checkpoint_dir = self.checkpoint_dir.clone();
        j.checkpoint_every = self.checkpoint_every;
        j.persistent_every = self.persistent_every;
        j.load_mode = self.load_mode;
        j.relaunch = self.relaunch;
        j.validate()?;
        Ok(j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# run\npreset = mula-tiny\ndp = 4 # four\nsac = norm,attn\nbuffer_nodes = 7, 8\nfur = on\n")
            .unwrap();
        c.apply_override("steps=3").unwrap();
        assert_eq!((c.dp, c.steps), (4, 3));
        assert!(c.fur && c.sac.checkpoint_norm && !c.sac.checkpoint_moe);
        assert_eq!(c.buffer_nodes, vec![7, 8]);
        assert_eq!(c.job().unwrap().global_batch, 8);
    }

    #[test]
    fn bad_lines_are_config_errors() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("dp 4"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("colour = red"), Err(Error::Config(_))));
        assert!(matches!(c.apply_override("dp=two"), Err(Error::Config(_))));
        c.heads = Some(0);
        assert!(c.model().is_err());
    }

    #[test]
    fn model_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("layers = 3\ncontext = 16").unwrap();
        let m = c.model().unwrap();
        assert_eq!((m.layers, m.context), (3, 16));
    }
}
