use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use optimus_desk::comm::Topology;
use optimus_desk::model::ModelConfig;
use optimus_desk::optim::OptimizerMode;
use optimus_desk::{Error, Result};

mod commands;
mod config;
mod verify;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "optimus-desk", version, about = "Deterministic multi-rank MoE training simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Tokenize a directory of documents into shuffled shards.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        context: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = optimus_desk::data::DEFAULT_SHARD_SIZE)]
        shard_size: usize,
    },
    /// Parameter counts and per-rank memory for a preset and topology.
    Plan {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 1)]
        dp: usize,
        #[arg(long, default_value_t = 1)]
        tp: usize,
        #[arg(long, default_value_t = 1)]
        ep: usize,
        #[arg(long, default_value_t = 1)]
        pp: usize,
        #[arg(long)]
        optim: Option<OptimizerMode>,
        #[arg(long)]
        json: bool,
    },
    /// Run a simulated training job.
    Train(TrainArgs),
    /// Time reference against optimized components.
    Bench {
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Run built-in consistency checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dp: Option<usize>,
    #[arg(long)]
    tp: Option<usize>,
    #[arg(long)]
    ep: Option<usize>,
    #[arg(long)]
    pp: Option<usize>,
    #[arg(long)]
    optim: Option<String>,
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    microbatches: Option<usize>,
    #[arg(long)]
    fur: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    failures: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    csv: bool,
}

impl TrainArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = RunConfig::from_env()?;
        if let Some(p) = &self.config {
            c.apply_file(p)?;
        }
        for kv in &self.set {
            c.apply_override(kv)?;
        }
        let path = |p: &PathBuf| p.to_string_lossy().into_owned();
        let flags: [(&str, Option<String>); 14] = [
            ("preset", self.preset.clone()),
            ("steps", self.steps.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("dp", self.dp.map(|v| v.to_string())),
            ("tp", self.tp.map(|v| v.to_string())),
            ("ep", self.ep.map(|v| v.to_string())),
            ("pp", self.pp.map(|v| v.to_string())),
            ("optim", self.optim.clone()),
            ("schedule", self.schedule.clone()),
            ("microbatches", self.microbatches.map(|v| v.to_string())),
            ("data", self.data.as_ref().map(path)),
            ("failures", self.failures.as_ref().map(path)),
            ("checkpoint_dir", self.checkpoint_dir.as_ref().map(path)),
            ("metrics", self.metrics.as_ref().map(path)),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
        }
        c.fur |= self.fur;
        c.emit_csv |= self.csv;
        Ok(c)
    }
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Preprocess {
            input,
            context,
            seed,
            out,
            shard_size,
        } => println!("{}", commands::preprocess(&input, context, seed, shard_size, &out)?),
        Cmd::Plan {
            preset,
            dp,
            tp,
            ep,
            pp,
            optim,
            json,
        } => {
            let r = commands::plan(ModelConfig::by_name(&preset)?, Topology::new(dp, tp, ep, pp)?, optim)?;
            if json {
                println!("{}", r.to_json());
            } else {
                print!("{}", r.to_text());
            }
        }
        Cmd::Train(args) => {
            let cfg = args.config()?;
            let report = commands::train(&cfg)?;
            let traj = report.trajectory();
            commands::write_metrics(&cfg.metrics, &traj, cfg.emit_csv)?;
            for ev in &report.relaunches {
                eprintln!("relaunch {}", serde_json::to_string(ev)?);
            }
            if let Some(last) = traj.last() {
                println!(
                    "trained {} steps: loss {:.6} aux {:.6} relaunches {} metrics {}",
                    last.step,
                    last.loss,
                    last.aux_loss,
                    report.relaunches.len(),
                    cfg.metrics.display()
                );
            }
        }
        Cmd::Bench { reps, seed, json } => {
            let r = commands::bench(reps.max(1), seed)?;
            if json {
                println!("{}", serde_json::to_string(&r)?);
            } else {
                print!("{}", r.to_text());
            }
        }
        Cmd::Verify { seed } => {
            let checks = verify::verify(seed);
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn classify(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) | Error::Data(_) => ("config", 2),
        Error::SoftFailure { .. } => ("soft_failure", 3),
        Error::HardFailure { .. } => ("hard_failure", 4),
        Error::BufferExhausted { .. } => ("buffer_exhausted", 5),
        _ => ("internal", 1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let (kind, code) = classify(&e);
            eprintln!("error kind={kind} msg={:?}", e.to_string());
            ExitCode::from(code)
        }
    }
}
